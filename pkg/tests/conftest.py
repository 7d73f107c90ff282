import numpy as np
import pytest

from sae.graph import RegionGraph, lattice_graph, load_edge_list

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def path2():
    return load_edge_list("a b")


@pytest.fixture
def cycle4():
    return load_edge_list("a b\nb c\nc d\nd a")


@pytest.fixture
def lattice3():
    return lattice_graph(3, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_connected_graph(n, extra, seed) -> RegionGraph:
    """A random spanning tree plus ``extra`` random chords."""
    r = np.random.default_rng(seed)
    ids = [f"g{i}" for i in range(n)]
    edges = set()
    for i in range(1, n):
        j = int(r.integers(0, i))
        edges.add((j, i))
    for _ in range(extra):
        i, j = sorted(r.choice(n, 2, replace=False))
        edges.add((int(i), int(j)))
    return RegionGraph(ids, np.array(sorted(edges)))


def random_decoder(graph, layout="univariate", K=1, seed=0, latent_dim=None):
    """Untrained decoder artifact bound to ``graph`` (enough for density and gradient tests)."""
    from sae.vae import DecoderArtifact, init_vae

    dim = graph.n_regions * (K if layout == "vectorized" else 1)
    model = init_vae(dim, seed=seed, latent_dim=latent_dim)
    r = np.random.default_rng(seed)
    for k in ("dec_b1", "dec_bout"):
        model.params[k] = 0.1 * r.standard_normal(model.params[k].shape)
    return DecoderArtifact.from_model(model, {"graph_sha256": graph.content_hash,
                                              "layout": layout, "K": K})
