"""Hamiltonian Monte Carlo with jittered path length and dual-averaging step size.

The integrator is kick-drift-kick leapfrog under a diagonal mass matrix.
During burn-in the step size is tuned by dual averaging toward a target
acceptance rate; the diagonal mass is estimated from draws in the second
half of burn-in, after which the step size is re-tuned. Everything is frozen
once burn-in ends.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import (
    AllDivergentError,
    CorruptFileError,
    NonFiniteInitError,
    TooFewDrawsError,
    ValidationError,
    VersionUnsupportedError,
)

logger = logging.getLogger(__name__)


class TargetDensity:
    """Log density on unconstrained ``R^d`` with its gradient.

    Subclasses override :meth:`logp_and_grad`; alternatively pass a callable
    returning ``(logp, grad)``.

    Parameters
    ----------
    dim : int
    fn : callable, optional
        ``q -> (logp, grad)``.
    names : dict, optional
        Block name to ``(start, stop, shape)`` in the flat vector.
    """

    def __init__(self, dim, fn=None, names=None):
        self.dim = int(dim)
        self._fn = fn
        self.names = dict(names) if names else {"q": (0, self.dim, (self.dim,))}

    def logp_and_grad(self, q):
        return self._fn(q)

    def log_density(self, q) -> float:
        return self.logp_and_grad(q)[0]

    def gradient(self, q) -> np.ndarray:
        return self.logp_and_grad(q)[1]

    def initial_point(self) -> np.ndarray:
        return np.zeros(self.dim)


def check_target_gradient(target: TargetDensity, points, eps=1e-5, n_coords=None, rng=None,
                          floor=1e-3):
    """Max relative error of ``target`` gradients against central differences.

    ``points`` is an ``(n, d)`` array. With ``n_coords`` only that many random
    coordinates are probed per point. The rounding error of the difference
    quotient, ``~ |logp| * machine_eps / eps``, is subtracted first so that a
    huge log density (e.g. a nearly exact observation) does not register as a
    gradient error.
    """
    rng = np.random.default_rng(rng)
    worst = 0.0
    for q in np.atleast_2d(points):
        _, g = target.logp_and_grad(q)
        coords = np.arange(target.dim)
        if n_coords is not None and n_coords < target.dim:
            coords = rng.choice(target.dim, size=n_coords, replace=False)
        for i in coords:
            e = np.zeros(target.dim)
            e[i] = eps
            fp, fm = target.logp_and_grad(q + e)[0], target.logp_and_grad(q - e)[0]
            num = (fp - fm) / (2 * eps)
            noise = 4 * np.finfo(float).eps * max(abs(fp), abs(fm)) / eps
            err = max(abs(g[i] - num) - noise, 0.0)
            worst = max(worst, err / max(abs(g[i]), abs(num), floor))
    return worst


@dataclass
class HmcConfig:
    n_iterations: int = 20000
    n_burnin: int = 10000
    n_chains: int = 4
    target_accept: float = 0.8
    max_leapfrog_steps: int = 64
    jitter_steps: bool = True
    init_jitter: float = 0.1
    seed: int | None = 0
    divergence_threshold: float = 1000.0
    adapt_mass: bool = True
    check_gradients: bool = True
    gradient_tolerance: float = 1e-3

    def __post_init__(self):
        if not 0 <= self.n_burnin < self.n_iterations:
            raise ValidationError("need 0 <= n_burnin < n_iterations")
        if not 0 < self.target_accept < 1:
            raise ValidationError("target_accept must be in (0, 1)")
        if self.n_chains < 1 or self.max_leapfrog_steps < 1:
            raise ValidationError("n_chains and max_leapfrog_steps must be positive")


@dataclass
class PosteriorDraws:
    draws: np.ndarray  # (chains, kept, d)
    names: dict
    accept_prob: np.ndarray  # (chains, kept)
    step_size: np.ndarray  # (chains,)
    inv_mass: np.ndarray  # (chains, d)
    divergences: np.ndarray  # (chains,) post-burn-in counts
    n_leapfrog: np.ndarray  # (chains,) total gradient evaluations
    n_burnin: int = 0
    derived: dict = field(default_factory=dict)  # name -> (chains, kept, *shape)

    @property
    def n_chains(self):
        return self.draws.shape[0]

    @property
    def n_kept(self):
        return self.draws.shape[1]

    def block(self, name) -> np.ndarray:
        """Draws of one named or derived block, shape ``(chains, kept, *block_shape)``."""
        if name in self.derived:
            return self.derived[name]
        start, stop, shape = self.names[name]
        return self.draws[:, :, start:stop].reshape(self.draws.shape[:2] + tuple(shape))

    def flat(self, name=None) -> np.ndarray:
        """Chains pooled: ``(chains * kept, ...)``."""
        x = self.draws if name is None else self.block(name)
        return x.reshape((-1,) + x.shape[2:])


def _step(q, p, logp, grad, eps, inv_mass, target):
    p = p + 0.5 * eps * grad
    q = q + eps * inv_mass * p
    logp, grad = target.logp_and_grad(q)
    p = p + 0.5 * eps * grad
    return q, p, logp, grad


def _integrate(q, p, eps, n_steps, target, inv_mass, logp=None, grad=None):
    if logp is None:
        logp, grad = target.logp_and_grad(q)
    for _ in range(int(n_steps)):
        q, p, logp, grad = _step(q, p, logp, grad, eps, inv_mass, target)
        if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
            return q, p, -np.inf, grad, False
    return q, p, logp, grad, True


def leapfrog(position, momentum, step_size, n_steps, target: TargetDensity, inv_mass=None):
    """Kick-drift-kick integration; returns ``(position, momentum)``.

    A non-finite log density along the path yields ``-inf``-energy output,
    which the sampler records as a divergence.
    """
    q = np.asarray(position, dtype=float).copy()
    p = np.asarray(momentum, dtype=float).copy()
    if inv_mass is None:
        inv_mass = np.ones_like(q)
    q, p, _, _, _ = _integrate(q, p, float(step_size), n_steps, target, inv_mass)
    return q, p


def hamiltonian(target, q, p, inv_mass=None):
    inv_mass = np.ones_like(p) if inv_mass is None else inv_mass
    return -target.log_density(q) + 0.5 * float(np.sum(inv_mass * p * p))


class _DualAveraging:
    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * eps0)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h = 0.0
        self.log_eps_bar = 0.0
        self.t = 0

    def update(self, accept):
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.h = (1 - w) * self.h + w * (self.target - accept)
        log_eps = self.mu - np.sqrt(self.t) / self.gamma * self.h
        eta = self.t ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1 - eta) * self.log_eps_bar
        return float(np.exp(log_eps))

    @property
    def final(self):
        return float(np.exp(self.log_eps_bar))


def _initial_step_size(q, logp, grad, target, inv_mass, rng):
    eps = 1.0
    p = rng.standard_normal(q.shape) / np.sqrt(inv_mass)
    h0 = -logp + 0.5 * np.sum(inv_mass * p * p)

    def log_ratio(e):
        q1, p1, lp1, _, ok = _integrate(q, p, e, 1, target, inv_mass, logp, grad)
        if not ok:
            return -np.inf
        return h0 - (-lp1 + 0.5 * np.sum(inv_mass * p1 * p1))

    r = log_ratio(eps)
    direction = 1 if r > np.log(0.5) else -1
    for _ in range(100):
        if direction == 1 and not r > np.log(0.5):
            break
        if direction == -1 and not r < np.log(0.5):
            break
        eps = eps * (2.0 ** direction)
        r = log_ratio(eps)
    return eps


def _run_one_chain(target, cfg: HmcConfig, rng, q0):
    d = target.dim
    q = q0.copy()
    logp, grad = target.logp_and_grad(q)
    if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
        raise NonFiniteInitError(f"log density not finite at initial point: {logp}")
    inv_mass = np.ones(d)
    B = cfg.n_burnin
    n_keep = cfg.n_iterations - B
    eps = _initial_step_size(q, logp, grad, target, inv_mass, rng)
    da = _DualAveraging(eps, cfg.target_accept)
    use_mass = cfg.adapt_mass and B >= 40
    w_start, w_end = B // 2, int(0.8 * B)
    window = []
    out = np.empty((n_keep, d))
    acc_out = np.empty(n_keep)
    div = 0
    n_grad = 0
    for it in range(cfg.n_iterations):
        p = rng.standard_normal(d) / np.sqrt(inv_mass)
        n_steps = int(rng.integers(1, cfg.max_leapfrog_steps + 1)) if cfg.jitter_steps \
            else cfg.max_leapfrog_steps
        h0 = -logp + 0.5 * float(np.sum(inv_mass * p * p))
        q1, p1, lp1, g1, ok = _integrate(q, p, eps, n_steps, target, inv_mass, logp, grad)
        n_grad += n_steps
        if ok:
            h1 = -lp1 + 0.5 * float(np.sum(inv_mass * p1 * p1))
            dh = h1 - h0
            divergent = not np.isfinite(dh) or dh > cfg.divergence_threshold
        else:
            divergent = True
        if divergent:
            accept = 0.0
        else:
            accept = float(np.exp(min(0.0, -dh)))
            if rng.uniform() < accept:
                q, logp, grad = q1, lp1, g1
        if it < B:
            eps = da.update(accept)
            if use_mass and w_start <= it < w_end:
                window.append(q.copy())
            if use_mass and it == w_end - 1:
                n = len(window)
                var = np.var(np.asarray(window), axis=0)
                inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                window = []
                eps = _initial_step_size(q, logp, grad, target, inv_mass, rng)
                da = _DualAveraging(eps, cfg.target_accept)
            if it == B - 1:
                eps = da.final
        else:
            k = it - B
            out[k] = q
            acc_out[k] = accept
            div += int(divergent)
    return out, acc_out, eps, inv_mass, div, n_grad


def as_seed_sequence(seed) -> np.random.SeedSequence:
    """A fresh ``SeedSequence`` from an int, a ``SeedSequence`` (copied) or a ``Generator``."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key,
                                      pool_size=seed.pool_size)
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(int(seed.integers(2**63)))
    return np.random.SeedSequence(seed)


def chain_seeds(seed, n_chains):
    return as_seed_sequence(seed).spawn(n_chains)


def run_chain(target: TargetDensity, config: HmcConfig | None = None, rng=None) -> PosteriorDraws:
    """Run ``config.n_chains`` independent chains and collect post-burn-in draws.

    Chain ``c`` uses the ``c``-th child of ``SeedSequence(config.seed)`` (or of
    ``rng`` when given as a seed/SeedSequence) and starts from the target's
    initial point plus ``N(0, init_jitter^2)`` noise.
    """
    cfg = config or HmcConfig()
    seed = as_seed_sequence(cfg.seed if rng is None else rng)
    streams = [np.random.default_rng(s) for s in chain_seeds(seed, cfg.n_chains)]
    base = np.asarray(target.initial_point(), dtype=float)
    if cfg.check_gradients:
        probe = np.random.default_rng(as_seed_sequence(seed).generate_state(1)[0])
        pts = base + cfg.init_jitter * probe.standard_normal((10, target.dim))
        err = check_target_gradient(target, pts, n_coords=min(target.dim, 20), rng=probe)
        if not err < cfg.gradient_tolerance:
            raise ValidationError(f"target gradient check failed: relative error {err:.3g}")
    results = []
    for rng_c in streams:
        q0 = base + cfg.init_jitter * rng_c.standard_normal(target.dim)
        results.append(_run_one_chain(target, cfg, rng_c, q0))
    draws = np.stack([r[0] for r in results])
    out = PosteriorDraws(
        draws=draws,
        names=dict(target.names),
        accept_prob=np.stack([r[1] for r in results]),
        step_size=np.array([r[2] for r in results]),
        inv_mass=np.stack([r[3] for r in results]),
        divergences=np.array([r[4] for r in results]),
        n_leapfrog=np.array([r[5] for r in results]),
        n_burnin=cfg.n_burnin,
    )
    n_keep = draws.shape[1]
    if n_keep and out.divergences.sum() > 0.5 * n_keep * cfg.n_chains:
        raise AllDivergentError(
            f"{int(out.divergences.sum())} of {n_keep * cfg.n_chains} post-burn-in "
            "iterations diverged")
    return out


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass
class ChainDiagnostics:
    rhat: np.ndarray
    ess: np.ndarray
    blocks: dict = field(default_factory=dict)
    mean_accept: float = float("nan")
    divergences: int = 0

    def max_rhat(self) -> float:
        finite = self.rhat[np.isfinite(self.rhat)]
        return float(finite.max()) if finite.size else float("nan")

    def to_dict(self) -> dict:
        return {
            "blocks": self.blocks,
            "mean_accept": self.mean_accept,
            "divergences": self.divergences,
            "max_rhat": self.max_rhat(),
        }


def _autocov(x):
    """Autocovariance of each row via FFT; ``x`` is ``(m, n)``."""
    m, n = x.shape
    xc = x - x.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, n=size, axis=1)
    ac = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return ac / n


def split_rhat_ess(chains: np.ndarray):
    """Split R-hat and effective sample size for one scalar, ``chains`` is ``(m, n)``.

    Returns ``(nan, nan)`` for a constant (degenerate) quantity.
    """
    m, n = chains.shape
    half = n // 2
    x = np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)
    m2, n2 = x.shape
    means = x.mean(axis=1)
    var_w = x.var(axis=1, ddof=1)
    W = var_w.mean()
    B = n2 * means.var(ddof=1)
    if not W > 0:
        return float("nan"), float("nan")
    var_plus = (n2 - 1) / n2 * W + B / n2
    rhat = float(np.sqrt(var_plus / W))
    acov = _autocov(x)
    rho = 1.0 - (W - acov.mean(axis=0) * n2 / (n2 - 1)) / var_plus
    rho[0] = 1.0
    # Geyer initial monotone positive sequence over paired lags
    tau = -1.0
    prev = np.inf
    for t in range(0, n2 - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        prev = pair
        tau += 2.0 * pair
    tau = max(tau, 1.0 / np.log10(m2 * n2))
    ess = float(min(m2 * n2 / tau, m2 * n2 * np.log10(m2 * n2)))
    return rhat, ess


def diagnostics(draws: PosteriorDraws) -> ChainDiagnostics:
    """Split R-hat and ESS per coordinate, aggregated per named block.

    Derived blocks are appended after the sampled coordinates.
    """
    c, n, _ = draws.draws.shape
    if c < 2 or n < 100:
        raise TooFewDrawsError(f"need >= 2 chains and >= 100 kept draws, got {c} x {n}")
    parts = [draws.draws] + [v.reshape(c, n, -1) for v in draws.derived.values()]
    allx = np.concatenate(parts, axis=2)
    d = allx.shape[2]
    rhat = np.empty(d)
    ess = np.empty(d)
    for i in range(d):
        rhat[i], ess[i] = split_rhat_ess(allx[:, :, i])
    spans = {name: (a, b) for name, (a, b, _) in draws.names.items()}
    off = draws.draws.shape[2]
    for name, v in draws.derived.items():
        size = int(np.prod(v.shape[2:]))
        spans[name] = (off, off + size)
        off += size
    blocks = {}
    for name, (start, stop) in spans.items():
        r = rhat[start:stop]
        e = ess[start:stop]
        fin = np.isfinite(r)
        blocks[name] = {
            "max_rhat": float(r[fin].max()) if fin.any() else None,
            "min_ess": float(e[fin].min()) if fin.any() else None,
            "degenerate": bool((~fin).any()),
        }
    return ChainDiagnostics(rhat, ess, blocks, float(draws.accept_prob.mean()),
                            int(draws.divergences.sum()))


# ---------------------------------------------------------------------------
# Draws file: magic, version, header length, JSON header, column-major payload

_DRAWS_MAGIC = b"SAEDRAWS"
_DRAWS_VERSION = 1
_DRAWS_HEAD = struct.Struct("<8sHQ")


def save_draws(draws: PosteriorDraws, path, diagnostics_path=None, diag=None) -> None:
    c, n, d = draws.draws.shape
    header = {
        "chains": c, "kept": n, "dim": d, "n_burnin": draws.n_burnin,
        "names": {k: [int(a), int(b), list(s)] for k, (a, b, s) in draws.names.items()},
        "step_size": draws.step_size.tolist(),
        "divergences": draws.divergences.tolist(),
        "n_leapfrog": draws.n_leapfrog.tolist(),
        "derived": {k: list(v.shape[2:]) for k, v in draws.derived.items()},
    }
    hb = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_DRAWS_HEAD.pack(_DRAWS_MAGIC, _DRAWS_VERSION, len(hb)))
        fh.write(hb)
        # one contiguous column per parameter, then the acceptance column, then inverse mass
        fh.write(np.ascontiguousarray(draws.draws.transpose(2, 0, 1), dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(draws.accept_prob, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(draws.inv_mass, dtype="<f8").tobytes())
        for v in draws.derived.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    if diagnostics_path is not None:
        diag = diag if diag is not None else diagnostics(draws)
        with open(diagnostics_path, "w", encoding="utf-8") as fh:
            json.dump(diag.to_dict(), fh, indent=2)


def load_draws(path) -> PosteriorDraws:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _DRAWS_HEAD.size:
        raise CorruptFileError("draws file truncated")
    magic, version, hlen = _DRAWS_HEAD.unpack_from(blob)
    if magic != _DRAWS_MAGIC:
        raise CorruptFileError("not a draws file")
    if version != _DRAWS_VERSION:
        raise VersionUnsupportedError(f"draws file version {version}")
    off = _DRAWS_HEAD.size
    h = json.loads(blob[off:off + hlen].decode("utf-8"))
    off += hlen
    c, n, d = h["chains"], h["kept"], h["dim"]
    derived_shapes = h.get("derived", {})
    n_derived = sum(c * n * int(np.prod(s)) for s in derived_shapes.values())
    if len(blob) - off != 8 * (d * c * n + c * n + c * d + n_derived):
        raise CorruptFileError("draws payload size does not match header")
    cols = np.frombuffer(blob, "<f8", d * c * n, off).reshape(d, c, n)
    off += 8 * d * c * n
    acc = np.frombuffer(blob, "<f8", c * n, off).reshape(c, n)
    off += 8 * c * n
    inv_mass = np.frombuffer(blob, "<f8", c * d, off).reshape(c, d)
    off += 8 * c * d
    derived = {}
    for name, shape in derived_shapes.items():
        size = c * n * int(np.prod(shape))
        derived[name] = np.frombuffer(blob, "<f8", size, off).reshape((c, n, *shape)).copy()
        off += 8 * size
    return PosteriorDraws(
        draws=np.ascontiguousarray(cols.transpose(1, 2, 0)),
        names={k: (a, b, tuple(s)) for k, (a, b, s) in h["names"].items()},
        accept_prob=acc.copy(),
        step_size=np.array(h["step_size"]),
        inv_mass=inv_mass.copy(),
        divergences=np.array(h["divergences"]),
        n_leapfrog=np.array(h["n_leapfrog"]),
        n_burnin=h["n_burnin"],
        derived=derived,
    )


def config_dict(cfg: HmcConfig) -> dict:
    return asdict(cfg)
