"""Exact samplers and log-densities for CAR, separable MCAR and GMCAR priors.

All samplers work from the sparse precision factor; no covariance matrix is
ever formed. Draws are returned with the draw index first.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    CorruptFileError,
    NonPositiveScaleError,
    SigmaNotPDError,
    ValidationError,
    VersionUnsupportedError,
)
from .graph import CarPrecision, RegionGraph, car_precision

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class CarSample:
    values: np.ndarray  # (n_draws, N)
    rho_used: np.ndarray  # (n_draws,)


@dataclass(frozen=True)
class SeparableSample:
    phi: np.ndarray  # (n_draws, N, K)
    psi: np.ndarray  # (n_draws, N, K)
    sigma_resp: np.ndarray
    chol: np.ndarray


@dataclass(frozen=True)
class GmcarParams:
    sigma2_1: float
    sigma2_2: float
    rho_1: float
    rho_2: float
    eta_0: float
    eta_1: float


@dataclass(frozen=True)
class GmcarSample:
    phi1: np.ndarray  # (n_draws, N)
    phi2: np.ndarray
    params: GmcarParams


def _check_scale(sigma2):
    sigma2 = float(sigma2)
    if not sigma2 > 0 or not np.isfinite(sigma2):
        raise NonPositiveScaleError(f"variance must be positive, got {sigma2}")
    return sigma2


def _car_draws(prec: CarPrecision, n_draws: int, rng) -> np.ndarray:
    e = np.random.default_rng(rng).standard_normal((prec.graph.n_regions, n_draws))
    return prec.whiten_inverse(e).T


def sample_car(graph: RegionGraph, rho, sigma2, n_draws, rng) -> CarSample:
    """Draw ``n_draws`` vectors from ``N(0, sigma2 (D - rho W)^{-1})``."""
    prec = car_precision(graph, rho)
    sigma2 = _check_scale(sigma2)
    x = np.sqrt(sigma2) * _car_draws(prec, int(n_draws), rng)
    return CarSample(x, np.full(int(n_draws), prec.rho))


def _chol_pd(Sigma) -> np.ndarray:
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if Sigma.shape[0] != Sigma.shape[1] or not np.allclose(Sigma, Sigma.T):
        raise SigmaNotPDError("Sigma must be a symmetric square matrix")
    try:
        return np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise SigmaNotPDError("Sigma is not positive definite") from exc


def sample_separable(graph: RegionGraph, rho, Sigma, n_draws, rng) -> SeparableSample:
    """Draw ``phi = psi L'`` where the K columns of ``psi`` are iid CAR(rho) fields.

    ``vec`` of each row-major ``phi`` draw has covariance ``Q^{-1} kron Sigma``.
    The spatial factor ``psi`` is drawn before ``Sigma`` is used, so the same
    stream gives the same ``psi`` for every ``Sigma``.
    """
    L = _chol_pd(Sigma)
    K = L.shape[0]
    prec = car_precision(graph, rho)
    n = int(n_draws)
    psi = _car_draws(prec, n * K, rng).reshape(n, K, -1).transpose(0, 2, 1)
    phi = psi @ L.T
    return SeparableSample(phi, psi, L @ L.T, L)


def sample_gmcar(graph: RegionGraph, params: GmcarParams, n_draws, rng) -> GmcarSample:
    """Draw ``phi2`` from its marginal CAR and ``phi1 | phi2`` from the conditional CAR."""
    n = int(n_draws)
    s1 = _check_scale(params.sigma2_1)
    s2 = _check_scale(params.sigma2_2)
    prec1 = car_precision(graph, params.rho_1)
    prec2 = car_precision(graph, params.rho_2)
    rng = np.random.default_rng(rng)
    phi2 = np.sqrt(s2) * _car_draws(prec2, n, rng)
    mean1 = params.eta_0 * phi2 + params.eta_1 * (graph.adjacency @ phi2.T).T
    phi1 = mean1 + np.sqrt(s1) * _car_draws(prec1, n, rng)
    return GmcarSample(phi1, phi2, params)


def car_logpdf(graph: RegionGraph, rho, sigma2, x, prec: CarPrecision | None = None) -> float:
    """Log density of ``N(0, sigma2 Q(rho)^{-1})`` at ``x``."""
    if prec is None:
        prec = car_precision(graph, rho)
    sigma2 = _check_scale(sigma2)
    x = np.asarray(x, dtype=float)
    n = graph.n_regions
    return (
        -0.5 * n * (LOG_2PI + np.log(sigma2))
        + 0.5 * prec.logdet
        - 0.5 * prec.quad(x) / sigma2
    )


def gmcar_logpdf(graph: RegionGraph, params: GmcarParams, phi1, phi2) -> float:
    """Joint log density as marginal ``phi2`` plus conditional ``phi1 - A phi2``."""
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    resid = phi1 - params.eta_0 * phi2 - params.eta_1 * (graph.adjacency @ phi2)
    return car_logpdf(graph, params.rho_2, params.sigma2_2, phi2) + car_logpdf(
        graph, params.rho_1, params.sigma2_1, resid
    )


def separable_logpdf(graph: RegionGraph, rho, Sigma, phi) -> float:
    """Matrix-normal log density of an ``N x K`` field with covariance ``Q^{-1} kron Sigma``.

    Uses the trace identity ``vec(phi)' (Q kron Sigma^{-1}) vec(phi) =
    tr(Sigma^{-1} phi' Q phi)``.
    """
    L = _chol_pd(Sigma)
    prec = car_precision(graph, rho)
    phi = np.asarray(phi, dtype=float)
    n, k = phi.shape
    S = phi.T @ (prec.matrix @ phi)
    Linv = np.linalg.inv(L)
    quad = float(np.trace(Linv.T @ Linv @ S))
    logdet_sigma = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * n * k * LOG_2PI + 0.5 * k * prec.logdet - 0.5 * n * logdet_sigma - 0.5 * quad


# ---------------------------------------------------------------------------
# Training sets for the spatial-prior VAE

LAYOUTS = ("univariate", "vectorized")
_LAYOUT_TAG = {"univariate": 1, "vectorized": 2}
_TRAIN_MAGIC = b"SAETRAIN"
_TRAIN_VERSION = 1
_TRAIN_HEADER = struct.Struct("<8sHHqqq")


@dataclass(frozen=True)
class TrainingSet:
    layout: str
    samples: np.ndarray  # (n_samples, N * K), K columns stacked per row
    rhos: np.ndarray  # (n_samples,)
    n_regions: int
    K: int

    @property
    def dim(self) -> int:
        return self.n_regions * self.K


def normalize_layout(layout: str) -> str:
    aliases = {"uni": "univariate", "univariate-n": "univariate",
               "vec": "vectorized", "vectorized-nk": "vectorized"}
    layout = aliases.get(str(layout).lower(), str(layout).lower())
    if layout not in LAYOUTS:
        raise ValidationError(f"unknown layout {layout!r}")
    return layout


def generate_training_set(graph: RegionGraph, n_samples=10000, layout="univariate",
                          K=1, rng=None) -> TrainingSet:
    """Draw VAE training data from the unit-scale CAR prior with ``rho ~ Unif(0, 1)``.

    Each sample gets its own rho; in the vectorized layout the K columns of
    one sample share it and are concatenated column by column.
    """
    layout = normalize_layout(layout)
    if layout == "univariate":
        if K != 1:
            raise ValidationError("univariate layout requires K=1")
    elif K < 1:
        raise ValidationError("K must be positive")
    rng = np.random.default_rng(rng)
    n = graph.n_regions
    samples = np.empty((int(n_samples), n * K))
    rhos = rng.uniform(0.0, 1.0, size=int(n_samples))
    for s, rho in enumerate(rhos):
        prec = CarPrecision(graph, rho)
        samples[s] = prec.whiten_inverse(rng.standard_normal((n, K))).T.ravel()
    return TrainingSet(layout, samples, rhos, n, int(K))


def save_training_set(ts: TrainingSet, path, graph_hash: str = "", seed=None) -> None:
    """Write the binary training file plus a ``<path>.json`` sidecar."""
    with open(path, "wb") as fh:
        fh.write(_TRAIN_HEADER.pack(_TRAIN_MAGIC, _TRAIN_VERSION, _LAYOUT_TAG[ts.layout],
                                    ts.n_regions, ts.K, len(ts.samples)))
        fh.write(np.ascontiguousarray(ts.rhos, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ts.samples, dtype="<f8").tobytes())
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump({"graph_sha256": graph_hash, "seed": seed, "layout": ts.layout,
                   "n_regions": ts.n_regions, "K": ts.K, "n_samples": len(ts.samples)},
                  fh, indent=2)


def load_training_set(path) -> TrainingSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _TRAIN_HEADER.size:
        raise CorruptFileError("training file truncated")
    magic, version, tag, n, k, m = _TRAIN_HEADER.unpack_from(blob)
    if magic != _TRAIN_MAGIC:
        raise CorruptFileError("not a training-set file")
    if version != _TRAIN_VERSION:
        raise VersionUnsupportedError(f"training-set version {version}")
    layout = {v: key for key, v in _LAYOUT_TAG.items()}.get(tag)
    if layout is None:
        raise CorruptFileError(f"unknown layout tag {tag}")
    off = _TRAIN_HEADER.size
    expected = off + 8 * (m + m * n * k)
    if len(blob) != expected:
        raise CorruptFileError("training file size does not match header")
    rhos = np.frombuffer(blob, dtype="<f8", count=m, offset=off).copy()
    samples = np.frombuffer(blob, dtype="<f8", count=m * n * k, offset=off + 8 * m)
    return TrainingSet(layout, samples.reshape(m, n * k).copy(), rhos, int(n), int(k))
