"""Simulation study driver: synthetic truth, replicated direct estimates, model comparison."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import pandas as pd

from . import metrics
from .exceptions import SaeError, ValidationError
from .graph import RegionGraph, lattice_graph, read_edge_list
from .hmc import HmcConfig, as_seed_sequence, diagnostics
from .models import (KINDS, DirectEstimateTable, ModelSpec, fit, normalize_kind,
                     summarize_theta)
from .priors import GmcarParams, generate_training_set, sample_gmcar
from .vae import DecoderArtifact, TrainConfig, init_vae, train

logger = logging.getLogger(__name__)

Z95 = 1.959963984540054


def train_prior(graph: RegionGraph, layout="univariate", K=1, n_samples=10000, seed=0,
                config: TrainConfig | None = None) -> DecoderArtifact:
    """Generate CAR training draws on ``graph`` and fit the VAE; return its decoder."""
    ss = as_seed_sequence(seed)
    data_seed, init_seed, train_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    ts = generate_training_set(graph, n_samples, layout, K, np.random.default_rng(data_seed))
    model = init_vae(ts.dim, seed=init_seed)
    cfg = config or TrainConfig()
    cfg = TrainConfig(**{**asdict(cfg), "seed": train_seed})
    model, trace = train(model, ts, cfg)
    return DecoderArtifact.from_model(model, {
        "graph_sha256": graph.content_hash,
        "layout": ts.layout,
        "K": K,
        "seed": None if isinstance(seed, np.random.SeedSequence) else seed,
        "n_samples": n_samples,
        "final_elbo": trace.final_elbo,
        "epochs_run": len(trace.elbo),
    })


def simulate_direct(truth, gamma, rng):
    """Direct estimates ``truth + N(0, gamma^2)`` cell by cell."""
    truth = np.asarray(truth, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if truth.shape != gamma.shape:
        raise ValidationError(f"truth {truth.shape} and gamma {gamma.shape} differ in shape")
    if np.any(gamma <= 0):
        raise ValidationError("gamma must be positive")
    rng = np.random.default_rng(rng)
    return truth + gamma * rng.standard_normal(truth.shape)


@dataclass
class SimulationConfig:
    """Study settings; ``from_dict`` accepts the JSON config schema.

    The synthetic truth lives on the log scale: ``theta = X beta + phi`` with
    ``phi`` one GMCAR draw and ``X`` an intercept plus standard-normal
    covariates. Sampling errors ``gamma`` are drawn once from
    ``Unif(gamma_low, gamma_high)`` and held fixed across replicates. With
    ``graph_path`` and ``truth_path`` the truth comes from files instead
    (columns ``region_id, truth_<name>, se_<name>, x_<cov>...``).
    """

    rows: int = 10
    cols: int = 10
    K: int = 2
    n_covariates: int = 1
    beta: list = field(default_factory=lambda: [[2.0, 1.5], [0.5, -0.3]])
    gmcar: dict = field(default_factory=lambda: {
        "sigma2_1": 0.3, "sigma2_2": 0.3, "rho_1": 0.95, "rho_2": 0.95,
        "eta_0": 0.5, "eta_1": 0.1})
    gamma_low: float = 0.2
    gamma_high: float = 0.5
    n_replicates: int = 20
    models: list = field(default_factory=lambda: ["fh", "gms", "vgms"])
    hmc: dict = field(default_factory=lambda: {
        "n_iterations": 4000, "n_burnin": 2000, "n_chains": 2, "max_leapfrog_steps": 32})
    vae: dict = field(default_factory=dict)
    n_train_samples: int = 10000
    decoders: dict = field(default_factory=dict)  # layout -> artifact path
    mask_fraction: float = 0.0
    gmcar_order: int = 1
    vsms_scale: str = "cholesky"
    graph_path: str | None = None
    truth_path: str | None = None
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ValidationError("n_replicates must be at least 1")
        self.models = [normalize_kind(m) for m in self.models]
        if not set(self.models) <= set(KINDS):
            raise ValidationError(f"models must be a subset of {KINDS}")
        if not 0 <= self.mask_fraction < 1:
            raise ValidationError("mask_fraction must lie in [0, 1)")
        if self.gamma_low <= 0 or self.gamma_high < self.gamma_low:
            raise ValidationError("need 0 < gamma_low <= gamma_high")
        HmcConfig(**self.hmc)  # validate early

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SimulationConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class StudyTruth:
    graph: RegionGraph
    theta: np.ndarray  # (N, K), log scale
    gamma: np.ndarray
    X: np.ndarray  # includes the intercept column
    response_names: list
    covariate_names: list


def make_truth(config: SimulationConfig, rng=None) -> StudyTruth:
    if config.truth_path is not None:
        return _truth_from_files(config)
    rng = np.random.default_rng(rng)
    graph = (lattice_graph(config.rows, config.cols) if config.graph_path is None
             else read_edge_list(config.graph_path))
    N, K = graph.n_regions, config.K
    X = np.column_stack([np.ones(N), rng.standard_normal((N, config.n_covariates))])
    beta = np.asarray(config.beta, dtype=float)
    if beta.shape != (X.shape[1], K):
        raise ValidationError(f"beta must have shape {(X.shape[1], K)}, got {beta.shape}")
    if K == 2:
        s = sample_gmcar(graph, GmcarParams(**config.gmcar), 1, rng)
        phi = np.empty((N, 2))
        phi[:, 1 - config.gmcar_order] = s.phi1[0]
        phi[:, config.gmcar_order] = s.phi2[0]
    else:
        from .priors import sample_car

        g = config.gmcar
        phi = np.column_stack([sample_car(graph, g["rho_2"], g["sigma2_2"], 1, rng).values[0]
                               for _ in range(K)])
    theta = X @ beta + phi
    gamma = rng.uniform(config.gamma_low, config.gamma_high, size=(N, K))
    return StudyTruth(graph, theta, gamma, X, [f"y{k + 1}" for k in range(K)],
                      ["intercept"] + [f"x{p + 1}" for p in range(config.n_covariates)])


def _truth_from_files(config):
    if config.graph_path is None:
        raise ValidationError("truth_path needs graph_path")
    graph = read_edge_list(config.graph_path)
    df = pd.read_csv(config.truth_path, dtype={"region_id": str}).set_index("region_id")
    try:
        df = df.loc[list(graph.region_ids)]
    except KeyError as exc:
        raise ValidationError(f"truth file lacks graph regions: {exc}") from exc
    names = [c[6:] for c in df.columns if c.startswith("truth_")]
    covs = [c for c in df.columns if c.startswith("x_")]
    theta = df[[f"truth_{n}" for n in names]].to_numpy(float)
    gamma = df[[f"se_{n}" for n in names]].to_numpy(float)
    N = graph.n_regions
    X = np.column_stack([np.ones(N), df[covs].to_numpy(float)]) if covs else np.ones((N, 1))
    return StudyTruth(graph, theta, gamma, X, names, ["intercept"] + [c[2:] for c in covs])


@dataclass
class MetricsReport:
    """Per-replicate raw metrics, their means per model and response, and failures."""

    replicates: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    METRICS = ("rmse", "interval_score", "coverage", "rmse_log", "interval_score_log",
               "coverage_log", "interp_rmse", "seconds")

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.replicates)

    def summary(self) -> pd.DataFrame:
        """Mean of each metric per model and response, plus the replicate count."""
        df = self.frame()
        if df.empty:
            return df
        cols = [c for c in self.METRICS if c in df.columns]
        g = df.groupby(["model", "response"], sort=False)
        out = g[cols].mean()
        out["n_replicates"] = g.size()
        return out.reset_index()

    def mean(self, model, metric="rmse") -> float:
        """Mean over replicates and responses."""
        df = self.frame()
        return float(df.loc[df["model"] == model, metric].mean())

    def to_dict(self, include_timing=True) -> dict:
        reps = [dict(r) for r in self.replicates]
        summ = self.summary()
        if not include_timing:
            for r in reps:
                r.pop("seconds", None)
            summ = summ.drop(columns=["seconds"], errors="ignore")
        return {
            "config": self.config,
            "summary": summ.to_dict(orient="records"),
            "replicates": reps,
            "failures": self.failures,
        }

    def to_json(self, path=None, include_timing=True) -> str:
        text = json.dumps(self.to_dict(include_timing), indent=1, sort_keys=True,
                          default=_json_default)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    def to_csv(self, path) -> None:
        self.summary().to_csv(path, index=False, float_format="%.10g")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _score(name, resp, est, lo, hi, truth, est_log, lo_log, hi_log, truth_log):
    """Metric rows for one model, one per response."""
    rows = []
    r_o = metrics.rmse(est, truth)
    r_l = metrics.rmse(est_log, truth_log)
    is_o = metrics.interval_score(lo, hi, truth)
    is_l = metrics.interval_score(lo_log, hi_log, truth_log)
    c_o = metrics.coverage(lo, hi, truth)
    c_l = metrics.coverage(lo_log, hi_log, truth_log)
    for k, rn in enumerate(resp):
        rows.append({"model": name, "response": rn, "rmse": float(r_o[k]),
                     "interval_score": float(is_o[k]), "coverage": float(c_o[k]),
                     "rmse_log": float(r_l[k]), "interval_score_log": float(is_l[k]),
                     "coverage_log": float(c_l[k])})
    return rows


def _masked_rmse(est, truth, mask):
    out = []
    for k in range(truth.shape[1]):
        m = mask[:, k]
        out.append(float(np.sqrt(np.mean((est[m, k] - truth[m, k]) ** 2))) if m.any()
                   else float("nan"))
    return out


def run_replicate(r, config: SimulationConfig, truth: StudyTruth, decoders: dict, seed):
    """Simulate one data set and fit every requested model. Returns ``(rows, failures)``."""
    ss = as_seed_sequence(seed)
    data_ss, mask_ss, *model_ss = ss.spawn(2 + len(config.models))
    theta, gamma = truth.theta, truth.gamma
    N, K = theta.shape
    Y = simulate_direct(theta, gamma, np.random.default_rng(data_ss))
    G = gamma.copy()
    mask = np.zeros((N, K), dtype=bool)
    if config.mask_fraction > 0:
        n_mask = int(round(config.mask_fraction * N * K))
        cells = np.random.default_rng(mask_ss).choice(N * K, size=n_mask, replace=False)
        mask.flat[cells] = True
        Y[mask] = np.nan
        G[mask] = np.nan
    data = DirectEstimateTable(list(truth.graph.region_ids), Y, G, truth.X,
                               list(truth.response_names), list(truth.covariate_names))
    t_orig = np.exp(theta)
    rows, failures = [], []
    resp = truth.response_names
    obs = ~mask
    # direct estimates with +-1.96 gamma intervals; masked cells fall back to
    # the observed column mean (point) and are left out of interval metrics
    colmean = np.array([np.nanmean(Y[:, k]) for k in range(K)])
    Yd = np.where(obs, Y, colmean)
    Gd = np.where(obs, G, 0.0)
    lo_l, hi_l = Yd - Z95 * Gd, Yd + Z95 * Gd
    if mask.any():
        keep = obs.all(axis=1)
        d_rows = _score("direct", resp, np.exp(Yd[keep]), np.exp(lo_l[keep]),
                        np.exp(hi_l[keep]), t_orig[keep], Yd[keep], lo_l[keep],
                        hi_l[keep], theta[keep])
        interp = _masked_rmse(np.exp(Yd), t_orig, mask)
        for row, v in zip(d_rows, interp):
            row["interp_rmse"] = v
    else:
        d_rows = _score("direct", resp, np.exp(Yd), np.exp(lo_l), np.exp(hi_l), t_orig,
                        Yd, lo_l, hi_l, theta)
    for row in d_rows:
        row.update(replicate=r, seconds=0.0)
    rows += d_rows
    hmc = config.hmc
    for kind, mss in zip(config.models, model_ss):
        spec = ModelSpec(kind, K, gmcar_order=config.gmcar_order, vsms_scale=config.vsms_scale)
        t0 = time.perf_counter()
        try:
            draws, diag = fit(spec, data, truth.graph, decoders.get(spec.decoder_layout),
                              HmcConfig(**{**hmc, "seed": 0}), rng=mss)
            summ = summarize_theta(draws, spec, data)
        except (SaeError, np.linalg.LinAlgError, FloatingPointError) as exc:
            logger.warning("replicate %d, model %s failed: %s", r, kind, exc)
            failures.append({"replicate": r, "model": kind, "error": f"{type(exc).__name__}: {exc}"})
            continue
        secs = time.perf_counter() - t0
        m_rows = _score(kind, resp, summ.mean_orig, summ.q025_orig, summ.q975_orig, t_orig,
                        summ.mean, summ.q025, summ.q975, theta)
        interp = _masked_rmse(summ.mean_orig, t_orig, mask)
        if diag is None and draws.n_chains >= 2 and draws.n_kept >= 100:
            diag = diagnostics(draws)
        for row, v in zip(m_rows, interp):
            row.update(replicate=r, seconds=secs, divergences=int(draws.divergences.sum()),
                       max_rhat=None if diag is None else diag.max_rhat(),
                       mean_accept=float(draws.accept_prob.mean()))
            if mask.any():
                row["interp_rmse"] = v
        rows += m_rows
    return rows, failures


def prepare_decoders(config: SimulationConfig, graph: RegionGraph, seed, decoders=None):
    """Decoders needed by the requested variational kinds: given, loaded, or trained."""
    from .vae import load_decoder

    decoders = dict(decoders or {})
    need = {ModelSpec(k, config.K).decoder_layout for k in config.models
            if k in ("vsms", "vgms")}
    ss = as_seed_sequence(seed)
    for layout, child in zip(sorted(need), ss.spawn(len(need))):
        if layout in decoders:
            continue
        if layout in config.decoders:
            decoders[layout] = load_decoder(config.decoders[layout])
            continue
        K = config.K if layout == "vectorized" else 1
        logger.info("training %s decoder (K=%d) on %d regions", layout, K, graph.n_regions)
        vcfg = TrainConfig(**config.vae) if config.vae else None
        decoders[layout] = train_prior(graph, layout, K, config.n_train_samples, child, vcfg)
    return decoders


def run_study(config: SimulationConfig, decoders: dict | None = None) -> MetricsReport:
    """Replicate, fit and score; failed fits are recorded and skipped.

    All randomness flows from ``config.seed``: child 0 builds the truth,
    child 1 trains missing decoders and child ``2 + r`` drives replicate ``r``.
    """
    root = np.random.SeedSequence(config.seed)
    truth_ss, dec_ss, *rep_ss = root.spawn(2 + config.n_replicates)
    truth = make_truth(config, np.random.default_rng(truth_ss))
    decoders = prepare_decoders(config, truth.graph, dec_ss, decoders)
    report = MetricsReport(config=asdict(config))
    if config.n_jobs == 1:
        results = [run_replicate(r, config, truth, decoders, s) for r, s in enumerate(rep_ss)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=config.n_jobs)(
            delayed(run_replicate)(r, config, truth, decoders, s) for r, s in enumerate(rep_ss))
    for rows, fails in results:
        report.replicates += rows
        report.failures += fails
    return report
