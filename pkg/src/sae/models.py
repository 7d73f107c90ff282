"""Posterior targets for the Fay-Herriot family.

Five model kinds share one likelihood and area-level prior::

    Y_ik  ~ N(theta_ik, gamma_ik^2)                  (observed cells only)
    theta_ik ~ N(X_i beta_k + phi_ik, tau_k^2)

and differ in the spatial effect ``phi``:

``fh``    no spatial effect
``sms``   separable MCAR, ``vec(phi) ~ N(0, Q(rho)^{-1} kron Sigma)``
``gms``   bivariate GMCAR built from a marginal and a conditional CAR
``vsms``  ``phi = decoder(z) L'`` with a vectorized decoder
``vgms``  ``phi2 = s2 decoder(z2)``, ``phi1 = A phi2 + s1 decoder(z1)``

Every target is a :class:`~sae.hmc.TargetDensity` over an unconstrained
vector: positive scalars on the log scale, ``rho`` on the logit scale and
``Sigma`` through its lower Cholesky factor with log diagonal.

By default ``theta`` is sampled non-centred, ``theta = X beta + phi + tau xi``
with ``xi ~ N(0, I)``, which avoids the funnel between ``theta`` and
``tau`` when the direct estimates are precise. ``theta`` is then recorded
per draw as a derived block.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import expit, gammaln, multigammaln
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .exceptions import (KMismatchError, ShapeMismatchError, SingularDesignError,
                         ValidationError)
from .graph import CarPrecision, RegionGraph
from .hmc import HmcConfig, TargetDensity, diagnostics, run_chain
from .vae import DecoderArtifact

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
KINDS = ("fh", "sms", "gms", "vsms", "vgms")
_KIND_ALIASES = {"fh-full": "fh", "sms-fh": "sms", "gms-fh": "gms", "vsms-fh": "vsms",
                 "vgms-fh": "vgms"}


def normalize_kind(kind: str) -> str:
    k = str(kind).lower()
    k = _KIND_ALIASES.get(k, k)
    if k not in KINDS:
        raise ValidationError(f"unknown model kind {kind!r}; choose from {KINDS}")
    return k


@dataclass
class DirectEstimateTable:
    """Direct estimates ``Y`` (NaN = missing), standard errors ``gamma`` and covariates ``X``."""

    region_ids: list
    Y: np.ndarray
    gamma: np.ndarray
    X: np.ndarray
    response_names: list = field(default_factory=list)
    covariate_names: list = field(default_factory=list)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float).reshape(len(self.region_ids), -1)
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(self.Y.shape)
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.region_ids), -1)
        if not self.response_names:
            self.response_names = [f"y{k}" for k in range(self.K)]
        if not self.covariate_names:
            self.covariate_names = [f"x{p}" for p in range(self.X.shape[1])]
        self.validate()

    @classmethod
    def from_arrays(cls, Y, gamma, X=None, region_ids=None, add_intercept=True, **names):
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        n = Y.shape[0]
        X = np.ones((n, 0)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
        cov_names = list(names.pop("covariate_names", [f"x{p}" for p in range(X.shape[1])]))
        if add_intercept and not np.any(np.all(X == 1.0, axis=0)):
            X = np.column_stack([np.ones(n), X])
            cov_names = ["intercept"] + cov_names
        ids = list(region_ids) if region_ids is not None else [str(i) for i in range(n)]
        return cls(ids, Y, np.asarray(gamma, dtype=float).reshape(Y.shape), X,
                   covariate_names=cov_names, **names)

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def K(self):
        return self.Y.shape[1]

    @property
    def P(self):
        return self.X.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.Y)

    def validate(self):
        obs = self.observed
        if not np.array_equal(obs, ~np.isnan(self.gamma)):
            raise ValidationError("missing pattern of Y and its standard errors differ")
        if np.any(self.gamma[obs] <= 0):
            raise ValidationError("standard errors must be positive wherever Y is observed")
        if not np.all(np.isfinite(self.X)):
            raise ValidationError("covariates must be finite")
        if np.linalg.matrix_rank(self.X) < self.X.shape[1]:
            raise SingularDesignError("covariate matrix is rank deficient")

    def aligned_to(self, graph: RegionGraph) -> "DirectEstimateTable":
        """Rows reordered to the graph's region order."""
        if list(self.region_ids) == list(graph.region_ids):
            return self
        pos = {r: i for i, r in enumerate(self.region_ids)}
        missing = [r for r in graph.region_ids if r not in pos]
        if missing or len(pos) != graph.n_regions:
            raise ValidationError(
                f"data regions do not match graph regions (first missing: {missing[:5]})")
        idx = np.array([pos[r] for r in graph.region_ids])
        return DirectEstimateTable(list(graph.region_ids), self.Y[idx], self.gamma[idx],
                                   self.X[idx], list(self.response_names),
                                   list(self.covariate_names))


@dataclass
class Priors:
    """Hyperparameters. Normal priors are given by their variance."""

    tau_shape: float = 0.001
    tau_scale: float = 0.001
    beta_var: float = 100.0
    sigma_shape: float = 0.001
    sigma_scale: float = 0.001
    eta_var: float = 100.0
    iw_df: float | None = None  # defaults to K + 1
    iw_scale: float = 1.0  # multiple of the identity


@dataclass
class ModelSpec:
    kind: str
    K: int = 2
    priors: Priors = field(default_factory=Priors)
    gmcar_order: int = 1  # response index modelled marginally (phi2)
    vsms_scale: str = "cholesky"  # or "scalar"
    theta_param: str = "noncentered"  # or "centered"

    def __post_init__(self):
        self.kind = normalize_kind(self.kind)
        if isinstance(self.priors, dict):
            self.priors = Priors(**self.priors)
        if self.kind in ("gms", "vgms") and self.K != 2:
            raise KMismatchError(f"{self.kind} requires exactly two responses, got K={self.K}")
        if self.gmcar_order not in (0, 1):
            raise ValidationError("gmcar_order must be 0 or 1")
        if self.vsms_scale not in ("cholesky", "scalar"):
            raise ValidationError("vsms_scale must be 'cholesky' or 'scalar'")
        if self.theta_param not in ("noncentered", "centered"):
            raise ValidationError("theta_param must be 'noncentered' or 'centered'")

    @property
    def variational(self) -> bool:
        return self.kind in ("vsms", "vgms")

    @property
    def decoder_layout(self):
        return {"vsms": "vectorized", "vgms": "univariate"}.get(self.kind)

    @classmethod
    def from_dict(cls, d: dict, K: int | None = None) -> "ModelSpec":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if "model" in d and "kind" not in kw:
            kw["kind"] = d["model"]
        if K is not None:
            kw["K"] = K
        return cls(**kw)


# ---------------------------------------------------------------------------
# Parameter transforms


def log_transform(x):
    """Positive ``x`` to ``log x``; inverse Jacobian term is ``log x``."""
    return np.log(x)


def log_untransform(u):
    """Return ``(exp(u), log-Jacobian u)``."""
    u = np.asarray(u, dtype=float)
    return np.exp(u), u


def logit_transform(rho):
    rho = np.asarray(rho, dtype=float)
    return np.log(rho) - np.log1p(-rho)


def logit_untransform(v):
    """Return ``(rho, log-Jacobian log rho(1-rho))``."""
    v = np.asarray(v, dtype=float)
    rho = expit(v)
    # log rho + log(1 - rho) computed stably
    logjac = -np.logaddexp(0.0, -v) - np.logaddexp(0.0, v)
    return rho, logjac


def n_chol_params(K: int) -> int:
    return K * (K + 1) // 2


def chol_from_params(v, K):
    """Lower Cholesky factor from packed ``(log L_ii, L_ij for i > j)`` row by row."""
    L = np.zeros((K, K))
    rows, cols = np.tril_indices(K)
    L[rows, cols] = v
    d = np.arange(K)
    L[d, d] = np.exp(L[d, d])
    return L


def chol_to_params(L):
    L = np.array(L, dtype=float)
    d = np.arange(L.shape[0])
    L[d, d] = np.log(L[d, d])
    return L[np.tril_indices(L.shape[0])]


def cov_untransform(v, K):
    """``Sigma = L L'`` and the log-Jacobian of packed-params -> Sigma."""
    L = chol_from_params(v, K)
    i = np.arange(1, K + 1)
    logjac = K * np.log(2.0) + float(np.sum((K - i + 2) * np.log(np.diag(L))))
    return L @ L.T, logjac


def cov_transform(Sigma):
    return chol_to_params(np.linalg.cholesky(np.asarray(Sigma, dtype=float)))


def _chol_logjac_grad(L):
    K = L.shape[0]
    i = np.arange(1, K + 1)
    g = np.zeros((K, K))
    # d/d(log L_ii) of sum (K - i + 2) log L_ii
    g[np.arange(K), np.arange(K)] = K - i + 2
    return g


def _pack_chol_grad(G_L, L):
    """Gradient wrt packed params from a gradient wrt the lower factor ``L``."""
    K = L.shape[0]
    G = np.tril(G_L).copy()
    d = np.arange(K)
    G[d, d] = G[d, d] * L[d, d]
    return G[np.tril_indices(K)]


def inv_wishart_logpdf(Sigma, df, scale=1.0):
    """Log density of ``InvWishart(df, scale * I)`` at ``Sigma``."""
    K = Sigma.shape[0]
    L = np.linalg.cholesky(Sigma)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    Linv = np.linalg.inv(L)
    tr = scale * float(np.sum(Linv * Linv))
    return (0.5 * df * K * np.log(scale) - 0.5 * df * K * np.log(2.0)
            - multigammaln(0.5 * df, K) - 0.5 * (df + K + 1) * logdet - 0.5 * tr)


def inv_gamma_logpdf(x, shape, scale):
    x = np.asarray(x, dtype=float)
    return shape * np.log(scale) - gammaln(shape) - (shape + 1) * np.log(x) - scale / x


def _ig_log_u(u, a, b):
    """IG(a, b) density of ``exp(u)`` plus log-Jacobian, and its u-derivative."""
    e = np.exp(-u)
    return a * np.log(b) - gammaln(a) - a * u - b * e, -a + b * e


# ---------------------------------------------------------------------------
# Targets


class FayHerriotTarget(TargetDensity):
    """Log posterior of one model kind over the unconstrained parameter vector."""

    def __init__(self, spec: ModelSpec, data: DirectEstimateTable, graph: RegionGraph,
                 decoder: DecoderArtifact | None = None):
        self.spec = spec
        self.data = data = data.aligned_to(graph)
        self.graph = graph
        self.decoder = decoder
        if data.K != spec.K:
            raise KMismatchError(f"model spec has K={spec.K}, data has K={data.K}")
        N, K, P = data.N, data.K, data.P
        kind = spec.kind
        if spec.variational:
            if decoder is None:
                raise ValidationError(f"{kind} requires a decoder artifact")
            dec_K = K if kind == "vsms" else 1
            decoder.check_graph(graph.content_hash, spec.decoder_layout, dec_K)
            if decoder.input_dim != N * dec_K:
                raise KMismatchError(
                    f"decoder emits {decoder.input_dim} values, model needs {N * dec_K}")
        self._tb = "xi" if spec.theta_param == "noncentered" else "theta"
        blocks = [(self._tb, (N, K)), ("beta", (P, K)), ("log_tau2", (K,))]
        if kind == "sms":
            blocks += [("logit_rho", (1,)), ("sigma_chol", (n_chol_params(K),)), ("phi", (N, K))]
        elif kind == "gms":
            blocks += [("logit_rho", (2,)), ("log_sigma2", (2,)), ("eta", (2,)),
                       ("phi1", (N,)), ("phi2", (N,))]
        elif kind == "vsms":
            blocks += [("z", (decoder.latent_dim,))]
            if spec.vsms_scale == "cholesky":
                blocks += [("sigma_chol", (n_chol_params(K),))]
            else:
                blocks += [("log_sigma2", (1,))]
        elif kind == "vgms":
            blocks += [("log_sigma2", (2,)), ("eta", (2,)),
                       ("z1", (decoder.latent_dim,)), ("z2", (decoder.latent_dim,))]
        names, off = {}, 0
        for name, shape in blocks:
            size = int(np.prod(shape))
            names[name] = (off, off + size, shape)
            off += size
        super().__init__(off, names=names)
        pr = spec.priors
        self.iw_df = pr.iw_df if pr.iw_df is not None else K + 1
        obs = data.observed
        self._obs = obs
        self._Yfill = np.where(obs, data.Y, 0.0)
        g2 = np.where(obs, data.gamma, 1.0) ** 2
        self._lik_w = np.where(obs, 0.5 / g2, 0.0)
        self._lik_const = float(-0.5 * np.sum(np.where(obs, LOG_2PI + np.log(g2), 0.0)))
        self._W = graph.adjacency
        self._build_graph()

    # -- packing ----------------------------------------------------------
    def unpack(self, q) -> dict:
        q = np.asarray(q, dtype=float)
        return {k: q[a:b].reshape(s) for k, (a, b, s) in self.names.items()}

    def pack(self, blocks: dict) -> np.ndarray:
        q = np.zeros(self.dim)
        for k, (a, b, s) in self.names.items():
            q[a:b] = np.asarray(blocks[k], dtype=float).ravel()
        return q

    def constrained(self, q) -> dict:
        """Named parameters on their natural scale."""
        u = self.unpack(q)
        out = {"theta": self.theta(q), "beta": u["beta"], "tau2": np.exp(u["log_tau2"])}
        K = self.data.K
        if "logit_rho" in u:
            out["rho"] = expit(u["logit_rho"])
        if "log_sigma2" in u:
            out["sigma2"] = np.exp(u["log_sigma2"])
        if "eta" in u:
            out["eta"] = u["eta"]
        if "sigma_chol" in u:
            L = chol_from_params(u["sigma_chol"], K)
            out["Sigma"] = L @ L.T
        out["phi"] = self.phi(q)
        return out

    # -- graph for the dense / decoder part -------------------------------
    def _build_graph(self):
        spec, data = self.spec, self.data
        N, K, P = data.N, data.K, data.P
        inp = {
            self._tb: ad.Input(self._tb, (N, K)),
            "beta": ad.Input("beta", (P, K)),
            "log_tau2": ad.Input("log_tau2", (1, K)),
        }
        kind = spec.kind
        ones_row = ad.constant(np.ones((N, 1)))
        phi = None
        extra = None
        if kind in ("sms", "gms"):
            inp["phi"] = ad.Input("phi", (N, K))
            phi = inp["phi"]
        elif kind == "vsms":
            J = self.decoder.latent_dim
            inp["z"] = ad.Input("z", (J, 1))
            out = self.decoder.expr(inp["z"])  # (N*K, 1), columns stacked
            psi = None
            for k in range(K):
                sel = np.zeros((N, N * K))
                sel[np.arange(N), k * N + np.arange(N)] = 1.0
                ek = np.zeros((1, K))
                ek[0, k] = 1.0
                col = (ad.constant(sel) @ out) @ ad.constant(ek)
                psi = col if psi is None else psi + col
            if spec.vsms_scale == "cholesky":
                inp["Lt"] = ad.Input("Lt", (K, K))
                phi = psi @ inp["Lt"]
            else:
                inp["log_sigma2"] = ad.Input("log_sigma2", (1, 1))
                phi = ad.exp(0.5 * inp["log_sigma2"]) * psi
            extra = -0.5 * ad.sum_(ad.square(inp["z"]))
        elif kind == "vgms":
            J = self.decoder.latent_dim
            inp["Z"] = ad.Input("Z", (J, 2))  # columns z1, z2
            inp["log_sigma2"] = ad.Input("log_sigma2", (1, 2))
            inp["eta"] = ad.Input("eta", (1, 2))
            psi = self.decoder.expr(inp["Z"])  # (N, 2)
            e = [ad.constant(np.eye(2)[:, [i]]) for i in range(2)]
            psi1, psi2 = psi @ e[0], psi @ e[1]
            s1 = ad.exp(0.5 * (inp["log_sigma2"] @ e[0]))
            s2 = ad.exp(0.5 * (inp["log_sigma2"] @ e[1]))
            eta0, eta1 = inp["eta"] @ e[0], inp["eta"] @ e[1]
            phi2 = s2 * psi2
            phi1 = eta0 * phi2 + eta1 * (ad.constant(self._W) @ phi2) + s1 * psi1
            r2 = spec.gmcar_order
            place = {1 - r2: phi1, r2: phi2}
            phi = None
            for k in range(2):
                ek = np.zeros((1, 2))
                ek[0, k] = 1.0
                term = place[k] @ ad.constant(ek)
                phi = term if phi is None else phi + term
            extra = -0.5 * ad.sum_(ad.square(inp["Z"]))
        self._phi_expr = phi
        mean = ad.constant(data.X) @ inp["beta"]
        if phi is not None:
            mean = mean + phi
        if self._tb == "xi":
            xi = inp["xi"]
            theta = mean + ad.multiply(ones_row @ ad.exp(0.5 * inp["log_tau2"]), xi)
            theta_prior = -0.5 * ad.sum_(ad.square(xi))
        else:
            theta = inp["theta"]
            prec = ones_row @ ad.exp(-inp["log_tau2"])
            resid = theta - mean
            theta_prior = -0.5 * ad.sum_(ad.multiply(ad.square(resid), prec))
            theta_prior = theta_prior - (0.5 * N) * ad.sum_(inp["log_tau2"])
        lik = -ad.sum_(ad.multiply(ad.square(ad.constant(self._Yfill) - theta),
                                   ad.constant(self._lik_w)))
        pr = spec.priors
        beta_prior = (-0.5 / pr.beta_var) * ad.sum_(ad.square(inp["beta"]))
        root = lik + theta_prior + beta_prior
        if extra is not None:
            root = root + extra
        self._root = root
        self._inputs = inp
        self._const = (self._lik_const - 0.5 * N * K * LOG_2PI
                       - 0.5 * P * K * (LOG_2PI + np.log(pr.beta_var)))
        if extra is not None:
            self._const -= 0.5 * (inp["z"].shape[0] if "z" in inp else 2 * inp["Z"].shape[0]) \
                * LOG_2PI

    def _bindings(self, u):
        K = self.data.K
        b = {self._tb: u[self._tb], "beta": u["beta"], "log_tau2": u["log_tau2"].reshape(1, K)}
        kind = self.spec.kind
        if kind == "sms":
            b["phi"] = u["phi"]
        elif kind == "gms":
            r2 = self.spec.gmcar_order
            phi = np.empty((self.data.N, 2))
            phi[:, 1 - r2] = u["phi1"]
            phi[:, r2] = u["phi2"]
            b["phi"] = phi
        elif kind == "vsms":
            b["z"] = u["z"].reshape(-1, 1)
            if self.spec.vsms_scale == "cholesky":
                b["Lt"] = chol_from_params(u["sigma_chol"], K).T
            else:
                b["log_sigma2"] = u["log_sigma2"].reshape(1, 1)
        elif kind == "vgms":
            b["Z"] = np.column_stack([u["z1"], u["z2"]])
            b["log_sigma2"] = u["log_sigma2"].reshape(1, 2)
            b["eta"] = u["eta"].reshape(1, 2)
        return b

    def phi(self, q) -> np.ndarray:
        """Spatial effect ``(N, K)`` implied by ``q`` (zeros for plain FH)."""
        u = self.unpack(q)
        if self._phi_expr is None:
            return np.zeros((self.data.N, self.data.K))
        if self.spec.kind in ("sms", "gms"):
            return self._bindings(u)["phi"]
        return ad.evaluate(self._phi_expr, self._bindings(u))

    def theta(self, q) -> np.ndarray:
        """Area means ``theta`` ``(N, K)`` implied by ``q``."""
        u = self.unpack(q)
        if self._tb == "theta":
            return u["theta"].copy()
        tau = np.exp(0.5 * u["log_tau2"])
        return self.data.X @ u["beta"] + self.phi(q) + tau[None, :] * u["xi"]

    def derived_blocks(self, draws) -> dict:
        """Derived draws for a non-centred fit: ``{"theta": (chains, kept, N, K)}``."""
        if self._tb == "theta":
            return {}
        c, n, _ = draws.draws.shape
        th = np.empty((c, n, self.data.N, self.data.K))
        for i in range(c):
            for j in range(n):
                th[i, j] = self.theta(draws.draws[i, j])
        return {"theta": th}

    # -- density ----------------------------------------------------------
    def logp_and_grad(self, q):
        # overflow far out in the tails just means zero density there
        try:
            with np.errstate(all="ignore"):
                lp, g = self._logp_and_grad(q)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            return -np.inf, np.zeros(self.dim)
        if not (np.isfinite(lp) and np.all(np.isfinite(g))):
            return -np.inf, np.zeros(self.dim)
        return lp, g

    def _logp_and_grad(self, q):
        q = np.asarray(q, dtype=float)
        u = self.unpack(q)
        b = self._bindings(u)
        res = ad.gradient(self._root, b)
        lp = res.value + self._const
        G = {k: np.zeros(s) for k, (_, _, s) in self.names.items()}
        G[self._tb] += res.grads[self._tb]
        G["beta"] += res.grads["beta"]
        G["log_tau2"] += res.grads["log_tau2"].ravel()
        pr = self.spec.priors
        t, dt = _ig_log_u(u["log_tau2"], pr.tau_shape, pr.tau_scale)
        lp += float(t.sum())
        G["log_tau2"] += dt
        kind = self.spec.kind
        K = self.data.K
        if kind == "sms":
            lp += self._sms_prior(u, res.grads["phi"], G)
        elif kind == "gms":
            lp += self._gms_prior(u, res.grads["phi"], G)
        elif kind == "vsms":
            G["z"] += res.grads["z"].ravel()
            if self.spec.vsms_scale == "cholesky":
                L = chol_from_params(u["sigma_chol"], K)
                lp += self._sigma_prior(L, G, res.grads["Lt"].T)
            else:
                ls = u["log_sigma2"]
                v, dv = _ig_log_u(ls, pr.sigma_shape, pr.sigma_scale)
                lp += float(v.sum())
                G["log_sigma2"] += res.grads["log_sigma2"].ravel() + dv
        elif kind == "vgms":
            GZ = res.grads["Z"]
            G["z1"] += GZ[:, 0]
            G["z2"] += GZ[:, 1]
            v, dv = _ig_log_u(u["log_sigma2"], pr.sigma_shape, pr.sigma_scale)
            lp += float(v.sum())
            G["log_sigma2"] += res.grads["log_sigma2"].ravel() + dv
            eta = u["eta"]
            lp += float(-0.5 * np.sum(eta**2) / pr.eta_var - LOG_2PI - np.log(pr.eta_var))
            G["eta"] += res.grads["eta"].ravel() - eta / pr.eta_var
        return float(lp), self.pack(G)

    def _sigma_prior(self, L, G, dL_extra=None):
        """Inverse-Wishart prior on ``Sigma = L L'`` with the packed-parameter Jacobian."""
        K = L.shape[0]
        pr = self.spec.priors
        Sigma = L @ L.T
        lp = inv_wishart_logpdf(Sigma, self.iw_df, pr.iw_scale)
        i = np.arange(1, K + 1)
        lp += K * np.log(2.0) + float(np.sum((K - i + 2) * np.log(np.diag(L))))
        Sinv = np.linalg.inv(Sigma)
        dL = -(self.iw_df + K + 1) * np.diag(1.0 / np.diag(L)) + pr.iw_scale * Sinv @ Sinv @ L
        if dL_extra is not None:
            dL = dL + dL_extra
        g = _pack_chol_grad(dL, L)
        g += _chol_logjac_grad(L)[np.tril_indices(K)]
        G["sigma_chol"] += g
        return lp

    def _sms_prior(self, u, gphi, G):
        N, K = self.data.N, self.data.K
        v = float(u["logit_rho"][0])
        rho, ljac = logit_untransform(v)
        if not rho < 1.0:
            raise ValueError("rho rounded to 1")
        prec = CarPrecision(self.graph, rho)
        L = chol_from_params(u["sigma_chol"], K)
        Sigma = L @ L.T
        Sinv = np.linalg.inv(Sigma)
        phi = u["phi"]
        Qphi = prec.matvec(phi)
        S = phi.T @ Qphi
        Wphi = self._W @ phi
        logdet_sigma = 2.0 * np.log(np.diag(L)).sum()
        lp = (-0.5 * N * K * LOG_2PI + 0.5 * K * prec.logdet - 0.5 * N * logdet_sigma
              - 0.5 * float(np.sum(Sinv * S)))
        G["phi"] += gphi - Qphi @ Sinv
        dlogdet = -prec.trace_inv_w()
        drho = 0.5 * K * dlogdet + 0.5 * float(np.sum(Sinv * (phi.T @ Wphi)))
        G["logit_rho"] += drho * rho * (1 - rho) + (1 - 2 * rho)
        lp += float(ljac)
        dL = -N * np.diag(1.0 / np.diag(L)) + Sinv @ S @ Sinv @ L
        lp += self._sigma_prior(L, G, dL)
        return lp

    def _gms_prior(self, u, gphi, G):
        N = self.data.N
        pr = self.spec.priors
        r2 = self.spec.gmcar_order
        v = u["logit_rho"]
        rho, ljac = logit_untransform(v)
        if not np.all(rho < 1.0):
            raise ValueError("rho rounded to 1")
        ls = u["log_sigma2"]
        s2 = np.exp(ls)
        eta0, eta1 = u["eta"]
        phi1, phi2 = u["phi1"], u["phi2"]
        W = self._W
        Wphi2 = W @ phi2
        r = phi1 - eta0 * phi2 - eta1 * Wphi2
        prec1 = CarPrecision(self.graph, rho[0])
        prec2 = CarPrecision(self.graph, rho[1])
        Q1r = prec1.matvec(r)
        Q2p = prec2.matvec(phi2)
        quad1 = float(r @ Q1r)
        quad2 = float(phi2 @ Q2p)
        lp = (-N * LOG_2PI - 0.5 * N * (ls[0] + ls[1]) + 0.5 * (prec1.logdet + prec2.logdet)
              - 0.5 * quad1 / s2[0] - 0.5 * quad2 / s2[1])
        g1 = -Q1r / s2[0]
        G["phi1"] += gphi[:, 1 - r2] + g1
        G["phi2"] += gphi[:, r2] - Q2p / s2[1] - (eta0 * g1 + eta1 * (W @ g1))
        G["eta"] += np.array([-(phi2 @ g1), -(Wphi2 @ g1)])
        G["log_sigma2"] += np.array([-0.5 * N + 0.5 * quad1 / s2[0],
                                     -0.5 * N + 0.5 * quad2 / s2[1]])
        dr1 = -0.5 * prec1.trace_inv_w() + 0.5 * float(r @ (W @ r)) / s2[0]
        dr2 = -0.5 * prec2.trace_inv_w() + 0.5 * float(phi2 @ Wphi2) / s2[1]
        G["logit_rho"] += np.array([dr1, dr2]) * rho * (1 - rho) + (1 - 2 * rho)
        lp += float(ljac.sum())
        t, dt = _ig_log_u(ls, pr.sigma_shape, pr.sigma_scale)
        lp += float(t.sum())
        G["log_sigma2"] += dt
        eta = u["eta"]
        lp += float(-0.5 * np.sum(eta**2) / pr.eta_var - LOG_2PI - np.log(pr.eta_var))
        G["eta"] -= eta / pr.eta_var
        return lp


def build_target(spec: ModelSpec, data: DirectEstimateTable, graph: RegionGraph,
                 decoder: DecoderArtifact | None = None) -> FayHerriotTarget:
    """Log posterior of ``spec.kind`` for ``data`` on ``graph``.

    Variational kinds need a decoder trained on the same graph (checked by
    content hash) with the matching layout.
    """
    return FayHerriotTarget(spec, data, graph, decoder)


def fit(spec, data, graph, decoder=None, hmc_config: HmcConfig | None = None, rng=None):
    """Sample the posterior; returns ``(PosteriorDraws, ChainDiagnostics or None)``."""
    target = build_target(spec, data, graph, decoder)
    draws = run_chain(target, hmc_config or HmcConfig(), rng)
    draws.derived.update(target.derived_blocks(draws))
    diag = None
    if draws.n_chains >= 2 and draws.n_kept >= 100:
        diag = diagnostics(draws)
        bad = {k: v["max_rhat"] for k, v in diag.blocks.items()
               if v["max_rhat"] is not None and v["max_rhat"] > 1.05}
        if bad:
            warnings.warn(f"R-hat above 1.05 in blocks: {bad}", RuntimeWarning, stacklevel=2)
    return draws, diag


# ---------------------------------------------------------------------------
# theta summaries


@dataclass
class ThetaSummary:
    region_ids: list
    response_names: list
    mean: np.ndarray
    sd: np.ndarray
    q025: np.ndarray
    q975: np.ndarray
    mean_orig: np.ndarray
    sd_orig: np.ndarray
    q025_orig: np.ndarray
    q975_orig: np.ndarray
    interpolated: np.ndarray

    COLUMNS = ("region_id", "response", "mean", "sd", "q025", "q975", "mean_orig",
               "sd_orig", "q025_orig", "q975_orig", "interpolated")

    def to_frame(self):
        import pandas as pd

        N, K = self.mean.shape
        rows = {
            "region_id": np.repeat(np.asarray(self.region_ids, dtype=object), K),
            "response": np.tile(np.asarray(self.response_names, dtype=object), N),
        }
        for c in self.COLUMNS[2:]:
            rows[c] = getattr(self, c).ravel()
        return pd.DataFrame(rows, columns=list(self.COLUMNS))


def summarize_theta(draws, spec, data: DirectEstimateTable, level=0.95) -> ThetaSummary:
    """Per-cell posterior summaries of ``theta`` and of ``exp(theta)``.

    Missing cells are summarized exactly like observed ones; their draws come
    from the spatial model alone and they are flagged as interpolated.
    """
    th = draws.flat("theta")  # (S, N, K)
    lo, hi = (1 - level) / 2, 1 - (1 - level) / 2
    orig = np.exp(th)
    qs = np.quantile(th, [lo, hi], axis=0)
    qo = np.quantile(orig, [lo, hi], axis=0)
    return ThetaSummary(
        list(data.region_ids), list(data.response_names),
        th.mean(axis=0), th.std(axis=0, ddof=1), qs[0], qs[1],
        orig.mean(axis=0), orig.std(axis=0, ddof=1), qo[0], qo[1],
        ~data.observed,
    )


# ---------------------------------------------------------------------------
# sklearn-style estimator


class SpatialFayHerriot(BaseEstimator):
    """Estimator facade over :func:`fit` for one model kind on a fixed graph.

    ``fit(X, Y, se)`` takes covariates (an intercept is added when absent),
    direct estimates with NaN for missing cells, and their standard errors,
    all with rows in graph order. ``predict`` returns posterior means of
    ``theta`` for the fitted regions, including interpolated cells.

    Parameters
    ----------
    graph : RegionGraph
    kind : {"fh", "sms", "gms", "vsms", "vgms"}
    decoder : DecoderArtifact, optional
        Required by the variational kinds.
    n_iterations, n_burnin, n_chains, max_leapfrog_steps :
        Sampler settings, see :class:`~sae.hmc.HmcConfig`.
    gmcar_order, vsms_scale, priors, theta_param :
        Passed to :class:`ModelSpec`.
    random_state : int or None
    """

    def __init__(self, graph=None, kind="fh", decoder=None, n_iterations=2000, n_burnin=1000,
                 n_chains=2, max_leapfrog_steps=32, gmcar_order=1, vsms_scale="cholesky",
                 priors=None, theta_param="noncentered", random_state=0):
        self.graph = graph
        self.kind = kind
        self.decoder = decoder
        self.n_iterations = n_iterations
        self.n_burnin = n_burnin
        self.n_chains = n_chains
        self.max_leapfrog_steps = max_leapfrog_steps
        self.gmcar_order = gmcar_order
        self.vsms_scale = vsms_scale
        self.priors = priors
        self.theta_param = theta_param
        self.random_state = random_state

    def fit(self, X, Y, se):
        if self.graph is None:
            raise ValidationError("SpatialFayHerriot needs a graph")
        X = check_array(X, ensure_min_features=0) if X is not None else None
        Y = check_array(Y, ensure_all_finite="allow-nan", ensure_2d=False)
        if Y.ndim == 1:
            Y = Y[:, None]
        se = check_array(se, ensure_all_finite="allow-nan", ensure_2d=False).reshape(Y.shape)
        if Y.shape[0] != self.graph.n_regions:
            raise ShapeMismatchError(
                f"{Y.shape[0]} rows of data for a graph with {self.graph.n_regions} regions")
        self.data_ = DirectEstimateTable.from_arrays(Y, se, X, region_ids=self.graph.region_ids)
        self.spec_ = ModelSpec(self.kind, Y.shape[1], priors=self.priors or Priors(),
                               gmcar_order=self.gmcar_order, vsms_scale=self.vsms_scale,
                               theta_param=self.theta_param)
        cfg = HmcConfig(n_iterations=self.n_iterations, n_burnin=self.n_burnin,
                        n_chains=self.n_chains, max_leapfrog_steps=self.max_leapfrog_steps,
                        seed=self.random_state)
        self.draws_, self.diagnostics_ = fit(self.spec_, self.data_, self.graph, self.decoder, cfg)
        self.summary_ = summarize_theta(self.draws_, self.spec_, self.data_)
        self.n_features_in_ = self.data_.P
        return self

    def predict(self, X=None):
        """Posterior mean of ``theta`` (log scale), shape ``(N, K)``."""
        check_is_fitted(self, "summary_")
        if X is not None and np.shape(X)[0] != self.data_.N:
            raise ShapeMismatchError("predict works on the fitted regions only")
        return self.summary_.mean.copy()

    def predict_interval(self, X=None):
        """Central 95% posterior interval of ``theta``: ``(lower, upper)``."""
        check_is_fitted(self, "summary_")
        return self.summary_.q025.copy(), self.summary_.q975.copy()
