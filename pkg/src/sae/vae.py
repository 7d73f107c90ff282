"""beta-VAE emulator of a spatial prior, and its frozen decoder artifact.

Encoder: ``x -> ELU(x W1 + b1) -> (mu, logvar)``; decoder:
``z -> ELU(z W1' + b1') W_out + b_out`` with a linear output layer. The
reconstruction likelihood is a unit-variance Gaussian and the KL term to
``N(0, I)`` is weighted by ``alpha``.
"""

from __future__ import annotations

import base64
import copy
import json
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .exceptions import (
    CorruptFileError,
    DimMismatchError,
    HashMismatchError,
    NonFiniteLossError,
    ShapeMismatchError,
    VersionUnsupportedError,
)

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
LOGVAR_CLAMP = 30.0
ENCODER_KEYS = ("enc_W1", "enc_b1", "enc_Wmu", "enc_bmu", "enc_Wlv", "enc_blv")
DECODER_KEYS = ("dec_W1", "dec_b1", "dec_Wout", "dec_bout")


@dataclass
class VaeModel:
    input_dim: int
    hidden_dim: int
    latent_dim: int
    alpha: float
    params: dict = field(default_factory=dict)

    def copy(self) -> "VaeModel":
        return copy.deepcopy(self)


@dataclass
class ElboTrace:
    elbo: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    n_rejected: int = 0
    final_elbo: float = float("nan")

    def moving_average(self, window=20) -> np.ndarray:
        e = np.asarray(self.elbo)
        if len(e) < window:
            return np.zeros(0)
        c = np.cumsum(np.r_[0.0, e])
        return (c[window:] - c[:-window]) / window


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_vae(input_dim, seed=None, hidden_dim=None, latent_dim=None, alpha=None) -> VaeModel:
    """Glorot-uniform weights, zero biases; hidden and latent widths default to ``input_dim``."""
    d = int(input_dim)
    if d < 1:
        raise DimMismatchError("input_dim must be at least 1")
    h = int(hidden_dim or d)
    j = int(latent_dim or d)
    rng = np.random.default_rng(seed)
    p = {
        "enc_W1": _glorot(rng, d, h), "enc_b1": np.zeros((1, h)),
        "enc_Wmu": _glorot(rng, h, j), "enc_bmu": np.zeros((1, j)),
        "enc_Wlv": _glorot(rng, h, j), "enc_blv": np.zeros((1, j)),
        "dec_W1": _glorot(rng, j, h), "dec_b1": np.zeros((1, h)),
        "dec_Wout": _glorot(rng, h, d), "dec_bout": np.zeros((1, d)),
    }
    a = 1.0 / j if alpha is None else float(alpha)
    if not a > 0:
        raise ValueError("alpha must be positive")
    return VaeModel(d, h, j, a, p)


def _elu(x):
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0)))


def encode(model: VaeModel, x):
    """Return ``(mu, logvar)`` for a batch of rows; logvar is clamped to +-30."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.input_dim:
        raise ShapeMismatchError(f"expected {model.input_dim} columns, got {x.shape[1]}")
    p = model.params
    h = _elu(x @ p["enc_W1"] + p["enc_b1"])
    mu = h @ p["enc_Wmu"] + p["enc_bmu"]
    logvar = np.clip(h @ p["enc_Wlv"] + p["enc_blv"], -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return mu, logvar


def reparameterize(mu, logvar, rng):
    rng = np.random.default_rng(rng)
    mu = np.asarray(mu, dtype=float)
    logvar = np.clip(np.asarray(logvar, dtype=float), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    if mu.shape != logvar.shape:
        raise ShapeMismatchError("mu and logvar shapes differ")
    return mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)


def _decode(p, z):
    return _elu(z @ p["dec_W1"] + p["dec_b1"]) @ p["dec_Wout"] + p["dec_bout"]


def decode(model: VaeModel, z):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != model.latent_dim:
        raise ShapeMismatchError(f"expected {model.latent_dim} latent columns, got {z.shape[1]}")
    return _decode(model.params, z)


def kl_terms(mu, logvar):
    """Per-row closed-form ``KL(N(mu, exp(logvar)) || N(0, I))``."""
    return -0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar), axis=1)


class _ElboGraph:
    """Autodiff graph of the batch-mean ELBO for one batch size."""

    def __init__(self, model: VaeModel, batch: int, n_mc: int):
        d, h, j = model.input_dim, model.hidden_dim, model.latent_dim
        shapes = {k: v.shape for k, v in model.params.items()}
        P = {k: ad.Input(k, s) for k, s in shapes.items()}
        x = ad.Input("x", (batch, d))
        self.eps_names = [f"eps{i}" for i in range(n_mc)]
        hid = ad.elu(ad.row_broadcast_add(x @ P["enc_W1"], P["enc_b1"]))
        mu = ad.row_broadcast_add(hid @ P["enc_Wmu"], P["enc_bmu"])
        logvar = ad.clip(ad.row_broadcast_add(hid @ P["enc_Wlv"], P["enc_blv"]),
                         -LOGVAR_CLAMP, LOGVAR_CLAMP)
        std = ad.exp(0.5 * logvar)
        recon_sq = None
        for name in self.eps_names:
            z = mu + ad.multiply(std, ad.Input(name, (batch, j)))
            dh = ad.elu(ad.row_broadcast_add(z @ P["dec_W1"], P["dec_b1"]))
            xhat = ad.row_broadcast_add(dh @ P["dec_Wout"], P["dec_bout"])
            term = ad.sum_(ad.square(x - xhat))
            recon_sq = term if recon_sq is None else recon_sq + term
        # closed-form term: 0.5 * sum(1 + logvar - mu^2 - exp(logvar)) = -KL
        neg_kl = 0.5 * ad.sum_(logvar - ad.square(mu) - ad.exp(logvar))
        neg_kl = neg_kl + 0.5 * batch * j
        recon = -0.5 / n_mc * recon_sq - 0.5 * batch * d * LOG_2PI
        self.alpha = ad.Input("alpha", (1, 1))
        total = recon + self.alpha * neg_kl
        self.root = (1.0 / batch) * total
        self.outputs = {"neg_kl": neg_kl, "recon": recon}
        self.batch = batch
        self.param_names = tuple(shapes)

    def run(self, model, x, eps, grads=True):
        b = dict(model.params)
        b["x"] = x
        b["alpha"] = np.array([[model.alpha]])
        for name, e in zip(self.eps_names, eps):
            b[name] = e
        if grads:
            res = ad.gradient(self.root, b, wrt=self.param_names, outputs=self.outputs)
        else:
            res = ad.gradient(self.root, b, wrt=(), outputs=self.outputs)
        kl = -float(res.outputs["neg_kl"][0, 0]) / self.batch
        recon = float(res.outputs["recon"][0, 0]) / self.batch
        return res.value, kl, recon, res.grads


def elbo(model: VaeModel, batch, rng=None, L=1, eps=None):
    """Batch-mean ELBO with ``L`` reparameterized draws per row.

    Returns ``(elbo, kl, recon)`` where ``kl`` is the mean closed-form KL
    penalty (non-negative) and ``elbo = recon - alpha * kl``. Explicit noise
    ``eps`` of shape ``(L, M, latent_dim)`` overrides ``rng``.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[1] != model.input_dim:
        raise ShapeMismatchError(f"expected {model.input_dim} columns, got {batch.shape[1]}")
    m = batch.shape[0]
    if eps is None:
        eps = np.random.default_rng(rng).standard_normal((L, m, model.latent_dim))
    graph = _ElboGraph(model, m, len(eps))
    value, kl, recon, _ = graph.run(model, batch, eps, grads=False)
    return value, kl, recon


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int | None = 0
    patience: int = 25
    ma_window: int = 20
    n_mc: int = 1
    lr_factor: float = 0.5
    lr_patience: int = 5
    tol: float = 1e-4
    min_learning_rate: float = 1e-5
    recenter_latent: bool = True
    whiten_latent: bool = True


def recenter_latent(model: VaeModel, X) -> VaeModel:
    """Standardize each latent coordinate of the aggregate posterior in place.

    Shifting and rescaling one latent coordinate while compensating in the
    decoder's first layer leaves the reconstruction term unchanged, so the
    KL-optimal shift (aggregate mean to 0) and scale (aggregate second moment
    to 1) can be applied in closed form. The ELBO never decreases.
    """
    mu, logvar = encode(model, X)
    mean = mu.mean(axis=0)
    sd = np.sqrt(mu.var(axis=0) + np.exp(logvar).mean(axis=0))
    p = model.params
    p["dec_b1"] = p["dec_b1"] + mean @ p["dec_W1"]
    p["dec_W1"] = sd[:, None] * p["dec_W1"]
    p["enc_Wmu"] = p["enc_Wmu"] / sd
    p["enc_bmu"] = (p["enc_bmu"] - mean) / sd
    p["enc_Wlv"] = p["enc_Wlv"].copy()
    p["enc_blv"] = p["enc_blv"] - 2.0 * np.log(sd)
    return model


def whiten_latent(model: VaeModel, X) -> VaeModel:
    """Map a Gaussian fit of the aggregate posterior onto the N(0, I) prior.

    With ``m`` and ``C = R R'`` the mean and covariance of the aggregate
    posterior over ``X``, the decoder is reparameterized as
    ``decode'(z) = decode(m + R z)`` so that prior draws land where the
    encoder puts data. The encoder mean head is mapped exactly; the diagonal
    log-variance head gets a first-order (constant-variance) correction.
    """
    mu, logvar = encode(model, X)
    s2 = np.exp(logvar)
    mean = mu.mean(axis=0)
    C = np.cov(mu.T, bias=True) + np.diag(s2.mean(axis=0))
    R = np.linalg.cholesky(C)
    Rinv = np.linalg.inv(R)
    p = model.params
    p["dec_b1"] = p["dec_b1"] + mean @ p["dec_W1"]
    p["dec_W1"] = R.T @ p["dec_W1"]
    p["enc_Wmu"] = p["enc_Wmu"] @ Rinv.T
    p["enc_bmu"] = (p["enc_bmu"] - mean) @ Rinv.T
    w = Rinv**2 * s2.mean(axis=0)  # (new, old) contributions to the new variances
    tot = w.sum(axis=1)
    P = (w / tot[:, None]).T
    p["enc_Wlv"] = p["enc_Wlv"] @ P
    p["enc_blv"] = p["enc_blv"] @ P + np.log(tot) - np.log(s2.mean(axis=0)) @ P
    return model


def train(model: VaeModel, training_set, config: TrainConfig | None = None):
    """Adam ascent on the ELBO over shuffled mini-batches.

    After every epoch the latent coordinates are recentred (see
    :func:`recenter_latent`) and the ELBO is re-evaluated on the whole
    training set with noise fixed once per row. An epoch that lowers this
    value is rolled back (weights and Adam moments) and retried with a fresh
    shuffle; after ``lr_patience`` consecutive rollbacks the learning rate is
    multiplied by ``lr_factor``. The trace holds the ELBO of the kept state
    after each epoch, so it never decreases. Training stops once the
    ``ma_window``-epoch moving average has not gained more than ``tol`` for
    ``patience`` epochs, or once the rate falls below ``min_learning_rate``.

    With ``whiten_latent`` the kept state is finally passed through
    :func:`whiten_latent`; its ELBO is stored as ``trace.final_elbo``.
    """
    cfg = config or TrainConfig()
    X = getattr(training_set, "samples", training_set)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DimMismatchError(
            f"training data has shape {X.shape}, model expects {model.input_dim} columns")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    names = tuple(model.params)
    m1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    graphs: dict[int, _ElboGraph] = {}
    eval_eps = rng.standard_normal((cfg.n_mc, n, model.latent_dim))
    eval_graph = _ElboGraph(model, n, cfg.n_mc)
    trace = ElboTrace()
    # the latent reparameterizations count as optimization steps, so a zero
    # learning rate leaves the weights untouched
    adjust = cfg.learning_rate > 0
    if cfg.recenter_latent and adjust:
        recenter_latent(model, X)
    cur = eval_graph.run(model, X, eval_eps, grads=False)[:3]
    if not np.isfinite(cur[0]):
        raise NonFiniteLossError("non-finite ELBO at the initial weights")
    lr = cfg.learning_rate
    step = 0
    best_ma, since_gain, n_bad = -np.inf, 0, 0
    for epoch in range(cfg.epochs):
        saved = (copy.deepcopy(model.params), copy.deepcopy(m1), copy.deepcopy(m2), step)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            m = len(idx)
            if m not in graphs:
                graphs[m] = _ElboGraph(model, m, cfg.n_mc)
            eps = rng.standard_normal((cfg.n_mc, m, model.latent_dim))
            value, kl, rec, grads = graphs[m].run(model, X[idx], eps)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteLossError(
                    f"non-finite ELBO or gradient at epoch {epoch}, batch start {start}: "
                    f"elbo={value}, kl={kl}, recon={rec}")
            step += 1
            lr_t = lr * np.sqrt(1 - cfg.beta2**step) / (1 - cfg.beta1**step)
            for k in names:
                g = grads[k]
                m1[k] = cfg.beta1 * m1[k] + (1 - cfg.beta1) * g
                m2[k] = cfg.beta2 * m2[k] + (1 - cfg.beta2) * g * g
                model.params[k] = model.params[k] + lr_t * m1[k] / (np.sqrt(m2[k]) + cfg.adam_eps)
        if cfg.recenter_latent and adjust:
            recenter_latent(model, X)
        new = eval_graph.run(model, X, eval_eps, grads=False)[:3]
        if np.isfinite(new[0]) and new[0] >= cur[0]:
            cur = new
            n_bad = 0
        else:
            model.params, m1, m2, step = saved
            trace.n_rejected += 1
            n_bad += 1
            if n_bad >= cfg.lr_patience:
                lr *= cfg.lr_factor
                n_bad = 0
                logger.debug("epoch %d: learning rate -> %g", epoch, lr)
        trace.elbo.append(cur[0])
        trace.kl.append(cur[1])
        trace.recon.append(cur[2])
        ma = float(np.mean(trace.elbo[-cfg.ma_window:]))
        if ma > best_ma + cfg.tol:
            best_ma, since_gain = ma, 0
        else:
            since_gain += 1
        if since_gain >= cfg.patience or lr < cfg.min_learning_rate:
            logger.info("stopped after epoch %d (ELBO %.4f)", epoch, cur[0])
            break
    if cfg.whiten_latent and adjust:
        whiten_latent(model, X)
    trace.final_elbo = float(eval_graph.run(model, X, eval_eps, grads=False)[0])
    return model, trace


# ---------------------------------------------------------------------------
# sklearn-style estimator


class BetaVAE(TransformerMixin, BaseEstimator):
    """beta-VAE with one ELU hidden layer on each side.

    Parameters
    ----------
    latent_dim, hidden_dim : int or None
        Default to the input dimension.
    alpha : float or None
        KL weight; defaults to ``1 / latent_dim``.
    epochs, batch_size, learning_rate, patience, ma_window, n_mc :
        Optimizer settings, see :func:`train`.
    random_state : int or None
        Seeds both initialization and training.
    """

    def __init__(self, latent_dim=None, hidden_dim=None, alpha=None, epochs=500,
                 batch_size=256, learning_rate=1e-3, patience=25, ma_window=20, n_mc=1,
                 random_state=0):
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.ma_window = ma_window
        self.n_mc = n_mc
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(getattr(X, "samples", X))
        self.n_features_in_ = X.shape[1]
        init = init_vae(X.shape[1], seed=self.random_state, hidden_dim=self.hidden_dim,
                        latent_dim=self.latent_dim, alpha=self.alpha)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                          learning_rate=self.learning_rate, seed=self.random_state,
                          patience=self.patience, ma_window=self.ma_window, n_mc=self.n_mc)
        self.model_, self.trace_ = train(init, X, cfg)
        return self

    def transform(self, X):
        """Posterior means of the latent code."""
        check_is_fitted(self, "model_")
        return encode(self.model_, check_array(X))[0]

    def encode(self, X):
        check_is_fitted(self, "model_")
        return encode(self.model_, check_array(X))

    def decode(self, Z):
        check_is_fitted(self, "model_")
        return decode(self.model_, Z)

    def sample(self, n_samples, random_state=None):
        """Decode ``n_samples`` latent draws from ``N(0, I)``."""
        check_is_fitted(self, "model_")
        rng = np.random.default_rng(random_state)
        return decode(self.model_, rng.standard_normal((n_samples, self.model_.latent_dim)))

    def score(self, X, y=None):
        check_is_fitted(self, "model_")
        return elbo(self.model_, check_array(X), rng=self.random_state)[0]

    def to_decoder(self, **metadata) -> "DecoderArtifact":
        check_is_fitted(self, "model_")
        md = {"final_elbo": float(self.trace_.elbo[-1]) if self.trace_.elbo else None,
              "seed": self.random_state}
        md.update(metadata)
        return DecoderArtifact.from_model(self.model_, md)


# ---------------------------------------------------------------------------
# Frozen decoder artifact

ARTIFACT_FORMAT = "sae-decoder"
ARTIFACT_VERSION = 1


@dataclass
class DecoderArtifact:
    """Frozen decoder weights plus provenance metadata.

    ``metadata`` carries ``graph_sha256``, ``layout`` (``univariate`` or
    ``vectorized``), ``K``, ``seed``, ``n_samples`` and ``final_elbo``.
    """

    input_dim: int
    latent_dim: int
    hidden_dim: int
    weights: dict
    metadata: dict = field(default_factory=dict)
    version: int = ARTIFACT_VERSION

    @classmethod
    def from_model(cls, model: VaeModel, metadata=None):
        w = {k: np.array(model.params[k], dtype=np.float64) for k in DECODER_KEYS}
        return cls(model.input_dim, model.latent_dim, model.hidden_dim, w, dict(metadata or {}))

    @property
    def layout(self):
        return self.metadata.get("layout")

    def decode(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != self.latent_dim:
            raise ShapeMismatchError(f"expected {self.latent_dim} latent columns, got {z.shape[1]}")
        return _decode(self.weights, z)

    def expr(self, z: ad.Expr) -> ad.Expr:
        """Decoder as an autodiff graph on column-stacked codes.

        ``z`` has shape ``(latent_dim, m)``; the result is ``(input_dim, m)``,
        each column the decoded field of the matching code column.
        """
        m = z.shape[1]
        w = self.weights
        ones = ad.constant(np.ones((1, m)))
        h = ad.constant(w["dec_W1"].T) @ z + ad.constant(w["dec_b1"].T) @ ones
        return ad.constant(w["dec_Wout"].T) @ ad.elu(h) + ad.constant(w["dec_bout"].T) @ ones

    def check_graph(self, graph_hash: str, layout: str | None = None, K: int | None = None):
        """Raise :class:`HashMismatchError` unless this decoder was trained for the graph."""
        mine = self.metadata.get("graph_sha256")
        if mine != graph_hash:
            raise HashMismatchError(
                f"decoder trained on graph {str(mine)[:12]}..., data graph is {graph_hash[:12]}...")
        if layout is not None and self.layout is not None and self.layout != layout:
            raise HashMismatchError(f"decoder layout {self.layout!r}, model needs {layout!r}")
        if K is not None and self.metadata.get("K") not in (None, K):
            raise HashMismatchError(f"decoder built for K={self.metadata.get('K')}, model has K={K}")


def _weights_blob(art: DecoderArtifact):
    parts, spec = [], []
    for k in DECODER_KEYS:
        a = np.ascontiguousarray(art.weights[k], dtype="<f8")
        spec.append([k, list(a.shape)])
        parts.append(a.tobytes())
    return b"".join(parts), spec


def save_decoder(artifact: DecoderArtifact, path) -> None:
    """Write a JSON artifact: header, base64 weight blob, CRC-32 over both."""
    blob, spec = _weights_blob(artifact)
    header = {
        "format": ARTIFACT_FORMAT,
        "version": artifact.version,
        "input_dim": artifact.input_dim,
        "latent_dim": artifact.latent_dim,
        "hidden_dim": artifact.hidden_dim,
        "metadata": artifact.metadata,
        "weights": spec,
    }
    canon = json.dumps(header, sort_keys=True).encode("utf-8")
    doc = dict(header)
    doc["blob"] = base64.b64encode(blob).decode("ascii")
    doc["crc32"] = zlib.crc32(blob, zlib.crc32(canon))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def load_decoder(path) -> DecoderArtifact:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"unreadable decoder artifact: {exc}") from exc
    if doc.get("format") != ARTIFACT_FORMAT:
        raise CorruptFileError("not a decoder artifact")
    if doc.get("version") != ARTIFACT_VERSION:
        raise VersionUnsupportedError(f"decoder artifact version {doc.get('version')}")
    try:
        blob = base64.b64decode(doc.pop("blob"), validate=True)
        crc = doc.pop("crc32")
    except (KeyError, ValueError) as exc:
        raise CorruptFileError("malformed weight payload") from exc
    canon = json.dumps(doc, sort_keys=True).encode("utf-8")
    if zlib.crc32(blob, zlib.crc32(canon)) != crc:
        raise CorruptFileError("checksum mismatch")
    weights, off = {}, 0
    for name, shape in doc["weights"]:
        count = int(np.prod(shape))
        weights[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(blob):
        raise CorruptFileError("payload length does not match weight shapes")
    return DecoderArtifact(doc["input_dim"], doc["latent_dim"], doc["hidden_dim"], weights,
                           doc["metadata"], doc["version"])
