"""Direct-estimate preparation: log scale, margins of error, CSV tables."""

from __future__ import annotations

import numpy as np
import pandas as pd
from scipy.stats import norm

from .exceptions import BadLevelError, NonPositiveEstimateError, ValidationError
from .models import DirectEstimateTable


def delta_log(y, se):
    """Log estimate and its first-order (delta method) standard error ``se / y``."""
    y = np.asarray(y, dtype=float)
    se = np.asarray(se, dtype=float)
    if np.any(y <= 0):
        raise NonPositiveEstimateError("log transform needs positive estimates")
    if np.any(se <= 0):
        raise NonPositiveEstimateError("standard errors must be positive")
    out = np.log(y), se / y
    if out[0].ndim == 0:
        return float(out[0]), float(out[1])
    return out


def moe_to_se(moe, level=0.90):
    """Standard error from a symmetric margin of error at confidence ``level``."""
    if not 0 < level < 1:
        raise BadLevelError(f"level must lie in (0, 1), got {level}")
    moe = np.asarray(moe, dtype=float)
    if np.any(moe < 0):
        raise ValidationError("margins of error must be non-negative")
    se = moe / norm.ppf(0.5 * (1 + level))
    return float(se) if se.ndim == 0 else se


def read_direct_csv(path_or_buf, log_scale=False, moe_level=0.90) -> DirectEstimateTable:
    """Parse ``region_id, y_<name>, se_<name> | moe_<name>, ..., x_<cov>, ...``.

    Empty response cells are missing. With ``log_scale`` the responses are
    log transformed and their errors converted with :func:`delta_log`.
    """
    df = pd.read_csv(path_or_buf, dtype={"region_id": str}, keep_default_na=True,
                     float_precision="round_trip")
    if "region_id" not in df.columns:
        raise ValidationError("data CSV needs a region_id column")
    names = [c[2:] for c in df.columns if c.startswith("y_")]
    if not names:
        raise ValidationError("data CSV has no y_<name> columns")
    N, K = len(df), len(names)
    Y = np.empty((N, K))
    G = np.empty((N, K))
    for k, nm in enumerate(names):
        Y[:, k] = pd.to_numeric(df[f"y_{nm}"], errors="raise")
        if f"se_{nm}" in df.columns:
            G[:, k] = pd.to_numeric(df[f"se_{nm}"], errors="raise")
        elif f"moe_{nm}" in df.columns:
            G[:, k] = moe_to_se(pd.to_numeric(df[f"moe_{nm}"], errors="raise").to_numpy(),
                                moe_level)
        else:
            raise ValidationError(f"no se_{nm} or moe_{nm} column")
    if log_scale:
        obs = ~np.isnan(Y)
        ly, lg = np.full_like(Y, np.nan), np.full_like(G, np.nan)
        ly[obs], lg[obs] = delta_log(Y[obs], G[obs])
        Y, G = ly, lg
    covs = [c for c in df.columns if c.startswith("x_")]
    X = df[covs].to_numpy(dtype=float) if covs else None
    ids = df["region_id"].astype(str).tolist()
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate region_id values")
    return DirectEstimateTable.from_arrays(
        Y, G, X, region_ids=ids, response_names=names, covariate_names=[c[2:] for c in covs])


def write_direct_csv(table: DirectEstimateTable, path) -> None:
    cols = {"region_id": list(table.region_ids)}
    for k, nm in enumerate(table.response_names):
        cols[f"y_{nm}"] = table.Y[:, k]
        cols[f"se_{nm}"] = table.gamma[:, k]
    for p, nm in enumerate(table.covariate_names):
        if nm == "intercept":
            continue
        cols[f"x_{nm}"] = table.X[:, p]
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")


def read_wide_csv(path_or_buf, prefix=None):
    """``region_id`` plus numeric columns as ``(ids, names, values)``.

    Long ThetaSummary files (``region_id, response, mean, ...``) are pivoted
    on ``mean`` first.
    """
    df = pd.read_csv(path_or_buf, dtype={"region_id": str})
    if "region_id" not in df.columns:
        raise ValidationError("CSV needs a region_id column")
    if "response" in df.columns and "mean" in df.columns:
        wide = {}
        for col in ("mean", "q025", "q975", "mean_orig", "q025_orig", "q975_orig"):
            if col in df.columns:
                wide[col] = df.pivot(index="region_id", columns="response", values=col)
        return wide
    df = df.set_index("region_id")
    if prefix is not None:
        df = df[[c for c in df.columns if c.startswith(prefix)]]
    return {"value": df.apply(pd.to_numeric)}
