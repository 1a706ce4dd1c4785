"""Dataset ingestion, covariate encoding, and response-scale calibration.

Input files are delimiter-separated text with a header row
``time,status,trt,<covariates...>``. Covariate kinds (continuous, binary,
categorical) come from a schema sidecar; categorical columns are expanded to
one-of-K indicators so that tree rules of the form ``u <= c`` apply uniformly
to every encoded column.

The response transformation divides follow-up times by ``exp(mu_aft)``, where
``(mu_aft, sigma_aft)`` is the maximum-likelihood fit of an intercept-only
lognormal survival model with right-censored observations. ``sigma_aft``
anchors the node-value scale of the tree ensemble and the residual-variance
calibration downstream.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, DataError, NumericError

_MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}

#: kinds accepted in a covariate schema
COLUMN_KINDS = ("continuous", "binary", "categorical")

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class ColumnSpec:
    """One covariate column: a name, a kind, and levels if categorical."""

    name: str
    kind: str
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.levels:
                raise DataError(f"column {self.name!r}: categorical column needs levels")
            if len(set(self.levels)) != len(self.levels):
                raise DataError(f"column {self.name!r}: duplicate categorical levels")
        elif self.levels:
            raise DataError(f"column {self.name!r}: levels only apply to categorical columns")

    @property
    def encoded_width(self) -> int:
        return len(self.levels) if self.kind == "categorical" else 1


class CovariateSchema:
    """Ordered covariate column specs plus the induced one-of-K encoding."""

    def __init__(self, columns: list[ColumnSpec]):
        if not columns:
            raise DataError("schema declares no covariate columns")
        names = [c.name for c in columns]
        if len(set(names)) != len(names):
            raise DataError("duplicate covariate names in schema")
        self.columns = list(columns)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def encoded_width(self) -> int:
        return sum(c.encoded_width for c in self.columns)

    @property
    def encoded_names(self) -> list[str]:
        out: list[str] = []
        for c in self.columns:
            if c.kind == "categorical":
                out.extend(f"{c.name}={lvl}" for lvl in c.levels)
            else:
                out.append(c.name)
        return out

    def encoded_kind(self) -> list[str]:
        """Kind of each encoded column ('continuous' or 'indicator')."""
        out: list[str] = []
        for c in self.columns:
            if c.kind == "continuous":
                out.append("continuous")
            else:
                out.extend(["indicator"] * c.encoded_width)
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "CovariateSchema":
        """Build a schema from a parsed sidecar mapping.

        Accepted forms per column: ``name: continuous``, ``name: binary``,
        ``name: {categorical: [a, b, c]}``.
        """
        cols = []
        for name, spec in mapping.items():
            if isinstance(spec, str):
                cols.append(ColumnSpec(str(name), spec.strip()))
            elif isinstance(spec, dict) and "categorical" in spec:
                levels = tuple(str(v) for v in spec["categorical"])
                cols.append(ColumnSpec(str(name), "categorical", levels))
            else:
                raise DataError(f"column {name!r}: cannot interpret schema entry {spec!r}")
        return cls(cols)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "CovariateSchema":
        import yaml

        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
        if not isinstance(doc, dict):
            raise DataError(f"schema file {path}: expected a mapping")
        mapping = doc.get("columns", doc)
        if not isinstance(mapping, dict):
            raise DataError(f"schema file {path}: 'columns' must be a mapping")
        return cls.from_mapping(mapping)


@dataclass
class SurvivalRecord:
    """One observation: follow-up time, event indicator, arm, raw covariates."""

    y: float
    delta: int
    a: int
    x: tuple

    def __post_init__(self):
        if not self.y > 0:
            raise DataError(f"nonpositive time {self.y!r}")
        if self.delta not in (0, 1):
            raise DataError(f"event indicator must be 0 or 1, got {self.delta!r}")
        if self.a not in (0, 1):
            raise DataError(f"treatment arm must be 0 or 1, got {self.a!r}")


class EncodedDataset:
    """Response, event and arm vectors plus the encoded covariate matrix."""

    def __init__(self, y: np.ndarray, delta: np.ndarray, a: np.ndarray,
                 X: np.ndarray, schema: CovariateSchema):
        y = np.asarray(y, dtype=float)
        delta = np.asarray(delta, dtype=np.int8)
        a = np.asarray(a, dtype=np.int8)
        X = np.ascontiguousarray(X, dtype=float)
        n = y.shape[0]
        if n < 2:
            raise DataError(f"need at least 2 observations, got {n}")
        if not (delta.shape[0] == a.shape[0] == X.shape[0] == n):
            raise DataError("response, event, arm and covariate row counts disagree")
        if X.shape[1] != schema.encoded_width:
            raise DataError(
                f"covariate matrix has {X.shape[1]} columns, schema encodes {schema.encoded_width}")
        if np.any(y <= 0):
            i = int(np.argmax(y <= 0))
            raise DataError(f"nonpositive time at row {i + 1}")
        if not np.isfinite(X).all():
            raise DataError("covariate matrix contains non-finite entries")
        if not (np.isin(delta, (0, 1)).all() and np.isin(a, (0, 1)).all()):
            raise DataError("status and trt must be 0/1")
        self.y = y
        self.delta = delta
        self.a = a
        self.X = X
        self.schema = schema

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p_enc(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_arrays(cls, y, delta, a, X, names: list[str] | None = None) -> "EncodedDataset":
        """Wrap already-numeric arrays, treating every column as continuous."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if names is None:
            names = [f"x{j + 1}" for j in range(X.shape[1])]
        schema = CovariateSchema([ColumnSpec(nm, "continuous") for nm in names])
        return cls(np.asarray(y, float), np.asarray(delta), np.asarray(a), X, schema)

    def replace_y(self, y: np.ndarray) -> "EncodedDataset":
        return EncodedDataset(y, self.delta, self.a, self.X, self.schema)

    def subset(self, rows: np.ndarray) -> "EncodedDataset":
        return EncodedDataset(self.y[rows], self.delta[rows], self.a[rows],
                              self.X[rows], self.schema)


@dataclass(frozen=True)
class ResponseTransform:
    """Intercept-only lognormal survival fit: location and residual scale."""

    mu_aft: float
    sigma_aft: float

    def __post_init__(self):
        if not self.sigma_aft > 0:
            raise DataError(f"sigma_aft must be positive, got {self.sigma_aft}")


def _parse_float(token: str, row: int, col: str) -> float:
    t = token.strip()
    if t.lower() in _MISSING_TOKENS:
        raise DataError(f"missing value at row {row}, column {col!r}")
    try:
        return float(t)
    except ValueError:
        raise DataError(f"cannot parse {token!r} at row {row}, column {col!r}") from None


def _parse_binary(token: str, row: int, col: str) -> int:
    v = _parse_float(token, row, col)
    if v not in (0.0, 1.0):
        raise DataError(f"column {col!r} must be 0/1, got {token!r} at row {row}")
    return int(v)


def load_dataset(path: str | Path, schema: CovariateSchema,
                 delimiter: str = ",") -> EncodedDataset:
    """Load a delimiter-separated file with header ``time,status,trt,<covariates...>``.

    Missing values, unknown categorical levels and nonpositive times are
    load-time errors naming the offending row and column. Row numbers in
    error messages count data rows from 1.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        expected = ["time", "status", "trt"] + schema.names
        if header != expected:
            raise DataError(
                f"{path}: header {header!r} does not match expected {expected!r}")

        level_maps = {
            c.name: {lvl: i for i, lvl in enumerate(c.levels)}
            for c in schema.columns if c.kind == "categorical"
        }
        ys, deltas, arms, rows_enc = [], [], [], []
        for ridx, row in enumerate(reader, start=1):
            if len(row) != len(expected):
                raise DataError(f"{path}: row {ridx} has {len(row)} fields, expected {len(expected)}")
            y = _parse_float(row[0], ridx, "time")
            if y <= 0:
                raise DataError(f"nonpositive time at row {ridx}")
            delta = _parse_binary(row[1], ridx, "status")
            a = _parse_binary(row[2], ridx, "trt")
            enc = np.zeros(schema.encoded_width)
            pos = 0
            for c, token in zip(schema.columns, row[3:]):
                t = token.strip()
                if c.kind == "categorical":
                    if t.lower() in _MISSING_TOKENS:
                        raise DataError(f"missing value at row {ridx}, column {c.name!r}")
                    lvl = level_maps[c.name].get(t)
                    if lvl is None:
                        raise DataError(
                            f"unknown categorical level {token!r} at row {ridx}, column {c.name!r}")
                    enc[pos + lvl] = 1.0
                elif c.kind == "binary":
                    enc[pos] = _parse_binary(token, ridx, c.name)
                else:
                    enc[pos] = _parse_float(token, ridx, c.name)
                pos += c.encoded_width
            ys.append(y)
            deltas.append(delta)
            arms.append(a)
            rows_enc.append(enc)
    if not ys:
        raise DataError(f"{path}: no data rows")
    return EncodedDataset(np.array(ys), np.array(deltas), np.array(arms),
                          np.vstack(rows_enc), schema)


def _censored_lognormal_loglik(beta: np.ndarray, eta: float, ly: np.ndarray,
                               delta: np.ndarray, X: np.ndarray) -> float:
    sigma = math.exp(eta)
    s = (ly - X @ beta) / sigma
    unc = delta == 1
    ll = float(np.sum(-eta - 0.5 * s[unc] ** 2 - 0.5 * math.log(2 * math.pi)))
    ll += float(np.sum(norm.logsf(s[~unc])))
    return ll


def fit_linear_lognormal_aft(ly: np.ndarray, delta: np.ndarray, X: np.ndarray,
                             max_iter: int = 200, tol: float = 1e-10):
    """Censored lognormal MLE of ``ly ~ Normal(X beta, sigma^2)``.

    Newton iteration on ``(beta, log sigma)`` with analytic gradient and
    Hessian; censored rows contribute the upper-tail log-probability.

    Returns
    -------
    beta : np.ndarray
        Coefficient estimates.
    sigma : float
        Residual scale estimate (clamped at 1e-6 for zero-variance input,
        with a warning).
    cov : np.ndarray
        Inverse negative Hessian over ``(beta, log sigma)`` at the optimum,
        or NaN matrix when the scale was clamped.
    """
    ly = np.asarray(ly, dtype=float)
    delta = np.asarray(delta)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    unc = delta == 1
    if not unc.any():
        raise NumericError("likelihood unbounded: every observation is censored")
    p = X.shape[1]

    beta, *_ = np.linalg.lstsq(X[unc], ly[unc], rcond=None)
    resid0 = ly[unc] - X[unc] @ beta
    s0 = float(np.sqrt(np.mean(resid0 ** 2)))
    eta = math.log(max(s0, 1e-3))
    eta_floor = math.log(SIGMA_FLOOR)

    ll = _censored_lognormal_loglik(beta, eta, ly, delta, X)
    gnorm = math.inf
    for _ in range(max_iter):
        sigma = math.exp(eta)
        s = (ly - X @ beta) / sigma
        cen = ~unc
        # hazard of the standard normal at censored points
        lam = np.exp(norm.logpdf(s[cen]) - norm.logsf(s[cen]))
        dlam = lam * (lam - s[cen])

        g = np.empty(n_par := p + 1)
        gw = np.zeros_like(s)
        gw[unc] = s[unc] / sigma
        gw[cen] = lam / sigma
        g[:p] = X.T @ gw
        g[p] = float(np.sum(s[unc] ** 2 - 1.0) + np.sum(s[cen] * lam))
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            break

        H = np.empty((n_par, n_par))
        w = np.zeros_like(s)
        w[unc] = 1.0
        w[cen] = dlam
        H[:p, :p] = -(X.T * (w / sigma ** 2)) @ X
        hmix = np.zeros_like(s)
        hmix[unc] = -2.0 * s[unc] / sigma
        hmix[cen] = -(s[cen] * dlam + lam) / sigma
        H[:p, p] = H[p, :p] = X.T @ hmix
        H[p, p] = float(np.sum(-2.0 * s[unc] ** 2) + np.sum(-s[cen] * (lam + s[cen] * dlam)))

        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            step = None
        if step is None or float(step @ g) <= 0:
            # Hessian not usable (singular or not negative definite at this
            # point); fall back to a unit-norm ascent step
            step = g / max(1.0, float(np.linalg.norm(g)))
        # damped step: halve until the log-likelihood does not decrease
        scale = 1.0
        for _half in range(60):
            beta_new = beta + scale * step[:p]
            eta_new = max(eta + scale * step[p], eta_floor)
            ll_new = _censored_lognormal_loglik(beta_new, eta_new, ly, delta, X)
            if ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        beta, eta, ll = beta_new, eta_new, ll_new
        if eta <= eta_floor + 1e-12:
            warnings.warn(
                "residual scale hit the 1e-6 floor (degenerate zero-variance responses); "
                "sigma clamped", RuntimeWarning)
            cov = np.full((n_par, n_par), np.nan)
            return beta, SIGMA_FLOOR, cov
    else:
        raise NumericError(
            f"intercept AFT fit did not converge in {max_iter} iterations; "
            f"final gradient norm {gnorm:.3e}")

    sigma = math.exp(eta)
    s = (ly - X @ beta) / sigma
    cen = ~unc
    lam = np.exp(norm.logpdf(s[cen]) - norm.logsf(s[cen]))
    dlam = lam * (lam - s[cen])
    H = np.empty((p + 1, p + 1))
    w = np.zeros_like(s)
    w[unc] = 1.0
    w[cen] = dlam
    H[:p, :p] = -(X.T * (w / sigma ** 2)) @ X
    hmix = np.zeros_like(s)
    hmix[unc] = -2.0 * s[unc] / sigma
    hmix[cen] = -(s[cen] * dlam + lam) / sigma
    H[:p, p] = H[p, :p] = X.T @ hmix
    H[p, p] = float(np.sum(-2.0 * s[unc] ** 2) + np.sum(-s[cen] * (lam + s[cen] * dlam)))
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        cov = np.full((p + 1, p + 1), np.nan)
    return beta, sigma, cov


def fit_intercept_lognormal_aft(data: EncodedDataset) -> ResponseTransform:
    """Maximum-likelihood ``(mu, sigma)`` of an intercept-only lognormal
    survival model with right censoring.

    With no censoring this reduces to the mean and population standard
    deviation of ``log y``.
    """
    ly = np.log(data.y)
    ones = np.ones((data.n, 1))
    beta, sigma, _ = fit_linear_lognormal_aft(ly, data.delta, ones)
    return ResponseTransform(mu_aft=float(beta[0]), sigma_aft=float(sigma))


def transform_responses(data: EncodedDataset, t: ResponseTransform) -> EncodedDataset:
    """Rescale times as ``y * exp(-mu_aft)`` (log times are shifted by ``-mu_aft``)."""
    y_tr = data.y * math.exp(-t.mu_aft)
    if not np.isfinite(y_tr).all():
        raise NumericError("response transformation overflowed")
    return data.replace_y(y_tr)


def split_point_grid(column: np.ndarray, max_points: int = 100) -> np.ndarray:
    """Candidate cut values for one encoded column.

    At most ``max_points`` distinct cuts at evenly spaced empirical
    quantiles; 0/1 indicator columns get the single cut 0.5, constant
    columns an empty grid. Every returned cut strictly separates at least
    one pair of observed values.
    """
    if max_points < 1:
        raise ConfigError(f"max_points must be >= 1, got {max_points}")
    col = np.asarray(column, dtype=float)
    u = np.unique(col)
    if u.size <= 1:
        return np.empty(0)
    if u.size == 2 and u[0] == 0.0 and u[1] == 1.0:
        return np.array([0.5])
    if u.size - 1 <= max_points:
        return (u[:-1] + u[1:]) / 2.0
    levels = np.arange(1, max_points + 1) / (max_points + 1)
    cand = np.unique(np.quantile(col, levels))
    return cand[cand < u[-1]]
