"""Generative benchmarks and scoring.

Four mean-zero residual families with a common target variance, null
time-to-event generators (linear log-time regression and a proportional-
hazards model with a Weibull baseline), a random nonlinear-surface generator
built from Gaussian bumps on random covariate subsets, exponential censoring
calibrated to a target fraction, replication metrics (RMSE, misclassification
proportion, interval coverage, evidence-of-heterogeneity percentages), a
censoring-weighted cross-validation score, and the parametric linear
baseline.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .data import EncodedDataset, fit_linear_lognormal_aft
from .engine import FitConfig, PosteriorDraws, fit
from .errors import ConfigError, DataError, NumericError
from .hte import allocate, differential_effect, ite_draws

EULER_GAMMA = 0.5772156649015329
CENSOR_TARGETS = {"light": 0.20, "heavy": 0.45}
FAMILY_TAGS = ("normal", "gumbel", "std-gamma", "t-mixture")


@dataclass(frozen=True)
class ResidualFamily:
    """A mean-zero residual law with a matched target variance."""

    tag: str
    variance: float = 1.0
    gamma_shape: float = 2.0      # std-gamma only
    t_df: float = 3.0             # t-mixture only
    t_tail_weight: float = 0.25   # weight of each off-center t component

    def __post_init__(self):
        if self.tag not in FAMILY_TAGS:
            raise ConfigError(f"unknown residual family {self.tag!r}")
        if self.variance <= 0:
            raise ConfigError("variance must be positive")
        if not 0 < self.t_tail_weight < 0.5:
            raise ConfigError("t_tail_weight must be in (0, 0.5)")
        if self.t_df <= 2:
            raise ConfigError("t_df must exceed 2 for a finite variance")


def gen_residuals(family: ResidualFamily, n: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. mean-zero draws with the family's target variance."""
    v = family.variance
    if family.tag == "normal":
        return rng.normal(0.0, math.sqrt(v), n)
    if family.tag == "gumbel":
        beta = math.sqrt(6.0 * v) / math.pi
        return rng.gumbel(-beta * EULER_GAMMA, beta, n)
    if family.tag == "std-gamma":
        k = family.gamma_shape
        s = math.sqrt(v / k)
        return rng.gamma(k, s, n) - k * s
    # mixture of three t distributions: tails at +-mu_star, center at 0;
    # location spread and component variance each carry half the target
    w = family.t_tail_weight
    mu_star = math.sqrt(v / (4.0 * w))
    t_var = family.t_df / (family.t_df - 2.0)
    s = math.sqrt(v / (2.0 * t_var))
    locs = np.array([-mu_star, 0.0, mu_star])
    comp = rng.choice(3, size=n, p=[w, 1.0 - 2.0 * w, w])
    return locs[comp] + s * rng.standard_t(family.t_df, n)


@dataclass
class SimData:
    """One simulated cohort: latent failure times plus the true effects."""

    T: np.ndarray            # latent failure times
    a: np.ndarray
    X: np.ndarray
    theta_true: np.ndarray   # true log-scale effect per subject
    y: np.ndarray | None = None
    delta: np.ndarray | None = None

    def to_dataset(self) -> EncodedDataset:
        if self.y is None:
            raise DataError("apply a censoring level before building a dataset")
        return EncodedDataset.from_arrays(self.y, self.delta, self.a, self.X)


def gen_null_aft(coefs: np.ndarray, family: ResidualFamily, n: int,
                 rng: np.random.Generator,
                 interaction_coefs: np.ndarray | None = None) -> SimData:
    """Linear log-time model ``log T = b0 + b1 A + X b + [A * X b_int] + W``.

    Without interactions the true effect is the constant ``b1``; with them it
    is ``b1 + x' b_int`` (the fixed-regression scenario).
    """
    coefs = np.asarray(coefs, dtype=float)
    if coefs.shape[0] < 2:
        raise ConfigError("need at least intercept and treatment coefficients")
    b0, b1, bx = coefs[0], coefs[1], coefs[2:]
    p = bx.shape[0]
    X = rng.standard_normal((n, p))
    a = rng.integers(0, 2, n)
    theta = np.full(n, b1)
    log_t = b0 + b1 * a + (X @ bx if p else 0.0)
    if interaction_coefs is not None:
        b_int = np.asarray(interaction_coefs, dtype=float)
        if b_int.shape[0] != p:
            raise ConfigError("interaction coefficients must match covariate count")
        theta = b1 + X @ b_int
        log_t = b0 + a * theta + (X @ bx if p else 0.0)
    log_t = log_t + gen_residuals(family, n, rng)
    return SimData(np.exp(log_t), a, X, theta)


def gen_null_cox(coefs: np.ndarray, shape: float, scale: float, n: int,
                 rng: np.random.Generator) -> SimData:
    """Proportional-hazards times with a Weibull baseline, by inverse transform.

    ``T = scale * (-log U / exp(eta))^(1/shape)`` with linear predictor
    ``eta = b0 + b1 A + X b``; the true log-time effect is the constant
    ``-b1/shape``.
    """
    if shape <= 0 or scale <= 0:
        raise ConfigError("Weibull shape and scale must be positive")
    coefs = np.asarray(coefs, dtype=float)
    b0, b1, bx = coefs[0], coefs[1], coefs[2:]
    p = bx.shape[0]
    X = rng.standard_normal((n, p))
    a = rng.integers(0, 2, n)
    eta = b0 + b1 * a + (X @ bx if p else 0.0)
    u = rng.random(n)
    T = scale * (-np.log(u) / np.exp(eta)) ** (1.0 / shape)
    return SimData(T, a, X, np.full(n, -b1 / shape))


@dataclass
class GaussianBump:
    """exp(-0.5 (z - mu)' V (z - mu)) over a fixed covariate subset."""

    idx: np.ndarray
    mu: np.ndarray
    V: np.ndarray

    def __call__(self, X: np.ndarray) -> np.ndarray:
        z = X[:, self.idx] - self.mu
        return np.exp(-0.5 * np.einsum("ij,jk,ik->i", z, self.V, z))


@dataclass
class RandomSurface:
    """Random nonlinear baseline and effect surfaces built from bumps."""

    baseline_coefs: np.ndarray
    baseline_bumps: list[GaussianBump]
    effect_coefs: np.ndarray
    effect_bumps: list[GaussianBump]

    def baseline(self, X: np.ndarray) -> np.ndarray:
        out = np.zeros(X.shape[0])
        for c, g in zip(self.baseline_coefs, self.baseline_bumps):
            out += c * g(X)
        return out

    def effect(self, X: np.ndarray) -> np.ndarray:
        out = np.zeros(X.shape[0])
        for c, g in zip(self.effect_coefs, self.effect_bumps):
            out += c * g(X)
        return out

    def regression(self, a: np.ndarray, X: np.ndarray) -> np.ndarray:
        return self.baseline(X) + a * self.effect(X)


def random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix via QR with sign correction."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _draw_bump(p: int, rng: np.random.Generator) -> GaussianBump:
    r = rng.exponential(2.0)
    size = min(int(math.floor(r + 1.5)), 10)
    idx = rng.choice(p, size=size, replace=False)
    mu = rng.standard_normal(size)
    sqrt_d = rng.uniform(0.1, 2.0, size)
    u = random_orthogonal(size, rng)
    V = u @ np.diag(sqrt_d ** 2) @ u.T
    return GaussianBump(idx, mu, V)


def draw_random_surface(rng: np.random.Generator, p: int = 20,
                        n_baseline: int = 10, n_effect: int = 5) -> RandomSurface:
    a1 = rng.uniform(-1.0, 1.0, n_baseline)
    g1 = [_draw_bump(p, rng) for _ in range(n_baseline)]
    a2 = rng.uniform(-0.2, 0.3, n_effect)
    g2 = [_draw_bump(p, rng) for _ in range(n_effect)]
    return RandomSurface(a1, g1, a2, g2)


def gen_friedman_scenario(n: int, rng: np.random.Generator, p: int = 20,
                          family: ResidualFamily | None = None,
                          surface: RandomSurface | None = None
                          ) -> tuple[RandomSurface, SimData]:
    """Random-surface cohort: x ~ N(0,1)^p, equal-probability arms,
    ``log T = F0(x) + A*effect(x) + W``. True effects retained for scoring."""
    if family is None:
        family = ResidualFamily("normal")
    if surface is None:
        surface = draw_random_surface(rng, p)
    X = rng.standard_normal((n, p))
    a = rng.integers(0, 2, n)
    theta = surface.effect(X)
    log_t = surface.baseline(X) + a * theta + gen_residuals(family, n, rng)
    return surface, SimData(np.exp(log_t), a, X, theta)


def apply_censoring(sim: SimData, level: str, rng: np.random.Generator,
                    targets: dict[str, float] | None = None,
                    pilot_tol: float = 1e-10) -> SimData:
    """Independent exponential censoring with the rate calibrated so the
    expected censored fraction matches the level's target."""
    if targets is None:
        targets = CENSOR_TARGETS
    if level == "none":
        sim.y = sim.T.copy()
        sim.delta = np.ones(sim.T.shape[0], dtype=np.int8)
        return sim
    if level not in targets:
        raise ConfigError(f"unknown censoring level {level!r}")
    target = targets[level]
    T = sim.T

    def expected_censored(lam: float) -> float:
        return float(np.mean(-np.expm1(-lam * T))) - target

    lo, hi = 1e-12, 1.0 / max(float(np.median(T)), 1e-300)
    for _ in range(200):
        if expected_censored(hi) > 0:
            break
        hi *= 2.0
    else:
        raise NumericError("censoring calibration failed to bracket the target")
    lam = brentq(expected_censored, lo, hi, xtol=pilot_tol)
    C = rng.exponential(1.0 / lam, T.shape[0])
    sim.y = np.minimum(T, C)
    sim.delta = (T <= C).astype(np.int8)
    return sim


class KaplanMeier:
    """Product-limit survival estimate, evaluated right-continuously."""

    def __init__(self, times: np.ndarray, events: np.ndarray):
        times = np.asarray(times, dtype=float)
        events = np.asarray(events)
        order = np.argsort(times, kind="stable")
        t, e = times[order], events[order]
        uniq, start = np.unique(t, return_index=True)
        n = t.shape[0]
        at_risk = n - start
        d = np.add.reduceat(e, start)
        with np.errstate(invalid="ignore"):
            factors = 1.0 - d / at_risk
        self.times = uniq
        self.survival = np.cumprod(factors)

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        surv = np.concatenate(([1.0], self.survival))
        return surv[idx]


@dataclass
class MetricRow:
    """Scores for one simulation replication."""

    rmse: float
    mcprop: float
    coverage: float
    pct_strong: float
    pct_mild: float
    censored_fraction: float = math.nan

    def as_dict(self) -> dict:
        return {"rmse": self.rmse, "mcprop": self.mcprop, "coverage": self.coverage,
                "pct_strong": self.pct_strong, "pct_mild": self.pct_mild,
                "censored_fraction": self.censored_fraction}


def score_replication(true_theta: np.ndarray, theta_hat: np.ndarray,
                      lower: np.ndarray, upper: np.ndarray,
                      allocation: np.ndarray,
                      pct_strong: float = math.nan,
                      pct_mild: float = math.nan) -> MetricRow:
    """RMSE, misclassification proportion, and interval coverage."""
    arrays = [np.asarray(v, dtype=float) for v in
              (true_theta, theta_hat, lower, upper, allocation)]
    n = arrays[0].shape[0]
    if any(arr.shape[0] != n for arr in arrays[1:]):
        raise DataError("score inputs have mismatched lengths")
    theta, theta_hat, lo, hi, R = arrays
    rmse = float(np.sqrt(np.mean((theta_hat - theta) ** 2)))
    mcprop = float(np.mean((theta <= 0) * R) + np.mean((theta > 0) * (1.0 - R)))
    coverage = float(np.mean((lo <= theta) & (theta <= hi)))
    return MetricRow(rmse, mcprop, coverage, pct_strong, pct_mild)


def param_aft_baseline(data: EncodedDataset, interactions: bool = True) -> dict:
    """Linear lognormal survival baseline with optional treatment-covariate
    interactions; returns per-patient effect estimates and the treatment
    coefficient with its standard error."""
    a = data.a.astype(float)
    cols = [np.ones(data.n), a, data.X]
    if interactions:
        cols.append(a[:, None] * data.X)
    design = np.column_stack(cols)
    ly = np.log(data.y)
    beta, sigma, cov = fit_linear_lognormal_aft(ly, data.delta, design)
    p = data.p_enc
    theta_hat = np.full(data.n, beta[1])
    if interactions:
        theta_hat = beta[1] + data.X @ beta[2 + p:2 + 2 * p]
    return {"beta": beta, "sigma": sigma,
            "treatment_coef": float(beta[1]),
            "treatment_se": float(np.sqrt(cov[1, 1])),
            "theta_hat": theta_hat}


# -- cross-validation ---------------------------------------------------------

def cross_validation_score(data: EncodedDataset, n_folds: int, fit_fn,
                           rng: np.random.Generator,
                           weight_floor: float = 1e-3,
                           weight_estimator=None) -> tuple[list[float], float]:
    """Censoring-weighted absolute prediction error over K folds.

    ``fit_fn(train_data)`` must return a predictor ``f(a, X) -> point
    estimates`` of the expected log failure time on the original scale.
    ``weight_estimator(train_data)`` may replace the default Kaplan-Meier
    censoring-survival fit; it must return a callable of evaluation times.
    """
    if n_folds < 2:
        raise ConfigError(f"need at least 2 folds, got {n_folds}")
    n = data.n
    perm = rng.permutation(n)
    folds = np.array_split(perm, n_folds)
    scores: list[float] = []
    for k, test_idx in enumerate(folds):
        mask = np.ones(n, dtype=bool)
        mask[test_idx] = False
        train = data.subset(np.nonzero(mask)[0])
        if not (train.delta == 1).any():
            raise DataError(f"fold {k + 1}: training part has no events")
        predict = fit_fn(train)
        if weight_estimator is None:
            censor_surv = KaplanMeier(train.y, 1 - train.delta)
        else:
            censor_surv = weight_estimator(train)
        test = data.subset(test_idx)
        v_hat = np.asarray(censor_surv(test.y), dtype=float)
        if np.any((v_hat < weight_floor) & (test.delta == 1)):
            warnings.warn("censoring-survival estimate hit the weight floor",
                          RuntimeWarning)
        v_hat = np.maximum(v_hat, weight_floor)
        m_hat = np.asarray(predict(test.a, test.X), dtype=float)
        term = test.delta / v_hat * np.abs(np.log(test.y) - m_hat)
        scores.append(float(term.mean()))
    return scores, float(np.mean(scores))


# -- full benchmark pipeline ---------------------------------------------------

@dataclass
class SimScenario:
    """One benchmark configuration."""

    kind: str                     # aft-linear-null | cox-null | friedman-hte | fixed-regression
    n: int
    family: ResidualFamily
    censoring: str = "none"
    name: str = ""
    coefs: tuple = (6.5, 0.25)
    interaction_coefs: tuple | None = None
    weibull_shape: float = 1.2
    weibull_scale: float = 1000.0
    p: int = 20                   # friedman-hte covariate count

    def __post_init__(self):
        kinds = ("aft-linear-null", "cox-null", "friedman-hte", "fixed-regression")
        if self.kind not in kinds:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if not self.name:
            self.name = f"{self.kind}/n{self.n}/{self.censoring}/{self.family.tag}"


def _generate(scenario: SimScenario, rng: np.random.Generator) -> SimData:
    if scenario.kind == "aft-linear-null":
        return gen_null_aft(np.asarray(scenario.coefs), scenario.family, scenario.n, rng)
    if scenario.kind == "fixed-regression":
        if scenario.interaction_coefs is None:
            raise ConfigError("fixed-regression scenario needs interaction_coefs")
        return gen_null_aft(np.asarray(scenario.coefs), scenario.family, scenario.n,
                            rng, np.asarray(scenario.interaction_coefs))
    if scenario.kind == "cox-null":
        return gen_null_cox(np.asarray(scenario.coefs), scenario.weibull_shape,
                            scenario.weibull_scale, scenario.n, rng)
    _, sim = gen_friedman_scenario(scenario.n, rng, scenario.p, scenario.family)
    return sim


def run_replication(scenario: SimScenario, fit_config: FitConfig,
                    seed_seq: np.random.SeedSequence) -> MetricRow:
    """generate -> censor -> fit -> summarize -> score for one replication."""
    gen_seq, fit_seq = seed_seq.spawn(2)
    rng = np.random.default_rng(gen_seq)
    sim = _generate(scenario, rng)
    apply_censoring(sim, scenario.censoring, rng)
    dataset = sim.to_dataset()
    cfg_seed = int(fit_seq.generate_state(1)[0])
    cfg = FitConfig(seed=cfg_seed, iterations=fit_config.iterations,
                    burn_in=fit_config.burn_in, thin=fit_config.thin,
                    chains=fit_config.chains, hyper=fit_config.hyper,
                    prior=fit_config.prior, keep_forests=False,
                    max_split_points=fit_config.max_split_points,
                    calibration_draws=fit_config.calibration_draws,
                    memory_budget_mb=fit_config.memory_budget_mb)
    draws = fit(dataset, cfg)
    ite = ite_draws(draws, "log")
    dte = differential_effect(ite)
    lower, upper = ite.intervals(0.95)
    row = score_replication(sim.theta_true, ite.point_estimates(), lower, upper,
                            allocate(ite, "misclassification"),
                            dte.pct_strong, dte.pct_mild)
    row.censored_fraction = float(np.mean(sim.delta == 0))
    return row


def _run_task(args):
    scenario, fit_config, seed_seq, s_i, rep = args
    row = run_replication(scenario, fit_config, seed_seq)
    return s_i, rep, row


def run_benchmark(scenarios: list[SimScenario], reps: int, fit_config: FitConfig,
                  seed: int, workers: int = 1) -> list[dict]:
    """Run every scenario for ``reps`` replications; one result row each.

    Tasks are seeded from one root sequence in a fixed order, so results are
    reproducible regardless of worker count or completion order.
    """
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    root = np.random.SeedSequence(seed)
    tasks = []
    seqs = root.spawn(len(scenarios) * reps)
    for s_i, scenario in enumerate(scenarios):
        for rep in range(reps):
            tasks.append((scenario, fit_config, seqs[s_i * reps + rep], s_i, rep))
    results: dict[tuple[int, int], MetricRow] = {}
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for s_i, rep, row in pool.map(_run_task, tasks):
                results[(s_i, rep)] = row
    else:
        for task in tasks:
            s_i, rep, row = _run_task(task)
            results[(s_i, rep)] = row
    rows = []
    for s_i, scenario in enumerate(scenarios):
        for rep in range(reps):
            row = results[(s_i, rep)]
            rows.append({"scenario": scenario.name, "kind": scenario.kind,
                         "n": scenario.n, "censoring": scenario.censoring,
                         "family": scenario.family.tag, "rep": rep,
                         **row.as_dict()})
    return rows


def format_benchmark_table(rows: list[dict]) -> str:
    """Per-scenario means of the evidence percentages, one line per
    (n, censoring) group with family columns."""
    groups: dict[tuple[int, str], dict[str, list]] = {}
    families: list[str] = []
    for row in rows:
        key = (row["n"], row["censoring"])
        fam = row["family"]
        if fam not in families:
            families.append(fam)
        groups.setdefault(key, {}).setdefault(fam, []).append(row)
    header = f"{'n':>6} {'censoring':>10}"
    for fam in families:
        header += f" {fam + ' SE':>12} {fam + ' ME':>12}"
    lines = [header, "-" * len(header)]
    for (n, cens), by_fam in sorted(groups.items()):
        line = f"{n:>6} {cens:>10}"
        for fam in families:
            rows_f = by_fam.get(fam)
            if rows_f:
                se = np.mean([r["pct_strong"] for r in rows_f])
                me = np.mean([r["pct_mild"] for r in rows_f])
                line += f" {se:>12.3f} {me:>12.3f}"
            else:
                line += f" {'-':>12} {'-':>12}"
        lines.append(line)
    return "\n".join(lines) + "\n"
