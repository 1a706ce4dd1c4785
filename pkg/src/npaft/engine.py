"""Blocked Gibbs sampler over the tree ensemble and the residual mixture.

One iteration executes, in fixed order: (1) a backfitting sweep over all
trees against the mixture-shifted complete-data responses, (2) cluster-label
resampling, (3) stick-weight resampling, (4) conjugate atom draws with
recentering, (5) mass and kernel-variance updates, (6) truncated-normal
imputation of censored responses. Retained draws store both arms' ensemble
fits for every training row (with the response-scale location added back),
the mixture snapshot, and per-sweep sampler diagnostics.

Randomness derives from one root seed: ``SeedSequence(seed)`` spawns one
calibration stream plus one sequence per chain, and each chain spawns six
component streams (tree moves/leaf draws, labels, sticks, locations,
mass/scale, imputation). Adding diagnostics therefore never perturbs draws,
and a (seed, data, config) triple reproduces results bit for bit.
"""

from __future__ import annotations

import json
import math
import tempfile
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import EncodedDataset, ResponseTransform, fit_intercept_lognormal_aft, \
    split_point_grid, transform_responses
from .errors import ConfigError, DataError, NumericError
from .forest import Forest, ForestPrior, PackedForest, TreeWorkspace, backfit_sweep, \
    pack_forest, MOVE_GROW, MOVE_PRUNE, MOVE_CHANGE, MOVE_SWAP
from .mixture import CdpHyper, calibrate_scale, impute_censored, init_state, \
    update_cluster_labels, update_cluster_locations, update_mass_and_scale, \
    update_stick_weights

MOVE_ORDER = (MOVE_GROW, MOVE_PRUNE, MOVE_CHANGE, MOVE_SWAP)
DRAWS_SCHEMA_VERSION = 1
FORESTS_SCHEMA_VERSION = 1


@dataclass
class FitConfig:
    """Sampler run configuration."""

    seed: int
    iterations: int = 7000
    burn_in: int = 2000
    thin: int = 1
    chains: int = 1
    hyper: CdpHyper = field(default_factory=CdpHyper)
    prior: ForestPrior = field(default_factory=ForestPrior)
    keep_forests: bool = False
    max_split_points: int = 100
    calibration_draws: int = 1_000_000
    memory_budget_mb: float = 4096.0
    spill_dir: str | None = None

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("a seed is required")
        if not self.iterations > self.burn_in >= 0:
            raise ConfigError(
                f"need iterations > burn_in >= 0, got {self.iterations}, {self.burn_in}")
        if self.thin < 1:
            raise ConfigError(f"thin must be >= 1, got {self.thin}")
        if (self.iterations - self.burn_in) % self.thin != 0:
            raise ConfigError("iterations - burn_in must be divisible by thin")
        if self.chains < 1:
            raise ConfigError(f"chains must be >= 1, got {self.chains}")

    @property
    def draws_per_chain(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def to_jsonable(self) -> dict:
        doc = asdict(self)
        doc["prior"].pop("grids", None)
        return doc


@dataclass
class PosteriorDraws:
    """Retained samples plus diagnostics; the substrate for every summary."""

    m0: np.ndarray           # (D, n) control-arm fits, original log-time scale
    m1: np.ndarray           # (D, n) treated-arm fits
    pi: np.ndarray           # (D, H) mixture weights
    tau: np.ndarray          # (D, H) centered atoms
    sigma: np.ndarray        # (D,) kernel scale
    M: np.ndarray            # (D,) mass parameter
    chain_id: np.ndarray     # (D,)
    iteration: np.ndarray    # (D,) 1-based iteration index within the chain
    occupied: np.ndarray     # (D,) occupied-cluster count
    max_index: np.ndarray    # (D,) 1-based maximum occupied component index
    acc_proposed: np.ndarray  # (D, 4) per-sweep proposal counts (grow/prune/change/swap)
    acc_accepted: np.ndarray  # (D, 4)
    transform: ResponseTransform
    config: dict
    sigma_tau_sq: float
    forests: list[PackedForest] | None = None

    @property
    def n_draws(self) -> int:
        return self.m0.shape[0]

    @property
    def n_patients(self) -> int:
        return self.m0.shape[1]

    def acceptance_rates(self) -> dict[str, float]:
        """Run-level acceptance rate per move type."""
        prop = self.acc_proposed.sum(axis=0).astype(float)
        acc = self.acc_accepted.sum(axis=0).astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            rates = np.where(prop > 0, acc / prop, np.nan)
        return dict(zip(MOVE_ORDER, rates.tolist()))

    # -- persistence -----------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write the columnar draw container (npz with a JSON header entry)."""
        header = {
            "schema_version": DRAWS_SCHEMA_VERSION,
            "config": self.config,
            "mu_aft": self.transform.mu_aft,
            "sigma_aft": self.transform.sigma_aft,
            "sigma_tau_sq": self.sigma_tau_sq,
            "columns": {
                "m0": "control-arm fit per patient", "m1": "treated-arm fit per patient",
                "pi": "mixture weights", "tau": "centered atoms", "sigma": "kernel scale",
                "M": "mass parameter", "chain_id": "chain", "iteration": "iteration",
                "occupied": "occupied clusters", "max_index": "max occupied index",
                "acc_proposed": "per-sweep proposals " + "/".join(MOVE_ORDER),
                "acc_accepted": "per-sweep acceptances " + "/".join(MOVE_ORDER),
            },
        }
        def write(fh):
            np.savez(fh, header=np.frombuffer(
                json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
                m0=np.asarray(self.m0), m1=np.asarray(self.m1), pi=self.pi,
                tau=self.tau, sigma=self.sigma, M=self.M, chain_id=self.chain_id,
                iteration=self.iteration, occupied=self.occupied,
                max_index=self.max_index, acc_proposed=self.acc_proposed,
                acc_accepted=self.acc_accepted)

        if hasattr(path, "write"):
            write(path)
        else:
            with open(path, "wb") as fh:
                write(fh)

    @classmethod
    def load(cls, path: str | Path) -> "PosteriorDraws":
        with np.load(path) as z:
            header = json.loads(bytes(z["header"]).decode())
            if header.get("schema_version") != DRAWS_SCHEMA_VERSION:
                raise DataError(f"unsupported draw-file schema: {header.get('schema_version')}")
            return cls(m0=z["m0"], m1=z["m1"], pi=z["pi"], tau=z["tau"],
                       sigma=z["sigma"], M=z["M"], chain_id=z["chain_id"],
                       iteration=z["iteration"], occupied=z["occupied"],
                       max_index=z["max_index"], acc_proposed=z["acc_proposed"],
                       acc_accepted=z["acc_accepted"],
                       transform=ResponseTransform(header["mu_aft"], header["sigma_aft"]),
                       config=header["config"], sigma_tau_sq=header["sigma_tau_sq"])

    def save_forests(self, path: str | Path) -> None:
        if self.forests is None:
            raise DataError("no forests retained; refit with keep_forests=True")
        doc = {"schema_version": FORESTS_SCHEMA_VERSION,
               "mu_aft": self.transform.mu_aft,
               "draws": [pf.to_jsonable() for pf in self.forests]}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))

    def load_forests(self, path: str | Path) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("schema_version") != FORESTS_SCHEMA_VERSION:
            raise DataError(f"unsupported forest-dump schema: {doc.get('schema_version')}")
        self.forests = [PackedForest.from_jsonable(d) for d in doc["draws"]]


def _build_grids(U: np.ndarray, max_points: int) -> list[np.ndarray]:
    return [split_point_grid(U[:, k], max_points) for k in range(U.shape[1])]


class _DrawStore:
    """Columnar draw buffers, spilled to disk when over the memory budget."""

    def __init__(self, total: int, n: int, H: int, budget_mb: float,
                 spill_dir: str | None):
        big_bytes = 8 * total * (2 * n + 2 * H)
        self.tmpdir = None
        if big_bytes > budget_mb * 2 ** 20:
            self.tmpdir = tempfile.TemporaryDirectory(dir=spill_dir, prefix="npaft-spill-")
            base = Path(self.tmpdir.name)
            def make(name, shape):
                return np.lib.format.open_memmap(base / f"{name}.npy", mode="w+",
                                                 dtype=np.float64, shape=shape)
        else:
            def make(name, shape):
                return np.empty(shape)
        self.m0 = make("m0", (total, n))
        self.m1 = make("m1", (total, n))
        self.pi = make("pi", (total, H))
        self.tau = make("tau", (total, H))
        self.sigma = np.empty(total)
        self.M = np.empty(total)
        self.chain_id = np.empty(total, dtype=np.int16)
        self.iteration = np.empty(total, dtype=np.int32)
        self.occupied = np.empty(total, dtype=np.int32)
        self.max_index = np.empty(total, dtype=np.int32)
        self.acc_proposed = np.zeros((total, 4), dtype=np.int32)
        self.acc_accepted = np.zeros((total, 4), dtype=np.int32)


def _check_finite(iteration: int, **named) -> None:
    for name, arr in named.items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite {name} at iteration {iteration}")


def fit(data: EncodedDataset, config: FitConfig,
        trace_hook=None) -> PosteriorDraws:
    """Run the full sampler and materialize posterior draws.

    ``trace_hook(chain, iteration, step, payload)``, when given, is invoked
    after every step of every iteration, making the step order auditable.
    """
    transform = fit_intercept_lognormal_aft(data)
    data_tr = transform_responses(data, transform)

    root = np.random.SeedSequence(config.seed)
    seqs = root.spawn(1 + config.chains)
    rng_cal = np.random.default_rng(seqs[0])

    hyper = config.hyper
    if hyper.sigma_tau_sq is None:
        st2 = calibrate_scale(transform.sigma_aft, hyper,
                              config.calibration_draws, rng_cal)
        hyper = CdpHyper(psi1=hyper.psi1, psi2=hyper.psi2, nu=hyper.nu,
                         q=hyper.q, H=hyper.H, sigma_tau_sq=st2)

    a_col = data_tr.a.astype(float)
    U = np.column_stack([a_col, data_tr.X])
    grids = _build_grids(U, config.max_split_points)
    prior = config.prior.resolved(zeta=4.0 * transform.sigma_aft, grids=grids)

    n = data_tr.n
    store = _DrawStore(config.chains * config.draws_per_chain, n, hyper.H,
                       config.memory_budget_mb, config.spill_dir)
    forests: list[PackedForest] | None = [] if config.keep_forests else None

    log_y_tr = np.log(data_tr.y)
    flipped_arm = 1.0 - a_col
    arm_is_treated = data_tr.a == 1
    hit_truncation = 0

    for chain in range(config.chains):
        comp = seqs[1 + chain].spawn(6)
        rng_trees, rng_labels, rng_sticks, rng_locs, rng_mass, rng_imp = map(
            np.random.default_rng, comp)

        ws = TreeWorkspace(U, grids)
        forest = Forest(ws, prior)
        state = init_state(n, hyper, transform.sigma_aft)
        logy_c = log_y_tr.copy()  # censored rows start at their bound
        d_idx = chain * config.draws_per_chain

        for t in range(1, config.iterations + 1):
            stats_before = {k: list(v) for k, v in forest.move_stats.items()}
            shifted = logy_c - state.tau[state.S]
            backfit_sweep(forest, shifted, state.sigma, rng_trees)
            if trace_hook:
                trace_hook(chain, t, "trees", forest)

            resid = logy_c - forest.m_total
            update_cluster_labels(state, resid, rng_labels)
            if trace_hook:
                trace_hook(chain, t, "labels", state)
            update_stick_weights(state, rng_sticks)
            if trace_hook:
                trace_hook(chain, t, "sticks", state)
            update_cluster_locations(state, resid, hyper, rng_locs)
            if trace_hook:
                trace_hook(chain, t, "locations", state)
            update_mass_and_scale(state, resid, hyper, rng_mass)
            if trace_hook:
                trace_hook(chain, t, "mass_scale", state)
            logy_c = impute_censored(state, forest.m_total, data_tr.delta,
                                     log_y_tr, rng_imp)
            if trace_hook:
                trace_hook(chain, t, "impute", logy_c)

            _check_finite(t, m=forest.m_total, sigma_sq=state.sigma_sq,
                          M=state.M, tau=state.tau, responses=logy_c)
            if state.max_occupied_index == hyper.H:
                hit_truncation += 1

            if t > config.burn_in and (t - config.burn_in) % config.thin == 0:
                state.check_invariants()
                m_obs = forest.m_total
                m_flip = forest.counterfactual_total(flipped_arm)
                store.m1[d_idx] = np.where(arm_is_treated, m_obs, m_flip) + transform.mu_aft
                store.m0[d_idx] = np.where(arm_is_treated, m_flip, m_obs) + transform.mu_aft
                store.pi[d_idx] = state.pi
                store.tau[d_idx] = state.tau
                store.sigma[d_idx] = state.sigma
                store.M[d_idx] = state.M
                store.chain_id[d_idx] = chain
                store.iteration[d_idx] = t
                store.occupied[d_idx] = state.occupied
                store.max_index[d_idx] = state.max_occupied_index
                for mi, mv in enumerate(MOVE_ORDER):
                    after = forest.move_stats.get(mv, [0, 0])
                    before = stats_before.get(mv, [0, 0])
                    store.acc_proposed[d_idx, mi] = after[0] - before[0]
                    store.acc_accepted[d_idx, mi] = after[1] - before[1]
                if forests is not None:
                    forests.append(pack_forest(forest))
                d_idx += 1

    frac_hit = hit_truncation / (config.chains * config.iterations)
    if frac_hit > 0.01:
        warnings.warn(
            f"maximum occupied component index reached the truncation level in "
            f"{frac_hit:.1%} of sweeps; consider increasing H", RuntimeWarning)

    draws = PosteriorDraws(
        m0=store.m0, m1=store.m1, pi=store.pi, tau=store.tau, sigma=store.sigma,
        M=store.M, chain_id=store.chain_id, iteration=store.iteration,
        occupied=store.occupied, max_index=store.max_index,
        acc_proposed=store.acc_proposed, acc_accepted=store.acc_accepted,
        transform=transform, config=config.to_jsonable(),
        sigma_tau_sq=hyper.sigma_tau_sq, forests=forests)
    draws._spill = store.tmpdir  # keep any spill files alive with the draws
    return draws


def predict_m(draws: PosteriorDraws, a: int, x: np.ndarray) -> np.ndarray:
    """Per-draw regression-function values at new covariates.

    ``x`` is one encoded covariate vector or a matrix of rows; returns shape
    (draws,) or (draws, rows) on the original log-time scale.
    """
    if draws.forests is None:
        raise DataError("forest checkpoints were not retained; "
                        "refit with keep_forests=True to enable prediction")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    U = np.column_stack([np.full(X.shape[0], float(a)), X])
    out = np.empty((draws.n_draws, X.shape[0]))
    for d, pf in enumerate(draws.forests):
        out[d] = pf.predict_matrix(U)
    out += draws.transform.mu_aft
    return out[:, 0] if single else out
