import hashlib
import io

import numpy as np
import pytest

from npaft import (CdpHyper, ConfigError, DataError, EncodedDataset, FitConfig,
                   ForestPrior, PosteriorDraws, fit, predict_m)
from conftest import make_dataset


def small_config(**overrides):
    base = dict(seed=42, iterations=120, burn_in=40, thin=1,
                prior=ForestPrior(n_trees=20), hyper=CdpHyper(H=20),
                calibration_draws=20_000)
    base.update(overrides)
    return FitConfig(**base)


def digest(draws: PosteriorDraws) -> str:
    buf = io.BytesIO()
    draws.save(buf)
    return hashlib.sha256(buf.getvalue()).hexdigest()


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            FitConfig(seed=1, iterations=100, burn_in=100)
        with pytest.raises(ConfigError):
            FitConfig(seed=1, thin=0)
        with pytest.raises(ConfigError):
            FitConfig(seed=1, iterations=103, burn_in=100, thin=2)
        with pytest.raises(ConfigError):
            FitConfig(seed=1, chains=0)
        with pytest.raises(ConfigError):
            FitConfig(seed=None)

    def test_draw_count(self):
        cfg = FitConfig(seed=1, iterations=7000, burn_in=2000, thin=1)
        assert cfg.draws_per_chain == 5000
        cfg = FitConfig(seed=1, iterations=300, burn_in=100, thin=4)
        assert cfg.draws_per_chain == 50


class TestFit:
    def test_single_retained_draw(self, small_data):
        cfg = small_config(iterations=41, burn_in=40)
        draws = fit(small_data, cfg)
        assert draws.n_draws == 1
        assert draws.iteration[0] == 41

    def test_thinning_counts(self, small_data):
        cfg = small_config(iterations=100, burn_in=40, thin=5)
        draws = fit(small_data, cfg)
        assert draws.n_draws == 12
        assert np.array_equal(np.diff(draws.iteration), np.full(11, 5))

    def test_determinism_bytes(self, small_data):
        a = fit(small_data, small_config())
        b = fit(small_data, small_config())
        assert digest(a) == digest(b)

    def test_different_seed_differs(self, small_data):
        a = fit(small_data, small_config())
        b = fit(small_data, small_config(seed=43))
        assert digest(a) != digest(b)

    def test_chains_concatenate(self, small_data):
        draws = fit(small_data, small_config(chains=2))
        per = small_config().draws_per_chain
        assert draws.n_draws == 2 * per
        assert np.array_equal(np.unique(draws.chain_id), [0, 1])

    def test_mixture_snapshots_satisfy_invariants(self, small_data):
        draws = fit(small_data, small_config())
        sums = draws.pi.sum(axis=1)
        assert np.all(sums == 1.0)
        assert np.all(np.abs(np.einsum("dh,dh->d", draws.pi, draws.tau)) < 1e-10)

    def test_original_scale_location_added_back(self, small_data):
        draws = fit(small_data, small_config())
        # fits must sit near the observed log-time location, not near zero
        assert abs(draws.m0.mean() - np.log(small_data.y).mean()) < 1.0

    def test_step_order_trace(self, small_data):
        steps = []
        cfg = small_config(iterations=5, burn_in=4)
        fit(small_data, cfg, trace_hook=lambda c, t, step, _: steps.append((t, step)))
        expected = ["trees", "labels", "sticks", "locations", "mass_scale", "impute"]
        for t in range(1, 6):
            assert [s for tt, s in steps if tt == t] == expected

    def test_no_censoring_imputation_is_noop(self):
        data = make_dataset(n=40, censor_frac=0.0)
        observed = {}

        def hook(chain, t, step, payload):
            if step == "impute":
                observed[t] = np.array(payload)

        cfg = small_config(iterations=30, burn_in=20)
        draws = fit(data, cfg, trace_hook=hook)
        log_y_tr = np.log(data.y) - draws.transform.mu_aft
        for t, vals in observed.items():
            assert np.allclose(vals, log_y_tr, rtol=0, atol=1e-12)

    def test_censored_rows_imputed_above_bound(self):
        data = make_dataset(n=50, censor_frac=0.3)
        seen = []

        def hook(chain, t, step, payload):
            if step == "impute":
                seen.append(np.array(payload))

        draws = fit(data, small_config(iterations=30, burn_in=20), trace_hook=hook)
        log_y_tr = np.log(data.y) - draws.transform.mu_aft
        cens = data.delta == 0
        for vals in seen:
            assert np.all(vals[cens] > log_y_tr[cens])
            assert np.allclose(vals[~cens], log_y_tr[~cens], atol=1e-12)

    def test_acceptance_rates_strictly_inside_unit_interval(self):
        data = make_dataset(n=60, seed=5)
        cfg = small_config(iterations=540, burn_in=40)
        draws = fit(data, cfg)
        rates = draws.acceptance_rates()
        for kind, rate in rates.items():
            assert 0.0 < rate < 1.0, f"{kind}: {rate}"

    def test_constant_model_recovery(self):
        # pure noise around a constant: posterior mean within 2 posterior sds
        g = np.random.default_rng(7)
        n = 50
        y = np.exp(1.0 + g.normal(0.0, 0.5, n))
        data = EncodedDataset.from_arrays(y, np.ones(n, int),
                                          g.integers(0, 2, n),
                                          g.standard_normal((n, 3)))
        cfg = FitConfig(seed=3, iterations=800, burn_in=300,
                        prior=ForestPrior(n_trees=50), hyper=CdpHyper(H=25),
                        calibration_draws=50_000)
        draws = fit(data, cfg)
        truth = 1.0
        ok = 0
        for m in (draws.m0, draws.m1):
            mean = m.mean(axis=0)
            sd = m.std(axis=0, ddof=1)
            ok += int(np.sum(np.abs(mean - truth) <= 2.0 * sd))
        assert ok >= 0.9 * 2 * n

    def test_truncation_monitor_warns(self):
        # H=2 with spread-out residuals: the top component is always occupied
        data = make_dataset(n=50, noise=1.2, seed=11)
        cfg = small_config(hyper=CdpHyper(H=2), iterations=60, burn_in=20)
        with pytest.warns(RuntimeWarning, match="truncation"):
            fit(data, cfg)


class TestPredict:
    def test_training_row_consistency(self, small_data):
        draws = fit(small_data, small_config(keep_forests=True))
        for i in (0, 3, 17):
            x = small_data.X[i]
            assert np.max(np.abs(predict_m(draws, 1, x) - draws.m1[:, i])) < 1e-10
            assert np.max(np.abs(predict_m(draws, 0, x) - draws.m0[:, i])) < 1e-10

    def test_identical_rows_identical_predictions(self, small_data):
        draws = fit(small_data, small_config(keep_forests=True))
        x = small_data.X[2]
        a = predict_m(draws, 1, x)
        b = predict_m(draws, 1, x.copy())
        assert np.array_equal(a, b)

    def test_matrix_shape(self, small_data):
        draws = fit(small_data, small_config(keep_forests=True))
        out = predict_m(draws, 0, small_data.X[:5])
        assert out.shape == (draws.n_draws, 5)

    def test_requires_forests(self, small_data):
        draws = fit(small_data, small_config(keep_forests=False))
        with pytest.raises(DataError, match="keep_forests"):
            predict_m(draws, 1, small_data.X[0])

    def test_heldout_step_function_recovery(self):
        # depth-1 truth in x1: log t = 1 + 0.8*(x1 > 0)
        g = np.random.default_rng(15)
        n = 120
        X = g.standard_normal((n, 2))
        a = g.integers(0, 2, n)
        y = np.exp(1.0 + 0.8 * (X[:, 0] > 0) + g.normal(0, 0.3, n))
        data = EncodedDataset.from_arrays(y, np.ones(n, int), a, X)
        cfg = FitConfig(seed=9, iterations=600, burn_in=200,
                        prior=ForestPrior(n_trees=50), hyper=CdpHyper(H=20),
                        calibration_draws=50_000, keep_forests=True)
        draws = fit(data, cfg)
        for x_new, truth in (([1.2, 0.0], 1.8), ([-1.2, 0.0], 1.0)):
            pm = predict_m(draws, 0, np.array(x_new))
            assert abs(pm.mean() - truth) <= 2.0 * max(pm.std(ddof=1), 0.05)


class TestPersistence:
    def test_save_load_roundtrip(self, small_data, tmp_path):
        draws = fit(small_data, small_config(keep_forests=True))
        f = tmp_path / "draws.npz"
        draws.save(f)
        back = PosteriorDraws.load(f)
        assert np.array_equal(back.m0, draws.m0)
        assert np.array_equal(back.tau, draws.tau)
        assert back.transform == draws.transform
        assert back.config == draws.config

        ff = tmp_path / "forests.json"
        draws.save_forests(ff)
        back.load_forests(ff)
        x = small_data.X[4]
        assert np.allclose(predict_m(back, 1, x), predict_m(draws, 1, x),
                           rtol=0, atol=0)

    def test_save_is_byte_deterministic(self, small_data, tmp_path):
        draws = fit(small_data, small_config())
        a, b = tmp_path / "a.npz", tmp_path / "b.npz"
        draws.save(a)
        draws.save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_memmap_spill_equivalence(self, small_data, tmp_path):
        in_mem = fit(small_data, small_config())
        spilled = fit(small_data, small_config(memory_budget_mb=0.0001,
                                               spill_dir=str(tmp_path)))
        assert isinstance(spilled.m0, np.memmap)
        for name in ("m0", "m1", "pi", "tau", "sigma", "M"):
            assert np.array_equal(np.asarray(getattr(in_mem, name)),
                                  np.asarray(getattr(spilled, name))), name
        # two spilled runs with identical config are byte-identical
        again = fit(small_data, small_config(memory_budget_mb=0.0001,
                                             spill_dir=str(tmp_path)))
        assert digest(spilled) == digest(again)
