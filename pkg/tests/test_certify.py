import math

import numpy as np
import pytest

from maskcert.certify import (CertConfig, bound_estimate, certify_sample,
                              clean_margin, log_y, log_y_grid, paley_confidence,
                              pca, z_samples)
from maskcert.model import LayerSpec, MaskableModel, mlp_specs
from maskcert.transforms import TransformSpec


def constant_model(bias=(2.0, 0.0), in_dim=4):
    """Zero weights: output distribution is softmax(bias) regardless of input."""
    k = len(bias)
    return MaskableModel([LayerSpec(in_dim, k, "none")],
                         [np.zeros((k, in_dim))], [np.asarray(bias, dtype=float)],
                         "unstructured")


def direction_spec(n=4, axis=1):
    v = np.zeros(n)
    v[axis] = 1.0
    return TransformSpec(kind="direction_shift", direction=v)


def flipping_model(in_dim=4, axis=1, scale=50.0, gap=1e-9):
    """Class 1 on clean inputs with x[axis] == 0, class 0 after any shift
    delta > gap along the axis."""
    w = np.zeros((2, in_dim))
    w[0, axis] = scale
    w[1, axis] = -scale
    b = np.array([-scale * gap, scale * gap])
    return MaskableModel([LayerSpec(in_dim, 2, "none")], [w], [b], "unstructured")


def small_cfg(**kw):
    defaults = dict(samples_per_rep=20, repetitions=3, t_count=60, eval_size=4, seed=0)
    defaults.update(kw)
    return CertConfig(**defaults)


class TestLogY:
    def test_zero_z_closed_form(self):
        z = np.zeros(100)
        assert log_y(z, 0.1, 10.0) == -1.0

    def test_constant_z_closed_form(self):
        z = np.full(7, 0.3)
        for t in (0.5, 4.0):
            assert abs(log_y(z, 0.2, t) - (0.3 - 0.2) * t) < 1e-12

    def test_matches_direct_evaluation_small_t(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            z = rng.uniform(0, 1, size=rng.integers(2, 30))
            d = rng.uniform(0, 0.5)
            t = rng.uniform(1e-4, 10.0)
            direct = math.log(np.exp(z * t).sum() / (len(z) * math.exp(d * t)))
            assert abs(log_y(z, d, t) - direct) < 1e-12

    def test_finite_where_direct_overflows(self):
        z = np.linspace(0.5, 1.0, 5)
        with np.errstate(over="ignore"):
            direct = np.exp(z * 1e4).sum()
        assert np.isinf(direct)
        val = log_y(z, 0.2, 1e4)
        assert np.isfinite(val)

    def test_against_arbitrary_precision_oracle(self):
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 60
        z = [0.11, 0.37, 0.52, 0.88, 1.0]
        d, t = 0.2, 1e4
        oracle = mp.log(sum(mp.e ** (mp.mpf(zi) * t) for zi in z) / 5) - d * t
        assert abs(log_y(np.array(z), d, t) - float(oracle)) < 1e-9 * abs(float(oracle))

    def test_grid_matches_scalar(self):
        rng = np.random.default_rng(1)
        z = rng.uniform(0, 1, 12)
        grid = CertConfig().t_grid()[::50]
        vals = log_y_grid(z, 0.3, grid)
        for got, t in zip(vals, grid):
            assert abs(got - log_y(z, 0.3, float(t))) < 1e-12

    def test_validation(self):
        with pytest.raises(ValueError, match="temperature"):
            log_y(np.zeros(3), 0.1, 0.0)
        with pytest.raises(ValueError, match="margin"):
            log_y(np.zeros(3), -0.1, 1.0)


class TestZSamples:
    def test_constant_classifier_all_zero(self):
        model = constant_model()
        z = z_samples(model, None, np.zeros(4), direction_spec(), 50,
                      np.random.default_rng(2))
        assert np.array_equal(z, np.zeros(50))

    def test_collapsed_range_all_zero(self):
        rng = np.random.default_rng(3)
        model = MaskableModel.initialized(mlp_specs(4, [5], 3), "unstructured", rng)
        spec = TransformSpec(kind="direction_shift", direction=direction_spec().direction,
                             delta_range=(0.0, 0.0))
        z = z_samples(model, None, rng.standard_normal(4), spec, 20,
                      np.random.default_rng(4))
        assert np.array_equal(z, np.zeros(20))

    def test_bounded_in_unit_interval(self):
        rng = np.random.default_rng(5)
        model = MaskableModel.initialized(mlp_specs(4, [6], 3), "unstructured", rng)
        z = z_samples(model, None, rng.standard_normal(4), direction_spec(), 40,
                      np.random.default_rng(6))
        assert np.all((z >= 0) & (z <= 1))


class TestBoundEstimate:
    def test_constant_classifier_certifies(self):
        model = constant_model()
        res = bound_estimate(model, None, np.zeros(4), direction_spec(),
                             small_cfg(), np.random.default_rng(7))
        p = model.forward(np.zeros((1, 4)))[0]
        d = clean_margin(p)
        # all Z are 0, so the best bound is exp(-d * t_max), which underflows
        assert res.eps_hat <= math.exp(-d * 1e4) * 1.01
        assert res.best_t == pytest.approx(1e4)

    def test_always_flipping_uncertifiable(self):
        model = flipping_model()
        x = np.zeros(4)
        res = bound_estimate(model, None, x, direction_spec(), small_cfg(),
                             np.random.default_rng(8))
        assert np.all(res.rep_z >= res.margin)  # every transform flips
        assert res.eps_hat == 1.0

    def test_zero_margin_uncertifiable_not_error(self):
        model = constant_model(bias=(0.0, 0.0))
        res = bound_estimate(model, None, np.zeros(4), direction_spec(),
                             small_cfg(), np.random.default_rng(9))
        assert res.margin == 0.0 and res.eps_hat == 1.0
        assert math.isnan(res.best_t)

    def test_eps_hat_never_exceeds_one(self):
        rng = np.random.default_rng(10)
        for seed in range(5):
            model = MaskableModel.initialized(mlp_specs(4, [5], 2), "unstructured",
                                              np.random.default_rng(seed))
            res = bound_estimate(model, None, rng.standard_normal(4),
                                 direction_spec(), small_cfg(), np.random.default_rng(seed))
            assert 0.0 <= res.eps_hat <= 1.0

    def test_monotone_conservative_in_repetitions(self):
        rng = np.random.default_rng(11)
        grid = small_cfg().t_grid()
        logs = [log_y_grid(rng.uniform(0, 1, 20), 0.3, grid) for _ in range(6)]
        prefix = None
        prev_eps = -np.inf
        for lg in logs:
            prefix = lg if prefix is None else np.maximum(prefix, lg)
            eps = float(np.exp(prefix.min()))
            assert eps >= prev_eps - 1e-15
            prev_eps = eps


class TestCertifySampleAndPca:
    def test_misclassified_never_certified(self):
        model = constant_model(bias=(2.0, 0.0))  # always predicts class 0
        row = certify_sample(model, None, np.zeros(4), 1, direction_spec(),
                             small_cfg(), np.random.default_rng(12))
        assert not row.certified
        assert row.eps_hat <= 1e-3  # the bound itself is tiny; the label gate fails

    def test_constant_correct_certified(self):
        model = constant_model(bias=(2.0, 0.0))
        row = certify_sample(model, None, np.zeros(4), 0, direction_spec(),
                             small_cfg(), np.random.default_rng(13))
        assert row.certified

    def test_pca_constant_classifier_counts_majority(self):
        model = constant_model(bias=(2.0, 0.0))
        rng = np.random.default_rng(14)
        x = rng.standard_normal((12, 4))
        y = np.array([0, 1] * 6)
        res = pca(model, None, x, y, direction_spec(), small_cfg(eval_size=12))
        expected = np.mean(y == 0)
        assert res.fraction == expected

    def test_pca_empty_rejected(self):
        model = constant_model()
        with pytest.raises(ValueError, match="empty"):
            pca(model, None, np.empty((0, 4)), np.empty(0), direction_spec(),
                small_cfg())

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(15)
        model = MaskableModel.initialized(mlp_specs(4, [6], 2), "unstructured", rng)
        x = rng.standard_normal((5, 4))
        y = rng.integers(0, 2, 5)
        r1 = pca(model, None, x, y, direction_spec(), small_cfg(seed=99))
        r2 = pca(model, None, x, y, direction_spec(), small_cfg(seed=99))
        assert r1.fraction == r2.fraction
        for a, b in zip(r1.rows, r2.rows):
            assert a.eps_hat == b.eps_hat and a.best_t == b.best_t
            assert np.array_equal(a.rep_z_max, b.rep_z_max)


class TestChernoffSoundness:
    # discrete Z distributions with equal-weight atoms make the sample-form
    # moment estimate exact, so Y(t) >= P(Z >= d) must hold at every t
    CASES = [
        (np.array([0.0, 0.0, 0.0, 0.5]), 0.4),
        (np.array([0.1, 0.2, 0.3, 0.4, 0.5]), 0.35),
        (np.array([0.0, 1.0]), 0.9),
        (np.array([0.25] * 3 + [0.75]), 0.5),
        (np.array([0.05, 0.05, 0.6, 0.6, 0.6]), 0.6),
    ]

    @pytest.mark.parametrize("atoms,d", CASES, ids=[str(i) for i in range(5)])
    def test_bound_dominates_tail(self, atoms, d):
        grid = CertConfig().t_grid()
        tail = np.mean(atoms >= d)
        logs = log_y_grid(atoms, d, grid)
        # compare in log space; exp(logs) can overflow where the bound is huge
        assert np.all(logs >= math.log(tail) - 1e-12)

    def test_empirical_tail_within_sampling_slack(self):
        # draw 1e5 variates from a known discrete distribution; the empirical
        # tail stays below the exact-moment bound up to 3-sigma binomial noise
        rng = np.random.default_rng(20)
        atoms = np.array([0.0, 0.1, 0.3, 0.45])
        weights = np.array([0.4, 0.3, 0.2, 0.1])
        d = 0.3
        n = 100_000
        draws = rng.choice(atoms, size=n, p=weights)
        empirical = float(np.mean(draws >= d))
        sigma = np.sqrt(empirical * (1 - empirical) / n)
        z_exact = np.repeat(atoms, (weights * 20).astype(int))  # exact pmf atoms
        grid = CertConfig().t_grid()
        bounds = np.exp(np.minimum(log_y_grid(z_exact, d, grid), 0.0))
        assert np.all(empirical <= bounds + 3 * sigma)


class TestPaley:
    def test_exact_value(self):
        cfg = CertConfig(samples_per_rep=100, repetitions=10, alpha=0.9, c_v=1.0)
        val = paley_confidence(cfg)
        assert val == 2.0 ** -10

    def test_large_n_limit(self):
        cfg = CertConfig(samples_per_rep=10 ** 12, repetitions=1, alpha=0.9)
        assert paley_confidence(cfg) < 1e-9

    def test_alpha_near_one_no_confidence(self):
        cfg = CertConfig(alpha=0.999999999)
        assert paley_confidence(cfg) > 0.999

    def test_config_validation(self):
        with pytest.raises(ValueError, match="alpha"):
            CertConfig(alpha=1.0)
        with pytest.raises(ValueError, match="error_bound"):
            CertConfig(error_bound=0.0)
        with pytest.raises(ValueError, match="t_lo"):
            CertConfig(t_lo=5.0, t_hi=1.0)
        with pytest.raises(ValueError, match="seed"):
            CertConfig(seed=-1)

    def test_margin_needs_two_classes(self):
        with pytest.raises(ValueError, match="margin"):
            clean_margin(np.array([1.0]))

    def test_grid_shape(self):
        grid = CertConfig().t_grid()
        assert len(grid) == 500
        assert grid[0] == pytest.approx(1e-4) and grid[-1] == pytest.approx(1e4)
