import math
import warnings

import numpy as np
import pytest

from flatlab.constructions import (find_separators, good_sbn_xor, good_simln_xor, good_xor_bias,
                                   memorize_bias, memorize_simln)
from flatlab.data import (LabeledDataset, build_complete_xor_set, enumerate_hypercube,
                          sample_uniform_ball, sample_xor)
from flatlab.losses import MSE, Logistic, Truncated
from flatlab.models import ArchSpec, ModelParams, init_params, zeros_like
from flatlab.sharpness import (NotInterpolatingError, PreconditionWarning, SharpnessError,
                               exact_trace, full_fd_trace, grad_closure, hutchinson_trace,
                               jac_surrogate, loss_closure, path_norm, sharpness_report,
                               theoretical_min)

# golden: 4 sqrt((1+e)^2 + (1-e)^2) / (2 - 2e) at e = 1e-6, frozen from the oracle below
NOBIAS_XOR_PATH_NORM = 2.8284299531775576


def _moderate_memorizer(ds, depth=2):
    """Memorizer with slack half the minimum margin, far from relu kinks."""
    _, mu = find_separators(ds.inputs)
    return memorize_bias(ds, eps=0.5 * mu.min(), depth=depth)


def _nobias_xor(d, e=1e-6):
    W1 = np.zeros((4, d))
    W1[:, :2] = [[1 + e, 1 - e], [1 + e, -1 + e], [-1 - e, 1 - e], [-1 - e, -1 + e]]
    W2 = np.array([1.0, -1.0, -1.0, 1.0]) / (2 - 2 * e)
    return ArchSpec("NoBias", 4, d), ModelParams([W1, W2])


class TestFiniteDifferenceOracle:
    def test_quadratic(self):
        theta = np.random.default_rng(0).standard_normal(30)
        tr = full_fd_trace(lambda t: float(t @ t), theta)
        assert tr == pytest.approx(60.0, rel=1e-8)

    def test_dense_quadratic(self):
        A = np.random.default_rng(1).standard_normal((12, 12))
        A = A @ A.T
        tr = full_fd_trace(lambda t: 0.5 * float(t @ A @ t), np.ones(12))
        assert tr == pytest.approx(np.trace(A), rel=1e-7)

    def test_memorizer_matches_exact(self):
        ds = sample_xor(6, 12, seed=1, distinct=True)
        spec, params = _moderate_memorizer(ds)
        fd = full_fd_trace(loss_closure(spec, ds), params.flatten())
        assert fd == pytest.approx(exact_trace(spec, params, ds), rel=1e-6)

    def test_parameter_budget(self):
        with pytest.raises(SharpnessError):
            full_fd_trace(lambda t: 0.0, np.zeros(60_000))


class TestHutchinson:
    def test_diagonal_quadratic_is_exact(self):
        diag = np.arange(1.0, 21.0)
        est, se = hutchinson_trace(lambda t: diag * t, np.zeros(20), n_probes=16)
        assert est == pytest.approx(diag.sum(), rel=1e-10)
        assert se < 1e-8

    def test_dense_quadratic_coverage(self):
        rng = np.random.default_rng(4)
        B = rng.standard_normal((50, 50))
        A = (B + B.T) / 2
        true = np.trace(A)
        hits = 0
        for rep in range(100):
            est, se = hutchinson_trace(lambda t: A @ t, np.zeros(50), n_probes=32, seed=rep)
            hits += abs(est - true) <= 3 * se
        assert hits >= 95

    def test_seeded_probes_are_reproducible(self):
        A = np.diag(np.linspace(-1, 3, 10)) + 0.1
        a = hutchinson_trace(lambda t: A @ t, np.zeros(10), seed=7)
        b = hutchinson_trace(lambda t: A @ t, np.zeros(10), seed=7)
        assert a == b

    def test_matches_fd_on_bias_net(self):
        ds = sample_uniform_ball(3, 15, seed=2)
        spec = ArchSpec("Bias", 8, 3)
        theta = init_params(spec, seed=3).flatten()
        fd = full_fd_trace(loss_closure(spec, ds), theta, h=1e-4)
        est, se = hutchinson_trace(grad_closure(spec, ds), theta, n_probes=400, seed=1)
        assert abs(est - fd) < 3 * se

    def test_needs_probes(self):
        with pytest.raises(SharpnessError):
            hutchinson_trace(lambda t: t, np.zeros(3), n_probes=4)


class TestExactTrace:
    def test_memorizer_value(self):
        ds = sample_xor(10, 50, seed=0, distinct=True)
        spec, params = memorize_bias(ds)
        assert exact_trace(spec, params, ds) == pytest.approx(4 * math.sqrt(11), rel=1e-10)

    def test_simln_generalizer_is_two(self):
        for d in (4, 9):
            spec, params = good_simln_xor(d, ln_eps=0.3)
            assert exact_trace(spec, params, enumerate_hypercube(d)) == pytest.approx(2.0, rel=1e-12)

    def test_zero_labels_zero_network(self):
        ds = LabeledDataset(np.eye(3), np.zeros(3))
        spec = ArchSpec("NoBias", 3, 3)
        assert exact_trace(spec, zeros_like(spec), ds) == 0.0

    def test_rejects_non_interpolating(self):
        ds = sample_xor(5, 10, seed=0)
        spec = ArchSpec("Bias", 4, 5)
        with pytest.raises(NotInterpolatingError):
            exact_trace(spec, init_params(spec), ds)

    def test_truncated_loss_is_not_supported(self):
        ds = sample_xor(4, 8, seed=0, distinct=True)
        spec, params = memorize_bias(ds)
        with pytest.raises(SharpnessError):
            exact_trace(spec, params, ds, Truncated(3.0))

    def test_surrogate_equals_trace_at_interpolation(self):
        ds = sample_xor(6, 20, seed=5, distinct=True)
        spec, params = memorize_bias(ds)
        assert jac_surrogate(spec, params, ds) == pytest.approx(exact_trace(spec, params, ds))

    def test_logistic_prefactor(self):
        p = 0.2
        ds = sample_xor(5, 10, seed=3, distinct=True)
        g = math.log(4.0)
        spec, params = _moderate_memorizer(ds.with_labels(g * ds.labels))
        ex = exact_trace(spec, params, ds, Logistic(p))
        fd = full_fd_trace(loss_closure(spec, ds, Logistic(p)), params.flatten())
        assert fd == pytest.approx(ex, rel=1e-5)
        assert ex == pytest.approx(p * (1 - p) / 2 * exact_trace(spec, params, ds.with_labels(g * ds.labels)))


class TestTheoreticalMin:
    def test_bias_xor(self):
        ds = sample_xor(7, 30, seed=0, distinct=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PreconditionWarning)
            assert theoretical_min(ArchSpec("Bias", 4, 7), ds) == pytest.approx(4 * math.sqrt(8))

    def test_simln_xor_and_small_label_case(self):
        ds = sample_xor(6, 10, seed=2, distinct=True)
        spec = ArchSpec("SimLN", 4, 6, ln_epsilon=1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PreconditionWarning)
            assert theoretical_min(spec, ds) == pytest.approx(2.0)
            y = ds.labels.copy()
            y[0] = 0.05  # sqrt(7) * 0.05 < eps / 2
            want = (2 * 9 + 2 * 2 * math.sqrt(7) * 0.05) / 10
            assert theoretical_min(spec, ds.with_labels(y)) == pytest.approx(want)

    def test_simbn_complete_set(self):
        ds = build_complete_xor_set(6)
        assert theoretical_min(ArchSpec("SimBN", 4, 6), ds) == pytest.approx(8.0)

    def test_simbn_weights_reach_half_the_bound(self):
        # ||W2||^2 + ||gamma||^2 of the generalizer equals the minimal 2 ||gamma * W2||_1
        spec, params = good_sbn_xor(build_complete_xor_set(6))
        assert np.sum(params.W2 ** 2) + np.sum(params.gamma ** 2) == pytest.approx(4.0)

    def test_nobias_has_no_closed_form(self):
        assert theoretical_min(ArchSpec("NoBias", 4, 4), sample_xor(4, 8, seed=0)) is None

    def test_duplicate_inputs_warn(self):
        X = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]])
        with pytest.warns(PreconditionWarning):
            theoretical_min(ArchSpec("Bias", 2, 3), LabeledDataset(X, [1.0, 1.0]))

    def test_depth_three(self):
        ds = sample_xor(5, 10, seed=0, distinct=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PreconditionWarning)
            tmin = theoretical_min(ArchSpec("Bias", 10, 5, depth=3), ds)
        assert tmin == pytest.approx(2 * 3 * 6 ** (1 / 3))


class TestPathNorm:
    def test_zero(self):
        assert path_norm(zeros_like(ArchSpec("NoBias", 3, 4))) == 0.0

    def test_rescaling_invariance(self):
        spec = ArchSpec("NoBias", 6, 4)
        p = init_params(spec, seed=2)
        q = p.copy()
        c = np.linspace(0.5, 3.0, 6)
        q.W[0] = p.W1 * c[:, None]
        q.W[-1] = p.W2 / c
        assert path_norm(q) == pytest.approx(path_norm(p), abs=1e-12)

    def test_nobias_xor_golden(self):
        spec, params = _nobias_xor(6)
        cube = enumerate_hypercube(6)
        from flatlab.models import evaluate
        np.testing.assert_allclose(evaluate(spec, params, cube.inputs), cube.labels, atol=1e-12)
        assert path_norm(params) == pytest.approx(NOBIAS_XOR_PATH_NORM, rel=1e-12)

    def test_depth_three_rejected(self):
        with pytest.raises(SharpnessError):
            path_norm(init_params(ArchSpec("Bias", 2, 2, depth=3)))


class TestReport:
    def test_fields_on_generalizer(self):
        spec, params = good_xor_bias(6)
        ds = enumerate_hypercube(6)
        rep = sharpness_report(spec, params, ds)
        assert rep.exact_trace == pytest.approx(4 * math.sqrt(7))
        assert rep.oracle_trace == pytest.approx(rep.exact_trace, rel=1e-6)
        assert rep.interpolation_residual < 1e-12
        assert rep.path_norm > 0

    def test_non_interpolating_has_no_exact(self):
        spec = ArchSpec("Bias", 4, 4)
        rep = sharpness_report(spec, init_params(spec), sample_xor(4, 8), oracle="hutchinson")
        assert rep.exact_trace is None
        assert rep.oracle_kind.startswith("hutchinson")

    def test_simln_memorizer_case_two(self):
        y = np.array([1.0, 0.05, -1.0, 0.0])
        X = enumerate_hypercube(3).inputs[[0, 3, 5, 6]]
        ds = LabeledDataset(X, y)
        spec, params = memorize_simln(ds, ln_eps=1.0, delta=1.0)
        out = exact_trace(spec, params, ds)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PreconditionWarning)
            assert out == pytest.approx(theoretical_min(spec, ds), rel=1e-10)
        fd = full_fd_trace(loss_closure(spec, ds), params.flatten(), h=1e-5)
        assert fd == pytest.approx(out, rel=1e-5)
