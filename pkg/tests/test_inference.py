import numpy as np
import pytest

from quantfuse.exceptions import InferenceError
from quantfuse.inference import (
    ConfidenceBand,
    confidence_band,
    estimate_density_at_zero,
    variance_at,
)
from quantfuse.model import GroupStructure, PanelData
from quantfuse.splines import eval_reduced_basis_many, make_system


def synthetic_panel(rng, n, T, resid_draw):
    x = rng.uniform(size=(n, T))
    y = np.zeros((n, T))  # unused by the density estimator
    return PanelData(y=y, x=x), resid_draw((n, T))


class TestDensityEstimate:
    def test_gaussian_residuals(self):
        rng = np.random.default_rng(0)
        sigma = 0.4
        panel, resid = synthetic_panel(rng, 50, 100,
                                       lambda s: sigma * rng.standard_normal(s))
        groups = GroupStructure(labels=np.ones(50, dtype=int))
        est = estimate_density_at_zero(panel, resid, groups)
        target = 1.0 / (sigma * np.sqrt(2.0 * np.pi))
        interior = (panel.x > 0.1) & (panel.x < 0.9)
        ratio = est.values[interior] / target
        assert np.all(ratio > 0.8) and np.all(ratio < 1.2)

    def test_uniform_residuals(self):
        rng = np.random.default_rng(1)
        panel, resid = synthetic_panel(rng, 50, 100,
                                       lambda s: rng.uniform(-0.5, 0.5, size=s))
        groups = GroupStructure(labels=np.ones(50, dtype=int))
        est = estimate_density_at_zero(panel, resid, groups)
        interior = (panel.x > 0.1) & (panel.x < 0.9)
        ratio = est.values[interior]
        assert np.all(ratio > 0.8) and np.all(ratio < 1.2)

    def test_floor_engages_for_far_residuals(self):
        rng = np.random.default_rng(2)
        panel, resid = synthetic_panel(rng, 10, 50,
                                       lambda s: 100.0 + rng.standard_normal(s))
        groups = GroupStructure(labels=np.ones(10, dtype=int))
        est = estimate_density_at_zero(panel, resid, groups, floor=1e-3)
        assert est.floored == panel.n_obs
        assert np.all(est.values == 1e-3)

    def test_reweighted_variant(self):
        rng = np.random.default_rng(3)
        sigma = 0.3
        panel, resid = synthetic_panel(rng, 40, 100,
                                       lambda s: sigma * rng.standard_normal(s))
        groups = GroupStructure(labels=np.ones(40, dtype=int))
        est = estimate_density_at_zero(panel, resid, groups, method="rnw")
        assert est.method == "rnw"
        target = 1.0 / (sigma * np.sqrt(2.0 * np.pi))
        interior = (panel.x > 0.1) & (panel.x < 0.9)
        ratio = est.values[interior] / target
        assert np.all(ratio > 0.8) and np.all(ratio < 1.2)

    def test_bad_inputs(self):
        rng = np.random.default_rng(4)
        panel, resid = synthetic_panel(rng, 5, 20, lambda s: rng.standard_normal(s))
        groups = GroupStructure(labels=np.ones(5, dtype=int))
        with pytest.raises(InferenceError):
            estimate_density_at_zero(panel, resid, groups, bandwidth=-0.1)
        with pytest.raises(InferenceError):
            estimate_density_at_zero(panel, resid, groups, method="ker")


class TestVarianceAt:
    def _flat_density(self, panel, groups, value):
        from quantfuse.inference import DensityEstimate

        return DensityEstimate(values=np.full_like(panel.x, value),
                               bandwidth_x={}, bandwidth_r={},
                               kernel="gaussian", method="nw", floored=0)

    def test_constant_density_simplification(self):
        rng = np.random.default_rng(5)
        sys = make_system(2, 3)
        panel = PanelData(y=np.zeros((8, 40)), x=rng.uniform(size=(8, 40)))
        groups = GroupStructure(labels=np.ones(8, dtype=int))
        c = 2.5
        tau = 0.3
        density = self._flat_density(panel, groups, c)
        rows = eval_reduced_basis_many(sys, panel.x.ravel())
        pi_x = eval_reduced_basis_many(sys, [0.4])[0]
        expected = tau * (1 - tau) / c ** 2 * pi_x @ np.linalg.solve(
            rows.T @ rows, pi_x)
        got = variance_at(0.4, 1, panel, sys, groups, density, tau)
        assert got == pytest.approx(expected, rel=1e-10)

    def test_tau_factor_is_maximal_at_median(self):
        rng = np.random.default_rng(6)
        sys = make_system(2, 3)
        panel = PanelData(y=np.zeros((6, 30)), x=rng.uniform(size=(6, 30)))
        groups = GroupStructure(labels=np.ones(6, dtype=int))
        density = self._flat_density(panel, groups, 1.0)
        values = {tau: variance_at(0.5, 1, panel, sys, groups, density, tau)
                  for tau in (0.1, 0.5, 0.9)}
        assert values[0.5] > values[0.1]
        assert values[0.5] > values[0.9]
        assert values[0.1] == pytest.approx(values[0.9], rel=1e-10)

    def test_duplicating_group_halves_variance(self):
        rng = np.random.default_rng(7)
        sys = make_system(2, 3)
        x = rng.uniform(size=(4, 25))
        panel1 = PanelData(y=np.zeros((4, 25)), x=x)
        panel2 = PanelData(y=np.zeros((8, 25)), x=np.vstack([x, x]))
        g1 = GroupStructure(labels=np.ones(4, dtype=int))
        g2 = GroupStructure(labels=np.ones(8, dtype=int))
        d1 = self._flat_density(panel1, g1, 1.7)
        d2 = self._flat_density(panel2, g2, 1.7)
        v1 = variance_at(0.6, 1, panel1, sys, g1, d1, 0.5)
        v2 = variance_at(0.6, 1, panel2, sys, g2, d2, 0.5)
        assert v2 == pytest.approx(v1 / 2.0, rel=1e-10)

    def test_nonnegative(self):
        rng = np.random.default_rng(8)
        sys = make_system(3, 4)
        panel = PanelData(y=np.zeros((6, 50)), x=rng.uniform(size=(6, 50)))
        groups = GroupStructure(labels=np.ones(6, dtype=int))
        from quantfuse.inference import DensityEstimate

        density = DensityEstimate(values=rng.uniform(0.5, 3.0, size=(6, 50)),
                                  bandwidth_x={}, bandwidth_r={},
                                  kernel="gaussian", method="nw", floored=0)
        for x in np.linspace(0.05, 0.95, 13):
            assert variance_at(float(x), 1, panel, sys, groups, density, 0.4) >= 0.0

    def test_singular_group_raises(self):
        sys = make_system(4, 4)  # 7 coefficients
        panel = PanelData(y=np.zeros((2, 2)),
                          x=np.array([[0.2, 0.8], [0.3, 0.7]]))
        groups = GroupStructure(labels=np.array([1, 2]))
        density = self._flat_density(panel, groups, 1.0)
        with pytest.raises(InferenceError):
            variance_at(0.5, 1, panel, sys, groups, density, 0.5)


class TestConfidenceBand:
    def test_normal_quantile_against_high_precision_oracle(self):
        import mpmath

        from scipy.stats import norm

        for level in (0.9, 0.95, 0.99):
            expected = float(mpmath.sqrt(2) * mpmath.erfinv(level))
            assert norm.ppf(0.5 * (1 + level)) == pytest.approx(expected, abs=1e-12)
        assert norm.ppf(0.975) == pytest.approx(1.959964, abs=5e-7)

    def test_band_geometry(self):
        rng = np.random.default_rng(9)
        sys = make_system(2, 3)
        panel = PanelData(y=np.zeros((6, 40)), x=rng.uniform(size=(6, 40)))
        groups = GroupStructure(labels=np.ones(6, dtype=int))
        from quantfuse.inference import DensityEstimate
        from scipy.stats import norm

        density = DensityEstimate(values=np.full((6, 40), 1.3),
                                  bandwidth_x={}, bandwidth_r={},
                                  kernel="gaussian", method="nw", floored=0)
        coeffs = rng.standard_normal((1, sys.dimension - 1))
        grid = np.linspace(0.05, 0.95, 19)
        bands = confidence_band(grid, panel, sys, groups, coeffs, density,
                                tau=0.5, level=0.95)
        band = bands[0]
        assert np.all(band.lower <= band.estimate)
        assert np.all(band.estimate <= band.upper)
        z = norm.ppf(0.975)
        np.testing.assert_allclose(band.upper - band.lower, 2 * z * band.se,
                                   rtol=1e-12)

    def test_huge_density_shrinks_band(self):
        rng = np.random.default_rng(10)
        sys = make_system(2, 3)
        panel = PanelData(y=np.zeros((6, 40)), x=rng.uniform(size=(6, 40)))
        groups = GroupStructure(labels=np.ones(6, dtype=int))
        from quantfuse.inference import DensityEstimate

        density = DensityEstimate(values=np.full((6, 40), 1e8),
                                  bandwidth_x={}, bandwidth_r={},
                                  kernel="gaussian", method="nw", floored=0)
        coeffs = np.zeros((1, sys.dimension - 1))
        bands = confidence_band([0.5], panel, sys, groups, coeffs, density,
                                tau=0.5, level=0.95)
        assert bands[0].se[0] < 1e-7
        assert bands[0].upper[0] - bands[0].lower[0] < 1e-6

    def test_level_validation(self):
        rng = np.random.default_rng(11)
        sys = make_system(2, 3)
        panel = PanelData(y=np.zeros((4, 20)), x=rng.uniform(size=(4, 20)))
        groups = GroupStructure(labels=np.ones(4, dtype=int))
        from quantfuse.inference import DensityEstimate

        density = DensityEstimate(values=np.ones((4, 20)), bandwidth_x={},
                                  bandwidth_r={}, kernel="gaussian",
                                  method="nw", floored=0)
        with pytest.raises(InferenceError):
            confidence_band([0.5], panel, sys, groups,
                            np.zeros((1, sys.dimension - 1)), density, 0.5,
                            level=1.2)


def test_bands_invariant_to_response_shift():
    # adding a constant to every response moves only the intercepts
    rng = np.random.default_rng(12)
    from quantfuse.config import config_from_dict
    from quantfuse.pipeline import fit_single_tau

    sys = make_system(1, 3)
    n, T = 6, 60
    x = rng.uniform(size=(n, T))
    mu = rng.standard_normal(n)
    y = mu[:, None] + np.sin(2 * np.pi * x) + 0.1 * rng.standard_normal((n, T))
    cfg = config_from_dict({"lambda": {"grid_size": 8}})
    fit1 = fit_single_tau(PanelData(y=y, x=x), 0.5, cfg, sys=sys)
    fit2 = fit_single_tau(PanelData(y=y + 5.0, x=x), 0.5, cfg, sys=sys)
    assert fit1.report.k == fit2.report.k
    for b1, b2 in zip(fit1.bands, fit2.bands):
        np.testing.assert_allclose(b1.estimate, b2.estimate, atol=1e-6)
        np.testing.assert_allclose(b1.se, b2.se, atol=1e-6)
