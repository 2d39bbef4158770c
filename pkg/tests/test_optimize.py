import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from decel.model import LifeTable, ModelParams, PenaltyConfig, log_likelihood, loglik_batch
from decel.optimize import (
    DEConfig,
    FitError,
    SearchBox,
    SEUnavailable,
    differential_evolution,
    fit_map,
    fit_ml,
    hessian_se,
    nelder_mead,
    numerical_hessian,
    profile_curve,
    wald_standard_errors,
)

from conftest import synthetic_table


def quadratic(theta):
    theta = np.atleast_2d(theta)
    return -np.sum((theta - 0.5) ** 2, axis=1)


def grid_argmax(table, box, points=50, zooms=4, zoom_points=21):
    """Brute-force maximizer of the log-likelihood on a zooming grid.

    Coordinates are (log a, b, sigma2).  Each zoom re-grids +-2 cells
    around the incumbent.
    """
    x, d, e = table._active()
    lo, hi = box.internal_bounds()
    axes = [np.linspace(lo[i], hi[i], points) for i in range(3)]
    best_z, best_f = None, -np.inf
    for level in range(zooms + 1):
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        for chunk in np.array_split(mesh, max(1, len(mesh) // 4000)):
            f = loglik_batch(SearchBox.from_internal(chunk), x, d, e)
            i = int(np.argmax(f))
            if f[i] > best_f:
                best_f, best_z = f[i], chunk[i].copy()
        steps = [ax[1] - ax[0] if len(ax) > 1 else 0 for ax in axes]
        axes = [np.linspace(max(lo[i], best_z[i] - 2 * steps[i]),
                            min(hi[i], best_z[i] + 2 * steps[i]), zoom_points)
                for i in range(3)]
    return SearchBox.from_internal(best_z), best_f


class TestDifferentialEvolution:
    def test_quadratic_optimum(self):
        res = differential_evolution(quadratic, SearchBox(), seed=1, vectorized=True)
        np.testing.assert_allclose(res.x, [0.5, 0.5, 0.5], atol=1e-3)

    def test_scalar_objective(self):
        res = differential_evolution(lambda t: quadratic(t)[0], SearchBox(),
                                     DEConfig(generations=100), seed=1)
        np.testing.assert_allclose(res.x, [0.5, 0.5, 0.5], atol=1e-2)

    def test_deterministic(self):
        r1 = differential_evolution(quadratic, SearchBox(), seed=42, vectorized=True)
        r2 = differential_evolution(quadratic, SearchBox(), seed=42, vectorized=True)
        np.testing.assert_array_equal(r1.x, r2.x)
        assert r1.fun == r2.fun

    def test_nonfinite_box_rejected(self):
        def bad(theta):
            out = quadratic(theta)
            out[theta[:, 1] > 0.2] = np.nan
            return out
        with pytest.raises(FitError):
            differential_evolution(bad, SearchBox(), seed=0, vectorized=True)

    def test_matches_grid_oracle(self):
        table = synthetic_table(n=100_000, seed=21)
        box = SearchBox()
        x, d, e = table._active()
        res = differential_evolution(lambda th: loglik_batch(th, x, d, e), box, seed=3,
                                     vectorized=True)
        grid_theta, grid_f = grid_argmax(table, box)
        np.testing.assert_allclose(res.x, grid_theta, rtol=0.10)
        assert res.fun >= grid_f - 1.0


class TestNelderMead:
    def test_start_at_optimum(self):
        start = np.array([0.5, 0.5, 0.5])
        res = nelder_mead(lambda t: quadratic(t)[0], start, SearchBox())
        np.testing.assert_allclose(res.x, start, atol=1e-6)

    @pytest.mark.parametrize("start", [[0.01, 0.3, 2.0], [0.9, 0.05, 0.01], [1e-6, 0.9, 4.0]])
    def test_never_worse(self, start):
        f = lambda t: quadratic(t)[0]
        res = nelder_mead(f, start, SearchBox())
        assert res.fun >= f(np.array(start))
        assert SearchBox().contains(res.x)

    def test_rejects_start_outside(self):
        with pytest.raises(ValueError):
            nelder_mead(lambda t: 0.0, [2.0, 0.1, 0.1], SearchBox())

    def test_gompertz_grid_oracle(self):
        table = synthetic_table(sigma2=0.0, n=100_000, seed=5)
        x, d, e = table._active()
        box = SearchBox(sigma2=(0.0, 5.0))

        def f(theta):
            return float(loglik_batch(theta, x, d, e)[0])

        res = nelder_mead(f, [2e-4, 0.08, 0.0], box, free=(True, True, False))
        assert res.x[2] == 0.0
        log_a = np.linspace(np.log(5e-5), np.log(2e-4), 200)
        bs = np.linspace(0.08, 0.12, 200)
        la, bb = np.meshgrid(log_a, bs, indexing="ij")
        theta = np.column_stack([np.exp(la.ravel()), bb.ravel(), np.zeros(la.size)])
        vals = loglik_batch(theta, x, d, e)
        i = int(np.argmax(vals))
        assert abs(np.log(res.x[0]) - np.log(theta[i, 0])) <= log_a[1] - log_a[0]
        assert abs(res.x[1] - theta[i, 1]) <= bs[1] - bs[0]
        assert res.fun >= vals[i]


class TestFitML:
    def test_gompertz_data_positive_sigma2(self, gompertz_table):
        fit = fit_ml(gompertz_table, seed=1)
        assert 0 < fit.params.sigma2 < 0.05
        assert fit.params.sigma2 >= SearchBox().sigma2[0]
        assert fit.deceleration_detected
        assert fit.converged
        assert fit.params.a == pytest.approx(1e-4, rel=0.3)
        assert fit.params.b == pytest.approx(0.1, rel=0.05)

    def test_no_deaths(self):
        with pytest.raises(FitError):
            fit_ml(LifeTable(70, np.zeros(10), np.full(10, 100.0)), seed=0)

    def test_refinement_dominates_de(self, gg_table):
        fit = fit_ml(gg_table, seed=2)
        assert fit.objective >= fit.de_objective
        assert fit.loglik == pytest.approx(fit.objective, rel=1e-12)

    def test_seed_determinism(self, gg_table):
        f1, f2 = fit_ml(gg_table, seed=9), fit_ml(gg_table, seed=9)
        assert f1.params == f2.params
        assert f1.loglik == f2.loglik
        np.testing.assert_array_equal(f1.se, f2.se)

    def test_standard_errors_attached(self, gg_table):
        fit = fit_ml(gg_table, seed=2)
        assert fit.se is not None and np.all(fit.se > 0)
        lo, hi = fit.ci_sigma2
        assert lo < fit.params.sigma2 < hi


class TestFitMAP:
    def test_heterogeneous_close_to_ml(self):
        table = synthetic_table(sigma2=0.2, n=10_000, seed=31)
        ml = fit_ml(table, seed=4)
        mp = fit_map(table, seed=4)
        assert mp.params.sigma2 == pytest.approx(ml.params.sigma2, abs=0.01)
        assert mp.deceleration_detected

    def test_gompertz_snaps_to_zero(self, gompertz_table):
        mp = fit_map(gompertz_table, seed=4)
        assert mp.params.sigma2 == 0.0
        assert not mp.deceleration_detected
        assert mp.se is None and mp.ci_sigma2 is None
        # (a, b) re-fitted under the Gompertz likelihood
        gomp = fit_ml(gompertz_table, box=SearchBox(sigma2=(1e-12, 5.0)), seed=4)
        assert mp.loglik >= log_likelihood(
            ModelParams(gomp.params.a, gomp.params.b, 0.0), gompertz_table) - 1e-6

    @pytest.mark.parametrize("seed", range(4))
    def test_snap_dichotomy(self, seed):
        table = synthetic_table(sigma2=[0.0, 0.02, 0.05, 0.2][seed], n=5000, seed=100 + seed)
        cfg = PenaltyConfig()
        mp = fit_map(table, cfg, seed=seed)
        s = mp.params.sigma2
        assert s == 0.0 or s >= cfg.snap_threshold
        assert mp.objective >= mp.de_objective

    def test_lambda_degeneracy(self, gg_table):
        ml = fit_ml(gg_table, seed=6)
        mp = fit_map(gg_table, PenaltyConfig(lam=0.0, snap_threshold=0.0), seed=6)
        assert abs(ml.loglik - mp.loglik) < 1e-4
        np.testing.assert_allclose(mp.params.as_array(), ml.params.as_array(), rtol=1e-3)

    def test_seed_determinism(self, gompertz_table):
        f1, f2 = fit_map(gompertz_table, seed=3), fit_map(gompertz_table, seed=3)
        assert f1.params == f2.params and f1.mse == f2.mse


class TestStandardErrors:
    def test_poisson_single_cell(self):
        d, e = 100.0, 1000.0
        rate = d / e
        grad = lambda m: np.array([d / m[0] - e])
        se = wald_standard_errors(numerical_hessian(grad, [rate]))
        assert se[0] == pytest.approx(1 / np.sqrt(d / rate**2), rel=0.01)

    def test_boundary_unavailable(self, gg_table):
        with pytest.raises(SEUnavailable):
            hessian_se(ModelParams(1e-4, 0.1, 0.0), gg_table)

    def test_not_concave(self):
        with pytest.raises(SEUnavailable):
            wald_standard_errors(np.eye(2))

    def test_ci_width(self, gg_table):
        fit = fit_ml(gg_table, seed=1, with_se=False)
        se, (lo, hi) = hessian_se(fit.params, gg_table)
        assert hi - lo == pytest.approx(2 * 1.959963984540054 * se[2])
        # Monte Carlo SD of sigma2 at N=10^4 is about 0.02
        assert 0.01 < se[2] < 0.04


class TestProfileShrinkage:
    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_penalized_maximizer_smaller(self, seed):
        table = synthetic_table(sigma2=0.2, n=10_000, seed=seed)
        a, b = 1e-4, 0.1

        def ll(s):
            return log_likelihood(ModelParams(a, b, s), table)

        plain = minimize_scalar(lambda s: -ll(s), bounds=(1e-4, 2), method="bounded",
                                options=dict(xatol=1e-10))
        pen = minimize_scalar(lambda s: -(ll(s) - 0.5 * (s + np.log(s))), bounds=(1e-4, 2),
                              method="bounded", options=dict(xatol=1e-10))
        assert 1e-3 < plain.x < 1.9
        assert pen.x < plain.x


class TestProfileCurve:
    def test_lambda_zero_columns_identical(self, gg_table):
        theta = ModelParams(1e-4, 0.1, 0.2)
        rows = profile_curve(gg_table, theta, "sigma2", np.linspace(0.1, 0.3, 5), lam=0.0)
        np.testing.assert_array_equal(rows[:, 1], rows[:, 2])

    def test_single_point_slice(self, gg_table):
        theta = ModelParams(1e-4, 0.1, 0.2)
        rows = profile_curve(gg_table, theta, "b", [0.1], profile=False)
        assert rows.shape == (1, 3)
        assert rows[0, 1] == pytest.approx(log_likelihood(theta, gg_table), rel=1e-14)

    def test_profile_dominates_slice(self, gg_table):
        theta = ModelParams(1e-4, 0.1, 0.2)
        grid = np.linspace(0.05, 0.4, 6)
        prof = profile_curve(gg_table, theta, "sigma2", grid)
        sl = profile_curve(gg_table, theta, "sigma2", grid, profile=False)
        assert np.all(prof[:, 1] >= sl[:, 1] - 1e-9)

    def test_grid_outside_box(self, gg_table):
        with pytest.raises(ValueError):
            profile_curve(gg_table, ModelParams(1e-4, 0.1, 0.2), "sigma2", [0.0, 0.1])
