import numpy as np
import pytest

from covgam import ale, basis, data, mcd
from _toys import make_dataset


class CurveModel:
    """d=2 model whose T[2,1] predictor is a spline interpolant of f(x)."""

    def __init__(self, f, knots, v_beta=None):
        self.tables = mcd.build_index_tables(2)
        self.knots = knots
        self.beta = f(knots)
        self.p = knots.shape[0]
        self.beta_slices = [slice(0, 0)] * 4 + [slice(0, self.p)]
        self.v_beta = v_beta

    def eta(self, ds):
        eta = np.zeros((ds.n, 5))
        eta[:, 4] = self.design(ds, 4) @ self.beta
        return eta

    def design(self, ds, predictor):
        if predictor == 4:
            return basis.cr_design(ds.column("x").values, self.knots)
        return np.zeros((ds.n, 0))


class LinearModel:
    """d=2 model with a single coefficient: eta_5 = beta * x."""

    def __init__(self, beta=0.8, v_beta=0.3):
        self.tables = mcd.build_index_tables(2)
        self.beta = np.array([beta])
        self.p = 1
        self.beta_slices = [slice(0, 0)] * 4 + [slice(0, 1)]
        self.v_beta = np.array([[v_beta]])

    def eta(self, ds):
        eta = np.zeros((ds.n, 5))
        eta[:, 4] = self.beta[0] * ds.column("x").values
        return eta

    def design(self, ds, predictor):
        if predictor == 4:
            return ds.column("x").values[:, None]
        return np.zeros((ds.n, 0))


@pytest.fixture(scope="module")
def tanh_setup():
    rng = np.random.default_rng(42)
    n = 10_000
    x = rng.uniform(-3.0, 3.0, n)
    z = rng.standard_normal(n)                      # independent, unused
    ds = make_dataset(np.zeros((n, 2)), {"x": x, "z": z})
    knots = np.linspace(-3.2, 3.2, 28)
    model = CurveModel(lambda k: -np.sinh(0.5 * k), knots)
    return ds, model


def brute_force_ale(model, ds, covariate, output, edges, bins):
    """Direct per-bin accumulation, no vectorisation tricks."""
    values = [0.0]
    total = 0.0
    for v in range(edges.shape[0] - 1):
        rows = np.where(bins == v)[0]
        sub = ds.subset(rows)
        hi = output.values(model.eta(sub.with_column(covariate,
                                                     np.full(sub.n, edges[v + 1]))),
                           model.tables)
        lo = output.values(model.eta(sub.with_column(covariate,
                                                     np.full(sub.n, edges[v]))),
                           model.tables)
        total += float(np.mean(hi - lo))
        values.append(total)
    return np.asarray(values)


class TestAleEstimate:
    def test_tanh_correlation_construction(self, tanh_setup):
        ds, model = tanh_setup
        out = ale.OutputSpec("corr", 0, 1)
        curve = ale.ale_estimate(model, ds, "x", out, n_bins=40)
        assert curve.uncentred[0] == 0.0
        assert curve.counts.sum() == ds.n
        analytic = np.tanh(0.5 * curve.edges)
        weights = np.concatenate([[0.0], curve.counts]) / ds.n
        analytic_centred = analytic - np.sum(weights * analytic)
        sup_err = np.max(np.abs(curve.centred - analytic_centred))
        assert sup_err < 0.02 * np.max(np.abs(analytic_centred))

    def test_matches_brute_force_oracle(self, tanh_setup):
        ds, model = tanh_setup
        out = ale.OutputSpec("corr", 0, 1)
        curve = ale.ale_estimate(model, ds, "x", out, n_bins=12)
        x = ds.column("x").values
        bins = np.clip(np.searchsorted(curve.edges, x, side="right") - 1,
                       0, curve.edges.shape[0] - 2)
        brute = brute_force_ale(model, ds, "x", out, curve.edges, bins)
        assert np.max(np.abs(curve.uncentred - brute)) < 1e-10

    def test_output_constant_in_covariate(self, tanh_setup):
        ds, model = tanh_setup
        curve = ale.ale_estimate(model, ds, "z", ale.OutputSpec("corr", 0, 1),
                                 n_bins=10)
        assert np.allclose(curve.uncentred, 0.0)
        assert np.allclose(curve.centred, 0.0)

    def test_centred_curve_weighted_mean_zero(self, tanh_setup):
        ds, model = tanh_setup
        curve = ale.ale_estimate(model, ds, "x", ale.OutputSpec("sigma", 1, 1),
                                 n_bins=15)
        weighted = np.sum(curve.counts * curve.centred[1:]) / ds.n
        assert abs(weighted) < 1e-12

    def test_refinement_stability(self, tanh_setup):
        ds, model = tanh_setup
        out = ale.OutputSpec("corr", 0, 1)
        c40 = ale.ale_estimate(model, ds, "x", out, n_bins=40)
        c80 = ale.ale_estimate(model, ds, "x", out, n_bins=80)
        on40 = np.interp(c40.edges, c80.edges, c80.centred)
        sup = np.max(np.abs(on40 - c40.centred))
        assert sup < 0.05 * np.max(np.abs(c40.centred))

    def test_parameter_errors(self, tanh_setup):
        ds, model = tanh_setup
        with pytest.raises(ale.AleError, match="bins"):
            ale.ale_estimate(model, ds, "x", ale.OutputSpec("corr", 0, 1), n_bins=1)
        ds2 = make_dataset(np.zeros((50, 2)),
                           {"x": np.arange(50.0), "f": ["a", "b"] * 25},
                           categoricals=("f",))
        with pytest.raises(ale.AleError, match="categorical"):
            ale.ale_estimate(model, ds2, "f", ale.OutputSpec("corr", 0, 1))

    def test_d2_and_t_outputs(self, tanh_setup):
        ds, model = tanh_setup
        t_curve = ale.ale_estimate(model, ds, "x", ale.OutputSpec("T", 1, 0),
                                   n_bins=20)
        # T[2,1] = -sinh(x/2): the uncentred ALE reproduces it up to the base
        want = -np.sinh(0.5 * t_curve.edges)
        assert np.max(np.abs(t_curve.uncentred - (want - want[0]))) < 1e-3
        d_curve = ale.ale_estimate(model, ds, "x", ale.OutputSpec("D2", 0),
                                   n_bins=20)
        assert np.allclose(d_curve.uncentred, 0.0)   # D2 constant here


class TestAleVariance:
    def make_data(self, n=2000, seed=3):
        rng = np.random.default_rng(seed)
        return make_dataset(np.zeros((n, 2)), {"x": rng.uniform(-2, 2, n)})

    def test_zero_posterior_gives_zero(self):
        ds = self.make_data()
        model = LinearModel(v_beta=0.0)
        curve = ale.ale_estimate(model, ds, "x", ale.OutputSpec("corr", 0, 1), 10)
        var = ale.ale_variance(model, curve, ds)
        assert np.allclose(var, 0.0)

    def test_nonnegative_for_random_states(self):
        ds = self.make_data()
        rng = np.random.default_rng(4)
        knots = np.linspace(-2.1, 2.1, 8)
        A = rng.standard_normal((8, 8))
        model = CurveModel(lambda k: 0.3 * np.sin(k), knots, v_beta=A @ A.T)
        curve = ale.ale_estimate(model, ds, "x", ale.OutputSpec("sigma", 0, 1), 12)
        var = ale.ale_variance(model, curve, ds)
        assert np.all(var >= 0.0)
        assert var[0] == 0.0

    def test_single_coefficient_hand_chain(self):
        # var = (d omega_bar / d beta)^2 * V, exactly, for a linear output
        ds = self.make_data()
        v = 0.3
        model = LinearModel(beta=0.8, v_beta=v)
        out = ale.OutputSpec("T", 1, 0)
        curve = ale.ale_estimate(model, ds, "x", out, 10)
        var = ale.ale_variance(model, curve, ds)
        h = 1e-4
        up = ale.ale_estimate(LinearModel(beta=0.8 + h, v_beta=v), ds, "x", out, 10)
        dn = ale.ale_estimate(LinearModel(beta=0.8 - h, v_beta=v), ds, "x", out, 10)
        slope = (up.uncentred - dn.uncentred) / (2 * h)
        assert np.max(np.abs(var - slope ** 2 * v)) < 1e-8

    def test_jacobian_chain_matches_fd(self):
        # pick V = e_i e_i': the variance is the squared beta_i-derivative
        ds = self.make_data(n=800)
        knots = np.linspace(-2.1, 2.1, 6)
        out = ale.OutputSpec("corr", 0, 1)
        base = CurveModel(lambda k: 0.4 * k, knots)
        for i in (0, 3, 5):
            V = np.zeros((6, 6))
            V[i, i] = 1.0
            model = CurveModel(lambda k: 0.4 * k, knots, v_beta=V)
            curve = ale.ale_estimate(model, ds, "x", out, 8)
            var = ale.ale_variance(model, curve, ds)
            h = 1e-5
            up = CurveModel(lambda k: 0.4 * k, knots)
            up.beta = base.beta.copy()
            up.beta[i] += h
            dn = CurveModel(lambda k: 0.4 * k, knots)
            dn.beta = base.beta.copy()
            dn.beta[i] -= h
            cu = ale.ale_estimate(up, ds, "x", out, 8)
            cd = ale.ale_estimate(dn, ds, "x", out, 8)
            slope = (cu.uncentred - cd.uncentred) / (2 * h)
            nonzero = np.abs(slope) > 1e-4
            rel = np.abs(np.sqrt(var[nonzero]) - np.abs(slope[nonzero])) \
                / np.abs(slope[nonzero])
            assert np.max(rel) < 1e-5

    def test_missing_posterior_errors(self):
        ds = self.make_data()
        model = LinearModel()
        model.v_beta = None
        curve = ale.ale_estimate(model, ds, "x", ale.OutputSpec("corr", 0, 1), 8)
        with pytest.raises(ale.AleError, match="posterior"):
            ale.ale_variance(model, curve, ds)


class TestCsvExport:
    def test_plot_ready_csv(self, tmp_path, tanh_setup):
        ds, model = tanh_setup
        curve = ale.ale_estimate(model, ds, "x", ale.OutputSpec("corr", 0, 1), 10)
        path = tmp_path / "curve.csv"
        curve.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "edge,uncentred,centred,variance"
        assert len(lines) == curve.edges.shape[0] + 1
