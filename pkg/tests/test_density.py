import numpy as np
import pytest

from neural_flows import serialize
from neural_flows.autograd import Tensor, no_grad
from neural_flows.density import (
    TimeVaryingCNF,
    TimeVaryingCouplingDensity,
    cnf_log_prob,
    coupling_log_prob,
    coupling_sample,
    exact_trace,
    grid_integral,
    grid_points,
    std_normal_log_prob,
)
from neural_flows.flows import CouplingFlowLayer
from neural_flows.linalg import matrix_exp
from neural_flows.ode import FunctionField, LinearField, SolverConfig, VectorField


def random_density(seed, scale=0.3, n_layers=4):
    r = np.random.default_rng(seed)
    layers = [CouplingFlowLayer(2, [16], r, zero_init=False, parity=i % 2) for i in range(n_layers)]
    for layer in layers:
        for p in layer.parameters():
            p.data = p.data * scale
    return TimeVaryingCouplingDensity(2, layers=layers)


def shift_density(shift):
    layer = CouplingFlowLayer(1, [4], np.random.default_rng(0), zero_init=True)
    layer.embed_v.alpha.data[:] = 1.0
    layer.v.layers[-1].bias.data[:] = shift
    other = CouplingFlowLayer(1, [4], np.random.default_rng(1), zero_init=True)
    return TimeVaryingCouplingDensity(1, layers=[layer, other])


def test_base_density_at_time_zero():
    model = random_density(0)
    assert coupling_log_prob(model, np.zeros(2), 0.0).item() == pytest.approx(-np.log(2 * np.pi), abs=1e-12)


def test_pure_shift_mode():
    model = shift_density(1.5)
    # at t = 2 the shift is v * phi_v = 1.5 * 2
    assert coupling_log_prob(model, np.array([3.0]), 2.0).item() == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)
    samples = coupling_sample(model, 2.0, 4000, seed=1)
    assert abs(samples.mean() - 3.0) < 3 / np.sqrt(4000)


def test_samples_at_zero_are_base_draws():
    model = random_density(1)
    z = np.random.default_rng(7).normal(size=(10, 2))
    np.testing.assert_array_equal(coupling_sample(model, 0.0, 10, seed=7), z)


def test_samples_have_finite_log_prob():
    model = random_density(2)
    x = coupling_sample(model, 0.8, 500, seed=3)
    with no_grad():
        assert np.all(np.isfinite(coupling_log_prob(model, x, 0.8).data))


def test_forward_inverse_determinant_reciprocity():
    model = random_density(3)
    z = np.random.default_rng(4).normal(size=(50, 2))
    t = Tensor(np.full((50, 1), 0.7))
    with no_grad():
        x, ld = model.forward_and_logdet(t, z)
        lp = coupling_log_prob(model, x, 0.7).data
    np.testing.assert_allclose(lp, std_normal_log_prob(z).data - ld.data, atol=1e-9)


def test_log_prob_per_row_times():
    model = random_density(4)
    x = np.random.default_rng(0).normal(size=(3, 2))
    t = np.array([0.1, 0.5, 0.9])
    with no_grad():
        rows = coupling_log_prob(model, x, t).data
        for i in range(3):
            assert rows[i] == pytest.approx(coupling_log_prob(model, x[i], t[i]).item(), abs=1e-13)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("t", [0.25, 0.5, 1.0])
def test_coupling_grid_integral(seed, t):
    model = random_density(seed)
    total = grid_integral(lambda p, s: coupling_log_prob(model, p, s), t)
    assert 0.98 <= total <= 1.02


def test_grid_points_cover_the_square():
    pts, area = grid_points(3.0, 400)
    assert pts.shape == (160_000, 2)
    assert area * len(pts) == pytest.approx(36.0)
    assert pts.min() > -3 and pts.max() < 3


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        coupling_log_prob(random_density(0), np.zeros(2), -1.0)


# --- CNF --------------------------------------------------------------------


def test_exact_trace_matches_jacobian():
    r = np.random.default_rng(0)
    field = VectorField(3, [8], r)
    z = r.normal(size=(4, 3))
    t = Tensor(r.uniform(size=(4, 1)))
    _, tr = exact_trace(field, t, Tensor(z))
    h = 1e-6
    for i in range(4):
        jac = np.zeros((3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            jac[:, j] = (field(t.data[i : i + 1], Tensor(z[i : i + 1] + e)).data
                         - field(t.data[i : i + 1], Tensor(z[i : i + 1] - e)).data)[0] / (2 * h)
        assert tr.data[i] == pytest.approx(np.trace(jac), rel=1e-6)


def test_zero_field_keeps_base_density():
    model = TimeVaryingCNF(LinearField(2, matrix=np.zeros((2, 2))))
    x = np.random.default_rng(0).normal(size=(5, 2))
    with no_grad():
        np.testing.assert_allclose(cnf_log_prob(model, x, 0.8).data, std_normal_log_prob(x).data, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_linear_field_matches_closed_form(seed):
    r = np.random.default_rng(seed)
    a = r.normal(scale=0.5, size=(2, 2))
    model = TimeVaryingCNF(LinearField(2, matrix=a), SolverConfig(rtol=1e-10, atol=1e-12))
    x = r.normal(size=(6, 2))
    with no_grad():
        got = cnf_log_prob(model, x, 1.0).data
    z = x @ matrix_exp(-a).T
    np.testing.assert_allclose(got, std_normal_log_prob(z).data - np.trace(a), atol=1e-8)


def test_cnf_grid_integral_with_adaptive_solver():
    model = TimeVaryingCNF(VectorField(2, [16], np.random.default_rng(0)), SolverConfig(rtol=1e-5, atol=1e-7))
    total = grid_integral(lambda p, s: cnf_log_prob(model, p, s), 0.5, n=100)
    assert 0.98 <= total <= 1.02


def test_cnf_dimension_limit():
    with pytest.raises(ValueError):
        TimeVaryingCNF(FunctionField(lambda t, x: x, 4))


def test_density_serialization(tmp_path):
    model = random_density(5)
    serialize.save(model, tmp_path / "d.json")
    back = serialize.load(tmp_path / "d.json")
    x = np.random.default_rng(0).normal(size=(5, 2))
    with no_grad():
        np.testing.assert_array_equal(coupling_log_prob(back, x, 0.4).data, coupling_log_prob(model, x, 0.4).data)
    cnf = TimeVaryingCNF(VectorField(2, [8], np.random.default_rng(1)), SolverConfig("euler", steps=20))
    serialize.save(cnf, tmp_path / "c.json")
    back = serialize.load(tmp_path / "c.json")
    assert back.solver == cnf.solver
    with no_grad():
        np.testing.assert_array_equal(cnf_log_prob(back, x, 0.4).data, cnf_log_prob(cnf, x, 0.4).data)
