import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neural_flows.autograd import Tape, Tensor, backward
from neural_flows.linalg import matrix_exp
from neural_flows.ode import (
    FunctionField,
    LinearField,
    SolverConfig,
    SolverError,
    VectorField,
    batched_solve,
    ode_solve,
    stiff_field,
    stiff_reference,
)

IDENTITY = FunctionField(lambda t, x: x, 1)
ZERO = FunctionField(lambda t, x: np.zeros_like(x), 2)
SINK = np.array([[-4.0, 10.0], [-3.0, 2.0]])


def order_slope(method, steps):
    errs = []
    for n in steps:
        sol = ode_solve(IDENTITY, np.array([1.0]), 0.0, 1.0, SolverConfig(method, steps=n))
        errs.append(abs(sol.x.data[0] - np.e))
    return np.polyfit(np.log(1.0 / np.array(steps)), np.log(errs), 1)[0]


@pytest.mark.parametrize("method", ["euler", "rk4", "dopri5"])
def test_zero_field_is_constant(method):
    x0 = np.array([0.3, -1.2])
    np.testing.assert_array_equal(ode_solve(ZERO, x0, 0.0, 2.0, SolverConfig(method)).x.data, x0)


def test_rk4_reaches_e():
    sol = ode_solve(IDENTITY, np.array([1.0]), 0.0, 1.0, SolverConfig("rk4", steps=100))
    assert abs(sol.x.data[0] - np.e) < 1e-8
    assert sol.n_evals == 400


def test_euler_order_one():
    assert abs(order_slope("euler", [10, 32, 100, 316, 1000]) - 1) < 0.2


def test_rk4_order_four():
    assert abs(order_slope("rk4", [10, 32, 100, 316, 1000]) - 4) < 0.2


def test_dopri5_tight_tolerance_matches_expm():
    x0 = np.array([1.0, 0.5])
    field = LinearField(2, matrix=SINK)
    for t in (0.5, 1.0, 2.0):
        sol = ode_solve(field, x0, 0.0, t, SolverConfig(rtol=1e-9, atol=1e-12))
        np.testing.assert_allclose(sol.x.data, matrix_exp(SINK * t) @ x0, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1e-3, 1e-5, 1e-7]))
def test_dopri5_respects_tolerance(seed, rtol):
    r = np.random.default_rng(seed)
    a = r.normal(size=(3, 3))
    x0 = r.normal(size=3)
    sol = ode_solve(LinearField(3, matrix=a), x0, 0.0, 1.0, SolverConfig(rtol=rtol, atol=rtol * 1e-1))
    truth = matrix_exp(a) @ x0
    assert np.abs(sol.x.data - truth).max() <= 100 * rtol * max(1.0, np.abs(truth).max())


def test_dopri5_counts_are_consistent():
    sol = ode_solve(LinearField(2, matrix=SINK), np.ones(2), 0.0, 3.0)
    assert sol.n_accepted >= 1
    # FSAL: six new stages per attempted step plus the first stage and the initial-step probe
    assert sol.n_evals == 6 * (sol.n_accepted + sol.n_rejected) + 2


def test_dopri5_max_steps_names_interval():
    cfg = SolverConfig(max_steps=5)
    with pytest.raises(SolverError, match=r"\[0, 1\]"):
        ode_solve(FunctionField(stiff_field, 1), np.zeros(1), 0.0, 1.0, cfg)


def test_rejects_reversed_interval():
    with pytest.raises(ValueError):
        ode_solve(IDENTITY, np.ones(1), 1.0, 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig("heun")
    with pytest.raises(ValueError):
        SolverConfig(steps=0)
    with pytest.raises(ValueError):
        SolverConfig(rtol=0)


@pytest.mark.parametrize("method", ["euler", "rk4", "dopri5"])
def test_batched_solve_matches_elementwise(method, rng):
    field = VectorField(2, [16], rng)
    x0 = rng.normal(size=(6, 2))
    t1 = rng.uniform(0.1, 2.0, size=6)
    cfg = SolverConfig(method, steps=200, rtol=1e-8, atol=1e-10)
    batched = batched_solve(field, x0, t1, cfg).x.data
    for i in range(6):
        single = ode_solve(field, x0[i], 0.0, t1[i], SolverConfig(method, steps=200, rtol=1e-8, atol=1e-10)).x.data
        tol = 1e-5 if method == "dopri5" else 1e-12
        np.testing.assert_allclose(batched[i], single, atol=tol)


def test_batched_solve_zero_time_and_symmetry(rng):
    field = VectorField(2, [8], rng)
    x0 = np.tile(rng.normal(size=(1, 2)), (4, 1))
    t1 = np.array([0.0, 1.0, 1.0, 1.0])
    out = batched_solve(field, x0, t1).x.data
    np.testing.assert_allclose(out[0], x0[0], atol=1e-14)
    np.testing.assert_array_equal(out[1], out[2])
    np.testing.assert_array_equal(out[2], out[3])


def test_batched_solve_with_start_times(rng):
    field = LinearField(2, matrix=SINK * 0.1)
    x0 = rng.normal(size=(3, 2))
    t0, t1 = np.array([0.5, 1.0, 2.0]), np.array([1.5, 1.0, 4.0])
    out = batched_solve(field, x0, t1, SolverConfig(rtol=1e-10, atol=1e-12), t0=t0).x.data
    for i in range(3):
        np.testing.assert_allclose(out[i], matrix_exp(SINK * 0.1 * (t1[i] - t0[i])) @ x0[i], atol=1e-8)


def test_gradient_through_solver(rng):
    field = VectorField(2, [6], rng)
    x0 = rng.normal(size=(3, 2))
    p = field.net.layers[0].weight
    cfg = SolverConfig("dopri5", rtol=1e-6, atol=1e-8)
    with Tape() as tape:
        out = (ode_solve(field, x0, 0.0, 0.5, cfg).x ** 2).sum()
    g = backward(tape, out, [p])[p]
    base = p.data.copy()
    num = np.zeros_like(base)
    h = 1e-6
    for i in np.ndindex(base.shape):
        vals = []
        for s in (h, -h):
            p.data = base.copy()
            p.data[i] += s
            vals.append((ode_solve(field, x0, 0.0, 0.5, cfg).x.data ** 2).sum())
        num[i] = (vals[0] - vals[1]) / (2 * h)
    p.data = base
    # the adaptive step sequence is piecewise constant in the weights, so
    # unrolled gradients match finite differences of the same discretization
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-8)


def test_vector_field_jvp(rng):
    field = VectorField(3, [8], rng)
    t = Tensor(rng.uniform(size=(4, 1)))
    x, v = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    _, jv = field.jvp(t, x, v)
    h = 1e-6
    num = (field(t, Tensor(x + h * v)).data - field(t, Tensor(x - h * v)).data) / (2 * h)
    np.testing.assert_allclose(jv.data, num, rtol=1e-6, atol=1e-8)


# --- stiff problem ----------------------------------------------------------


def test_stiff_reference_values():
    assert stiff_reference(0.0) == 0.0
    assert stiff_reference(15.0) == pytest.approx(3 - 2000 / 999 * np.exp(-15), abs=1e-12)
    assert stiff_reference(1.0) == pytest.approx(2.2635, abs=1e-4)


def test_stiff_reference_matches_fine_rk4():
    sol = ode_solve(FunctionField(stiff_field, 1), np.zeros(1), 0.0, 1.0, SolverConfig("rk4", steps=20_000))
    assert sol.x.data[0] == pytest.approx(stiff_reference(1.0), abs=1e-8)


def test_stiff_reference_satisfies_ode():
    t = np.linspace(0.001, 15, 500)
    h = 1e-6
    deriv = (stiff_reference(t + h) - stiff_reference(t - h)) / (2 * h)
    resid = np.abs(deriv - stiff_field(t, stiff_reference(t)))
    # central differences carry h^2 x''' / 6 truncation error, large inside the transient
    assert np.all(resid < 1e-6 * np.maximum(1.0, np.abs(deriv)))


def test_stiff_reference_rejects_negative_time():
    with pytest.raises(ValueError):
        stiff_reference(-1.0)
