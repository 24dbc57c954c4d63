"""Time-dependent densities: coupling flows with exact log-determinants and exact-trace CNFs."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor, as_tensor, concat, no_grad
from .flows import CouplingFlowLayer, FlowStack
from .ode import SolverConfig, VectorField, integrate
from .serialize import register

LOG_2PI = np.log(2 * np.pi)


def std_normal_log_prob(z):
    z = as_tensor(z)
    d = z.shape[-1]
    return -0.5 * (z * z).sum(axis=-1) - 0.5 * d * LOG_2PI


def _tcol(t, n):
    t = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=float)
    return np.broadcast_to(t.reshape(-1, 1), (n, 1)).copy()


class TimeVaryingCouplingDensity(FlowStack):
    """``p(x, t) = q(F^{-1}(t, x)) |det J_{F^{-1}}(x)|`` with ``q`` a standard Gaussian."""

    kind = "coupling_density"

    def __init__(self, dim=2, n_layers=4, hidden=(64, 64), rng=None, embedding="linear", layers=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if layers is None:
            layers = [
                CouplingFlowLayer(dim, list(hidden), rng, embedding=embedding, parity=i % 2)
                for i in range(n_layers)
            ]
        super().__init__(layers)
        self.embedding = embedding

    def architecture(self):
        return {"kind": self.kind, "dim": self.dim, "layers": [l.architecture() for l in self.layers]}


@register("coupling_density")
def _build_coupling_density(arch):
    rng = np.random.default_rng(0)
    layers = []
    for a in arch["layers"]:
        a = dict(a)
        a.pop("kind")
        layers.append(CouplingFlowLayer(a.pop("dim"), a.pop("hidden"), rng, **a))
    return TimeVaryingCouplingDensity(arch["dim"], layers=layers)


def coupling_log_prob(model: TimeVaryingCouplingDensity, x, t):
    """Log-density at ``x`` (``(d,)`` or ``(n, d)``) and time ``t`` (scalar or per row)."""
    x = as_tensor(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, x.shape[0])
    tt = _tcol(t, x.shape[0])
    if np.any(tt < 0):
        raise ValueError("density time must be non-negative")
    z, logdet = model.inverse_and_logdet(Tensor(tt), x)
    lp = std_normal_log_prob(z) + logdet
    return lp.reshape(()) if single else lp


def coupling_sample(model: TimeVaryingCouplingDensity, t, n, seed=0):
    if n < 1:
        raise ValueError("n must be >= 1")
    z = np.random.default_rng(seed).normal(size=(n, model.dim))
    with no_grad():
        return model.forward(Tensor(_tcol(t, n)), Tensor(z)).data


class TimeVaryingCNF:
    """Continuous normalizing flow with the exact Jacobian trace (``d <= 3``)."""

    kind = "cnf"

    def __init__(self, field, solver: SolverConfig | None = None):
        if field.dim > 3:
            raise ValueError("exact-trace CNF is limited to d <= 3")
        self.field = field
        self.dim = field.dim
        self.solver = solver or SolverConfig("dopri5", rtol=1e-5, atol=1e-7)

    def parameters(self):
        return self.field.parameters()

    def named_parameters(self):
        yield from self.field.named_parameters("field.")

    def project(self, iters=1):
        pass

    def architecture(self):
        return {"kind": self.kind, "field": self.field.architecture(), "solver": vars(self.solver)}


@register("cnf")
def _build_cnf(arch):
    from .serialize import build

    return TimeVaryingCNF(build(arch["field"]), SolverConfig(**arch["solver"]))


def exact_trace(field, t, z):
    """``f(t, z)`` and ``tr(df/dz)`` from ``d`` directional derivatives."""
    n, d = z.shape
    f = None
    trace = 0.0
    for j in range(d):
        e = np.zeros((n, d))
        e[:, j] = 1.0
        out, jv = field.jvp(t, z, Tensor(e))
        f = out if f is None else f
        trace = trace + jv[:, j]
    return f, trace


def cnf_log_prob(model: TimeVaryingCNF, x, t, solver: SolverConfig | None = None, return_stats=False):
    """``log q(z(0)) - int_0^t tr(df/dz) ds`` by integrating from ``t`` back to 0.

    With ``s = t (1 - sigma)`` the backward problem becomes a forward solve on
    ``sigma in [0, 1]``, so rows with different ``t`` share one solver call.
    """
    solver = solver or model.solver
    x = as_tensor(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, x.shape[0])
    n, d = x.shape
    if d > 3:
        raise ValueError("exact-trace CNF is limited to d <= 3")
    tt = _tcol(t, n)
    if np.any(tt < 0):
        raise ValueError("density time must be non-negative")

    def rhs(sigma, state):
        z = state[:, :d]
        f, tr = exact_trace(model.field, Tensor(tt * (1.0 - sigma)), z)
        return concat([-(f * tt), (tr * tt[:, 0]).reshape(n, 1)], axis=-1)

    start = concat([x, Tensor(np.zeros((n, 1)))], axis=-1)
    sol = integrate(rhs, start, 0.0, 1.0, solver)
    z0 = sol.x[:, :d]
    lp = std_normal_log_prob(z0) - sol.x[:, d]
    lp = lp.reshape(()) if single else lp
    return (lp, sol) if return_stats else lp


def grid_points(lim=3.0, n=400):
    """Cell centres of an ``n x n`` grid on ``[-lim, lim]^2`` and the cell area."""
    h = 2 * lim / n
    c = -lim + h * (np.arange(n) + 0.5)
    xx, yy = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1), h * h


def grid_density(log_prob_fn, t, lim=3.0, n=400, chunk=40_000):
    """Evaluate ``exp(log_prob_fn(points, t))`` on the grid; returns ``(points, density, area)``."""
    pts, area = grid_points(lim, n)
    out = np.empty(len(pts))
    with no_grad():
        for i in range(0, len(pts), chunk):
            lp = log_prob_fn(Tensor(pts[i : i + chunk]), t)
            out[i : i + chunk] = np.exp(as_tensor(lp).data)
    return pts, out, area


def grid_integral(log_prob_fn, t, lim=3.0, n=400):
    _, dens, area = grid_density(log_prob_fn, t, lim, n)
    return float(dens.sum() * area)
