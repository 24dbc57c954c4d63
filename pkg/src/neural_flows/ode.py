"""Neural ODE baselines: vector fields, fixed-step and adaptive solvers.

Solvers operate on :class:`Tensor` states so that gradients flow through the
unrolled steps. Step-size control only ever looks at ``.data``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, as_tensor
from .nn import MLP, Module, time_input
from .serialize import register

METHODS = ("euler", "rk4", "dopri5")

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


class SolverError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    method: str = "dopri5"
    steps: int = 20
    rtol: float = 1e-3
    atol: float = 1e-4
    h0: float | None = None
    max_steps: int = 10_000
    norm: str = "rms"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.norm not in ("rms", "max"):
            raise ValueError("norm must be 'rms' or 'max'")


@dataclass
class ODESolution:
    x: Tensor
    n_accepted: int
    n_rejected: int
    n_evals: int


class VectorField(Module):
    """Unconstrained MLP right-hand side ``f(t, x)``."""

    kind = "vector_field"

    def __init__(self, dim, hidden, rng, activation="tanh"):
        self.dim = dim
        self.net = MLP(dim + 1, hidden, dim, rng, activation=activation)

    def __call__(self, t, x):
        return self.net(time_input(t, x))

    def jvp(self, t, x, tangent):
        """``(f(t, x), d f / d x @ tangent)``; the time column gets a zero tangent."""
        zeros = Tensor(np.zeros(as_tensor(t).shape))
        return self.net.jvp(time_input(t, x), time_input(zeros, tangent))

    def architecture(self):
        return {"kind": self.kind, "dim": self.dim, "hidden": self.net.hidden, "activation": self.net.activation}


class LinearField(Module):
    """``f(t, x) = A x``."""

    kind = "linear_field"

    def __init__(self, dim, rng=None, matrix=None):
        self.dim = dim
        if matrix is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            matrix = rng.normal(scale=0.5, size=(dim, dim))
        self.matrix = Tensor(np.array(matrix, dtype=float).reshape(dim, dim), requires_grad=True)

    def __call__(self, t, x):
        return as_tensor(x) @ self.matrix.T

    def jvp(self, t, x, tangent):
        return self(t, x), as_tensor(tangent) @ self.matrix.T

    def architecture(self):
        return {"kind": self.kind, "dim": self.dim}


class FunctionField:
    """Wrap a plain callable ``f(t, x) -> array`` (used by data generators and tests)."""

    def __init__(self, fn, dim):
        self.fn = fn
        self.dim = dim

    def __call__(self, t, x):
        t = as_tensor(t)
        x = as_tensor(x)
        return Tensor(self.fn(t.data, x.data))


@register("vector_field")
def _build_vector_field(arch):
    return VectorField(arch["dim"], arch["hidden"], np.random.default_rng(0), arch.get("activation", "tanh"))


@register("linear_field")
def _build_linear_field(arch):
    return LinearField(arch["dim"])


def _tcol(t, n):
    """Broadcast a scalar or per-row time to an ``(n, 1)`` tensor."""
    if isinstance(t, Tensor):
        return t if t.shape == (n, 1) else Tensor(np.broadcast_to(t.data, (n, 1)).copy())
    return Tensor(np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (n, 1)).copy())


def _error_norm(err, y0, y1, cfg):
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y0), np.abs(y1))
    ratio = err / scale
    if cfg.norm == "max":
        return float(np.abs(ratio).max())
    return float(np.sqrt(np.mean(ratio**2)))


def _initial_step(f, t0, y0, f0, direction, cfg, order=5):
    """Hairer-Norsett-Wanner starting step heuristic; costs one evaluation."""
    scale = cfg.atol + np.abs(y0.data) * cfg.rtol
    d0 = np.sqrt(np.mean((y0.data / scale) ** 2))
    d1 = np.sqrt(np.mean((f0.data / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0.data + h0 * direction * f0.data
    f1 = f(t0 + h0 * direction, Tensor(y1)).data
    d2 = np.sqrt(np.mean(((f1 - f0.data) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1)


def _fixed_step(f, x, t0, t1, cfg):
    n = cfg.steps
    h = (t1 - t0) / n
    evals = 0
    for i in range(n):
        t = t0 + i * h
        if cfg.method == "euler":
            x = x + h * f(t, x)
            evals += 1
        else:
            k1 = f(t, x)
            k2 = f(t + h / 2, x + (h / 2) * k1)
            k3 = f(t + h / 2, x + (h / 2) * k2)
            k4 = f(t + h, x + h * k3)
            x = x + (h / 6) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            evals += 4
    return ODESolution(x, n, 0, evals)


def _dopri5(f, x, t0, t1, cfg):
    span = t1 - t0
    if span == 0:
        return ODESolution(x, 0, 0, 0)
    k1 = f(t0, x)
    evals = 1
    if cfg.h0 is not None:
        h = cfg.h0
    else:
        h = _initial_step(f, t0, x, k1, 1.0, cfg)
        evals += 1
    t = t0
    accepted = rejected = 0
    while t < t1:
        if accepted + rejected >= cfg.max_steps:
            raise SolverError(
                f"dopri5 exceeded {cfg.max_steps} steps on [{t0:g}, {t1:g}] (reached t={t:.6g}); "
                "the problem is likely stiff"
            )
        h = min(h, t1 - t)
        ks = [k1]
        for i in range(1, 7):
            incr = sum((h * a) * k for a, k in zip(_A[i], ks) if a != 0.0)
            ks.append(f(t + _C[i] * h, x + incr))
        evals += 6
        x_new = x + sum((h * b) * k for b, k in zip(_B5, ks) if b != 0.0)
        err = h * sum(e * k.data for e, k in zip(_E, ks))
        norm = _error_norm(err, x.data, x_new.data, cfg)
        if norm <= 1.0:
            t = t + h
            if t1 - t <= 1e-12 * span:
                t = t1
            x = x_new
            k1 = ks[6]  # first-same-as-last
            accepted += 1
            factor = MAX_FACTOR if norm == 0 else min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * norm**-0.2))
        else:
            rejected += 1
            factor = max(MIN_FACTOR, SAFETY * norm**-0.2)
        h = h * factor
        if h < 1e-14 * max(1.0, abs(t)):
            raise SolverError(f"dopri5 step size underflow on [{t0:g}, {t1:g}] at t={t:.6g}")
    return ODESolution(x, accepted, rejected, evals)


def integrate(rhs, x, t0, t1, cfg: SolverConfig):
    """Low-level driver: ``rhs(t: float, x: Tensor) -> Tensor`` on a batched state."""
    if cfg.method == "dopri5":
        return _dopri5(rhs, as_tensor(x), float(t0), float(t1), cfg)
    return _fixed_step(rhs, as_tensor(x), float(t0), float(t1), cfg)


def ode_solve(f, x0, t0, t1, cfg: SolverConfig | None = None):
    """Integrate ``x' = f(t, x)`` from ``t0`` to ``t1``; ``x0`` is ``(d,)`` or ``(n, d)``."""
    cfg = cfg or SolverConfig()
    t0, t1 = float(t0), float(t1)
    if t1 < t0:
        raise ValueError("ode_solve needs t1 >= t0")
    x = as_tensor(x0)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, x.shape[0])
    n = x.shape[0]

    def rhs(t, y):
        return f(_tcol(t, n), y)

    if cfg.method == "dopri5":
        sol = _dopri5(rhs, x, t0, t1, cfg)
    else:
        sol = _fixed_step(rhs, x, t0, t1, cfg)
    if single:
        sol.x = sol.x.reshape(sol.x.shape[1])
    return sol


def batched_solve(f, x0, t1, cfg: SolverConfig | None = None, t0=None):
    """Solve every row to its own end time in one call.

    Row ``i`` integrates ``dx/ds = (t1_i - t0_i) f(t0_i + s (t1_i - t0_i), x)``
    over ``s in [0, 1]``, which equals the original ODE from ``t0_i`` to
    ``t1_i``. ``t0`` defaults to zero.
    """
    cfg = cfg or SolverConfig()
    x = as_tensor(x0)
    n = x.shape[0]
    t1 = np.asarray(t1.data if isinstance(t1, Tensor) else t1, dtype=float).reshape(n, 1)
    t0 = np.zeros((n, 1)) if t0 is None else np.asarray(t0, dtype=float).reshape(n, 1)
    dt = t1 - t0
    if np.any(dt < 0):
        raise ValueError("batched_solve needs t1 >= t0 for every row")

    def rhs(s, y):
        return f(Tensor(t0 + s * dt), y) * dt

    if cfg.method == "dopri5":
        return _dopri5(rhs, x, 0.0, 1.0, cfg)
    return _fixed_step(rhs, x, 0.0, 1.0, cfg)


def stiff_field(t, x):
    """``x' = -1000 x + 3000 - 2000 exp(-t)`` on plain arrays."""
    return -1000.0 * x + 3000.0 - 2000.0 * np.exp(-t)


def stiff_reference(t):
    """Closed-form solution of the stiff problem with ``x(0) = 0``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("stiff_reference is defined for t >= 0")
    # 3 - (2000/999) e^{-t} - (997/999) e^{-1000 t}, arranged to be exactly 0 at t = 0
    return (2000.0 * -np.expm1(-t) + 997.0 * -np.expm1(-1000.0 * t)) / 999.0
