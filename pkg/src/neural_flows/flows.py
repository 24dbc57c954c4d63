"""Neural flow layers: time-indexed invertible maps with ``F(0, x) = x``.

All layers take a batch ``x`` of shape ``(n, d)`` and times ``t`` of shape
``(n, 1)``; the module-level functions also accept single vectors and
scalar times.
"""
from __future__ import annotations

import numpy as np

from .autograd import Tape, Tensor, _make, as_tensor, concat, expm, no_grad, vjp
from .nn import MLP, Module, time_input
from .serialize import register

GRU_ALPHA = 2.0 / 5.0
GRU_BETA = 4.0 / 5.0
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200


class InversionError(RuntimeError):
    """Fixed-point inversion did not converge; carries the last iterate."""

    def __init__(self, message, last_iterate, residual_norm):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual_norm = residual_norm


# ---------------------------------------------------------------------------
# time embeddings


class TimeEmbedding(Module):
    bounded = False

    def __init__(self, dim):
        self.dim = dim

    def __call__(self, t):
        raise NotImplementedError


class LinearEmbedding(TimeEmbedding):
    """``phi(t) = alpha * t``."""

    kind = "linear"

    def __init__(self, dim, rng=None, alpha=None):
        super().__init__(dim)
        a = np.full(dim, 1.0) if alpha is None else np.broadcast_to(alpha, (dim,))
        self.alpha = Tensor(np.array(a, dtype=float), requires_grad=True)

    def __call__(self, t):
        return as_tensor(t) * self.alpha

    def architecture(self):
        return {"kind": self.kind, "dim": self.dim}


class TanhEmbedding(TimeEmbedding):
    """``phi(t) = tanh(alpha * t)``; bounded in (-1, 1)."""

    kind = "tanh"
    bounded = True

    def __init__(self, dim, rng=None, alpha=None):
        super().__init__(dim)
        a = np.full(dim, 1.0) if alpha is None else np.broadcast_to(alpha, (dim,))
        self.alpha = Tensor(np.array(a, dtype=float), requires_grad=True)

    def __call__(self, t):
        return (as_tensor(t) * self.alpha).tanh()

    def architecture(self):
        return {"kind": self.kind, "dim": self.dim}


class FourierEmbedding(TimeEmbedding):
    """``phi(t)_i = sum_k alpha_ki sin(beta_ki t)``, optionally squashed by tanh."""

    kind = "fourier"

    def __init__(self, dim, rng=None, n_features=8, bounded=False, alpha=None, beta=None):
        super().__init__(dim)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_features = n_features
        self.bounded = bounded
        if alpha is None:
            alpha = rng.normal(scale=1.0 / n_features, size=(n_features, dim))
        if beta is None:
            # harmonic frequencies 1..K rad per unit time; learning frequencies
            # from random starts proved unreliable
            beta = np.outer(np.arange(1, n_features + 1), np.ones(dim))
        self.alpha = Tensor(np.array(alpha, dtype=float).reshape(n_features, dim), requires_grad=True)
        self.beta = Tensor(np.array(beta, dtype=float).reshape(n_features, dim), requires_grad=True)

    def __call__(self, t):
        t = as_tensor(t)  # (n, 1)
        feats = (t.reshape(t.shape[0], 1, 1) * self.beta).sin() * self.alpha  # (n, K, d)
        out = feats.sum(axis=1)
        return out.tanh() if self.bounded else out

    def architecture(self):
        return {"kind": self.kind, "dim": self.dim, "n_features": self.n_features, "bounded": self.bounded}


EMBEDDINGS = {"linear": LinearEmbedding, "tanh": TanhEmbedding, "fourier": FourierEmbedding}


def make_embedding(kind, dim, rng, bounded=False, n_features=8):
    if kind == "fourier":
        return FourierEmbedding(dim, rng, n_features=n_features, bounded=bounded)
    if kind not in EMBEDDINGS:
        raise ValueError(f"unknown time embedding {kind!r}")
    return EMBEDDINGS[kind](dim, rng)


def embed_time(embedding, t):
    """Evaluate ``phi(t)`` for a scalar time, returning a 1-D array."""
    with no_grad():
        return embedding(np.array([[float(t)]])).data[0]


# ---------------------------------------------------------------------------
# layers


class FlowLayer(Module):
    analytic_inverse = False

    def forward(self, t, x):
        raise NotImplementedError

    def inverse(self, t, y, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        raise NotImplementedError

    def __call__(self, t, x):
        return self.forward(t, x)


class ResidualFlowLayer(FlowLayer):
    """Shared fixed-point inversion for ``F(t, x) = x + residual(t, x)``."""

    def residual(self, t, x):
        raise NotImplementedError

    def forward(self, t, x):
        return as_tensor(x) + self.residual(t, x)

    def inverse(self, t, y, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        y, t = as_tensor(y), as_tensor(t)
        with no_grad():
            x = self._fixed_point(t, y.data, y.data, tol, max_iter)
        wrt = [p for p in (t, *self.parameters()) if p.requires_grad]
        return _make(x, (y, *wrt), lambda g: self._inverse_vjp(t, x, g, wrt, tol, max_iter))

    def _fixed_point(self, t, y, x, tol, max_iter, step=None):
        step = step or (lambda x: y - self.residual(t, x).data)
        for _ in range(max_iter):
            x_new = step(x)
            diff = float(np.abs(x_new - x).max()) if x.size else 0.0
            x = x_new
            if diff < tol:
                return x
        raise InversionError(
            f"fixed-point inversion did not converge in {max_iter} iterations (last step {diff:.3e})",
            x,
            diff,
        )

    def _inverse_vjp(self, t, x, g, wrt, tol, max_iter):
        """Implicit gradient of ``x = y - residual(t, x)``.

        The adjoint ``v = (I + J)^{-T} g`` solves ``v = g - J^T v``, a
        contraction with the same constant as the forward iteration.
        """
        xt = Tensor(x, requires_grad=True)
        with Tape() as tape:
            r = self.residual(t, xt)
        if r not in tape:  # residual does not depend on anything differentiable
            return (g, *[np.zeros_like(p.data) for p in wrt])
        v = self._fixed_point(t, g, g, tol, max_iter, step=lambda v: g - vjp(tape, r, v, [xt])[xt])
        grads = vjp(tape, r, v, wrt)
        return (v, *[-grads[p] for p in wrt])


class ResNetFlowLayer(ResidualFlowLayer):
    """``F(t, x) = x + phi(t) * g(t, x)`` with spectrally normalized ``g``."""

    kind = "resnet"

    def __init__(self, dim, hidden, rng, embedding="tanh", spectral_coeff=0.9, n_features=8):
        self.dim = dim
        self.embedding = make_embedding(embedding, dim, rng, bounded=True, n_features=n_features)
        if not self.embedding.bounded:
            raise ValueError("ResNet flow needs a bounded time embedding (tanh or fourier)")
        self.spectral_coeff = spectral_coeff
        self.net = MLP(dim + 1, hidden, dim, rng, activation="tanh", spectral_coeff=spectral_coeff)

    def residual(self, t, x):
        return self.embedding(t) * self.net(time_input(t, x))

    def architecture(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "hidden": self.net.hidden,
            "embedding": self.embedding.kind,
            "n_features": getattr(self.embedding, "n_features", 8),
            "spectral_coeff": self.spectral_coeff,
        }


class GRUFlowLayer(ResidualFlowLayer):
    """Continuous-time GRU evolution ``F(t, h) = h + phi(t) * gate * (c - h)``.

    ``gate="z"`` uses ``z = alpha * sigmoid(f_z)`` directly, for which the
    residual is provably contractive on ``(-1, 1)^d`` with alpha=2/5, beta=4/5.
    ``gate="complement"`` uses ``1 - z``; it is kept for comparison only since
    its residual can have Lipschitz constant above one.
    The embedding enters as ``|phi(t)|`` so the update weight lies in [0, 1).
    """

    kind = "gru"

    def __init__(self, dim, hidden, rng, embedding="tanh", spectral_coeff=0.9, gate="z", n_features=8):
        if gate not in ("z", "complement"):
            raise ValueError("gate must be 'z' or 'complement'")
        self.dim = dim
        self.gate = gate
        self.spectral_coeff = spectral_coeff
        self.embedding = make_embedding(embedding, dim, rng, bounded=True, n_features=n_features)
        if not self.embedding.bounded:
            raise ValueError("GRU flow needs a bounded time embedding (tanh or fourier)")
        kw = dict(activation="tanh", spectral_coeff=spectral_coeff)
        self.f_z = MLP(dim + 1, hidden, dim, rng, **kw)
        self.f_r = MLP(dim + 1, hidden, dim, rng, **kw)
        self.f_c = MLP(dim + 1, hidden, dim, rng, **kw)

    def gates(self, t, h):
        inp = time_input(t, h)
        z = GRU_ALPHA * self.f_z(inp).sigmoid()
        r = GRU_BETA * self.f_r(inp).sigmoid()
        c = self.f_c(time_input(t, r * h)).tanh()
        return z, r, c

    def residual(self, t, h):
        h = as_tensor(h)
        z, _, c = self.gates(t, h)
        w = z if self.gate == "z" else 1.0 - z
        return self.embedding(t).abs() * w * (c - h)

    def architecture(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "hidden": self.f_z.hidden,
            "embedding": self.embedding.kind,
            "n_features": getattr(self.embedding, "n_features", 8),
            "spectral_coeff": self.spectral_coeff,
            "gate": self.gate,
        }


class CouplingFlowLayer(FlowLayer):
    """Affine coupling ``F(t, x)_A = x_A * exp(u * phi_u) + v * phi_v``; ``x_B`` is copied.

    ``u`` and ``v`` see ``(t, x_B)``. With ``d = 1`` the conditioning set is
    empty and both networks depend on time only.
    """

    kind = "coupling"
    analytic_inverse = True

    def __init__(self, dim, hidden, rng, mask=None, embedding="linear", n_features=8, zero_init=True, parity=0):
        self.dim = dim
        if mask is None:
            mask = [i for i in range(dim) if i % 2 == parity] if dim > 1 else [0]
        a_idx = sorted(int(i) for i in mask)
        b_idx = [i for i in range(dim) if i not in a_idx]
        if not a_idx or len(set(a_idx)) != len(a_idx) or any(i < 0 or i >= dim for i in a_idx):
            raise ValueError(f"invalid partition {mask} for dimension {dim}")
        if dim > 1 and not b_idx:
            raise ValueError("both partition sets must be non-empty when dim > 1")
        self.a_idx = np.array(a_idx, dtype=int)
        self.b_idx = np.array(b_idx, dtype=int)
        self.order = np.argsort(np.concatenate([self.a_idx, self.b_idx]))
        n_a, n_b = len(a_idx), len(b_idx)
        self.embed_u = make_embedding(embedding, n_a, rng, n_features=n_features)
        self.embed_v = make_embedding(embedding, n_a, rng, n_features=n_features)
        self.u = MLP(1 + n_b, hidden, n_a, rng, activation="tanh", zero_last=zero_init)
        self.v = MLP(1 + n_b, hidden, n_a, rng, activation="tanh", zero_last=zero_init)
        self.zero_init = zero_init

    def _split(self, x):
        return x[:, self.a_idx], x[:, self.b_idx]

    def _merge(self, xa, xb):
        if not len(self.b_idx):
            return xa
        return concat([xa, xb], axis=-1)[:, self.order]

    def _scale_shift(self, t, xb):
        inp = time_input(t, xb)
        log_scale = self.u(inp) * self.embed_u(t)
        shift = self.v(inp) * self.embed_v(t)
        return log_scale, shift

    def forward_and_logdet(self, t, x):
        x = as_tensor(x)
        xa, xb = self._split(x)
        s, m = self._scale_shift(t, xb)
        ya = xa * s.exp() + m
        return self._merge(ya, xb), s.sum(axis=-1)

    def inverse_and_logdet(self, t, y):
        """Return ``(x, log|det J_{F^-1}(y)|)``."""
        y = as_tensor(y)
        ya, yb = self._split(y)
        s, m = self._scale_shift(t, yb)
        xa = (ya - m) * (-s).exp()
        return self._merge(xa, yb), -s.sum(axis=-1)

    def forward(self, t, x):
        return self.forward_and_logdet(t, x)[0]

    def inverse(self, t, y, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        return self.inverse_and_logdet(t, y)[0]

    def architecture(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "hidden": self.u.hidden,
            "mask": self.a_idx.tolist(),
            "embedding": self.embed_u.kind,
            "n_features": getattr(self.embed_u, "n_features", 8),
            "zero_init": self.zero_init,
        }


class LinearFlow(FlowLayer):
    """``F(t, x) = expm(A t) x``: the exact flow of the linear ODE ``x' = A x``."""

    kind = "linear"
    analytic_inverse = True

    def __init__(self, dim, rng=None, matrix=None, scale=0.1):
        self.dim = dim
        if matrix is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            matrix = rng.normal(scale=scale, size=(dim, dim))
        self.matrix = Tensor(np.array(matrix, dtype=float).reshape(dim, dim), requires_grad=True)

    def _propagator(self, t):
        t = as_tensor(t)
        return expm(self.matrix * t.reshape(t.shape[0], 1, 1))

    def _apply(self, m, x):
        x = as_tensor(x)
        return (m @ x.reshape(x.shape[0], self.dim, 1)).reshape(x.shape[0], self.dim)

    def forward(self, t, x):
        return self._apply(self._propagator(t), x)

    def inverse(self, t, y, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        return self._apply(self._propagator(-as_tensor(t)), y)

    def forward_and_logdet(self, t, x):
        t = as_tensor(t)
        trace = sum(self.matrix[i, i] for i in range(self.dim))
        return self.forward(t, x), t.reshape(t.shape[0]) * trace

    def inverse_and_logdet(self, t, y):
        t = as_tensor(t)
        trace = sum(self.matrix[i, i] for i in range(self.dim))
        return self.inverse(t, y), -t.reshape(t.shape[0]) * trace

    def architecture(self):
        return {"kind": self.kind, "dim": self.dim}


class FlowStack(FlowLayer):
    """Composition of flow layers, applied first to last."""

    kind = "stack"

    def __init__(self, layers):
        if not layers:
            raise ValueError("a flow stack needs at least one layer")
        dims = {layer.dim for layer in layers}
        if len(dims) != 1:
            raise ValueError(f"layers disagree on dimension: {sorted(dims)}")
        self.dim = dims.pop()
        self.layers = list(layers)

    @property
    def analytic_inverse(self):
        return all(layer.analytic_inverse for layer in self.layers)

    def forward(self, t, x):
        for layer in self.layers:
            x = layer.forward(t, x)
        return x

    def inverse(self, t, y, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        for layer in reversed(self.layers):
            y = layer.inverse(t, y, tol=tol, max_iter=max_iter)
        return y

    def forward_and_logdet(self, t, x):
        total = 0.0
        for layer in self.layers:
            x, ld = layer.forward_and_logdet(t, x)
            total = total + ld
        return x, total

    def inverse_and_logdet(self, t, y):
        total = 0.0
        for layer in reversed(self.layers):
            y, ld = layer.inverse_and_logdet(t, y)
            total = total + ld
        return y, total

    def architecture(self):
        return {"kind": self.kind, "layers": [layer.architecture() for layer in self.layers]}


LAYERS = {
    "resnet": ResNetFlowLayer,
    "gru": GRUFlowLayer,
    "coupling": CouplingFlowLayer,
    "linear": LinearFlow,
}


def build_flow(kind, dim, n_layers=1, hidden=(64, 64), rng=None, embedding=None, **kwargs):
    """Stack of ``n_layers`` layers of one kind; coupling partitions alternate parity."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind not in LAYERS:
        raise ValueError(f"unknown flow kind {kind!r}")
    layers = []
    for i in range(n_layers):
        if kind == "linear":
            layers.append(LinearFlow(dim, rng, **kwargs))
            continue
        kw = dict(kwargs)
        if embedding is not None:
            kw["embedding"] = embedding
        if kind == "coupling":
            kw.setdefault("parity", i % 2)
        layers.append(LAYERS[kind](dim, list(hidden), rng, **kw))
    return FlowStack(layers)


def flow_from_architecture(arch, rng=None):
    """Rebuild an (untrained) flow from ``architecture()`` output."""
    rng = rng if rng is not None else np.random.default_rng(0)
    arch = dict(arch)
    kind = arch.pop("kind")
    if kind == "stack":
        return FlowStack([flow_from_architecture(a, rng) for a in arch["layers"]])
    if kind == "linear":
        return LinearFlow(arch["dim"], rng)
    cls = LAYERS[kind]
    dim, hidden = arch.pop("dim"), arch.pop("hidden")
    return cls(dim, hidden, rng, **arch)


for _kind in ("stack", *LAYERS):
    register(_kind)(flow_from_architecture)


# ---------------------------------------------------------------------------
# functional API


def _batch(t, x):
    """Normalize to ``t: (n, 1)``, ``x: (n, d)``; report whether to unbatch."""
    x = as_tensor(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, x.shape[0])
    n = x.shape[0]
    t = as_tensor(t)
    if t.size == 1:
        t = Tensor(np.full((n, 1), float(t.data.reshape(-1)[0]))) if not t.requires_grad else t.reshape(1, 1) * np.ones((n, 1))
    else:
        t = t.reshape(n, 1)
    return t, x, single


def flow_forward(flow, t, x):
    t, x, single = _batch(t, x)
    if x.shape[-1] != flow.dim:
        raise ValueError(f"state has dimension {x.shape[-1]}, flow expects {flow.dim}")
    y = flow.forward(t, x)
    return y.reshape(flow.dim) if single else y


def flow_inverse(flow, t, y, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    t, y, single = _batch(t, y)
    if y.shape[-1] != flow.dim:
        raise ValueError(f"state has dimension {y.shape[-1]}, flow expects {flow.dim}")
    x = flow.inverse(t, y, tol=tol, max_iter=max_iter)
    return x.reshape(flow.dim) if single else x


def solve_ivp(flow, t0, x0, targets, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Solutions at ``targets`` of the IVP ``x(t0) = x0`` under ``flow``.

    For ``t0 != 0`` the initial value is first mapped back to time zero with
    the inverse, then pushed forward to every target.
    """
    x0 = as_tensor(x0)
    if float(t0) == 0.0:
        base = x0
    else:
        base = flow_inverse(flow, t0, x0, tol=tol, max_iter=max_iter)
    return [flow_forward(flow, float(t), base) for t in np.atleast_1d(targets)]


def solve_ivp_batch(flow, t0, x0, t1, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Row-wise version: ``x0[i]`` given at ``t0[i]``, evaluated at ``t1[i]``."""
    t0 = np.asarray(t0, dtype=float).reshape(-1, 1)
    x0 = as_tensor(x0)
    if np.all(t0 == 0.0):
        base = x0
    else:
        base = flow.inverse(Tensor(t0), x0, tol=tol, max_iter=max_iter)
    return flow.forward(as_tensor(t1).reshape(x0.shape[0], 1), base)


def autonomous_penalty(flow, t, x, rng):
    """Mean squared violation of ``F(t1 + t2, x) = F(t2, F(t1, x))``.

    Each ``t_i`` is split at a uniform point of ``[0, t_i]``. The caller
    scales the result by its penalty weight.
    """
    t, x, _ = _batch(t, x)
    if np.any(t.data < 0):
        raise ValueError("autonomous penalty needs non-negative times")
    frac = rng.uniform(size=t.shape)
    t1 = t * frac
    t2 = t - t1
    direct = flow.forward(t, x)
    composed = flow.forward(t2, flow.forward(t1, x))
    return ((direct - composed) ** 2).sum(axis=-1).mean()
