"""Linear layers, MLPs and spectral normalization on top of :mod:`autograd`."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor, as_tensor, concat

ACTIVATIONS = ("tanh", "elu", "sigmoid", "identity")
LIPSCHITZ_ONE = ("tanh", "identity")


def _apply(kind, x):
    if kind == "tanh":
        return x.tanh()
    if kind == "elu":
        return x.elu()
    if kind == "sigmoid":
        return x.sigmoid()
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def _derivative(kind, pre, post):
    """Activation derivative as a differentiable tensor (needed by ``jvp``)."""
    if kind == "tanh":
        return 1.0 - post * post
    if kind == "sigmoid":
        return post * (1.0 - post)
    if kind == "identity":
        return None
    if kind == "elu":
        from .autograd import where

        return where(pre.data > 0, Tensor(np.ones(pre.shape)), post + 1.0)
    raise ValueError(f"unknown activation {kind!r}")


class Module:
    """Container that discovers its parameters from attributes, in definition order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield item
                    yield from item.modules()

    def project(self, iters=1):
        """Re-apply weight constraints after an optimizer step."""
        for m in self.modules():
            if isinstance(m, Linear):
                m.project(iters)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


class PowerIterationState:
    """Persistent left/right singular vector estimates for one weight."""

    def __init__(self, u, v):
        self.u = u
        self.v = v


def spectral_normalize(w, coeff=0.9, iters=20, state=None, tol=1e-10, max_iter=1000, rng=None):
    """Rescale ``w`` so its largest singular value is at most ``coeff``.

    Runs at least ``iters`` power iterations, warm-started from ``state``, then
    keeps iterating until the singular value estimate changes by less than
    ``tol`` (relative). Returns ``(w_normalized, sigma_estimate, state)``.
    A zero matrix is returned unchanged.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not 0.0 < coeff:
        raise ValueError("coeff must be positive")
    w = np.asarray(w, dtype=np.float64)
    if not np.any(w):
        return w.copy(), 0.0, state
    if state is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        u = rng.normal(size=w.shape[0])
        state = PowerIterationState(u / np.linalg.norm(u), None)
    u = state.u
    sigma = 0.0
    for k in range(max_iter):
        v = w.T @ u
        v /= np.linalg.norm(v)
        wu = w @ v
        new_sigma = float(np.linalg.norm(wu))
        u = wu / new_sigma
        converged = abs(new_sigma - sigma) <= tol * new_sigma
        sigma = new_sigma
        if k + 1 >= iters and converged:
            break
    state.u, state.v = u, v
    if sigma > coeff:
        return w * (coeff / sigma), sigma, state
    return w.copy(), sigma, state


class Linear(Module):
    """Affine map ``x @ W.T + b`` with an optional spectral-norm coefficient."""

    def __init__(self, n_in, n_out, rng, spectral_coeff=None, init_scale=1.0, zero=False):
        self.n_in, self.n_out = n_in, n_out
        self.spectral_coeff = spectral_coeff
        if zero:
            w = np.zeros((n_out, n_in))
        else:
            bound = init_scale * np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
        self.weight = Tensor(w, requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, name="bias")
        self._power = None
        if spectral_coeff is not None:
            self.project(iters=20, rng=rng)

    def project(self, iters=1, rng=None):
        """Re-apply the spectral constraint to the stored weight in place."""
        if self.spectral_coeff is None:
            return
        w, _, self._power = spectral_normalize(
            self.weight.data, self.spectral_coeff, iters, self._power, rng=rng
        )
        self.weight.data = w

    def __call__(self, x):
        return x @ self.weight.T + self.bias


class MLP(Module):
    """Stack of :class:`Linear` layers.

    ``activation`` is applied after every hidden layer and ``final_activation``
    after the output layer. When ``spectral_coeff`` is set every layer is
    constrained, which makes the whole network ``coeff**L``-Lipschitz provided
    the activations are 1-Lipschitz.
    """

    def __init__(
        self,
        n_in,
        hidden,
        n_out,
        rng,
        activation="tanh",
        final_activation="identity",
        spectral_coeff=None,
        zero_last=False,
    ):
        if activation not in ACTIVATIONS or final_activation not in ACTIVATIONS:
            raise ValueError(f"activations must be among {ACTIVATIONS}")
        if spectral_coeff is not None and (
            activation not in LIPSCHITZ_ONE or final_activation not in LIPSCHITZ_ONE
        ):
            raise ValueError("contractive networks need tanh or identity activations")
        sizes = [n_in, *hidden, n_out]
        self.hidden = list(hidden)
        self.activation = activation
        self.final_activation = final_activation
        self.spectral_coeff = spectral_coeff
        self.layers = [
            Linear(
                a,
                b,
                rng,
                spectral_coeff=spectral_coeff,
                zero=zero_last and i == len(sizes) - 2,
            )
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def _kinds(self):
        n = len(self.layers)
        return [self.activation if i < n - 1 else self.final_activation for i in range(n)]

    def __call__(self, x):
        x = as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected last dimension {self.n_in}, got {x.shape[-1]}")
        for layer, kind in zip(self.layers, self._kinds()):
            x = _apply(kind, layer(x))
        return x

    def jvp(self, x, tangent):
        """Return ``(net(x), J_net(x) @ tangent)`` by forward-mode propagation.

        Both outputs are ordinary tensors, so they can be differentiated again
        with respect to the weights (used for exact CNF traces).
        """
        x, tangent = as_tensor(x), as_tensor(tangent)
        for layer, kind in zip(self.layers, self._kinds()):
            pre = layer(x)
            tangent = tangent @ layer.weight.T
            x = _apply(kind, pre)
            deriv = _derivative(kind, pre, x)
            if deriv is not None:
                tangent = tangent * deriv
        return x, tangent


def time_input(t, x):
    """Concatenate the raw time column to the state: ``(n, 1) + (n, d) -> (n, d+1)``."""
    return concat([as_tensor(t), as_tensor(x)], axis=-1)
