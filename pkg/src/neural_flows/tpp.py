"""Temporal point processes with continuous-time hidden states.

A sequence of arrival times ``t_1 < ... < t_n`` is encoded by evolving a
hidden state between events (a flow, an ODE, or nothing) and updating it with
a GRU cell at every event. Two decoders turn the states into likelihoods:

* :class:`MixtureDecoder`: log-normal mixture over the next inter-event time,
  integrated in closed form.
* :class:`IntensityHead`: ``lambda(t) = softplus(g(h(t)))`` with the
  compensator estimated by stratified Monte Carlo.

Batches hold equal-length sequences: inter-event times ``tau`` of shape
``(B, L)`` and an optional 0/1 ``mask`` for padded positions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, as_tensor, logsumexp, stack, where
from .flows import build_flow
from .nn import MLP, Linear, Module
from .ode import SolverConfig, VectorField, batched_solve
from .serialize import register

ENCODER_KINDS = ("discrete-gru", "gru-flow", "resnet-flow", "coupling-flow", "jump-ode")
SCALE_FLOOR = 1e-6
LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


@dataclass
class InterEventTransform:
    """``y = tau / mean`` (optional) followed by ``log(y + 1)`` (optional)."""

    mean: float = 1.0
    normalize: bool = True
    log_transform: bool = False

    def __post_init__(self):
        if not self.mean > 0:
            raise ValueError("mean inter-event time must be positive")

    @classmethod
    def fit(cls, sequences, normalize=True, log_transform=False):
        taus = np.concatenate([np.diff(np.concatenate([[0.0], s])) for s in sequences])
        return cls(float(taus.mean()), normalize, log_transform)

    def __call__(self, tau):
        """Return ``(y, log|dy/dtau|)`` elementwise."""
        tau = np.asarray(tau, dtype=float)
        y = tau / self.mean if self.normalize else tau.copy()
        logdet = np.full(tau.shape, -np.log(self.mean) if self.normalize else 0.0)
        if self.log_transform:
            logdet = logdet - np.log1p(y)
            y = np.log1p(y)
        return y, logdet


class GRUCell(Module):
    """Standard GRU update ``h' = (1 - z) n + z h``."""

    def __init__(self, n_in, hidden, rng):
        self.hidden = hidden
        self.x2h = Linear(n_in, 3 * hidden, rng)
        self.h2h = Linear(hidden, 3 * hidden, rng)

    def __call__(self, x, h):
        gx = self.x2h(x)
        gh = self.h2h(h)
        H = self.hidden
        z = (gx[:, :H] + gh[:, :H]).sigmoid()
        r = (gx[:, H : 2 * H] + gh[:, H : 2 * H]).sigmoid()
        n = (gx[:, 2 * H :] + r * gh[:, 2 * H :]).tanh()
        return (1.0 - z) * n + z * h


class EventEncoder(Module):
    """Hidden-state recurrence over events.

    ``kind`` selects how the state moves between events: ``discrete-gru``
    keeps it fixed, the ``*-flow`` kinds apply one flow evaluation
    ``F(tau, h)`` and ``jump-ode`` integrates a neural vector field.
    """

    def __init__(self, kind, hidden, rng, flow_hidden=(64, 64), n_layers=1, solver=None):
        if kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {kind!r}; expected one of {ENCODER_KINDS}")
        self.kind = kind
        self.hidden = hidden
        self.flow_hidden = list(flow_hidden)
        self.n_layers = n_layers
        self.h0_raw = Tensor(rng.normal(scale=0.1, size=hidden), requires_grad=True)
        self.cell = GRUCell(1, hidden, rng)
        self.solver = solver or SolverConfig("euler", steps=20)
        self.evolution = None
        if kind.endswith("-flow"):
            arch = kind.split("-")[0]
            self.evolution = build_flow(arch, hidden, n_layers, self.flow_hidden, rng)
        elif kind == "jump-ode":
            self.evolution = VectorField(hidden, self.flow_hidden, rng)

    def initial(self, batch):
        # tanh keeps the start inside (-1, 1)^h, which the GRU flow preserves
        return self.h0_raw.tanh().reshape(1, self.hidden) * np.ones((batch, 1))

    def evolve(self, tau, h):
        """State just before the next event, ``tau`` of shape ``(B, 1)`` in model time."""
        if self.evolution is None:
            return h
        if self.kind == "jump-ode":
            return batched_solve(self.evolution, h, tau.data if isinstance(tau, Tensor) else tau, self.solver).x
        return self.evolution.forward(as_tensor(tau), h)

    def architecture(self):
        return {
            "kind": "event_encoder",
            "encoder": self.kind,
            "hidden": self.hidden,
            "flow_hidden": self.flow_hidden,
            "n_layers": self.n_layers,
            "solver": vars(self.solver),
        }


def _check_tau(tau, mask):
    tau = np.atleast_2d(np.asarray(tau, dtype=float))
    mask = np.ones_like(tau) if mask is None else np.asarray(mask, dtype=float)
    if np.any((tau <= 0) & (mask > 0)):
        raise ValueError("arrival times must be strictly increasing (non-positive inter-event time)")
    return tau, mask


def encode_sequence(enc: EventEncoder, tau, y=None, mask=None):
    """Return ``[h_0, h_1, ..., h_L]`` for a batch; ``h_i`` has seen events ``1..i``.

    ``tau`` are model-time inter-event gaps ``(B, L)`` used for evolution and
    ``y`` the features fed to the cell (defaults to ``tau``). Padded steps
    (``mask == 0``) leave the state unchanged.
    """
    tau, mask = _check_tau(tau, mask)
    y = tau if y is None else np.atleast_2d(np.asarray(y, dtype=float))
    B, L = tau.shape
    h = enc.initial(B)
    states = [h]
    for i in range(L):
        ti = tau[:, i : i + 1]
        h_bar = enc.evolve(Tensor(np.where(mask[:, i : i + 1] > 0, ti, 0.0)), h)
        h_new = enc.cell(Tensor(y[:, i : i + 1]), h_bar)
        if mask[:, i].all():
            h = h_new
        else:
            h = where(mask[:, i : i + 1] > 0, h_new, h)
        states.append(h)
    return states


def times_to_tau(times):
    times = np.asarray(times, dtype=float)
    tau = np.diff(np.concatenate([[0.0], times]))
    if np.any(tau <= 0):
        raise ValueError("arrival times must be strictly increasing and positive")
    return tau


class MixtureDecoder(Module):
    """``h -> (logits, means, raw scales)`` of a ``K``-component log-normal mixture."""

    def __init__(self, hidden, n_components, rng):
        self.hidden = hidden
        self.n_components = n_components
        self.net = Linear(hidden, 3 * n_components, rng)

    def params(self, h):
        out = self.net(h)
        K = self.n_components
        logits = out[:, :K]
        log_w = logits - logsumexp(logits, axis=-1, keepdims=True)
        means = out[:, K : 2 * K]
        scales = out[:, 2 * K :].softplus() + SCALE_FLOOR
        return log_w, means, scales

    def log_prob(self, h, y):
        """Log-density of ``y > 0`` of shape ``(B, 1)``."""
        return lognormal_mixture_log_prob(*self.params(h), y)

    def architecture(self):
        return {"kind": "mixture_decoder", "hidden": self.hidden, "n_components": self.n_components}


def lognormal_mixture_log_prob(log_w, means, scales, y):
    y = as_tensor(y)
    log_y = y.log()
    z = (log_y - means) / scales
    comp = -0.5 * z * z - scales.log() - LOG_SQRT_2PI - log_y
    return logsumexp(log_w + comp, axis=-1)


class IntensityHead(Module):
    """``lambda(t) = softplus(g(h(t)))``, always positive."""

    def __init__(self, hidden, rng, net_hidden=(64,)):
        self.hidden = hidden
        self.net_hidden = list(net_hidden)
        self.net = MLP(hidden, self.net_hidden, 1, rng, activation="tanh")

    def __call__(self, h):
        return self.net(h).softplus() + SCALE_FLOOR

    def architecture(self):
        return {"kind": "intensity_head", "hidden": self.hidden, "net_hidden": self.net_hidden}


class TPPModel(Module):
    """Encoder plus one decoder; the unit that gets trained and serialized."""

    def __init__(self, encoder, decoder, transform: InterEventTransform):
        self.encoder = encoder
        self.decoder = decoder
        self.transform = transform

    def architecture(self):
        return {
            "kind": "tpp",
            "encoder": self.encoder.architecture(),
            "decoder": self.decoder.architecture(),
            "transform": vars(self.transform),
        }


def build_tpp(encoder="gru-flow", decoder="mixture", hidden=64, flow_hidden=(64, 64), n_layers=1,
              n_components=8, rng=None, transform=None, solver=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    enc = EventEncoder(encoder, hidden, rng, flow_hidden, n_layers, solver)
    if decoder == "mixture":
        dec = MixtureDecoder(hidden, n_components, rng)
    elif decoder == "continuous":
        dec = IntensityHead(hidden, rng, (flow_hidden[0],))
    else:
        raise ValueError(f"unknown decoder {decoder!r}")
    return TPPModel(enc, dec, transform or InterEventTransform())


@register("tpp")
def _build_tpp(arch):
    enc, dec = arch["encoder"], arch["decoder"]
    solver = SolverConfig(**enc["solver"]) if enc.get("solver") else None
    return build_tpp(
        enc["encoder"],
        "mixture" if dec["kind"] == "mixture_decoder" else "continuous",
        enc["hidden"],
        enc["flow_hidden"],
        enc["n_layers"],
        dec.get("n_components", 8),
        transform=InterEventTransform(**arch["transform"]),
        solver=solver,
    )


def pad_sequences(sequences):
    """Stack variable-length arrival sequences into ``(tau, mask)``."""
    L = max(len(s) for s in sequences)
    tau = np.ones((len(sequences), L))
    mask = np.zeros((len(sequences), L))
    for i, s in enumerate(sequences):
        tau[i, : len(s)] = times_to_tau(s)
        mask[i, : len(s)] = 1.0
    return tau, mask


def nll_mixture(model: TPPModel, sequences):
    """Mean per-event NLL in raw time units (change of variables included)."""
    if not len(sequences) or any(len(s) == 0 for s in sequences):
        raise ValueError("need non-empty sequences")
    tau, mask = pad_sequences(sequences)
    y, logdet = model.transform(tau)
    states = encode_sequence(model.encoder, y, y, mask)
    h_prev = stack(states[:-1], axis=1)  # (B, L, H)
    B, L = tau.shape
    flat_h = h_prev.reshape(B * L, model.encoder.hidden)
    lp = model.decoder.log_prob(flat_h, y.reshape(B * L, 1)).reshape(B, L)
    total = ((lp + logdet) * mask).sum()
    return -total / float(mask.sum())


def nll_continuous(model: TPPModel, sequences, horizon=None, n_mc=20, rng=None):
    """``-sum log lambda(t_i) + integral_0^T lambda`` summed over the batch.

    The state between events is ``F(s - t_i, h_i)``, so every Monte Carlo
    point is one flow evaluation and all of them run as one batch. Times are
    in model units (``transform`` applied without the log step). ``horizon``
    defaults to each sequence's last arrival.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    enc = model.encoder
    if enc.kind == "discrete-gru":
        raise ValueError("the continuous intensity needs an evolving encoder")
    rng = rng if rng is not None else np.random.default_rng(0)
    tau, mask = pad_sequences(sequences)
    scale = model.transform.mean if model.transform.normalize else 1.0
    tau_m = tau / scale
    B, L = tau.shape
    # final open interval (t_n, T]
    tail = np.zeros((B, 1))
    if horizon is not None:
        horizon = np.broadcast_to(np.asarray(horizon, dtype=float), (B,))
        last = np.array([s[-1] for s in sequences])
        if np.any(horizon < last):
            raise ValueError("horizon precedes the last event")
        tail[:, 0] = (horizon - last) / scale
    states = encode_sequence(enc, tau_m, tau_m, mask)
    H = enc.hidden
    h_prev = stack(states, axis=1)  # (B, L+1, H)
    gaps = np.concatenate([tau_m * mask, tail], axis=1)  # (B, L+1)
    # intensity at each event, from the state evolved across the preceding gap
    h_ev = enc.evolve(Tensor(tau_m.reshape(B * L, 1)), h_prev[:, :L].reshape(B * L, H))
    log_lam = model.decoder(h_ev).log().reshape(B, L)
    # stratified samples inside every gap
    u = (np.arange(n_mc)[None, None, :] + rng.uniform(size=(B, L + 1, n_mc))) / n_mc
    s = (u * gaps[:, :, None]).reshape(-1, 1)
    h_rep = (h_prev.reshape(B, L + 1, 1, H) * np.ones((1, 1, n_mc, 1))).reshape(-1, H)
    lam = model.decoder(enc.evolve(Tensor(s), h_rep)).reshape(B, L + 1, n_mc)
    integral = (lam.mean(axis=-1) * gaps).sum()
    nll_model = -(log_lam * mask).sum() + integral
    # intensities in raw time are lambda_model / scale
    return nll_model + float(mask.sum()) * np.log(scale)


def intensity_integral(model: TPPModel, h, gap, n_mc, rng):
    """MC estimate of the compensator over one gap for a batch of states (used in tests)."""
    u = (np.arange(n_mc)[None, :] + rng.uniform(size=(h.shape[0], n_mc))) / n_mc
    gap = np.asarray(gap, dtype=float).reshape(-1, 1)
    s = (u * gap).reshape(-1, 1)
    H = h.shape[1]
    h_rep = (as_tensor(h).reshape(h.shape[0], 1, H) * np.ones((1, n_mc, 1))).reshape(-1, H)
    lam = model.decoder(model.encoder.evolve(Tensor(s), h_rep)).reshape(h.shape[0], n_mc)
    return lam.mean(axis=-1) * gap.reshape(-1)
