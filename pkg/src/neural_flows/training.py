"""Training loops and evaluation for every experiment kind."""
from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .autograd import Tape, Tensor, backward, no_grad
from .config import ExperimentConfig
from .density import (
    TimeVaryingCNF,
    TimeVaryingCouplingDensity,
    cnf_log_prob,
    coupling_log_prob,
    grid_integral,
)
from .flows import FlowStack, autonomous_penalty, build_flow, solve_ivp_batch
from .nn import Module
from .ode import SolverConfig, VectorField, batched_solve
from .optim import AdamState, adam_step
from .serialize import build, register
from .tpp import InterEventTransform, build_tpp, nll_continuous, nll_mixture

REPORT_VERSION = 1
REPORT_COLUMNS = (
    "report_version",
    "epoch",
    "train_loss",
    "val_loss",
    "lr",
    "epoch_seconds",
    "wall_seconds",
    "solver_evals",
)
DENSITY_TIMES = (0.25, 0.5, 1.0)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# trajectory models


class FlowRegressor(Module):
    """Predicts ``x(t)`` from ``x(t0)`` with one flow evaluation (plus an inverse if ``t0 != 0``)."""

    kind = "flow_regressor"
    n_evals = 0

    def __init__(self, flow: FlowStack):
        self.flow = flow
        self.dim = flow.dim

    def predict(self, x0, t0, t):
        return solve_ivp_batch(self.flow, t0, x0, t)

    def architecture(self):
        return {"kind": self.kind, "flow": self.flow.architecture()}


class ODERegressor(Module):
    """Neural ODE baseline: integrates a learned field from ``t0`` to ``t`` row by row."""

    kind = "ode_regressor"

    def __init__(self, field_: VectorField, solver: SolverConfig):
        self.field = field_
        self.solver = solver
        self.dim = field_.dim
        self.n_evals = 0

    def predict(self, x0, t0, t):
        sol = batched_solve(self.field, x0, t, self.solver, t0=t0)
        self.n_evals += sol.n_evals
        return sol.x

    def architecture(self):
        return {"kind": self.kind, "field": self.field.architecture(), "solver": vars(self.solver)}


@register("flow_regressor")
def _build_flow_regressor(arch):
    return FlowRegressor(build(arch["flow"]))


@register("ode_regressor")
def _build_ode_regressor(arch):
    return ODERegressor(build(arch["field"]), SolverConfig(**arch["solver"]))


def solver_config(cfg: ExperimentConfig):
    return SolverConfig(cfg.solver, steps=cfg.steps, rtol=cfg.rtol, atol=cfg.atol)


def build_model(cfg: ExperimentConfig, dim=None, transform=None):
    rng = np.random.default_rng([cfg.seed, 1])
    if cfg.experiment in ("trajectory", "stiff"):
        if cfg.model == "ode":
            return ODERegressor(VectorField(dim, cfg.hidden, rng), solver_config(cfg))
        if cfg.model == "linear":
            return FlowRegressor(build_flow("linear", dim, cfg.n_layers, rng=rng))
        flow = build_flow(cfg.model, dim, cfg.n_layers, cfg.hidden, rng, embedding=cfg.embedding,
                          n_features=cfg.n_features)
        return FlowRegressor(flow)
    if cfg.experiment == "tpp":
        return build_tpp(cfg.model, cfg.decoder, cfg.state_dim, cfg.hidden, cfg.n_layers, cfg.n_components,
                         rng, transform, solver_config(cfg))
    if cfg.model == "coupling":
        return TimeVaryingCouplingDensity(2, 2 * cfg.n_layers, cfg.hidden, rng, embedding=cfg.embedding)
    return TimeVaryingCNF(VectorField(2, cfg.hidden, rng), solver_config(cfg))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DensitySplits:
    x: dict
    t: dict


def make_dataset(cfg: ExperimentConfig):
    if cfg.experiment == "trajectory":
        return D.gen_trajectories(cfg.dataset, cfg.n_samples, cfg.seed)
    if cfg.experiment == "stiff":
        return D.gen_stiff(n=cfg.n_samples, seed=cfg.seed)
    if cfg.experiment == "tpp":
        return D.gen_tpp(cfg.dataset, cfg.n_samples, cfg.seq_len, cfg.seed)
    ds = D.gen_density2d(cfg.n_samples, cfg.seed)
    # each static sample gets its own time in U(0, 1)
    rng = np.random.default_rng([cfg.seed, 5])
    times = rng.uniform(0.0, 1.0, size=cfg.n_samples)
    ids = D._split_ids(cfg.n_samples, rng)
    return DensitySplits({k: ds.samples[v] for k, v in ids.items()}, {k: times[v] for k, v in ids.items()})


# ---------------------------------------------------------------------------
# losses


def _sub(sp: D.TrajectorySplit, idx):
    return D.TrajectorySplit(sp.x0[idx], sp.t0[idx], sp.t[idx], sp.targets[idx])


def trajectory_loss(model, sp: D.TrajectorySplit):
    x0, t0, t, y = sp.flat()
    pred = model.predict(Tensor(x0), t0, Tensor(t.reshape(-1, 1)))
    return ((pred - y) ** 2).mean()


def tpp_loss(model, sequences, n_mc, rng):
    if model.decoder.__class__.__name__ == "MixtureDecoder":
        return nll_mixture(model, sequences)
    n_events = sum(len(s) for s in sequences)
    return nll_continuous(model, sequences, n_mc=n_mc, rng=rng) / float(n_events)


def density_loss(model, x, t):
    if isinstance(model, TimeVaryingCNF):
        return -cnf_log_prob(model, Tensor(x), t).mean()
    return -coupling_log_prob(model, Tensor(x), t).mean()


# ---------------------------------------------------------------------------
# evaluation


def _chunks(n, size):
    for i in range(0, n, size):
        yield np.arange(i, min(n, i + size))


def evaluate(model, cfg: ExperimentConfig, dataset, split, chunk=200):
    """Loss of ``model`` on one split, computed without recording gradients."""
    with no_grad():
        if cfg.experiment in ("trajectory", "stiff"):
            sp = dataset[split]
            total, count = 0.0, 0
            for idx in _chunks(sp.n, chunk):
                sub = _sub(sp, idx)
                n = sub.targets.size
                total += trajectory_loss(model, sub).item() * n
                count += n
            return total / count
        if cfg.experiment == "tpp":
            seqs = dataset.select(split)
            if not seqs:
                raise ValueError(f"split {split!r} is empty")
            rng = np.random.default_rng([cfg.seed, 4])
            total, count = 0.0, 0
            for idx in _chunks(len(seqs), chunk):
                part = [seqs[i] for i in idx]
                n = sum(len(s) for s in part)
                total += tpp_loss(model, part, cfg.n_mc, rng).item() * n
                count += n
            return total / count
        x, t = dataset.x[split], dataset.t[split]
        total = 0.0
        for idx in _chunks(len(x), 1000):
            total += density_loss(model, x[idx], t[idx]).item() * len(idx)
        return total / len(x)


def final_metrics(model, cfg: ExperimentConfig, dataset):
    metrics = {}
    if cfg.experiment in ("trajectory", "stiff"):
        for split in D.SPLITS:
            if split in dataset.splits:
                metrics[f"{split}_mse"] = evaluate(model, cfg, dataset, split)
        metrics["mse_display_scale"] = 1e-2
    elif cfg.experiment == "tpp":
        for split in ("train", "val", "test"):
            metrics[f"{split}_nll"] = evaluate(model, cfg, dataset, split)
        idx = dataset.split == "test"
        counts = np.array([len(s) for s in dataset.sequences])[idx]
        gt = float(np.sum(dataset.nll[idx] * counts) / counts.sum())
        metrics["test_ground_truth_nll"] = gt
        metrics["test_nll_gap"] = metrics["test_nll"] - gt
        metrics["nll_unit"] = "per event, raw time"
    else:
        for split in ("train", "val", "test"):
            metrics[f"{split}_nll"] = evaluate(model, cfg, dataset, split)
        fn = _density_fn(model)
        for t in DENSITY_TIMES:
            metrics[f"grid_integral_t{t}"] = grid_integral(fn, t)
    return metrics


def _density_fn(model):
    if isinstance(model, TimeVaryingCNF):
        return lambda p, t: cnf_log_prob(model, p, t)
    return lambda p, t: coupling_log_prob(model, p, t)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RunResult:
    model: object
    rows: list
    metrics: dict
    dataset: object
    config: ExperimentConfig
    environment: dict = field(default_factory=dict)


def environment_stamp():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "system": platform.system(),
    }


def _batches(cfg, dataset, rng):
    """Yield training batches for one epoch in a seeded order."""
    if cfg.experiment in ("trajectory", "stiff"):
        sp = dataset["train"]
        perm = rng.permutation(sp.n)
        for i in range(0, sp.n, cfg.batch_size):
            yield _sub(sp, np.sort(perm[i : i + cfg.batch_size]))
    elif cfg.experiment == "tpp":
        seqs = dataset.select("train")
        perm = rng.permutation(len(seqs))
        for i in range(0, len(seqs), cfg.batch_size):
            yield [seqs[j] for j in perm[i : i + cfg.batch_size]]
    else:
        x, t = dataset.x["train"], dataset.t["train"]
        perm = rng.permutation(len(x))
        for i in range(0, len(x), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            yield x[idx], t[idx]


def _batch_loss(model, cfg, batch, rngs):
    if cfg.experiment in ("trajectory", "stiff"):
        loss = trajectory_loss(model, batch)
        if cfg.gamma > 0 and isinstance(model, FlowRegressor):
            x0, _, t, _ = batch.flat()
            pen = autonomous_penalty(model.flow, t.reshape(-1, 1), x0, rngs["penalty"])
            loss = loss + cfg.gamma * pen
        return loss
    if cfg.experiment == "tpp":
        return tpp_loss(model, batch, cfg.n_mc, rngs["mc"])
    return density_loss(model, *batch)


def train(cfg: ExperimentConfig, dataset=None, model=None, log=None):
    """Train per ``cfg``; returns the best-on-validation model and the report."""
    dataset = dataset if dataset is not None else make_dataset(cfg)
    if model is None:
        if cfg.experiment in ("trajectory", "stiff"):
            model = build_model(cfg, dim=dataset.dim)
        elif cfg.experiment == "tpp":
            model = build_model(cfg, transform=InterEventTransform.fit(dataset.select("train")))
        else:
            model = build_model(cfg)
    params = model.parameters()
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rngs = {
        "batch": np.random.default_rng([cfg.seed, 2]),
        "penalty": np.random.default_rng([cfg.seed, 3]),
        "mc": np.random.default_rng([cfg.seed, 6]),
    }

    val0 = evaluate(model, cfg, dataset, "val")
    rows = [_row(0, evaluate(model, cfg, dataset, "train"), val0, cfg.lr, 0.0, 0.0, 0)]
    if log:
        log(rows[-1])
    best_val, best_params, since_best = val0, [p.data.copy() for p in params], 0
    wall = 0.0
    for epoch in range(1, cfg.epochs + 1):
        state.lr = cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.lr_decay_every)
        evals_before = getattr(model, "n_evals", 0)
        losses = []
        start = time.perf_counter()
        for b, batch in enumerate(_batches(cfg, dataset, rngs["batch"])):
            try:
                with Tape() as tape:
                    loss = _batch_loss(model, cfg, batch, rngs)
            except FloatingPointError as e:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {b}: {e}") from e
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = backward(tape, loss, params)
            adam_step(params, grads, state)
            model.project()
            losses.append(loss.item())
        seconds = time.perf_counter() - start
        wall += seconds
        evals = getattr(model, "n_evals", 0) - evals_before
        val = evaluate(model, cfg, dataset, "val")
        rows.append(_row(epoch, float(np.mean(losses)), val, state.lr, seconds, wall, evals))
        if log:
            log(rows[-1])
        if val < best_val:
            best_val, best_params, since_best = val, [p.data.copy() for p in params], 0
        else:
            since_best += 1
            if cfg.patience and since_best >= cfg.patience:
                break
    for p, v in zip(params, best_params):
        p.data = v
    metrics = final_metrics(model, cfg, dataset)
    metrics["final_train_loss"] = evaluate(model, cfg, dataset, "train")
    metrics["best_val_loss"] = best_val
    metrics["epochs_run"] = rows[-1]["epoch"]
    metrics["config_hash"] = cfg.hash()
    return RunResult(model, rows, metrics, dataset, cfg, environment_stamp())


def _row(epoch, train_loss, val_loss, lr, seconds, wall, evals):
    return {
        "report_version": REPORT_VERSION,
        "epoch": epoch,
        "train_loss": train_loss,
        "val_loss": val_loss,
        "lr": lr,
        "epoch_seconds": seconds,
        "wall_seconds": wall,
        "solver_evals": evals,
    }
