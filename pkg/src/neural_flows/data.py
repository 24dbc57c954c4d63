"""Seeded synthetic datasets: trajectories, stiff pairs, event sequences, 2-D densities.

Every generator is a pure function of its arguments; the same seed always
produces the same arrays.

File formats
------------
Trajectory CSV, one row per observation::

    split,series_id,t0,t,x_0..x_{d-1},target_0..target_{d-1}

``x_*`` is the initial condition given at time ``t0`` and ``target_*`` the
state at time ``t``.

Event CSV, one row per event::

    split,series_id,event_index,t

Binary container (little endian)::

    b"NFDS" | u16 version | u32 header_len | JSON header | float64 arrays

The JSON header lists every array with its name, shape and byte offset
relative to the end of the header.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .linalg import matrix_exp
from .ode import FunctionField, SolverConfig, batched_solve, stiff_reference

SPLITS = ("train", "val", "test", "extrapolate-space", "extrapolate-time")
PERIODIC = ("sine", "sawtooth", "square", "triangle")
TPP_KINDS = ("poisson", "renewal", "hawkes1", "hawkes2")
SINK_MATRIX = np.array([[-4.0, 10.0], [-3.0, 2.0]])

# Hawkes kernels: intensity mu + sum_i sum_j alpha_j beta_j exp(-beta_j (t - t_i))
HAWKES = {
    "hawkes1": dict(mu=0.2, alpha=(0.8,), beta=(1.0,)),
    "hawkes2": dict(mu=0.2, alpha=(0.4, 0.4), beta=(1.0, 20.0)),
}
# renewal inter-event times: log-normal with mean 1 and standard deviation 6
RENEWAL_MEAN, RENEWAL_STD = 1.0, 6.0

MAGIC = b"NFDS"
BINARY_VERSION = 1


@dataclass
class TrajectorySplit:
    x0: np.ndarray  # (n, d) initial condition
    t0: np.ndarray  # (n,) time at which x0 is given
    t: np.ndarray  # (n, m) query times
    targets: np.ndarray  # (n, m, d)

    def __post_init__(self):
        if not np.isfinite(self.targets).all():
            raise ValueError("non-finite targets")

    @property
    def n(self):
        return self.x0.shape[0]

    def flat(self):
        """Flatten to per-observation arrays ``(x0, t0, t, target)``."""
        n, m = self.t.shape
        x0 = np.repeat(self.x0, m, axis=0)
        t0 = np.repeat(self.t0, m)
        return x0, t0, self.t.reshape(-1), self.targets.reshape(n * m, -1)


@dataclass
class TrajectoryDataset:
    name: str
    dim: int
    splits: dict
    params: dict = field(default_factory=dict)

    def __getitem__(self, split):
        if split not in self.splits:
            raise KeyError(f"dataset {self.name!r} has no split {split!r}; available: {sorted(self.splits)}")
        return self.splits[split]


@dataclass
class EventSequenceDataset:
    kind: str
    sequences: list  # list of 1-D arrays of arrival times
    split: np.ndarray  # split tag per sequence
    params: dict = field(default_factory=dict)
    nll: np.ndarray | None = None  # ground-truth per-event NLL per sequence

    def select(self, split):
        idx = np.flatnonzero(self.split == split)
        return [self.sequences[i] for i in idx]

    def ground_truth_nll(self):
        """Mean per-event NLL of the generating process over all sequences."""
        if self.nll is None:
            return None
        counts = np.array([len(s) for s in self.sequences])
        return float(np.sum(self.nll * counts) / counts.sum())


@dataclass
class DensityDataset2D:
    samples: np.ndarray  # (n, 2)
    component: np.ndarray  # 0 = Gaussian blob, 1 = circle
    params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# trajectories


def periodic_flow(kind, t, x):
    """Closed-form flows of the periodic signals."""
    t = np.asarray(t, dtype=float)
    if kind == "sine":
        return x + np.sin(t)
    if kind == "sawtooth":
        return x + t - np.floor(t)
    if kind == "square":
        return x + np.sign(np.sin(t))
    if kind == "triangle":
        # integral of sign(sin u) on [0, t]: rises to pi, falls back to 0, period 2 pi
        return x + np.pi - np.abs(np.mod(t, 2 * np.pi) - np.pi)
    raise ValueError(f"unknown periodic kind {kind!r}")


def _split_ids(n, rng, fractions=(0.8, 0.1, 0.1)):
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_val = max(n_val, 1)
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }


def _times(rng, n, m, t_range):
    return np.sort(rng.uniform(t_range[0], t_range[1], size=(n, m)), axis=1)


def _build_splits(rng, n, m, sample_x0, evaluate, t_range, x0_ext, t_ext, n_ext):
    """Shared layout: in-distribution train/val/test plus two extrapolation splits."""
    x0 = sample_x0(rng, n, None)
    t = _times(rng, n, m, t_range)
    targets = evaluate(x0, t)
    splits = {}
    for name, idx in _split_ids(n, rng).items():
        splits[name] = TrajectorySplit(x0[idx], np.zeros(len(idx)), t[idx], targets[idx])
    if n_ext:
        xs = sample_x0(rng, n_ext, x0_ext)
        ts = _times(rng, n_ext, m, t_range)
        splits["extrapolate-space"] = TrajectorySplit(xs, np.zeros(n_ext), ts, evaluate(xs, ts))
        xt = sample_x0(rng, n_ext, None)
        tt = _times(rng, n_ext, m, t_ext)
        splits["extrapolate-time"] = TrajectorySplit(xt, np.zeros(n_ext), tt, evaluate(xt, tt))
    return splits


def gen_periodic(kind, n, seed=0, x_range=(-2.0, 2.0), t_range=(0.0, 10.0), m=50, n_extrapolate=None):
    if kind not in PERIODIC:
        raise ValueError(f"unknown periodic kind {kind!r}; expected one of {PERIODIC}")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    n_ext = max(1, n // 10) if n_extrapolate is None else n_extrapolate

    def sample_x0(r, k, rng_range):
        lo, hi = rng_range or x_range
        return r.uniform(lo, hi, size=(k, 1))

    def evaluate(x0, t):
        return periodic_flow(kind, t, x0)[..., None]

    splits = _build_splits(rng, n, m, sample_x0, evaluate, t_range, (-4.0, 4.0), (t_range[1], 30.0), n_ext)
    return TrajectoryDataset(kind, 1, splits, dict(kind=kind, n=n, seed=seed, m=m))


def gen_linear_system(kind="sink", n=1000, seed=0, t_range=(0.0, 10.0), m=50, n_extrapolate=None):
    if kind != "sink":
        raise ValueError(f"unknown linear system {kind!r}; expected 'sink'")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    n_ext = max(1, n // 10) if n_extrapolate is None else n_extrapolate

    def sample_x0(r, k, rng_range):
        lo, hi = rng_range or (0.0, 1.0)
        return r.uniform(lo, hi, size=(k, 2))

    def evaluate(x0, t):
        props = matrix_exp(SINK_MATRIX * t[..., None, None])  # (n, m, 2, 2)
        return np.einsum("nmij,nj->nmi", props, x0)

    splits = _build_splits(rng, n, m, sample_x0, evaluate, t_range, (1.0, 2.0), (t_range[1], 30.0), n_ext)
    return TrajectoryDataset("sink", 2, splits, dict(kind=kind, n=n, seed=seed, m=m))


def lotka_volterra(t, x):
    x1, x2 = x[..., :1], x[..., 1:]
    return np.concatenate([(2 / 3) * x1 - (2 / 3) * x1 * x2, x1 * x2 - x2], axis=-1)


def lotka_volterra_invariant(x):
    """First integral of :func:`lotka_volterra`."""
    x1, x2 = x[..., 0], x[..., 1]
    return (2 / 3) * np.log(x2) - (2 / 3) * x2 + np.log(x1) - x1


ELLIPSE_SOLVER = SolverConfig("dopri5", rtol=1e-10, atol=1e-12, norm="max", max_steps=200_000)


def gen_ellipse(n, seed=0, t_range=(0.0, 10.0), m=50, n_extrapolate=None):
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    n_ext = max(1, n // 10) if n_extrapolate is None else n_extrapolate
    field_ = FunctionField(lotka_volterra, 2)

    def sample_x0(r, k, rng_range):
        lo, hi = rng_range or (0.0, 1.0)
        return r.uniform(lo, hi, size=(k, 2))

    def evaluate(x0, t):
        k, mm = t.shape
        sol = batched_solve(field_, np.repeat(x0, mm, axis=0), t.reshape(-1), ELLIPSE_SOLVER)
        return sol.x.data.reshape(k, mm, 2)

    splits = _build_splits(rng, n, m, sample_x0, evaluate, t_range, (1.0, 2.0), (t_range[1], 30.0), n_ext)
    return TrajectoryDataset("ellipse", 2, splits, dict(kind="ellipse", n=n, seed=seed, m=m))


def gen_stiff(interval_len=0.125, t_max=15.0, n=1000, seed=0, n_eval=1501):
    """Pairs ``(x(t1), t1) -> x(t1 + interval_len)`` along the stiff reference solution.

    The first training pair starts at ``(t, x) = (0, 0)``. The ``test`` split
    is a single series from ``x0 = 0`` on an even grid over ``[0, t_max]``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 < interval_len < t_max:
        raise ValueError("need 0 < interval_len < t_max")
    rng = np.random.default_rng(seed)
    t1 = rng.uniform(0.0, t_max - interval_len, size=n)
    t1[0] = 0.0
    t2 = t1 + interval_len
    x1 = stiff_reference(t1)[:, None]
    x2 = stiff_reference(t2)[:, None, None]
    perm = rng.permutation(np.arange(1, n))
    n_val = max(1, n // 10) if n > 1 else 0
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(np.concatenate([[0], perm[n_val:]])).astype(int)
    grid = np.linspace(0.0, t_max, n_eval)
    splits = {
        "train": TrajectorySplit(x1[train_idx], t1[train_idx], t2[train_idx, None], x2[train_idx]),
        "val": TrajectorySplit(x1[val_idx], t1[val_idx], t2[val_idx, None], x2[val_idx]),
        "test": TrajectorySplit(np.zeros((1, 1)), np.zeros(1), grid[None], stiff_reference(grid)[None, :, None]),
    }
    return TrajectoryDataset(
        "stiff", 1, splits, dict(kind="stiff", n=n, seed=seed, interval_len=interval_len, t_max=t_max)
    )


def gen_trajectories(kind, n, seed=0, **kw):
    if kind in PERIODIC:
        return gen_periodic(kind, n, seed, **kw)
    if kind == "sink":
        return gen_linear_system("sink", n, seed, **kw)
    if kind == "ellipse":
        return gen_ellipse(n, seed, **kw)
    if kind == "stiff":
        return gen_stiff(n=n, seed=seed, **kw)
    raise ValueError(f"unknown trajectory dataset {kind!r}")


# ---------------------------------------------------------------------------
# temporal point processes


def _renewal_params():
    sigma2 = np.log(1.0 + (RENEWAL_STD / RENEWAL_MEAN) ** 2)
    return np.log(RENEWAL_MEAN) - sigma2 / 2, np.sqrt(sigma2)


def hawkes_thinning(mu, alpha, beta, n_events, rng):
    """Ogata thinning; the bound is the intensity right after the latest point."""
    alpha, beta = np.asarray(alpha, float), np.asarray(beta, float)
    excite = np.zeros_like(alpha)  # sum_i exp(-beta (t - t_i)) per kernel
    t = 0.0
    out = []
    while len(out) < n_events:
        bound = mu + float(np.dot(alpha * beta, excite))
        w = rng.exponential(1.0 / bound)
        excite = excite * np.exp(-beta * w)
        t += w
        lam = mu + float(np.dot(alpha * beta, excite))
        if rng.uniform() * bound <= lam:
            out.append(t)
            excite = excite + 1.0
    return np.array(out)


def hawkes_nll(times, mu, alpha, beta):
    """Per-event NLL of ``times`` on ``[0, times[-1]]`` under the Hawkes intensity."""
    alpha, beta = np.asarray(alpha, float), np.asarray(beta, float)
    excite = np.zeros_like(alpha)
    prev = 0.0
    log_lam = 0.0
    comp = 0.0
    for t in times:
        dt = t - prev
        comp += mu * dt + float(np.dot(alpha, excite * (1.0 - np.exp(-beta * dt))))
        excite = excite * np.exp(-beta * dt)
        log_lam += np.log(mu + float(np.dot(alpha * beta, excite)))
        excite = excite + 1.0
        prev = t
    return (comp - log_lam) / len(times)


def gen_tpp(kind, n_seq=1000, seq_len=100, seed=0, fractions=(0.6, 0.2, 0.2)):
    if kind not in TPP_KINDS:
        raise ValueError(f"unknown TPP kind {kind!r}; expected one of {TPP_KINDS}")
    if n_seq < 1 or seq_len < 1:
        raise ValueError("n_seq and seq_len must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_seq)
    seqs, nll = [], []
    params = dict(kind=kind, n_seq=n_seq, seq_len=seq_len, seed=seed)
    if kind == "renewal":
        m, s = _renewal_params()
        params.update(log_mean=m, log_std=s)
    elif kind.startswith("hawkes"):
        params.update({k: list(v) if isinstance(v, tuple) else v for k, v in HAWKES[kind].items()})
    for child in children:
        rng = np.random.default_rng(child)
        if kind == "poisson":
            tau = rng.exponential(1.0, size=seq_len)
            times = np.cumsum(tau)
            nll.append(times[-1] / seq_len)
        elif kind == "renewal":
            tau = rng.lognormal(m, s, size=seq_len)
            times = np.cumsum(tau)
            nll.append(-np.mean(stats.lognorm.logpdf(tau, s, scale=np.exp(m))))
        else:
            p = HAWKES[kind]
            times = hawkes_thinning(p["mu"], p["alpha"], p["beta"], seq_len, rng)
            nll.append(hawkes_nll(times, p["mu"], p["alpha"], p["beta"]))
        seqs.append(times)
    split = np.empty(n_seq, dtype=object)
    ids = _split_ids(n_seq, np.random.default_rng(np.random.SeedSequence(seed).spawn(n_seq + 1)[-1]), fractions)
    for name, idx in ids.items():
        split[idx] = name
    return EventSequenceDataset(kind, seqs, split.astype(str), params, np.array(nll))


# ---------------------------------------------------------------------------
# 2-D density


def gen_density2d(n, seed=0, blob_std=0.05, radius=1.0, radial_std=0.01):
    """Even mixture of a narrow centred Gaussian and a noisy unit circle."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    comp = (rng.uniform(size=n) < 0.5).astype(int)
    blob = rng.normal(scale=blob_std, size=(n, 2))
    angle = rng.uniform(0, 2 * np.pi, size=n)
    r = radius + rng.normal(scale=radial_std, size=n)
    ring = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    samples = np.where(comp[:, None] == 1, ring, blob)
    params = dict(n=n, seed=seed, weights=[0.5, 0.5], blob_std=blob_std, radius=radius, radial_std=radial_std)
    return DensityDataset2D(samples, comp, params)


# ---------------------------------------------------------------------------
# serialization


def trajectories_to_csv(ds: TrajectoryDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = ds.dim
    w.writerow(["split", "series_id", "t0", "t", *[f"x_{i}" for i in range(d)], *[f"target_{i}" for i in range(d)]])
    sid = 0
    for name in SPLITS:
        if name not in ds.splits:
            continue
        sp = ds.splits[name]
        for i in range(sp.n):
            for j in range(sp.t.shape[1]):
                w.writerow([name, sid, repr(float(sp.t0[i])), repr(float(sp.t[i, j])),
                            *map(repr, sp.x0[i].astype(float).tolist()),
                            *map(repr, sp.targets[i, j].astype(float).tolist())])
            sid += 1
    return buf.getvalue()


def trajectories_from_csv(text, name="csv") -> TrajectoryDataset:
    rows = list(csv.reader(io.StringIO(text)))
    header, rows = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("x_"))
    series = {}
    for r in rows:
        series.setdefault((r[0], int(r[1])), []).append(r)
    per_split = {}
    for (split, _), rs in series.items():
        vals = np.array([[float(v) for v in r[2:]] for r in rs])
        per_split.setdefault(split, []).append(vals)
    splits = {}
    for split, items in per_split.items():
        arr = np.stack(items)  # (n, m, 2 + 2d)
        splits[split] = TrajectorySplit(arr[:, 0, 2 : 2 + d], arr[:, 0, 0], arr[:, :, 1], arr[:, :, 2 + d :])
    return TrajectoryDataset(name, d, splits)


def events_to_csv(ds: EventSequenceDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "series_id", "event_index", "t"])
    for i, (seq, sp) in enumerate(zip(ds.sequences, ds.split)):
        for j, t in enumerate(seq):
            w.writerow([sp, i, j, repr(float(t))])
    return buf.getvalue()


def events_from_csv(text, kind="csv") -> EventSequenceDataset:
    rows = list(csv.reader(io.StringIO(text)))[1:]
    seqs, split = {}, {}
    for sp, sid, _, t in rows:
        seqs.setdefault(int(sid), []).append(float(t))
        split[int(sid)] = sp
    ids = sorted(seqs)
    return EventSequenceDataset(kind, [np.array(seqs[i]) for i in ids], np.array([split[i] for i in ids]))


def density_to_csv(ds: DensityDataset2D) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["component", "x", "y"])
    for c, (x, y) in zip(ds.component, ds.samples):
        w.writerow([int(c), repr(float(x)), repr(float(y))])
    return buf.getvalue()


def checksum(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_binary(path, header: dict, arrays: dict):
    blobs, entries, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    head = json.dumps({**header, "arrays": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", BINARY_VERSION, len(head)) + head)
        for b in blobs:
            fh.write(b)


def read_binary(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError("not a neural-flows binary dataset")
    version, n = struct.unpack("<HI", raw[4:10])
    if version != BINARY_VERSION:
        raise ValueError(f"unsupported binary version {version}")
    header = json.loads(raw[10 : 10 + n])
    body = raw[10 + n :]
    arrays = {}
    for e in header.pop("arrays"):
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"]).copy()
    return header, arrays


def save_trajectories_binary(ds: TrajectoryDataset, path):
    arrays = {}
    for name, sp in ds.splits.items():
        for key in ("x0", "t0", "t", "targets"):
            arrays[f"{name}/{key}"] = getattr(sp, key)
    write_binary(path, {"type": "trajectories", "name": ds.name, "dim": ds.dim, "params": ds.params}, arrays)


def load_trajectories_binary(path) -> TrajectoryDataset:
    header, arrays = read_binary(path)
    if header.get("type") != "trajectories":
        raise ValueError("binary file does not hold trajectories")
    splits = {}
    for name in {k.split("/")[0] for k in arrays}:
        splits[name] = TrajectorySplit(*(arrays[f"{name}/{k}"] for k in ("x0", "t0", "t", "targets")))
    return TrajectoryDataset(header["name"], header["dim"], splits, header.get("params", {}))


def save_events_binary(ds: EventSequenceDataset, path):
    lengths = np.array([len(s) for s in ds.sequences], dtype=float)
    arrays = {"lengths": lengths, "times": np.concatenate(ds.sequences) if ds.sequences else np.zeros(0)}
    if ds.nll is not None:
        arrays["nll"] = ds.nll
    header = {"type": "events", "kind": ds.kind, "split": ds.split.tolist(), "params": ds.params}
    write_binary(path, header, arrays)


def load_events_binary(path) -> EventSequenceDataset:
    header, arrays = read_binary(path)
    if header.get("type") != "events":
        raise ValueError("binary file does not hold event sequences")
    bounds = np.cumsum(arrays["lengths"].astype(int))[:-1]
    seqs = np.split(arrays["times"], bounds)
    return EventSequenceDataset(header["kind"], seqs, np.array(header["split"]), header["params"], arrays.get("nll"))
