"""Velocity-field training, ODE integration, and reflow coupling generation.

Time runs from data (t=0) to noise (t=1) along z_t = (1 - t) x + t z, so the
regression target for the velocity is z - x.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .budget import BudgetLedger
from .dist2d import ToyTask
from .errors import NonFiniteError, SchemaError
from .nncore import (
    AdamConfig,
    EmaState,
    MlpModel,
    NetSpec,
    adam_step,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
)

SOLVERS = ("euler", "heun")
DIRECTIONS = ("noise_to_data", "data_to_noise")
COUPLING_MAGIC = b"RMFC"
COUPLING_VERSION = 1
CHUNK_SIZE = 4096


def one_hot(cls: np.ndarray | None, n_classes: int, n: int) -> np.ndarray:
    """One-hot rows; a label of -1 (or ``cls=None``) gives the all-zero unconditional row."""
    out = np.zeros((n, n_classes))
    if cls is None or n_classes == 0:
        return out
    cls = np.broadcast_to(np.asarray(cls, dtype=np.int64), (n,))
    keep = cls >= 0
    out[np.flatnonzero(keep), cls[keep]] = 1.0
    return out


def _time_column(t, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).reshape(n, 1)


@dataclass
class FlowModel:
    """Velocity field v(z_t, t [| class]); the net sees ``[z_t, t, onehot]``."""

    net: MlpModel
    dim: int
    n_classes: int = 0
    class_dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.net.out_dim != self.dim:
            raise ValueError(f"velocity net outputs {self.net.out_dim} dims, data has {self.dim}")
        if self.net.in_dim != self.dim + 1 + self.n_classes:
            raise ValueError("velocity net input width must be dim + 1 + n_classes")

    @classmethod
    def init(cls, dim: int, spec: NetSpec, rng: np.random.Generator, n_classes: int = 0,
             class_dropout: float = 0.0) -> "FlowModel":
        net = MlpModel.init(spec.layer_sizes(dim + 1 + n_classes, dim), rng, spec.activation)
        return cls(net, dim, n_classes, class_dropout)

    def inputs(self, z: np.ndarray, t, cls=None) -> np.ndarray:
        n = z.shape[0]
        parts = [z, _time_column(t, n)]
        if self.n_classes:
            parts.append(one_hot(cls, self.n_classes, n))
        return np.concatenate(parts, axis=1)

    def velocity(self, z: np.ndarray, t, cls=None) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return mlp_forward(self.net, self.inputs(z, t, cls))

    def metadata(self) -> dict[str, Any]:
        return {"model_kind": "flow", "d": self.dim, "has_class": self.n_classes > 0,
                "n_classes": self.n_classes, "class_dropout": self.class_dropout}


@dataclass
class TrainResult:
    model: Any
    loss_trace: np.ndarray
    steps: int = 0
    nfe: int = 0


# -- couplings ---------------------------------------------------------------


@dataclass(frozen=True)
class Coupling:
    x: np.ndarray
    z: np.ndarray
    cls: int | None
    distance: float


@dataclass
class CouplingSet:
    """Struct-of-arrays store of (x, z, class, distance) records."""

    x: np.ndarray
    z: np.ndarray
    cls: np.ndarray | None = None
    distance: np.ndarray | None = None
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.x.shape != self.z.shape or self.x.ndim != 2:
            raise ValueError(f"x and z must be matching (n, d) arrays, got {self.x.shape} and {self.z.shape}")
        if self.distance is None:
            self.distance = np.linalg.norm(self.x - self.z, axis=1)
        if self.cls is not None:
            self.cls = np.asarray(self.cls, dtype=np.int64)

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> Coupling:
        return Coupling(self.x[i], self.z[i], None if self.cls is None else int(self.cls[i]), float(self.distance[i]))

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, index: np.ndarray, **provenance: Any) -> "CouplingSet":
        return CouplingSet(
            self.x[index], self.z[index], None if self.cls is None else self.cls[index],
            self.distance[index], {**self.provenance, **provenance},
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x, self.z, self.distance):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if self.cls is not None:
            h.update(np.ascontiguousarray(self.cls, dtype="<u4").tobytes())
        return h.hexdigest()


def _record_dtype(d: int, has_class: bool) -> np.dtype:
    fields = [("x", "<f8", (d,)), ("z", "<f8", (d,))]
    if has_class:
        fields.append(("cls", "<u4"))
    fields.append(("distance", "<f8"))
    return np.dtype(fields)


def save_couplings(path: str | Path, cs: CouplingSet) -> Path:
    """Binary little-endian record file, plus a ``.json`` sidecar holding provenance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, d = cs.x.shape
    has_class = cs.cls is not None
    rec = np.zeros(n, dtype=_record_dtype(d, has_class))
    rec["x"], rec["z"], rec["distance"] = cs.x, cs.z, cs.distance
    if has_class:
        if np.any(cs.cls < 0):
            raise ValueError("stored couplings need non-negative class labels")
        rec["cls"] = cs.cls
    header = COUPLING_MAGIC + struct.pack("<IQIB", COUPLING_VERSION, n, d, int(has_class))
    path.write_bytes(header + rec.tobytes())
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"provenance": cs.provenance, "digest": cs.digest()}, sort_keys=True, indent=1) + "\n")
    return path


def load_couplings(path: str | Path) -> CouplingSet:
    path = Path(path)
    raw = path.read_bytes()
    head = struct.calcsize("<IQIB")
    if raw[:4] != COUPLING_MAGIC:
        raise SchemaError(f"{path}: not a coupling file (bad magic {raw[:4]!r})")
    version, n, d, has_class = struct.unpack("<IQIB", raw[4:4 + head])
    if version != COUPLING_VERSION:
        raise SchemaError(f"{path}: coupling file version {version} != {COUPLING_VERSION}")
    rec = np.frombuffer(raw, dtype=_record_dtype(d, bool(has_class)), count=n, offset=4 + head)
    sidecar = path.with_name(path.name + ".json")
    prov = json.loads(sidecar.read_text())["provenance"] if sidecar.exists() else {}
    return CouplingSet(
        rec["x"].copy(), rec["z"].copy(), rec["cls"].astype(np.int64) if has_class else None,
        rec["distance"].copy(), prov,
    )


def export_couplings_csv(path: str | Path, cs: CouplingSet) -> Path:
    path = Path(path)
    d = cs.dim
    cols = [f"x{i}" for i in range(d)] + [f"z{i}" for i in range(d)]
    parts = [cs.x, cs.z]
    if cs.cls is not None:
        cols.append("class")
        parts.append(cs.cls[:, None].astype(np.float64))
    cols.append("distance")
    parts.append(cs.distance[:, None])
    fmt = ["%.17g"] * (2 * d) + (["%d"] if cs.cls is not None else []) + ["%.17g"]
    np.savetxt(path, np.hstack(parts), delimiter=",", header=",".join(cols), comments="", fmt=fmt)
    return path


# -- training ----------------------------------------------------------------


def _draw_pairs(task: ToyTask, couplings: CouplingSet | None, batch: int, rng: np.random.Generator):
    if couplings is None:
        x, cls = task.sample_data(batch, rng)
        z = task.sample_prior(batch, rng)
        return x, z, cls
    idx = rng.integers(0, len(couplings), size=batch)
    return couplings.x[idx], couplings.z[idx], None if couplings.cls is None else couplings.cls[idx]


def train_rectified_flow(
    task: ToyTask,
    net_spec: NetSpec,
    iters: int,
    batch: int,
    optimizer_cfg: AdamConfig,
    rng: np.random.Generator,
    couplings: CouplingSet | None = None,
    class_dropout: float = 0.1,
    ledger: BudgetLedger | None = None,
    phase: str = "stage1_train",
    callback: Callable[[int, FlowModel], None] | None = None,
    callback_every: int = 0,
) -> TrainResult:
    """Regress v(z_t, t) onto z - x with t ~ U[0, 1].

    Pairs are independent draws from ``task`` unless ``couplings`` is given, in which
    case records are drawn from it with replacement (the reflow / 2-rectified stage).
    """
    if iters <= 0 or batch <= 0:
        raise ValueError(f"iters and batch must be positive (got iters={iters}, batch={batch})")
    d = task.dim
    n_classes = task.n_classes
    model = FlowModel.init(d, net_spec, rng, n_classes, class_dropout if n_classes else 0.0)
    params = model.net.params()
    opt = optimizer_cfg.new_state(params)
    ema = EmaState.for_params(params, optimizer_cfg.ema_decay) if optimizer_cfg.ema_decay > 0 else None
    losses = np.empty(iters)
    for step in range(iters):
        x, z, cls = _draw_pairs(task, couplings, batch, rng)
        t = rng.random(batch)
        if n_classes:
            cls = np.where(rng.random(batch) < class_dropout, -1, cls)
        z_t = (1.0 - t)[:, None] * x + t[:, None] * z
        target = z - x
        pred, cache = mlp_forward_cached(model.net, model.inputs(z_t, t, cls))
        resid = pred - target
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        if not math.isfinite(loss):
            raise NonFiniteError(f"rectified-flow loss became non-finite at step {step}", step=step)
        losses[step] = loss
        grads, _ = mlp_backward(model.net, None, (2.0 / batch) * resid, cache=cache)
        try:
            adam_step(opt, params, grads)
        except NonFiniteError as exc:
            raise NonFiniteError(f"{exc} (training step {step})", step=step) from exc
        if ledger is not None:
            ledger.charge(phase, forward=batch, backward=batch, steps=1, items=batch)
        if ema is not None:
            ema.update(params)
        if callback is not None and callback_every and (step + 1) % callback_every == 0:
            callback(step + 1, model if ema is None else replace(model, net=ema.averaged(model.net)))
    if ema is not None:
        model = replace(model, net=ema.averaged(model.net))
    return TrainResult(model, losses, iters)


# -- integration -------------------------------------------------------------


def _integrate(model: FlowModel, z: np.ndarray, steps: int, solver: str, direction: str, cls,
               strict: bool, path: list | None = None) -> np.ndarray:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")
    state = np.array(z, dtype=np.float64, copy=True)
    if state.ndim == 1:
        state = state[None, :]
    h = 1.0 / steps
    t0, dt = (1.0, -h) if direction == "noise_to_data" else (0.0, h)
    if path is not None:
        path.append(state.copy())
    for k in range(steps):
        t = t0 + k * dt
        v1 = model.velocity(state, t, cls)
        if solver == "euler":
            state = state + dt * v1
        else:
            pred = state + dt * v1
            v2 = model.velocity(pred, t + dt, cls)
            state = state + 0.5 * dt * (v1 + v2)
        if strict and not np.all(np.isfinite(state)):
            raise NonFiniteError(f"ODE state became non-finite at step {k}", step=k)
        if path is not None:
            path.append(state.copy())
    return state


def integrate_ode(
    model: FlowModel,
    z: np.ndarray,
    steps: int,
    solver: str = "euler",
    direction: str = "noise_to_data",
    cls=None,
    ledger: BudgetLedger | None = None,
    phase: str = "eval",
) -> np.ndarray:
    """Fixed-step Euler or Heun between t=1 and t=0.

    ``noise_to_data`` starts at t=1 and steps x <- x - h v(x, t); ``data_to_noise``
    runs the same grid forward in time. Each sample costs ``steps`` evaluations
    (twice that for Heun), charged to ``ledger`` when one is given.
    """
    out = _integrate(model, z, steps, solver, direction, cls, strict=True)
    if ledger is not None:
        ledger.charge(phase, forward=out.shape[0] * steps * (2 if solver == "heun" else 1))
    return out


def integrate_path(model: FlowModel, z: np.ndarray, steps: int, solver: str = "euler",
                   direction: str = "noise_to_data", cls=None) -> np.ndarray:
    """All ``steps + 1`` states of a trajectory, shape ``(steps + 1, n, d)``."""
    path: list[np.ndarray] = []
    _integrate(model, z, steps, solver, direction, cls, strict=True, path=path)
    return np.stack(path)


def model_id(net: MlpModel) -> str:
    h = hashlib.sha256()
    for p in net.params():
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _chunk_job(model: FlowModel, task: ToyTask, seq: np.random.SeedSequence, n: int, steps: int, solver: str):
    rng = np.random.default_rng(seq)
    x, cls = task.sample_data(n, rng)
    z = _integrate(model, x, steps, solver, "data_to_noise", cls, strict=False)
    return x, z, cls


def generate_couplings(
    model: FlowModel,
    task: ToyTask,
    n_pairs: int,
    steps: int,
    solver: str,
    seed: int | np.random.SeedSequence,
    workers: int = 1,
    ledger: BudgetLedger | None = None,
    chunk_size: int = CHUNK_SIZE,
) -> CouplingSet:
    """Push data samples through the frozen flow to t=1 to pair each x with its noise z.

    Work is split into fixed-size chunks with their own seed streams, and results are
    merged in chunk order, so the output does not depend on ``workers``. Trajectories
    that go non-finite are dropped and their pair indices recorded in the provenance.
    """
    if n_pairs <= 0:
        raise ValueError(f"n_pairs must be positive, got {n_pairs}")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    sizes = [min(chunk_size, n_pairs - s) for s in range(0, n_pairs, chunk_size)]
    streams = seq.spawn(len(sizes))
    job = lambda args: _chunk_job(model, task, args[0], args[1], steps, solver)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, zip(streams, sizes)))
    else:
        parts = [job(a) for a in zip(streams, sizes)]
    x = np.concatenate([p[0] for p in parts])
    z = np.concatenate([p[1] for p in parts])
    cls = None if parts[0][2] is None else np.concatenate([p[2] for p in parts])
    ok = np.all(np.isfinite(z), axis=1)
    failed = np.flatnonzero(~ok)
    if ledger is not None:
        ledger.charge("reflow_sampling", forward=n_pairs * steps * (2 if solver == "heun" else 1))
    provenance = {
        "generator": model_id(model.net),
        "solver": solver,
        "steps": int(steps),
        "seed": int(seq.entropy) if isinstance(seq.entropy, int) else str(seq.entropy),
        "n_requested": int(n_pairs),
        "n_failed": int(failed.size),
        "failed_indices": failed.tolist(),
        "truncated": False,
        "truncate_k": 0.0,
    }
    cs = CouplingSet(x[ok], z[ok], None if cls is None else cls[ok], None, provenance)
    return cs


def nearest_rank_threshold(distances: np.ndarray, k_percent: float) -> float:
    """The (100 - k)th nearest-rank percentile: the ceil(P/100 * n)-th smallest value."""
    n = len(distances)
    rank = math.ceil((Fraction(100) - Fraction(k_percent)) * n / 100)
    rank = min(max(rank, 1), n)
    return float(np.partition(distances, rank - 1)[rank - 1])


def truncate_by_distance(cs: CouplingSet, k_percent: float) -> CouplingSet:
    """Drop the couplings above the (100 - k)th percentile of data-noise distance."""
    if not 0.0 <= k_percent < 100.0:
        raise ValueError(f"k_percent must lie in [0, 100), got {k_percent}")
    if len(cs) == 0:
        raise ValueError("cannot truncate an empty coupling set")
    q = nearest_rank_threshold(cs.distance, k_percent)
    keep = np.flatnonzero(cs.distance <= q)
    return cs.subset(keep, truncated=True, truncate_k=float(k_percent), truncate_threshold=q)


def empirical_lipschitz(cs: CouplingSet, n_pairs: int, rng: np.random.Generator) -> float:
    """Max of |x' - x''| / |z' - z''| over random coupling pairs."""
    if len(cs) < 2:
        raise ValueError("need at least two couplings")
    i = rng.integers(0, len(cs), size=n_pairs)
    j = rng.integers(0, len(cs), size=n_pairs)
    dz = np.linalg.norm(cs.z[i] - cs.z[j], axis=1)
    dx = np.linalg.norm(cs.x[i] - cs.x[j], axis=1)
    ok = dz >= 1e-12
    if not np.any(ok):
        return 0.0
    return float(np.max(dx[ok] / dz[ok]))


def path_deviation(states: np.ndarray) -> float:
    """Mean distance of interior states from the endpoint chord, over chord length.

    ``states`` has shape ``(T, d)`` for one trajectory or ``(T, n, d)`` for a batch;
    batch values are averaged. Trajectories with a chord shorter than 1e-12 score 0.
    """
    s = np.asarray(states, dtype=np.float64)
    if s.ndim == 2:
        s = s[:, None, :]
    a, b = s[0], s[-1]
    chord = b - a
    length = np.linalg.norm(chord, axis=1)
    safe = np.where(length < 1e-12, 1.0, length)
    unit = chord / safe[:, None]
    rel = s[1:-1] - a[None]
    along = np.einsum("tnd,nd->tn", rel, unit)
    perp = np.linalg.norm(rel - along[..., None] * unit[None], axis=2)
    score = perp.mean(axis=0) / safe
    score = np.where(length < 1e-12, 0.0, score)
    return float(score.mean())


def straightness_deviation(model: FlowModel, z: np.ndarray, steps: int, cls=None) -> float:
    if steps < 2:
        raise ValueError("steps must be >= 2 to have interior states")
    return path_deviation(integrate_path(model, z, steps, "euler", "noise_to_data", cls))


def with_provenance(cs: CouplingSet, **extra: Any) -> CouplingSet:
    return replace(cs, provenance={**cs.provenance, **extra})
