"""Sample-quality metrics and training diagnostics for the toy tasks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.spatial.distance import cdist

from .budget import flops_estimate
from .dist2d import GaussianMixture, log_density
from .errors import DegenerateInputError
from .meanflow import MeanFlowModel, _targets
from .rectflow import CouplingSet

__all__ = [
    "DistanceHistogram", "EvalReport", "Heatmap", "angular_error", "angular_errors", "binned_mean",
    "default_outlier_threshold", "distance_error_histogram", "energy_distance", "flops_estimate",
    "loss_heatmap", "outlier_rate", "per_sample_meanflow_error", "write_csv",
]


def angular_error(u_pred, reference) -> float:
    """Angle in [0, pi] between two vectors."""
    a = np.asarray(u_pred, dtype=np.float64).ravel()
    b = np.asarray(reference, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise DegenerateInputError("angle undefined for a (near-)zero vector")
    return float(np.arccos(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)))


def angular_errors(u_pred: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Row-wise angles; rows where either vector is shorter than 1e-12 give NaN."""
    a = np.atleast_2d(u_pred)
    b = np.atleast_2d(reference)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na >= 1e-12) & (nb >= 1e-12)
    cos = np.einsum("ij,ij->i", a, b) / np.where(ok, na * nb, 1.0)
    out = np.arccos(np.clip(cos, -1.0, 1.0))
    return np.where(ok, out, np.nan)


def default_outlier_threshold(gm: GaussianMixture, n_sigma: float = 4.0) -> float:
    """Lowest mixture log-density found n_sigma scales out from any component mean.

    Each probe point sits along the direction from the mixture centroid to that mean
    (first axis if they coincide), so it lies outside the bulk of the mixture.
    """
    means = gm.mean_array
    centroid = np.average(means, axis=0, weights=gm.weights)
    probes = []
    for mu in means:
        direction = mu - centroid
        norm = np.linalg.norm(direction)
        if norm < 1e-12:
            direction = np.eye(gm.dim)[0]
        else:
            direction = direction / norm
        probes.append(mu + n_sigma * gm.scale * direction)
    return float(np.min(log_density(gm, np.asarray(probes))))


def outlier_rate(samples: np.ndarray, target: GaussianMixture, log_density_threshold: float | None = None) -> float:
    if log_density_threshold is None:
        log_density_threshold = default_outlier_threshold(target)
    if not math.isfinite(log_density_threshold):
        raise ValueError("log-density threshold must be finite")
    samples = np.atleast_2d(samples)
    bad = ~np.isfinite(samples).all(axis=1)
    ld = np.full(samples.shape[0], -np.inf)
    ld[~bad] = log_density(target, samples[~bad])
    return float(np.mean(ld < log_density_threshold))


def _mean_pairwise(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    total = 0.0
    for i in range(0, a.shape[0], chunk):
        total += cdist(a[i:i + chunk], b).sum()
    return total / (a.shape[0] * b.shape[0])


def energy_distance(a: np.ndarray, b: np.ndarray, max_points: int | None = 4096, seed: int = 0) -> float:
    """2 E|A - B| - E|A - A'| - E|B - B'| over all pairs (V-statistic form).

    Sets larger than ``max_points`` are subsampled without replacement with a
    generator seeded by ``seed``; pass ``max_points=None`` to always use every point.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("energy distance needs non-empty point sets")
    if max_points is not None:
        rng = np.random.default_rng(seed)
        if len(a) > max_points:
            a = a[np.sort(rng.choice(len(a), max_points, replace=False))]
        if len(b) > max_points:
            b = b[np.sort(rng.choice(len(b), max_points, replace=False))]
    value = 2.0 * _mean_pairwise(a, b) - _mean_pairwise(a, a) - _mean_pairwise(b, b)
    return max(float(value), 0.0)


# -- training diagnostics ----------------------------------------------------


@dataclass
class Heatmap:
    """Lower-triangular grid over (t, r); row index bins t, column index bins r."""

    edges: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray

    def region_mean(self, t_min: float, r_max: float) -> float:
        """Average of the non-empty cell means with t-bin above ``t_min`` and r-bin below ``r_max``."""
        lo, hi = self.edges[:-1], self.edges[1:]
        rows = lo >= t_min - 1e-12
        cols = hi <= r_max + 1e-12
        block = self.mean[np.ix_(rows, cols)]
        return float(np.nanmean(block))

    def median_cell(self) -> float:
        return float(np.nanmedian(self.mean))

    def rows(self) -> list[dict[str, Any]]:
        out = []
        n = len(self.edges) - 1
        for i in range(n):
            for j in range(i + 1):
                out.append({
                    "t_lo": self.edges[i], "t_hi": self.edges[i + 1],
                    "r_lo": self.edges[j], "r_hi": self.edges[j + 1],
                    "count": int(self.count[i, j]),
                    "mean_loss": self.mean[i, j], "std_loss": self.std[i, j],
                })
        return out


def per_sample_meanflow_error(model: MeanFlowModel, cs: CouplingSet, idx: np.ndarray, r: np.ndarray,
                              t: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """|u(z_t, r, t) - u_tgt|^2 per draw, using the conditional velocity z - x."""
    out = np.empty(len(idx))
    for s in range(0, len(idx), chunk):
        sl = slice(s, s + chunk)
        x, z = cs.x[idx[sl]], cs.z[idx[sl]]
        cls = None if cs.cls is None else cs.cls[idx[sl]]
        z_t = (1.0 - t[sl])[:, None] * x + t[sl][:, None] * z
        pred, tgt, _ = _targets(model, z_t, r[sl], t[sl], cls, z - x)
        out[sl] = np.sum((pred - tgt) ** 2, axis=1)
    return out


def loss_heatmap(model: MeanFlowModel, couplings: CouplingSet, grid_n: int = 20, n_draws: int = 100_000,
                 rng: np.random.Generator | None = None) -> Heatmap:
    """Mean and std of the per-sample regression error over uniform (t, r) cells with r <= t."""
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    rng = rng if rng is not None else np.random.default_rng(0)
    a, b = rng.random(n_draws), rng.random(n_draws)
    t, r = np.maximum(a, b), np.minimum(a, b)
    idx = rng.integers(0, len(couplings), size=n_draws)
    err = per_sample_meanflow_error(model, couplings, idx, r, t)
    edges = np.linspace(0.0, 1.0, grid_n + 1)
    ti = np.minimum((t * grid_n).astype(int), grid_n - 1)
    ri = np.minimum((r * grid_n).astype(int), grid_n - 1)
    count = np.zeros((grid_n, grid_n), dtype=np.int64)
    s1 = np.zeros((grid_n, grid_n))
    s2 = np.zeros((grid_n, grid_n))
    np.add.at(count, (ti, ri), 1)
    np.add.at(s1, (ti, ri), err)
    np.add.at(s2, (ti, ri), err * err)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s1 / count
        var = np.maximum(s2 / count - mean**2, 0.0)
    mean = np.where(count > 0, mean, np.nan)
    std = np.where(count > 0, np.sqrt(var), np.nan)
    return Heatmap(edges, mean, std, count)


@dataclass
class DistanceHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mean_error: np.ndarray
    p90_distance: float

    def rows(self) -> list[dict[str, Any]]:
        return [
            {"d_lo": self.edges[i], "d_hi": self.edges[i + 1], "count": int(self.counts[i]),
             "mean_angular_error": self.mean_error[i]}
            for i in range(len(self.counts))
        ]


def binned_mean(values: np.ndarray, weights_to_average: np.ndarray, n_bins: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Equal-width bins over ``values``; returns (edges, counts, per-bin mean). Empty bins give NaN."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    which = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    sums = np.bincount(which, weights=weights_to_average, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return edges, counts, means


def distance_error_histogram(model: MeanFlowModel, couplings: CouplingSet, n_bins: int = 30) -> DistanceHistogram:
    """Angular error between u(z, 0, 1) and z - x, binned by coupling distance."""
    u = model.mean_velocity(couplings.z, 0.0, 1.0, couplings.cls)
    err = angular_errors(u, couplings.z - couplings.x)
    err = np.where(np.isnan(err), 0.0, err)
    edges, counts, means = binned_mean(couplings.distance, err, n_bins)
    p90 = float(np.percentile(couplings.distance, 90))
    return DistanceHistogram(edges, counts, means, p90)


# -- reports -----------------------------------------------------------------


@dataclass
class EvalReport:
    method: str
    outlier_rate: float
    energy_distance: float
    mean_angular_error: float
    straightness: float
    lipschitz_estimate: float
    outlier_threshold: float
    n_samples: int
    status: str = "ok"
    budget: dict[str, Any] = field(default_factory=dict)

    def is_finite(self) -> bool:
        vals = (self.outlier_rate, self.energy_distance, self.mean_angular_error, self.straightness,
                self.lipschitz_estimate)
        return all(math.isfinite(v) for v in vals)

    def to_text(self) -> str:
        flat = {k: v for k, v in asdict(self).items() if k != "budget"}
        for phase, counts in self.budget.get("phases", {}).items():
            for key, val in counts.items():
                flat[f"budget.{phase}.{key}"] = val
        for key in ("forward_evals", "backward_evals", "train_steps", "flops_per_forward"):
            if key in self.budget:
                flat[f"budget.{key}"] = self.budget[key]
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in flat.items())

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, v = line.split(" = ", 1)
                kv[k] = v
        budget: dict[str, Any] = {"phases": {}}
        for k in list(kv):
            if k.startswith("budget."):
                parts = k.split(".")[1:]
                val = float(kv.pop(k))
                if len(parts) == 2:
                    budget["phases"].setdefault(parts[0], {})[parts[1]] = int(val)
                else:
                    budget[parts[0]] = val if parts[0] == "flops_per_forward" else int(val)
        return cls(
            method=kv["method"], outlier_rate=float(kv["outlier_rate"]),
            energy_distance=float(kv["energy_distance"]), mean_angular_error=float(kv["mean_angular_error"]),
            straightness=float(kv["straightness"]), lipschitz_estimate=float(kv["lipschitz_estimate"]),
            outlier_threshold=float(kv["outlier_threshold"]), n_samples=int(kv["n_samples"]),
            status=kv["status"], budget=budget,
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def _fmt(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | Path, rows: list[dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    cols = list(rows[0])
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) if not isinstance(row[c], (float, np.floating)) else repr(float(row[c]))
                              for c in cols))
    path.write_text("\n".join(lines) + "\n")
    return path
