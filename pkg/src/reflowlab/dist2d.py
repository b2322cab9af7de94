"""Isotropic Gaussian mixtures for the toy transport tasks, plus a closed-form velocity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateInputError


@dataclass(frozen=True)
class GaussianMixture:
    weights: tuple[float, ...]
    means: tuple[tuple[float, ...], ...]
    scale: float = 1.0

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must be nonnegative and sum to 1, got {self.weights}")
        m = np.asarray(self.means, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != len(w):
            raise ValueError("need one mean (all of equal dimension) per weight")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        # normalize to hashable tuples so the dataclass stays frozen/comparable
        object.__setattr__(self, "weights", tuple(float(x) for x in w))
        object.__setattr__(self, "means", tuple(tuple(float(c) for c in row) for row in m))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def dim(self) -> int:
        return len(self.means[0])

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def mean_array(self) -> np.ndarray:
        return np.asarray(self.means, dtype=np.float64)

    @classmethod
    def standard_normal(cls, dim: int = 2) -> "GaussianMixture":
        return cls((1.0,), (tuple([0.0] * dim),), 1.0)

    def to_dict(self) -> dict[str, Any]:
        return {"weights": list(self.weights), "means": [list(m) for m in self.means], "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GaussianMixture":
        return cls(tuple(d["weights"]), tuple(tuple(m) for m in d["means"]), d.get("scale", 1.0))


def sample_mixture_labeled(
    gm: GaussianMixture, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` points and the component index each came from."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    labels = rng.choice(gm.n_components, size=n, p=np.asarray(gm.weights))
    noise = rng.standard_normal((n, gm.dim))
    return gm.mean_array[labels] + gm.scale * noise, labels


def sample_mixture(gm: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    return sample_mixture_labeled(gm, n, rng)[0]


def log_density(gm: GaussianMixture, points: np.ndarray) -> np.ndarray | float:
    """Log mixture density at one point ``(d,)`` or a batch ``(n, d)``."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    d = gm.dim
    sq = ((pts[:, None, :] - gm.mean_array[None, :, :]) ** 2).sum(-1)
    log_norm = -0.5 * d * np.log(2.0 * np.pi) - d * np.log(gm.scale)
    with np.errstate(divide="ignore"):
        log_w = np.log(np.asarray(gm.weights))
    comp = log_w[None, :] + log_norm - 0.5 * sq / gm.scale**2
    out = logsumexp(comp, axis=1)
    return float(out[0]) if single else out


def gaussian_velocity_oracle(mu, sigma: float, t: float, z_t) -> np.ndarray:
    """E[z - x | z_t] for x ~ N(mu, sigma^2 I), z ~ N(0, I) independent, z_t = (1-t) x + t z.

    Works for a single point or a batch of points in ``z_t``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    var = (1.0 - t) ** 2 * sigma**2 + t**2
    if var < 1e-12:
        raise DegenerateInputError(f"Var[z_t] = {var:g} is degenerate at t={t}, sigma={sigma}")
    gain = (t - (1.0 - t) * sigma**2) / var
    return -mu + gain * (z_t - (1.0 - t) * mu)


@dataclass(frozen=True)
class ToyTask:
    """A transport problem: ``source`` plays the noise/prior role, ``target`` is the data."""

    source: GaussianMixture
    target: GaussianMixture
    prior_is_source: bool = True
    class_labels: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.class_labels is not None and len(self.class_labels) != self.target.n_components:
            raise ValueError("class_labels needs exactly one label per target component")
        if self.source.dim != self.target.dim:
            raise ValueError("source and target must share a dimension")

    @property
    def dim(self) -> int:
        return self.target.dim

    @property
    def conditional(self) -> bool:
        return self.class_labels is not None

    @property
    def n_classes(self) -> int:
        return 0 if self.class_labels is None else max(self.class_labels) + 1

    @property
    def prior(self) -> GaussianMixture:
        return self.source if self.prior_is_source else GaussianMixture.standard_normal(self.dim)

    def sample_data(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
        x, comp = sample_mixture_labeled(self.target, n, rng)
        if self.class_labels is None:
            return x, None
        return x, np.asarray(self.class_labels)[comp]

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_mixture(self.prior, n, rng)

    def to_dict(self) -> dict[str, Any]:
        return {
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "prior_is_source": self.prior_is_source,
            "class_labels": None if self.class_labels is None else list(self.class_labels),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ToyTask":
        labels = d.get("class_labels")
        return cls(
            GaussianMixture.from_dict(d["source"]),
            GaussianMixture.from_dict(d["target"]),
            bool(d.get("prior_is_source", True)),
            None if labels is None else tuple(int(c) for c in labels),
        )


def default_toy_task(conditional: bool = False) -> ToyTask:
    """Balanced two-mode source on the left, 0.4/0.6 target on the right (upper mode lighter)."""
    source = GaussianMixture((0.5, 0.5), ((-6.0, 2.0), (-6.0, -2.0)), 1.0)
    target = GaussianMixture((0.4, 0.6), ((6.0, 2.0), (6.0, -2.0)), 1.0)
    return ToyTask(source, target, True, (0, 1) if conditional else None)


def balanced_toy_task() -> ToyTask:
    source = GaussianMixture((0.5, 0.5), ((-6.0, 2.0), (-6.0, -2.0)), 1.0)
    target = GaussianMixture((0.5, 0.5), ((6.0, 2.0), (6.0, -2.0)), 1.0)
    return ToyTask(source, target, True, None)


def single_gaussian_task(mu: Sequence[float] = (2.0, 0.0), sigma: float = 1.0) -> ToyTask:
    """Data N(mu, sigma^2 I) against a standard normal prior."""
    data = GaussianMixture((1.0,), (tuple(mu),), sigma)
    return ToyTask(GaussianMixture.standard_normal(len(mu)), data, False, None)
