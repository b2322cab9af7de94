"""Mean-velocity models u(z_t, r, t) trained with a JVP-derived bootstrap target."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Any, Callable

import numpy as np

from .budget import BudgetLedger
from .dist2d import ToyTask
from .errors import ConfigError, NonFiniteError
from .nncore import (
    AdamConfig,
    DualTensor,
    EmaState,
    MlpModel,
    NetSpec,
    adam_step,
    mlp_backward,
    mlp_forward,
    mlp_jvp,
)
from .rectflow import CouplingSet, FlowModel, TrainResult, _draw_pairs, _time_column, one_hot

VELOCITY_SOURCES = ("conditional", "flow")
KAPPA_RULES = ("zero", "paper_formula")


@dataclass
class MeanFlowModel:
    """Average velocity over [r, t]; the net sees ``[z_t, r, t, onehot]``."""

    net: MlpModel
    dim: int
    n_classes: int = 0
    class_dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.net.out_dim != self.dim:
            raise ValueError(f"mean-velocity net outputs {self.net.out_dim} dims, data has {self.dim}")
        if self.net.in_dim != self.dim + 2 + self.n_classes:
            raise ValueError("mean-velocity net input width must be dim + 2 + n_classes")

    @classmethod
    def init(cls, dim: int, spec: NetSpec, rng: np.random.Generator, n_classes: int = 0,
             class_dropout: float = 0.0) -> "MeanFlowModel":
        net = MlpModel.init(spec.layer_sizes(dim + 2 + n_classes, dim), rng, spec.activation)
        return cls(net, dim, n_classes, class_dropout)

    @property
    def supports_unconditional(self) -> bool:
        return self.n_classes == 0 or self.class_dropout > 0

    def inputs(self, z: np.ndarray, r, t, cls=None) -> np.ndarray:
        n = z.shape[0]
        parts = [z, _time_column(r, n), _time_column(t, n)]
        if self.n_classes:
            parts.append(one_hot(cls, self.n_classes, n))
        return np.concatenate(parts, axis=1)

    def mean_velocity(self, z: np.ndarray, r, t, cls=None) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return mlp_forward(self.net, self.inputs(z, r, t, cls))

    def metadata(self) -> dict[str, Any]:
        return {"model_kind": "meanflow", "d": self.dim, "has_class": self.n_classes > 0,
                "n_classes": self.n_classes, "class_dropout": self.class_dropout}


# -- time sampling -----------------------------------------------------------


@dataclass(frozen=True)
class TimeSamplerConfig:
    t_dist: str = "u_shape"  # or "uniform"
    u_shape_a: float = 4.0
    interval_dist: str = "sigmoid_normal"  # or "uniform": r ~ U[0, t]
    interval_mean: float = -0.8
    interval_std: float = 1.0
    ratio_r_neq_t: float = 0.25
    avoid_enabled: bool = True
    t_hi: float = 0.95
    r_lo: float = 0.4

    def __post_init__(self) -> None:
        if not 0.0 <= self.ratio_r_neq_t <= 1.0:
            raise ConfigError(f"ratio_r_neq_t must lie in [0, 1], got {self.ratio_r_neq_t}")
        if not self.u_shape_a > 0:
            raise ConfigError(f"u_shape_a must be positive, got {self.u_shape_a}")
        if self.t_dist not in ("u_shape", "uniform"):
            raise ConfigError(f"unknown t_dist {self.t_dist!r}")
        if self.interval_dist not in ("sigmoid_normal", "uniform"):
            raise ConfigError(f"unknown interval_dist {self.interval_dist!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def u_shape_icdf(xi, a: float):
    """Inverse of CDF(u) = sinh(a u) / sinh(a), the CDF of density ~ exp(au) + exp(-au) on [0, 1]."""
    return np.arcsinh(np.asarray(xi) * np.sinh(a)) / a


def u_shape_cdf(u, a: float):
    return np.sinh(a * np.asarray(u)) / np.sinh(a)


@dataclass
class TimeDraws:
    r: np.ndarray
    t: np.ndarray
    n_interval_drawn: int
    n_clamped: int
    n_avoid_rewrites: int


def sample_time_pairs(cfg: TimeSamplerConfig, n: int, rng: np.random.Generator) -> TimeDraws:
    """Vectorized (r, t) draws with 0 <= r <= t <= 1.

    The same number of uniforms and normals is consumed whatever the config, so
    samples are a fixed function of the generator state.
    """
    xi = rng.random(n)
    pick = rng.random(n)
    eps = rng.standard_normal(n)
    span_u = rng.random(n)
    t = u_shape_icdf(xi, cfg.u_shape_a) if cfg.t_dist == "u_shape" else xi
    t = np.clip(t, 0.0, 1.0)
    interval = pick < cfg.ratio_r_neq_t
    if cfg.interval_dist == "sigmoid_normal":
        delta = 1.0 / (1.0 + np.exp(-(cfg.interval_mean + cfg.interval_std * eps)))
        raw = t - delta
        clamped = interval & (raw < 0.0)
        r_int = np.maximum(0.0, raw)
    else:
        clamped = np.zeros(n, dtype=bool)
        r_int = span_u * t
    r = np.where(interval, r_int, t)
    rewrites = 0
    if cfg.avoid_enabled:
        bad = (t > cfg.t_hi) & (r < cfg.r_lo) & (r > 0.0)
        rewrites = int(bad.sum())
        r = np.where(bad, 0.0, r)
    return TimeDraws(r, t, int(interval.sum()), int(clamped.sum()), rewrites)


def sample_time_pair(cfg: TimeSamplerConfig, rng: np.random.Generator) -> tuple[float, float]:
    d = sample_time_pairs(cfg, 1, rng)
    return float(d.r[0]), float(d.t[0])


# -- targets, losses, guidance -----------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    p: float = 0.5
    c: float = 1e-3


def adaptive_loss(u_pred: np.ndarray, u_tgt: np.ndarray, p: float, c: float) -> tuple[float, np.ndarray]:
    """mean(w * e) with e = |u_pred - u_tgt|^2 and w = (e + c)^-p held constant."""
    if p < 0 or not c > 0:
        raise ValueError(f"need p >= 0 and c > 0, got p={p}, c={c}")
    diff = np.atleast_2d(u_pred) - np.atleast_2d(u_tgt)
    e = np.sum(diff * diff, axis=1)
    w = (e + c) ** (-p)
    return float(np.mean(w * e)), w


def _targets(model: MeanFlowModel, z_t: np.ndarray, r: np.ndarray, t: np.ndarray, cls, v: np.ndarray):
    """Prediction, stop-gradient target, and forward cache for one batch."""
    inp = model.inputs(z_t, r, t, cls)
    n = z_t.shape[0]
    tangent = np.zeros_like(inp)
    tangent[:, : model.dim] = v
    tangent[:, model.dim + 1] = 1.0
    dual, cache = mlp_jvp(model.net, DualTensor(inp, tangent), keep_cache=True)
    if not np.all(np.isfinite(dual.tangent)):
        raise NonFiniteError(f"non-finite JVP for a batch of {n} (r range [{r.min():.3g}, {r.max():.3g}], "
                             f"t range [{t.min():.3g}, {t.max():.3g}])")
    gap = (t - r)[:, None]
    u_tgt = np.where(gap == 0.0, v, v - gap * dual.tangent)
    return dual.primal, u_tgt, cache


def meanflow_target(
    model: MeanFlowModel,
    coupling,
    r: float,
    t: float,
    cls: int | None = None,
    velocity_source: str | FlowModel | np.ndarray = "conditional",
) -> np.ndarray:
    """u_tgt = v - (t - r) du/dt for one coupling, with du/dt taken along tangent (v, 0, 1).

    ``velocity_source`` is ``"conditional"`` (v = z - x), a frozen ``FlowModel``, or an
    explicit velocity vector (for example a guided field from ``cfg_velocity``).
    """
    if not 0.0 <= r <= t <= 1.0:
        raise ValueError(f"need 0 <= r <= t <= 1, got r={r}, t={t}")
    x = np.atleast_2d(np.asarray(coupling.x, dtype=np.float64))
    z = np.atleast_2d(np.asarray(coupling.z, dtype=np.float64))
    z_t = (1.0 - t) * x + t * z
    if isinstance(velocity_source, str):
        if velocity_source != "conditional":
            raise ConfigError(f"unknown velocity source {velocity_source!r}")
        v = z - x
    elif isinstance(velocity_source, FlowModel):
        v = velocity_source.velocity(z_t, t, cls)
    else:
        v = np.atleast_2d(np.asarray(velocity_source, dtype=np.float64))
    _, u_tgt, _ = _targets(model, z_t, np.array([r], dtype=np.float64), np.array([t], dtype=np.float64), cls, v)
    return u_tgt[0]


def meanflow_loss_grads(
    model: MeanFlowModel,
    z_t: np.ndarray,
    r: np.ndarray,
    t: np.ndarray,
    cls,
    v: np.ndarray,
    loss_cfg: LossConfig,
    u_tgt: np.ndarray | None = None,
) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Loss and parameter gradients for a batch; ``u_tgt`` if given is used as-is."""
    pred, tgt, cache = _targets(model, z_t, r, t, cls, v)
    if u_tgt is not None:
        tgt = u_tgt
    loss, w = adaptive_loss(pred, tgt, loss_cfg.p, loss_cfg.c)
    upstream = (2.0 / pred.shape[0]) * w[:, None] * (pred - tgt)
    grads, _ = mlp_backward(model.net, None, upstream, cache=cache)
    return loss, grads, tgt


@dataclass(frozen=True)
class CfgConfig:
    omega_prime_range: tuple[float, float] = (1.0, 3.0)
    kappa_rule: str = "zero"
    stage_split: float = 0.5

    def __post_init__(self) -> None:
        lo, hi = self.omega_prime_range
        if lo < 1.0 or hi < lo:
            raise ConfigError(f"omega_prime_range must satisfy 1 <= lo <= hi, got {self.omega_prime_range}")
        if self.kappa_rule not in KAPPA_RULES:
            raise ConfigError(f"unknown kappa_rule {self.kappa_rule!r}; expected one of {KAPPA_RULES}")
        if not 0.0 <= self.stage_split <= 1.0:
            raise ConfigError("stage_split must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {"omega_prime_range": list(self.omega_prime_range), "kappa_rule": self.kappa_rule,
                "stage_split": self.stage_split}


def guidance_coefficients(omega_prime: np.ndarray, rule: str) -> tuple[np.ndarray, np.ndarray]:
    """Map an effective scale w' to (omega, kappa).

    ``zero``: kappa = 0, omega = w'. ``paper_formula``: kappa = max(1, w' - 1) capped at
    0.99, and omega = w' (1 - kappa) so that omega / (1 - kappa) = w'.
    """
    omega_prime = np.asarray(omega_prime, dtype=np.float64)
    if rule == "zero":
        return omega_prime.copy(), np.zeros_like(omega_prime)
    if rule == "paper_formula":
        kappa = np.minimum(np.maximum(1.0, omega_prime - 1.0), 0.99)
        return omega_prime * (1.0 - kappa), kappa
    raise ConfigError(f"unknown kappa_rule {rule!r}")


def cfg_velocity(
    flow: FlowModel | None,
    mf: MeanFlowModel,
    z_t: np.ndarray,
    t,
    cls,
    omega,
    kappa,
    v_cond: np.ndarray | None = None,
) -> np.ndarray:
    """omega v(z_t, t | c) + kappa u(z_t, t, t | c) + (1 - omega + kappa) u(z_t, t, t).

    The conditional velocity comes from ``flow`` or, when ``flow`` is None, from
    ``v_cond`` (the per-sample z - x during training).
    """
    if cls is None:
        raise ConfigError("cfg_velocity needs a class label")
    if mf.n_classes == 0 or not mf.supports_unconditional:
        raise ConfigError("mean-flow model was not trained with class dropout; no unconditional branch")
    z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    if flow is not None:
        v = flow.velocity(z_t, t, cls)
    elif v_cond is not None:
        v = np.atleast_2d(v_cond)
    else:
        raise ConfigError("cfg_velocity needs either a flow model or v_cond")
    omega = np.reshape(np.asarray(omega, dtype=np.float64), (-1, 1))
    kappa = np.reshape(np.asarray(kappa, dtype=np.float64), (-1, 1))
    u_c = mf.mean_velocity(z_t, t, t, cls)
    u_u = mf.mean_velocity(z_t, t, t, None)
    return omega * v + kappa * u_c + (1.0 - omega + kappa) * u_u


# -- training ----------------------------------------------------------------


def train_meanflow(
    couplings: CouplingSet | None,
    net_spec: NetSpec,
    iters: int,
    batch: int,
    time_cfg: TimeSamplerConfig,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
    cfg_cfg: CfgConfig | None = None,
    task: ToyTask | None = None,
    optimizer_cfg: AdamConfig = AdamConfig(),
    velocity_source: str = "conditional",
    flow: FlowModel | None = None,
    class_dropout: float = 0.1,
    ledger: BudgetLedger | None = None,
    phase: str = "stage3_train",
    callback: Callable[[int, MeanFlowModel], None] | None = None,
    callback_every: int = 0,
) -> TrainResult:
    """Fit u(z_t, r, t) to the stop-gradient target with the adaptive loss.

    ``couplings`` are resampled with replacement; pass ``None`` together with ``task``
    to train on fresh independent pairs instead. With ``cfg_cfg`` the last
    ``1 - stage_split`` fraction of steps regresses onto the guided field.
    """
    if iters <= 0 or batch <= 0:
        raise ValueError(f"iters and batch must be positive (got iters={iters}, batch={batch})")
    if couplings is None and task is None:
        raise ConfigError("train_meanflow needs couplings or a task for independent pairs")
    if couplings is not None and len(couplings) == 0:
        raise ValueError("coupling set is empty")
    if velocity_source not in VELOCITY_SOURCES:
        raise ConfigError(f"unknown velocity source {velocity_source!r}")
    if velocity_source == "flow" and flow is None:
        raise ConfigError("velocity_source='flow' needs a frozen flow model")
    d = couplings.dim if couplings is not None else task.dim
    has_cls = (couplings.cls is not None) if couplings is not None else task.conditional
    n_classes = 0
    if has_cls:
        n_classes = int(couplings.cls.max()) + 1 if couplings is not None else task.n_classes
    if cfg_cfg is not None and n_classes == 0:
        raise ConfigError("guided training needs class labels on the couplings")
    model = MeanFlowModel.init(d, net_spec, rng, n_classes, class_dropout if n_classes else 0.0)
    params = model.net.params()
    opt = optimizer_cfg.new_state(params)
    ema = EmaState.for_params(params, optimizer_cfg.ema_decay) if optimizer_cfg.ema_decay > 0 else None
    guided_from = iters if cfg_cfg is None else int(round(cfg_cfg.stage_split * iters))
    losses = np.empty(iters)
    for step in range(iters):
        x, z, cls = _draw_pairs(task, couplings, batch, rng)
        draws = sample_time_pairs(time_cfg, batch, rng)
        r, t = draws.r, draws.t
        if n_classes:
            cls = np.where(rng.random(batch) < class_dropout, -1, cls)
        z_t = (1.0 - t)[:, None] * x + t[:, None] * z
        fwd = batch
        if velocity_source == "flow":
            v = flow.velocity(z_t, t, cls)
            fwd += batch
        else:
            v = z - x
        if step >= guided_from:
            lo, hi = cfg_cfg.omega_prime_range
            omega, kappa = guidance_coefficients(rng.uniform(lo, hi, size=batch), cfg_cfg.kappa_rule)
            guided = cfg_velocity(None, model, z_t, t, np.maximum(cls, 0), omega, kappa, v_cond=v)
            v = np.where((cls >= 0)[:, None], guided, v)
            fwd += 2 * batch
        loss, grads, _ = meanflow_loss_grads(model, z_t, r, t, cls, v, loss_cfg)
        if not math.isfinite(loss):
            raise NonFiniteError(f"mean-flow loss became non-finite at step {step}", step=step)
        losses[step] = loss
        try:
            adam_step(opt, params, grads)
        except NonFiniteError as exc:
            raise NonFiniteError(f"{exc} (training step {step})", step=step) from exc
        if ledger is not None:
            ledger.charge(phase, forward=fwd, backward=2 * batch, steps=1, items=batch)
        if ema is not None:
            ema.update(params)
        if callback is not None and callback_every and (step + 1) % callback_every == 0:
            callback(step + 1, model if ema is None else replace(model, net=ema.averaged(model.net)))
    if ema is not None:
        model = replace(model, net=ema.averaged(model.net))
    return TrainResult(model, losses, iters)


# -- sampling and oracles ----------------------------------------------------


def one_step_sample(model: MeanFlowModel, z: np.ndarray, cls=None, ledger: BudgetLedger | None = None,
                    phase: str = "eval") -> np.ndarray:
    """x = z - u(z, 0, 1)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    out = z - model.mean_velocity(z, 0.0, 1.0, cls)
    if ledger is not None:
        ledger.charge(phase, forward=z.shape[0])
    return out


def mean_velocity_quadrature_oracle(flow: FlowModel, z_start: np.ndarray, r: float, t: float, n_quad: int,
                                    cls=None) -> np.ndarray:
    """Average of v along the Euler trajectory of ``flow`` from time t down to r.

    With equal Euler steps the average of the sampled velocities equals
    (z_t - z_r) / (t - r) for the realized path.
    """
    if not r < t:
        raise ValueError(f"need r < t, got r={r}, t={t}")
    if n_quad < 2:
        raise ValueError("n_quad must be >= 2")
    z = np.atleast_2d(np.asarray(z_start, dtype=np.float64))
    h = (t - r) / n_quad
    state = z.copy()
    total = np.zeros_like(z)
    for k in range(n_quad):
        v = flow.velocity(state, t - k * h, cls)
        total += v
        state = state - h * v
        if not np.all(np.isfinite(state)):
            raise NonFiniteError(f"quadrature trajectory became non-finite at step {k}", step=k)
    return total / n_quad


__all__ = [
    "MeanFlowModel", "TimeSamplerConfig", "TimeDraws", "LossConfig", "CfgConfig",
    "sample_time_pair", "sample_time_pairs", "u_shape_icdf", "u_shape_cdf",
    "meanflow_target", "meanflow_loss_grads", "adaptive_loss", "cfg_velocity", "guidance_coefficients",
    "train_meanflow", "one_step_sample", "mean_velocity_quadrature_oracle",
]
