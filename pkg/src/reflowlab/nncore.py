"""Dense MLPs in float64 numpy: forward, reverse-mode gradients, forward-mode JVPs, Adam.

Arrays are plain ``np.ndarray`` of dtype float64 with shape ``(batch, features)``.
Weights follow the ``(out, in)`` convention, so a layer computes ``h @ W.T + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import NonFiniteError, SchemaError, ShapeError

CHECKPOINT_FORMAT_VERSION = 1
ACTIVATIONS = ("tanh", "silu")


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    # silu(a) = a * sigmoid(a)
    return a / (1.0 + np.exp(-a))


def _act_grad(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the activation, given pre-activation ``a`` and output ``h``."""
    if name == "tanh":
        return 1.0 - h * h
    s = 1.0 / (1.0 + np.exp(-a))
    return s * (1.0 + a * (1.0 - s))


@dataclass
class MlpModel:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if len(self.layer_sizes) < 2:
            raise ShapeError("an MLP needs at least an input and an output size")
        n = len(self.layer_sizes) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ShapeError(f"expected {n} weight/bias pairs, got {len(self.weights)}/{len(self.biases)}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != want:
                raise ShapeError(f"layer {i}: weight shape {w.shape} != {want}", layer=i)
            if b.shape != (want[0],):
                raise ShapeError(f"layer {i}: bias shape {b.shape} != {(want[0],)}", layer=i)

    @classmethod
    def init(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = "tanh",
    ) -> "MlpModel":
        """Glorot-uniform weights, zero biases."""
        sizes = [int(s) for s in layer_sizes]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(sizes, weights, biases, activation)

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def params(self) -> list[np.ndarray]:
        """Parameters in canonical order ``[W0, b0, W1, b1, ...]`` (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def flops_per_forward(self) -> float:
        """Multiply-add FLOPs for one sample through the network (2 per MAC)."""
        return float(sum(2 * a * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:])))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)


@dataclass
class DualTensor:
    primal: np.ndarray
    tangent: np.ndarray

    def __post_init__(self) -> None:
        self.primal = np.asarray(self.primal, dtype=np.float64)
        self.tangent = np.asarray(self.tangent, dtype=np.float64)
        if self.primal.shape != self.tangent.shape:
            raise ShapeError(f"primal shape {self.primal.shape} != tangent shape {self.tangent.shape}")


def _check_input(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeError(f"layer 0: input shape {x.shape} does not match input width {model.in_dim}", layer=0)
    return x


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations kept for a backward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    output: np.ndarray | None = None


def _forward(model: MlpModel, x: np.ndarray, keep: bool) -> tuple[np.ndarray, ForwardCache | None]:
    cache = ForwardCache() if keep else None
    h = x
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ w.T + b
        if keep:
            cache.inputs.append(h)
            cache.preacts.append(a)
        h = a if i == last else _act(model.activation, a)
    if keep:
        cache.output = h
    return h, cache


def mlp_forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = _check_input(model, x)
    return _forward(model, x, keep=False)[0]


def mlp_forward_cached(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = _check_input(model, x)
    return _forward(model, x, keep=True)


def mlp_jvp(model: MlpModel, x: DualTensor, keep_cache: bool = False):
    """Push a tangent through the network by dual arithmetic.

    Returns a ``DualTensor`` whose tangent is ``J(x.primal) @ x.tangent`` row by row.
    With ``keep_cache=True`` also returns the ``ForwardCache`` of the primal pass so a
    subsequent ``mlp_backward`` does not need to recompute it.
    """
    h = _check_input(model, x.primal)
    dh = np.asarray(x.tangent, dtype=np.float64).reshape(h.shape)
    cache = ForwardCache() if keep_cache else None
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ w.T + b
        da = dh @ w.T
        if keep_cache:
            cache.inputs.append(h)
            cache.preacts.append(a)
        if i == last:
            h, dh = a, da
        else:
            h = _act(model.activation, a)
            dh = _act_grad(model.activation, a, h) * da
    out = DualTensor(h, dh)
    if keep_cache:
        cache.output = h
        return out, cache
    return out


def mlp_backward(
    model: MlpModel,
    x: np.ndarray | None,
    upstream: np.ndarray,
    cache: ForwardCache | None = None,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of ``sum(upstream * mlp_forward(model, x))``.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` in ``model.params()`` order.
    """
    if cache is None:
        x = _check_input(model, x)
        _, cache = _forward(model, x, keep=True)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ShapeError(
            f"layer {model.n_layers - 1}: upstream shape {g.shape} != output shape {cache.output.shape}",
            layer=model.n_layers - 1,
        )
    grads: list[np.ndarray] = [None] * (2 * model.n_layers)
    for i in reversed(range(model.n_layers)):
        if i != model.n_layers - 1:
            g = g * _act_grad(model.activation, cache.preacts[i], cache.inputs[i + 1])
        grads[2 * i] = g.T @ cache.inputs[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ model.weights[i]
    return grads, g


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper: float) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            0,
            **hyper,
        )


@dataclass
class EmaState:
    """Exponential moving average of parameters, with a (1 + n) / (10 + n) warm-up on the decay."""

    shadow: list[np.ndarray]
    decay: float
    step_count: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], decay: float) -> "EmaState":
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        return cls([np.array(p, dtype=np.float64) for p in params], decay)

    def update(self, params: Sequence[np.ndarray]) -> None:
        self.step_count += 1
        d = min(self.decay, (1.0 + self.step_count) / (10.0 + self.step_count))
        for s, p in zip(self.shadow, params):
            s *= d
            s += (1.0 - d) * p

    def averaged(self, model: MlpModel) -> MlpModel:
        """Copy of ``model`` carrying the averaged weights."""
        out = model.copy()
        for dst, src in zip(out.params(), self.shadow):
            dst[...] = src
        return out


def adam_step(state: AdamState, params: list[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Bias-corrected Adam update, applied in place. Returns ``params``."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("adam_step: params, grads and moments differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: param {i} shape {p.shape} != grad shape {g.shape}", layer=i)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient in parameter {i} at step {state.step_count + 1}")
    state.step_count += 1
    bc1 = 1.0 - state.beta1**state.step_count
    bc2 = 1.0 - state.beta2**state.step_count
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# -- checkpoint document ------------------------------------------------------


def model_to_dict(model: MlpModel) -> dict[str, Any]:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "activation": model.activation,
        "weights": [w.ravel().tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def model_from_dict(doc: dict[str, Any]) -> MlpModel:
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise SchemaError(f"checkpoint format_version {version!r} != {CHECKPOINT_FORMAT_VERSION}")
    sizes = [int(s) for s in doc["layer_sizes"]]
    weights = [
        np.array(w, dtype=np.float64).reshape(sizes[i + 1], sizes[i]) for i, w in enumerate(doc["weights"])
    ]
    biases = [np.array(b, dtype=np.float64) for b in doc["biases"]]
    return MlpModel(sizes, weights, biases, doc["activation"])


def save_checkpoint(path: str | Path, model: MlpModel, metadata: dict[str, Any] | None = None) -> Path:
    """Write a JSON checkpoint. Python's float repr round-trips, so reload is bit-exact."""
    doc = model_to_dict(model)
    if metadata is not None:
        doc["metadata"] = metadata
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[MlpModel, dict[str, Any]]:
    doc = json.loads(Path(path).read_text())
    return model_from_dict(doc), doc.get("metadata", {})


@dataclass(frozen=True)
class NetSpec:
    """Hidden widths and activation; input/output sizes are fixed by the model that uses it."""

    hidden: tuple[int, ...] = (128, 128, 128)
    activation: str = "tanh"

    def layer_sizes(self, in_dim: int, out_dim: int) -> list[int]:
        return [in_dim, *self.hidden, out_dim]


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    ema_decay: float = 0.0  # 0 disables weight averaging

    def new_state(self, params: Sequence[np.ndarray]) -> AdamState:
        return AdamState.for_params(params, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
