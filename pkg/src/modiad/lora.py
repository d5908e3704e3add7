"""Class-wise low-rank adaptation with a quality-gated update mode.

A class in ``LOW_RANK`` mode keeps its mapper weights frozen and trains
residual factors ``H`` (d_out x r) and ``J`` (r x d_in) per layer, so the
effective weight is ``W + H @ J``. The server decides the mode per class from a
smoothed validation score after a warm-up period.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, DivergedTrainingError, InvalidInputError
from .nn import (
    ClassModel,
    MapperNet,
    TrainingConfig,
    _as_data,
    _check_dims,
    _check_input,
    _forward,
    _subset,
    batch_schedule,
    elementwise_mean,
    pair_loss_and_grads,
)


class Mode(str, Enum):
    FULL = "full"
    LOW_RANK = "lowrank"


@dataclass(frozen=True)
class LoraConfig:
    t_warm: int = 10
    gamma: float = 0.5
    rank: int = 4
    adapt_biases: bool = False
    init_scale: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}", key="lora.gamma")
        if self.t_warm < 0:
            raise ConfigError("t_warm must be >= 0", key="lora.t_warm")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1", key="lora.rank")


# --- quality smoothing and mode decision ---------------------------------


def smooth_quality(q_now: float, q_prev_smooth: float | None, gamma: float) -> float:
    """Exponential smoothing; the first observation initializes the average."""
    if not (0.0 < gamma <= 1.0):
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}", key="lora.gamma")
    if q_prev_smooth is None:
        return float(q_now)
    return gamma * q_now + (1.0 - gamma) * q_prev_smooth


def decide_mode(q_smooth, t: int, t_warm: int) -> list[Mode]:
    """Per-class mode for round ``t``: full during warm-up, then low-rank iff at or above the class mean."""
    q = list(q_smooth)
    if t < t_warm or not q:
        return [Mode.FULL] * len(q)
    # exact rational comparison so that equal qualities all sit on the boundary
    total = sum(Fraction(x) for x in q)
    return [Mode.LOW_RANK if Fraction(qc) * len(q) >= total else Mode.FULL for qc in q]


@dataclass
class ModeState:
    """Server-side per-class smoothed quality and current mode."""

    q_smooth: list
    modes: list
    base_version: list = field(default_factory=list)

    @classmethod
    def fresh(cls, n_classes: int) -> "ModeState":
        return cls([None] * n_classes, [Mode.FULL] * n_classes, [0] * n_classes)

    def copy(self) -> "ModeState":
        return ModeState(list(self.q_smooth), list(self.modes), list(self.base_version))


# --- adapters --------------------------------------------------------------


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank factors for the layers of one mapper.

    ``h[l]``/``j[l]`` are None for layers that are not adapted. ``bias_delta``
    is None unless biases are adapted too.
    """

    h: tuple
    j: tuple
    bias_delta: tuple | None = None

    @property
    def rank(self) -> int | None:
        ranks = {x.shape[1] for x in self.h if x is not None}
        if len(ranks) > 1:
            raise InvalidInputError(f"mixed ranks {sorted(ranks)} inside one adapter")
        return ranks.pop() if ranks else None

    def delta(self, l: int):
        if self.h[l] is None:
            return None
        return self.h[l] @ self.j[l]


@dataclass(frozen=True)
class ClassAdapter:
    fwd: LoraAdapter
    bwd: LoraAdapter


def _check_rank(rank: int, d_out: int, d_in: int):
    if not (1 <= rank < min(d_in, d_out)):
        raise ConfigError(f"rank {rank} must satisfy 1 <= r < min(d_in, d_out) = {min(d_in, d_out)}",
                          key="lora.rank")


def init_adapter(net: MapperNet, rank: int, rng, *, adapt_biases=False, scale=2.0, layers=None) -> LoraAdapter:
    """Zero ``H`` and a ``J`` of random orthonormal rows times ``scale``; the adapter starts at dW = 0.

    The first gradient step moves ``W`` by ``scale**2`` times the gradient
    projected onto the rows of ``J``; ``scale`` plays the role of the usual
    LoRA scaling factor.
    """
    layers = range(net.depth) if layers is None else set(layers)
    h, j = [], []
    for l, w in enumerate(net.weights):
        if l in layers:
            _check_rank(rank, *w.shape)
            q, _ = np.linalg.qr(rng.standard_normal((w.shape[1], rank)))
            h.append(np.zeros((w.shape[0], rank)))
            j.append(q.T * scale)
        else:
            h.append(None)
            j.append(None)
    bias_delta = tuple(np.zeros_like(b) for b in net.biases) if adapt_biases else None
    return LoraAdapter(tuple(h), tuple(j), bias_delta)


def init_class_adapter(model: ClassModel, cfg: LoraConfig, rng) -> ClassAdapter:
    kw = dict(adapt_biases=cfg.adapt_biases, scale=cfg.init_scale)
    return ClassAdapter(init_adapter(model.map_2d_to_3d, cfg.rank, rng, **kw),
                        init_adapter(model.map_3d_to_2d, cfg.rank, rng, **kw))


def _validate(base: MapperNet, adapter: LoraAdapter):
    if len(adapter.h) != base.depth or len(adapter.j) != base.depth:
        raise InvalidInputError("adapter layer count does not match the base mapper")
    for l, w in enumerate(base.weights):
        h, j = adapter.h[l], adapter.j[l]
        if (h is None) != (j is None):
            raise InvalidInputError(f"layer {l}: H and J must both be present or both absent")
        if h is None:
            continue
        if h.shape[0] != w.shape[0] or j.shape[1] != w.shape[1] or h.shape[1] != j.shape[0]:
            raise InvalidInputError(f"layer {l}: factor shapes {h.shape} x {j.shape} do not fit weight {w.shape}")
        if not h.shape[1] < min(w.shape):
            raise InvalidInputError(f"layer {l}: rank {h.shape[1]} is not below min{w.shape}")
    if adapter.bias_delta is not None and len(adapter.bias_delta) != base.depth:
        raise InvalidInputError("bias delta count does not match the base mapper")


def effective_params(base: MapperNet, adapter: LoraAdapter):
    _validate(base, adapter)
    weights = tuple(w if adapter.h[l] is None else w + adapter.h[l] @ adapter.j[l]
                    for l, w in enumerate(base.weights))
    if adapter.bias_delta is None:
        biases = base.biases
    else:
        biases = tuple(b + db for b, db in zip(base.biases, adapter.bias_delta))
    return weights, biases


def lora_forward(base: MapperNet, adapter: LoraAdapter, x) -> np.ndarray:
    x = _check_input(base, x)
    weights, biases = effective_params(base, adapter)
    out, _ = _forward(weights, biases, base.activation, x)
    return out


def merge_adapter(base: MapperNet, adapter: LoraAdapter) -> MapperNet:
    """Materialize ``W + H @ J`` (and bias deltas) into a plain mapper."""
    weights, biases = effective_params(base, adapter)
    return replace(base, weights=weights, biases=biases)


def merge_class(model: ClassModel, adapter: ClassAdapter) -> ClassModel:
    return replace(model,
                   map_2d_to_3d=merge_adapter(model.map_2d_to_3d, adapter.fwd),
                   map_3d_to_2d=merge_adapter(model.map_3d_to_2d, adapter.bwd))


# --- training --------------------------------------------------------------


def adapter_params(adapter: ClassAdapter) -> list:
    """Flat trainable list: for each mapper, H's, J's, then bias deltas (if any)."""
    out = []
    for a in (adapter.fwd, adapter.bwd):
        out += [x for x in a.h if x is not None]
        out += [x for x in a.j if x is not None]
        if a.bias_delta is not None:
            out += list(a.bias_delta)
    return out


def with_adapter_params(adapter: ClassAdapter, params) -> ClassAdapter:
    params = list(params)
    pos = 0
    rebuilt = []
    for a in (adapter.fwd, adapter.bwd):
        parts = {}
        for name in ("h", "j"):
            new = []
            for x in getattr(a, name):
                if x is None:
                    new.append(None)
                else:
                    new.append(params[pos])
                    pos += 1
            parts[name] = tuple(new)
        bias = None
        if a.bias_delta is not None:
            bias = tuple(params[pos:pos + len(a.bias_delta)])
            pos += len(a.bias_delta)
        rebuilt.append(LoraAdapter(parts["h"], parts["j"], bias))
    return ClassAdapter(*rebuilt)


def _factor_grads(adapter: LoraAdapter, grads_w, grads_b):
    gh = [gw @ adapter.j[l].T for l, gw in enumerate(grads_w) if adapter.h[l] is not None]
    gj = [adapter.h[l].T @ gw for l, gw in enumerate(grads_w) if adapter.h[l] is not None]
    gb = list(grads_b) if adapter.bias_delta is not None else []
    return gh + gj + gb


def lora_loss_and_grads(model: ClassModel, adapter: ClassAdapter, samples):
    """Loss of the adapted model and its gradient w.r.t. :func:`adapter_params`."""
    data = _as_data(samples)
    _check_dims(model, data)
    fwd = effective_params(model.map_2d_to_3d, adapter.fwd)
    bwd = effective_params(model.map_3d_to_2d, adapter.bwd)
    loss, (gwf, gbf), (gwb, gbb) = pair_loss_and_grads(fwd, bwd, model.map_2d_to_3d.activation, data)
    return loss, _factor_grads(adapter.fwd, gwf, gbf) + _factor_grads(adapter.bwd, gwb, gbb)


def lora_train(model: ClassModel, adapter: ClassAdapter, samples, cfg: TrainingConfig, rng=None, *, round=None):
    """Gradient descent on the adapter factors only; ``model`` is never touched.

    Returns ``(adapter, steps_taken)``.
    """
    data = _as_data(samples)
    _check_dims(model, data)
    if cfg.tau_max == 0:
        return adapter, 0
    plan = batch_schedule(data.n_samples, cfg, rng if rng is not None else np.random.default_rng(0))
    params = adapter_params(adapter)
    for step, ids in enumerate(plan):
        batch = data if ids is None else _subset(data, ids)
        loss, grads = lora_loss_and_grads(model, with_adapter_params(adapter, params), batch)
        if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
            raise DivergedTrainingError("non-finite loss or gradient in low-rank training", round=round,
                                        step=step, class_id=model.class_id)
        params = [p - cfg.eta * g for p, g in zip(params, grads)]
    return with_adapter_params(adapter, params), cfg.tau_max


def merge_mean_delta(model: ClassModel, adapters) -> ClassModel:
    """Average the dense products ``H_k @ J_k`` over uploaders and add the mean to the base.

    Averaging factors separately would not average the updates, so the server
    works on the dense deltas.
    """
    adapters = list(adapters)
    if not adapters:
        raise InvalidInputError("need at least one adapter to merge")

    def merged(base: MapperNet, parts: list):
        weights, biases = [], []
        for l, (w, b) in enumerate(zip(base.weights, base.biases)):
            deltas = [p.delta(l) for p in parts]
            if any(d is not None for d in deltas):
                if any(d is None for d in deltas):
                    raise InvalidInputError(f"layer {l} adapted by some uploaders but not others")
                w = w + elementwise_mean(deltas)
            if parts[0].bias_delta is not None:
                b = b + elementwise_mean([p.bias_delta[l] for p in parts])
            weights.append(w)
            biases.append(b)
        return replace(base, weights=tuple(weights), biases=tuple(biases))

    return replace(model,
                   map_2d_to_3d=merged(model.map_2d_to_3d, [a.fwd for a in adapters]),
                   map_3d_to_2d=merged(model.map_3d_to_2d, [a.bwd for a in adapters]))


# --- parameter accounting --------------------------------------------------


@dataclass(frozen=True)
class LayerShape:
    d_out: int
    d_in: int
    bias: bool = True


def layer_shapes(model) -> list[LayerShape]:
    """Layer shapes of a ClassModel (both mappers) or a single MapperNet."""
    nets = [model.map_2d_to_3d, model.map_3d_to_2d] if isinstance(model, ClassModel) else [model]
    return [LayerShape(w.shape[0], w.shape[1], True) for net in nets for w in net.weights]


def uploaded_param_count(shapes, mode: Mode, rank: int | None = None, adapt_biases: bool = False) -> int:
    """Parameters uploaded (equivalently, trained) per client-class update.

    Full: sum of ``d_out*d_in`` (+ ``d_out`` per bias). Low-rank: sum of
    ``r*(d_out + d_in)`` (+ ``d_out`` per bias when biases are adapted).
    """
    shapes = layer_shapes(shapes) if not isinstance(shapes, (list, tuple)) else list(shapes)
    mode = Mode(mode)
    total = 0
    for s in shapes:
        if mode is Mode.FULL:
            total += s.d_out * s.d_in + (s.d_out if s.bias else 0)
        else:
            if rank is None:
                raise ConfigError("low-rank accounting needs a rank", key="lora.rank")
            _check_rank(rank, s.d_out, s.d_in)
            total += rank * (s.d_out + s.d_in) + (s.d_out if (s.bias and adapt_biases) else 0)
    return total
