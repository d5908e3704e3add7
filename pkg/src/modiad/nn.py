"""Dense numerical core: cross-modal MLP mappers, cosine loss and local training.

Everything runs in float64 numpy. A mapper is a chain of affine layers with GELU
between them and identity at the output. Gradients are computed by an explicit
backward pass; the tests check them against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import DivergedTrainingError, InvalidInputError

COS_GUARD = 1e-12
ACTIVATIONS = ("gelu", "identity")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with ``Phi(x) = (1 + erf(x / sqrt 2)) / 2``."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_grad(x, cdf=None):
    x = np.asarray(x, dtype=np.float64)
    if cdf is None:
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


@dataclass(frozen=True)
class MapperNet:
    """An MLP ``d_in -> hidden -> ... -> d_out``.

    ``weights[l]`` has shape ``(d_out_l, d_in_l)``; rows of the input matrix are
    patches. ``activation="identity"`` turns the net into a purely affine map,
    which the linearity tests rely on.
    """

    weights: tuple
    biases: tuple
    activation: str = "gelu"

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise InvalidInputError("a mapper needs >= 1 layer and one bias per layer")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidInputError(f"layer {l}: bias shape {b.shape} does not match weight {w.shape}")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise InvalidInputError(f"layer {l}: input dim {w.shape[1]} does not chain")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_dim(self) -> int | None:
        return self.weights[0].shape[0] if len(self.weights) > 1 else None

    @property
    def depth(self) -> int:
        return len(self.weights)

    def shapes(self):
        return [w.shape for w in self.weights]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def default_hidden(d_in: int, d_out: int) -> int:
    return (d_in + d_out) // 2


def init_mapper(d_in, d_out, rng, *, hidden=None, depth=2, activation="gelu") -> MapperNet:
    """Kaiming-style uniform init in ``[-sqrt(6/d_in), sqrt(6/d_in)]``, zero biases.

    ``depth`` counts linear layers; 2 is the default mapper, 3 the deep variant.
    """
    if depth < 1:
        raise InvalidInputError("depth must be >= 1")
    hidden = default_hidden(d_in, d_out) if hidden is None else hidden
    dims = [d_in] + [hidden] * (depth - 1) + [d_out]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MapperNet(tuple(weights), tuple(biases), activation)


def _forward(weights, biases, activation, x):
    """Forward pass that also returns the per-layer cache needed by ``_backward``."""
    inputs, pre, cdfs = [], [], []
    h = x
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        if l < last and activation == "gelu":
            cdf = 0.5 * (1.0 + erf(z / _SQRT2))
            cdfs.append(cdf)
            h = z * cdf
        else:
            cdfs.append(None)
            h = z
    return h, (inputs, pre, cdfs)


def _backward(weights, activation, cache, d_out):
    """Gradients of a scalar loss w.r.t. every weight and bias, given dL/d(output)."""
    inputs, pre, cdfs = cache
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    delta = d_out
    for l in range(len(weights) - 1, -1, -1):
        grads_w[l] = delta.T @ inputs[l]
        grads_b[l] = delta.sum(axis=0)
        if l:
            delta = delta @ weights[l]
            if activation == "gelu":
                delta = delta * gelu_grad(pre[l - 1], cdfs[l - 1])
    return grads_w, grads_b


def _check_input(net: MapperNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise InvalidInputError(f"input shape {x.shape} does not match mapper input dim {net.input_dim}")
    return x


def mapper_forward(net: MapperNet, x) -> np.ndarray:
    x = _check_input(net, x)
    out, _ = _forward(net.weights, net.biases, net.activation, x)
    return out


# --- cosine distance -------------------------------------------------------


def cosine_distance(a, b, guard: float = COS_GUARD) -> float:
    """``1 - <a,b> / (|a||b| + guard)``; symmetric, total on zero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"vector shapes differ: {a.shape} vs {b.shape}")
    return float(1.0 - np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + guard))


def cosine_rows(target, pred, guard: float = COS_GUARD):
    """Row-wise cosine distance and its gradient w.r.t. ``pred``."""
    s = np.einsum("ij,ij->i", target, pred)
    nt = np.linalg.norm(target, axis=1)
    npr = np.linalg.norm(pred, axis=1)
    denom = nt * npr + guard
    dist = 1.0 - s / denom
    with np.errstate(divide="ignore", invalid="ignore"):
        radial = np.where(npr > 0, s * nt / (npr * denom * denom), 0.0)
    grad = -target / denom[:, None] + radial[:, None] * pred
    return dist, grad


# --- class models and loss -------------------------------------------------


@dataclass(frozen=True)
class ClassModel:
    class_id: int
    map_2d_to_3d: MapperNet
    map_3d_to_2d: MapperNet
    version: int = 0

    def __post_init__(self):
        if (self.map_2d_to_3d.input_dim != self.map_3d_to_2d.output_dim
                or self.map_2d_to_3d.output_dim != self.map_3d_to_2d.input_dim):
            raise InvalidInputError("the two mappers of a class model must be mutually inverse in shape")

    @property
    def d2d(self) -> int:
        return self.map_2d_to_3d.input_dim

    @property
    def d3d(self) -> int:
        return self.map_2d_to_3d.output_dim

    def param_count(self) -> int:
        return self.map_2d_to_3d.param_count() + self.map_3d_to_2d.param_count()


def init_class_model(class_id, d2d, d3d, rng, *, hidden=None, depth=2, activation="gelu") -> ClassModel:
    hidden = default_hidden(d2d, d3d) if hidden is None else hidden
    fwd = init_mapper(d2d, d3d, rng, hidden=hidden, depth=depth, activation=activation)
    bwd = init_mapper(d3d, d2d, rng, hidden=hidden, depth=depth, activation=activation)
    return ClassModel(class_id, fwd, bwd)


@dataclass(frozen=True)
class TrainingConfig:
    """Plain gradient descent. ``batch=None`` means full batch."""

    eta: float = 0.05
    tau_max: int = 5
    batch: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise InvalidInputError(f"eta must be finite and positive, got {self.eta}")
        if self.tau_max < 0:
            raise InvalidInputError("tau_max must be >= 0")
        if self.batch is not None and self.batch < 1:
            raise InvalidInputError("batch must be >= 1")


@dataclass(frozen=True)
class TrainData:
    """Samples stacked row-wise; ``weight`` makes a row-sum equal the per-sample mean of patch means."""

    e2d: np.ndarray
    e3d: np.ndarray
    sample_of_row: np.ndarray
    n_samples: int
    weight: np.ndarray = field(repr=False)


def stack_samples(samples) -> TrainData:
    samples = list(samples)
    if not samples:
        raise InvalidInputError("at least one sample is required")
    e2d = np.concatenate([s.e2d for s in samples])
    e3d = np.concatenate([s.e3d for s in samples])
    counts = np.array([s.e2d.shape[0] for s in samples])
    owner = np.repeat(np.arange(len(samples)), counts)
    weight = 1.0 / (len(samples) * counts[owner])
    return TrainData(e2d, e3d, owner, len(samples), weight)


def _subset(data: TrainData, sample_ids) -> TrainData:
    sample_ids = np.sort(np.asarray(sample_ids))
    rows = np.isin(data.sample_of_row, sample_ids)
    owner = data.sample_of_row[rows]
    counts = np.bincount(owner, minlength=data.n_samples)
    weight = 1.0 / (len(sample_ids) * counts[owner])
    return TrainData(data.e2d[rows], data.e3d[rows], owner, len(sample_ids), weight)


def _as_data(samples) -> TrainData:
    return samples if isinstance(samples, TrainData) else stack_samples(samples)


def _check_dims(model: ClassModel, data: TrainData):
    if data.e2d.shape[1] != model.d2d or data.e3d.shape[1] != model.d3d:
        raise InvalidInputError(
            f"feature dims ({data.e2d.shape[1]}, {data.e3d.shape[1]}) do not match model ({model.d2d}, {model.d3d})"
        )


def pair_loss_and_grads(fwd_params, bwd_params, activation, data: TrainData):
    """Loss of a mapper pair on ``data`` plus weight/bias grads of both mappers.

    ``*_params`` are ``(weights, biases)`` sequences, so callers may pass
    effective (e.g. low-rank adapted) weights.
    """
    pred3, cache3 = _forward(*fwd_params, activation, data.e2d)
    pred2, cache2 = _forward(*bwd_params, activation, data.e3d)
    d3, g3 = cosine_rows(data.e3d, pred3)
    d2, g2 = cosine_rows(data.e2d, pred2)
    w = data.weight
    loss = float(np.dot(w, d2) + np.dot(w, d3))
    fwd_grads = _backward(fwd_params[0], activation, cache3, g3 * w[:, None])
    bwd_grads = _backward(bwd_params[0], activation, cache2, g2 * w[:, None])
    return loss, fwd_grads, bwd_grads


def _activation_of(model: ClassModel) -> str:
    if model.map_2d_to_3d.activation != model.map_3d_to_2d.activation:
        raise InvalidInputError("both mappers must share one activation")
    return model.map_2d_to_3d.activation


def local_loss(model: ClassModel, samples) -> float:
    """Mean over samples of [patch-mean d_cos(E2D, pred2D) + patch-mean d_cos(E3D, pred3D)]."""
    data = _as_data(samples)
    _check_dims(model, data)
    pred3 = mapper_forward(model.map_2d_to_3d, data.e2d)
    pred2 = mapper_forward(model.map_3d_to_2d, data.e3d)
    d3, _ = cosine_rows(data.e3d, pred3)
    d2, _ = cosine_rows(data.e2d, pred2)
    return float(np.dot(data.weight, d2) + np.dot(data.weight, d3))


def loss_and_grads(model: ClassModel, samples):
    """Return ``(loss, grads)`` with grads laid out like :func:`model_params`."""
    data = _as_data(samples)
    _check_dims(model, data)
    f, b = model.map_2d_to_3d, model.map_3d_to_2d
    loss, (gwf, gbf), (gwb, gbb) = pair_loss_and_grads(
        (f.weights, f.biases), (b.weights, b.biases), _activation_of(model), data
    )
    return loss, gwf + gbf + gwb + gbb


def model_params(model: ClassModel) -> list:
    """Flat parameter list: fwd weights, fwd biases, bwd weights, bwd biases."""
    f, b = model.map_2d_to_3d, model.map_3d_to_2d
    return list(f.weights) + list(f.biases) + list(b.weights) + list(b.biases)


def with_params(model: ClassModel, params: Sequence[np.ndarray]) -> ClassModel:
    """Inverse of :func:`model_params`."""
    nf, nb = model.map_2d_to_3d.depth, model.map_3d_to_2d.depth
    params = list(params)
    fw, fb = params[:nf], params[nf:2 * nf]
    bw, bb = params[2 * nf:2 * nf + nb], params[2 * nf + nb:]
    fwd = replace(model.map_2d_to_3d, weights=tuple(fw), biases=tuple(fb))
    bwd = replace(model.map_3d_to_2d, weights=tuple(bw), biases=tuple(bb))
    return replace(model, map_2d_to_3d=fwd, map_3d_to_2d=bwd)


def batch_schedule(n_samples: int, cfg: TrainingConfig, rng):
    """Sample ids used at each of the ``tau_max`` steps (None = full batch)."""
    if cfg.batch is None or cfg.batch >= n_samples:
        return [None] * cfg.tau_max
    out, order, pos = [], rng.permutation(n_samples), 0
    for _ in range(cfg.tau_max):
        if pos + cfg.batch > n_samples:
            order, pos = rng.permutation(n_samples), 0
        out.append(order[pos:pos + cfg.batch])
        pos += cfg.batch
    return out


def local_train(model: ClassModel, samples, cfg: TrainingConfig, rng=None, *, round=None):
    """Run ``tau_max`` gradient-descent steps from ``model``.

    Returns ``(trained_model, steps_taken)``. Raises DivergedTrainingError as
    soon as the loss or any gradient stops being finite.
    """
    data = _as_data(samples)
    _check_dims(model, data)
    if cfg.tau_max == 0:
        return model, 0
    plan = batch_schedule(data.n_samples, cfg, rng if rng is not None else np.random.default_rng(0))
    params = model_params(model)
    for step, ids in enumerate(plan):
        batch = data if ids is None else _subset(data, ids)
        loss, grads = loss_and_grads(with_params(model, params), batch)
        if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
            raise DivergedTrainingError("non-finite loss or gradient", round=round, step=step,
                                        class_id=model.class_id)
        params = [p - cfg.eta * g for p, g in zip(params, grads)]
    return with_params(model, params), cfg.tau_max


def same_architecture(a: ClassModel, b: ClassModel) -> bool:
    return (
        a.map_2d_to_3d.shapes() == b.map_2d_to_3d.shapes()
        and a.map_3d_to_2d.shapes() == b.map_3d_to_2d.shapes()
        and a.map_2d_to_3d.activation == b.map_2d_to_3d.activation
        and a.map_3d_to_2d.activation == b.map_3d_to_2d.activation
    )


def elementwise_mean(arrays) -> np.ndarray:
    """Order-independent mean: anchor on the minimum, sum sorted offsets.

    Sorting makes the result bit-identical under any permutation of the inputs,
    and identical inputs return themselves exactly.
    """
    stack = np.stack(arrays)
    lo = stack.min(axis=0)
    offsets = np.sort(stack - lo, axis=0)
    return lo + offsets.sum(axis=0) / len(arrays)


def mean_models(models: Sequence[ClassModel]) -> ClassModel:
    models = list(models)
    if not models:
        raise InvalidInputError("mean_models needs at least one model")
    first = models[0]
    for m in models[1:]:
        if not same_architecture(first, m):
            raise InvalidInputError("cannot average class models with different architectures")
    per_model = [model_params(m) for m in models]
    averaged = [elementwise_mean(group) for group in zip(*per_model)]
    out = with_params(first, averaged)
    return replace(out, version=max(m.version for m in models))
