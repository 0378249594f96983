"""Small fully connected regression networks trained with SGD + Nesterov momentum.

Parameters of a network live in one contiguous float64 vector in canonical
order (layer 0 weights row-major, layer 0 biases, layer 1 weights, ...).
Layer weights and biases are views into that vector, so flattening,
averaging and wire transfer never need to reassemble anything.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import DomainError, NumericError, ShapeError

ACTIVATIONS = ("elu", "relu", "linear")
OUTPUT_ACTIVATIONS = ("relu", "linear")
MAX_HIDDEN_LAYERS = 3


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: tuple[tuple[int, str], ...] = ()
    output_activation: str = "linear"

    def __post_init__(self):
        hidden = tuple((int(units), str(act)) for units, act in self.hidden)
        object.__setattr__(self, "hidden", hidden)
        if int(self.input_dim) < 1:
            raise ShapeError(f"input_dim must be >= 1, got {self.input_dim}")
        if len(hidden) > MAX_HIDDEN_LAYERS:
            raise ShapeError(f"at most {MAX_HIDDEN_LAYERS} hidden layers, got {len(hidden)}")
        for units, act in hidden:
            if units < 1:
                raise ShapeError(f"hidden layer units must be >= 1, got {units}")
            if act not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {act!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ShapeError(f"unknown output activation {self.output_activation!r}")

    @cached_property
    def layers(self) -> tuple[tuple[int, int, str], ...]:
        """(fan_in, fan_out, activation) for every layer, input to output."""
        dims = [self.input_dim] + [u for u, _ in self.hidden] + [1]
        acts = [a for _, a in self.hidden] + [self.output_activation]
        return tuple((dims[i], dims[i + 1], acts[i]) for i in range(len(acts)))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @cached_property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo, _ in self.layers)

    @cached_property
    def offsets(self) -> tuple[tuple[slice, slice], ...]:
        """(weight slice, bias slice) into the flat parameter vector, per layer."""
        out = []
        pos = 0
        for fan_in, fan_out, _ in self.layers:
            w = slice(pos, pos + fan_in * fan_out)
            pos = w.stop
            b = slice(pos, pos + fan_out)
            pos = b.stop
            out.append((w, b))
        return tuple(out)

    def layer_start(self, index: int) -> int:
        """Flat offset of the first parameter belonging to layer ``index``."""
        return self.offsets[index][0].start

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": [[u, a] for u, a in self.hidden],
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(int(d["input_dim"]), tuple(tuple(h) for h in d.get("hidden", ())), d["output_activation"])


# Table-sized defaults for the two monitoring targets.
POWER_CURVE_ARCH = Architecture(1, ((12, "elu"), (8, "elu")), "relu")
BEARING_TEMP_ARCH = Architecture(2, ((8, "elu"), (16, "elu")), "linear")
POWER_CURVE_LR = 0.013
BEARING_TEMP_LR = 0.00035


class ModelParams:
    """Immutable parameter set of one network."""

    __slots__ = ("arch", "_flat")

    def __init__(self, arch: Architecture, flat: np.ndarray):
        vec = np.array(flat, dtype=np.float64, copy=True).reshape(-1)
        if vec.size != arch.n_params:
            raise ShapeError(f"expected {arch.n_params} parameters, got {vec.size}")
        if not np.isfinite(vec).all():
            raise NumericError("parameters contain non-finite values")
        vec.flags.writeable = False
        self.arch = arch
        self._flat = vec

    @property
    def flat(self) -> np.ndarray:
        return self._flat

    def weight(self, index: int) -> np.ndarray:
        fan_in, fan_out, _ = self.arch.layers[index]
        return self._flat[self.arch.offsets[index][0]].reshape(fan_out, fan_in)

    def bias(self, index: int) -> np.ndarray:
        return self._flat[self.arch.offsets[index][1]]

    def flatten(self) -> np.ndarray:
        return self._flat.copy()

    @classmethod
    def unflatten(cls, arch: Architecture, vector: np.ndarray) -> "ModelParams":
        return cls(arch, vector)

    @classmethod
    def from_layers(cls, arch: Architecture, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> "ModelParams":
        if len(layers) != arch.n_layers:
            raise ShapeError(f"expected {arch.n_layers} layers, got {len(layers)}")
        parts = []
        for (fan_in, fan_out, _), (w, b) in zip(arch.layers, layers):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64).reshape(-1)
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ShapeError(f"layer shape {w.shape}/{b.shape} != ({fan_out}, {fan_in})/({fan_out},)")
            parts += [w.reshape(-1), b]
        return cls(arch, np.concatenate(parts))

    def __eq__(self, other) -> bool:
        """Bitwise equality (distinguishes -0.0 from 0.0)."""
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(
            self._flat.view(np.uint64), other._flat.view(np.uint64)
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"ModelParams(n_params={self.arch.n_params}, arch={self.arch})"


def flatten(params: ModelParams) -> np.ndarray:
    return params.flatten()


def unflatten(arch: Architecture, vector: np.ndarray) -> ModelParams:
    return ModelParams.unflatten(arch, vector)


def init_weights(arch: Architecture, seed) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(arch.n_params)
    for (fan_in, fan_out, _), (ws, _) in zip(arch.layers, arch.offsets):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        flat[ws] = rng.uniform(-limit, limit, size=fan_in * fan_out)
    return ModelParams(arch, flat)


def _unit_probe_grid(dim: int) -> np.ndarray:
    per_axis = max(2, int(round(400 ** (1.0 / dim))))
    axes = np.meshgrid(*[np.linspace(0.0, 1.0, per_axis)] * dim, indexing="ij")
    return np.stack([a.reshape(-1) for a in axes], axis=1)


def init_live_weights(arch: Architecture, seed, max_tries: int = 64,
                      min_live_fraction: float = 0.5) -> ModelParams:
    """Glorot init that avoids a dead ReLU output unit.

    A ReLU output whose pre-activation is negative over the whole normalized
    input range receives zero gradient forever. Candidates are drawn in turn
    from ``seed`` until the output pre-activation is positive on at least
    ``min_live_fraction`` of a grid over [0, 1]^input_dim. Data-free and
    deterministic; linear-output architectures take the first draw.
    """
    rng = as_generator(seed)
    if arch.output_activation != "relu":
        return init_weights(arch, rng)
    probe_arch = Architecture(arch.input_dim, arch.hidden, "linear")
    grid = _unit_probe_grid(arch.input_dim)
    best, best_frac = None, -1.0
    for _ in range(max_tries):
        cand = init_weights(arch, rng)
        frac = float(np.mean(_forward_flat(probe_arch, cand.flat, grid) > 0))
        if frac >= min_live_fraction:
            return cand
        if frac > best_frac:
            best, best_frac = cand, frac
    return best


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        t = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if x.shape[0] != t.shape[0]:
            raise ShapeError(f"{x.shape[0]} input rows but {t.shape[0]} targets")
        if not (np.isfinite(x).all() and np.isfinite(t).all()):
            raise DomainError("batch contains non-finite values")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", t)

    def __len__(self) -> int:
        return self.targets.shape[0]


@dataclass
class OptimizerState:
    velocity: np.ndarray
    learning_rate: float
    momentum: float = 0.9
    batch_size: int = 32

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(-1)
        # lr == 0 is accepted as a degenerate "no-op" optimizer
        if not self.learning_rate >= 0:
            raise DomainError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise DomainError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise DomainError(f"batch size must be >= 1, got {self.batch_size}")

    @classmethod
    def zeros(cls, arch: Architecture, learning_rate: float, momentum: float = 0.9,
              batch_size: int = 32) -> "OptimizerState":
        return cls(np.zeros(arch.n_params), learning_rate, momentum, batch_size)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.velocity.copy(), self.learning_rate, self.momentum, self.batch_size)


def _activate(z: np.ndarray, name: str) -> np.ndarray:
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _as_inputs(arch: Architecture, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1 and arch.input_dim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeError(f"inputs of shape {x.shape} do not match input_dim {arch.input_dim}")
    return x


def _layer_views(arch: Architecture, flat: np.ndarray):
    for (fan_in, fan_out, act), (ws, bs) in zip(arch.layers, arch.offsets):
        yield flat[ws].reshape(fan_out, fan_in), flat[bs], act


def _forward_flat(arch: Architecture, flat: np.ndarray, x: np.ndarray) -> np.ndarray:
    a = x
    for w, b, act in _layer_views(arch, flat):
        a = _activate(a @ w.T + b, act)
    return a[:, 0]


def forward(params: ModelParams, inputs) -> np.ndarray:
    """Predictions, one scalar per input row."""
    return _forward_flat(params.arch, params.flat, _as_inputs(params.arch, inputs))


def mse_loss(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError(f"{p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise DomainError("mse of empty vectors")
    d = p - t
    return float(np.mean(d * d))


def rmse(predictions, targets) -> float:
    return float(np.sqrt(mse_loss(predictions, targets)))


@lru_cache(maxsize=None)
def _layout(arch: Architecture):
    return _kernels.layout(arch)


def _gradient_flat(arch: Architecture, flat: np.ndarray, x: np.ndarray, t: np.ndarray,
                   idx: np.ndarray | None = None, out: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the batch-mean squared error w.r.t. the flat parameter vector."""
    grad = np.empty_like(flat) if out is None else out
    if idx is None:
        idx = np.arange(t.shape[0])
    bad = _kernels.batch_gradient(flat, x, t, idx, 0, idx.shape[0], *_layout(arch), grad)
    if bad >= 0:
        raise NumericError(f"non-finite value in layer {bad}", layer=int(bad))
    return grad


def backward(params: ModelParams, batch: Batch) -> ModelParams:
    """Exact gradients of mse_loss(forward(params, x), t), shaped like params."""
    if len(batch) == 0:
        raise DomainError("empty batch")
    x = _as_inputs(params.arch, batch.inputs)
    return ModelParams(params.arch, _gradient_flat(params.arch, params.flat, x, batch.targets))


def _nesterov_inplace(w: np.ndarray, v: np.ndarray, g: np.ndarray, lr: float, mu: float) -> None:
    # v' = mu*v - lr*g ; w' = w + mu*v' - lr*g  (evaluated left to right)
    step = lr * g
    v *= mu
    v -= step
    w += mu * v
    w -= step


def sgd_nesterov_step(params: ModelParams, grads: ModelParams,
                      opt: OptimizerState) -> tuple[ModelParams, OptimizerState]:
    if grads.arch.n_params != params.arch.n_params or opt.velocity.size != params.arch.n_params:
        raise ShapeError("parameter, gradient and velocity sizes differ")
    w = params.flatten()
    v = opt.velocity.copy()
    _nesterov_inplace(w, v, grads.flat, opt.learning_rate, opt.momentum)
    return ModelParams(params.arch, w), OptimizerState(v, opt.learning_rate, opt.momentum, opt.batch_size)


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def train_epochs(params: ModelParams, opt: OptimizerState, train: Batch, epochs: int, seed,
                 trainable_from: int = 0) -> tuple[ModelParams, OptimizerState]:
    """Mini-batch SGD with Nesterov momentum for a number of epochs.

    Rows are reshuffled every epoch with ``seed`` (an int or a Generator whose
    state is advanced in place, so successive calls continue one stream).
    The final partial batch is kept. Only parameters at flat positions
    ``>= trainable_from`` are updated; everything before stays bit-identical.
    """
    if epochs < 0:
        raise DomainError(f"epochs must be >= 0, got {epochs}")
    n = len(train)
    if n == 0:
        raise DomainError("empty training set")
    arch = params.arch
    x = _as_inputs(arch, train.inputs)
    t = train.targets
    rng = as_generator(seed)
    w = params.flatten()
    v = opt.velocity.copy()
    if v.size != w.size:
        raise ShapeError("velocity size differs from parameter count")
    g = np.empty_like(w)
    lr, mu, bs = opt.learning_rate, opt.momentum, opt.batch_size
    layout = _layout(arch)
    for _ in range(epochs):
        bad = _kernels.train_epoch(w, v, x, t, rng.permutation(n), bs, lr, mu, trainable_from, *layout, g)
        if bad >= 0:
            raise NumericError(f"non-finite value in layer {bad}", layer=int(bad))
    return ModelParams(arch, w), OptimizerState(v, lr, mu, bs)


def count_params(arch: Architecture) -> int:
    return arch.n_params


def search_space_shapes(units: Iterable[int] = (4, 8, 12, 16), max_depth: int = MAX_HIDDEN_LAYERS):
    """All hidden-layer unit tuples of depth 0..max_depth."""
    from itertools import product

    units = tuple(units)
    return [shape for depth in range(max_depth + 1) for shape in product(units, repeat=depth)]
