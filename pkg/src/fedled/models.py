"""The four networks (source extractor, target extractor, shared classifier,
domain discriminator), Adam, the decaying learning rate and checkpoints.

Every network is a plain MLP.  Hidden layers use relu and the last layer is
linear; softmax/sigmoid heads are applied by the losses.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedled import autodiff as ad
from fedled.errors import ContractError, DataError, DimensionError, DomainError

#: Above this many conditioning dims the discriminator sees a randomized
#: multilinear map instead of the exact flattened outer product.
EXACT_CONDITIONING_LIMIT = 4096
NETWORKS = ("source", "target", "classifier", "discriminator")


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"  # "relu" | "none"

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class MlpParams:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            w, b = layer.weight, layer.bias
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape} disagree")
            if layer.activation not in ("relu", "none"):
                raise ContractError(f"layer {i}: unknown activation {layer.activation!r}")
            if i and self.layers[i - 1].fan_out != layer.fan_in:
                raise DimensionError(f"layer {i} in-dim {layer.fan_in} != previous out-dim")

    @property
    def in_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.fan_out for layer in self.layers]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        """Same architecture, new values (ordered weight, bias, weight, ...)."""
        if len(arrays) != 2 * len(self.layers):
            raise ContractError("array count does not match layer count")
        layers = []
        for i, layer in enumerate(self.layers):
            w = _frozen(arrays[2 * i])
            b = _frozen(arrays[2 * i + 1])
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise DimensionError(f"layer {i}: replacement shapes do not mirror parameters")
            layers.append(Layer(w, b, layer.activation))
        return MlpParams(tuple(layers))

    def equals(self, other: "MlpParams") -> bool:
        """Bit-exact equality of architecture and values."""
        if len(self.layers) != len(other.layers):
            return False
        return all(
            a.activation == b.activation
            and np.array_equal(a.weight, b.weight)
            and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )

    def max_abs_diff(self, other: "MlpParams") -> float:
        return max(float(np.max(np.abs(x - y))) for x, y in zip(self.arrays(), other.arrays()))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NetConfig:
    source_dim: int
    target_dim: int
    num_classes: int = 4
    feature_dim: int = 128
    extractor_hidden: tuple[int, ...] = (256,)
    classifier_hidden: tuple[int, ...] = (64,)
    discriminator_hidden: tuple[int, ...] = (256, 256)
    random_map_dim: int = 1024

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ContractError("feature_dim must be >= 1")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.source_dim < 1 or self.target_dim < 1:
            raise ContractError("input dims must be >= 1")

    @property
    def exact_conditioning(self) -> bool:
        return self.feature_dim * self.num_classes <= EXACT_CONDITIONING_LIMIT

    @property
    def conditioning_dim(self) -> int:
        if self.exact_conditioning:
            return self.feature_dim * self.num_classes
        return self.random_map_dim

    def sizes(self, network: str) -> list[int]:
        if network == "source":
            return [self.source_dim, *self.extractor_hidden, self.feature_dim]
        if network == "target":
            return [self.target_dim, *self.extractor_hidden, self.feature_dim]
        if network == "classifier":
            return [self.feature_dim, *self.classifier_hidden, self.num_classes]
        if network == "discriminator":
            return [self.conditioning_dim, *self.discriminator_hidden, 1]
        raise ContractError(f"unknown network {network!r}")


def init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases, relu on all but the last layer."""
    if len(sizes) < 2:
        raise ContractError("an MLP needs at least one layer")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        act = "relu" if i < len(sizes) - 2 else "none"
        layers.append(Layer(_frozen(w), _frozen(np.zeros(fan_out)), act))
    return MlpParams(tuple(layers))


def init_params(config: NetConfig, seed: int, network: str) -> MlpParams:
    """Deterministic per (seed, network)."""
    rng = np.random.default_rng([int(seed), NETWORKS.index(network)])
    return init_mlp(config.sizes(network), rng)


@dataclass
class MlpForward:
    """Tape handles for one forward pass; ``activations[-1]`` is the output."""

    params: MlpParams
    weights: list
    biases: list
    activations: list

    @property
    def output(self) -> ad.Var:
        return self.activations[-1]

    def grads(self, gradients: ad.Gradients) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((gradients[w], gradients[b]))
        return out


def mlp_forward(params: MlpParams, x, tape: ad.Tape, *, trainable: bool = True) -> MlpForward:
    """Run ``x`` through every layer, keeping each layer's output on the tape."""
    x = tape.lift(x)
    if x.value.ndim != 2 or x.value.shape[1] != params.in_dim:
        raise DimensionError(f"input shape {x.value.shape} does not match in-dim {params.in_dim}")
    leaf = tape.param if trainable else tape.constant
    weights, biases, acts = [], [], []
    h = x
    for layer in params.layers:
        w = leaf(layer.weight)
        b = leaf(layer.bias)
        h = ad.matmul(h, w) + b
        if layer.activation == "relu":
            h = ad.relu(h)
        weights.append(w)
        biases.append(b)
        acts.append(h)
    return MlpForward(params, weights, biases, acts)


def predict(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Tape-free forward pass for evaluation."""
    h = np.asarray(x, dtype=np.float64)
    for layer in params.layers:
        h = h @ layer.weight + layer.bias
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


@dataclass(frozen=True)
class AdamState:
    m: tuple
    v: tuple
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, **kw) -> "AdamState":
        zeros = tuple(np.zeros_like(a) for a in params.arrays())
        return cls(zeros, tuple(np.zeros_like(a) for a in params.arrays()), 0, **kw)


def adam_step(params: MlpParams, grads: Sequence[np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``."""
    if lr <= 0:
        raise ContractError("learning rate must be > 0")
    arrays = params.arrays()
    if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
        raise ContractError("gradient shapes do not mirror parameter shapes")
    b1, b2, eps = state.beta1, state.beta2, state.eps
    t = state.t + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_arrays, new_m, new_v = [], [], []
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_arrays.append(p)
        new_m.append(m)
        new_v.append(v)
    if not all(np.all(np.isfinite(p)) for p in new_arrays):
        raise DomainError("non-finite parameter after Adam step")
    new_state = AdamState(tuple(new_m), tuple(new_v), t, b1, b2, eps)
    return params.with_arrays(new_arrays), new_state


def lr_schedule(progress: float, base: float = 0.01) -> float:
    """Decaying rate ``base / (1 + 10 p)^0.75`` for training progress ``p`` in (0, 1]."""
    if not 0.0 < progress <= 1.0:
        raise ContractError(f"progress must lie in (0, 1], got {progress}")
    return base / (1.0 + 10.0 * progress) ** 0.75


# --- checkpoints ---------------------------------------------------------

MAGIC = b"FLED"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: MlpParams) -> bytes:
    """Little-endian: magic, version u32, layer count u32, then per layer
    in u32, out u32, row-major f64 weights, f64 bias."""
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.layers))]
    for layer in params.layers:
        parts.append(struct.pack("<II", layer.fan_in, layer.fan_out))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def params_from_bytes(blob: bytes) -> MlpParams:
    """Inverse of :func:`checkpoint_bytes`.  Activations follow the package
    convention (relu hidden, linear last) since the format does not store them."""
    if blob[:4] != MAGIC:
        raise DataError("not a FLED checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        off = 12
        layers = []
        for i in range(count):
            fan_in, fan_out = struct.unpack_from("<II", blob, off)
            off += 8
            w = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=off)
            off += 8 * fan_in * fan_out
            b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off)
            off += 8 * fan_out
            act = "relu" if i < count - 1 else "none"
            layers.append(Layer(_frozen(w.reshape(fan_in, fan_out)), _frozen(b), act))
    except (struct.error, ValueError) as exc:
        raise DataError(f"truncated checkpoint: {exc}") from exc
    if off != len(blob):
        raise DataError("trailing bytes after checkpoint")
    return MlpParams(tuple(layers))


def save_checkpoint(params: MlpParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> MlpParams:
    return params_from_bytes(Path(path).read_bytes())
