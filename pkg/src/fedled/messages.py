"""The only objects that cross party boundaries.

No variant has a field that could hold a raw input sample: agents upload
latent features, the server returns feature gradients plus classifier
parameters, and only :class:`SourceBatch` carries labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedled.models import MlpParams


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SourceBatch:
    features: np.ndarray  # (n, d_f)
    labels: np.ndarray  # (n,)
    tag = 1

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))


@dataclass(frozen=True, eq=False)
class TargetBatch:
    features: np.ndarray
    tag = 2

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features))


@dataclass(frozen=True, eq=False)
class GradToSource:
    grad: np.ndarray  # dL/df_S
    classifier: MlpParams
    tag = 3

    def __post_init__(self):
        object.__setattr__(self, "grad", _frozen(self.grad))


@dataclass(frozen=True, eq=False)
class GradToTarget:
    grad: np.ndarray
    classifier: MlpParams
    tag = 4

    def __post_init__(self):
        object.__setattr__(self, "grad", _frozen(self.grad))


@dataclass(frozen=True)
class EpochEnd:
    tag = 5


@dataclass(frozen=True)
class Shutdown:
    tag = 6


MESSAGE_TYPES = {cls.tag: cls for cls in (SourceBatch, TargetBatch, GradToSource, GradToTarget, EpochEnd, Shutdown)}


def message_equal(a, b) -> bool:
    """Bit-exact structural equality (NaN-free payloads assumed)."""
    if type(a) is not type(b):
        return False
    if isinstance(a, SourceBatch):
        return _same(a.features, b.features) and _same(a.labels, b.labels)
    if isinstance(a, TargetBatch):
        return _same(a.features, b.features)
    if isinstance(a, (GradToSource, GradToTarget)):
        return _same(a.grad, b.grad) and a.classifier.equals(b.classifier)
    return True


def _same(x, y) -> bool:
    return x.shape == y.shape and x.dtype == y.dtype and x.tobytes() == y.tobytes()


def payload_fields(msg) -> dict:
    """Named array fields of a message, in wire order.  Label fields start with ``y``."""
    if isinstance(msg, SourceBatch):
        return {"f_S": msg.features, "y_S": msg.labels}
    if isinstance(msg, TargetBatch):
        return {"f_T": msg.features}
    if isinstance(msg, GradToSource):
        return {"dL_dfS": msg.grad, **_param_fields(msg.classifier)}
    if isinstance(msg, GradToTarget):
        return {"dL_dfT": msg.grad, **_param_fields(msg.classifier)}
    return {}


def _param_fields(params: MlpParams) -> dict:
    out = {}
    for i, layer in enumerate(params.layers):
        out[f"theta_C.{i}.w"] = layer.weight
        out[f"theta_C.{i}.b"] = layer.bias
    return out
