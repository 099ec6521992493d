"""Layer parameter containers and the fixed set of layer modules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F

Bounds = list[tuple[int, int]]


class ShapeError(ValueError):
    """Input shape does not match what a layer expects."""

    def __init__(self, layer: int, kind: str, expected, actual):
        self.layer, self.kind, self.expected, self.actual = layer, kind, expected, actual
        super().__init__(f"layer {layer} ({kind}): expected input shape {expected}, got {actual}")


@dataclass
class LayerParams:
    """Parameters of one layer, stored per structure group.

    ``weights[g]`` / ``bias[g]`` hold group g's block. Ungrouped layers have a single
    block and empty ``group_boundaries``. For norm layers ``weights`` are the affine
    scales and ``bias`` the shifts.
    """

    layer_index: int
    kind: str
    weights: list[np.ndarray]
    bias: list[np.ndarray]
    group_boundaries: Bounds = field(default_factory=list)
    in_boundaries: Bounds = field(default_factory=list)

    @property
    def grouped(self) -> bool:
        return bool(self.group_boundaries)

    @property
    def num_blocks(self) -> int:
        return len(self.weights)

    @property
    def weight(self) -> np.ndarray:
        """All blocks stacked on the output axis (``[out, in/G, k, k]`` for equal groups)."""
        return np.concatenate(self.weights, axis=0)

    def block_group(self, g: int) -> int | None:
        return g if self.grouped else None

    def copy(self) -> "LayerParams":
        return LayerParams(self.layer_index, self.kind, [w.copy() for w in self.weights],
                           [b.copy() for b in self.bias], list(self.group_boundaries),
                           list(self.in_boundaries))

    def count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.bias)


def _out_bounds(p: LayerParams, out: int) -> Bounds:
    return p.group_boundaries or [(0, out)]


class Module:
    params: LayerParams | None = None
    kind = "module"

    def __init__(self, index: int):
        self.index = index

    def check(self, x):
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError


class Conv(Module):
    kind = "conv"

    def __init__(self, index, params: LayerParams, in_channels: int, out_channels: int):
        super().__init__(index)
        self.params = params
        self.in_channels = in_channels
        self.out_channels = out_channels

    @property
    def kernel(self) -> int:
        return self.params.weights[0].shape[-1]

    def _in_bounds(self):
        return self.params.in_boundaries or [(0, self.in_channels)]

    def check(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(self.index, self.params.kind, ("B", self.in_channels, "H", "W"), x.shape)

    def forward(self, x):
        self.check(x)
        p = self.params
        y, cols = F.group_conv_forward(x, p.weights, p.bias, self._in_bounds())
        return y, cols

    def backward(self, dout, cols):
        p = self.params
        dx, dws, dbs = F.group_conv_backward(dout, cols, p.weights, self._in_bounds(),
                                             _out_bounds(p, self.out_channels), self.in_channels)
        return dx, {"weight": dws, "bias": dbs}


class Dense(Module):
    kind = "dense"

    def __init__(self, index, params: LayerParams, in_features: int, out_features: int):
        super().__init__(index)
        self.params = params
        self.in_features = in_features
        self.out_features = out_features

    def _in_bounds(self):
        return self.params.in_boundaries or [(0, self.in_features)]

    def check(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(self.index, self.params.kind, ("B", self.in_features), x.shape)

    def forward(self, x):
        self.check(x)
        p = self.params
        return F.group_dense_forward(x, p.weights, p.bias, self._in_bounds()), x

    def backward(self, dout, x):
        p = self.params
        dx, dws, dbs = F.group_dense_backward(dout, x, p.weights, self._in_bounds(),
                                              _out_bounds(p, self.out_features))
        return dx, {"weight": dws, "bias": dbs}


class GroupNorm(Module):
    """Group normalisation; ``norm_bounds`` are the channel ranges normalised together."""

    kind = "group_norm"

    def __init__(self, index, params: LayerParams, channels: int, norm_bounds: Bounds, eps: float = 1e-5):
        super().__init__(index)
        self.params = params
        self.channels = channels
        self.norm_bounds = list(norm_bounds)
        self.eps = eps

    def check(self, x):
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeError(self.index, "group_norm", ("B", self.channels, "..."), x.shape)

    def forward(self, x):
        self.check(x)
        scale = np.concatenate(self.params.weights)
        shift = np.concatenate(self.params.bias)
        y, stats = F.group_norm_forward(x, scale, shift, self.norm_bounds, self.eps)
        return y, (stats, scale)

    def backward(self, dout, cache):
        stats, scale = cache
        dx, ds, db = F.group_norm_backward(dout, stats, scale, self.norm_bounds)
        return dx, {"weight": _split(ds, self.params), "bias": _split(db, self.params)}


class BatchNorm(Module):
    """Per-channel normalisation with batch statistics (comparison option only)."""

    kind = "batch_norm"

    def __init__(self, index, params: LayerParams, channels: int, eps: float = 1e-5):
        super().__init__(index)
        self.params = params
        self.channels = channels
        self.eps = eps

    def check(self, x):
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeError(self.index, "batch_norm", ("B", self.channels, "..."), x.shape)

    def forward(self, x):
        self.check(x)
        scale = np.concatenate(self.params.weights)
        shift = np.concatenate(self.params.bias)
        y, stat = F.batch_norm_forward(x, scale, shift, self.eps)
        return y, (stat, scale)

    def backward(self, dout, cache):
        stat, scale = cache
        dx, ds, db = F.batch_norm_backward(dout, stat, scale)
        return dx, {"weight": _split(ds, self.params), "bias": _split(db, self.params)}


def _split(v: np.ndarray, p: LayerParams) -> list[np.ndarray]:
    if not p.grouped:
        return [v]
    return [v[a:e].copy() for a, e in p.group_boundaries]


class ReLU(Module):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dout, mask):
        return np.where(mask, dout, 0.0), {}


class AvgPool(Module):
    kind = "pool"

    def __init__(self, index, size: int, channels: int):
        super().__init__(index)
        self.size = size
        self.channels = channels

    def check(self, x):
        if x.ndim != 4 or x.shape[2] % self.size or x.shape[3] % self.size:
            raise ShapeError(self.index, "pool", f"spatial dims divisible by {self.size}", x.shape)

    def forward(self, x):
        self.check(x)
        return F.avg_pool_forward(x, self.size), None

    def backward(self, dout, cache):
        return F.avg_pool_backward(dout, self.size), {}


class Flatten(Module):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, shape):
        return dout.reshape(shape), {}
