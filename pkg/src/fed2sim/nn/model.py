"""Model container, forward/backward passes and SGD."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from itertools import count

import numpy as np

from . import functional as F
from .layers import BatchNorm, Conv, Dense, GroupNorm, LayerParams, Module, ReLU, ShapeError

_model_ids = count()


class StaleCacheError(RuntimeError):
    """An activation cache was used with a model other than the one that produced it."""


@dataclass
class NeuronLayer:
    """A weighted hidden layer viewed as a set of feature neurons (filters or units)."""

    layer: int            # position among weighted layers
    module: int           # module index of the weighted op
    output_module: int    # module whose output is the neuron activation (after norm/activation)
    size: int
    group_boundaries: list[tuple[int, int]]


class Model:
    """An ordered stack of modules plus the metadata needed by the federation code."""

    def __init__(self, modules: list[Module], input_shape: tuple[int, ...], class_count: int,
                 spec=None, assignment=None):
        self.modules = modules
        self.input_shape = tuple(input_shape)
        self.class_count = class_count
        self.spec = spec
        self.assignment = assignment
        self.version = 0
        self._uid = next(_model_ids)

    @property
    def token(self):
        return (self._uid, self.version)

    def weighted_modules(self) -> list[Module]:
        return [m for m in self.modules if isinstance(m, (Conv, Dense))]

    def neuron_layers(self) -> list[NeuronLayer]:
        out = []
        weighted = [i for i, m in enumerate(self.modules) if isinstance(m, (Conv, Dense))]
        for li, mi in enumerate(weighted[:-1]):
            j = mi
            while j + 1 < len(self.modules) and isinstance(self.modules[j + 1], (GroupNorm, BatchNorm, ReLU)):
                j += 1
            m = self.modules[mi]
            size = m.out_channels if isinstance(m, Conv) else m.out_features
            out.append(NeuronLayer(li, mi, j, size, list(m.params.group_boundaries)))
        return out

    def layer_params(self) -> list[LayerParams]:
        return [m.params for m in self.modules if m.params is not None]

    def parameters(self):
        """Yield ``(key, array, group)``; group is None for ungrouped (shared) tensors."""
        for p in self.layer_params():
            for name, blocks in (("weight", p.weights), ("bias", p.bias)):
                for g, arr in enumerate(blocks):
                    yield f"{p.layer_index}.{name}.{g}", arr, p.block_group(g)

    def state(self) -> dict[str, np.ndarray]:
        return {k: a for k, a, _ in self.parameters()}

    def groups(self) -> dict[str, int | None]:
        return {k: g for k, _, g in self.parameters()}

    def param_count(self) -> int:
        return sum(p.count() for p in self.layer_params())

    def load_state(self, state: dict[str, np.ndarray]):
        for k, arr, _ in self.parameters():
            src = state[k]
            if src.shape != arr.shape:
                raise ValueError(f"parameter {k}: shape {src.shape} != {arr.shape}")
            arr[...] = src
        self.version += 1
        return self

    def copy(self) -> "Model":
        new = copy.deepcopy(self)
        new._uid = next(_model_ids)
        new.version = 0
        return new

    def same_structure(self, other: "Model") -> bool:
        a, b = self.state(), other.state()
        return a.keys() == b.keys() and all(a[k].shape == b[k].shape for k in a)


@dataclass
class ActivationCache:
    token: tuple
    inputs: np.ndarray
    caches: list
    outputs: list[np.ndarray]


@dataclass
class GradientSet:
    grads: dict[str, np.ndarray]
    loss: float | None = None
    activation_grads: list[np.ndarray] | None = field(default=None, repr=False)

    def __getitem__(self, key):
        return self.grads[key]

    def keys(self):
        return self.grads.keys()


def forward(model: Model, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(0, "input", ("B",) + model.input_shape, x.shape)
    caches, outputs = [], []
    h = x
    for m in model.modules:
        h, c = m.forward(h)
        caches.append(c)
        outputs.append(h)
    return h, ActivationCache(model.token, x, caches, outputs)


def backward_logits(model: Model, cache: ActivationCache, dlogits: np.ndarray,
                    keep_activation_grads: bool = False) -> GradientSet:
    """Backpropagate an arbitrary logit gradient. ``activation_grads[j]`` is d/d(output of module j)."""
    if cache.token != model.token:
        raise StaleCacheError("activation cache does not belong to this model state")
    if dlogits.shape != cache.outputs[-1].shape:
        raise ShapeError(len(model.modules) - 1, "logits", cache.outputs[-1].shape, dlogits.shape)
    grads: dict[str, np.ndarray] = {}
    act = [None] * len(model.modules) if keep_activation_grads else None
    d = dlogits
    for j in range(len(model.modules) - 1, -1, -1):
        m = model.modules[j]
        if act is not None:
            act[j] = d
        d, g = m.backward(d, cache.caches[j])
        for name, blocks in g.items():
            for gi, arr in enumerate(blocks):
                grads[f"{m.params.layer_index}.{name}.{gi}"] = arr
    ordered = {k: grads[k] for k, _, _ in model.parameters()}
    return GradientSet(ordered, activation_grads=act)


def backward(model: Model, cache: ActivationCache, labels) -> GradientSet:
    """Gradients of mean softmax cross-entropy w.r.t. every parameter."""
    labels = np.asarray(labels)
    logits = cache.outputs[-1]
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    loss, d = F.softmax_cross_entropy(logits, labels)
    gs = backward_logits(model, cache, d)
    gs.loss = loss
    return gs


def loss(model: Model, x, labels) -> float:
    logits, _ = forward(model, x)
    return F.softmax_cross_entropy(logits, np.asarray(labels))[0]


def sgd_step(model: Model, grads: GradientSet, lr: float) -> Model:
    """In-place ``w <- w - lr * grad``; returns ``model``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for k, arr, _ in model.parameters():
        g = grads.grads[k]
        if g.shape != arr.shape:
            raise ValueError(f"gradient {k}: shape {g.shape} != {arr.shape}")
        arr -= lr * g
    model.version += 1
    return model


def predict(model: Model, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    preds = []
    for s in range(0, len(x), chunk):
        logits, _ = forward(model, x[s:s + chunk])
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float((predict(model, x) == y).mean())
