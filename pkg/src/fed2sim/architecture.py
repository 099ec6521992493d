"""Declarative architectures and the grouped/decoupled structural adaptation.

A :class:`ModelSpec` lists layers; ``conv`` and ``dense`` entries are *weighted*
layers and the last weighted layer is the logit layer. Weighted layers at
positions ``>= shared_depth`` are split into ``num_groups`` channel groups, and
the logit layer is decoupled so that logit ``c`` only reads group ``g(c)``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .nn.layers import (AvgPool, BatchNorm, Conv, Dense, Flatten, GroupNorm, LayerParams,
                        ReLU)
from .nn.model import Model
from .rng import RngStream, as_generator

log = logging.getLogger(__name__)

WEIGHTED = ("conv", "dense")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerDesc:
    kind: str                      # conv | dense | pool | flatten
    out: int = 0                   # channels (conv) or features (dense)
    kernel: int = 3
    activation: str | None = "relu"
    norm: str | None = None        # gn | bn | None
    size: int = 2                  # pooling window

    def __post_init__(self):
        if self.kind not in ("conv", "dense", "pool", "flatten"):
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind in WEIGHTED and self.out < 1:
            raise SpecError(f"{self.kind} layer needs out >= 1")
        if self.kind == "conv" and self.kernel % 2 == 0:
            raise SpecError("conv kernel must be odd (same padding)")
        if self.norm not in (None, "gn", "bn"):
            raise SpecError(f"unknown norm {self.norm!r}")
        if self.activation not in (None, "relu"):
            raise SpecError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerDesc, ...]
    class_count: int
    shared_depth: int | None = None   # None: every weighted layer shared
    num_groups: int = 1
    norm_groups: int = 4              # GN groups in shared layers
    split_transition: bool = False    # first grouped layer reads only its own slice of shared channels

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        w = self.weighted_indices()
        if not w:
            raise SpecError("spec has no weighted layers")
        last = self.layers[w[-1]]
        if last.kind != "dense" or last.out != self.class_count:
            raise SpecError(f"final weighted layer must be dense with out={self.class_count}")
        if self.shared_depth is not None and not 0 <= self.shared_depth <= len(w):
            raise SpecError(f"shared_depth {self.shared_depth} outside [0, {len(w)}]")

    def weighted_indices(self) -> list[int]:
        return [i for i, d in enumerate(self.layers) if d.kind in WEIGHTED]

    @property
    def total_weighted(self) -> int:
        return len(self.weighted_indices())

    @property
    def depth(self) -> int:
        return self.total_weighted if self.shared_depth is None else self.shared_depth

    @property
    def decoupled(self) -> bool:
        return self.depth < self.total_weighted and self.num_groups >= 1 and self.shared_depth is not None

    def is_grouped(self, weighted_pos: int) -> bool:
        return self.decoupled and weighted_pos >= self.depth

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["layers"] = tuple(LayerDesc(**ld) for ld in d["layers"])
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


@dataclass(frozen=True)
class GroupAssignment:
    """Server-issued class-to-group map plus per-client group presence."""

    mapping: tuple[int, ...]
    num_groups: int
    presence: tuple[tuple[bool, ...], ...] = field(default_factory=tuple)

    def classes_of(self, g: int) -> tuple[int, ...]:
        return tuple(c for c, gc in enumerate(self.mapping) if gc == g)

    def group_of(self, c: int) -> int:
        return self.mapping[c]

    def class_bounds(self) -> list[tuple[int, int]]:
        out = []
        for g in range(self.num_groups):
            cs = self.classes_of(g)
            out.append((cs[0], cs[-1] + 1))
        return out

    def with_presence(self, client_classes: list) -> "GroupAssignment":
        """Mark group g present on a client iff the client holds any class of g."""
        pres = []
        for classes in client_classes:
            held = {int(c) for c in classes}
            pres.append(tuple(any(c in held for c in self.classes_of(g)) for g in range(self.num_groups)))
        return replace(self, presence=tuple(pres))


def channel_boundaries(n: int, groups: int) -> list[tuple[int, int]]:
    """``groups`` contiguous ranges of size ``n // groups``; the remainder goes to the last."""
    if groups < 1 or groups > n:
        raise SpecError(f"cannot split {n} channels into {groups} groups")
    size = n // groups
    b = [(g * size, (g + 1) * size) for g in range(groups)]
    b[-1] = (b[-1][0], n)
    return b


def assign_classes(C: int, G: int) -> GroupAssignment:
    """Contiguous chunking; the first ``C % G`` groups take one extra class."""
    if not 1 <= G <= C:
        raise SpecError(f"need 1 <= G <= C, got G={G}, C={C}")
    chunks = np.array_split(np.arange(C), G)
    mapping = [0] * C
    for g, ch in enumerate(chunks):
        for c in ch:
            mapping[int(c)] = g
    return GroupAssignment(tuple(mapping), G)


def _feature_shapes(spec: ModelSpec):
    """Yield the input shape seen by each layer."""
    shape = spec.input_shape
    out = []
    for d in spec.layers:
        out.append(shape)
        if d.kind == "conv":
            if len(shape) != 3:
                raise SpecError("conv layer needs a [C, H, W] input")
            shape = (d.out,) + shape[1:]
        elif d.kind == "dense":
            if len(shape) != 1:
                raise SpecError("dense layer needs a flat input; insert a flatten layer")
            shape = (d.out,)
        elif d.kind == "pool":
            if len(shape) != 3 or shape[1] % d.size or shape[2] % d.size:
                raise SpecError(f"pool size {d.size} does not divide spatial shape {shape[1:]}")
            shape = (shape[0], shape[1] // d.size, shape[2] // d.size)
        elif d.kind == "flatten":
            shape = (int(np.prod(shape)),)
    return out


def adapt(base: ModelSpec, D_share: int, G: int) -> ModelSpec:
    """Keep the first ``D_share`` weighted layers dense and split the rest into ``G`` groups."""
    total = base.total_weighted
    if not 0 <= D_share <= total:
        raise SpecError(f"D_share={D_share} outside [0, {total}]")
    if G < 1 or G > base.class_count:
        raise SpecError(f"G={G} must be in [1, C={base.class_count}]")
    if D_share == total:
        log.warning("D_share equals the number of weighted layers: nothing is decoupled")
        return replace(base, shared_depth=None, num_groups=1)
    shapes = _feature_shapes(base)
    for pos, i in enumerate(base.weighted_indices()):
        if pos < D_share:
            continue
        d = base.layers[i]
        if d.out < G:
            raise SpecError(f"layer {i} has {d.out} channels, fewer than G={G}")
        if pos == D_share and base.split_transition and shapes[i][0] < G:
            raise SpecError(f"layer {i} input has {shapes[i][0]} channels, fewer than G={G}")
    return replace(base, shared_depth=D_share, num_groups=G)


def _norm_bounds(channels: int, groups: int, layer: int) -> list[tuple[int, int]]:
    if channels % groups:
        raise SpecError(f"layer {layer}: {channels} channels not divisible into {groups} norm groups")
    s = channels // groups
    return [(g * s, (g + 1) * s) for g in range(groups)]


def instantiate(spec: ModelSpec, rng: RngStream | int | None = 0, zero: bool = False) -> Model:
    """Allocate parameters with He-uniform fan-in init (biases 0, norm scale 1 / shift 0)."""
    gen = as_generator(rng)
    shapes = _feature_shapes(spec)
    assignment = assign_classes(spec.class_count, spec.num_groups) if spec.decoupled else None
    modules = []
    feat_groups = None  # channel groups of the current activation, if grouped
    weighted = spec.weighted_indices()
    for i, d in enumerate(spec.layers):
        in_shape = shapes[i]
        if d.kind == "pool":
            modules.append(AvgPool(len(modules), d.size, in_shape[0]))
            continue
        if d.kind == "flatten":
            if feat_groups is not None:
                hw = int(np.prod(in_shape[1:]))
                feat_groups = [(a * hw, e * hw) for a, e in feat_groups]
            modules.append(Flatten(len(modules)))
            continue
        pos = weighted.index(i)
        grouped = spec.is_grouped(pos)
        n_in = in_shape[0]
        if grouped:
            G = spec.num_groups
            if feat_groups is not None:
                in_b = feat_groups
            elif spec.split_transition:
                in_b = channel_boundaries(n_in, G)
            else:
                in_b = [(0, n_in)] * G
            if pos == len(weighted) - 1:
                out_b = assignment.class_bounds()
            else:
                out_b = channel_boundaries(d.out, G)
        else:
            in_b, out_b = [(0, n_in)], [(0, d.out)]
        k = d.kernel if d.kind == "conv" else 1
        ws, bs = [], []
        for (a, e), (oa, oe) in zip(in_b, out_b):
            shape = (oe - oa, e - a, k, k) if d.kind == "conv" else (oe - oa, e - a)
            bound = np.sqrt(6.0 / ((e - a) * k * k))
            w = np.zeros(shape) if zero else gen.uniform(-bound, bound, size=shape)
            ws.append(w)
            bs.append(np.zeros(oe - oa))
        idx = len(modules)
        kind = ("group_" if grouped else "") + d.kind
        params = LayerParams(idx, kind, ws, bs, out_b if grouped else [], in_b if grouped else [])
        if d.kind == "conv":
            modules.append(Conv(idx, params, n_in, d.out))
        else:
            modules.append(Dense(idx, params, n_in, d.out))
        feat_groups = out_b if grouped else None
        if d.norm is not None:
            idx = len(modules)
            nb = out_b if grouped else None
            scales = [np.ones(oe - oa) for oa, oe in out_b]
            shifts = [np.zeros(oe - oa) for oa, oe in out_b]
            if d.norm == "gn":
                np_ = LayerParams(idx, "group_norm", scales, shifts, out_b if grouped else [])
                nbounds = nb if grouped else _norm_bounds(d.out, spec.norm_groups, i)
                modules.append(GroupNorm(idx, np_, d.out, nbounds))
            else:
                np_ = LayerParams(idx, "batch_norm", scales, shifts, out_b if grouped else [])
                modules.append(BatchNorm(idx, np_, d.out))
        if d.activation == "relu":
            modules.append(ReLU(len(modules)))
    return Model(modules, spec.input_shape, spec.class_count, spec=spec, assignment=assignment)


def analytic_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count of :func:`instantiate`'s output."""
    shapes = _feature_shapes(spec)
    weighted = spec.weighted_indices()
    G = spec.num_groups
    total = 0
    prev_grouped = False
    for i in weighted:
        d = spec.layers[i]
        pos = weighted.index(i)
        n_in = shapes[i][0]
        k2 = d.kernel ** 2 if d.kind == "conv" else 1
        if spec.is_grouped(pos):
            # block-diagonal: each output group reads one input group
            if pos == len(weighted) - 1:
                outs = [e - a for a, e in assign_classes(spec.class_count, G).class_bounds()]
            else:
                outs = [e - a for a, e in channel_boundaries(d.out, G)]
            if prev_grouped:
                prev = spec.layers[weighted[pos - 1]]
                hw = n_in // prev.out
                ins = [(e - a) * hw for a, e in channel_boundaries(prev.out, G)]
            elif spec.split_transition:
                ins = [e - a for a, e in channel_boundaries(n_in, G)]
            else:
                ins = [n_in] * G
            total += sum(o * n * k2 for o, n in zip(outs, ins))
            prev_grouped = True
        else:
            total += d.out * n_in * k2
            prev_grouped = False
        total += d.out + (2 * d.out if d.norm else 0)
    return total


def vgg_like(input_shape=(1, 8, 8), class_count: int = 10, widths=(8, 16), fc: int = 20,
             norm: str | None = "gn") -> ModelSpec:
    """A small VGG-style CNN: two conv stages of two convs each, one hidden FC, logits."""
    layers = []
    for wdt in widths:
        layers += [LayerDesc("conv", wdt, norm=norm), LayerDesc("conv", wdt, norm=norm), LayerDesc("pool")]
    layers += [LayerDesc("flatten"), LayerDesc("dense", fc, norm=None),
               LayerDesc("dense", class_count, activation=None)]
    return ModelSpec(tuple(input_shape), tuple(layers), class_count)
