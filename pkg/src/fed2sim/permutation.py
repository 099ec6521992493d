"""Lossless channel re-permutation of consecutive layers and averaging-conflict reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .features import encode, preference_matrices
from .nn.layers import BatchNorm, Conv, Dense, GroupNorm, LayerParams
from .nn.model import Model
from .rng import as_generator


class PermutationError(ValueError):
    pass


@dataclass(frozen=True)
class PermutationMatrix:
    """A permutation stored as an index map: row ``i`` of the permuted layer is old row ``index[i]``."""

    index: tuple[int, ...]

    def __post_init__(self):
        idx = np.asarray(self.index)
        if sorted(idx.tolist()) != list(range(len(idx))):
            raise PermutationError("index map is not a bijection on [0, n)")
        object.__setattr__(self, "index", tuple(int(i) for i in idx))

    @classmethod
    def identity(cls, n: int) -> "PermutationMatrix":
        return cls(tuple(range(n)))

    @classmethod
    def random(cls, n: int, rng=None, blocks=None) -> "PermutationMatrix":
        """Random permutation; with ``blocks`` (equal-size ranges) it maps blocks onto blocks."""
        gen = as_generator(rng)
        if not blocks:
            return cls(tuple(gen.permutation(n)))
        sizes = {e - a for a, e in blocks}
        if len(sizes) != 1:
            raise PermutationError("block-preserving permutation needs equal block sizes")
        order = gen.permutation(len(blocks))
        idx = []
        for b in order:
            a, e = blocks[b]
            idx.extend(a + gen.permutation(e - a))
        return cls(tuple(idx))

    def __len__(self):
        return len(self.index)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.index, dtype=np.int64)

    def transpose(self) -> "PermutationMatrix":
        return PermutationMatrix(tuple(np.argsort(self.array)))

    def compose(self, other: "PermutationMatrix") -> "PermutationMatrix":
        """Apply ``self`` then ``other``."""
        return PermutationMatrix(tuple(self.array[other.array]))

    def matrix(self) -> np.ndarray:
        """Dense 0/1 matrix ``Pi`` with ``(Pi^T w)[i] = w[index[i]]``."""
        n = len(self)
        m = np.zeros((n, n))
        m[self.array, np.arange(n)] = 1.0
        return m


def _single(p: LayerParams, what: str):
    if p.num_blocks != 1:
        raise PermutationError(f"{what} layer {p.layer_index} is grouped; only dense/conv layers permute")


def repermute_pair(next_params: LayerParams, this_params: LayerParams, perm: PermutationMatrix,
                   spatial: int = 1) -> tuple[LayerParams, LayerParams]:
    """Permute the output channels of ``this`` and the matching inputs of ``next``.

    ``spatial`` is the number of flattened positions per channel when ``next`` is a
    dense layer reading a flattened conv output.
    """
    _single(this_params, "this")
    _single(next_params, "next")
    idx = perm.array
    w_this = this_params.weights[0]
    if w_this.shape[0] != len(idx):
        raise PermutationError(f"permutation of size {len(idx)} vs {w_this.shape[0]} output channels")
    w_next = next_params.weights[0]
    if w_next.shape[1] != len(idx) * spatial:
        raise PermutationError(f"next layer has {w_next.shape[1]} inputs, expected {len(idx) * spatial}")
    this = this_params.copy()
    nxt = next_params.copy()
    this.weights[0] = w_this[idx]
    this.bias[0] = this_params.bias[0][idx]
    if spatial == 1:
        nxt.weights[0] = w_next[:, idx]
    else:
        cols = (idx[:, None] * spatial + np.arange(spatial)).ravel()
        nxt.weights[0] = w_next[:, cols]
    return nxt, this


def _blocks_preserved(perm: np.ndarray, bounds) -> bool:
    sets = [frozenset(range(a, e)) for a, e in bounds]
    return all(frozenset(perm[a:e].tolist()) in sets for a, e in bounds)


def permute_layer(model: Model, layer: int, perm: PermutationMatrix) -> Model:
    """Return a copy of ``model`` with hidden weighted layer ``layer``'s channels re-permuted.

    Bias and any norm affine parameters follow the output channels; the next
    weighted layer's input channels are permuted to compensate.
    """
    new = model.copy()
    mods = new.modules
    weighted = [i for i, m in enumerate(mods) if isinstance(m, (Conv, Dense))]
    if not 0 <= layer < len(weighted) - 1:
        raise PermutationError(f"layer {layer} has no following weighted layer")
    mi, ni = weighted[layer], weighted[layer + 1]
    idx = perm.array
    spatial = 1
    for j in range(mi + 1, ni):
        m = mods[j]
        if isinstance(m, GroupNorm):
            _single(m.params, "norm")
            if not _blocks_preserved(idx, m.norm_bounds):
                raise PermutationError(f"permutation mixes normalisation groups of layer {j}")
            m.params.weights[0] = m.params.weights[0][idx]
            m.params.bias[0] = m.params.bias[0][idx]
        elif isinstance(m, BatchNorm):
            _single(m.params, "norm")
            m.params.weights[0] = m.params.weights[0][idx]
            m.params.bias[0] = m.params.bias[0][idx]
    if isinstance(mods[mi], Conv) and isinstance(mods[ni], Dense):
        spatial = mods[ni].in_features // mods[mi].out_channels
    nxt, this = repermute_pair(mods[ni].params, mods[mi].params, perm, spatial)
    mods[mi].params.weights, mods[mi].params.bias = this.weights, this.bias
    mods[ni].params.weights = nxt.weights
    new.version += 1
    return new


def permutable_layers(model: Model) -> list[int]:
    """Hidden weighted layers whose output channels can be permuted without changing the function."""
    weighted = [i for i, m in enumerate(model.modules) if isinstance(m, (Conv, Dense))]
    out = []
    for l, (mi, ni) in enumerate(zip(weighted, weighted[1:])):
        if model.modules[mi].params.num_blocks == 1 and model.modules[ni].params.num_blocks == 1:
            out.append(l)
    return out


def _norm_blocks(model: Model, layer: int):
    weighted = [i for i, m in enumerate(model.modules) if isinstance(m, (Conv, Dense))]
    mi, ni = weighted[layer], weighted[layer + 1]
    for j in range(mi + 1, ni):
        if isinstance(model.modules[j], GroupNorm):
            return model.modules[j].norm_bounds
    return None


def scramble(model: Model, rng=None, identity: bool = False) -> Model:
    """Independently re-permute every permutable hidden layer; the function is unchanged."""
    gen = as_generator(rng)
    out = model
    for l in permutable_layers(model):
        n = out.neuron_layers()[l].size
        perm = PermutationMatrix.identity(n) if identity else PermutationMatrix.random(n, gen, _norm_blocks(out, l))
        out = permute_layer(out, l, perm)
    return out


def scramble_clients(clients: list[Model], rng=None, identity: bool = False) -> list[Model]:
    gen = as_generator(rng)
    return [scramble(m, gen, identity) for m in clients]


@dataclass
class ConflictReport:
    """``disagreement[l][i]``: fraction of client pairs whose top classes differ at neuron i of layer l."""

    disagreement: list[np.ndarray]

    @property
    def layer_mean(self) -> list[float]:
        return [float(d.mean()) for d in self.disagreement]

    @property
    def overall(self) -> float:
        allv = np.concatenate(self.disagreement) if self.disagreement else np.zeros(0)
        return float(allv.mean()) if allv.size else 0.0

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "neuron", "disagreement", "layer_mean"])
            for l, d in enumerate(self.disagreement):
                m = float(d.mean())
                for i, v in enumerate(d):
                    w.writerow([l, i, repr(float(v)), repr(m)])


def conflict_from_preferences(prefs: list[list[np.ndarray]], signed: bool = True) -> ConflictReport:
    enc = [[np.array(encode(P, signed)) for P in layers] for layers in prefs]
    n_layers = len(enc[0]) if enc else 0
    out = []
    pairs = list(combinations(range(len(enc)), 2))
    for l in range(n_layers):
        d = np.zeros(len(enc[0][l]))
        for a, b in pairs:
            d += enc[a][l] != enc[b][l]
        out.append(d / len(pairs) if pairs else d)
    return ConflictReport(out)


def conflict_report(clients: list[Model], probe, signed: bool = True) -> ConflictReport:
    return conflict_from_preferences([preference_matrices(m, probe) for m in clients], signed)
