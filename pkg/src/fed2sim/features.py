"""Per-neuron class preference vectors and the layer/cohort statistics built on them.

A neuron's preference for class c is the sum, over the probe batches of class c
(and over spatial positions for a conv filter), of its activation times the
gradient of the class-c logit with respect to that activation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .nn.model import Model, backward_logits, forward

Probe = dict  # class index -> list of input batches


class ProbeError(ValueError):
    pass


@dataclass
class PreferenceVector:
    P: np.ndarray
    layer: int
    neuron: int

    @property
    def top_class(self) -> int:
        return top_class(self.P)


@dataclass
class LayerEncoding:
    layer: int
    top_classes: list[int]


def top_class(P: np.ndarray) -> int:
    """Argmax with lowest-index tie-break."""
    return int(np.argmax(P))


def check_probe(probe: Probe, C: int):
    missing = [c for c in range(C) if not probe.get(c)]
    if missing:
        raise ProbeError(f"probe is missing classes {missing}")


def preference_matrices(model: Model, probe: Probe) -> list[np.ndarray]:
    """One ``[neurons, C]`` matrix per hidden weighted layer (in layer order)."""
    C = model.class_count
    check_probe(probe, C)
    layers = model.neuron_layers()
    out = [np.zeros((nl.size, C)) for nl in layers]
    for c in range(C):
        for xb in probe[c]:
            logits, cache = forward(model, xb)
            seed = np.zeros_like(logits)
            seed[:, c] = 1.0
            gs = backward_logits(model, cache, seed, keep_activation_grads=True)
            for P, nl in zip(out, layers):
                a = cache.outputs[nl.output_module]
                da = gs.activation_grads[nl.output_module]
                red = (0,) + tuple(range(2, a.ndim))
                P[:, c] += (a * da).sum(axis=red)
    return out


def preference_vector(model: Model, probe: Probe, layer: int, neuron: int) -> PreferenceVector:
    P = preference_matrices(model, probe)[layer]
    return PreferenceVector(P[neuron].copy(), layer, neuron)


def encode(P: np.ndarray, signed: bool = True) -> list[int]:
    """Top class per neuron; ``signed=False`` clips negative preferences to zero first."""
    if not signed:
        P = np.maximum(P, 0.0)
    return [top_class(row) for row in P]


def layer_encoding(model: Model, probe: Probe, layer: int, signed: bool = True) -> LayerEncoding:
    return LayerEncoding(layer, encode(preference_matrices(model, probe)[layer], signed))


def layer_total_variance(P: np.ndarray) -> float:
    """Mean Euclidean distance of a layer's preference vectors from their mean."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or len(P) == 0:
        raise ValueError("need a non-empty [neurons, C] matrix")
    return float(np.linalg.norm(P - P.mean(axis=0), axis=1).mean())


def tv_profile(model: Model, probe: Probe) -> list[float]:
    return [layer_total_variance(P) for P in preference_matrices(model, probe)]


def select_decouple_depth(profile, tau: float) -> int | None:
    """Smallest layer whose TV exceeds ``tau * max(TV)``; None when the profile is all zero."""
    prof = np.asarray(profile, dtype=np.float64)
    if prof.size == 0:
        raise ValueError("empty TV profile")
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    top = prof.max()
    if top <= 0:
        return None
    return int(np.flatnonzero(prof > tau * top)[0])


def _normalise(P: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(P, axis=-1, keepdims=True)
    return np.divide(P, n, out=np.zeros_like(P), where=n > 0)


def pair_distance(P1: np.ndarray, P2: np.ndarray) -> np.ndarray:
    """Row-wise distance between L2-normalised preference vectors.

    Zero vs zero is 0 and zero vs non-zero is 1.
    """
    z1 = np.linalg.norm(P1, axis=-1) == 0
    z2 = np.linalg.norm(P2, axis=-1) == 0
    d = np.linalg.norm(_normalise(P1) - _normalise(P2), axis=-1)
    d = np.where(z1 & z2, 0.0, d)
    return np.where(z1 ^ z2, 1.0, d)


def alignment_from_preferences(prefs: list[list[np.ndarray]]) -> float:
    """Sum of pairwise normalised distances over client pairs, layers and neurons."""
    total = 0.0
    for a, b in combinations(range(len(prefs)), 2):
        for Pa, Pb in zip(prefs[a], prefs[b]):
            total += float(pair_distance(Pa, Pb).sum())
    return total


def agreement_from_preferences(prefs: list[list[np.ndarray]], signed: bool = True) -> float:
    """Fraction of (client pair, layer, neuron) triples whose top classes agree."""
    agree = n = 0
    for a, b in combinations(range(len(prefs)), 2):
        for Pa, Pb in zip(prefs[a], prefs[b]):
            ea, eb = np.array(encode(Pa, signed)), np.array(encode(Pb, signed))
            agree += int((ea == eb).sum())
            n += len(ea)
    return agree / n if n else 1.0


def _check_cohort(clients: list[Model]):
    ref = clients[0]
    for m in clients[1:]:
        if m.spec != ref.spec or not m.same_structure(ref):
            raise ValueError("all clients must share one model spec")


def alignment_distance(clients: list[Model], probe: Probe) -> float:
    _check_cohort(clients)
    return alignment_from_preferences([preference_matrices(m, probe) for m in clients])


def write_encoding_csv(path, prefs: list[list[np.ndarray]], signed: bool = True):
    """Rows: client, layer, neuron, top_class, p_0..p_{C-1}."""
    C = prefs[0][0].shape[1] if prefs and prefs[0] else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "layer", "neuron", "top_class"] + [f"p_{c}" for c in range(C)])
        for n, layers in enumerate(prefs):
            for l, P in enumerate(layers):
                for i, (row, tc) in enumerate(zip(P, encode(P, signed))):
                    w.writerow([n, l, i, tc] + [repr(float(v)) for v in row])


def read_encoding_csv(path) -> list[list[np.ndarray]]:
    rows: dict[tuple[int, int], dict[int, list[float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            P = [float(v) for k, v in r.items() if k.startswith("p_")]
            rows.setdefault((int(r["client"]), int(r["layer"])), {})[int(r["neuron"])] = P
    clients = sorted({k[0] for k in rows})
    out = []
    for n in clients:
        layers = sorted(l for (cn, l) in rows if cn == n)
        out.append([np.array([rows[(n, l)][i] for i in sorted(rows[(n, l)])]) for l in layers])
    return out


def write_tv_csv(path, profile):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "tv"])
        for l, v in enumerate(profile):
            w.writerow([l, repr(float(v))])
    return Path(path)
