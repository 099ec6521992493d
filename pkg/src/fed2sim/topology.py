"""Ring/mesh adjacency and closed-form per-node communication cost."""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np


class TopologyError(ValueError):
    pass


@dataclass
class TopologyGraph:
    kind: str
    W: np.ndarray  # symmetric, zero diagonal; W[i, j] = bytes exchanged on edge (i, j)

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.W, 1))
        return list(zip(i.tolist(), j.tolist()))

    @property
    def total_weight(self) -> float:
        return float(np.triu(self.W, 1).sum())


def build_topology(kind: str, n: int, edge_cost: Callable[[int, int], float] | None = None,
                   closed: bool = False) -> TopologyGraph:
    """Ring: edge iff ``|i - j| == 1`` (``closed`` adds the ``(0, n-1)`` wraparound). Mesh: all pairs."""
    if n < 2:
        raise TopologyError("a topology needs at least 2 nodes")
    if kind not in ("ring", "mesh"):
        raise TopologyError(f"unknown topology {kind!r}")
    cost = edge_cost or (lambda i, j: 1.0)
    W = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            linked = (j - i == 1 or (closed and i == 0 and j == n - 1 and n > 2)) if kind == "ring" else True
            if linked:
                W[i, j] = W[j, i] = float(cost(i, j))
    return TopologyGraph(kind, W)


@dataclass
class CostModelParams:
    """Inputs of the communication-cost formulas.

    ``k[i-1]`` is the kernel width of conv layer i (1-based, i = 1..L) and
    ``f[i-1]`` the input channels of layer i, so ``f`` has L + 1 entries and
    ``f[i]`` is the filter count of layer i. ``B_w`` is the size of one weight;
    costs come out in the same unit.
    """

    L: int
    D: int
    B_w: float
    k: list[float]
    f: list[float]
    P: float = 1
    F_r: float = 1.0
    R: float = 1
    N: int = 1

    def validate(self):
        if not 0 <= self.D <= self.L:
            raise TopologyError(f"need 0 <= D <= L, got D={self.D}, L={self.L}")
        if len(self.k) != self.L or len(self.f) != self.L + 1:
            raise TopologyError(f"need {self.L} kernel widths and {self.L + 1} channel counts")
        if not 0 < self.F_r <= 1:
            raise TopologyError("F_r must lie in (0, 1]")
        if self.R < 1:
            raise TopologyError("R must be >= 1")

    def term(self, i: int) -> float:
        """``B_w * f_{i+1} * k_i^2`` for 1-based layer ``i``."""
        if not 1 <= i <= self.L:
            raise TopologyError(f"layer index {i} outside [1, {self.L}]")
        return self.B_w * self.f[i] * self.k[i - 1] ** 2


def _sums(p: CostModelParams, corrected: bool) -> tuple[float, float]:
    p.validate()
    shared = sum(p.term(i) for i in range(1, p.L - p.D + 1))
    # literal ranges: second sum runs i = D..L; index 0 does not exist, so D = 0 starts at 1
    lo = p.L - p.D + 1 if corrected else max(p.D, 1)
    decoupled = sum(p.term(i) * p.F_r for i in range(lo, p.L + 1))
    return shared, decoupled


def cost_centralized(p: CostModelParams, corrected: bool = False) -> float:
    """Data downloaded per node with a central server.

    ``Q = sum_{i=1}^{L-D} B_w f_{i+1} k_i^2 + P sum_{i=D}^{L} B_w f_{i+1} F_r k_i^2``.
    The printed index ranges overlap; ``corrected=True`` uses ``L-D+1..L`` for the second sum.
    """
    shared, dec = _sums(p, corrected)
    return shared + p.P * dec


def cost_mesh(p: CostModelParams, corrected: bool = False) -> float:
    """``Q = N sum_{i=1}^{L-D} B_w f_{i+1} k_i^2 + P (R-1) sum_{i=D}^{L} B_w f_{i+1} F_r k_i^2``."""
    shared, dec = _sums(p, corrected)
    return p.N * shared + p.P * (p.R - 1) * dec


INTEGER_PARAMS = ("L", "D", "N")


def cost_sweep(base: CostModelParams, sweep: dict[str, list], corrected: bool = False) -> list[dict]:
    """Vary one parameter at a time over the given values; one row per evaluated point."""
    rows = []
    names = [f.name for f in fields(CostModelParams)]
    for name, values in sweep.items():
        if name not in names:
            raise TopologyError(f"unknown cost parameter {name!r}")
        for v in values:
            if name in INTEGER_PARAMS:
                if float(v) != int(v):
                    raise TopologyError(f"{name} must be an integer, got {v}")
                v = int(v)
            p = CostModelParams(**{**base.__dict__, name: v})
            rows.append({"param": name, "value": v, "L": p.L, "D": p.D, "B_w": p.B_w, "P": p.P,
                         "F_r": p.F_r, "R": p.R, "N": p.N,
                         "Q_centralized": cost_centralized(p, corrected),
                         "Q_mesh": cost_mesh(p, corrected)})
    return rows


def write_cost_csv(path, rows: list[dict]):
    cols = ["param", "value", "L", "D", "B_w", "P", "F_r", "R", "N", "Q_centralized", "Q_mesh"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
