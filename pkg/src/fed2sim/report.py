"""Feature-encoding heatmaps (SVG) and side-by-side comparison of two metric files."""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .features import encode
from .federation import read_metrics_csv

# categorical palette (Tableau 20), cycled when there are more classes
PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94",
           "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5"]


def class_colour(c: int) -> str:
    return PALETTE[c % len(PALETTE)]


def heatmap_svg(prefs: list[list[np.ndarray]], class_count: int, signed: bool = True, cell: int = 10) -> str:
    """One panel per layer; each panel has a row per client and a cell per neuron coloured by top class."""
    n_clients = len(prefs)
    n_layers = len(prefs[0]) if prefs else 0
    label_w, title_h, gap = 70, 16, 14
    widths = [prefs[0][l].shape[0] for l in range(n_layers)]
    width = label_w + cell * max(widths + [class_count]) + 10
    panel_h = title_h + n_clients * cell + gap
    legend_h = 2 * cell + 10
    height = n_layers * panel_h + legend_h
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="9">']
    y = 0
    for l in range(n_layers):
        parts.append(f'<text x="2" y="{y + 11}">layer {l}</text>')
        y += title_h
        for n in range(n_clients):
            parts.append(f'<text x="2" y="{y + cell - 1}">client {n}</text>')
            for i, c in enumerate(encode(prefs[n][l], signed)):
                parts.append(f'<rect x="{label_w + i * cell}" y="{y}" width="{cell}" height="{cell}" '
                             f'fill="{class_colour(c)}"><title>{escape(f"client {n} neuron {i}: class {c}")}'
                             f'</title></rect>')
            y += cell
        y += gap
    parts.append(f'<text x="2" y="{y + cell - 1}">classes</text>')
    for c in range(class_count):
        x = label_w + c * cell
        parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{class_colour(c)}"/>')
        parts.append(f'<text x="{x + 1}" y="{y + 2 * cell}">{c}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_heatmap_svg(path, prefs, class_count: int, signed: bool = True) -> Path:
    Path(path).write_text(heatmap_svg(prefs, class_count, signed), encoding="utf-8")
    return Path(path)


def _num(v: str) -> float | None:
    return float(v) if v not in ("", None) else None


def _delta(a, b):
    return None if a is None or b is None else b - a


def compare_metrics(path_a, path_b) -> list[dict]:
    """Per-round deltas ``b - a`` of accuracy and alignment distance."""
    ra, rb = read_metrics_csv(path_a), read_metrics_csv(path_b)
    if len(ra) != len(rb):
        raise ValueError(f"round counts differ: {len(ra)} in {path_a} vs {len(rb)} in {path_b}")
    rows = []
    for a, b in zip(ra, rb):
        acc_a, acc_b = float(a["accuracy"]), float(b["accuracy"])
        al_a, al_b = _num(a["alignment_distance"]), _num(b["alignment_distance"])
        rows.append({"round": int(a["round"]), "accuracy_a": acc_a, "accuracy_b": acc_b,
                     "accuracy_delta": acc_b - acc_a, "alignment_a": al_a, "alignment_b": al_b,
                     "alignment_delta": _delta(al_a, al_b)})
    return rows


COMPARE_FIELDS = ("round", "accuracy_a", "accuracy_b", "accuracy_delta", "alignment_a", "alignment_b",
                  "alignment_delta")


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def write_compare_csv(path, rows: list[dict]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_FIELDS)
        for r in rows:
            w.writerow([_cell(r[k]) for k in COMPARE_FIELDS])
    return Path(path)


def format_table(rows: list[dict]) -> str:
    def f(v, spec):
        return "-" if v is None else format(v, spec)

    lines = [f"{'round':>5} {'acc A':>8} {'acc B':>8} {'d acc':>8} {'align A':>11} {'align B':>11} {'d align':>11}"]
    for r in rows:
        lines.append(f"{r['round']:>5} {f(r['accuracy_a'], '.4f'):>8} {f(r['accuracy_b'], '.4f'):>8} "
                     f"{f(r['accuracy_delta'], '+.4f'):>8} {f(r['alignment_a'], '.3f'):>11} "
                     f"{f(r['alignment_b'], '.3f'):>11} {f(r['alignment_delta'], '+.3f'):>11}")
    if rows:
        last = rows[-1]
        lines.append(f"final-round accuracy delta (B - A): {f(last['accuracy_delta'], '+.4f')}; "
                     f"alignment delta: {f(last['alignment_delta'], '+.3f')}")
    return "\n".join(lines)
