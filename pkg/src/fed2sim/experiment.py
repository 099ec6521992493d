"""Build data, partition and model from a config, run the federation, write the artifacts."""
from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as rngmod
from .architecture import LayerDesc, ModelSpec, adapt, vgg_like
from .config import CostBlock, ExperimentConfig, IdxData
from .data import (Dataset, _read_idx, load_idx, make_probe, partition_dirichlet, partition_nxc,
                   split_train_test, synth_gaussian)
from .federation import FederationConfig, FederationResult, run_federation, write_metrics_csv
from .features import tv_profile, write_encoding_csv, write_tv_csv
from .permutation import conflict_from_preferences
from .report import write_heatmap_svg
from .rng import RngStream
from .topology import CostModelParams, cost_sweep, write_cost_csv


MANIFEST_FORMAT = "fed2sim-manifest/1"


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _limit(ds: Dataset, per_class: int | None) -> Dataset:
    if per_class is None:
        return ds
    keep = np.sort(np.concatenate([ds.class_indices(c)[:per_class] for c in range(ds.class_count)]))
    return ds.subset(keep)


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    root = RngStream(cfg.seed, rngmod.DATA)
    if isinstance(d, IdxData):
        train = _limit(load_idx(d.train_images, d.train_labels, d.classes), d.limit_per_class)
        test = load_idx(d.test_images, d.test_labels, d.classes)
        return train, test
    full = synth_gaussian(d.classes, d.train_per_class + d.test_per_class, tuple(d.shape), d.separation,
                          root.child(0), noise=d.noise, jitter=d.jitter)
    return split_train_test(full, d.test_per_class, root.child(1))


def build_spec(cfg: ExperimentConfig, input_shape) -> ModelSpec:
    m = cfg.model
    C = cfg.dataset.classes
    if m.layers is not None:
        layers = tuple(LayerDesc(**lc.model_dump()) for lc in m.layers)
        base = ModelSpec(tuple(input_shape), layers, C, norm_groups=m.norm_groups,
                         split_transition=m.split_transition)
    else:
        base = vgg_like(tuple(input_shape), C, tuple(m.widths), m.fc, m.norm)
        base = ModelSpec(base.input_shape, base.layers, C, norm_groups=m.norm_groups,
                         split_transition=m.split_transition)
    if m.shared_depth is None:
        return base
    return adapt(base, m.shared_depth, m.groups)


def build_partition(cfg: ExperimentConfig, train: Dataset):
    p = cfg.partition
    stream = RngStream(cfg.seed, rngmod.PARTITION)
    if p.kind == "nxc":
        return partition_nxc(train, cfg.federation.clients, p.classes_per_client, stream)
    return partition_dirichlet(train, cfg.federation.clients, p.alpha, stream)


def federation_config(cfg: ExperimentConfig) -> FederationConfig:
    f = cfg.federation
    return FederationConfig(clients=f.clients, rounds=f.rounds, local_epochs=f.local_epochs, lr=f.lr,
                            batch_size=f.batch_size, aggregation=f.aggregation, seed=cfg.seed,
                            analysis_every=f.analysis_every, probe_batches=f.probe_batches,
                            probe_batch_size=f.probe_batch_size, signed=f.signed)


def cost_params(block: CostBlock, spec: ModelSpec, clients: int) -> CostModelParams:
    """Fill unspecified cost inputs from the model's conv layers."""
    convs = [i for i in spec.weighted_indices() if spec.layers[i].kind == "conv"]
    L = block.L if block.L is not None else len(convs)
    k = block.k if block.k is not None else [float(spec.layers[i].kernel) for i in convs]
    f = block.f if block.f is not None else [float(spec.input_shape[0])] + [float(spec.layers[i].out) for i in convs]
    if block.D is not None:
        D = block.D
    else:
        shared = spec.depth
        D = sum(1 for pos, i in enumerate(spec.weighted_indices()) if i in convs and pos >= shared)
    return CostModelParams(L=L, D=D, B_w=block.B_w, k=list(k), f=list(f), P=block.P, F_r=block.F_r,
                           R=block.R, N=block.N if block.N is not None else clients)


@dataclass
class RunArtifacts:
    out_dir: Path
    files: dict[str, Path]
    result: FederationResult | None


def write_cost_sweep(cfg: ExperimentConfig, path) -> Path:
    train_shape = _input_shape(cfg)
    spec = build_spec(cfg, train_shape)
    block = cfg.cost or CostBlock()
    base = cost_params(block, spec, cfg.federation.clients)
    sweep = block.sweep or {"D": list(range(base.L + 1))}
    write_cost_csv(path, cost_sweep(base, sweep, block.corrected))
    return Path(path)


def _input_shape(cfg: ExperimentConfig):
    d = cfg.dataset
    if isinstance(d, IdxData):
        return (1,) + tuple(_read_idx(d.test_images).shape[1:])
    return tuple(d.shape)


def manifest(cfg: ExperimentConfig, files: dict[str, Path]) -> dict:
    return {"format": MANIFEST_FORMAT, "version": version_string(), "seed": cfg.seed,
            "config": cfg.model_dump(mode="json"), "outputs": sorted(p.name for p in files.values())}


def run_experiment(cfg: ExperimentConfig, out_dir) -> RunArtifacts:
    """Run one experiment and write every requested report into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.model_copy(update={"outputs": cfg.outputs.model_copy(update={"dir": str(out)})})
    reports = set(cfg.outputs.reports)
    train, test = build_datasets(cfg)
    spec = build_spec(cfg, train.x.shape[1:])
    partition = build_partition(cfg, train)
    probe = make_probe(test, cfg.federation.probe_batches, cfg.federation.probe_batch_size,
                       RngStream(cfg.seed).child(rngmod.PROBE))
    result = run_federation(federation_config(cfg), spec, train, partition, test, probe)
    files: dict[str, Path] = {}
    if "metrics" in reports:
        files["metrics"] = out / "metrics.csv"
        write_metrics_csv(files["metrics"], result.metrics)
    prefs = result.preferences
    if prefs and "feature_encoding" in reports:
        files["feature_encoding"] = out / "feature_encoding.csv"
        write_encoding_csv(files["feature_encoding"], prefs, cfg.federation.signed)
    if prefs and "conflicts" in reports:
        files["conflicts"] = out / "conflicts.csv"
        conflict_from_preferences(prefs, cfg.federation.signed).write_csv(files["conflicts"])
    if prefs and "heatmap" in reports:
        files["heatmap"] = out / "heatmap.svg"
        write_heatmap_svg(files["heatmap"], prefs, cfg.dataset.classes, cfg.federation.signed)
    if "tv_profile" in reports:
        files["tv_profile"] = out / "tv_profile.csv"
        write_tv_csv(files["tv_profile"], tv_profile(result.global_model, probe))
    if "cost_sweep" in reports and cfg.cost is not None:
        files["cost_sweep"] = write_cost_sweep(cfg, out / "cost_sweep.csv")
    files["manifest"] = out / "manifest.json"
    files["manifest"].write_text(json.dumps(manifest(cfg, files), indent=2) + "\n", encoding="utf-8")
    return RunArtifacts(out, files, result)
