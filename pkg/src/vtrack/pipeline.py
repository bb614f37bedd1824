"""Dataset generation and loading on disk.

Layout of a generated dataset directory::

    <out>/<split>/<scenario_id>/frames.csv
    <out>/<split>/<scenario_id>/meta.json
    <out>/splits.json    scenario_id -> split
    <out>/stats.json     context normalizer from the training split
    <out>/summary.json   counts, crashes and per-map tally
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (FULL_SPLIT, SPLIT_NAMES, NormStats, TrajectoryWindow, compute_stats, downsample,
                      encode_windows, extract_windows, filter_training, read_meta, read_scenario, scaled_counts,
                      split_dataset, write_scenario)
from .evaluation import MissingSplit
from .roadnet import Archetype, RoadMap, generate_map
from .scenario import ScenarioConfig, ScenarioLog, Termination, run_scenario

TARGET_FPS = 2.5
OBS = 8
PRED = 8
TRAIN_STRIDE = 1
EVAL_STRIDE = 16


@dataclass(frozen=True)
class GenerationConfig:
    maps: tuple[str, ...] = tuple(a.value for a in Archetype)
    scenarios_per_map: int = 10
    n_actors: int = 24
    map_seed: int = 0
    ratios: tuple[int, ...] = FULL_SPLIT
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)

    def __post_init__(self):
        if not self.maps:
            raise ValueError("at least one map is required")
        for m in self.maps:
            Archetype(m)
        if self.scenarios_per_map < 1:
            raise ValueError("scenarios_per_map must be at least 1")
        if self.n_actors < 1:
            raise ValueError("n_actors must be at least 1")

    @property
    def total(self) -> int:
        return len(self.maps) * self.scenarios_per_map


@lru_cache(maxsize=None)
def _map(archetype: str, seed: int) -> RoadMap:
    return generate_map(archetype, seed)


def scenario_jobs(cfg: GenerationConfig) -> list[tuple[int, str, str]]:
    """(index, scenario_id, archetype) for every scenario, in a fixed order."""
    jobs = []
    for i, m in enumerate(cfg.maps):
        for j in range(cfg.scenarios_per_map):
            idx = i * cfg.scenarios_per_map + j
            jobs.append((idx, f"{m}_{j:04d}", m))
    return jobs


def simulate(global_seed: int, index: int, scenario_id: str, archetype: str, cfg: GenerationConfig) -> ScenarioLog:
    """One scenario with its private stream derived from (global_seed, index)."""
    rng = np.random.default_rng([global_seed, index])
    return run_scenario(_map(archetype, cfg.map_seed), cfg.n_actors, rng, cfg.scenario, scenario_id)


def _job(args) -> dict:
    global_seed, index, sid, archetype, cfg, target = args
    log = simulate(global_seed, index, sid, archetype, cfg)
    write_scenario(log, target)
    return {"scenario_id": sid, "map": archetype, "terminated_by": log.terminated_by.value,
            "collisions": len(log.collisions), "timesteps": log.timesteps}


def generate_dataset(out: str | Path, cfg: GenerationConfig, global_seed: int, workers: int | None = None) -> dict:
    """Simulate, split and write a full dataset; returns the summary dict.

    The output only depends on ``cfg`` and ``global_seed``, whatever the
    worker count.
    """
    out = Path(out)
    jobs = scenario_jobs(cfg)
    counts = scaled_counts(cfg.total, cfg.ratios)
    splits = split_dataset([sid for _, sid, _ in jobs], counts, seed=global_seed,
                           strata={sid: m for _, sid, m in jobs})
    where = {sid: name for name, ids in splits.items() for sid in ids}
    args = [(global_seed, idx, sid, m, cfg, out / where[sid] / sid) for idx, sid, m in jobs]
    workers = workers or os.cpu_count() or 1
    if workers == 1:
        results = [_job(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, args))

    (out / "splits.json").write_text(json.dumps(dict(sorted(where.items())), indent=2) + "\n")
    train = filter_training(load_split(out, "train"))
    stats = compute_stats(r for log in train for r in downsample(log, TARGET_FPS).frames)
    (out / "stats.json").write_text(stats.to_json())

    tally: dict[str, dict[str, int]] = {}
    for r in results:
        t = tally.setdefault(r["map"], {"scenarios": 0, "ego_crashes": 0, "collisions": 0})
        t["scenarios"] += 1
        t["ego_crashes"] += r["terminated_by"] == Termination.EgoCollision.value
        t["collisions"] += r["collisions"]
    summary = {
        "global_seed": global_seed,
        "scenarios": len(results),
        "splits": {name: len(splits[name]) for name in (*SPLIT_NAMES, "unused")},
        "ego_crashes": sum(t["ego_crashes"] for t in tally.values()),
        "collisions": sum(t["collisions"] for t in tally.values()),
        "per_map": tally,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def split_dirs(data: str | Path, split: str) -> list[Path]:
    root = Path(data) / split
    if not root.is_dir():
        raise MissingSplit(f"no {split!r} split under {data}; run `vtrack generate` first")
    return sorted(p for p in root.iterdir() if (p / "frames.csv").is_file())


def load_split(data: str | Path, split: str) -> list[ScenarioLog]:
    return [read_scenario(p) for p in split_dirs(data, split)]


def load_stats(data: str | Path) -> NormStats:
    path = Path(data) / "stats.json"
    if not path.is_file():
        raise MissingSplit(f"{path} not found; the dataset is incomplete")
    return NormStats.from_json(path.read_text())


def windows_from_logs(logs: Sequence[ScenarioLog], stride: int, stats: NormStats | None = None) -> list[TrajectoryWindow]:
    out: list[TrajectoryWindow] = []
    for log in logs:
        out.extend(extract_windows(downsample(log, TARGET_FPS), OBS, PRED, stride))
    if stats is not None and out:
        encode_windows(out, stats)
    return out


def load_windows(data: str | Path, split: str, stats: NormStats | None = None) -> list[TrajectoryWindow]:
    """Windows of one split: overlapping for training, disjoint otherwise.

    Ego-crash scenarios are dropped from the training split only.
    """
    logs = load_split(data, split)
    if split == "train":
        logs = filter_training(logs)
    stride = TRAIN_STRIDE if split == "train" else EVAL_STRIDE
    return windows_from_logs(logs, stride, stats)


def dataset_maps(data: str | Path) -> dict[str, int]:
    tally: dict[str, int] = {}
    for split in SPLIT_NAMES:
        for p in split_dirs(data, split):
            m = read_meta(p)["map"]["archetype"]
            tally[m] = tally.get(m, 0) + 1
    return tally
