"""Serialization, splits, downsampling, windowing and context encoding."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .schema import (
    COLUMNS, LANE_TYPES, MANEUVERS, MARK_TYPES, FrameRecord,
    SchemaViolation, validate_record,
)
from .scenario import CollisionEvent, ScenarioLog, Termination, Weather, WeatherPreset

LOG_FORMAT_VERSION = 1
FULL_SPLIT = (360, 120, 120)
SPLIT_NAMES = ("train", "val", "test")

NUMERIC_FEATURES = ("speed", "ax", "ay", "throttle", "steer", "brake", "lane_width", "off_center")
CONTEXT_DIM = len(NUMERIC_FEATURES) + 2 + 1 + len(LANE_TYPES) + 2 * len(MARK_TYPES) + len(MANEUVERS)

__all__ = [
    "COLUMNS", "CONTEXT_DIM", "FrameRecord", "IncompatibleRate", "InsufficientScenarios", "NormStats",
    "SchemaViolation", "TrajectoryWindow", "UnknownCategory", "compute_stats", "downsample",
    "encode_context", "encode_windows", "extract_windows", "filter_training", "read_scenario",
    "scaled_counts", "split_dataset", "write_scenario",
]


class InsufficientScenarios(ValueError):
    pass


class IncompatibleRate(ValueError):
    pass


class UnknownCategory(ValueError):
    pass


# CSV ------------------------------------------------------------------------

def _fmt_float(x: float) -> str:
    return format(float(x), ".9g")


def _fmt(name: str, value) -> str:
    if value is None:
        return ""
    if name == "color":
        return "(" + ", ".join(str(int(c)) for c in value) + ")"
    if name in ("extents", "acceleration"):
        return "[" + ", ".join(_fmt_float(v) for v in value) + "]"
    if isinstance(value, float):
        return _fmt_float(value)
    return str(value)


INT_FIELDS = {"frame", "actor_id", "red_light"}
STR_FIELDS = {"actor_type", "attr", "lane_type", "right_lane_mark_type", "right_lane_mark_color",
              "left_lane_mark_type", "left_lane_mark_color", "possible_maneuvers"}
OPTIONAL_FIELDS = {"rel_angle", "rel_x", "rel_y"}


def _parse(name: str, text: str, row: int):
    try:
        if name in STR_FIELDS:
            return text
        if name in OPTIONAL_FIELDS and text == "":
            return None
        if name in INT_FIELDS:
            return int(text)
        if name == "color":
            if not (text.startswith("(") and text.endswith(")")):
                raise ValueError(text)
            return tuple(int(v) for v in text[1:-1].split(","))
        if name in ("extents", "acceleration"):
            if not (text.startswith("[") and text.endswith("]")):
                raise ValueError(text)
            return tuple(float(v) for v in text[1:-1].split(","))
        return float(text)
    except ValueError:
        raise SchemaViolation(name, row, f"cannot parse {text!r}") from None


def frames_to_csv(frames: Sequence[FrameRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for i, rec in enumerate(frames):
        validate_record(rec, i)
        w.writerow([_fmt(name, getattr(rec, name)) for name in COLUMNS])
    return buf.getvalue()


def frames_from_csv(text: str) -> list[FrameRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != COLUMNS:
        raise SchemaViolation("header", 0, f"expected the {len(COLUMNS)} annotation columns in order")
    out = []
    for i, row in enumerate(reader):
        if len(row) != len(COLUMNS):
            raise SchemaViolation("row", i, f"{len(row)} fields, expected {len(COLUMNS)}")
        values = {name: _parse(name, text, i) for name, text in zip(COLUMNS, row)}
        out.append(validate_record(FrameRecord(**values), i))
    return out


def _meta(log: ScenarioLog) -> dict:
    return {
        "version": LOG_FORMAT_VERSION,
        "scenario_id": log.scenario_id,
        "map": {"archetype": log.map_ref[0], "seed": log.map_ref[1]},
        "weather": {"preset": log.weather.preset.value, "friction": log.weather.friction,
                    "limit_scale": log.weather.limit_scale},
        "fps": log.fps,
        "timesteps": log.timesteps,
        "terminated_by": log.terminated_by.value,
        "collisions": [{"time": c.time, "actor_a": c.actor_a, "actor_b": c.actor_b,
                        "involves_ego": c.involves_ego} for c in log.collisions],
    }


def write_scenario(log: ScenarioLog, path: str | Path) -> None:
    """Write ``frames.csv`` and ``meta.json`` into directory ``path``."""
    path = Path(path)
    text = frames_to_csv(log.frames)
    path.mkdir(parents=True, exist_ok=True)
    (path / "frames.csv").write_text(text)
    (path / "meta.json").write_text(json.dumps(_meta(log), indent=2, sort_keys=True) + "\n")


def read_meta(path: str | Path) -> dict:
    meta = json.loads((Path(path) / "meta.json").read_text())
    if meta.get("version") != LOG_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported log format version {meta.get('version')}")
    return meta


def read_scenario(path: str | Path) -> ScenarioLog:
    path = Path(path)
    meta = read_meta(path)
    frames = frames_from_csv((path / "frames.csv").read_text())
    w = meta["weather"]
    return ScenarioLog(
        scenario_id=meta["scenario_id"], map_ref=(meta["map"]["archetype"], int(meta["map"]["seed"])),
        weather=Weather(WeatherPreset(w["preset"]), float(w["friction"]), float(w["limit_scale"])),
        fps=meta["fps"], frames=frames, terminated_by=Termination(meta["terminated_by"]),
        collisions=[CollisionEvent(float(c["time"]), int(c["actor_a"]), int(c["actor_b"]), bool(c["involves_ego"]))
                    for c in meta["collisions"]],
    )


# splits ---------------------------------------------------------------------

def scaled_counts(total: int, ratios: Sequence[int] = FULL_SPLIT) -> tuple[int, ...]:
    """Largest-remainder scaling of ``ratios`` to integer counts summing to ``total``."""
    weight = sum(ratios)
    exact = [total * r / weight for r in ratios]
    counts = [math.floor(x) for x in exact]
    order = sorted(range(len(ratios)), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in order[: total - sum(counts)]:
        counts[k] += 1
    return tuple(counts)


def _controlled_round(sizes: Sequence[int], counts: Sequence[int]) -> np.ndarray:
    """Integer table with the given row sums (strata) and column sums (splits).

    Every cell is the floor or the ceiling of its proportional share. Cells
    with the largest fractions are rounded up first; remaining deficits are
    settled along augmenting paths, which always exist for such tables.
    """
    total = sum(counts)
    exact = np.outer(sizes, counts) / max(total, 1)
    q = np.floor(exact + 1e-12).astype(int)
    frac = exact - q
    up = np.zeros(q.shape, dtype=bool)
    row_def = np.asarray(sizes) - q.sum(axis=1)
    col_def = np.asarray(counts) - q.sum(axis=0)
    cells = sorted((-frac[i, j], i, j) for i in range(q.shape[0]) for j in range(q.shape[1]) if frac[i, j] > 1e-12)
    for _, i, j in cells:
        if row_def[i] > 0 and col_def[j] > 0:
            up[i, j] = True
            row_def[i] -= 1
            col_def[j] -= 1
    while row_def.sum() > 0:
        start = int(np.flatnonzero(row_def > 0)[0])
        # breadth-first search: row -> column over free cells, column -> row over used cells
        prev: dict = {("r", start): None}
        todo = deque([("r", start)])
        end = None
        while todo and end is None:
            kind, k = todo.popleft()
            if kind == "r":
                for j in range(q.shape[1]):
                    if frac[k, j] > 1e-12 and not up[k, j] and ("c", j) not in prev:
                        prev[("c", j)] = (kind, k)
                        if col_def[j] > 0:
                            end = ("c", j)
                            break
                        todo.append(("c", j))
            else:
                for i in range(q.shape[0]):
                    if up[i, k] and ("r", i) not in prev:
                        prev[("r", i)] = (kind, k)
                        todo.append(("r", i))
        if end is None:
            raise ValueError("no integer split table satisfies the counts")
        node = end
        while prev[node] is not None:
            p = prev[node]
            if node[0] == "c":
                up[p[1], node[1]] = True
            else:
                up[node[1], p[1]] = False
            node = p
        row_def[start] -= 1
        col_def[end[1]] -= 1
    return q + up


def split_dataset(scenario_ids: Sequence[str], ratios: Sequence[int] = FULL_SPLIT, seed: int = 0,
                  strata: Mapping[str, str] | None = None) -> dict[str, list[str]]:
    """Assign ids to train/val/test with the given absolute counts.

    ``strata`` maps id to map name; each map is spread over the splits in
    proportion to the counts. Ids beyond ``sum(ratios)`` go to ``unused``.
    """
    ids = sorted(set(scenario_ids))
    if len(ids) != len(scenario_ids):
        raise ValueError("duplicate scenario ids")
    need = sum(ratios)
    if need > len(ids):
        raise InsufficientScenarios(f"{need} scenarios requested, {len(ids)} available")
    rng = np.random.default_rng(seed)
    strata = strata or {}
    groups: dict[str, list[str]] = {}
    for sid in ids:
        groups.setdefault(strata.get(sid, ""), []).append(sid)
    names = sorted(groups)
    for name in names:
        groups[name] = [groups[name][i] for i in rng.permutation(len(groups[name]))]
    # which ids are used at all, spread evenly across strata
    use = _controlled_round([len(groups[n]) for n in names], [need, len(ids) - need])[:, 0]
    table = _controlled_round(use.tolist(), list(ratios))
    out = {name: [] for name in SPLIT_NAMES[: len(ratios)]}
    out["unused"] = []
    for g, name in enumerate(names):
        members = groups[name]
        k = 0
        for s, split in enumerate(SPLIT_NAMES[: len(ratios)]):
            out[split].extend(members[k: k + table[g, s]])
            k += table[g, s]
        out["unused"].extend(members[k:])
    return {k: sorted(v) for k, v in out.items()}


def filter_training(logs: Iterable) -> list:
    """Drop scenarios that ended with an ego collision (traffic-only crashes stay)."""
    return [x for x in logs if Termination(getattr(x, "terminated_by", None) or x["terminated_by"])
            is not Termination.EgoCollision]


# protocol ---------------------------------------------------------------------

def downsample(log: ScenarioLog, target_fps: float = 2.5) -> ScenarioLog:
    """Keep every (fps / target_fps)-th frame, starting at frame 0."""
    ratio = log.fps / target_fps
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise IncompatibleRate(f"{log.fps} FPS is not an integer multiple of {target_fps} FPS")
    frames = [r for r in log.frames if r.frame % stride == 0]
    return replace(log, frames=frames, fps=log.fps / stride)


@dataclass
class TrajectoryWindow:
    vehicles: list[int]
    X: np.ndarray  # n x obs x 2, scene-local meters
    Y: np.ndarray  # n x pred x 2
    origin: np.ndarray  # world position of the ego at the last observed step
    records: list[list[FrameRecord]]  # n x obs observed records
    map_id: str = ""
    scenario_id: str = ""
    S: np.ndarray | None = None  # n x obs x CONTEXT_DIM once encoded

    @property
    def n(self) -> int:
        return len(self.vehicles)


def extract_windows(log: ScenarioLog, obs: int = 8, pred: int = 8, stride: int = 1) -> list[TrajectoryWindow]:
    """Sliding windows over the (already downsampled) log.

    Vehicles missing from any of the obs + pred steps are dropped from that
    window; the window is dropped if the ego is.
    """
    if obs < 1 or pred < 1 or stride < 1:
        raise ValueError("obs, pred and stride must be positive")
    steps = sorted({r.frame for r in log.frames})
    by_frame: dict[int, dict[int, FrameRecord]] = {}
    ego_id = None
    for r in log.frames:
        by_frame.setdefault(r.frame, {})[r.actor_id] = r
        if r.actor_type == "Ego":
            ego_id = r.actor_id
    span = obs + pred
    out = []
    for start in range(0, len(steps) - span + 1, stride):
        window = [by_frame[f] for f in steps[start:start + span]]
        present = set(window[0])
        for fr in window[1:]:
            present &= set(fr)
        if ego_id not in present:
            continue
        vehicles = [ego_id] + sorted(present - {ego_id})
        track = np.array([[[fr[v].pos_x, fr[v].pos_y] for fr in window] for v in vehicles])
        origin = track[0, obs - 1].copy()
        track = track - origin
        out.append(TrajectoryWindow(
            vehicles=vehicles, X=track[:, :obs], Y=track[:, obs:], origin=origin,
            records=[[fr[v] for fr in window[:obs]] for v in vehicles],
            map_id=str(log.map_ref[0]), scenario_id=log.scenario_id,
        ))
    return out


# context features ---------------------------------------------------------------

def _numeric(rec: FrameRecord) -> list[float]:
    return [rec.speed, rec.acceleration[0], rec.acceleration[1], rec.throttle, rec.steer, rec.brake,
            rec.lane_width, rec.off_center]


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]
    names: tuple[str, ...] = NUMERIC_FEATURES
    dictionaries: dict = field(default_factory=lambda: {
        "lane_type": list(LANE_TYPES), "mark_type": list(MARK_TYPES), "possible_maneuvers": list(MANEUVERS)})

    def to_json(self) -> str:
        return json.dumps({"version": 1, "names": list(self.names), "mean": list(self.mean),
                           "std": list(self.std), "dictionaries": self.dictionaries}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> NormStats:
        d = json.loads(text)
        if tuple(d["names"]) != NUMERIC_FEATURES:
            raise ValueError("stats file lists different numeric features")
        return cls(tuple(d["mean"]), tuple(d["std"]), tuple(d["names"]), d["dictionaries"])


def compute_stats(records: Iterable[FrameRecord]) -> NormStats:
    rows = np.array([_numeric(r) for r in records], dtype=np.float64)
    if rows.size == 0:
        raise ValueError("no records to compute statistics from")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std > 1e-9, std, 1.0)
    return NormStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


def _one_hot(value: str, options: Sequence[str], name: str) -> list[float]:
    try:
        k = list(options).index(value)
    except ValueError:
        raise UnknownCategory(f"{name}: {value!r} not in {list(options)}") from None
    v = [0.0] * len(options)
    v[k] = 1.0
    return v


def encode_record(rec: FrameRecord, stats: NormStats) -> np.ndarray:
    num = (np.array(_numeric(rec)) - np.array(stats.mean)) / np.array(stats.std)
    h = math.radians(rec.heading)
    if rec.red_light not in (0, 1):
        raise UnknownCategory(f"red_light: {rec.red_light!r}")
    return np.concatenate([
        num, [math.sin(h), math.cos(h)], [float(rec.red_light)],
        _one_hot(rec.lane_type, LANE_TYPES, "lane_type"),
        _one_hot(rec.right_lane_mark_type, MARK_TYPES, "right_lane_mark_type"),
        _one_hot(rec.left_lane_mark_type, MARK_TYPES, "left_lane_mark_type"),
        _one_hot(rec.possible_maneuvers, MANEUVERS, "possible_maneuvers"),
    ])


def encode_context(records: Sequence[Sequence[FrameRecord]], stats: NormStats) -> np.ndarray:
    """n x steps x CONTEXT_DIM feature tensor for per-actor record sequences."""
    return np.array([[encode_record(r, stats) for r in seq] for seq in records], dtype=np.float64).reshape(
        len(records), -1, CONTEXT_DIM)


def encode_windows(windows: Iterable[TrajectoryWindow], stats: NormStats) -> None:
    for w in windows:
        w.S = encode_context(w.records, stats)
