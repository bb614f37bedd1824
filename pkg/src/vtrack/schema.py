"""The 28-field per-frame annotation record and its validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

FPS = 20
FRAME_DT = 0.05
POOL_RADIUS = 50.0

COLUMNS = (
    "timestamp", "frame", "actor_id", "actor_type", "attr", "color", "pos_x", "pos_y", "pos_z",
    "heading", "extents", "speed", "acceleration", "throttle", "steer", "brake", "red_light",
    "rel_angle", "rel_x", "rel_y", "lane_type", "right_lane_mark_type", "right_lane_mark_color",
    "left_lane_mark_type", "left_lane_mark_color", "possible_maneuvers", "lane_width", "off_center",
)

ACTOR_TYPES = ("Ego", "Traffic")
LANE_TYPES = ("Driving", "Junction", "Shoulder")
MARK_TYPES = ("Solid", "Broken", "SolidSolid", "NONE")
MARK_COLORS = ("White", "Yellow")
MANEUVERS = ("Left", "Right", "Both", "None")


class SchemaViolation(ValueError):
    def __init__(self, field_name: str, row: int | None, detail: str = ""):
        self.field = field_name
        self.row = row
        msg = f"field {field_name!r}"
        if row is not None:
            msg += f" at row {row}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def round_sig(x: float, digits: int = 9) -> float:
    """Round to ``digits`` significant digits so that CSV text round-trips exactly."""
    return float(f"{x:.{digits}g}")


def timestamp_for(frame: int) -> float:
    return round_sig(frame * FRAME_DT)


@dataclass(frozen=True)
class FrameRecord:
    timestamp: float
    frame: int
    actor_id: int
    actor_type: str
    attr: str
    color: tuple[int, int, int]
    pos_x: float
    pos_y: float
    pos_z: float
    heading: float
    extents: tuple[float, float]
    speed: float
    acceleration: tuple[float, float]
    throttle: float
    steer: float
    brake: float
    red_light: int
    rel_angle: float | None
    rel_x: float | None
    rel_y: float | None
    lane_type: str
    right_lane_mark_type: str
    right_lane_mark_color: str
    left_lane_mark_type: str
    left_lane_mark_color: str
    possible_maneuvers: str
    lane_width: float
    off_center: float


assert tuple(f.name for f in fields(FrameRecord)) == COLUMNS


def _finite(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _in(v, lo, hi, lo_open=False) -> bool:
    if not _finite(v):
        return False
    return (lo < v if lo_open else lo <= v) and v <= hi


def _check(rec: FrameRecord, row: int | None) -> None:
    def bad(name, detail=""):
        raise SchemaViolation(name, row, detail or f"value {getattr(rec, name)!r} out of range")

    if not _in(rec.timestamp, 0.0, math.inf):
        bad("timestamp")
    if not isinstance(rec.frame, int) or isinstance(rec.frame, bool) or rec.frame < 0:
        bad("frame")
    if rec.frame != round(rec.timestamp / FRAME_DT):
        bad("frame", f"frame {rec.frame} inconsistent with timestamp {rec.timestamp}")
    if not isinstance(rec.actor_id, int) or isinstance(rec.actor_id, bool) or rec.actor_id < 0:
        bad("actor_id")
    if rec.actor_type not in ACTOR_TYPES:
        bad("actor_type")
    if not isinstance(rec.attr, str) or not rec.attr or "," in rec.attr:
        bad("attr")
    c = rec.color
    if not (isinstance(c, tuple) and len(c) == 3
            and all(isinstance(v, int) and not isinstance(v, bool) and 0 <= v <= 255 for v in c)):
        bad("color")
    for name in ("pos_x", "pos_y", "pos_z"):
        if not _finite(getattr(rec, name)):
            bad(name)
    if not _in(rec.heading, 0.0, 360.0, lo_open=True):
        bad("heading")
    e = rec.extents
    if not (isinstance(e, tuple) and len(e) == 2 and all(_in(v, 0.0, math.inf) for v in e)):
        bad("extents")
    if not _in(rec.speed, 0.0, math.inf):
        bad("speed")
    a = rec.acceleration
    if not (isinstance(a, tuple) and len(a) == 2 and all(_finite(v) for v in a)):
        bad("acceleration")
    if not _in(rec.throttle, 0.0, 1.0):
        bad("throttle")
    if not _in(rec.steer, -1.0, 1.0):
        bad("steer")
    if not _in(rec.brake, 0.0, 1.0):
        bad("brake")
    if rec.red_light not in (0, 1) or isinstance(rec.red_light, bool):
        bad("red_light")
    if rec.actor_type == "Ego":
        for name in ("rel_angle", "rel_x", "rel_y"):
            if getattr(rec, name) is not None:
                bad(name, "ego records carry no relative position")
    else:
        if not _in(rec.rel_angle, 0.0, 360.0, lo_open=True):
            bad("rel_angle")
        if not _in(rec.rel_x, 0.0, POOL_RADIUS):
            bad("rel_x")
        if not _in(rec.rel_y, 0.0, POOL_RADIUS):
            bad("rel_y")
    if rec.lane_type not in LANE_TYPES:
        bad("lane_type")
    for side in ("right", "left"):
        if getattr(rec, f"{side}_lane_mark_type") not in MARK_TYPES:
            bad(f"{side}_lane_mark_type")
        if getattr(rec, f"{side}_lane_mark_color") not in MARK_COLORS:
            bad(f"{side}_lane_mark_color")
    if rec.possible_maneuvers not in MANEUVERS:
        bad("possible_maneuvers")
    if not _in(rec.lane_width, 0.0, math.inf, lo_open=True):
        bad("lane_width")
    if not _in(rec.off_center, 0.0, math.inf):
        bad("off_center")


def validate_record(rec: FrameRecord, row: int | None = None) -> FrameRecord:
    """Return ``rec`` unchanged or raise SchemaViolation naming the field."""
    _check(rec, row)
    return rec
