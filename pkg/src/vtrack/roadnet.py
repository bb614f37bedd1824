"""Procedural lane-graph maps and infrastructure queries.

Maps are assembled from a small road graph per archetype: nodes are
junctions, bends or lane-flow points (merges, ramps), edges are straight
road segments with lanes in each direction. Lanes on edges are straight;
everything curved lives in connector lanes generated at nodes.

Coordinates are meters in a flat world. Headings are compass degrees
(clockwise from +y, "north") in (0, 360].
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

MAP_FORMAT_VERSION = 1
DEFAULT_LANE_WIDTH = 3.5


class Archetype(str, Enum):
    UrbanLow = "UrbanLow"
    UrbanHighway = "UrbanHighway"
    Highway = "Highway"
    Hybrid = "Hybrid"
    LongHighway = "LongHighway"
    UrbanHD = "UrbanHD"


SPEED_BANDS = {
    Archetype.UrbanLow: (20.0, 45.0),
    Archetype.UrbanHighway: (20.0, 90.0),
    Archetype.Highway: (20.0, 90.0),
    Archetype.Hybrid: (20.0, 90.0),
    Archetype.LongHighway: (20.0, 90.0),
    Archetype.UrbanHD: (20.0, 45.0),
}

# CARLA town each archetype stands in for; used for report column names.
TOWN_NAMES = {
    Archetype.UrbanLow: "Town01",
    Archetype.UrbanHighway: "Town03",
    Archetype.Highway: "Town04",
    Archetype.Hybrid: "Town05",
    Archetype.LongHighway: "Town06",
    Archetype.UrbanHD: "Town10",
}


class LaneType(str, Enum):
    Driving = "Driving"
    Junction = "Junction"
    Shoulder = "Shoulder"


class MarkType(str, Enum):
    Solid = "Solid"
    Broken = "Broken"
    SolidSolid = "SolidSolid"
    NONE = "NONE"


class MarkColor(str, Enum):
    White = "White"
    Yellow = "Yellow"


class Maneuver(str, Enum):
    Left = "Left"
    Right = "Right"
    Both = "Both"
    NONE = "None"


class SignalState(str, Enum):
    Green = "Green"
    Yellow = "Yellow"
    Red = "Red"


class PositionOffRoad(LookupError):
    pass


CROSSABLE = (MarkType.Broken, MarkType.NONE)


@dataclass(frozen=True)
class LaneMarking:
    mark_type: MarkType
    color: MarkColor = MarkColor.White

    @property
    def crossable(self) -> bool:
        return self.mark_type in CROSSABLE


@dataclass(eq=False)
class Lane:
    id: int
    centerline: np.ndarray
    width: float
    lane_type: LaneType
    left_mark: LaneMarking
    right_mark: LaneMarking
    speed_limit: float
    successors: tuple[int, ...] = ()
    predecessors: tuple[int, ...] = ()
    left_neighbor: int | None = None
    right_neighbor: int | None = None
    tag: str = ""
    junction: int | None = None

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=np.float64)
        if self.width <= 0:
            raise ValueError(f"lane {self.id}: width must be positive")
        seg = np.diff(self.centerline, axis=0)
        self._seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self._cum = np.concatenate([[0.0], np.cumsum(self._seg_len)])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    @property
    def direction(self) -> np.ndarray:
        """Compass heading of every segment."""
        seg = np.diff(self.centerline, axis=0)
        return compass_heading(seg[:, 0], seg[:, 1])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        t = (s - self._cum[i]) / self._seg_len[i]
        return self.centerline[i] + t * (self.centerline[i + 1] - self.centerline[i])

    def tangent_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        d = self.centerline[i + 1] - self.centerline[i]
        return d / self._seg_len[i]

    def project(self, p) -> tuple[float, float, float]:
        """Return (s, signed lateral offset, overshoot past the end).

        Lateral offset is positive to the left of travel.
        """
        p = np.asarray(p, dtype=np.float64)
        a = self.centerline[:-1]
        d = self.centerline[1:] - a
        L2 = self._seg_len ** 2
        t = np.clip(np.einsum("ij,ij->i", p - a, d) / L2, 0.0, 1.0)
        q = a + t[:, None] * d
        dist = np.hypot(p[0] - q[:, 0], p[1] - q[:, 1])
        i = int(np.argmin(dist))
        u = d[i] / self._seg_len[i]
        rel = p - a[i]
        lateral = u[0] * rel[1] - u[1] * rel[0]
        s = self._cum[i] + t[i] * self._seg_len[i]
        last = self.centerline[-1]
        ulast = d[-1] / self._seg_len[-1]
        overshoot = float(np.dot(p - last, ulast))
        return float(s), float(lateral), overshoot

    def max_curvature(self, s0: float, s1: float) -> float:
        """Largest turning curvature (1/m) between arc lengths s0 and s1."""
        pts = self.centerline
        if len(pts) < 3:
            return 0.0
        d = np.diff(pts, axis=0)
        ang = np.arctan2(d[:, 1], d[:, 0])
        dang = np.abs((np.diff(ang) + np.pi) % (2 * np.pi) - np.pi)
        span = 0.5 * (self._seg_len[:-1] + self._seg_len[1:])
        kappa = dang / np.maximum(span, 1e-6)
        at = self._cum[1:-1]
        sel = (at >= s0) & (at <= s1)
        return float(kappa[sel].max()) if sel.any() else 0.0


@dataclass
class Junction:
    id: int
    center: tuple[float, float]
    radius: float
    approaches: int
    incoming_lanes: tuple[int, ...] = ()
    control: str = "light"  # light | stop | yield

    def contains(self, p) -> bool:
        return math.hypot(p[0] - self.center[0], p[1] - self.center[1]) < self.radius - 1e-9

    def polygon(self, n: int = 16) -> np.ndarray:
        a = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        return np.stack([self.center[0] + self.radius * np.cos(a),
                         self.center[1] + self.radius * np.sin(a)], axis=1)


@dataclass
class TrafficLight:
    id: int
    controlled_lanes: tuple[int, ...]
    cycle: tuple[float, float, float]
    phase_offset: float = 0.0
    junction: int | None = None
    stop_sign: bool = False

    def __post_init__(self):
        if min(self.cycle) <= 0:
            raise ValueError("signal cycle durations must be positive")

    @property
    def period(self) -> float:
        return float(sum(self.cycle))


def signal_state(light: TrafficLight, t: float) -> SignalState:
    if t < 0:
        raise ValueError("t must be non-negative")
    if light.stop_sign:
        return SignalState.Red
    green, yellow, _ = light.cycle
    tau = (t - light.phase_offset) % light.period
    if tau < green:
        return SignalState.Green
    if tau < green + yellow:
        return SignalState.Yellow
    return SignalState.Red


@dataclass(frozen=True)
class LaneContext:
    lane_id: int
    lane_type: LaneType
    left_mark: LaneMarking
    right_mark: LaneMarking
    lane_width: float
    off_center: float
    possible_maneuvers: Maneuver
    speed_limit: float
    s: float


def compass_heading(dx, dy):
    """Compass heading in (0, 360] of a direction vector (north = +y)."""
    h = np.mod(90.0 - np.degrees(np.arctan2(dy, dx)), 360.0)
    return np.where(h <= 0.0, 360.0, h)


def heading_to_yaw(heading: float) -> float:
    return math.radians(90.0 - heading)


def yaw_to_heading(yaw: float) -> float:
    h = (90.0 - math.degrees(yaw)) % 360.0
    return 360.0 if h <= 0.0 else h


def maneuvers_for(lane: Lane, lanes: dict[int, Lane]) -> Maneuver:
    def ok(nid, mark):
        return nid is not None and lanes[nid].lane_type == LaneType.Driving and mark.crossable

    left = ok(lane.left_neighbor, lane.left_mark)
    right = ok(lane.right_neighbor, lane.right_mark)
    if left and right:
        return Maneuver.Both
    if left:
        return Maneuver.Left
    if right:
        return Maneuver.Right
    return Maneuver.NONE


class RoadMap:
    """Immutable lane graph with junctions and signals."""

    def __init__(self, archetype: Archetype, lanes: list[Lane], junctions: list[Junction] = (),
                 signals: list[TrafficLight] = (), seed: int = 0, yield_lanes: dict[int, int] | None = None):
        self.archetype = Archetype(archetype)
        self.lanes = list(lanes)
        self.junctions = list(junctions)
        self.signals = list(signals)
        self.seed = int(seed)
        self.yield_lanes = dict(yield_lanes or {})
        self.lane_by_id = {ln.id: ln for ln in self.lanes}
        self.signal_for_lane: dict[int, TrafficLight] = {}
        for light in self.signals:
            for lid in light.controlled_lanes:
                self.signal_for_lane[lid] = light
        self.max_lane_width = max(ln.width for ln in self.lanes)
        self._maneuvers = {ln.id: maneuvers_for(ln, self.lane_by_id) for ln in self.lanes}
        a, b, owner, head = [], [], [], []
        for idx, ln in enumerate(self.lanes):
            a.append(ln.centerline[:-1])
            b.append(ln.centerline[1:])
            owner.append(np.full(len(ln.centerline) - 1, idx))
            head.append(ln.direction)
        self._a = np.concatenate(a)
        self._d = np.concatenate(b) - self._a
        self._len2 = np.einsum("ij,ij->i", self._d, self._d)
        self._owner = np.concatenate(owner)
        self._head = np.concatenate(head)
        self._ids = np.array([ln.id for ln in self.lanes])
        pts = np.concatenate([ln.centerline for ln in self.lanes])
        pad = 2 * self.max_lane_width
        self.bounds = (pts[:, 0].min() - pad, pts[:, 1].min() - pad, pts[:, 0].max() + pad, pts[:, 1].max() + pad)

    def maneuvers(self, lane_id: int) -> Maneuver:
        return self._maneuvers[lane_id]

    def junction_at(self, p) -> Junction | None:
        for j in self.junctions:
            if j.contains(p):
                return j
        return None

    def spawn_points(self, spacing: float = 25.0, margin: float = 10.0, stop_clearance: float = 60.0) -> list[tuple[int, float]]:
        """(lane_id, s) pairs on ordinary driving lanes, in a fixed order."""
        pts = []
        for ln in self.lanes:
            if ln.lane_type != LaneType.Driving or ln.tag or not ln.successors:
                continue
            end = ln.length - (stop_clearance if ln.id in self.signal_for_lane or ln.id in self.yield_lanes else margin)
            s = margin
            while s <= end:
                pts.append((ln.id, float(s)))
                s += spacing
        return pts

    def query_lane(self, position, heading: float | None = None) -> LaneContext:
        p = np.asarray(position, dtype=np.float64)
        rel = p - self._a
        t = np.clip(np.einsum("ij,ij->i", rel, self._d) / self._len2, 0.0, 1.0)
        q = self._a + t[:, None] * self._d
        dist = np.hypot(p[0] - q[:, 0], p[1] - q[:, 1])
        if heading is not None:
            dh = np.abs((self._head - heading + 180.0) % 360.0 - 180.0)
            dist = np.where(dh < 90.0, dist, np.inf)
        best = float(dist.min())
        if not math.isfinite(best) or best > 2.0 * self.max_lane_width:
            raise PositionOffRoad(f"no lane within {2 * self.max_lane_width:.1f} m of {tuple(p)}")
        cand = np.flatnonzero(dist == best)
        seg = cand[np.argmin(self._ids[self._owner[cand]])]
        lane = self.lanes[self._owner[seg]]
        seg_start = int(seg - np.flatnonzero(self._owner == self._owner[seg])[0])
        s = float(lane._cum[seg_start] + t[seg] * lane._seg_len[seg_start])
        lane_type = lane.lane_type
        if lane_type != LaneType.Shoulder and self.junction_at(p) is not None:
            lane_type = LaneType.Junction
        return LaneContext(
            lane_id=lane.id, lane_type=lane_type, left_mark=lane.left_mark, right_mark=lane.right_mark,
            lane_width=lane.width, off_center=best, possible_maneuvers=self._maneuvers[lane.id],
            speed_limit=lane.speed_limit, s=s,
        )

    # validation ------------------------------------------------------------

    def check(self) -> None:
        """Raise ValueError if a structural invariant is broken."""
        ids = set(self.lane_by_id)
        for ln in self.lanes:
            for ref in (*ln.successors, *ln.predecessors):
                if ref not in ids:
                    raise ValueError(f"lane {ln.id} references missing lane {ref}")
            for ref in (ln.left_neighbor, ln.right_neighbor):
                if ref is not None and ref not in ids:
                    raise ValueError(f"lane {ln.id} neighbor {ref} missing")
            lo, hi = SPEED_BANDS[self.archetype]
            if not lo <= ln.speed_limit <= hi:
                raise ValueError(f"lane {ln.id} speed limit {ln.speed_limit} outside {lo}-{hi}")
        spawns = {lid for lid, _ in self.spawn_points()}
        for start in sorted(spawns):
            if len(self.reachable_from(start)) != len(self.lanes):
                raise ValueError(f"lane graph not connected from lane {start}")

    def reachable_from(self, lane_id: int) -> set[int]:
        seen = {lane_id}
        todo = deque([lane_id])
        while todo:
            ln = self.lane_by_id[todo.popleft()]
            nxt = list(ln.successors) + [n for n in (ln.left_neighbor, ln.right_neighbor) if n is not None]
            nxt += [o.id for o in self.lanes if o.left_neighbor == ln.id or o.right_neighbor == ln.id]
            for n in nxt:
                if n not in seen:
                    seen.add(n)
                    todo.append(n)
        return seen

    def features(self) -> set[str]:
        out = {ln.tag for ln in self.lanes if ln.tag}
        approaches = {j.approaches for j in self.junctions}
        out |= {f"{a}-way" for a in approaches}
        if any(j.control == "light" for j in self.junctions):
            out.add("traffic_lights")
        if any(s.stop_sign for s in self.signals):
            out.add("stop_signs")
        return out

    # serialization ---------------------------------------------------------

    LANE_COLUMNS = ("id", "lane_type", "width", "speed_limit", "left_mark_type", "left_mark_color",
                    "right_mark_type", "right_mark_color", "successors", "predecessors",
                    "left_neighbor", "right_neighbor", "tag", "junction", "centerline")

    def lanes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.LANE_COLUMNS)
        for ln in self.lanes:
            w.writerow([
                ln.id, ln.lane_type.value, repr(ln.width), repr(ln.speed_limit),
                ln.left_mark.mark_type.value, ln.left_mark.color.value,
                ln.right_mark.mark_type.value, ln.right_mark.color.value,
                ";".join(map(str, ln.successors)), ";".join(map(str, ln.predecessors)),
                "" if ln.left_neighbor is None else ln.left_neighbor,
                "" if ln.right_neighbor is None else ln.right_neighbor,
                ln.tag, "" if ln.junction is None else ln.junction,
                ";".join(f"{x!r} {y!r}" for x, y in ln.centerline.tolist()),
            ])
        return buf.getvalue()

    def map_json(self) -> str:
        doc = {
            "version": MAP_FORMAT_VERSION,
            "archetype": self.archetype.value,
            "seed": self.seed,
            "lanes": "lanes.csv",
            "junctions": [
                {"id": j.id, "center": list(j.center), "radius": j.radius, "approaches": j.approaches,
                 "incoming_lanes": list(j.incoming_lanes), "control": j.control}
                for j in self.junctions
            ],
            "signals": [
                {"id": s.id, "controlled_lanes": list(s.controlled_lanes), "cycle": list(s.cycle),
                 "phase_offset": s.phase_offset, "junction": s.junction, "stop_sign": s.stop_sign}
                for s in self.signals
            ],
            "yield_lanes": {str(k): v for k, v in sorted(self.yield_lanes.items())},
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def serialize(self) -> bytes:
        return (self.map_json() + "\n" + self.lanes_csv()).encode()

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "lanes.csv").write_text(self.lanes_csv())
        (d / "map.json").write_text(self.map_json())

    @classmethod
    def load(cls, directory: str | Path) -> RoadMap:
        d = Path(directory)
        doc = json.loads((d / "map.json").read_text())
        if doc.get("version") != MAP_FORMAT_VERSION:
            raise ValueError(f"unsupported map format version {doc.get('version')}")
        opt = lambda v: None if v == "" else int(v)  # noqa: E731
        ids = lambda v: tuple(int(x) for x in v.split(";")) if v else ()  # noqa: E731
        lanes = []
        with open(d / doc["lanes"], newline="") as fh:
            for row in csv.DictReader(fh):
                pts = [tuple(map(float, p.split())) for p in row["centerline"].split(";")]
                lanes.append(Lane(
                    id=int(row["id"]), centerline=np.array(pts), width=float(row["width"]),
                    lane_type=LaneType(row["lane_type"]),
                    left_mark=LaneMarking(MarkType(row["left_mark_type"]), MarkColor(row["left_mark_color"])),
                    right_mark=LaneMarking(MarkType(row["right_mark_type"]), MarkColor(row["right_mark_color"])),
                    speed_limit=float(row["speed_limit"]), successors=ids(row["successors"]),
                    predecessors=ids(row["predecessors"]), left_neighbor=opt(row["left_neighbor"]),
                    right_neighbor=opt(row["right_neighbor"]), tag=row["tag"], junction=opt(row["junction"]),
                ))
        junctions = [Junction(j["id"], tuple(j["center"]), j["radius"], j["approaches"],
                              tuple(j["incoming_lanes"]), j["control"]) for j in doc["junctions"]]
        signals = [TrafficLight(s["id"], tuple(s["controlled_lanes"]), tuple(s["cycle"]), s["phase_offset"],
                                s["junction"], s["stop_sign"]) for s in doc["signals"]]
        yl = {int(k): v for k, v in doc.get("yield_lanes", {}).items()}
        return cls(doc["archetype"], lanes, junctions, signals, doc["seed"], yl)


# ---------------------------------------------------------------------------
# construction


@dataclass
class _Node:
    name: str
    pos: np.ndarray
    kind: str  # light | stop | yield | bend | flow
    trim: float = 0.0


@dataclass
class _Edge:
    a: str
    b: str
    fwd: int
    bwd: int
    speed: float
    tag: str = ""
    shoulder: bool = False
    width: float = DEFAULT_LANE_WIDTH
    lanes_fwd: list[int] = field(default_factory=list)
    lanes_bwd: list[int] = field(default_factory=list)
    shoulder_fwd: int | None = None
    shoulder_bwd: int | None = None


@dataclass
class _Template:
    nodes: dict[str, tuple[float, float, str]]
    edges: list[tuple]
    jitter: tuple[str, ...] = ()


def _bezier(p0, c, p1, n: int = 8) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * c + t ** 2 * p1


def _control_point(p0, u0, p1, u1) -> np.ndarray:
    """Intersection of the entry and exit tangent lines, or the midpoint."""
    cross = u0[0] * u1[1] - u0[1] * u1[0]
    mid = 0.5 * (p0 + p1)
    if abs(cross) < 1e-3:
        return mid
    r = p1 - p0
    t0 = (r[0] * u1[1] - r[1] * u1[0]) / cross
    gap = np.linalg.norm(r)
    if t0 <= 0 or t0 > 2 * gap:
        return mid
    return p0 + t0 * u0


class _Builder:
    def __init__(self, archetype: Archetype, template: _Template, rng: np.random.Generator, seed: int):
        self.archetype = archetype
        self.rng = rng
        self.seed = seed
        self.nodes: dict[str, _Node] = {}
        for name, (x, y, kind) in template.nodes.items():
            pos = np.array([x, y], dtype=np.float64)
            if name in template.jitter:
                pos = pos + rng.uniform(-6.0, 6.0, size=2)
            self.nodes[name] = _Node(name, pos, kind)
        self.edges = [_Edge(*e) if not isinstance(e, _Edge) else e for e in template.edges]
        self.lanes: dict[int, Lane] = {}
        self.next_id = 0
        self.junctions: list[Junction] = []
        self.signals: list[TrafficLight] = []
        self.yield_lanes: dict[int, int] = {}

    def _new_id(self) -> int:
        self.next_id += 1
        return self.next_id - 1

    def incident(self, name: str) -> list[_Edge]:
        return [e for e in self.edges if name in (e.a, e.b)]

    def compute_trims(self) -> None:
        for node in self.nodes.values():
            inc = self.incident(node.name)
            half = max((e.fwd + e.bwd + e.shoulder * 2) * e.width / 2 for e in inc)
            if node.kind in ("light", "stop"):
                node.trim = half + 4.0
            elif node.kind == "yield":
                node.trim = max(half + 2.0, 6.0)
            elif node.kind == "flow":
                node.trim = 18.0
            else:
                node.trim = max(8.0, half + 1.0)

    def build_edges(self) -> None:
        for e in self.edges:
            pa, pb = self.nodes[e.a].pos, self.nodes[e.b].pos
            vec = pb - pa
            dist = float(np.linalg.norm(vec))
            u = vec / dist
            ta, tb = self.nodes[e.a].trim, self.nodes[e.b].trim
            if dist - ta - tb < 15.0:
                raise ValueError(f"edge {e.a}-{e.b} too short for its junctions")
            start, end = pa + ta * u, pb - tb * u
            two_way = e.bwd > 0
            e.lanes_fwd, e.shoulder_fwd = self._direction_lanes(e, start, end, e.fwd, two_way)
            if e.bwd:
                e.lanes_bwd, e.shoulder_bwd = self._direction_lanes(e, end, start, e.bwd, True)

    def _direction_lanes(self, e: _Edge, start, end, count: int, two_way: bool):
        u = (end - start) / np.linalg.norm(end - start)
        right = np.array([u[1], -u[0]])
        shift = 0.0 if two_way else count * e.width / 2
        ids = []
        for j in range(count):
            off = (j + 0.5) * e.width - shift
            if j == 0:
                left = LaneMarking(MarkType.SolidSolid if two_way else MarkType.Solid, MarkColor.Yellow)
            else:
                left = LaneMarking(MarkType.Broken, MarkColor.White)
            rmark = LaneMarking(MarkType.Solid if j == count - 1 else MarkType.Broken, MarkColor.White)
            lid = self._new_id()
            self.lanes[lid] = Lane(
                id=lid, centerline=np.array([start + off * right, end + off * right]), width=e.width,
                lane_type=LaneType.Driving, left_mark=left, right_mark=rmark, speed_limit=e.speed, tag=e.tag,
            )
            ids.append(lid)
        for j, lid in enumerate(ids):
            self.lanes[lid].left_neighbor = ids[j - 1] if j > 0 else None
            self.lanes[lid].right_neighbor = ids[j + 1] if j + 1 < count else None
        sh = None
        if e.shoulder:
            off = count * e.width + 1.25 - shift
            sh = self._new_id()
            self.lanes[sh] = Lane(
                id=sh, centerline=np.array([start + off * right, end + off * right]), width=2.5,
                lane_type=LaneType.Shoulder, left_mark=LaneMarking(MarkType.Solid, MarkColor.White),
                right_mark=LaneMarking(MarkType.NONE, MarkColor.White), speed_limit=e.speed, tag="parking",
            )
            self.lanes[sh].left_neighbor = ids[-1]
            self.lanes[ids[-1]].right_neighbor = sh
        return ids, sh

    def _ends(self, name: str):
        """Incoming and outgoing (edge, lane ids, direction unit) at a node."""
        inc, out = [], []
        for e in self.incident(name):
            u_ab = self.nodes[e.b].pos - self.nodes[e.a].pos
            u_ab = u_ab / np.linalg.norm(u_ab)
            if e.b == name:
                inc.append((e, e.lanes_fwd, u_ab))
                if e.bwd:
                    out.append((e, e.lanes_bwd, -u_ab))
            else:
                out.append((e, e.lanes_fwd, u_ab))
                if e.bwd:
                    inc.append((e, e.lanes_bwd, -u_ab))
        return inc, out

    def connect(self, src: int, dst: int, lane_type: LaneType, tag: str = "", junction: int | None = None) -> int:
        a, b = self.lanes[src], self.lanes[dst]
        p0, p1 = a.centerline[-1], b.centerline[0]
        u0, u1 = a.tangent_at(a.length), b.tangent_at(0.0)
        pts = _bezier(p0, _control_point(p0, u0, p1, u1), p1)
        if lane_type == LaneType.Junction:
            marks = (LaneMarking(MarkType.NONE, MarkColor.White), LaneMarking(MarkType.NONE, MarkColor.White))
        else:
            marks = (a.left_mark, a.right_mark)
        cid = self._new_id()
        self.lanes[cid] = Lane(
            id=cid, centerline=pts, width=a.width, lane_type=lane_type, left_mark=marks[0], right_mark=marks[1],
            speed_limit=min(a.speed_limit, b.speed_limit), successors=(dst,), predecessors=(src,),
            tag=tag, junction=junction,
        )
        a.successors = a.successors + (cid,)
        b.predecessors = b.predecessors + (cid,)
        return cid

    def build_nodes(self) -> None:
        for name in sorted(self.nodes):
            node = self.nodes[name]
            inc, out = self._ends(name)
            if node.kind in ("light", "stop", "yield"):
                self._junction(node, inc, out)
            else:
                self._flow(node, inc, out)

    def _junction(self, node: _Node, inc, out) -> None:
        jid = len(self.junctions)
        incoming = []
        for e_in, lanes_in, u_in in inc:
            for e_out, lanes_out, u_out in out:
                if e_out is e_in:
                    continue
                turn = math.degrees(math.atan2(u_in[0] * u_out[1] - u_in[1] * u_out[0], float(np.dot(u_in, u_out))))
                if abs(turn) < 30.0:
                    pairs = [(j, min(j, len(lanes_out) - 1)) for j in range(len(lanes_in))]
                elif turn > 0:
                    pairs = [(0, 0)]
                else:
                    pairs = [(len(lanes_in) - 1, len(lanes_out) - 1)]
                for j_in, j_out in pairs:
                    self.connect(lanes_in[j_in], lanes_out[j_out], LaneType.Junction, junction=jid)
            incoming.extend(lanes_in)
        approaches = len(self.incident(node.name))
        self.junctions.append(Junction(jid, (float(node.pos[0]), float(node.pos[1])), node.trim,
                                       approaches, tuple(incoming), node.kind))
        groups = [lanes for _, lanes, _ in inc]
        if node.kind == "light":
            green, yellow, clear = 10.0, 5.0, 2.0
            slot = green + yellow + clear
            base = float(self.rng.uniform(0.0, slot * len(groups)))
            for i, lanes in enumerate(groups):
                self.signals.append(TrafficLight(
                    id=len(self.signals), controlled_lanes=tuple(lanes),
                    cycle=(green, yellow, slot * len(groups) - green - yellow),
                    phase_offset=round(base + i * slot, 3), junction=jid,
                ))
        elif node.kind == "stop":
            for lanes in groups:
                self.signals.append(TrafficLight(id=len(self.signals), controlled_lanes=tuple(lanes),
                                                 cycle=(1.0, 1.0, 1.0), junction=jid, stop_sign=True))
        else:
            for e_in, lanes, _ in inc:
                if e_in.tag != "ring":
                    for lid in lanes:
                        self.yield_lanes[lid] = jid

    def _flow(self, node: _Node, inc, out) -> None:
        main_in = [x for x in inc if x[0].tag != "ramp"] or inc
        ramp_in = [x for x in inc if x[0].tag == "ramp" and x not in main_in]
        ramp_out = [x for x in out if x[0].tag == "ramp"]
        for e_in, lin, _ in main_in:
            outs = [x for x in out if x[0] is not e_in and x not in ramp_out] or [x for x in out if x[0] is not e_in]
            if len(outs) != 1:
                raise ValueError(f"flow node {node.name}: ambiguous continuation")
            self._link(lin, outs[0][1])
        if ramp_in or ramp_out:
            if len(main_in) != 1:
                raise ValueError(f"ramp node {node.name} needs a one-way main road")
            lin = main_in[0][1]
            lout = [x for x in out if x not in ramp_out][0][1]
            for _, lanes, _ in ramp_in:
                for lid in lanes:
                    side = lout[0] if self._on_left(lout[0], self.lanes[lid].centerline[-1], start=True) else lout[-1]
                    self.connect(lid, side, LaneType.Driving, tag="ramp")
            for _, lanes, _ in ramp_out:
                for lid in lanes:
                    side = lin[0] if self._on_left(lin[0], self.lanes[lid].centerline[0], start=False) else lin[-1]
                    self.connect(side, lid, LaneType.Driving, tag="ramp")

    def _on_left(self, lane_id: int, p, start: bool) -> bool:
        """Whether point p lies left of lane ``lane_id`` at its start or end."""
        ln = self.lanes[lane_id]
        s = 0.0 if start else ln.length
        o, u = ln.point_at(s), ln.tangent_at(s)
        d = np.asarray(p) - o
        return u[0] * d[1] - u[1] * d[0] > 0.0

    def _link(self, lin: list[int], lout: list[int]) -> None:
        conns = [(j, min(j, len(lout) - 1)) for j in range(len(lin))]
        conns += [(len(lin) - 1, k) for k in range(len(lin), len(lout))]
        made = {}
        for j, k in conns:
            src, dst = lin[j], lout[k]
            tag = "merge" if j >= len(lout) else ""
            if tag:
                self.lanes[src].tag = "merge"
                self.lanes[src].right_mark = LaneMarking(MarkType.Solid, MarkColor.White)
            made[(j, k)] = self.connect(src, dst, LaneType.Driving, tag=tag)
        # connectors that keep lane order stay lane-changeable like the lanes they join
        for (j, k), cid in made.items():
            right = made.get((j + 1, k + 1))
            if right is not None:
                self.lanes[cid].right_neighbor = right
                self.lanes[right].left_neighbor = cid
            else:
                self.lanes[cid].right_mark = LaneMarking(MarkType.Solid, MarkColor.White)
            if (j - 1, k - 1) not in made:
                lm = self.lanes[cid].left_mark
                if lm.mark_type == MarkType.Broken:
                    self.lanes[cid].left_mark = LaneMarking(MarkType.Solid, lm.color)

    def finish(self) -> RoadMap:
        lanes = [self.lanes[i] for i in sorted(self.lanes)]
        rm = RoadMap(self.archetype, lanes, self.junctions, self.signals, self.seed, self.yield_lanes)
        rm.check()
        return rm


def _pick(rng: np.random.Generator, choices) -> float:
    return float(choices[int(rng.integers(len(choices)))])


def _template(archetype: Archetype, rng: np.random.Generator) -> _Template:
    urban = (30.0, 40.0)
    arterial = (50.0, 60.0)
    fast = (80.0, 90.0)
    if archetype == Archetype.UrbanLow:
        s = lambda: _pick(rng, urban)  # noqa: E731
        nodes = {
            "A": (0, 0, "bend"), "B": (320, 0, "bend"), "C": (320, 220, "bend"), "D": (0, 220, "bend"),
            "E": (160, 0, "stop"), "F": (160, 220, "stop"), "G": (0, 80, "light"), "H": (320, 140, "light"),
            "J": (160, 80, "light"), "K": (160, 140, "light"),
        }
        edges = [
            ("A", "E", 1, 1, s()), ("E", "B", 1, 1, s()), ("B", "H", 1, 1, s()), ("H", "C", 1, 1, s()),
            ("C", "F", 1, 1, s()), ("F", "D", 1, 1, s()), ("D", "G", 1, 1, s()), ("G", "A", 1, 1, s()),
            ("E", "J", 1, 1, s()), ("J", "K", 1, 1, s()), ("K", "F", 1, 1, s()),
            ("G", "J", 1, 1, s()), ("K", "H", 1, 1, s()),
        ]
        return _Template(nodes, edges, jitter=("E", "F", "J", "K"))
    if archetype == Archetype.UrbanHD:
        s = lambda: _pick(rng, urban)  # noqa: E731
        nodes = {
            "A": (0, 0, "light"), "B": (180, 0, "light"), "C": (360, 0, "bend"),
            "D": (0, 160, "light"), "E": (180, 160, "light"), "F": (360, 160, "stop"),
            "G": (0, 320, "bend"), "H": (180, 320, "stop"), "I": (360, 320, "bend"),
            "W": (-120, 160, "bend"), "WN": (-120, 0, "bend"),
        }
        edges = [
            ("A", "B", 1, 1, s(), "", True), ("B", "C", 1, 1, s()), ("D", "E", 1, 1, s(), "", True),
            ("E", "F", 1, 1, s()), ("G", "H", 1, 1, s()), ("H", "I", 1, 1, s(), "", True),
            ("A", "D", 1, 1, s()), ("D", "G", 1, 1, s()), ("B", "E", 1, 1, s(), "", True), ("E", "H", 1, 1, s()),
            ("C", "F", 1, 1, s()), ("F", "I", 1, 1, s()), ("D", "W", 1, 1, s()), ("W", "WN", 1, 1, s()),
            ("WN", "A", 1, 1, s()),
        ]
        return _Template(nodes, edges, jitter=("B", "E", "H"))
    if archetype == Archetype.Highway:
        f = lambda: _pick(rng, fast)  # noqa: E731
        a = lambda: _pick(rng, arterial)  # noqa: E731
        nodes = {
            "A": (0, 0, "bend"), "R1": (450, 0, "flow"), "M1": (750, 0, "flow"), "B": (950, 0, "bend"),
            "C": (950, 500, "bend"), "X1": (450, 500, "flow"), "D": (0, 500, "bend"),
            "P1": (200, 150, "bend"), "K": (450, 150, "light"), "P2": (700, 150, "bend"),
            "P3": (700, 380, "bend"), "J": (450, 380, "light"), "P4": (200, 380, "bend"),
        }
        edges = [
            ("A", "R1", 2, 0, f()), ("R1", "M1", 3, 0, f()), ("M1", "B", 2, 0, f()), ("B", "C", 2, 0, f()),
            ("C", "X1", 2, 0, f()), ("X1", "D", 2, 0, f()), ("D", "A", 2, 0, f()),
            ("X1", "J", 1, 0, 60.0, "ramp"), ("K", "R1", 1, 0, 60.0, "ramp"),
            ("P1", "K", 1, 1, a()), ("K", "P2", 1, 1, a()), ("P2", "P3", 1, 1, a()), ("P3", "J", 1, 1, a()),
            ("J", "P4", 1, 1, a()), ("P4", "P1", 1, 1, a()), ("J", "K", 1, 1, a()),
        ]
        return _Template(nodes, edges, jitter=("P1", "P2", "P3", "P4"))
    if archetype == Archetype.Hybrid:
        a = lambda: _pick(rng, arterial)  # noqa: E731
        u = lambda: _pick(rng, urban)  # noqa: E731
        f = lambda: _pick(rng, fast)  # noqa: E731
        nodes = {
            "A": (0, 0, "bend"), "B": (220, 0, "light"), "C": (440, 0, "bend"),
            "D": (0, 200, "light"), "E": (220, 200, "light"), "F": (440, 200, "light"),
            "G": (0, 400, "bend"), "H": (220, 400, "light"), "I": (440, 400, "light"),
            "HW": (700, 200, "bend"), "HN": (700, 400, "bend"),
        }
        edges = [
            ("A", "B", 1, 1, u()), ("B", "C", 1, 1, u()), ("D", "E", 2, 2, a()), ("E", "F", 2, 2, a()),
            ("G", "H", 1, 1, u()), ("H", "I", 1, 1, u()), ("A", "D", 1, 1, u()), ("D", "G", 1, 1, u()),
            ("B", "E", 1, 1, u()), ("E", "H", 1, 1, u()), ("C", "F", 1, 1, u()), ("F", "I", 1, 1, u()),
            ("F", "HW", 3, 3, f()), ("HW", "HN", 3, 3, f()), ("HN", "I", 1, 1, u()),
        ]
        return _Template(nodes, edges, jitter=("B", "E", "H"))
    if archetype == Archetype.LongHighway:
        f = lambda: _pick(rng, fast)  # noqa: E731
        a = lambda: _pick(rng, arterial)  # noqa: E731
        ring = {f"O{i}": (1000 + 50 * math.cos(i * math.pi / 4), 200 + 50 * math.sin(i * math.pi / 4),
                          "yield" if i % 2 == 0 else "bend") for i in range(8)}
        nodes = {
            "A": (0, 0, "bend"), "R1": (1000, 0, "flow"), "M1": (1400, 0, "flow"), "B": (1700, 0, "bend"),
            "C": (1700, 400, "bend"), "X2": (1000, 400, "flow"), "D": (0, 400, "bend"),
            "P1": (700, 200, "bend"), "P2": (700, 100, "bend"), "Q": (1000, 100, "light"),
            "P3": (1300, 100, "bend"), "P4": (1300, 200, "bend"),
            **ring,
        }
        edges = [
            ("A", "R1", 3, 0, f()), ("R1", "M1", 4, 0, f()), ("M1", "B", 3, 0, f()), ("B", "C", 3, 0, f()),
            ("C", "X2", 3, 0, f()), ("X2", "D", 3, 0, f()), ("D", "A", 3, 0, f()),
            ("X2", "O2", 1, 0, 60.0, "ramp"), ("Q", "R1", 1, 0, 60.0, "ramp"),
            ("O4", "P1", 1, 1, a()), ("P1", "P2", 1, 1, a()), ("P2", "Q", 1, 1, a()), ("Q", "P3", 1, 1, a()),
            ("P3", "P4", 1, 1, a()), ("P4", "O0", 1, 1, a()), ("O6", "Q", 1, 1, 40.0),
        ]
        for i in range(8):
            edges.append((f"O{i}", f"O{(i + 1) % 8}", 1, 0, 30.0, "ring"))
        return _Template(nodes, edges)
    if archetype == Archetype.UrbanHighway:
        f = lambda: _pick(rng, fast)  # noqa: E731
        a = lambda: _pick(rng, arterial)  # noqa: E731
        ring = {f"O{i}": (50 * math.cos(i * math.pi / 4), 50 * math.sin(i * math.pi / 4),
                          "yield" if i % 2 == 0 else "bend") for i in range(8)}
        nodes = {
            "N": (0, 240, "light"), "E": (240, 0, "light"), "S": (0, -240, "light"), "W": (-240, 0, "light"),
            "NE": (240, 240, "light"), "SE": (240, -240, "bend"), "SW": (-240, -240, "bend"), "NW": (-240, 240, "bend"),
            "NN": (0, 440, "bend"), "NNE": (240, 440, "bend"),
            **ring,
        }
        edges = [
            ("O0", "E", 1, 1, a()), ("O2", "N", 1, 1, a()), ("O4", "W", 1, 1, a()), ("O6", "S", 1, 1, a()),
            ("N", "NE", 2, 2, a()), ("NE", "E", 2, 2, a()), ("E", "SE", 2, 2, f()), ("SE", "S", 2, 2, f()),
            ("S", "SW", 2, 2, f()), ("SW", "W", 2, 2, f()), ("W", "NW", 2, 2, a()), ("NW", "N", 2, 2, a()),
            ("N", "NN", 1, 1, a()), ("NN", "NNE", 1, 1, a()), ("NNE", "NE", 1, 1, a()),
        ]
        for i in range(8):
            edges.append((f"O{i}", f"O{(i + 1) % 8}", 1, 0, 30.0, "ring"))
        return _Template(nodes, edges, jitter=("NE",))
    raise ValueError(f"unknown archetype {archetype}")


def generate_map(archetype: Archetype | str, seed: int) -> RoadMap:
    """Build the map for an archetype; a pure function of (archetype, seed)."""
    archetype = Archetype(archetype)
    rng = np.random.default_rng([int(seed), list(Archetype).index(archetype)])
    b = _Builder(archetype, _template(archetype, rng), rng, seed)
    b.compute_trims()
    b.build_edges()
    b.build_nodes()
    return b.finish()
