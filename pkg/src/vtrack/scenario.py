"""Scenario simulation at 20 FPS with neighbor pooling and frame annotation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .roadnet import (
    LaneContext, LaneType, PositionOffRoad, RoadMap, SignalState, compass_heading, signal_state,
)
from .schema import FPS, FRAME_DT, POOL_RADIUS, FrameRecord, round_sig, timestamp_for
from .traffic import (
    KMPH, LANE_CHANGE_GAP, ActorProfile, ActorType, ControlState, DriverMemory, FuzzBounds,
    KinematicState, SpeedConstraint, Situation, Temperament, choose_lane_change, lookahead_distance,
    sample_actor_profile, step_actor, target_speed,
)

log = logging.getLogger(__name__)

PERCEPTION_RANGE = 200.0
LEAD_RANGE = 120.0
CONE_RANGE = 40.0
MERGE_RANGE = 60.0
ROUTE_HORIZON = 300.0


class WeatherPreset(str, Enum):
    ClearNoon = "ClearNoon"
    ClearSunset = "ClearSunset"
    WetNoon = "WetNoon"
    FogNoon = "FogNoon"
    WetSunset = "WetSunset"

    @property
    def wet(self) -> bool:
        return self in (WeatherPreset.WetNoon, WeatherPreset.WetSunset)


class Termination(str, Enum):
    TimeLimit = "TimeLimit"
    EgoCollision = "EgoCollision"


@dataclass(frozen=True)
class Weather:
    preset: WeatherPreset
    friction: float
    limit_scale: float

    def __post_init__(self):
        if self.preset.wet:
            if not (self.friction < 0.7 and self.limit_scale < 1.0):
                raise ValueError("wet presets need reduced friction and speed limits")
        elif self.limit_scale != 1.0:
            raise ValueError("dry presets keep posted speed limits")


@dataclass(frozen=True)
class ScriptedActor:
    """Test fixture: moves in a straight line at constant speed, ignoring everything."""

    pos: tuple[float, float]
    heading: float
    speed: float  # kmph
    attr: str = "vehicle.tesla.model3"
    extents: tuple[float, float] = (4.79, 2.16)


@dataclass(frozen=True)
class ScenarioConfig:
    n_actors: int = 24
    n_aggressive: int = 1
    n_cautious: int = 1
    duration: float = 30.0
    fuzz: FuzzBounds = FuzzBounds()
    dry_friction: float = 0.9
    wet_friction: tuple[float, float] = (0.4, 0.6)
    wet_limit_scale: float = 0.85
    # traffic is spawned among the nearest spawn_pool * n_actors spawn points to the ego
    spawn_pool: float = 3.0
    stop_on_ego_collision: bool = True
    weather: WeatherPreset | None = None
    ego_spawn: tuple[int, float] | None = None
    ego_constant_speed: float | None = None
    scripted: tuple[ScriptedActor, ...] = ()

    def __post_init__(self):
        if self.n_actors < 0:
            raise ValueError("n_actors must be non-negative")
        if not 0.0 < self.duration <= 30.0:
            raise ValueError("duration must lie in (0, 30] seconds")


class SpawnFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    actor_a: int
    actor_b: int
    involves_ego: bool


@dataclass(frozen=True)
class LaneChangeEvent:
    time: float
    actor_id: int
    from_lane: int
    to_lane: int
    side: str
    crossed_mark: str


@dataclass(frozen=True)
class StopLineEvent:
    time: float
    actor_id: int
    lane_id: int
    control: str
    state: str
    p_ignore_rules: float


@dataclass
class ScenarioLog:
    scenario_id: str
    map_ref: tuple[str, int]
    weather: Weather
    fps: int
    frames: list[FrameRecord]
    terminated_by: Termination
    collisions: list[CollisionEvent] = field(default_factory=list)
    # in-memory only; not serialized
    events: list = field(default_factory=list, compare=False)

    @property
    def timesteps(self) -> int:
        return len({r.frame for r in self.frames})


def sample_weather(rng: np.random.Generator, config: ScenarioConfig = ScenarioConfig()) -> Weather:
    presets = list(WeatherPreset)
    preset = config.weather if config.weather is not None else presets[int(rng.integers(len(presets)))]
    preset = WeatherPreset(preset)
    if preset.wet:
        return Weather(preset, float(rng.uniform(*config.wet_friction)), config.wet_limit_scale)
    return Weather(preset, config.dry_friction, 1.0)


def _heading_unit(heading: float) -> tuple[float, float]:
    r = math.radians(heading)
    return math.sin(r), math.cos(r)  # compass: north = +y


def pool_neighbors(ego: KinematicState, actors: list, radius: float = POOL_RADIUS) -> list:
    """Actors within ``radius`` of the ego with unsigned body-axis distances.

    Returns (actor, rel_x, rel_y, rel_angle): rel_x is the lateral distance,
    rel_y the longitudinal one, rel_angle counterclockwise in the ego frame
    with the right side at 0 and dead ahead at 90 degrees.
    """
    fx, fy = _heading_unit(ego.heading)
    rx, ry = fy, -fx
    out = []
    for a in actors:
        st = a if isinstance(a, KinematicState) else a.state
        dx = st.pos[0] - ego.pos[0]
        dy = st.pos[1] - ego.pos[1]
        if math.hypot(dx, dy) > radius:
            continue
        fwd = dx * fx + dy * fy
        lat = dx * rx + dy * ry
        ang = math.degrees(math.atan2(fwd, lat)) % 360.0
        if ang <= 0.0:
            ang = 360.0
        out.append((a, abs(lat), abs(fwd), ang))
    return out


def _corners(pos, heading, length, width) -> np.ndarray:
    fx, fy = _heading_unit(heading)
    f = np.array([fx, fy]) * length / 2
    r = np.array([fy, -fx]) * width / 2
    c = np.asarray(pos, dtype=float)
    return np.array([c + f + r, c + f - r, c - f - r, c - f + r])


def rectangles_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals (strict overlap)."""
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


@dataclass
class _Actor:
    profile: ActorProfile
    state: KinematicState
    control: ControlState = ControlState()
    memory: DriverMemory = field(default_factory=DriverMemory)
    route: list[int] = field(default_factory=list)
    s: float = 0.0
    lateral: float = 0.0
    crashed: bool = False
    script: ScriptedActor | None = None
    changing: bool = False
    approach_count: int = 0
    last_stop: tuple | None = None  # approach key of the line ahead

    @property
    def id(self) -> int:
        return self.profile.actor_id


class _Sim:
    def __init__(self, road: RoadMap, rng: np.random.Generator, config: ScenarioConfig, weather: Weather):
        self.road = road
        self.rng = rng
        self.cfg = config
        self.weather = weather
        self.actors: list[_Actor] = []
        self.events: list = []
        self.collisions: list[CollisionEvent] = []
        self.contacts: set[tuple[int, int]] = set()
        self._curv = {ln.id: ln.max_curvature(0.0, ln.length) for ln in road.lanes}

    # routing -----------------------------------------------------------------

    def extend_route(self, a: _Actor) -> None:
        total = sum(self.road.lane_by_id[l].length for l in a.route) - a.s
        while total < ROUTE_HORIZON:
            succ = self.road.lane_by_id[a.route[-1]].successors
            if not succ:
                break
            nxt = succ[int(self.rng.integers(len(succ)))] if len(succ) > 1 else succ[0]
            a.route.append(nxt)
            total += self.road.lane_by_id[nxt].length

    def point_along(self, a: _Actor, dist: float) -> np.ndarray:
        s = a.s + dist
        for lid in a.route:
            ln = self.road.lane_by_id[lid]
            if s <= ln.length:
                return ln.point_at(s)
            s -= ln.length
        ln = self.road.lane_by_id[a.route[-1]]
        return ln.point_at(ln.length) + ln.tangent_at(ln.length) * s

    def advance(self, a: _Actor) -> None:
        ln = self.road.lane_by_id[a.route[0]]
        s, lat, over = ln.project(a.state.pos)
        while over > 0.0 and len(a.route) > 1:
            a.route.pop(0)
            ln = self.road.lane_by_id[a.route[0]]
            s, lat, over = ln.project(a.state.pos)
        a.s, a.lateral = s, lat
        if a.changing and abs(lat) < 0.3:
            a.changing = False
        self.extend_route(a)

    # spawning ----------------------------------------------------------------

    def spawn(self, n_actors: int) -> None:
        cfg = self.cfg
        points = self.road.spawn_points()
        if len(points) < n_actors + 1:
            raise SpawnFailure(f"{len(points)} spawn points for {n_actors + 1} vehicles")
        if cfg.ego_spawn is not None:
            ego_pt = cfg.ego_spawn
            rest = [p for p in points if p != ego_pt]
        else:
            k = int(self.rng.integers(len(points)))
            ego_pt = points[k]
            rest = points[:k] + points[k + 1:]
        ego_xy = self.road.lane_by_id[ego_pt[0]].point_at(ego_pt[1])
        d = np.array([np.hypot(*(self.road.lane_by_id[l].point_at(s) - ego_xy)) for l, s in rest])
        # the ego lane itself must stay clear of vehicles spawned right on top of it
        order = np.argsort(d, kind="stable")
        pool = [rest[i] for i in order[: max(n_actors, int(math.ceil(cfg.spawn_pool * n_actors)))]]
        picks = self.rng.choice(len(pool), size=n_actors, replace=False) if n_actors else []
        chosen = [ego_pt] + [pool[int(i)] for i in picks]

        temperaments = [Temperament.Normal] * n_actors
        n_agg = min(cfg.n_aggressive, n_actors)
        n_cau = min(cfg.n_cautious, n_actors - n_agg)
        for i in range(n_agg):
            temperaments[i] = Temperament.Aggressive
        for i in range(n_agg, n_agg + n_cau):
            temperaments[i] = Temperament.Cautious

        for idx, (lid, s) in enumerate(chosen):
            kind = ActorType.Ego if idx == 0 else ActorType.Traffic
            temp = Temperament.Normal if idx == 0 else temperaments[idx - 1]
            prof = sample_actor_profile(self.rng, cfg.fuzz, temp, actor_id=idx, actor_type=kind)
            ln = self.road.lane_by_id[lid]
            p = ln.point_at(s)
            t = ln.tangent_at(s)
            heading = float(compass_heading(t[0], t[1]))
            if idx == 0 and cfg.ego_constant_speed is not None:
                speed = float(cfg.ego_constant_speed)
            else:
                v = target_speed(prof, ln.speed_limit, self.weather.limit_scale)
                speed = float(v * self.rng.uniform(0.3, 0.7))
            a = _Actor(prof, KinematicState((float(p[0]), float(p[1])), heading, speed), route=[lid], s=s)
            if idx == 0 and cfg.ego_constant_speed is not None:
                a.script = ScriptedActor(a.state.pos, heading, speed, prof.attr, prof.extents)
            self.extend_route(a)
            self.actors.append(a)
        for j, sc in enumerate(cfg.scripted):
            aid = len(self.actors)
            prof = ActorProfile(aid, ActorType.Traffic, sc.attr, (255, 0, 0), sc.extents, 2.0, 0.0, 0.0, 0.0)
            self.actors.append(_Actor(prof, KinematicState(sc.pos, sc.heading, sc.speed), script=sc))

    # perception --------------------------------------------------------------

    def _route_offsets(self, a: _Actor, horizon: float):
        out, off = [], -a.s
        for lid in a.route:
            out.append((lid, off))
            off += self.road.lane_by_id[lid].length
            if off > horizon:
                break
        return out

    def find_lead(self, i: int, P: np.ndarray, by_lane: dict, entries: list) -> tuple[tuple[float, float] | None, int | None]:
        a = self.actors[i]
        best, best_id, best_speed = math.inf, None, 0.0
        offsets = self._route_offsets(a, LEAD_RANGE)
        for lid, off in offsets:
            for j in by_lane.get(lid, ()):
                if j == i:
                    continue
                b = self.actors[j]
                dist = off + b.s
                if 0.0 < dist <= LEAD_RANGE:
                    gap = dist - 0.5 * (a.profile.length + b.profile.length)
                    if gap < best:
                        best, best_id = gap, j
        fx, fy = _heading_unit(a.state.heading)
        rel = P - P[i]
        fwd = rel[:, 0] * fx + rel[:, 1] * fy
        lat = rel[:, 0] * fy - rel[:, 1] * fx
        for j in np.flatnonzero((fwd > 0.0) & (fwd < CONE_RANGE)):
            if j == i:
                continue
            b = self.actors[j]
            if abs(lat[j]) < 0.5 * (a.profile.width + b.profile.width) + 0.3:
                gap = fwd[j] - 0.5 * (a.profile.length + b.profile.length)
                if gap < best:
                    best, best_id = gap, int(j)
        # vehicles converging onto a shared lane from another path: the one
        # closer to the merge point goes first
        mine = entries[i]
        for j, theirs in enumerate(entries):
            if j == i or not theirs or self.actors[j].route[0] == a.route[0]:
                continue
            for lid, (d_i, prev_i) in mine.items():
                hit = theirs.get(lid)
                if hit is None:
                    continue
                d_j, prev_j = hit
                if prev_j != prev_i and (d_j, j) < (d_i, i):
                    gap = d_i - d_j - 0.5 * (a.profile.length + self.actors[j].profile.length)
                    if gap < best:
                        best, best_id = gap, j
                break
        if best_id is None:
            return None, None
        b = self.actors[best_id]
        dh = math.radians(b.state.heading - a.state.heading)
        return (max(best, 0.0), b.state.speed * math.cos(dh)), best_id

    def lane_entries(self, a: _Actor) -> dict[int, tuple[float, int]]:
        """Upcoming lanes with (front distance to their start, lane driven before)."""
        if a.crashed or a.script is not None or not a.route:
            return {}
        out = {}
        offsets = self._route_offsets(a, MERGE_RANGE)
        for k in range(1, len(offsets)):
            lid, off = offsets[k]
            d = off - 0.5 * a.profile.length
            if d > MERGE_RANGE:
                break
            out.setdefault(lid, (d, offsets[k - 1][0]))
        return out

    def stop_line(self, a: _Actor, t: float):
        """(front distance, control, approach key, signal) for the next stop line ahead."""
        for lid, off in self._route_offsets(a, PERCEPTION_RANGE):
            ln = self.road.lane_by_id[lid]
            light = self.road.signal_for_lane.get(lid)
            if light is not None:
                control = "stop" if light.stop_sign else "light"
                state = signal_state(light, t)
            elif lid in self.road.yield_lanes:
                control, state = "yield", None
            else:
                continue
            d = off + ln.length - 0.5 * a.profile.length
            if d <= 0.0:
                continue
            if d > PERCEPTION_RANGE:
                return None
            return d, control, (lid, a.approach_count), state
        return None

    def junction_clear(self, a: _Actor, lane_id: int, P: np.ndarray) -> bool:
        ln = self.road.lane_by_id[lane_id]
        end = ln.centerline[-1]
        jid = self.road.yield_lanes.get(lane_id)
        radius = 20.0
        if jid is not None:
            j = next(j for j in self.road.junctions if j.id == jid)
            end, radius = np.asarray(j.center), j.radius + 15.0
        else:
            succ = ln.successors[0] if ln.successors else None
            if succ is not None and self.road.lane_by_id[succ].junction is not None:
                jid = self.road.lane_by_id[succ].junction
                j = next(j for j in self.road.junctions if j.id == jid)
                end, radius = np.asarray(j.center), j.radius
        d = np.hypot(P[:, 0] - end[0], P[:, 1] - end[1])
        for j in np.flatnonzero(d < radius):
            b = self.actors[j]
            if b is a:
                continue
            inside = bool(b.route) and self.road.lane_by_id[b.route[0]].lane_type == LaneType.Junction
            if b.state.speed > 0.5 or inside:
                return False
        return True

    def constraints(self, a: _Actor) -> tuple[SpeedConstraint, ...]:
        out = []
        for lid, off in self._route_offsets(a, 150.0)[1:]:
            ln = self.road.lane_by_id[lid]
            out.append(SpeedConstraint(max(off, 0.0), ln.speed_limit, self._curv[lid]))
        return tuple(out)

    def lane_context(self, a: _Actor) -> LaneContext:
        ln = self.road.lane_by_id[a.route[0]]
        return LaneContext(ln.id, ln.lane_type, ln.left_mark, ln.right_mark, ln.width, abs(a.lateral),
                           self.road.maneuvers(ln.id), ln.speed_limit, a.s)

    def side_gap_ok(self, i: int, side: int, P: np.ndarray, width: float) -> bool:
        a = self.actors[i]
        fx, fy = _heading_unit(a.state.heading)
        rel = P - P[i]
        fwd = rel[:, 0] * fx + rel[:, 1] * fy
        left = -(rel[:, 0] * fy - rel[:, 1] * fx)
        m = (np.abs(fwd) < LANE_CHANGE_GAP) & (side * left > 0.4 * width) & (side * left < 1.6 * width)
        m[i] = False
        return not m.any()

    # stepping ----------------------------------------------------------------

    def step(self, t: float) -> None:
        P = np.array([a.state.pos for a in self.actors])
        entries = [self.lane_entries(a) for a in self.actors]
        by_lane: dict[int, list[int]] = {}
        for j, a in enumerate(self.actors):
            if a.route:
                by_lane.setdefault(a.route[0], []).append(j)
        new_states = []
        for i, a in enumerate(self.actors):
            if a.crashed:
                new_states.append((ControlState(0.0, 0.0, 1.0), KinematicState(a.state.pos, a.state.heading, 0.0)))
                continue
            if a.script is not None:
                sc = a.script
                fx, fy = _heading_unit(sc.heading)
                v = sc.speed * KMPH
                pos = (a.state.pos[0] + v * FRAME_DT * fx, a.state.pos[1] + v * FRAME_DT * fy)
                new_states.append((ControlState(), KinematicState(pos, sc.heading, sc.speed)))
                continue
            ctx = self.lane_context(a)
            lead, lead_id = self.find_lead(i, P, by_lane, entries)
            self.maybe_change_lane(i, ctx, lead, P, t)
            ctx = self.lane_context(a)
            stop = self.stop_line(a, t)
            if a.last_stop is not None and (stop is None or stop[2] != a.last_stop):
                # the line we were approaching is now behind the front bumper
                self.record_crossing(a, a.last_stop[0], t)
                a.approach_count += 1
                stop = self.stop_line(a, t)
            sit_kwargs = {}
            signal = None
            a.last_stop = None
            if stop is not None:
                d, control, key, signal = stop
                clear = True
                if control in ("stop", "yield"):
                    clear = self.junction_clear(a, key[0], P)
                sit_kwargs = dict(stop_distance=d, control=control, approach=key, junction_clear=clear)
                a.last_stop = key
            ld = lookahead_distance(a.state.speed)
            look = self.point_along(a, ld)
            curv = self.road.lane_by_id[a.route[0]].max_curvature(a.s - 5.0, a.s + ld)
            sit = Situation(lookahead=(float(look[0]), float(look[1])), curvature=curv,
                            constraints=self.constraints(a), limit_scale=self.weather.limit_scale,
                            lead_id=lead_id, **sit_kwargs)
            new_states.append(step_actor(a.profile, a.state, lead, ctx, signal, self.weather.friction,
                                         FRAME_DT, self.rng, situation=sit, memory=a.memory))
        for a, (ctrl, st) in zip(self.actors, new_states):
            a.control, a.state = ctrl, st
            if a.route:
                self.advance(a)

    def record_crossing(self, a: _Actor, lane_id: int, t: float) -> None:
        light = self.road.signal_for_lane.get(lane_id)
        if light is not None:
            control = "stop" if light.stop_sign else "light"
            # the line was passed during the previous tick, under the state seen then
            state = signal_state(light, max(t - FRAME_DT, 0.0)).value
        else:
            control, state = "yield", ""
        self.events.append(StopLineEvent(t, a.id, lane_id, control, state, a.profile.p_ignore_rules))

    def maybe_change_lane(self, i: int, ctx: LaneContext, lead, P: np.ndarray, t: float) -> None:
        a = self.actors[i]
        ln = self.road.lane_by_id[a.route[0]]
        if a.changing or ln.lane_type != LaneType.Driving:
            return
        remaining = ln.length - a.s
        left_ok = ln.left_neighbor is not None and self.side_gap_ok(i, 1, P, ln.width)
        right_ok = ln.right_neighbor is not None and self.side_gap_ok(i, -1, P, ln.width)
        side = choose_lane_change(a.profile, ctx, remaining, lead, a.state.speed, left_ok, right_ok,
                                  self.rng, mandatory=ln.tag == "merge", dt=FRAME_DT)
        if side is None:
            return
        if side.value == "Left":
            target, mark = ln.left_neighbor, ln.left_mark
        else:
            target, mark = ln.right_neighbor, ln.right_mark
        tl = self.road.lane_by_id[target]
        s, lat, _ = tl.project(a.state.pos)
        self.events.append(LaneChangeEvent(t, a.id, ln.id, target, side.value, mark.mark_type.value))
        a.route = [target]
        a.s, a.lateral = s, lat
        a.changing = True
        a.approach_count += 1
        a.last_stop = None
        self.extend_route(a)

    def detect_collisions(self, t: float) -> bool:
        """Record new contacts; return True if the ego is in a new collision."""
        P = np.array([a.state.pos for a in self.actors])
        reach = np.array([math.hypot(*a.profile.extents) / 2 for a in self.actors])
        D = np.hypot(P[:, None, 0] - P[None, :, 0], P[:, None, 1] - P[None, :, 1])
        ego_hit = False
        now = set()
        ii, jj = np.nonzero(np.triu(D < reach[:, None] + reach[None, :], k=1))
        for i, j in zip(ii.tolist(), jj.tolist()):
            a, b = self.actors[i], self.actors[j]
            ca = _corners(a.state.pos, a.state.heading, *a.profile.extents)
            cb = _corners(b.state.pos, b.state.heading, *b.profile.extents)
            if rectangles_overlap(ca, cb):
                pair = (a.id, b.id)
                now.add(pair)
                if pair not in self.contacts:
                    ego = ActorType.Ego in (a.profile.actor_type, b.profile.actor_type)
                    self.collisions.append(CollisionEvent(t, a.id, b.id, ego))
                    ego_hit = ego_hit or ego
                a.crashed = b.crashed = True
        self.contacts = now
        return ego_hit


def annotate_frame(t: float, frame: int, actors: list, road: RoadMap) -> list[FrameRecord]:
    """Records for the ego (first actor) and every actor pooled around it."""
    ego = actors[0]
    pooled = pool_neighbors(ego.state, actors[1:])
    records = []
    for a, rel_x, rel_y, rel_angle in [(ego, None, None, None)] + pooled:
        st = a.state
        try:
            ctx = road.query_lane(st.pos, st.heading)
        except PositionOffRoad as exc:
            log.warning("t=%.2f actor %d skipped: %s", t, a.id, exc)
            continue
        red = 0
        if a.route:
            light = road.signal_for_lane.get(a.route[0])
            ln = road.lane_by_id[a.route[0]]
            if (light is not None and not light.stop_sign and signal_state(light, t) is SignalState.Red
                    and a.s < ln.length):
                red = 1
        p = a.profile
        records.append(FrameRecord(
            timestamp=timestamp_for(frame), frame=frame, actor_id=p.actor_id, actor_type=p.actor_type.value,
            attr=p.attr, color=tuple(int(c) for c in p.color),
            extents=(round_sig(p.extents[0]), round_sig(p.extents[1])),
            pos_x=round_sig(st.pos[0]), pos_y=round_sig(st.pos[1]), pos_z=0.0,
            heading=round_sig(st.heading) if round_sig(st.heading) > 0 else 360.0,
            speed=round_sig(st.speed),
            acceleration=(round_sig(st.acceleration[0]), round_sig(st.acceleration[1])),
            throttle=round_sig(a.control.throttle), steer=round_sig(a.control.steer),
            brake=round_sig(a.control.brake), red_light=red,
            rel_angle=None if rel_angle is None else round_sig(rel_angle),
            rel_x=None if rel_x is None else round_sig(rel_x),
            rel_y=None if rel_y is None else round_sig(rel_y),
            lane_type=ctx.lane_type.value,
            right_lane_mark_type=ctx.right_mark.mark_type.value, right_lane_mark_color=ctx.right_mark.color.value,
            left_lane_mark_type=ctx.left_mark.mark_type.value, left_lane_mark_color=ctx.left_mark.color.value,
            possible_maneuvers=ctx.possible_maneuvers.value,
            lane_width=round_sig(ctx.lane_width), off_center=round_sig(ctx.off_center),
        ))
    return records


def run_scenario(road: RoadMap, n_actors: int | None = None, rng: np.random.Generator | None = None,
                 config: ScenarioConfig = ScenarioConfig(), scenario_id: str = "") -> ScenarioLog:
    """Simulate one scenario and return its annotated log."""
    if n_actors is None:
        n_actors = config.n_actors
    if rng is None:
        rng = np.random.default_rng(0)
    weather = sample_weather(rng, config)
    sim = _Sim(road, rng, config, weather)
    sim.spawn(n_actors)
    n_steps = int(round(config.duration * FPS))
    frames: list[FrameRecord] = []
    terminated = Termination.TimeLimit
    sim.detect_collisions(0.0)
    for f in range(n_steps + 1):
        t = timestamp_for(f)
        if f > 0:
            sim.step(timestamp_for(f - 1))
            hit = sim.detect_collisions(t)
        else:
            hit = False
        frames.extend(annotate_frame(t, f, sim.actors, road))
        if hit and config.stop_on_ego_collision:
            terminated = Termination.EgoCollision
            break
    return ScenarioLog(scenario_id=scenario_id, map_ref=(road.archetype.value, road.seed), weather=weather,
                       fps=FPS, frames=frames, terminated_by=terminated, collisions=sim.collisions,
                       events=sim.events)
