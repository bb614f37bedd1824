"""Per-actor driving behavior with fuzzed parameters.

Longitudinal control is the Intelligent Driver Model (IDM) with the fuzzed
minimum following distance as the jam gap, plus stop-line handling for
signals, stop signs and yield lines. Lateral control is pure pursuit on a
kinematic bicycle model. All speeds crossing the public API are kmph, all
internal arithmetic is SI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .roadnet import LaneContext, Maneuver, SignalState, heading_to_yaw, yaw_to_heading

G = 9.81
DT = 0.05
KMPH = 1.0 / 3.6

MAX_ACCEL = 3.0          # full throttle, m/s^2
COMFORT_DECEL = 2.0      # IDM comfortable deceleration b
TIME_HEADWAY = 1.2       # IDM T, seconds
STOP_MARGIN = 1.0        # stop this far before the line
STOP_COMMIT_FRACTION = 0.9
MAX_STEER_DEG = 35.0
MIN_TARGET_KMPH = 5.0
LANE_CHANGE_GAP = 20.0
LANE_CHANGE_END_CLEARANCE = 50.0
STOP_SIGN_DWELL = 2.0
LATERAL_FRICTION_SHARE = 0.5
STANDSTILL = 1e-3        # m/s; braking below this ends in a full stop

VEHICLE_CLASSES: dict[str, tuple[float, float]] = {
    "vehicle.audi.a2": (3.70, 1.79),
    "vehicle.tesla.model3": (4.79, 2.16),
    "vehicle.toyota.prius": (4.51, 2.01),
    "vehicle.nissan.patrol": (4.60, 1.93),
    "vehicle.lincoln.mkz": (4.90, 2.10),
    "vehicle.mercedes.sprinter": (5.92, 1.99),
    "vehicle.carlamotors.carlacola": (5.20, 2.61),
}


class ActorType(str, Enum):
    Ego = "Ego"
    Traffic = "Traffic"


class Temperament(str, Enum):
    Normal = "Normal"
    Aggressive = "Aggressive"
    Cautious = "Cautious"


@dataclass(frozen=True)
class FuzzBounds:
    """Uniform sampling bounds for the per-actor behavior parameters."""

    min_follow_distance: tuple[float, float] = (2.0, 6.0)
    speed_delta: tuple[float, float] = (-10.0, 10.0)
    p_ignore_vehicles: tuple[float, float] = (0.0, 0.05)
    p_ignore_rules: tuple[float, float] = (0.0, 0.05)
    # how far outside the speed_delta band the out-of-distribution actors go
    ood_margin: tuple[float, float] = (3.0, 15.0)

    def __post_init__(self):
        for name in ("min_follow_distance", "speed_delta", "p_ignore_vehicles", "p_ignore_rules", "ood_margin"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        for name in ("p_ignore_vehicles", "p_ignore_rules"):
            lo, hi = getattr(self, name)
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"{name}: probabilities must lie in [0, 1]")
        if self.min_follow_distance[0] <= 0.0:
            raise ValueError("min_follow_distance must be positive")
        if self.ood_margin[0] <= 0.0:
            raise ValueError("ood_margin must be positive")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str | float]) -> FuzzBounds:
        """Build from flat keys such as ``speed_delta_lo``/``speed_delta_hi``."""
        kwargs = {}
        for name in ("min_follow_distance", "speed_delta", "p_ignore_vehicles", "p_ignore_rules", "ood_margin"):
            default = getattr(cls, name)
            lo = float(values.get(f"{name}_lo", default[0]))
            hi = float(values.get(f"{name}_hi", default[1]))
            kwargs[name] = (lo, hi)
        return cls(**kwargs)


@dataclass(frozen=True)
class ActorProfile:
    actor_id: int
    actor_type: ActorType
    attr: str
    color: tuple[int, int, int]
    extents: tuple[float, float]
    min_follow_distance: float
    speed_delta: float
    p_ignore_vehicles: float
    p_ignore_rules: float
    temperament: Temperament = Temperament.Normal

    @property
    def length(self) -> float:
        return self.extents[0]

    @property
    def width(self) -> float:
        return self.extents[1]

    @property
    def wheelbase(self) -> float:
        return 0.6 * self.extents[0]


@dataclass(frozen=True)
class ControlState:
    throttle: float = 0.0
    steer: float = 0.0
    brake: float = 0.0


@dataclass(frozen=True)
class KinematicState:
    pos: tuple[float, float]
    heading: float
    speed: float  # kmph
    acceleration: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not 0.0 < self.heading <= 360.0:
            raise ValueError(f"heading {self.heading} outside (0, 360]")
        if self.speed < 0.0:
            raise ValueError("speed must be non-negative")

    @property
    def velocity(self) -> np.ndarray:
        yaw = heading_to_yaw(self.heading)
        v = self.speed * KMPH
        return np.array([v * math.cos(yaw), v * math.sin(yaw)])


def sample_actor_profile(rng: np.random.Generator, bounds: FuzzBounds = FuzzBounds(),
                         temperament: Temperament = Temperament.Normal, actor_id: int = 0,
                         actor_type: ActorType = ActorType.Traffic) -> ActorProfile:
    """Draw one actor's vehicle class, color and behavior parameters."""
    temperament = Temperament(temperament)
    names = sorted(VEHICLE_CLASSES)
    attr = names[int(rng.integers(len(names)))]
    color = tuple(int(c) for c in rng.integers(0, 256, size=3))
    length, width = VEHICLE_CLASSES[attr]
    follow = rng.uniform(*bounds.min_follow_distance)
    lo, hi = bounds.speed_delta
    if temperament is Temperament.Normal:
        delta = rng.uniform(lo, hi)
    elif temperament is Temperament.Aggressive:
        delta = hi + rng.uniform(*bounds.ood_margin)
    else:
        delta = lo - rng.uniform(*bounds.ood_margin)
    p_veh = rng.uniform(*bounds.p_ignore_vehicles)
    p_rules = rng.uniform(*bounds.p_ignore_rules)
    return ActorProfile(
        actor_id=int(actor_id), actor_type=ActorType(actor_type), attr=attr, color=color,
        extents=(length, width), min_follow_distance=float(follow), speed_delta=float(delta),
        p_ignore_vehicles=float(p_veh), p_ignore_rules=float(p_rules), temperament=temperament,
    )


@dataclass(frozen=True)
class SpeedConstraint:
    """A point ahead on the route where the allowed speed changes."""

    distance: float
    speed_limit: float | None = None  # posted, kmph, before weather scaling
    curvature: float = 0.0


@dataclass(frozen=True)
class Situation:
    """What the actor perceives this tick beyond its lane context.

    ``stop_distance`` is measured from the front bumper to the next stop
    line along the route; ``control`` names what governs that line.
    """

    stop_distance: float | None = None
    control: str | None = None  # light | stop | yield
    approach: tuple | None = None  # identifies the stop-line approach event
    junction_clear: bool = True
    lookahead: tuple[float, float] | None = None
    curvature: float = 0.0
    constraints: tuple[SpeedConstraint, ...] = ()
    limit_scale: float = 1.0
    lead_id: int | None = None


@dataclass
class DriverMemory:
    """Per-actor decisions that persist across ticks.

    Ignore decisions are drawn once per approach (stop line) and once per
    lead vehicle, so behavior does not depend on the tick rate.
    """

    approach: tuple | None = None
    ignore_rules: bool = False
    mode: str | None = None  # None | stop | go
    dwell: float = 0.0
    lead_ignore: dict[int, bool] = field(default_factory=dict)


def target_speed(profile: ActorProfile, speed_limit: float, limit_scale: float = 1.0) -> float:
    """Desired cruise speed in kmph on a lane with the given posted limit."""
    return max(speed_limit * limit_scale + profile.speed_delta, MIN_TARGET_KMPH)


def curve_speed(curvature: float, friction: float) -> float:
    """Highest comfortable speed (kmph) through a bend of the given curvature."""
    if curvature <= 1e-9:
        return math.inf
    return math.sqrt(LATERAL_FRICTION_SHARE * friction * G / curvature) / KMPH


def stopping_distance(speed_kmph: float, decel: float) -> float:
    v = speed_kmph * KMPH
    return v * v / (2.0 * decel)


def idm_accel(v: float, v0: float, gap: float | None, dv: float, s0: float) -> float:
    """IDM acceleration (m/s^2). ``dv`` is own speed minus lead speed (m/s)."""
    free = 1.0 - (v / max(v0, 1e-6)) ** 4
    if gap is None:
        return MAX_ACCEL * free
    s_star = s0 + max(0.0, v * TIME_HEADWAY + v * dv / (2.0 * math.sqrt(MAX_ACCEL * COMFORT_DECEL)))
    return MAX_ACCEL * (free - (s_star / max(gap, 0.1)) ** 2)


def _stop_accel(v: float, distance: float, s0: float) -> float:
    gap = distance - STOP_MARGIN
    # IDM interaction with a standing obstacle placed s0 beyond the stop point
    a = idm_accel(v, math.inf, gap + s0, v, s0)
    if v > 0.0:
        a = min(a, -v * v / (2.0 * max(gap, 1e-3)))
    return a


def _update_stop_mode(memory: DriverMemory, sit: Situation, signal: SignalState | None, v: float,
                      friction: float, profile: ActorProfile, rng: np.random.Generator, dt: float) -> bool:
    """Return True if the actor must brake for the stop line this tick."""
    if sit.stop_distance is None or sit.approach is None:
        memory.approach = None
        return False
    if memory.approach != sit.approach:
        memory.approach = sit.approach
        memory.ignore_rules = bool(rng.random() < profile.p_ignore_rules)
        memory.mode = None
        memory.dwell = 0.0
    if memory.ignore_rules:
        return False
    gap = sit.stop_distance - STOP_MARGIN
    can_stop = v * v / (2.0 * STOP_COMMIT_FRACTION * friction * G) <= gap
    if memory.mode == "go":
        # a go decision taken on yellow is dropped if the actor is still short of the line on red
        if sit.control == "light" and signal is SignalState.Red and can_stop:
            memory.mode = "stop"
            return True
        return False
    if sit.control == "stop":
        if memory.mode is None:
            memory.mode = "stop"
        if v < 0.1 and gap < 1.5:
            memory.dwell += dt
        if memory.dwell >= STOP_SIGN_DWELL and sit.junction_clear:
            memory.mode = "go"
            return False
        return True
    if sit.control == "yield":
        if sit.junction_clear and memory.mode != "stop":
            return False
        if memory.mode == "stop":
            if sit.junction_clear and v < 0.5:
                memory.mode = "go"
                return False
            return True
        if can_stop:
            memory.mode = "stop"
            return True
        memory.mode = "go"
        return False
    # traffic light
    if signal is None or signal is SignalState.Green:
        memory.mode = None
        return False
    if memory.mode == "stop":
        return True
    if signal is SignalState.Red or can_stop:
        memory.mode = "stop"
        return True
    memory.mode = "go"
    return False


def _ignores_lead(memory: DriverMemory, lead_id: int | None, profile: ActorProfile, rng: np.random.Generator) -> bool:
    if lead_id is None:
        return False
    if lead_id not in memory.lead_ignore:
        memory.lead_ignore[lead_id] = bool(rng.random() < profile.p_ignore_vehicles)
    return memory.lead_ignore[lead_id]


def longitudinal_accel(profile: ActorProfile, state: KinematicState, lead: tuple[float, float] | None,
                       lane_ctx: LaneContext, signal: SignalState | None, friction: float, dt: float,
                       rng: np.random.Generator, sit: Situation, memory: DriverMemory) -> float:
    v = state.speed * KMPH
    decel_max = friction * G
    v0 = min(target_speed(profile, lane_ctx.speed_limit, sit.limit_scale),
             curve_speed(sit.curvature, friction)) * KMPH
    # anticipate lower limits and bends ahead
    b = 0.4 * decel_max
    for c in sit.constraints:
        cap = curve_speed(c.curvature, friction)
        if c.speed_limit is not None:
            cap = min(cap, target_speed(profile, c.speed_limit, sit.limit_scale))
        if math.isfinite(cap):
            v0 = min(v0, math.sqrt((cap * KMPH) ** 2 + 2.0 * b * max(c.distance, 0.0)))
    v0 = max(v0, MIN_TARGET_KMPH * KMPH)

    gap, dv = None, 0.0
    if lead is not None and not _ignores_lead(memory, sit.lead_id, profile, rng):
        gap = lead[0]
        dv = v - lead[1] * KMPH
    a = idm_accel(v, v0, gap, dv, profile.min_follow_distance)
    if v > v0:
        a = min(a, -(v - v0) / 0.5)
    if _update_stop_mode(memory, sit, signal, v, friction, profile, rng, dt):
        a = min(a, _stop_accel(v, sit.stop_distance, profile.min_follow_distance))
    return float(np.clip(a, -decel_max, min(MAX_ACCEL, decel_max)))


def _integrate(profile: ActorProfile, state: KinematicState, a: float, delta: float, dt: float) -> KinematicState:
    v = state.speed * KMPH
    v_new = v + a * dt
    if v_new < 0.0 or (a < 0.0 and v_new < STANDSTILL):
        # stops within the tick: travel only the remaining braking distance
        dist = v * v / (2.0 * -a) if a < 0 else 0.0
        v_new = 0.0
    else:
        dist = 0.5 * (v + v_new) * dt
    yaw = heading_to_yaw(state.heading)
    dyaw = dist / profile.wheelbase * math.tan(delta)
    mid = yaw + 0.5 * dyaw
    x = state.pos[0] + dist * math.cos(mid)
    y = state.pos[1] + dist * math.sin(mid)
    yaw_new = yaw + dyaw
    vel_old = np.array([v * math.cos(yaw), v * math.sin(yaw)])
    vel_new = np.array([v_new * math.cos(yaw_new), v_new * math.sin(yaw_new)])
    acc = (vel_new - vel_old) / dt
    return KinematicState(pos=(x, y), heading=yaw_to_heading(yaw_new), speed=v_new / KMPH,
                          acceleration=(float(acc[0]), float(acc[1])))


def pure_pursuit(profile: ActorProfile, state: KinematicState, target) -> float:
    """Front-wheel angle (radians) steering toward ``target``."""
    dx = target[0] - state.pos[0]
    dy = target[1] - state.pos[1]
    ld = math.hypot(dx, dy)
    if ld < 1e-6:
        return 0.0
    yaw = heading_to_yaw(state.heading)
    alpha = math.atan2(dy, dx) - yaw
    alpha = (alpha + math.pi) % (2.0 * math.pi) - math.pi
    delta = math.atan2(2.0 * profile.wheelbase * math.sin(alpha), ld)
    lim = math.radians(MAX_STEER_DEG)
    return float(np.clip(delta, -lim, lim))


def lookahead_distance(speed_kmph: float) -> float:
    return float(np.clip(0.6 * speed_kmph * KMPH + 4.0, 4.0, 20.0))


def step_actor(profile: ActorProfile, state: KinematicState, lead: tuple[float, float] | None,
               lane_ctx: LaneContext, signal: SignalState | None, friction: float, dt: float = DT,
               rng: np.random.Generator | None = None, *, situation: Situation | None = None,
               memory: DriverMemory | None = None) -> tuple[ControlState, KinematicState]:
    """Advance one actor by ``dt``.

    ``lead`` is (gap in meters bumper to bumper, lead speed in kmph).
    ``signal`` is the state of whatever governs the stop line in
    ``situation`` (``None`` when nothing does).
    """
    if not 0.0 < friction <= 1.2:
        raise ValueError(f"friction {friction} outside (0, 1.2]")
    if rng is None:
        rng = np.random.default_rng(0)
    sit = situation if situation is not None else Situation()
    mem = memory if memory is not None else DriverMemory()
    a = longitudinal_accel(profile, state, lead, lane_ctx, signal, friction, dt, rng, sit, mem)
    delta = pure_pursuit(profile, state, sit.lookahead) if sit.lookahead is not None else 0.0
    lim = math.radians(MAX_STEER_DEG)
    if a > 0.0:
        throttle, brake = a / MAX_ACCEL, 0.0
    elif a < 0.0:
        throttle, brake = 0.0, -a / (friction * G)
    else:
        throttle, brake = 0.0, 0.0
    control = ControlState(throttle=float(min(throttle, 1.0)), steer=float(np.clip(delta / lim, -1.0, 1.0)),
                           brake=float(min(brake, 1.0)))
    return control, _integrate(profile, state, a, delta, dt)


def choose_lane_change(profile: ActorProfile, lane_ctx: LaneContext, remaining: float, lead: tuple[float, float] | None,
                       own_speed: float, left_gap_ok: bool, right_gap_ok: bool, rng: np.random.Generator,
                       mandatory: bool = False, dt: float = DT) -> Maneuver | None:
    """Pick a lane change side, or None to stay.

    Only sides allowed by ``possible_maneuvers`` are ever returned. A change
    is discretionary when a slower lead is present (Poisson rate, so the
    decision does not depend on tick length) and mandatory at lane drops.
    """
    allowed = lane_ctx.possible_maneuvers
    if allowed is Maneuver.NONE or (remaining < LANE_CHANGE_END_CLEARANCE and not mandatory):
        return None
    sides = []
    if allowed in (Maneuver.Left, Maneuver.Both) and left_gap_ok:
        sides.append(Maneuver.Left)
    if allowed in (Maneuver.Right, Maneuver.Both) and right_gap_ok:
        sides.append(Maneuver.Right)
    if not sides:
        return None
    if mandatory:
        return sides[0]
    if lead is None or lead[0] > 60.0 or lead[1] >= own_speed - 5.0:
        return None
    rate = 0.3 if profile.temperament is Temperament.Aggressive else 0.1
    if rng.random() < 1.0 - math.exp(-rate * dt):
        return sides[int(rng.integers(len(sides)))]
    return None
