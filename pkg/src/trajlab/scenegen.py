"""Vector scenes, synthetic scene generation and the agent-frame transform.

Scenes are built directly in the target's frame (+x forward, +y left), pushed
to a random world pose, and brought back with :func:`to_agent_frame` so every
sample goes through the same transform that real map data would.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from trajlab.errors import ConfigurationError

FORMAT_TAG = "trajlab-sample-v1"
FAMILIES = ("straight", "curve", "t_intersection", "four_way")
TURNING_MANEUVERS = ("left", "right", "curve_left", "curve_right")

LANE_WIDTH = 3.5
WALKWAY_WIDTH = 2.5
ROAD_BACK = 30.0
ROAD_AHEAD = 140.0
CROSS_HALF_LENGTH = 90.0


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass
class AgentState:
    position: np.ndarray
    heading: float
    half_extent: np.ndarray
    speed: float = 0.0
    accel: float = 0.0
    heading_rate: float = 0.0
    is_target: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(2)
        self.half_extent = np.asarray(self.half_extent, dtype=np.float64).reshape(2)
        self.heading = float(self.heading)
        if not np.all(self.half_extent > 0):
            raise ValueError("half_extent components must be positive")
        if not -math.pi < self.heading <= math.pi:
            raise ValueError(f"heading {self.heading} outside (-pi, pi]")

    def corners(self) -> np.ndarray:
        """Box corners (4, 2), counter-clockwise."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        rot = np.array([[c, -s], [s, c]])
        hx, hy = self.half_extent
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        return local @ rot.T + self.position


@dataclass
class Lane:
    points: np.ndarray
    width: float = LANE_WIDTH

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) < 2:
            raise ValueError("lane polyline needs at least 2 vertices")


@dataclass
class Scene:
    drivable: list[np.ndarray] = field(default_factory=list)
    lanes: list[Lane] = field(default_factory=list)
    ped_crossings: list[np.ndarray] = field(default_factory=list)
    walkways: list[np.ndarray] = field(default_factory=list)
    agents: list[AgentState] = field(default_factory=list)

    def __post_init__(self):
        for name in ("drivable", "ped_crossings", "walkways"):
            polys = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in getattr(self, name)]
            for p in polys:
                if len(p) < 3 or abs(polygon_area(p)) <= 0.0:
                    raise ValueError(f"degenerate polygon in {name}")
            setattr(self, name, polys)

    @property
    def target_index(self) -> int:
        idx = [i for i, a in enumerate(self.agents) if a.is_target]
        if len(idx) != 1:
            raise ValueError(f"expected exactly one target agent, found {len(idx)}")
        return idx[0]

    def transformed(self, fn_points, fn_heading) -> "Scene":
        agents = [
            AgentState(
                position=fn_points(a.position[None])[0],
                heading=fn_heading(a.heading),
                half_extent=a.half_extent.copy(),
                speed=a.speed,
                accel=a.accel,
                heading_rate=a.heading_rate,
                is_target=a.is_target,
            )
            for a in self.agents
        ]
        return Scene(
            drivable=[fn_points(p) for p in self.drivable],
            lanes=[Lane(fn_points(l.points), l.width) for l in self.lanes],
            ped_crossings=[fn_points(p) for p in self.ped_crossings],
            walkways=[fn_points(p) for p in self.walkways],
            agents=agents,
        )


@dataclass
class Sample:
    scene: Scene
    kinematics: np.ndarray
    gt: np.ndarray
    sample_id: str
    rng_seed: int
    family: str = ""
    maneuver: str = ""

    def __post_init__(self):
        self.kinematics = np.asarray(self.kinematics, dtype=np.float64).reshape(3)
        self.gt = np.asarray(self.gt, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.gt)):
            raise ValueError("ground truth must be finite")

    @property
    def is_turning(self) -> bool:
        return self.maneuver in TURNING_MANEUVERS


@dataclass
class GenerationConfig:
    family_weights: dict = field(
        default_factory=lambda: {"straight": 1.0, "curve": 1.0, "t_intersection": 1.0, "four_way": 1.0}
    )
    agent_count: tuple = (1, 6)
    horizon_s: float = 6.0
    frequency_hz: float = 2.0
    speed_range: tuple = (3.0, 10.0)
    accel_range: tuple = (-0.5, 0.5)
    speed_max: float = 12.0
    curve_radius_range: tuple = (40.0, 120.0)
    turn_radius_range: tuple = (6.0, 12.0)
    turn_start_range: tuple = (3.0, 25.0)

    @property
    def horizon_steps(self) -> int:
        steps = self.horizon_s * self.frequency_hz
        return int(round(steps))

    def validate(self) -> None:
        weights = self.family_weights
        unknown = set(weights) - set(FAMILIES)
        if unknown:
            raise ConfigurationError(f"unknown scene families: {sorted(unknown)}")
        if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
            raise ConfigurationError("family weights must be nonnegative with a positive sum")
        lo, hi = self.agent_count
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"invalid agent_count range {self.agent_count}")
        if self.horizon_s <= 0 or self.frequency_hz <= 0:
            raise ConfigurationError("horizon and frequency must be positive")
        steps = self.horizon_s * self.frequency_hz
        if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
            raise ConfigurationError("horizon_s * frequency_hz must be a positive integer")
        if not 0 <= self.speed_range[0] <= self.speed_range[1] <= self.speed_max:
            raise ConfigurationError("speed_range must lie within [0, speed_max]")
        if self.accel_range[0] > self.accel_range[1]:
            raise ConfigurationError("accel_range is reversed")
        for name in ("curve_radius_range", "turn_radius_range", "turn_start_range"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ConfigurationError(f"invalid {name}")
        if self.turn_radius_range[0] <= LANE_WIDTH / 2:
            raise ConfigurationError("turn radius must exceed half a lane width")

    def to_dict(self) -> dict:
        return {
            "family_weights": {k: float(v) for k, v in sorted(self.family_weights.items())},
            "agent_count": list(self.agent_count),
            "horizon_s": self.horizon_s,
            "frequency_hz": self.frequency_hz,
            "speed_range": list(self.speed_range),
            "accel_range": list(self.accel_range),
            "speed_max": self.speed_max,
            "curve_radius_range": list(self.curve_radius_range),
            "turn_radius_range": list(self.turn_radius_range),
            "turn_start_range": list(self.turn_start_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        kw = dict(d)
        for key in ("agent_count", "speed_range", "accel_range", "curve_radius_range",
                    "turn_radius_range", "turn_start_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def rect(x0: float, x1: float, y0: float, y1: float) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def to_agent_frame(scene: Scene, target: int) -> Scene:
    """Rigidly move ``scene`` so agent ``target`` sits at the origin facing +x."""
    if not 0 <= target < len(scene.agents):
        raise IndexError(f"target index {target} out of range for {len(scene.agents)} agents")
    ref = scene.agents[target]
    origin = ref.position.copy()
    c, s = math.cos(ref.heading), math.sin(ref.heading)
    # row-vector form of R(-heading)
    rot_t = np.array([[c, -s], [s, c]])

    def move(points):
        return (np.asarray(points) - origin) @ rot_t

    out = scene.transformed(move, lambda h: wrap_angle(h - ref.heading))
    out.agents[target].position = np.zeros(2)
    out.agents[target].heading = 0.0
    return out


def _to_world(scene: Scene, theta: float, offset: np.ndarray) -> Scene:
    c, s = math.cos(theta), math.sin(theta)
    rot_t = np.array([[c, s], [-s, c]])
    return scene.transformed(lambda p: np.asarray(p) @ rot_t + offset, lambda h: wrap_angle(h + theta))


# ---------------------------------------------------------------------------
# kinematic rollout


def arc_length_profile(v0: float, accel: float, vmax: float, times: np.ndarray) -> np.ndarray:
    """Distance travelled under constant accel with speed clipped to [0, vmax]."""
    t = np.asarray(times, dtype=np.float64)
    if accel > 0:
        t_cap = max(vmax - v0, 0.0) / accel
        tc = np.minimum(t, t_cap)
        return v0 * tc + 0.5 * accel * tc**2 + np.maximum(t - t_cap, 0.0) * min(v0 + accel * t_cap, vmax)
    if accel < 0:
        t_stop = v0 / -accel
        tc = np.minimum(t, t_stop)
        return v0 * tc + 0.5 * accel * tc**2
    return v0 * t


class _Path:
    """Piecewise path: straight run, optional circular arc, straight exit."""

    def __init__(self, run: float, radius: float = 0.0, sweep: float = 0.0):
        self.run = run
        self.radius = radius
        self.sweep = sweep  # signed; positive turns left

    @property
    def arc_len(self) -> float:
        return self.radius * abs(self.sweep)

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        out = np.zeros(s.shape + (2,))
        straight = s <= self.run
        out[straight, 0] = s[straight]
        if self.sweep == 0.0:
            out[~straight, 0] = s[~straight]
            return out
        sign = math.copysign(1.0, self.sweep)
        r = self.radius
        on_arc = (~straight) & (s <= self.run + self.arc_len)
        phi = (s[on_arc] - self.run) / r
        out[on_arc, 0] = self.run + r * np.sin(phi)
        out[on_arc, 1] = sign * r * (1.0 - np.cos(phi))
        after = s > self.run + self.arc_len
        end = np.array([self.run + r * math.sin(abs(self.sweep)), sign * r * (1.0 - math.cos(abs(self.sweep)))])
        exit_dir = np.array([math.cos(self.sweep), math.sin(self.sweep)])
        out[after] = end + (s[after] - self.run - self.arc_len)[:, None] * exit_dir
        return out


def _arc_points(radius: float, sign: float, offset: float, s: np.ndarray) -> np.ndarray:
    """Points on a curve of curvature sign/radius, shifted ``offset`` along the left normal."""
    phi = s / radius
    r_eff = radius - sign * offset
    x = r_eff * np.sin(phi)
    y = sign * (radius - r_eff * np.cos(phi))
    return np.stack([x, y], axis=1)


# ---------------------------------------------------------------------------
# scene families (built in agent frame: target lane center along the path)


def _straight_layout(rng):
    w = LANE_WIDTH
    lo, hi = -w / 2, 1.5 * w
    drivable = [rect(-ROAD_BACK, ROAD_AHEAD, lo, hi)]
    lanes = [
        Lane(np.array([[-ROAD_BACK, 0.0], [ROAD_AHEAD, 0.0]])),
        Lane(np.array([[ROAD_AHEAD, w], [-ROAD_BACK, w]])),
    ]
    walkways = [
        rect(-ROAD_BACK, ROAD_AHEAD, lo - WALKWAY_WIDTH, lo),
        rect(-ROAD_BACK, ROAD_AHEAD, hi, hi + WALKWAY_WIDTH),
    ]
    xc = rng.uniform(15.0, 60.0)
    crossings = [rect(xc, xc + 4.0, lo, hi)]
    return drivable, lanes, crossings, walkways, _Path(run=1e9), "straight"


def _curve_layout(rng, cfg: GenerationConfig):
    w = LANE_WIDTH
    radius = rng.uniform(*cfg.curve_radius_range)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    s_end = min(ROAD_AHEAD, 0.8 * math.pi * radius)
    s = np.linspace(-ROAD_BACK, s_end, 64)
    lo, hi = -w / 2, 1.5 * w

    def band(d0, d1):
        return np.concatenate([_arc_points(radius, sign, d0, s), _arc_points(radius, sign, d1, s)[::-1]])

    drivable = [band(lo, hi)]
    lanes = [Lane(_arc_points(radius, sign, 0.0, s)), Lane(_arc_points(radius, sign, w, s)[::-1])]
    walkways = [band(lo - WALKWAY_WIDTH, lo), band(hi, hi + WALKWAY_WIDTH)]
    path_radius = radius
    path = _Path(run=0.0, radius=path_radius, sweep=sign * s_end / radius)
    # keep the rollout on the drawn arc; beyond s_end it continues straight
    maneuver = "curve_left" if sign > 0 else "curve_right"
    return drivable, lanes, [], walkways, path, maneuver


def _intersection_layout(rng, cfg: GenerationConfig, four_way: bool, reach: float):
    w = LANE_WIDTH
    lo, hi = -w / 2, 1.5 * w
    yc = w / 2
    if four_way:
        maneuver = ["straight", "left", "right"][int(rng.choice(3, p=[0.5, 0.25, 0.25]))]
    else:
        maneuver = "left" if rng.random() < 0.5 else "right"
    r = rng.uniform(*cfg.turn_radius_range)
    # the turn must start early enough that the rollout gets well into the arc
    start_lo, start_hi = cfg.turn_start_range
    x_s = rng.uniform(start_lo, max(start_lo, min(start_hi, reach - r)))
    # cross road centre chosen so the turn lands on the proper lane
    xc = x_s + r + w / 2 if maneuver != "left" else x_s + r - w / 2
    ya, yb = yc - CROSS_HALF_LENGTH, yc + CROSS_HALF_LENGTH
    xl, xr = xc - w, xc + w
    # near-side corners are rounded concentric with a right turn of radius r
    # so turning paths stay on the road
    rf = r - w / 2
    phi = np.linspace(0.0, np.pi / 2, 7)
    low_corner = np.stack([xl - rf + rf * np.cos(phi[::-1]), lo - rf + rf * np.sin(phi[::-1])], axis=1)
    high_corner = np.stack([xl - rf + rf * np.cos(-phi), hi + rf + rf * np.sin(-phi)], axis=1)
    if four_way:
        outline = [
            [[-ROAD_BACK, lo]], low_corner, [[xl, ya], [xr, ya], [xr, lo], [ROAD_AHEAD, lo],
            [ROAD_AHEAD, hi], [xr, hi], [xr, yb], [xl, yb]], high_corner, [[-ROAD_BACK, hi]],
        ]
    else:
        outline = [
            [[-ROAD_BACK, lo]], low_corner, [[xl, ya], [xr, ya], [xr, yb], [xl, yb]], high_corner,
            [[-ROAD_BACK, hi]],
        ]
    drivable = [np.concatenate([np.asarray(part, dtype=np.float64) for part in outline])]
    south_x, north_x = xc - w / 2, xc + w / 2
    lanes = [
        Lane(np.array([[-ROAD_BACK, 0.0], [xl, 0.0]])),
        Lane(np.array([[xl, w], [-ROAD_BACK, w]])),
        Lane(np.array([[south_x, yb], [south_x, ya]])),
        Lane(np.array([[north_x, ya], [north_x, yb]])),
    ]
    if four_way:
        lanes += [
            Lane(np.array([[xl, 0.0], [ROAD_AHEAD, 0.0]])),
            Lane(np.array([[ROAD_AHEAD, w], [xr, w]])),
        ]
    # turn connectors from the target lane onto both cross-road lanes
    for sweep, x_end in ((-math.pi / 2, south_x), (math.pi / 2, north_x)):
        rad = abs(x_end - x_s) if x_end > x_s else None
        if rad is None or rad < 1.0:
            continue
        conn = _Path(run=x_s, radius=rad, sweep=sweep)
        lanes.append(Lane(conn(np.linspace(x_s, x_s + rad * math.pi / 2 + 5.0, 24))))
    crossings = [rect(xl - 4.0, xl, lo, hi)]
    walkways = [rect(-ROAD_BACK, xl, lo - WALKWAY_WIDTH, lo), rect(-ROAD_BACK, xl, hi, hi + WALKWAY_WIDTH)]
    if maneuver == "straight":
        path = _Path(run=1e9)
    else:
        sweep = math.pi / 2 if maneuver == "left" else -math.pi / 2
        path = _Path(run=x_s, radius=r, sweep=sweep)
    return drivable, lanes, crossings, walkways, path, maneuver


def _lane_pose(lane: Lane, u: float) -> tuple[np.ndarray, float]:
    seg = np.diff(lane.points, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = u * cum[-1]
    i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1))
    frac = (s - cum[i]) / lengths[i] if lengths[i] > 0 else 0.0
    pos = lane.points[i] + frac * seg[i]
    return pos, math.atan2(seg[i, 1], seg[i, 0])


def _other_agents(rng, lanes: list[Lane], count: int, cfg: GenerationConfig) -> list[AgentState]:
    agents = []
    for _ in range(count):
        lane = lanes[int(rng.integers(len(lanes)))]
        for _attempt in range(50):
            pos, heading = _lane_pose(lane, rng.uniform())
            if np.hypot(*pos) > 8.0 and all(np.hypot(*(pos - a.position)) > 6.0 for a in agents):
                break
        agents.append(AgentState(
            position=pos,
            heading=wrap_angle(heading),
            half_extent=(rng.uniform(1.9, 2.6), rng.uniform(0.85, 1.05)),
            speed=rng.uniform(*cfg.speed_range),
            accel=0.0,
            heading_rate=0.0,
        ))
    return agents


def generate_scene(seed: int, params: GenerationConfig | None = None) -> Sample:
    """Generate one synthetic sample; pure function of ``(seed, params)``."""
    cfg = params or GenerationConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)

    names = [f for f in FAMILIES if cfg.family_weights.get(f, 0.0) > 0]
    weights = np.array([cfg.family_weights[f] for f in names], dtype=np.float64)
    family = names[int(rng.choice(len(names), p=weights / weights.sum()))]

    v0 = rng.uniform(*cfg.speed_range)
    accel = rng.uniform(*cfg.accel_range)
    steps = cfg.horizon_steps
    times = np.arange(1, steps + 1) / cfg.frequency_hz
    s_along = arc_length_profile(v0, accel, cfg.speed_max, times)

    if family == "straight":
        drivable, lanes, crossings, walkways, path, maneuver = _straight_layout(rng)
    elif family == "curve":
        drivable, lanes, crossings, walkways, path, maneuver = _curve_layout(rng, cfg)
    else:
        drivable, lanes, crossings, walkways, path, maneuver = _intersection_layout(
            rng, cfg, four_way=family == "four_way", reach=float(s_along[-1]))

    heading_rate = 0.0
    if path.sweep != 0.0 and path.run <= 0.0:
        heading_rate = math.copysign(v0 / path.radius, path.sweep)
    gt = path(s_along)

    target = AgentState(
        position=np.zeros(2), heading=0.0,
        half_extent=(rng.uniform(2.0, 2.5), rng.uniform(0.9, 1.0)),
        speed=v0, accel=accel, heading_rate=heading_rate, is_target=True,
    )
    n_agents = int(rng.integers(cfg.agent_count[0], cfg.agent_count[1] + 1))
    agents = _other_agents(rng, lanes, n_agents - 1, cfg)
    insert_at = int(rng.integers(len(agents) + 1))
    agents.insert(insert_at, target)

    local = Scene(drivable=drivable, lanes=lanes, ped_crossings=crossings, walkways=walkways, agents=agents)
    theta = rng.uniform(-math.pi, math.pi)
    offset = rng.uniform(-500.0, 500.0, size=2)
    world = _to_world(local, theta, offset)
    scene = to_agent_frame(world, insert_at)

    return Sample(
        scene=scene,
        kinematics=np.array([v0, accel, heading_rate]),
        gt=gt,
        sample_id=f"s{seed}",
        rng_seed=int(seed),
        family=family,
        maneuver=maneuver,
    )


def generate_dataset(count: int, seed: int, params: GenerationConfig | None = None) -> list[Sample]:
    if count < 1:
        raise ConfigurationError("count must be positive")
    seeds = np.random.SeedSequence(seed).generate_state(count)
    samples = []
    for i, s in enumerate(seeds):
        sample = generate_scene(int(s), params)
        sample.sample_id = f"{seed}-{i:06d}"
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# line-delimited dataset file


def _poly_list(polys):
    return [p.tolist() for p in polys]


def sample_to_record(sample: Sample) -> dict:
    sc = sample.scene
    return {
        "format": FORMAT_TAG,
        "sample_id": sample.sample_id,
        "rng_seed": sample.rng_seed,
        "family": sample.family,
        "maneuver": sample.maneuver,
        "kinematics": sample.kinematics.tolist(),
        "gt": sample.gt.tolist(),
        "scene": {
            "drivable": _poly_list(sc.drivable),
            "lanes": [{"points": l.points.tolist(), "width": l.width} for l in sc.lanes],
            "ped_crossings": _poly_list(sc.ped_crossings),
            "walkways": _poly_list(sc.walkways),
            "agents": [
                {
                    "position": a.position.tolist(),
                    "heading": a.heading,
                    "half_extent": a.half_extent.tolist(),
                    "speed": a.speed,
                    "accel": a.accel,
                    "heading_rate": a.heading_rate,
                    "is_target": a.is_target,
                }
                for a in sc.agents
            ],
        },
    }


def sample_from_record(rec: dict) -> Sample:
    if rec.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported sample format {rec.get('format')!r}")
    sc = rec["scene"]
    scene = Scene(
        drivable=sc["drivable"],
        lanes=[Lane(l["points"], l["width"]) for l in sc["lanes"]],
        ped_crossings=sc["ped_crossings"],
        walkways=sc["walkways"],
        agents=[AgentState(**a) for a in sc["agents"]],
    )
    return Sample(
        scene=scene,
        kinematics=rec["kinematics"],
        gt=rec["gt"],
        sample_id=rec["sample_id"],
        rng_seed=rec["rng_seed"],
        family=rec.get("family", ""),
        maneuver=rec.get("maneuver", ""),
    )


def dumps_sample(sample: Sample) -> str:
    return json.dumps(sample_to_record(sample), separators=(",", ":"))


def write_dataset(path, samples: Iterable[Sample], header: dict | None = None) -> None:
    """Write samples as JSON lines; an optional header record goes first."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"format": FORMAT_TAG, "header": header}, sort_keys=True,
                                separators=(",", ":")) + "\n")
        for s in samples:
            fh.write(dumps_sample(s) + "\n")


def iter_dataset(path) -> Iterator[Sample]:
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "header" in rec:
                continue
            yield sample_from_record(rec)


def read_dataset(path) -> tuple[dict | None, list[Sample]]:
    header = None
    with Path(path).open(encoding="utf-8") as fh:
        first = fh.readline()
    if first.strip():
        rec = json.loads(first)
        if "header" in rec:
            header = rec["header"]
    return header, list(iter_dataset(path))
