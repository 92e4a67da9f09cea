"""Scene truth: configuration, reflectors, vehicles and their motion.

The simulated scene is a straight road segment along +x with one elevated
base station and a set of planar building facades flanking the road. A
constant number of vehicles is kept on the road (one lane per driving
direction); whenever a vehicle leaves the segment a replacement enters,
which is also what drives the "vehicle index" used by the position-error
metric: index f is the f-th vehicle to complete its pass.

Randomness is organized as named substreams derived from the scenario
seed, so any module can re-derive exactly the draws it needs (replaying
recorded observations keeps every other draw identical).
"""

from __future__ import annotations

import dataclasses
import zlib
from typing import Optional, Sequence

import numpy as np
import yaml

from . import geometry as geo
from .errors import ConfigError, DegenerateInput


def substream(seed, *parts):
    """Deterministic numpy Generator for a named purpose.

    Parts may be ints or short strings; strings are crc32-folded so the
    key is stable across runs and platforms.
    """
    key = [int(seed) & 0xFFFFFFFF]
    for p in parts:
        if isinstance(p, str):
            key.append(zlib.crc32(p.encode("utf8")))
        else:
            key.append(int(p) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclasses.dataclass
class ScenarioConfig:
    """Full parameter surface of a run. All distances in meters, angles in
    radians, durations in seconds; the clock bias is kept in meters."""

    # scene
    road_length: float = 100.0
    bs_position: tuple = (50.0, 0.0, 8.0)
    vehicle_density: float = 8.0  # concurrent vehicles per 100 m of road
    vehicle_speed: float = 10.0
    slot_duration: float = 0.1
    vehicle_height: float = 1.5
    lane_offsets: tuple = (-2.0, 2.0)  # y of the +x lane, y of the -x lane
    n_slots: int = 1000
    seed: int = 0

    # measurement noise
    sigma_d: float = 0.2
    sigma_theta: float = float(np.deg2rad(1.0))
    sigma_v: float = 0.1
    sigma_v_theta: float = float(np.deg2rad(0.1))
    sigma_g: float = 5.0
    sigma_s: float = 5.0

    # detection and clutter
    p_d: float = 1.0
    mu_fa: float = 0.0
    fa_range_max: float = 50.0

    # association
    delta_fa: float = 1e-4
    bp_iters: int = 20
    bp_damping: float = 0.5
    bp_tol: float = 1e-6
    n_reflector_samples: int = 32
    epsilon_fa_floor: float = 1e-12

    # common virtual transmitter registry
    n_cvt_particles: int = 120
    cvt_grace_slots: int = 8  # ride out gaps when no vehicle faces the wall
    ap_damping: float = 0.9
    ap_max_iter: int = 200
    ap_convergence_iter: int = 15

    # reflector mapping
    l_alpha: float = 1.98e-3
    l_beta: float = 0.99
    lambda_ref: Optional[float] = None  # defaults to 20 (sigma_d / sigma_theta)^2
    h_scale: float = 100.0
    f0_r: float = 0.5
    edge_directions: int = 8
    edge_bin_width: Optional[float] = None  # defaults to sigma_d
    edge_refresh_every: int = 10
    element_capacity: int = 10000
    reflector_spawn_elements: int = 10
    reflector_merge_radius: float = 1.0  # image points closer than this are one facade
    element_warmup_slots: int = 8  # let a fresh cvt cloud settle before harvesting it
    reflector_orphan_slots: int = 50  # immature estimates unclaimed this long are dropped
    ftrl_epochs: int = 3

    # team particle filter
    n_vehicle_particles: int = 120
    alpha_c: float = 0.95
    p_m: float = 0.05
    filter_batches: int = 4
    resample_threshold: float = 0.5
    filter_mc: int = 12

    # wake-up
    wakeup_min_reflectors: int = 3
    emission_sigma: Optional[float] = None  # defaults to 3 (sigma_d + 0.2 sigma_s)
    emission_bias_leak: float = 0.2
    scwls_max_iter: int = 20
    scwls_tol: float = 1e-8
    root_imag_tol: float = 1e-9
    wakeup_residual_gate: float = 100.0  # weighted SSR above this is a misdecode

    def __post_init__(self):
        if self.road_length <= 0:
            raise ConfigError("road_length must be positive")
        if len(self.bs_position) != 3:
            raise ConfigError("bs_position must have three components")
        self.bs_position = tuple(float(c) for c in self.bs_position)
        self.lane_offsets = tuple(float(c) for c in self.lane_offsets)
        for name in (
            "vehicle_speed",
            "slot_duration",
            "sigma_d",
            "sigma_theta",
            "vehicle_density",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("sigma_v", "sigma_v_theta", "sigma_g", "sigma_s", "mu_fa"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.p_d <= 1.0:
            raise ConfigError("p_d must lie in [0, 1]")
        if not 0.0 <= self.f0_r <= 1.0:
            raise ConfigError("f0_r must lie in [0, 1]")
        if not 0.0 < self.alpha_c <= 1.0:
            raise ConfigError("alpha_c must lie in (0, 1]")
        if not 0.0 <= self.p_m <= 1.0:
            raise ConfigError("p_m must lie in [0, 1]")
        if self.n_vehicle_particles < 2 or self.n_cvt_particles < 2:
            raise ConfigError("particle counts must be at least 2")
        if self.filter_batches < 1:
            raise ConfigError("filter_batches must be at least 1")

    @property
    def bs(self):
        return np.array(self.bs_position)

    @property
    def lambda_ref_value(self):
        if self.lambda_ref is not None:
            return self.lambda_ref
        return 20.0 * (self.sigma_d / self.sigma_theta) ** 2

    @property
    def emission_sigma_value(self):
        if self.emission_sigma is not None:
            return self.emission_sigma
        return 3.0 * (self.sigma_d + self.emission_bias_leak * self.sigma_s)

    @property
    def edge_bin_width_value(self):
        return self.edge_bin_width if self.edge_bin_width is not None else self.sigma_d

    @property
    def n_concurrent(self):
        return max(1, int(round(self.vehicle_density * self.road_length / 100.0)))


class ReflectorTruth:
    """One planar facade: a polygon plus its oriented support plane.

    The plane normal is flipped if needed so the base station sits on the
    positive side, matching the convention used by the mapping module.
    """

    def __init__(self, rid, vertices, bs_position):
        vertices = np.asarray(vertices, dtype=float)
        if vertices.shape[0] < 3:
            raise ConfigError(f"reflector {rid}: needs at least 3 vertices")
        n = np.cross(vertices[1] - vertices[0], vertices[2] - vertices[0])
        if np.linalg.norm(n) < 1e-9:
            raise ConfigError(f"reflector {rid}: first three vertices are collinear")
        plane = geo.Plane.from_normal_point(n, vertices[0])
        if plane.signed_distance(np.asarray(bs_position)) < 0:
            plane = geo.Plane.from_normal_point(-plane.normal, vertices[0])
        try:
            self.polygon = geo.PlanarPolygon(plane, vertices)
        except DegenerateInput as exc:
            raise ConfigError(f"reflector {rid}: {exc}") from exc
        self.id = int(rid)
        self.plane = plane
        self.image_point = geo.mirror_point(plane, np.asarray(bs_position, dtype=float))


@dataclasses.dataclass
class VehicleTruth:
    id: int
    position: np.ndarray  # (3,)
    velocity: np.ndarray  # (3,)
    bias: float
    spawn_slot: int

    @property
    def orientation(self):
        """Heading of the velocity vector in the road plane."""
        return float(np.arctan2(self.velocity[1], self.velocity[0]))


def _facade_vertices(x0, x1, y, tilt_deg, lean_deg, height):
    """Rectangle corners of a facade whose base line runs roughly along x.

    tilt yaws the wall in the road plane, lean tips it off vertical; both
    keep the four corners coplanar (the wall stays a parallelogram).
    """
    cx = 0.5 * (x0 + x1)
    half = 0.5 * (x1 - x0)
    tilt = np.deg2rad(tilt_deg)
    lean = np.deg2rad(lean_deg)
    along = np.array([np.cos(tilt), np.sin(tilt), 0.0])
    up = np.array([0.0, np.sin(lean) * (-np.sign(y)), np.cos(lean)])
    c = np.array([cx, y, 0.0])
    a = c - half * along
    b = c + half * along
    return np.stack([a, b, b + height * up, a + height * up])


_DEFAULT_FACADES = [
    # (x0, x1, y, tilt_deg, lean_deg, height)
    (2.0, 20.0, -11.0, 3.0, 0.0, 9.0),
    (24.0, 40.0, -13.0, -4.0, 1.0, 12.0),
    (44.0, 60.0, -10.5, 2.0, 0.0, 7.0),
    (64.0, 80.0, -12.5, -3.0, -1.0, 10.0),
    (84.0, 98.0, -11.5, 5.0, 2.0, 8.0),
    (0.0, 16.0, 12.0, -2.0, 0.0, 11.0),
    (20.0, 36.0, 10.5, 4.0, -1.0, 8.0),
    (40.0, 58.0, 13.0, -5.0, 0.0, 13.0),
    (62.0, 78.0, 11.0, 2.0, 1.0, 9.0),
    (82.0, 100.0, 12.5, -3.0, 0.0, 10.0),
]


def default_reflectors(cfg):
    """The stock ten-facade layout flanking the road."""
    return [
        ReflectorTruth(i + 1, _facade_vertices(*spec), cfg.bs)
        for i, spec in enumerate(_DEFAULT_FACADES)
    ]


class World:
    """Truth state advanced slot by slot."""

    def __init__(self, cfg, reflectors=None):
        self.cfg = cfg
        self.reflectors = list(reflectors) if reflectors is not None else default_reflectors(cfg)
        self.slot = 0
        self.exit_count = 0
        self._next_id = 0
        self._lane_toggle = 0
        self._rng = substream(cfg.seed, "world")
        self.vehicles: list[VehicleTruth] = []
        n = cfg.n_concurrent
        spacing = cfg.road_length / n
        for i in range(n):
            x = (i + 0.5) * spacing + self._rng.uniform(-0.3, 0.3) * spacing
            self._spawn(x=float(np.clip(x, 0.0, cfg.road_length)))

    def _spawn(self, x=None):
        cfg = self.cfg
        lane = self._lane_toggle
        self._lane_toggle ^= 1
        direction = 1.0 if lane == 0 else -1.0
        if x is None:
            x = 0.0 if direction > 0 else cfg.road_length
            # stagger entries so replacements do not arrive in lockstep
            x -= direction * self._rng.uniform(0.0, cfg.vehicle_speed * cfg.slot_duration)
        pos = np.array([x, cfg.lane_offsets[lane], cfg.vehicle_height])
        vel = np.array([direction * cfg.vehicle_speed, 0.0, 0.0])
        v = VehicleTruth(
            id=self._next_id,
            position=pos,
            velocity=vel,
            bias=float(self._rng.normal(0.0, cfg.sigma_s)),
            spawn_slot=self.slot,
        )
        self._next_id += 1
        self.vehicles.append(v)
        return v

    def advance(self):
        """Move one slot forward. Returns the vehicles that left the road;
        each departure increments the vehicle index and triggers a spawn."""
        cfg = self.cfg
        self.slot += 1
        exited = []
        kept = []
        for v in self.vehicles:
            v.position = v.position + v.velocity * cfg.slot_duration
            if 0.0 <= v.position[0] <= cfg.road_length:
                kept.append(v)
            else:
                exited.append(v)
        self.vehicles = kept
        for _ in exited:
            self.exit_count += 1
            self._spawn()
        return exited


# --- scenario files ---------------------------------------------------------

_CFG_FIELDS = {f.name: f for f in dataclasses.fields(ScenarioConfig)}


def _coerce(name, value):
    field = _CFG_FIELDS[name]
    if value is None:
        return None
    if field.type in ("float", float) or name in ("lambda_ref", "emission_sigma", "edge_bin_width"):
        if isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a scalar")
        return float(value)
    if field.type in ("int", int):
        return int(value)
    if isinstance(field.default, tuple):
        return tuple(float(c) for c in value)
    return value


def config_from_mapping(mapping):
    """Build a ScenarioConfig from a plain dict, rejecting unknown keys."""
    if not isinstance(mapping, dict):
        raise ConfigError("scenario section must be a mapping")
    unknown = sorted(set(mapping) - set(_CFG_FIELDS))
    if unknown:
        raise ConfigError(f"unknown scenario keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v) for k, v in mapping.items()}
    try:
        return ScenarioConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def apply_overrides(cfg, overrides):
    """New config with ``key=value`` string overrides applied."""
    data = dataclasses.asdict(cfg)
    for key, raw in overrides.items():
        if key not in _CFG_FIELDS:
            raise ConfigError(f"unknown scenario key: {key}")
        current = data[key]
        if isinstance(current, tuple) or isinstance(_CFG_FIELDS[key].default, tuple):
            parts = [p for p in str(raw).replace(",", " ").split() if p]
            data[key] = tuple(float(p) for p in parts)
        elif _CFG_FIELDS[key].type in ("int", int):
            data[key] = int(raw)
        else:
            try:
                data[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return config_from_mapping(data)


def load_scenario(path):
    """Read a scenario file: returns (config, reflectors).

    Layout::

        scenario:
          road_length: 100.0
          ...                      # any ScenarioConfig field
        reflectors:                # optional; defaults to the stock layout
          - id: 1
            vertices: [[x, y, z], ...]

    Unknown keys anywhere are an error.
    """
    with open(path, "r", encoding="utf8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError("scenario file must be a mapping at top level")
    unknown = sorted(set(doc) - {"scenario", "reflectors"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    cfg = config_from_mapping(doc.get("scenario") or {})
    reflectors = None
    if "reflectors" in doc and doc["reflectors"] is not None:
        if not isinstance(doc["reflectors"], list):
            raise ConfigError("reflectors must be a list")
        reflectors = []
        for entry in doc["reflectors"]:
            extra = sorted(set(entry) - {"id", "vertices"})
            if extra:
                raise ConfigError(f"unknown reflector keys: {', '.join(extra)}")
            if "id" not in entry or "vertices" not in entry:
                raise ConfigError("each reflector needs an id and vertices")
            reflectors.append(ReflectorTruth(entry["id"], entry["vertices"], cfg.bs))
    return cfg, reflectors


def save_scenario(path, cfg, reflectors=None):
    doc = {"scenario": dataclasses.asdict(cfg)}
    doc["scenario"]["bs_position"] = list(cfg.bs_position)
    doc["scenario"]["lane_offsets"] = list(cfg.lane_offsets)
    if reflectors is not None:
        doc["reflectors"] = [
            {"id": r.id, "vertices": r.polygon.vertices.tolist()} for r in reflectors
        ]
    with open(path, "w", encoding="utf8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
