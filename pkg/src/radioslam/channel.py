"""Multipath observation synthesis for the simulated scene.

Each detected specular path contributes one observation triple
(d, theta, phi): biased noisy path length, azimuth of arrival measured in
the vehicle frame (world azimuth of the virtual-transmitter direction
minus the true heading, plus noise), and polar angle of arrival. Clutter
paths are appended according to a Poisson count with uniform marginals.

Observations can be dumped to and replayed from a line-delimited file;
a replayed run keeps every non-path random draw identical because all
randomness is keyed by named substreams.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Optional

import numpy as np

from . import geometry as geo
from .world import substream


@dataclasses.dataclass
class PathObservation:
    d: float
    theta: float
    phi: float
    source_reflector: Optional[int] = None  # truth tag, diagnostics only


@dataclasses.dataclass
class ObservationSet:
    vehicle_id: int
    slot: int
    paths: list
    speed_meas: float
    heading_meas: float
    gps_xy: Optional[np.ndarray] = None  # drawn once, on the spawn slot


def visible_virtual_transmitters(position, reflectors, tol=1e-9):
    """Reflectors whose single-bounce path to ``position`` exists.

    A facade contributes iff the receiver is strictly on the base-station
    side of its plane and the mirror ray pierces the facade polygon
    between the image point and the receiver. Returns a list of
    (reflector, virtual-transmitter position, reflection point).
    """
    out = []
    pos = np.asarray(position, dtype=float)
    for refl in reflectors:
        if refl.plane.signed_distance(pos) <= tol:
            continue
        vt = refl.image_point
        hit = geo.ray_plane_intersection(vt, pos - vt, refl.plane)
        if hit is None:
            continue
        if not refl.polygon.contains(hit, tol=1e-6):
            continue
        out.append((refl, vt, hit))
    return out


def synthesize(world, replay=None):
    """Observation sets for every vehicle at the world's current slot.

    ``replay`` maps (slot, vehicle_id) to recorded (d, theta, phi) rows;
    when given, path content comes from the recording while navigation
    measurements are still drawn from their own substreams.
    """
    cfg = world.cfg
    slot = world.slot
    out = []
    for v in world.vehicles:
        nav = substream(cfg.seed, "nav", slot, v.id)
        speed = float(np.linalg.norm(v.velocity)) + float(nav.normal(0.0, cfg.sigma_v))
        heading = v.orientation + float(nav.normal(0.0, cfg.sigma_v_theta))
        gps = None
        if v.spawn_slot == slot or (slot == 0 and v.spawn_slot == 0):
            gps = v.position[:2] + nav.normal(0.0, cfg.sigma_g, size=2)
        if replay is not None:
            rows = replay.get((slot, v.id), [])
            paths = [PathObservation(d, th, ph) for d, th, ph in rows]
        else:
            paths = _draw_paths(world, v)
        out.append(
            ObservationSet(
                vehicle_id=v.id,
                slot=slot,
                paths=paths,
                speed_meas=speed,
                heading_meas=float(geo.wrap_angle(heading)),
                gps_xy=gps,
            )
        )
    return out


def _draw_paths(world, v):
    cfg = world.cfg
    rng = substream(cfg.seed, "chan", world.slot, v.id)
    alpha = v.orientation
    paths = []
    for refl, vt, _ in visible_virtual_transmitters(v.position, world.reflectors):
        if cfg.p_d < 1.0 and rng.uniform() >= cfg.p_d:
            continue
        offset = vt - v.position
        dist = float(np.linalg.norm(offset))
        _, theta_w, phi_w = geo.cart_to_sph(offset)
        d = dist + v.bias + float(rng.normal(0.0, cfg.sigma_d))
        theta = geo.wrap_angle(theta_w - alpha + rng.normal(0.0, cfg.sigma_theta))
        phi = float(np.clip(phi_w + rng.normal(0.0, cfg.sigma_theta), 0.0, np.pi))
        paths.append(
            PathObservation(max(d, 0.0), float(theta), phi, source_reflector=refl.id)
        )
    for _ in range(rng.poisson(cfg.mu_fa)):
        paths.append(
            PathObservation(
                float(rng.uniform(0.0, cfg.fa_range_max)),
                float(rng.uniform(-np.pi, np.pi)),
                float(rng.uniform(0.0, np.pi)),
                source_reflector=None,
            )
        )
    paths.sort(key=lambda p: p.d)
    return paths


def fa_density(cfg):
    """Clutter density over the (d, theta, phi) observation space."""
    return 1.0 / (cfg.fa_range_max * 2.0 * np.pi * np.pi)


def dump_observations(fh, observation_sets):
    """Append one JSON line per path: slot, vehicle, d, theta, phi."""
    for obs in observation_sets:
        for p in obs.paths:
            fh.write(
                json.dumps(
                    {
                        "slot": obs.slot,
                        "vehicle": obs.vehicle_id,
                        "d": p.d,
                        "theta": p.theta,
                        "phi": p.phi,
                    }
                )
                + "\n"
            )


def load_observations(path):
    """Read a dump back into the replay mapping used by :func:`synthesize`."""
    replay = {}
    with open(path, "r", encoding="utf8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            key = (int(rec["slot"]), int(rec["vehicle"]))
            replay.setdefault(key, []).append(
                (float(rec["d"]), float(rec["theta"]), float(rec["phi"]))
            )
    return replay
