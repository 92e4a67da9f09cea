"""Reflector learning from associated path observations.

Once a path observation is tied to a common virtual transmitter, the
pair (vehicle estimate, CVT mean) pins down one sample of the mirroring
facade. The signal bounced where the sight line from the transmitter
image to the vehicle meets the bisector plane of the image and the base
station, and the image-to-base-station direction is the facade normal.
Each such sample is a reflecting element: a surface point plus the
normal angles it votes for.

Everything downstream is regression on these elements. A
follow-the-regularized-leader learner fits the plane triple
(theta, phi, d) online, an areal-density scan over the projected
elements traces a polygonal boundary, and the lifetime element count
sets how much the learned geometry is trusted when predicting whether a
vehicle at a given position can hear the reflection at all.
"""

from __future__ import annotations

import collections
import dataclasses
import json

import numpy as np

from . import geometry as geo
from .errors import DegenerateInput, EdgeUnavailable

MAP_FORMAT = "radioslam-map/1"

# Residual history kept for sampling plane uncertainty; a few hundred
# elements is plenty to estimate three variances.
RESIDUAL_WINDOW = 256

# Parameter spread never collapses below these even when the residual
# history says so, the association stage needs a non-degenerate cloud.
MIN_ANGLE_STD = 1e-4
MIN_OFFSET_STD = 1e-3

# A warm start must not leave the accumulators empty: with nothing
# accumulated the learning rate stays at l_alpha / l_beta, which times
# the angle-coordinate curvature (lambda_ref plus the data term) exceeds
# the stability bound, and the learner oscillates away from an exact
# optimum before the growing gradients rein the rate back in. Seeding n
# as if curvature-scale gradients had been seen keeps rate * curvature
# at this target from the first step.
STABLE_RATE_TARGET = 0.5


@dataclasses.dataclass(frozen=True)
class ReflectingElement:
    """One facade sample: surface point plus voted normal angles."""

    point: np.ndarray  # (3,)
    theta: float
    phi: float


def extract_element(vehicle_pos, cvt_mean, bs, tol=1e-6):
    """Reflecting element implied by one associated path.

    The CVT is (an estimate of) the base-station image in the facade, so
    the facade itself is the bisector plane of the two, and the bounce
    point is where the image-to-vehicle sight line crosses it. Raises
    DegenerateInput when the CVT sits on the base station or the sight
    line never reaches the bisector plane.
    """
    cvt_mean = np.asarray(cvt_mean, dtype=float)
    bs = np.asarray(bs, dtype=float)
    sep = bs - cvt_mean
    if np.linalg.norm(sep) < tol:
        raise DegenerateInput("virtual transmitter sits on the base station")
    midplane = geo.Plane.from_normal_point(sep, 0.5 * (bs + cvt_mean))
    point = geo.ray_plane_intersection(cvt_mean, np.asarray(vehicle_pos, dtype=float) - cvt_mean, midplane)
    if point is None:
        raise DegenerateInput("sight line misses the bisector plane")
    _, theta, phi = geo.cart_to_sph(sep)
    return ReflectingElement(point, theta, phi)


def _element_arrays(elements):
    pts = np.array([el.point for el in elements], dtype=float)
    thetas = np.array([el.theta for el in elements], dtype=float)
    phis = np.array([el.phi for el in elements], dtype=float)
    return pts, thetas, phis


class FtrlPlaneLearner:
    """Per-coordinate FTRL on the plane triple w = (theta, phi, d).

    The loss per element is half the squared plane misfit of its point
    plus the angle disagreement weighted by ``lambda_ref``; feeding a
    window takes the batch mean. State is the accumulated gradient pair
    (z, n) per coordinate and the parameters are always derived from it,
    so a warm start is just the z that makes the derived w come out at
    the wanted triple while n is still zero.
    """

    def __init__(self, l_alpha, l_beta, lambda_ref, w0=None, curvature=None):
        if l_alpha <= 0 or l_beta <= 0 or lambda_ref < 0:
            raise ValueError("learning rates must be positive, lambda_ref non-negative")
        self.l_alpha = float(l_alpha)
        self.l_beta = float(l_beta)
        self.lambda_ref = float(lambda_ref)
        self.z = np.zeros(3)
        self.n = np.zeros(3)
        if curvature is not None:
            need = self.l_alpha * np.asarray(curvature, dtype=float) / STABLE_RATE_TARGET - self.l_beta
            self.n = np.maximum(need, 0.0) ** 2
        if w0 is not None:
            self.z = -np.asarray(w0, dtype=float) * (self.l_beta + np.sqrt(self.n)) / self.l_alpha

    @property
    def w(self):
        return -self.l_alpha * self.z / (self.l_beta + np.sqrt(self.n))

    def residuals(self, points, thetas, phis, w=None):
        """Plane misfit and angle residuals of a window at w (current by
        default); azimuth residuals are wrapped, the polar angle is not
        circular."""
        theta, phi, d = self.w if w is None else np.asarray(w, dtype=float)
        points = np.atleast_2d(np.asarray(points, dtype=float))
        misfit = points @ geo.unit_vector(theta, phi) + d
        dtheta = geo.wrap_angle(theta - np.asarray(thetas, dtype=float))
        dphi = phi - np.asarray(phis, dtype=float)
        return misfit, np.atleast_1d(dtheta), np.atleast_1d(dphi)

    def loss(self, points, thetas, phis, w=None):
        misfit, dtheta, dphi = self.residuals(points, thetas, phis, w)
        return 0.5 * float(np.mean(misfit**2 + self.lambda_ref * (dtheta**2 + dphi**2)))

    def step(self, points, thetas, phis):
        """One update on the batch-mean gradient; returns the loss at the
        pre-update parameters."""
        w = self.w
        theta, phi, _ = w
        points = np.atleast_2d(np.asarray(points, dtype=float))
        misfit, dtheta, dphi = self.residuals(points, thetas, phis, w)
        st, ct = np.sin(theta), np.cos(theta)
        sp, cp = np.sin(phi), np.cos(phi)
        dn_dtheta = np.array([-st * sp, ct * sp, 0.0])
        dn_dphi = np.array([ct * cp, st * cp, -sp])
        g = np.array(
            [
                np.mean(misfit * (points @ dn_dtheta) + self.lambda_ref * dtheta),
                np.mean(misfit * (points @ dn_dphi) + self.lambda_ref * dphi),
                np.mean(misfit),
            ]
        )
        sigma = (np.sqrt(self.n + g**2) - np.sqrt(self.n)) / self.l_alpha
        self.z += g - sigma * w
        self.n += g**2
        return 0.5 * float(np.mean(misfit**2 + self.lambda_ref * (dtheta**2 + dphi**2)))


def _plane_toward(w, ref):
    """Plane from the parameter triple, flipped so ref lies on the
    positive side. Flipping negates (n, d), in angles: theta + pi,
    pi - phi."""
    plane = geo.Plane.from_w(w)
    if plane.signed_distance(np.asarray(ref, dtype=float)) < 0.0:
        plane = geo.Plane(float(geo.wrap_angle(plane.theta + np.pi)), float(np.pi - plane.phi), -plane.d)
    return plane


def plane_from_element(element):
    """Plane containing the element's point with its voted normal.

    Built straight from the element's angles so a polar-pointing normal
    keeps its azimuth instead of losing it to a Cartesian round trip.
    """
    normal = geo.unit_vector(element.theta, element.phi)
    return geo.Plane(float(element.theta), float(element.phi), -float(normal @ element.point))


def element_curvature(element, lambda_ref):
    """Per-coordinate curvature scale of the element's loss at its own
    angles; the offset coordinate always has unit curvature."""
    st, ct = np.sin(element.theta), np.cos(element.theta)
    sp, cp = np.sin(element.phi), np.cos(element.phi)
    p = element.point
    return np.array(
        [
            lambda_ref + float(p @ [-st * sp, ct * sp, 0.0]) ** 2,
            lambda_ref + float(p @ [ct * cp, st * cp, -sp]) ** 2,
            1.0,
        ]
    )


class ReflectorEstimate:
    """Learned state of one facade.

    Holds the FTRL learner, a bounded element store (the lifetime count
    keeps growing after the ring buffer wraps), the last estimated edge
    polygon, and a short residual history for sampling plane-parameter
    uncertainty.
    """

    def __init__(self, rid, cfg, bs, learner):
        self.id = int(rid)
        self.cfg = cfg
        self.bs = np.asarray(bs, dtype=float)
        self.learner = learner
        self.elements = collections.deque(maxlen=int(cfg.element_capacity))
        self.lifetime = 0
        self.edge = None
        self._polygon = None
        self._residuals = collections.deque(maxlen=RESIDUAL_WINDOW)

    @classmethod
    def from_first_element(cls, rid, cfg, bs, element):
        plane = plane_from_element(element)
        learner = FtrlPlaneLearner(
            cfg.l_alpha,
            cfg.l_beta,
            cfg.lambda_ref_value,
            w0=plane.w,
            curvature=element_curvature(element, cfg.lambda_ref_value),
        )
        return cls(rid, cfg, bs, learner)

    @classmethod
    def from_elements(cls, rid, cfg, bs, elements):
        est = cls.from_first_element(rid, cfg, bs, elements[0])
        est.ingest(elements)
        return est

    @property
    def plane(self):
        return _plane_toward(self.learner.w, self.bs)

    @property
    def normal(self):
        return self.plane.normal

    @property
    def image_point(self):
        return geo.mirror_point(self.plane, self.bs)

    @property
    def density(self):
        return density_factor(self)

    def ingest(self, elements, epochs=None):
        """Learn from newly arrived elements and add them to the store.

        Elements are consumed in arrival order, the whole batch revisited
        for a bounded number of epochs; returns the mean loss of the last
        pass. Residuals against the settled parameters feed the
        uncertainty history.
        """
        elements = list(elements)
        if not elements:
            return 0.0
        epochs = self.cfg.ftrl_epochs if epochs is None else int(epochs)
        losses = []
        for _ in range(max(1, epochs)):
            losses = [self.learner.step(el.point, el.theta, el.phi) for el in elements]
        pts, thetas, phis = _element_arrays(elements)
        misfit, dtheta, dphi = self.learner.residuals(pts, thetas, phis)
        self._residuals.extend(np.column_stack([dtheta, dphi, misfit]))
        self.elements.extend(elements)
        self.lifetime += len(elements)
        return float(np.mean(losses))

    def residual_rms(self):
        """RMS plane misfit (meters) over the residual history; zero when
        nothing has been recorded yet."""
        if not self._residuals:
            return 0.0
        return float(np.sqrt(np.mean(np.asarray(self._residuals)[:, 2] ** 2)))

    def parameter_std(self):
        """Standard error of (theta, phi, d) from the residual history,
        floored so the sampled cloud never collapses."""
        if self._residuals:
            rms = np.sqrt(np.mean(np.asarray(self._residuals) ** 2, axis=0))
            std = rms / np.sqrt(max(self.lifetime, 1))
        else:
            std = np.zeros(3)
        return np.maximum(std, [MIN_ANGLE_STD, MIN_ANGLE_STD, MIN_OFFSET_STD])

    def sample_planes(self, count, rng):
        """Plane triples drawn around the learned parameters, (count, 3)."""
        std = self.parameter_std()
        w = self.plane.w
        return w[None, :] + rng.normal(size=(int(count), 3)) * std[None, :]

    def image_samples(self, count, rng):
        """Base-station image points of sampled planes, (count, 3).

        The mirror map is insensitive to the (n, d) vs (-n, -d)
        ambiguity, so the samples need no side fix.
        """
        ws = self.sample_planes(count, rng)
        normals = geo.unit_vector(ws[:, 0], ws[:, 1])
        s = normals @ self.bs + ws[:, 2]
        return self.bs[None, :] - 2.0 * s[:, None] * normals

    def set_edge(self, omegas):
        """Install an estimated boundary; vertices are re-projected onto
        the current plane before the polygon is built."""
        plane = self.plane
        omegas = np.asarray(omegas, dtype=float)
        omegas = omegas - plane.signed_distance(omegas)[:, None] * plane.normal
        self.edge = omegas
        self._polygon = geo.PlanarPolygon(plane, omegas)

    @property
    def edge_polygon(self):
        return self._polygon


def estimate_edges(estimate, directions=None, bin_width=None):
    """Polygonal boundary of a facade from its element density.

    All stored elements are projected onto the learned plane and weighed
    by their misfit against it (uniform when every element fits, as
    weighing needs contrast). The plane is swept in ``directions``
    angular sectors around the projected centroid; in each sector the
    radial profile is binned at ``bin_width`` and the boundary is the
    outer rim of the last bin whose areal weight density still exceeds
    the global average, so one stray element past the facade cannot drag
    the edge out (a bin needs at least two elements to count). Sectors
    with no qualifying bin borrow the median radius of the others.

    Raises EdgeUnavailable while the lifetime element count is below the
    trust scale, when the elements collapse to a point, and when no
    sector rises above the average density.
    """
    cfg = estimate.cfg
    directions = cfg.edge_directions if directions is None else int(directions)
    bin_width = cfg.edge_bin_width_value if bin_width is None else float(bin_width)
    if estimate.lifetime < cfg.h_scale:
        raise EdgeUnavailable(
            f"reflector {estimate.id}: {estimate.lifetime} elements, needs {cfg.h_scale:.0f}"
        )
    pts, thetas, phis = _element_arrays(estimate.elements)
    plane = estimate.plane
    normal = plane.normal
    projected = pts - plane.signed_distance(pts)[:, None] * normal

    misfit = projected @ normal + plane.d  # zero by construction, kept for form
    dtheta = geo.wrap_angle(plane.theta - thetas)
    dphi = plane.phi - phis
    weights = misfit**2 + cfg.lambda_ref_value * (dtheta**2 + dphi**2)
    total = float(np.sum(weights))
    if total <= 1e-12:
        weights = np.ones(len(pts))
        total = float(len(pts))

    center = projected.mean(axis=0)
    u, v = geo.plane_basis(normal)
    rel = projected - center
    x, y = rel @ u, rel @ v
    radius = np.hypot(x, y)
    r_max = float(radius.max())
    if r_max < max(1e-3 * bin_width, 1e-12):
        raise EdgeUnavailable(f"reflector {estimate.id}: elements collapse to a point")

    n_bins = int(np.ceil(r_max / bin_width))
    sector = np.round(np.arctan2(y, x) / (2.0 * np.pi / directions)).astype(int) % directions
    rbin = np.minimum((radius / bin_width).astype(int), n_bins - 1)
    weight_grid = np.zeros((directions, n_bins))
    count_grid = np.zeros((directions, n_bins))
    np.add.at(weight_grid, (sector, rbin), weights)
    np.add.at(count_grid, (sector, rbin), 1.0)

    k = np.arange(n_bins)
    bin_area = (np.pi / directions) * bin_width**2 * (2.0 * k + 1.0)
    average_density = total / (np.pi * r_max**2)
    # a bin of c elements knows its density to ~1/sqrt(c) relative, so the
    # level comparison is eased by that much; an exactly uniform fill then
    # qualifies everywhere instead of coin-flipping at the knife edge
    slack = 1.0 - 1.0 / np.sqrt(np.maximum(count_grid, 1.0))
    qualifies = (count_grid >= 2.0) & (weight_grid / bin_area[None, :] >= average_density * slack)

    radii = np.full(directions, np.nan)
    for sec in range(directions):
        hits = np.flatnonzero(qualifies[sec])
        if hits.size:
            radii[sec] = min((hits[-1] + 1.0) * bin_width, r_max)
    if not np.any(np.isfinite(radii)):
        raise EdgeUnavailable(f"reflector {estimate.id}: no sector rises above the average density")
    radii = np.where(np.isfinite(radii), radii, np.nanmedian(radii))

    angles = 2.0 * np.pi * np.arange(directions) / directions
    rim = np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * v
    return center + radii[:, None] * rim


def density_factor(estimate):
    """Trust in a facade estimate, in [0, 1].

    Zero until the lifetime element count reaches the trust scale and
    the edge is known; then it saturates exponentially in elements per
    unit of bounded area, so small well-sampled facades are trusted
    sooner than sprawling ones.
    """
    cfg = estimate.cfg
    if estimate.lifetime < cfg.h_scale or estimate.edge_polygon is None:
        return 0.0
    area = estimate.edge_polygon.area()
    if area <= 0.0:
        return 0.0
    return float(1.0 - np.exp(-estimate.lifetime / (cfg.h_scale * area)))


def reflective_probability(estimate, vehicle_pos):
    """Probability that a vehicle at ``vehicle_pos`` hears this facade.

    The candidate bounce point is where the segment from the vehicle to
    the base-station image crosses the plane; the learned boundary
    decides whether the bounce lands on the facade, and the verdict is
    blended with the agnostic prior by the density factor. Depends only
    on position, never on velocity or clock state.
    """
    f0 = estimate.cfg.f0_r
    fd = density_factor(estimate)
    if fd <= 0.0:
        return f0
    plane = estimate.plane
    s_veh = float(plane.signed_distance(np.asarray(vehicle_pos, dtype=float)))
    s_img = float(plane.signed_distance(estimate.image_point))
    denom = s_veh - s_img
    inside = 0.0
    if abs(denom) > 1e-12:
        t = s_veh / denom
        if 0.0 <= t <= 1.0:
            crossing = np.asarray(vehicle_pos, dtype=float) + t * (estimate.image_point - np.asarray(vehicle_pos, dtype=float))
            polygon = estimate.edge_polygon
            crossing = crossing - polygon.plane.signed_distance(crossing) * polygon.plane.normal
            inside = 1.0 if polygon.contains(crossing) else 0.0
    return float(inside * fd + f0 * (1.0 - fd))


class ReflectorMap:
    """Registry of facade estimates plus the pre-spawn element buffers.

    Elements extracted for a CVT that no reflector claims yet are
    buffered per CVT; once a buffer holds enough of them the CVT
    graduates into a new reflector seeded with the whole buffer.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.bs = cfg.bs
        self.estimates = {}
        self.pending = {}
        self._next_id = 1

    def __iter__(self):
        return iter(self.estimates.values())

    def __len__(self):
        return len(self.estimates)

    def get(self, rid):
        return self.estimates[rid]

    def ordered(self):
        return [self.estimates[rid] for rid in sorted(self.estimates)]

    def buffer_element(self, cvt_id, element):
        """Stash an element for an unclaimed CVT; returns the reflector id
        the buffer ends up in once it graduates, else None.

        A full buffer is fitted first; if its image point lands within
        the merge radius of an existing estimate the buffer reinforces
        that facade instead of founding a duplicate. The radius has to
        stay below the closest spacing of neighbouring facade images,
        which for near-parallel street walls can be under two metres.
        """
        buf = self.pending.setdefault(cvt_id, [])
        buf.append(element)
        if len(buf) < self.cfg.reflector_spawn_elements:
            return None
        del self.pending[cvt_id]
        candidate = ReflectorEstimate.from_elements(0, self.cfg, self.bs, buf)
        image = candidate.image_point
        for rid in sorted(self.estimates):
            est = self.estimates[rid]
            if np.linalg.norm(est.image_point - image) <= self.cfg.reflector_merge_radius:
                est.ingest(buf)
                return rid
        rid = self._next_id
        self._next_id += 1
        candidate.id = rid
        self.estimates[rid] = candidate
        return rid

    def dedupe(self):
        """Drop the lesser of any two estimates whose images overlap.

        Two fits of one facade can both outlive the churn that bred
        them; the one that has absorbed more elements wins. Returns
        {dropped id: surviving id}.
        """
        order = sorted(
            self.estimates, key=lambda rid: (-self.estimates[rid].lifetime, rid)
        )
        folded, kept = {}, []
        for rid in order:
            image = self.estimates[rid].image_point
            winner = next(
                (
                    k
                    for k in kept
                    if np.linalg.norm(self.estimates[k].image_point - image)
                    <= self.cfg.reflector_merge_radius
                ),
                None,
            )
            if winner is None:
                kept.append(rid)
            else:
                folded[rid] = winner
                del self.estimates[rid]
        return folded

    def drop_pending(self, cvt_id):
        self.pending.pop(cvt_id, None)

    def transfer_pending(self, src_cvt, dst_cvt):
        """Move a buffer to another CVT, e.g. when two CVTs merge."""
        buf = self.pending.pop(src_cvt, None)
        if buf:
            self.pending.setdefault(dst_cvt, []).extend(buf)

    def ingest(self, rid, elements):
        return self.estimates[rid].ingest(elements)

    def refresh_edges(self):
        """Re-estimate every mature boundary; a failed estimate keeps the
        last known edge."""
        for est in self.estimates.values():
            try:
                est.set_edge(estimate_edges(est))
            except EdgeUnavailable:
                continue

    def export_dict(self):
        reflectors = []
        for est in self.ordered():
            plane = est.plane
            reflectors.append(
                {
                    "id": est.id,
                    "plane": {"theta": plane.theta, "phi": plane.phi, "d": plane.d},
                    "normal": est.normal.tolist(),
                    "image_point": est.image_point.tolist(),
                    "edge": None if est.edge is None else est.edge.tolist(),
                    "element_count": est.lifetime,
                    "density": est.density,
                    "ftrl": {"z": est.learner.z.tolist(), "n": est.learner.n.tolist()},
                }
            )
        return {"format": MAP_FORMAT, "bs": self.bs.tolist(), "reflectors": reflectors}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.export_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path, cfg):
        """Rebuild a map for a warm-start run.

        Learner accumulators are restored when present; otherwise the
        stored plane is re-seeded the same way a first element would be.
        Element stores and residual histories start empty, the lifetime
        count carries over.
        """
        with open(path) as fh:
            data = json.load(fh)
        if data.get("format") != MAP_FORMAT:
            raise ValueError(f"not a reflector map file: {path}")
        out = cls(cfg)
        for rec in data["reflectors"]:
            w0 = np.array([rec["plane"]["theta"], rec["plane"]["phi"], rec["plane"]["d"]])
            # plane offset doubles as the lever-arm scale of the lost elements
            lam = cfg.lambda_ref_value
            seed = np.array([lam + w0[2] ** 2, lam + w0[2] ** 2, 1.0])
            learner = FtrlPlaneLearner(cfg.l_alpha, cfg.l_beta, cfg.lambda_ref_value, w0=w0, curvature=seed)
            if "ftrl" in rec:
                learner.z = np.asarray(rec["ftrl"]["z"], dtype=float)
                learner.n = np.asarray(rec["ftrl"]["n"], dtype=float)
            est = ReflectorEstimate(rec["id"], cfg, out.bs, learner)
            est.lifetime = int(rec["element_count"])
            if rec.get("edge") is not None:
                est.set_edge(np.asarray(rec["edge"], dtype=float))
            out.estimates[rec["id"]] = est
            out._next_id = max(out._next_id, rec["id"] + 1)
        return out
