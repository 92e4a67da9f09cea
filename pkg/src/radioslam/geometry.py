"""Spherical/Cartesian conversions, planes, mirror images and planar polygons.

Positions are plain numpy arrays of shape (3,) (or (..., 3) where noted).
The spherical parametrization used throughout the package maps a range d,
an azimuth theta (measured in the x-y plane from +x) and a polar angle phi
(measured from +z) to

    d * (cos(theta) sin(phi), sin(theta) sin(phi), cos(phi)).

A plane is stored by its unit-normal angles (theta, phi) plus an offset d,
so x lies on the plane iff dot(n, x) + d == 0.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import DegenerateInput

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap an angle (scalar or array) to the interval (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), TWO_PI)


def sph_to_cart(d, theta, phi):
    """Map range/azimuth/polar to a Cartesian vector.

    All three arguments broadcast, the result gets a trailing axis of
    length 3.
    """
    d = np.asarray(d, dtype=float)
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    sp = np.sin(phi)
    return np.stack(
        np.broadcast_arrays(d * np.cos(theta) * sp, d * np.sin(theta) * sp, d * np.cos(phi)),
        axis=-1,
    )


def cart_to_sph(v):
    """Invert :func:`sph_to_cart` for a single vector.

    Returns (d, theta, phi) with theta in [0, 2*pi) and phi in [0, pi].
    On the polar axis the azimuth is conventionally 0. The zero vector has
    no direction and raises DegenerateInput.
    """
    v = np.asarray(v, dtype=float)
    d = float(np.linalg.norm(v))
    if d == 0.0:
        raise DegenerateInput("zero vector has no spherical direction")
    theta = float(np.arctan2(v[1], v[0])) % TWO_PI
    if v[0] == 0.0 and v[1] == 0.0:
        theta = 0.0
    phi = float(np.arccos(np.clip(v[2] / d, -1.0, 1.0)))
    return d, theta, phi


def directions_to_angles(vecs):
    """Azimuth/polar angles for an array of vectors, shape (..., 3).

    Vectorized companion of :func:`cart_to_sph`; zero rows come back as
    (0, 0) rather than raising, callers mask them out.
    """
    vecs = np.asarray(vecs, dtype=float)
    d = np.linalg.norm(vecs, axis=-1)
    theta = np.mod(np.arctan2(vecs[..., 1], vecs[..., 0]), TWO_PI)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosphi = np.where(d > 0.0, vecs[..., 2] / np.where(d > 0.0, d, 1.0), 1.0)
    phi = np.arccos(np.clip(cosphi, -1.0, 1.0))
    return d, theta, phi


def unit_vector(theta, phi):
    """Unit direction for azimuth/polar angles (same convention as above)."""
    return sph_to_cart(1.0, theta, phi)


def rotation_matrix(angle, axis, tol=1e-9):
    """Rodrigues rotation by ``angle`` about a unit ``axis``.

    R = e e^T + cos(a) (I - e e^T) + sin(a) [e]_x, so R @ v rotates v
    counterclockwise about e. Non-unit axes raise DegenerateInput.
    """
    e = np.asarray(axis, dtype=float)
    if abs(np.linalg.norm(e) - 1.0) > tol:
        raise DegenerateInput("rotation axis must be a unit vector")
    outer = np.outer(e, e)
    cross = np.array(
        [
            [0.0, -e[2], e[1]],
            [e[2], 0.0, -e[0]],
            [-e[1], e[0], 0.0],
        ]
    )
    a = float(angle)
    return outer + np.cos(a) * (np.eye(3) - outer) + np.sin(a) * cross


@dataclasses.dataclass(frozen=True)
class Plane:
    """Oriented plane {x : dot(n, x) + d == 0} with n = unit_vector(theta, phi)."""

    theta: float
    phi: float
    d: float

    @property
    def normal(self):
        return unit_vector(self.theta, self.phi)

    @property
    def w(self):
        """Parameter triple (theta, phi, d) as an array, the learned state."""
        return np.array([self.theta, self.phi, self.d])

    @staticmethod
    def from_w(w):
        return Plane(float(w[0]), float(w[1]), float(w[2]))

    @staticmethod
    def from_normal_point(normal, point):
        """Plane through ``point`` orthogonal to ``normal`` (any length)."""
        n = np.asarray(normal, dtype=float)
        nn = np.linalg.norm(n)
        if nn == 0.0:
            raise DegenerateInput("zero normal")
        n = n / nn
        _, theta, phi = cart_to_sph(n)
        return Plane(theta, phi, -float(np.dot(n, np.asarray(point, dtype=float))))

    def signed_distance(self, p):
        """dot(n, p) + d, broadcast over (..., 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.normal + self.d


def mirror_point(plane, p):
    """Mirror image of p across the plane; broadcasts over (..., 3).

    Applying the mirror twice returns the original point.
    """
    n = plane.normal
    s = plane.signed_distance(p)
    return np.asarray(p, dtype=float) - 2.0 * s[..., None] * n


def plane_basis(normal):
    """Orthonormal in-plane pair (u, v) with u x v = normal.

    u is the projection of the world x axis onto the plane unless the
    normal is close to the x axis, in which case y seeds the projection.
    Deterministic for a given normal, so repeated calls agree.
    """
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    seed = np.array([1.0, 0.0, 0.0])
    if abs(np.dot(n, seed)) > 0.9:
        seed = np.array([0.0, 1.0, 0.0])
    u = seed - np.dot(n, seed) * n
    u = u / np.linalg.norm(u)
    return u, np.cross(n, u)


def ray_plane_intersection(origin, direction, plane, tol=1e-12):
    """First hit of the ray origin + t * direction (t >= 0) on the plane.

    Returns the hit point, or None when the ray is parallel to the plane
    or points away from it. The direction need not be normalized.
    """
    o = np.asarray(origin, dtype=float)
    u = np.asarray(direction, dtype=float)
    n = plane.normal
    denom = float(np.dot(n, u))
    if abs(denom) < tol:
        return None
    t = -float(np.dot(n, o) + plane.d) / denom
    if t < 0.0:
        return None
    return o + t * u


class PlanarPolygon:
    """Ordered vertex loop lying in a common plane.

    Vertices are given as an (N, 3) array in walk order (either winding).
    An in-plane orthonormal basis (u, v) is fixed at construction; u is the
    projection of the world x axis onto the plane unless the plane is close
    to perpendicular to x, in which case the world y axis is used instead.
    """

    def __init__(self, plane, vertices, tol=1e-6):
        vertices = np.asarray(vertices, dtype=float)
        if vertices.ndim != 2 or vertices.shape[1] != 3 or vertices.shape[0] < 3:
            raise DegenerateInput("polygon needs an (N>=3, 3) vertex array")
        if np.max(np.abs(plane.signed_distance(vertices))) > tol:
            raise DegenerateInput("polygon vertices do not lie on the plane")
        self.plane = plane
        self.vertices = vertices
        self._u, self._v = plane_basis(plane.normal)
        self._origin = vertices[0]
        self._uv = self.project(vertices)

    def project(self, points):
        """In-plane (u, v) coordinates of points, shape (..., 3) -> (..., 2)."""
        rel = np.asarray(points, dtype=float) - self._origin
        return np.stack([rel @ self._u, rel @ self._v], axis=-1)

    def area(self):
        """Unsigned shoelace area of the loop."""
        uv = self._uv
        x, y = uv[:, 0], uv[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    def contains(self, points, tol=1e-6):
        """Even-odd containment test for one point or a stack of points.

        Points must lie on the polygon plane within ``tol`` (raises
        DegenerateInput otherwise); project beforehand if needed. A ray is
        cast along the -u basis direction, and each directed edge counts a
        crossing through the half-open span (min(v), max(v)] so shared
        vertices are never double counted.
        """
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if np.max(np.abs(self.plane.signed_distance(pts))) > tol:
            raise DegenerateInput("containment query point off the polygon plane")
        pq = self.project(pts)
        px, py = pq[:, 0], pq[:, 1]
        inside = np.zeros(len(pts), dtype=bool)
        uv = self._uv
        for i in range(len(uv)):
            ax, ay = uv[i]
            bx, by = uv[(i + 1) % len(uv)]
            straddles = (ay > py) != (by > py)
            if not np.any(straddles):
                continue
            with np.errstate(invalid="ignore", divide="ignore"):
                xint = ax + (py - ay) * (bx - ax) / (by - ay)
            inside ^= straddles & (xint < px)
        return bool(inside[0]) if single else inside
