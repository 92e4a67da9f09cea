"""Wake-up positioning: path decoding plus closed-form initialization.

A newcomer vehicle has multipath observations but no particle cloud and
no clock sync. Its position is unknown, so its paths cannot be recast to
the mapped image points directly. What survives not knowing the position
is the relative geometry: differences of recast displacement vectors
equal differences of image points (the unknown position cancels, and the
unknown clock bias cancels along matching direction components). The
decoder slides a three-path window over the observations and runs a
Viterbi pass whose states are unordered triples of mapped reflectors,
scored by how well the triple's relative geometry matches the window's.

With every path tied to an image point, position and clock bias come
from a constrained weighted least squares solve that fuses the
range-difference equations with the arrival-angle equations, the
constraint being that the distance variable actually equals the norm of
the position offset. The constrained minimization is solved exactly
through the Lagrange multiplier, which reduces to the real roots of a
degree-six polynomial; the weight matrix is rebuilt from the analytic
first-order noise covariance and the solve repeated to convergence.
"""

from __future__ import annotations

import dataclasses
import itertools

import numpy as np

from . import geometry as geo
from .errors import (
    DecodeFailure,
    DegenerateGeometry,
    InsufficientPaths,
    SolveFailure,
)

# pairwise-difference operator: columns of M @ DIFF are the three
# ordered differences of the columns of M
DIFF = np.array([[1.0, -1.0, 0.0], [-1.0, 0.0, 1.0], [0.0, 1.0, -1.0]])

PERMS = list(itertools.permutations(range(3)))


@dataclasses.dataclass
class WakeupSolution:
    position: np.ndarray
    bias: float
    residual: float
    path_reflectors: list
    iterations: int = 0
    fallback: bool = False


# --- reflector decoding -----------------------------------------------------


@dataclasses.dataclass
class Trellis:
    states: list  # sorted reflector-id triples
    layers: int
    log_emission: np.ndarray  # (layers, n_states)
    best_perm: np.ndarray  # (layers, n_states) index into PERMS
    transition: np.ndarray  # (n_states, n_states) bool


def layer_mismatch(state_points, layer_kappas, layer_units=None):
    """Best-permutation relative-geometry mismatch of one state against
    one observation window, with the sign convention searched alongside.

    state_points: (3, 3), image points as columns in state order;
    layer_kappas: (3, 3), recast displacement vectors as columns in path
    order. Returns (mismatch, perm index).

    The newcomer's clock bias inflates every recast vector by the same
    scalar along its own arrival direction, so the window differences
    carry a bias term b times the direction differences. The directions
    are known exactly from the angles, so when layer_units (unit arrival
    vectors as columns) is given, the best bias is profiled out of each
    candidate in closed form; the true pairing then scores an exact zero
    on clean observations no matter the bias.
    """
    kd = layer_kappas @ DIFF
    if layer_units is not None:
        ud = layer_units @ DIFF
        ud_sq = float(np.sum(ud * ud))
    else:
        ud_sq = 0.0
    best = np.inf
    best_perm = 0
    for k, perm in enumerate(PERMS):
        qd = state_points[:, perm] @ DIFF
        for signed in (qd - kd, qd + kd):
            sq = float(np.sum(signed * signed))
            if ud_sq > 1e-12:
                sq -= float(np.sum(signed * ud)) ** 2 / ud_sq
            w = np.sqrt(max(sq, 0.0))
            if w < best:
                best = w
                best_perm = k
    return best, best_perm


def build_trellis(images, ranges, azimuths, polars, sigma):
    """Lay out states, emissions and transitions for a path window scan.

    images: {reflector id: image point}; angles are world-frame arrival
    directions. States are unordered triples (the emission search
    recovers the order), so consecutive windows must share exactly two
    reflectors.
    """
    ranges = np.asarray(ranges, dtype=float)
    n_paths = len(ranges)
    ids = sorted(images)
    if n_paths < 3 or len(ids) < 3:
        raise InsufficientPaths(
            f"decoding needs 3 paths and 3 reflectors, got {n_paths} and {len(ids)}"
        )
    kappas = geo.sph_to_cart(ranges, np.asarray(azimuths, float), np.asarray(polars, float))
    units = geo.unit_vector(np.asarray(azimuths, float), np.asarray(polars, float))

    states = list(itertools.combinations(ids, 3))
    points = [np.column_stack([images[i] for i in s]) for s in states]
    layers = n_paths - 2
    log_em = np.empty((layers, len(states)))
    best_perm = np.empty((layers, len(states)), dtype=int)
    for d in range(layers):
        window = kappas[d : d + 3].T
        dirs = units[d : d + 3].T
        for u, pts in enumerate(points):
            w, k = layer_mismatch(pts, window, dirs)
            log_em[d, u] = -0.5 * (w / sigma) ** 2
            best_perm[d, u] = k

    sets = [frozenset(s) for s in states]
    transition = np.array([[len(a & b) == 2 for b in sets] for a in sets])
    return Trellis(states, layers, log_em, best_perm, transition)


def viterbi_decode(trellis):
    """Most probable reflector per path via the max-product recursion.

    Returns a list of reflector ids, one per path. Raises DecodeFailure
    when no valid state sequence exists (geometry outside the decoder's
    assumptions, e.g. fewer reflectors than the window slide needs).
    """
    log_em = trellis.log_emission
    n_states = log_em.shape[1]
    score = log_em[0].copy()
    back = np.zeros((trellis.layers, n_states), dtype=int)
    for d in range(1, trellis.layers):
        prev = np.where(trellis.transition, score[:, None], -np.inf)
        back[d] = np.argmax(prev, axis=0)
        score = prev[back[d], np.arange(n_states)] + log_em[d]

    if not np.isfinite(np.max(score)):
        raise DecodeFailure("no valid state sequence through the trellis")

    seq = [int(np.argmax(score))]
    for d in range(trellis.layers - 1, 0, -1):
        seq.append(int(back[d][seq[-1]]))
    seq.reverse()

    n_paths = trellis.layers + 2
    decoded = [None] * n_paths
    for d, u in enumerate(seq):
        perm = PERMS[trellis.best_perm[d, u]]
        for k in range(3):
            decoded[d + k] = trellis.states[u][perm[k]]
    return decoded


# --- constrained weighted least squares -------------------------------------


def noise_covariance(deltas, polars, sigma_d, sigma_azimuth, sigma_polar):
    """Analytic first-order covariance of the stacked equation errors.

    The range-difference block shares the reference path's range noise
    across rows; the angle block couples back into it through the range
    difference hidden in each polar row. deltas are path ranges (bias
    free), polars the converted polar angles (reflector-to-vehicle
    convention).
    """
    deltas = np.asarray(deltas, dtype=float)
    polars = np.asarray(polars, dtype=float)
    n = len(deltas)
    shared = sigma_d**2 * (1.0 + np.eye(n - 1))  # E[n_d(p,1) n_d(q,1)]

    m_blk = np.outer(deltas[1:], deltas[1:]) * shared
    ang_var = (sigma_azimuth**2 + sigma_polar**2) * (deltas * np.sin(polars)) ** 2
    n_blk = np.diag(ang_var)
    n_blk[1:, 1:] += np.outer(np.cos(polars[1:]), np.cos(polars[1:])) * shared
    e_blk = np.zeros((n - 1, n))
    e_blk[:, 1:] = -np.outer(deltas[1:], np.cos(polars[1:])) * shared

    return np.block([[m_blk, e_blk], [e_blk.T, n_blk]])


def _build_system(ranges, azimuths, polars, points):
    """Stacked linear system A [chi; delta1] = q + noise.

    Angles arrive in the arrival-direction convention (vehicle toward
    image point) and are flipped here to the vehicle-minus-point form
    the rows are derived in. The reference path is the first row's.
    """
    theta = geo.wrap_angle(np.asarray(azimuths, float) + np.pi)
    phi = np.pi - np.asarray(polars, float)
    r = ranges - ranges[0]
    rel = points - points[0]

    e_rows = np.column_stack([rel[1:], r[1:]])
    h = 0.5 * (np.sum(rel[1:] ** 2, axis=1) - r[1:] ** 2)

    st, ct, cp = np.sin(theta), np.cos(theta), np.cos(phi)
    h_rows = np.column_stack([st, -ct, np.ones_like(st), -cp])
    k = st * rel[:, 0] - ct * rel[:, 1] + rel[:, 2] + r * cp

    a = np.vstack([e_rows, h_rows])
    q = np.concatenate([h, k])
    return a, q, r, phi


_CONSTRAINT = np.diag([1.0, 1.0, 1.0, -1.0])


def _constrained_wls(a, q, weight):
    """Minimize the weighted residual subject to |chi| = delta1.

    The Lagrange stationarity gives the solution as a rational function
    of the multiplier; the constraint becomes a degree-six polynomial
    whose real roots are the candidates. Roots are polished by Newton on
    the rational form, then the admissible candidate with the smallest
    weighted residual wins.
    """
    b = a.T @ weight @ a
    c = a.T @ weight @ q
    b = 0.5 * (b + b.T)
    vals, vecs = np.linalg.eigh(b)
    if vals[0] <= 1e-12 * max(vals[-1], 1.0):
        raise DegenerateGeometry("normal matrix numerically singular")
    inv_half = vecs @ np.diag(vals**-0.5) @ vecs.T

    core = inv_half @ _CONSTRAINT @ inv_half
    core = 0.5 * (core + core.T)
    lam, u = np.linalg.eigh(core)
    e = u.T @ (inv_half @ c)

    # constraint as polynomial: sum_i lam_i e_i^2 prod_{j!=i} (1 + eta lam_j)^2
    poly = np.zeros(7)
    for i in range(4):
        acc = np.array([1.0])
        for j in range(4):
            if j != i:
                acc = np.convolve(acc, np.convolve([lam[j], 1.0], [lam[j], 1.0]))
        poly[7 - len(acc) :] += lam[i] * e[i] ** 2 * acc
    if not np.any(np.abs(poly) > 0.0):
        raise SolveFailure("constraint polynomial vanished")

    roots = np.roots(poly)
    real = roots[np.abs(roots.imag) <= 1e-9 * np.maximum(1.0, np.abs(roots.real))].real

    def constraint(eta):
        return float(np.sum(lam * e**2 / (1.0 + eta * lam) ** 2))

    def constraint_slope(eta):
        return float(-2.0 * np.sum(lam**2 * e**2 / (1.0 + eta * lam) ** 3))

    best = None
    for eta in real:
        for _ in range(8):  # Newton polish toward the exact constraint root
            slope = constraint_slope(eta)
            if slope == 0.0 or not np.isfinite(slope):
                break
            step = constraint(eta) / slope
            if not np.isfinite(step):
                break
            eta -= step
            if abs(step) < 1e-14 * max(1.0, abs(eta)):
                break
        denom = 1.0 + eta * lam
        if np.min(np.abs(denom)) < 1e-12:
            continue
        sol = inv_half @ (u @ (e / denom))
        if sol[3] <= 0.0:
            continue  # distance to the reference image point must be positive
        res = a @ sol - q
        j = float(res @ weight @ res)
        if best is None or j < best[1]:
            best = (sol, j)
    if best is None:
        raise SolveFailure("no admissible root of the constraint polynomial")
    return best


def scwls_solve(ranges, azimuths, polars, points, sigma_d, sigma_azimuth,
                sigma_polar, max_iter=20, tol=1e-8):
    """Joint range-difference and arrival-angle solve for one vehicle.

    ranges/azimuths/polars are the per-path observations (world-frame
    arrival directions), points the decoded image points in matching
    order. Returns (position offset from the reference image point,
    reference distance, weighted residual, iterations). The caller
    reconstructs position and clock bias from the reference path.
    """
    ranges = np.asarray(ranges, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(ranges)
    if n < 3:
        raise InsufficientPaths(f"solve needs 3 paths, got {n}")
    a, q, r, phi = _build_system(ranges, azimuths, polars, points)
    if np.linalg.matrix_rank(a[:, :3], tol=1e-9 * max(1.0, float(np.abs(a).max()))) < 3:
        raise DegenerateGeometry("position block rank deficient")

    weight = np.eye(2 * n - 1)
    chi = None
    iterations = 0
    for iterations in range(1, max(1, max_iter) + 1):
        sol, residual = _constrained_wls(a, q, weight)
        new_chi, delta1 = sol[:3], float(sol[3])
        if chi is not None and float(np.linalg.norm(new_chi - chi)) < tol:
            chi = new_chi
            break
        chi = new_chi
        deltas = np.maximum(r + delta1, 1e-3)
        cov = noise_covariance(deltas, phi, sigma_d, sigma_azimuth, sigma_polar)
        try:
            weight = np.linalg.inv(cov)
        except np.linalg.LinAlgError:
            break  # keep the last usable weight
        weight = 0.5 * (weight + weight.T)
    return chi, float(sol[3]), residual, iterations


# --- orchestration ----------------------------------------------------------


def wake_up(obs_set, images, cfg, rng):
    """Decode a newcomer's paths against the map and solve its state.

    obs_set is the vehicle's slot observation bundle; images maps
    reflector id to image point. Falls back to the satnav fix (flagged)
    whenever the map is too thin or decoding/solving fails.
    """
    order = sorted(range(len(obs_set.paths)), key=lambda i: obs_set.paths[i].d)
    paths = [obs_set.paths[i] for i in order]
    ranges = np.array([p.d for p in paths])
    azimuths = geo.wrap_angle(np.array([p.theta for p in paths]) + obs_set.heading_meas)
    polars = np.array([p.phi for p in paths])

    if len(images) < cfg.wakeup_min_reflectors or len(paths) < 3:
        return _fallback(obs_set, cfg, rng)
    try:
        trellis = build_trellis(images, ranges, azimuths, polars, cfg.emission_sigma_value)
        decoded = viterbi_decode(trellis)
        points = np.array([images[i] for i in decoded])
        chi, _, residual, iterations = scwls_solve(
            ranges, azimuths, polars, points,
            cfg.sigma_d,
            float(np.hypot(cfg.sigma_theta, cfg.sigma_v_theta)),
            cfg.sigma_theta,
            max_iter=cfg.scwls_max_iter,
            tol=cfg.scwls_tol,
        )
    except (InsufficientPaths, DecodeFailure, SolveFailure, DegenerateGeometry):
        return _fallback(obs_set, cfg, rng)

    if residual > cfg.wakeup_residual_gate:
        # the weighted residual is chi-square scale when the pairing is
        # right; a fix the noise model rejects is worth less than the prior
        return _fallback(obs_set, cfg, rng)
    position = chi + points[0]
    bias = float(ranges[0] - np.linalg.norm(chi))
    return WakeupSolution(position, bias, residual, decoded, iterations)


def _fallback(obs_set, cfg, rng):
    """Satnav-prior initialization when radio geometrization is out."""
    if obs_set.gps_xy is not None:
        xy = np.asarray(obs_set.gps_xy, dtype=float)
    else:
        xy = np.array([0.5 * cfg.road_length, 0.0]) + rng.normal(0.0, cfg.sigma_g, 2)
    position = np.array([xy[0], xy[1], cfg.vehicle_height])
    return WakeupSolution(position, 0.0, np.inf, [], fallback=True)
