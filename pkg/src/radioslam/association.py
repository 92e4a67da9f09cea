"""Data association by belief propagation on two bipartite graphs.

Per slot and per vehicle, each multipath observation must be matched to
the common virtual transmitter (CVT) that produced it, or flagged as the
start of a new one, or dismissed as clutter; per slot globally, each CVT
must be matched to the learned reflector that explains it. Both problems
share the same structure: a one-to-one constraint between two index
sets, soft evidence on the pairings, and an opt-out state on either
side. They are solved with the same scaled sum-product message scheme;
only the evidence differs.

All pairing evidence is expressed as odds against the clutter
hypothesis, whose density is mu_fa * fa_density. That keeps every
message dimensionless and lets a single floor handle the clutter-free
configuration.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import geometry as geo
from .errors import ConvergenceError


@dataclasses.dataclass(frozen=True)
class LikelihoodParams:
    """Noise scales of the three per-path measurement channels.

    The azimuth channel carries the heading-measurement noise on top of
    the angle-estimation noise, because recasting uses the measured
    heading as if it were exact.
    """

    sigma_d: float
    sigma_theta: float
    sigma_theta_v: float

    def __post_init__(self):
        if min(self.sigma_d, self.sigma_theta, self.sigma_theta_v) <= 0:
            raise ValueError("noise scales must be positive")

    @property
    def azimuth_var(self):
        return self.sigma_theta**2 + self.sigma_theta_v**2


def log_likelihood(obs, positions, biases, heading, targets, params):
    """Log-density of one path observation against candidate transmitters.

    positions (I, 3) and biases (I,) are vehicle state hypotheses sharing
    the measured heading; targets (J, 3) are candidate transmitter
    positions. Returns an (I, J) matrix. Distance, azimuth and polar
    residuals are treated as independent Gaussians, angular residuals
    wrapped to (-pi, pi].
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    biases = np.atleast_1d(np.asarray(biases, dtype=float))
    delta = targets[None, :, :] - positions[:, None, :]  # (I, J, 3)
    rng_ = np.linalg.norm(delta, axis=-1)
    rho = np.hypot(delta[..., 0], delta[..., 1])
    theta_world = np.arctan2(delta[..., 1], delta[..., 0])
    phi = np.arctan2(rho, delta[..., 2])

    d_res = obs.d - rng_ - biases[:, None]
    th_res = geo.wrap_angle(obs.theta - (theta_world - heading))
    ph_res = geo.wrap_angle(obs.phi - phi)

    var_d = params.sigma_d**2
    var_th = params.azimuth_var
    var_ph = params.sigma_theta**2
    out = -0.5 * (d_res**2 / var_d + th_res**2 / var_th + ph_res**2 / var_ph)
    out -= 0.5 * np.log((2.0 * np.pi) ** 3 * var_d * var_th * var_ph)
    return out


def likelihood(obs, position, bias, heading, target, params):
    """Scalar convenience wrapper around log_likelihood."""
    return float(
        np.exp(
            log_likelihood(
                obs,
                np.asarray(position, dtype=float)[None, :],
                np.array([bias], dtype=float),
                heading,
                np.asarray(target, dtype=float)[None, :],
                params,
            )[0, 0]
        )
    )


@dataclasses.dataclass
class CloudMoments:
    """Gaussian summary of a particle cloud for closed-form marginals."""

    mean: np.ndarray  # (3,)
    cov: np.ndarray  # (3, 3)
    bias_mean: float = 0.0
    bias_var: float = 0.0
    bias_cross: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_particles(cls, positions, weights, biases=None):
        p = np.asarray(positions, dtype=float)
        w = np.asarray(weights, dtype=float)
        s = w.sum()
        w = w / s if s > 0 else np.full(len(p), 1.0 / len(p))
        mu = w @ p
        d = p - mu
        cov = (d * w[:, None]).T @ d
        if biases is None:
            return cls(mu, cov)
        b = np.asarray(biases, dtype=float)
        bm = float(w @ b)
        db = b - bm
        return cls(mu, cov, bm, float(w @ db**2), (w * db) @ d)


def marginal_likelihood(obs, veh, tgt, heading, params):
    """Path likelihood with both particle clouds folded in, closed form.

    Range, azimuth and elevation of the target as seen from the vehicle
    are linearized around the cloud means and the projected cloud
    covariances are added to the measurement variances (range picks up
    the clock-bias variance and its correlation with position as well).
    A sampled marginal loses all resolution once the clouds are much
    wider than the measurement noise, which is exactly the regime right
    after a vehicle enters on its satnav prior; the matched Gaussian
    keeps the comparison meaningful at any width.
    """
    delta = tgt.mean - veh.mean
    rng_ = float(np.linalg.norm(delta))
    rho = float(np.hypot(delta[0], delta[1]))
    if rng_ < 1e-9 or rho < 1e-9:
        return 0.0
    cov = veh.cov + tgt.cov

    u = delta / rng_
    var_d = (
        params.sigma_d**2
        + float(u @ cov @ u)
        + veh.bias_var
        - 2.0 * float(u @ veh.bias_cross)
    )
    g_th = np.array([-delta[1], delta[0], 0.0]) / rho**2
    var_th = params.azimuth_var + float(g_th @ cov @ g_th)
    g_ph = np.array(
        [delta[2] * delta[0] / rho, delta[2] * delta[1] / rho, -rho]
    ) / rng_**2
    var_ph = params.sigma_theta**2 + float(g_ph @ cov @ g_ph)

    d_res = obs.d - rng_ - veh.bias_mean
    th_res = geo.wrap_angle(obs.theta - (np.arctan2(delta[1], delta[0]) - heading))
    ph_res = geo.wrap_angle(obs.phi - np.arctan2(rho, delta[2]))
    ll = -0.5 * (d_res**2 / var_d + th_res**2 / var_th + ph_res**2 / var_ph)
    ll -= 0.5 * np.log((2.0 * np.pi) ** 3 * var_d * var_th * var_ph)
    return float(np.exp(ll))


def _excluded_sum(m, axis):
    """Leave-one-out sums of a nonnegative array along an axis.

    Built from exclusive prefix and suffix cumsums instead of
    total-minus-element: when one entry dominates the row by many orders
    of magnitude, the subtraction would cancel away every other term.
    """
    m = np.moveaxis(m, axis, -1)
    left = np.zeros_like(m)
    np.cumsum(m[..., :-1], axis=-1, out=left[..., 1:])
    right = np.zeros_like(m)
    if m.shape[-1] > 1:
        np.cumsum(m[..., :0:-1], axis=-1, out=right[..., -2::-1])
    return np.moveaxis(left + right, -1, axis)


def bp_iterate(alpha0, beta0, pair, iters=20, damping=0.5, tol=1e-6):
    """Scaled sum-product messages for one-to-one association.

    alpha0 (P,): per-item belief of taking the opt-out on the item side.
    beta0 (N,): per-slot belief of staying empty.
    pair (N, P): pairing evidence.
    Returns pi (N, P), the slot-to-item messages; item posteriors follow
    as alpha0 vs the pi column. Damped fixed-point iteration, stopping on
    max message change below tol.
    """
    pair = np.asarray(pair, dtype=float)
    n, p = pair.shape
    alpha0 = np.asarray(alpha0, dtype=float)
    # a slot is never infinitely certain to be filled
    beta0 = np.maximum(np.asarray(beta0, dtype=float), 1e-12)
    if n == 0 or p == 0:
        return np.zeros((n, p))
    pi = np.ones((n, p))
    for _ in range(iters):
        col = alpha0[None, :] + _excluded_sum(pi, axis=0)
        nu = 1.0 / np.maximum(col, 1e-300)  # (N, P) message item -> slot
        pn = pair * nu
        row = beta0[:, None] + _excluded_sum(pn, axis=1)
        pi_new = pair / row
        if not np.all(np.isfinite(pi_new)):
            raise ConvergenceError("association message diverged")
        delta = float(np.max(np.abs(pi_new - pi)))
        pi = damping * pi + (1.0 - damping) * pi_new
        if delta < tol:
            break
    return pi


def association_posteriors(alpha0, pi, opt_out_extra=0.0):
    """Per-item posterior over {opt-out} + slots from converged messages.

    opt_out_extra is added to the opt-out belief before normalizing; the
    clutter hypothesis enters here (all evidence is scaled so clutter
    has unit weight on the item side).
    """
    p = len(alpha0)
    n = pi.shape[0]
    post = np.zeros((p, n + 1))
    post[:, 0] = np.asarray(alpha0, dtype=float) + opt_out_extra
    if n:
        post[:, 1:] = pi.T
    z = post.sum(axis=1, keepdims=True)
    z[z <= 0] = 1.0
    return post / z


@dataclasses.dataclass
class CodaCvt:
    """One legacy CVT as seen by a single vehicle's association pass."""

    cid: int
    positions: np.ndarray  # (J, 3) particle cloud
    weights: np.ndarray
    detection_prob: float  # p_d times its reflector's reflective probability


@dataclasses.dataclass
class OpenReflector:
    """A mapped reflector whose image point no CVT currently claims.

    A path consistent with its image point is evidence for a new CVT
    rather than for clutter. samples (S, 3) carry the parameter
    uncertainty of the fitted plane as perturbed image points.
    """

    lid: int
    samples: np.ndarray
    weights: np.ndarray
    detection_prob: float


@dataclasses.dataclass
class CodaContext:
    """Slot-level constants shared by every vehicle's association pass."""

    mu_fa: float
    fa_density: float
    p_d: float
    f0_r: float
    delta_fa: float
    map_maturity: float  # fraction of legacy CVTs with a resolved reflector
    open_reflectors: list
    bp_iters: int = 20
    bp_damping: float = 0.5
    bp_tol: float = 1e-6
    eps_fa: float = 1e-12

    @property
    def clutter_density(self):
        return max(self.mu_fa, self.eps_fa) * self.fa_density


@dataclasses.dataclass
class CodaResult:
    assignment: dict  # path index -> cvt id, unassociated paths -> 0
    discarded: list  # path indices failing the clutter gate
    observe_prob: dict  # path index -> probability of being a real path
    posterior: dict  # path index -> {0 or cvt id: probability}
    cvt_claims: dict  # cvt id -> path index (one-to-one after tie-break)


def coda(paths, veh_pos, veh_w, veh_bias, heading, cvts, ctx, params):
    """CVT-observation association for one vehicle.

    Evidence layout: for each path the opt-out belief is the odds that
    it starts a new CVT rather than being clutter, built from the open
    reflectors' image points plus a birth allowance that fades as the
    map matures; each (CVT, path) pairing carries the cloud-marginalized
    likelihood against that CVT's cloud, scaled by its detection
    probability; each CVT's stay-empty belief is its missed-detection
    probability. The clutter hypothesis has unit weight by construction,
    so the observing probability of a path is the posterior mass not on
    clutter, and paths below the delta_fa gate are discarded.
    """
    n_paths = len(paths)
    if n_paths == 0:
        return CodaResult({}, [], {}, {}, {})

    veh = CloudMoments.from_particles(veh_pos, veh_w, veh_bias)
    denom = ctx.clutter_density

    # opt-out odds per path: new CVT vs clutter
    birth = (1.0 - ctx.map_maturity) * ctx.p_d * ctx.f0_r * ctx.fa_density
    open_moments = [
        (r.detection_prob, CloudMoments.from_particles(r.samples, r.weights))
        for r in ctx.open_reflectors
    ]
    alpha0 = np.zeros(n_paths)
    for p, z in enumerate(paths):
        ev = birth
        for det, refl in open_moments:
            ev += det * marginal_likelihood(z, veh, refl, heading, params)
        alpha0[p] = ev / denom

    # pairing odds and stay-empty beliefs per CVT
    n_cvts = len(cvts)
    pair = np.zeros((n_cvts, n_paths))
    beta0 = np.zeros(n_cvts)
    for i, c in enumerate(cvts):
        cm = CloudMoments.from_particles(c.positions, c.weights)
        beta0[i] = 1.0 - c.detection_prob
        for p, z in enumerate(paths):
            pair[i, p] = (
                c.detection_prob
                * marginal_likelihood(z, veh, cm, heading, params)
                / denom
            )

    # the opt-out belief a path carries is new-CVT odds plus the unit
    # clutter weight; folding clutter in here (not only at readout) keeps
    # the messages consistent with the generative weight of o = 0
    pi = bp_iterate(
        alpha0 + 1.0,
        beta0,
        pair,
        iters=ctx.bp_iters,
        damping=ctx.bp_damping,
        tol=ctx.bp_tol,
    )
    post = association_posteriors(alpha0, pi, opt_out_extra=1.0)

    labels = [0] + [c.cid for c in cvts]
    observe, posterior, assignment, discarded = {}, {}, {}, []
    for p in range(n_paths):
        total = alpha0[p] + (pi[:, p].sum() if n_cvts else 0.0)
        observe[p] = float(total / (1.0 + total))
        posterior[p] = {labels[j]: float(post[p, j]) for j in range(len(labels))}
        if observe[p] < ctx.delta_fa:
            discarded.append(p)
            continue
        # near-duplicate CVTs split the claiming mass between them, so
        # opting out is weighed against their total, and only then is
        # the winner picked among the CVTs themselves
        claim_mass = float(post[p, 1:].sum()) if n_cvts else 0.0
        if claim_mass > post[p, 0]:
            best = 1 + int(np.argmax(post[p, 1:]))
        else:
            best = 0
        assignment[p] = labels[best]

    # one CVT can explain at most one path of this vehicle
    cvt_claims = {}
    for p in sorted(assignment, key=lambda q: (-posterior[q][assignment[q]], q)):
        cid = assignment[p]
        if cid == 0:
            continue
        if cid in cvt_claims:
            assignment[p] = 0
        else:
            cvt_claims[cid] = p
    return CodaResult(assignment, discarded, observe, posterior, cvt_claims)


@dataclasses.dataclass
class RcdaReflector:
    """One mapped reflector offered to the reflector-CVT association."""

    lid: int
    image_point: np.ndarray
    reflect_prob: float  # particle-averaged reflective probability


@dataclasses.dataclass
class RcdaResult:
    rho: dict  # cvt id -> reflector id, 0 when unexplained
    claimed: set  # reflector ids with a winning CVT
    posterior: dict  # cvt id -> {0 or reflector id: probability}


def rcda(cvt_means, cvt_ids, reflectors, p_d, f0_r, sigma_d,
         iters=20, damping=0.5, tol=1e-6):
    """Reflector-CVT association for one slot.

    The only geometric tie between a CVT and a reflector is the image
    point, so the pairing evidence is a Gaussian kernel on the distance
    between the CVT cloud mean and each image point, with scale three
    range sigmas (the establishment gate), normalized so the total
    affinity of a CVT never exceeds one. A CVT's stay-unexplained belief
    is its missed-detection probability under the affinity-weighted
    blend of the candidate reflectors' reflective probabilities. A
    one-to-one tie-break keeps at most one CVT per reflector.
    """
    n = len(cvt_ids)
    if n == 0:
        return RcdaResult({}, set(), {})
    if len(reflectors) == 0:
        return RcdaResult(
            {cid: 0 for cid in cvt_ids},
            set(),
            {cid: {0: 1.0} for cid in cvt_ids},
        )

    means = np.asarray(cvt_means, dtype=float)
    images = np.stack([r.image_point for r in reflectors])
    pr = np.array([r.reflect_prob for r in reflectors])
    scale = 3.0 * sigma_d
    d2 = np.sum((means[:, None, :] - images[None, :, :]) ** 2, axis=-1)
    u = np.exp(-0.5 * d2 / scale**2)  # (N, L)
    norm = np.maximum(u.sum(axis=1, keepdims=True), 1.0)
    u = u / norm

    covered = u.sum(axis=1)
    p_reflect = u @ pr + np.maximum(1.0 - covered, 0.0) * f0_r
    eta0 = 1.0 - p_d * p_reflect  # stay-unexplained belief per CVT

    # reflector side plays the slot role: pair (L, N)
    pi = bp_iterate(eta0, np.ones(len(reflectors)), u.T,
                    iters=iters, damping=damping, tol=tol)
    post = association_posteriors(eta0, pi)

    labels = [0] + [r.lid for r in reflectors]
    rho, posterior = {}, {}
    for i, cid in enumerate(cvt_ids):
        posterior[cid] = {labels[j]: float(post[i, j]) for j in range(len(labels))}
        # same class-first readout as the path association: nearby
        # reflectors dilute each other, not the case for staying open
        claim_mass = float(post[i, 1:].sum())
        if claim_mass > post[i, 0]:
            rho[cid] = labels[1 + int(np.argmax(post[i, 1:]))]
        else:
            rho[cid] = 0

    claimed = {}
    for cid in sorted(rho, key=lambda c: (-posterior[c][rho[c]], c)):
        lid = rho[cid]
        if lid == 0:
            continue
        if lid in claimed:
            rho[cid] = 0
        else:
            claimed[lid] = cid
    return RcdaResult(rho, set(claimed), posterior)


def format_beliefs(result, header=""):
    """Structured text dump of an association result for debugging."""
    lines = [f"# association beliefs {header}".rstrip()]
    for p in sorted(result.posterior):
        terms = ", ".join(
            f"{k}:{v:.4g}" for k, v in sorted(result.posterior[p].items())
        )
        extra = ""
        if hasattr(result, "observe_prob"):
            extra = f" observe={result.observe_prob[p]:.4g}"
        lines.append(f"item {p}:{extra} post {{{terms}}}")
    return "\n".join(lines)
