"""Team particle filtering over vehicle and transmitter states.

Vehicles and common virtual transmitters are estimated jointly: every
vehicle's paths tie its particle cloud to the clouds of the CVTs it
observes, so each side refines the other. To keep the coupled update
stable the particles of every entity are split into random batches and
the two sides take turns, batch by batch, each against the other's
freshest weights.

CVT clouds get two extra pushes. The reflector map feeds back through a
weight tilt toward the image point of whichever facade the CVT is
believed to bounce off, and the poorly weighted tail of each cloud is
pulled toward well weighted particles by a crossover/mutation move
instead of classic resampling.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import association as assoc
from . import geometry as geo


@dataclasses.dataclass
class VehicleCloud:
    """Position/bias particles of one vehicle plus its dead-reckoning
    inputs. Weights stay normalized; the particle count never changes."""

    vehicle_id: int
    positions: np.ndarray  # (N, 3)
    biases: np.ndarray  # (N,)
    weights: np.ndarray  # (N,)
    speed: float
    heading: float

    @classmethod
    def spawn(cls, vehicle_id, center, bias, speed, heading, cfg, rng, pos_sigma=None, bias_sigma=None):
        """Fresh cloud around a wake-up fix (or exact truth when the
        sigmas are zero)."""
        n = cfg.n_vehicle_particles
        pos_sigma = cfg.sigma_d if pos_sigma is None else pos_sigma
        bias_sigma = cfg.sigma_d if bias_sigma is None else bias_sigma
        positions = np.asarray(center, dtype=float)[None, :] + rng.normal(0.0, pos_sigma, (n, 3))
        positions[:, 2] = center[2]  # vehicles do not float
        biases = float(bias) + rng.normal(0.0, bias_sigma, n)
        return cls(int(vehicle_id), positions, biases, np.full(n, 1.0 / n), float(speed), float(heading))

    def normalize(self):
        total = float(np.sum(self.weights))
        if total <= 0.0 or not np.isfinite(total):
            self.weights = np.full(len(self.weights), 1.0 / len(self.weights))
        else:
            self.weights = self.weights / total

    def n_eff(self):
        return effective_count(self.weights)

    def estimate(self):
        """Weighted-mean position and bias."""
        return self.weights @ self.positions, float(self.weights @ self.biases)


def effective_count(weights):
    """floor(1 / sum of squared weights), the usual particle diversity
    measure; N for uniform weights. The epsilon keeps the floor from
    eating one ulp of renormalization error on exactly uniform clouds."""
    return int(np.floor(1.0 / float(np.sum(np.asarray(weights) ** 2)) + 1e-9))


def batch_schedule(n_particles, n_batches, rng):
    """Random partition of particle indices into near-equal batches."""
    order = rng.permutation(n_particles)
    return [np.sort(part) for part in np.array_split(order, max(1, n_batches))]


def systematic_resample(weights, rng):
    """Systematic (low-variance) resampling; returns chosen indices."""
    n = len(weights)
    anchors = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), anchors)


@dataclasses.dataclass
class CvtSampleOutcome:
    moved: int
    reinitialized: bool


def sample_cvt(cvt, reflectors, cfg, rng):
    """Reflector feedback plus crossover/mutation for one CVT cloud.

    ``reflectors`` maps reflector id -> (image point, sigma); together
    with the CVT's association posterior it tilts each particle's weight
    by how well the particle agrees with the facades that might explain
    the CVT. The unexplained share of the posterior applies no tilt, so
    an unexplained CVT is left alone up to normalization.

    After the tilt, particles ranked past the effective count are each
    paired with a weight-sampled keeper and blended toward it (crossed
    over), or reflected past it (mutated) with a small probability;
    moved particles restart at uniform weight.
    """
    posterior = cvt.rho_posterior if cvt.rho_posterior else {0: 1.0}
    flat = sum(p for lid, p in posterior.items() if lid == 0 or lid not in reflectors)
    tilt = np.full(len(cvt.weights), float(flat))
    for lid, prob in posterior.items():
        if lid == 0 or lid not in reflectors:
            continue  # mass on unmapped reflectors stays flat
        image, sigma = reflectors[lid]
        sq = np.sum((cvt.positions - np.asarray(image, dtype=float)) ** 2, axis=1)
        tilt += prob * np.exp(-0.5 * sq / sigma**2)

    weights = cvt.weights * tilt
    total = float(np.sum(weights))
    reinitialized = False
    if total <= 0.0 or not np.isfinite(total):
        # evidence off support: rebuild a fresh cloud where the old one was
        center = cvt.mean()
        cvt.positions = center[None, :] + rng.normal(0.0, cfg.sigma_d, cvt.positions.shape)
        cvt.weights = np.full(len(cvt.weights), 1.0 / len(cvt.weights))
        return CvtSampleOutcome(0, True)
    weights = weights / total

    n = len(weights)
    n_eff = effective_count(weights)
    order = np.argsort(-weights, kind="stable")
    movers = order[n_eff:]
    keepers = order[:n_eff]
    if movers.size:
        pick = rng.choice(keepers, size=movers.size, p=weights[keepers] / np.sum(weights[keepers]))
        mutate = rng.uniform(size=movers.size) < cfg.p_m
        r_low = cvt.positions[movers]
        r_high = cvt.positions[pick]
        crossed = cfg.alpha_c * r_low + (1.0 - cfg.alpha_c) * r_high
        mutated = cfg.alpha_c * (2.0 * r_high - r_low) + (1.0 - cfg.alpha_c) * r_high
        cvt.positions[movers] = np.where(mutate[:, None], mutated, crossed)
        weights[movers] = 1.0 / n
        weights = weights / np.sum(weights)
    cvt.weights = weights
    return CvtSampleOutcome(int(movers.size), reinitialized)


def sample_vehicle(cloud, speed, heading, cfg, rng):
    """Propagate a vehicle cloud by its measured motion for one slot.

    Every particle drives with its own draw of speed and heading noise;
    clock bias is constant and never touched here.
    """
    cloud.speed = float(speed)
    cloud.heading = float(heading)
    n = len(cloud.weights)
    sp = speed + (rng.normal(0.0, cfg.sigma_v, n) if cfg.sigma_v > 0 else 0.0)
    hd = heading + (rng.normal(0.0, cfg.sigma_v_theta, n) if cfg.sigma_v_theta > 0 else 0.0)
    step = sp * cfg.slot_duration
    cloud.positions[:, 0] += step * np.cos(hd)
    cloud.positions[:, 1] += step * np.sin(hd)


def _log_path_likelihood(obs, cloud, target_positions, params):
    """(I, J) log likelihood of one observation between every vehicle
    particle and every target particle."""
    return assoc.log_likelihood(
        obs, cloud.positions, cloud.biases, cloud.heading, target_positions, params
    )


def _redistribute(weights, batch, log_tilt):
    """Rescale the batch's weights by exp(log_tilt), preserving the
    batch's total mass so the other batches keep their shares.

    Keeping the mass per batch makes every batch update invariant to a
    common positive factor on the likelihoods (the max shift cancels
    inside the batch and the mass scale is pinned), which is what keeps
    the whole slot scale-invariant at any batch count. Returns False
    with weights untouched when the tilt is off support.
    """
    shift = float(np.max(log_tilt))
    if not np.isfinite(shift):
        return False
    scaled = weights[batch] * np.exp(log_tilt - shift)
    total = float(np.sum(scaled))
    if total <= 0.0 or not np.isfinite(total):
        return False
    weights[batch] = scaled * (float(np.sum(weights[batch])) / total)
    return True


def joint_update(vehicles, cvts, assignments, observations, cfg, rng):
    """One slot of stochastic-batch joint weight updates.

    ``assignments`` maps vehicle id -> {path index -> cvt id} (only
    resolved paths), ``observations`` maps vehicle id -> list of path
    observations. Batch by batch, CVT clouds are reweighed against the
    current vehicle clouds, then vehicle clouds against the current CVT
    clouds; each side is renormalized after every batch so the next one
    sees settled weights. Frozen CVTs (the base-station anchor) weigh
    vehicles but are never updated themselves. Returns the count of
    batch updates skipped for lacking support.
    """
    # floors keep noiseless scenarios runnable; exact residuals stay exact
    params = assoc.LikelihoodParams(
        max(cfg.sigma_d, 1e-9), max(cfg.sigma_theta, 1e-9), max(cfg.sigma_v_theta, 1e-9)
    )
    by_cvt = {}
    for vid, paths in assignments.items():
        for p, cid in paths.items():
            by_cvt.setdefault(cid, []).append((vid, p))

    b = max(1, cfg.filter_batches)
    cvt_sched = {
        cid: batch_schedule(len(cvt.weights), b, rng)
        for cid, cvt in cvts.items()
        if not cvt.frozen and cid in by_cvt
    }
    veh_sched = {
        vid: batch_schedule(len(cloud.weights), b, rng)
        for vid, cloud in vehicles.items()
        if assignments.get(vid)
    }
    skipped = 0

    for step in range(b):
        for cid, sched in cvt_sched.items():
            cvt = cvts[cid]
            batch = sched[step]
            if not batch.size:
                continue
            log_tilt = np.zeros(batch.size)
            for vid, p in by_cvt[cid]:
                cloud = vehicles[vid]
                ll = _log_path_likelihood(observations[vid][p], cloud, cvt.positions[batch], params)
                shift = np.max(ll, axis=0)
                avg = cloud.weights @ np.exp(ll - shift[None, :])
                with np.errstate(divide="ignore"):
                    log_tilt += shift + np.log(avg)
            if _redistribute(cvt.weights, batch, log_tilt):
                cvt.weights = cvt.weights / float(np.sum(cvt.weights))
            else:
                skipped += 1

        for vid, sched in veh_sched.items():
            cloud = vehicles[vid]
            batch = sched[step]
            if not batch.size:
                continue
            sub = VehicleCloud(
                cloud.vehicle_id,
                cloud.positions[batch],
                cloud.biases[batch],
                cloud.weights[batch],
                cloud.speed,
                cloud.heading,
            )
            log_tilt = np.zeros(batch.size)
            for p, cid in assignments[vid].items():
                cvt = cvts[cid]
                ll = _log_path_likelihood(observations[vid][p], sub, cvt.positions, params)
                shift = np.max(ll, axis=1)
                avg = np.exp(ll - shift[:, None]) @ cvt.weights
                with np.errstate(divide="ignore"):
                    log_tilt += shift + np.log(avg)
            if _redistribute(cloud.weights, batch, log_tilt):
                cloud.normalize()
            else:
                skipped += 1
    return skipped


def resample_and_estimate(cloud, cfg, rng):
    """Point estimate, then systematic resampling if diversity fell
    below the configured fraction of the cloud size."""
    position, bias = cloud.estimate()
    n = len(cloud.weights)
    if cloud.n_eff() < cfg.resample_threshold * n:
        idx = systematic_resample(cloud.weights, rng)
        cloud.positions = cloud.positions[idx]
        cloud.biases = cloud.biases[idx]
        cloud.weights = np.full(n, 1.0 / n)
    return position, bias
