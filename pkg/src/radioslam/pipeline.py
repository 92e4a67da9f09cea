"""Run orchestration: the fixed per-slot schedule tying the parts together.

Within a slot the order is: synthesize observations, wake up vehicles
that have no particle cloud yet (so association has something to talk
to), propagate the surviving clouds by their measured motion, associate
each vehicle's paths against the shared CVT registry, associate CVTs
against the mapped reflectors, cluster the leftover paths into new CVTs,
turn claimed paths into reflecting elements for the plane learners,
reshape the CVT clouds with the reflector feedback, and run one round of
joint batch updates before estimates and metrics are read off.

A failure inside a slot marks it degraded: the previous estimates are
carried forward and the run continues. All randomness comes from named
substreams of the scenario seed, so a run is reproducible draw for draw
and replaying recorded observations changes nothing else.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from . import association as assoc
from . import channel
from . import cvt as cvtreg
from . import filter as team
from . import mapping
from . import wakeup
from .errors import ConfigError, DegenerateInput, RadioSlamError
from .world import World, substream

logger = logging.getLogger(__name__)

MODES = ("full", "coslam-only", "wakeup-bench", "mapping-bench")

# spread of a freshly spawned cloud around a radio wake-up fix, in range
# sigmas; wide enough to cover typical decode-and-solve errors
WAKE_SPAWN_SCALE = 3.0


@dataclasses.dataclass
class MetricRow:
    """Positioning and sync error means over one vehicle-index interval."""

    vehicle_index: int
    eps_vp: float  # mean 2-D position error, meters
    eps_vs: float  # mean clock-bias error, meters


@dataclasses.dataclass
class WakeupSample:
    index: int
    slot: int
    vehicle_id: int
    pos_err: float
    sync_err: float
    fallback: bool


@dataclasses.dataclass
class MapRow:
    """Map quality at an interval close: mean distance from each learned
    image point to the nearest true one."""

    vehicle_index: int
    image_error: float  # nan while nothing is mapped
    n_estimates: int


@dataclasses.dataclass
class RunMetrics:
    """Everything one run reports, in arrival order."""

    mu_fa: float
    p_d: float
    mode: str
    rows: list = dataclasses.field(default_factory=list)
    wakeups: list = dataclasses.field(default_factory=list)
    map_rows: list = dataclasses.field(default_factory=list)
    degraded: list = dataclasses.field(default_factory=list)  # (slot, message)

    def add_row(self, vehicle_index, eps_vp, eps_vs):
        if self.rows and vehicle_index <= self.rows[-1].vehicle_index:
            raise ValueError("vehicle index must be strictly increasing")
        if eps_vp < 0.0 or eps_vs < 0.0:
            raise ValueError("errors must be non-negative")
        self.rows.append(MetricRow(int(vehicle_index), float(eps_vp), float(eps_vs)))


class Runner:
    """Mutable state of one run plus the slot loop driving it."""

    def __init__(self, cfg, reflectors=None, mode="full", replay=None):
        if mode not in MODES:
            raise ConfigError(f"unknown mode: {mode}")
        if mode == "mapping-bench" and replay is not None:
            raise ConfigError("mapping-bench needs source tags, which replay files do not carry")
        self.cfg = cfg
        self.mode = mode
        self.replay = replay
        self.world = World(cfg, reflectors)
        self.registry = cvtreg.CvtRegistry(cfg)
        self.map = mapping.ReflectorMap(cfg)
        self.clouds = {}  # vehicle id -> VehicleCloud
        self.estimates = {}  # vehicle id -> (position, bias) of the last good slot
        self.metrics = RunMetrics(cfg.mu_fa, cfg.p_d, mode)
        self._acc = [0.0, 0.0, 0]  # position error sum, bias error sum, count
        self._last_row = (float("nan"), float("nan"))
        self._vehicle_index = 0
        self._wake_index = 0
        self._rho_seen = {}  # reflector id -> last slot some cvt resolved to it

    # --- drivers ------------------------------------------------------------

    def run(self, n_slots=None, dump_fh=None):
        """Drive the slot loop; returns the collected metrics."""
        n = self.cfg.n_slots if n_slots is None else int(n_slots)
        if self.mode == "wakeup-bench":
            return self._run_wakeup_bench(n, dump_fh)
        if self.mode == "mapping-bench":
            return self._run_mapping_bench(n, dump_fh)
        for k in range(n):
            if k:
                self._retire(self.world.advance())
            self.step(dump_fh)
        return self.metrics

    def step(self, dump_fh=None):
        """Process the world's current slot end to end."""
        slot = self.world.slot
        obs_sets = self._observe(dump_fh)
        try:
            self._slot_body(slot, obs_sets)
        except (RadioSlamError, np.linalg.LinAlgError, FloatingPointError) as exc:
            logger.warning("slot %d degraded: %s", slot, exc)
            self.metrics.degraded.append((slot, str(exc)))
        self._accumulate()

    def _observe(self, dump_fh):
        obs_sets = sorted(
            channel.synthesize(self.world, self.replay), key=lambda o: o.vehicle_id
        )
        if dump_fh is not None:
            channel.dump_observations(dump_fh, obs_sets)
        return obs_sets

    # --- one slot -----------------------------------------------------------

    def _slot_body(self, slot, obs_sets):
        cfg = self.cfg
        learning = self.mode != "coslam-only"
        params = assoc.LikelihoodParams(
            max(cfg.sigma_d, 1e-9), max(cfg.sigma_theta, 1e-9), max(cfg.sigma_v_theta, 1e-9)
        )
        mapped = {est.id: est for est in self.map} if learning else {}

        woken = self._wake_newcomers(slot, obs_sets, mapped)

        rng = substream(cfg.seed, "motion", slot)
        for obs in obs_sets:
            if obs.vehicle_id in woken:
                continue  # a fresh fix already sits at this slot's position
            team.sample_vehicle(self.clouds[obs.vehicle_id], obs.speed_meas, obs.heading_meas, cfg, rng)

        for old, new in sorted(self.registry.merge_close(cfg.reflector_merge_radius).items()):
            self.map.transfer_pending(old, new)

        assignments, claims, unclaimed = self._associate(slot, obs_sets, mapped, params)
        if learning:
            self._associate_reflectors(mapped)
        self._establish(slot, obs_sets, unclaimed, assignments, claims)

        for cid in claims:
            self.registry.mark_observed(cid, slot)
        for cid in self.registry.discard_stale(slot):
            self.map.drop_pending(cid)

        if learning:
            self._learn(slot, claims)
            for c in self.registry.ordered():
                if c.rho:
                    self._rho_seen[c.rho] = slot
            self._reap_orphans(slot)
            mapped = {est.id: est for est in self.map}  # spawns may have landed

        feedback = {
            rid: (est.image_point, max(est.residual_rms(), cfg.sigma_d))
            for rid, est in mapped.items()
        }
        rng = substream(cfg.seed, "cvt-sample", slot)
        for cvt in self.registry.ordered():
            if not cvt.frozen:
                team.sample_cvt(cvt, feedback, cfg, rng)

        rng = substream(cfg.seed, "update", slot)
        team.joint_update(
            self.clouds,
            {c.id: c for c in self.registry},
            assignments,
            {o.vehicle_id: o.paths for o in obs_sets},
            cfg,
            rng,
        )
        for vid in sorted(self.clouds):
            position, bias = team.resample_and_estimate(self.clouds[vid], cfg, rng)
            self.estimates[vid] = (position, bias)

    def _wake_newcomers(self, slot, obs_sets, mapped):
        """Spawn a cloud for every vehicle that appeared since last slot."""
        cfg = self.cfg
        # only facades past the trust scale feed the decoder; a freshly
        # spawned estimate's image point is still too mobile to anchor on
        images = {
            rid: est.image_point for rid, est in mapped.items() if est.lifetime >= cfg.h_scale
        }
        truth = {v.id: v for v in self.world.vehicles}
        woken = set()
        for obs in obs_sets:
            vid = obs.vehicle_id
            if vid in self.clouds:
                continue
            rng = substream(cfg.seed, "wake", slot, vid)
            sol = wakeup.wake_up(obs, images, cfg, rng)
            if sol.fallback:
                pos_sigma, bias_sigma = cfg.sigma_g, cfg.sigma_s
            else:
                pos_sigma = bias_sigma = WAKE_SPAWN_SCALE * cfg.sigma_d
            self.clouds[vid] = team.VehicleCloud.spawn(
                vid, sol.position, sol.bias, obs.speed_meas, obs.heading_meas,
                cfg, rng, pos_sigma=pos_sigma, bias_sigma=bias_sigma,
            )
            self.estimates[vid] = (np.asarray(sol.position, dtype=float), float(sol.bias))
            woken.add(vid)
            v = truth.get(vid)
            if v is not None:
                self._record_wakeup(slot, sol, v)
        return woken

    def _record_wakeup(self, slot, sol, vehicle):
        self._wake_index += 1
        self.metrics.wakeups.append(
            WakeupSample(
                self._wake_index,
                slot,
                vehicle.id,
                float(np.hypot(sol.position[0] - vehicle.position[0],
                               sol.position[1] - vehicle.position[1])),
                abs(float(sol.bias) - vehicle.bias),
                sol.fallback,
            )
        )

    def _associate(self, slot, obs_sets, mapped, params):
        """CVT-observation association for every vehicle on the road.

        Returns (assignments, claims, unclaimed): resolved path
        assignments per vehicle, the reverse map cvt id -> claiming
        (vehicle, path) pairs, and the per-vehicle unassociated paths
        headed for establishment.
        """
        cfg = self.cfg
        cvts = self.registry.ordered()
        claimed_rho = {c.rho for c in cvts if c.rho}
        # a reflector is open only while no live CVT covers its image;
        # otherwise the fresh-CVT hypothesis outbids the covering CVT for
        # its own paths and everything it feeds is a duplicate
        live_means = np.stack([c.mean() for c in cvts]) if cvts else None

        def covered(image):
            if live_means is None:
                return False
            gap = np.min(np.linalg.norm(live_means - image[None, :], axis=1))
            return gap <= cfg.reflector_merge_radius

        rng = substream(cfg.seed, "open-refl", slot)
        open_samples = [
            (rid, mapped[rid], mapped[rid].image_samples(cfg.n_reflector_samples, rng))
            for rid in sorted(mapped)
            if rid not in claimed_rho and not covered(mapped[rid].image_point)
        ]
        maturity = sum(1 for c in cvts if c.rho) / len(cvts) if cvts else 0.0
        density = channel.fa_density(cfg)

        assignments, claims, unclaimed = {}, {}, {}
        for obs in obs_sets:
            vid = obs.vehicle_id
            cloud = self.clouds.get(vid)
            if cloud is None or not obs.paths:
                continue
            veh_pos = cloud.estimate()[0]
            coda_cvts = []
            for c in cvts:
                est = mapped.get(c.rho)
                det = cfg.p_d * (
                    mapping.reflective_probability(est, veh_pos) if est is not None else cfg.f0_r
                )
                coda_cvts.append(assoc.CodaCvt(c.id, c.positions, c.weights, det))
            ctx = assoc.CodaContext(
                mu_fa=cfg.mu_fa,
                fa_density=density,
                p_d=cfg.p_d,
                f0_r=cfg.f0_r,
                delta_fa=cfg.delta_fa,
                map_maturity=maturity,
                open_reflectors=[
                    assoc.OpenReflector(
                        rid,
                        samples,
                        np.full(len(samples), 1.0 / len(samples)),
                        cfg.p_d * mapping.reflective_probability(est, veh_pos),
                    )
                    for rid, est, samples in open_samples
                ],
                bp_iters=cfg.bp_iters,
                bp_damping=cfg.bp_damping,
                bp_tol=cfg.bp_tol,
                eps_fa=cfg.epsilon_fa_floor,
            )
            result = assoc.coda(
                obs.paths, cloud.positions, cloud.weights, cloud.biases,
                cloud.heading, coda_cvts, ctx, params,
            )
            if result.cvt_claims:
                assignments[vid] = {p: cid for cid, p in result.cvt_claims.items()}
                for cid, p in result.cvt_claims.items():
                    claims.setdefault(cid, []).append((vid, p))
            leftovers = [p for p, cid in result.assignment.items() if cid == 0]
            if leftovers:
                unclaimed[vid] = leftovers
        return assignments, claims, unclaimed

    def _associate_reflectors(self, mapped):
        cvts = [c for c in self.registry.ordered() if not c.frozen]
        if not cvts:
            return
        veh_positions = [self.clouds[vid].estimate()[0] for vid in sorted(self.clouds)]
        reflectors = []
        for rid in sorted(mapped):
            est = mapped[rid]
            if veh_positions:
                pr = float(np.mean([mapping.reflective_probability(est, p) for p in veh_positions]))
            else:
                pr = self.cfg.f0_r
            reflectors.append(assoc.RcdaReflector(rid, est.image_point, pr))
        # a cloud sits off its facade's fitted image by fit residual plus
        # frame drift, not just range noise, and early clouds are worse;
        # the pairing scale floors at a few range sigmas and follows the
        # median spread upward
        spread = float(np.median([np.sqrt(np.mean(c.spread() ** 2)) for c in cvts]))
        result = assoc.rcda(
            [c.mean() for c in cvts],
            [c.id for c in cvts],
            reflectors,
            self.cfg.p_d,
            self.cfg.f0_r,
            max(3.0 * self.cfg.sigma_d, spread),
            iters=self.cfg.bp_iters,
            damping=self.cfg.bp_damping,
            tol=self.cfg.bp_tol,
        )
        for c in cvts:
            c.rho = result.rho[c.id]
            c.rho_posterior = result.posterior[c.id]

    def _establish(self, slot, obs_sets, unclaimed, assignments, claims):
        """Cluster unassociated paths into new CVTs; the founding paths
        claim their CVT for this slot's update."""
        entries = []
        for obs in obs_sets:
            cloud = self.clouds.get(obs.vehicle_id)
            if cloud is None:
                continue
            for p in unclaimed.get(obs.vehicle_id, ()):
                entries.append(
                    cvtreg.EstablishmentEntry(
                        obs.vehicle_id,
                        p,
                        cvtreg.recast_cloud(obs.paths[p], cloud.positions, cloud.biases, cloud.heading),
                    )
                )
        if not entries:
            return
        rng = substream(self.cfg.seed, "establish", slot)
        born = self.registry.establish(entries, slot, rng)
        for (vid, p), cid in sorted(born.items()):
            assignments.setdefault(vid, {})[p] = cid
            claims.setdefault(cid, []).append((vid, p))

    def _learn(self, slot, claims):
        """Feed claimed paths to the plane learners.

        Elements of a CVT with a resolved reflector train that reflector;
        elements of an unresolved CVT accumulate toward spawning one.
        """
        cfg = self.cfg
        batches = {}
        for cid in sorted(claims):
            cvt = self.registry.get(cid)
            if cvt is None or cvt.frozen:
                continue
            if slot - cvt.born_slot < cfg.element_warmup_slots:
                # a fresh cloud still carries the recast error of its founding
                # path; elements taken now would bake that offset into the fit
                continue
            if float(np.sqrt(np.mean(cvt.spread() ** 2))) > 1.5 * cfg.sigma_d:
                # merges and claim churn loosen a cloud; wait it out
                continue
            center = cvt.mean()
            resolved = cvt.rho if cvt.rho in self.map.estimates else 0
            for vid, p in claims[cid]:
                cloud = self.clouds.get(vid)
                if cloud is None:
                    continue
                try:
                    element = mapping.extract_element(cloud.estimate()[0], center, cfg.bs)
                except DegenerateInput:
                    continue
                if resolved:
                    batches.setdefault(resolved, []).append(element)
                else:
                    rid = self.map.buffer_element(cid, element)
                    if rid is not None:
                        # claim on the spot: leaving the newborn estimate
                        # open would let it outbid this very cvt for the
                        # next path and breed a twin
                        cvt.rho = rid
                        cvt.rho_posterior = {rid: 1.0}
                        logger.info("slot %d: reflector %d spawned from cvt %d", slot, rid, cid)
        for rid in sorted(batches):
            self.map.ingest(rid, batches[rid])
        if slot and slot % cfg.edge_refresh_every == 0:
            self.map.refresh_edges()
            for old, new in sorted(self.map.dedupe().items()):
                logger.info("slot %d: reflector %d folded into %d", slot, old, new)
                self._rho_seen.pop(old, None)
                for c in self.registry.ordered():
                    if c.rho == old:
                        c.rho = new
                        c.rho_posterior = {new: 1.0}

    def _reap_orphans(self, slot):
        """Drop immature estimates no CVT has resolved to for a while.

        Association churn can strand a sloppy early fit next to the one
        its facade's CVT settled on; unclaimed it learns nothing and only
        pollutes the wake-up image set. Mature estimates stay: a facade
        out of traffic is not evidence against it.
        """
        cfg = self.cfg
        for rid in sorted(self.map.estimates):
            if self.map.estimates[rid].lifetime >= cfg.h_scale:
                continue
            if slot - self._rho_seen.get(rid, slot) > cfg.reflector_orphan_slots:
                del self.map.estimates[rid]
                self._rho_seen.pop(rid, None)
                logger.info("slot %d: reflector %d reaped as orphan", slot, rid)

    # --- metrics ------------------------------------------------------------

    def _accumulate(self):
        for v in self.world.vehicles:
            entry = self.estimates.get(v.id)
            if entry is None:
                continue
            position, bias = entry
            self._acc[0] += float(np.hypot(position[0] - v.position[0], position[1] - v.position[1]))
            self._acc[1] += abs(bias - v.bias)
            self._acc[2] += 1

    def _retire(self, exited):
        """Close the vehicle-index interval(s) ended by these departures."""
        if not exited:
            return
        if self._acc[2]:
            self._last_row = (self._acc[0] / self._acc[2], self._acc[1] / self._acc[2])
            self._acc = [0.0, 0.0, 0]
        # several vehicles leaving in one slot share the interval means
        image_error, n_estimates = self._map_error()
        for v in sorted(exited, key=lambda t: t.id):
            self._vehicle_index += 1
            self.metrics.add_row(self._vehicle_index, *self._last_row)
            self.metrics.map_rows.append(MapRow(self._vehicle_index, image_error, n_estimates))
            self.clouds.pop(v.id, None)
            self.estimates.pop(v.id, None)

    def _map_error(self):
        estimates = self.map.ordered()
        if not estimates or not self.world.reflectors:
            return float("nan"), len(estimates)
        truth = np.stack([r.image_point for r in self.world.reflectors])
        errors = [
            float(np.min(np.linalg.norm(truth - est.image_point[None, :], axis=1)))
            for est in estimates
        ]
        return float(np.mean(errors)), len(estimates)

    # --- component benches --------------------------------------------------

    def _run_wakeup_bench(self, n, dump_fh):
        """Wake-up accuracy against the true image points, every vehicle
        treated as a newcomer every slot. Isolates decoding and solving
        from mapping quality."""
        cfg = self.cfg
        images = {r.id: r.image_point for r in self.world.reflectors}
        for k in range(n):
            if k:
                self.world.advance()
            obs_sets = self._observe(dump_fh)
            truth = {v.id: v for v in self.world.vehicles}
            for obs in obs_sets:
                rng = substream(cfg.seed, "wake", self.world.slot, obs.vehicle_id)
                sol = wakeup.wake_up(obs, images, cfg, rng)
                self._record_wakeup(self.world.slot, sol, truth[obs.vehicle_id])
        return self.metrics

    def _run_mapping_bench(self, n, dump_fh):
        """Plane learning under truth association.

        Paths are recast from the true vehicle states, so estimate error
        reflects observation noise and the learner alone. Estimates are
        keyed by the true reflector ids.
        """
        cfg = self.cfg
        for k in range(n):
            if k:
                self._retire_bench(self.world.advance())
            obs_sets = self._observe(dump_fh)
            truth = {v.id: v for v in self.world.vehicles}
            batches = {}
            for obs in obs_sets:
                v = truth[obs.vehicle_id]
                for path in obs.paths:
                    if path.source_reflector is None:
                        continue
                    try:
                        vt = cvtreg.recast_point(path, v.position, v.bias, v.orientation)
                        element = mapping.extract_element(v.position, vt, cfg.bs)
                    except DegenerateInput:
                        continue
                    batches.setdefault(path.source_reflector, []).append(element)
            for rid in sorted(batches):
                if rid not in self.map.estimates:
                    self.map.estimates[rid] = mapping.ReflectorEstimate.from_elements(
                        rid, cfg, cfg.bs, batches[rid]
                    )
                else:
                    self.map.ingest(rid, batches[rid])
            slot = self.world.slot
            if slot and slot % cfg.edge_refresh_every == 0:
                self.map.refresh_edges()
        return self.metrics

    def _retire_bench(self, exited):
        if not exited:
            return
        truth_by_id = {r.id: r for r in self.world.reflectors}
        matched = [
            float(np.linalg.norm(est.image_point - truth_by_id[rid].image_point))
            for rid, est in self.map.estimates.items()
            if rid in truth_by_id
        ]
        image_error = float(np.mean(matched)) if matched else float("nan")
        for _ in exited:
            self._vehicle_index += 1
            self.metrics.map_rows.append(
                MapRow(self._vehicle_index, image_error, len(self.map.estimates))
            )


def run_scenario(cfg, reflectors=None, mode="full", replay=None, n_slots=None, dump_fh=None):
    """One-call convenience wrapper: build a runner, run it, return
    (metrics, runner) so callers can inspect the final state."""
    runner = Runner(cfg, reflectors, mode=mode, replay=replay)
    metrics = runner.run(n_slots=n_slots, dump_fh=dump_fh)
    return metrics, runner
