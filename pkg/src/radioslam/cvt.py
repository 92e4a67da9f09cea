"""Common virtual transmitter registry.

A path observation seen from a vehicle state hypothesis can be recast
into the position of the transmitter that would explain it: starting at
the vehicle, walk the bias-corrected range along the measured arrival
direction (rotated back into the world frame by the vehicle heading).
Recasting every path of every vehicle in a slot yields a cloud of
virtual-transmitter hypotheses; unclaimed ones are clustered by affinity
propagation and each cluster is promoted to a common virtual transmitter
(CVT) that all vehicles subsequently share. Since one facade mirrors the
base station to exactly one image point, a healthy registry converges to
one CVT per visible reflector.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from sklearn.cluster import AffinityPropagation

from . import geometry as geo
from .errors import DegenerateInput


def recast_point(obs, position, bias, heading):
    """Virtual-transmitter position implied by one observation and one
    vehicle state hypothesis. Raises when the bias eats the whole range."""
    reach = obs.d - bias
    if reach < 0.0:
        raise DegenerateInput("bias exceeds measured range")
    return np.asarray(position, dtype=float) + geo.sph_to_cart(
        reach, obs.theta + heading, obs.phi
    )


def recast_cloud(obs, positions, biases, heading):
    """Per-particle recast, clamping negative reach to zero.

    positions (N, 3), biases (N,) -> (N, 3). The clamp keeps particles
    whose bias hypothesis exceeds the range usable instead of raising;
    they collapse onto the vehicle hypothesis and get down-weighted by
    the likelihood instead.
    """
    reach = np.maximum(obs.d - np.asarray(biases, dtype=float), 0.0)
    return np.asarray(positions, dtype=float) + geo.sph_to_cart(
        reach, obs.theta + heading, obs.phi
    )


def affinity_propagation(points, damping=0.9, max_iter=200, convergence_iter=15):
    """Exemplar-based clustering with negative squared-distance similarity.

    Thin deterministic front end over scikit-learn's message-passing
    implementation (preference = median similarity). Returns
    (labels, exemplar_indices). Inputs too small for message passing to
    say anything (n <= 2: every off-diagonal similarity ties the
    preference) and runs that end without positive exemplar evidence are
    folded into a single cluster around the medoid; splitting such a
    bundle is the job of the establishment gate, which knows the
    measurement scale, not of the similarity structure, which is blind
    to it.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n == 0:
        return np.array([], dtype=int), np.array([], dtype=int)
    if n <= 2:
        return np.zeros(n, dtype=int), np.array([0], dtype=int)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = AffinityPropagation(
            damping=damping,
            max_iter=max_iter,
            convergence_iter=convergence_iter,
            random_state=0,
        ).fit(pts)
    labels = np.asarray(fit.labels_, dtype=int)
    ex = np.asarray(fit.cluster_centers_indices_, dtype=int)
    if len(ex) == 0 or np.any(labels < 0):
        diff = pts[:, None, :] - pts[None, :, :]
        s = -np.einsum("ijk,ijk->ij", diff, diff)
        medoid = int(np.argmax(np.sum(s, axis=1)))
        return np.zeros(n, dtype=int), np.array([medoid], dtype=int)
    return labels, ex


def gated_components(points, gate):
    """Single-linkage connected components under a hard distance gate.

    Two points belong to the same component iff a chain of pairwise
    steps <= gate connects them. Returns integer labels.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n == 0:
        return np.array([], dtype=int)
    if n == 1:
        return np.zeros(1, dtype=int)
    z = linkage(pts, method="single")
    return fcluster(z, t=float(gate), criterion="distance").astype(int) - 1


@dataclasses.dataclass
class Cvt:
    """One shared transmitter hypothesis: a particle cloud plus bookkeeping."""

    id: int
    positions: np.ndarray  # (N, 3)
    weights: np.ndarray  # (N,), normalized
    born_slot: int
    last_observed_slot: int
    rho: int = 0  # reflector estimate id, 0 = unexplained
    rho_posterior: dict = dataclasses.field(default_factory=dict)
    frozen: bool = False  # anchor clouds (the base station) never move

    def mean(self):
        return self.weights @ self.positions

    def spread(self):
        m = self.mean()
        var = self.weights @ (self.positions - m) ** 2
        return np.sqrt(var)


@dataclasses.dataclass
class EstablishmentEntry:
    """One unassociated path queued for CVT establishment."""

    vehicle_id: int
    path_index: int
    cloud: np.ndarray  # (N, 3) recast particle cloud

    @property
    def mean(self):
        return self.cloud.mean(axis=0)

    @property
    def spread(self):
        return self.cloud.std(axis=0)


class CvtRegistry:
    """Shared map of CVTs with establish / observe / discard lifecycle."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.cvts: dict[int, Cvt] = {}
        self._next_id = 1

    def __iter__(self):
        return iter(self.cvts.values())

    def __len__(self):
        return len(self.cvts)

    def get(self, cid):
        return self.cvts.get(cid)

    def ordered(self):
        return [self.cvts[k] for k in sorted(self.cvts)]

    def establish(self, entries, slot, rng):
        """Cluster unassociated recasts and promote each cluster to a CVT.

        Affinity propagation proposes the grouping; each proposed cluster
        is then split into its connected components under a hard distance
        gate of three times the measurement scale. The gate can only cut,
        never merge, so message passing still decides what belongs
        together at close range while physically impossible bundles
        (exemplar pull across tens of meters dwarfs the recast noise)
        cannot survive.

        At most one path per vehicle may join a cluster (a vehicle cannot
        observe the same transmitter along two paths); surplus members
        spill into singleton CVTs of their own. Returns the mapping
        (vehicle_id, path_index) -> new cvt id.
        """
        if not entries:
            return {}
        means = np.stack([e.mean for e in entries])
        ap_labels, _ = affinity_propagation(
            means,
            damping=self.cfg.ap_damping,
            max_iter=self.cfg.ap_max_iter,
            convergence_iter=self.cfg.ap_convergence_iter,
        )
        cloud_rms = np.median(
            [float(np.sqrt(np.mean(e.spread**2))) for e in entries]
        )
        gate = 3.0 * max(self.cfg.sigma_d, cloud_rms)
        gate_labels = gated_components(means, gate)
        keys = list(zip(ap_labels.tolist(), gate_labels.tolist()))
        assignment = {}
        for key in sorted(set(keys)):
            members = [e for e, k in zip(entries, keys) if k == key]
            # enforce one path per vehicle inside a cluster
            seen_vehicles = {}
            core, spill = [], []
            center = np.mean([m.mean for m in members], axis=0)
            for m in sorted(members, key=lambda m: float(np.linalg.norm(m.mean - center))):
                if m.vehicle_id in seen_vehicles:
                    spill.append(m)
                else:
                    seen_vehicles[m.vehicle_id] = m
                    core.append(m)
            groups = [core] + [[s] for s in spill]
            for grp in groups:
                cvt = self._promote(grp, slot, rng)
                for m in grp:
                    assignment[(m.vehicle_id, m.path_index)] = cvt.id
        return assignment

    def _promote(self, members, slot, rng):
        cfg = self.cfg
        means = np.stack([m.mean for m in members])
        center = means.mean(axis=0)
        inter = means.std(axis=0) if len(members) > 1 else np.zeros(3)
        intra = np.sqrt(np.mean(np.stack([m.spread for m in members]) ** 2, axis=0))
        sigma = np.maximum(np.maximum(inter, intra), cfg.sigma_d)
        positions = center + rng.normal(0.0, 1.0, size=(cfg.n_cvt_particles, 3)) * sigma
        cvt = Cvt(
            id=self._next_id,
            positions=positions,
            weights=np.full(cfg.n_cvt_particles, 1.0 / cfg.n_cvt_particles),
            born_slot=slot,
            last_observed_slot=slot,
        )
        self._next_id += 1
        self.cvts[cvt.id] = cvt
        return cvt

    def merge_close(self, gate):
        """Fold CVTs whose cloud means sit within the gate into one.

        Claim exclusivity is per vehicle, so two hypotheses for the same
        transmitter can survive side by side indefinitely, each fed by a
        different vehicle; overlap has to be resolved here instead. The
        oldest id survives with the pooled cloud trimmed back to the
        particle budget. Returns {dropped id: surviving id}.
        """
        live = [c for c in self.ordered() if not c.frozen]
        if len(live) < 2:
            return {}
        means = np.stack([c.mean() for c in live])
        labels = gated_components(means, float(gate))
        folded = {}
        for lab in sorted(set(labels.tolist())):
            group = [c for c, l in zip(live, labels) if l == lab]
            if len(group) < 2:
                continue
            keep = group[0]
            pos = np.concatenate([c.positions for c in group])
            w = np.concatenate([c.weights for c in group]) / len(group)
            cap = self.cfg.n_cvt_particles
            if len(w) > cap:
                idx = np.argsort(-w, kind="stable")[:cap]
                pos, w = pos[idx], w[idx]
            keep.positions = pos
            keep.weights = w / w.sum()
            keep.born_slot = min(c.born_slot for c in group)
            keep.last_observed_slot = max(c.last_observed_slot for c in group)
            if keep.rho == 0:
                for c in group[1:]:
                    if c.rho:
                        keep.rho = c.rho
                        keep.rho_posterior = dict(c.rho_posterior)
                        break
            for c in group[1:]:
                folded[c.id] = keep.id
                del self.cvts[c.id]
        return folded

    def mark_observed(self, cid, slot):
        self.cvts[cid].last_observed_slot = slot

    def discard_stale(self, slot):
        """Drop CVTs no path has claimed for more than the grace window."""
        stale = [
            cid
            for cid, c in self.cvts.items()
            if slot - c.last_observed_slot > self.cfg.cvt_grace_slots
        ]
        for cid in stale:
            del self.cvts[cid]
        return stale
