import numpy as np
import pytest

from radioslam import geometry as geo
from radioslam import mapping as mp
from radioslam.errors import DegenerateInput, EdgeUnavailable
from radioslam.world import ScenarioConfig

CFG = ScenarioConfig()
BS = CFG.bs


def wall_plane():
    # facade y = 24, normal toward the base station at y = 0
    return geo.Plane.from_normal_point([0.0, -1.0, 0.0], [0.0, 24.0, 0.0])


def wall_elements(rng, count, point_noise=0.0, angle_noise=0.0):
    plane = wall_plane()
    image = geo.mirror_point(plane, BS)
    _, theta, phi = geo.cart_to_sph(BS - image)
    out = []
    for _ in range(count):
        p = np.array([rng.uniform(30.0, 70.0), 24.0, rng.uniform(0.5, 7.5)])
        p += rng.normal(0.0, point_noise) * plane.normal
        out.append(
            mp.ReflectingElement(
                p,
                theta + rng.normal(0.0, angle_noise),
                phi + rng.normal(0.0, angle_noise),
            )
        )
    return out


def disc_estimate(points, lifetime=None):
    """Estimate on the plane z = 0 whose store is filled directly."""
    learner = mp.FtrlPlaneLearner(CFG.l_alpha, CFG.l_beta, CFG.lambda_ref_value, w0=[0.0, 0.0, 0.0])
    est = mp.ReflectorEstimate(1, CFG, np.array([0.0, 0.0, 50.0]), learner)
    est.elements.extend(mp.ReflectingElement(np.asarray(p, dtype=float), 0.0, 0.0) for p in points)
    est.lifetime = len(points) if lifetime is None else lifetime
    return est


# ---------------------------------------------------------------- elements


def test_extract_element_exact_image_lands_on_plane_with_true_normal():
    plane = wall_plane()
    image = geo.mirror_point(plane, BS)
    vehicle = np.array([40.0, 2.0, 1.5])
    el = mp.extract_element(vehicle, image, BS)
    assert abs(plane.signed_distance(el.point)) < 1e-9
    np.testing.assert_allclose(geo.unit_vector(el.theta, el.phi), plane.normal, atol=1e-9)


def test_extract_element_halves_a_normal_displacement():
    plane = wall_plane()
    image = geo.mirror_point(plane, BS)
    vehicle = np.array([40.0, 2.0, 1.5])
    exact = mp.extract_element(vehicle, image, BS).point
    shifted = mp.extract_element(vehicle, image + 0.1 * plane.normal, BS).point
    err = np.linalg.norm(shifted - exact)
    assert abs(err - 0.05) < 0.02


def test_extract_element_normal_angles_of_vertical_wall():
    # x = 0 facade: image of the base station is its x-mirror
    el = mp.extract_element(np.array([10.0, 1.0, 1.5]), np.array([-50.0, 0.0, 8.0]), np.array([50.0, 0.0, 8.0]))
    assert abs(el.theta) < 1e-12
    assert abs(el.phi - np.pi / 2) < 1e-12


def test_extract_element_rejects_cvt_on_the_base_station():
    with pytest.raises(DegenerateInput):
        mp.extract_element(np.array([10.0, 1.0, 1.5]), BS + 1e-9, BS)


def test_extract_element_rejects_sight_line_missing_the_bisector():
    plane = wall_plane()
    image = geo.mirror_point(plane, BS)
    # vehicle behind the image: the ray from the image never crosses over
    with pytest.raises(DegenerateInput):
        mp.extract_element(image + np.array([0.0, 10.0, 0.0]), image, BS)


# -------------------------------------------------------------------- ftrl


def test_default_angle_constraint_weight():
    assert CFG.lambda_ref_value == pytest.approx(2.63e3, rel=2e-3)


def test_ftrl_exact_elements_are_a_fixed_point():
    rng = np.random.default_rng(3)
    els = wall_elements(rng, 40)
    est = mp.ReflectorEstimate.from_first_element(1, CFG, BS, els[0])
    w0 = est.learner.w.copy()
    loss = est.ingest(els)
    assert loss < 1e-20
    np.testing.assert_allclose(est.learner.w, w0, atol=1e-12)


def test_ftrl_noiseless_plane_recovered_within_budget():
    rng = np.random.default_rng(7)
    for case in range(5):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        phi = rng.uniform(0.4, np.pi - 0.4)
        normal = geo.unit_vector(theta, phi)
        anchor = rng.uniform(-20.0, 20.0, 3)
        plane = geo.Plane.from_normal_point(normal, anchor)
        u, v = geo.plane_basis(normal)
        els = [
            mp.ReflectingElement(anchor + rng.uniform(-15, 15) * u + rng.uniform(-15, 15) * v, theta, phi)
            for _ in range(500)
        ]
        bs = anchor + 30.0 * normal
        est = mp.ReflectorEstimate.from_elements(case, CFG, bs, els)
        # 3 epochs over 500 elements = 1500 steps, well under 5000
        assert np.linalg.norm(est.learner.w - plane.w) <= 1e-3


def test_ftrl_descends_from_a_perturbed_start():
    rng = np.random.default_rng(11)
    els = wall_elements(rng, 500)
    w_true = wall_plane().w
    learner = mp.FtrlPlaneLearner(
        CFG.l_alpha, CFG.l_beta, CFG.lambda_ref_value, w0=w_true + np.array([0.01, -0.01, 0.01])
    )
    pts = np.array([el.point for el in els])
    thetas = np.array([el.theta for el in els])
    phis = np.array([el.phi for el in els])
    for step in range(5000):
        i = step % len(els)
        learner.step(pts[i], thetas[i], phis[i])
    assert np.linalg.norm(learner.w - w_true) <= 1e-3
    assert np.all(np.isfinite(learner.w))


def test_ftrl_noisy_loss_trend_is_nonincreasing():
    rng = np.random.default_rng(13)
    train = wall_elements(rng, 800, point_noise=0.1, angle_noise=0.01)
    check = wall_elements(rng, 100, point_noise=0.1, angle_noise=0.01)
    vp = np.array([el.point for el in check])
    vt = np.array([el.theta for el in check])
    vf = np.array([el.phi for el in check])
    w_true = wall_plane().w
    learner = mp.FtrlPlaneLearner(
        CFG.l_alpha, CFG.l_beta, CFG.lambda_ref_value, w0=w_true + np.array([0.05, -0.05, 0.5])
    )
    val = []
    for el in train:
        learner.step(el.point, el.theta, el.phi)
        val.append(learner.loss(vp, vt, vf))
    smooth = np.convolve(val, np.ones(100) / 100.0, mode="valid")
    drop = smooth[0] - smooth[-1]
    assert drop > 0
    assert np.max(np.diff(smooth)) <= 0.02 * drop
    assert np.all(np.isfinite(val))


def test_plane_property_keeps_base_station_on_positive_side():
    # learner state describing the wall with the normal pointing away
    flipped = geo.Plane(float(geo.wrap_angle(wall_plane().theta + np.pi)), np.pi - wall_plane().phi, -wall_plane().d)
    learner = mp.FtrlPlaneLearner(CFG.l_alpha, CFG.l_beta, CFG.lambda_ref_value, w0=flipped.w)
    est = mp.ReflectorEstimate(1, CFG, BS, learner)
    assert est.plane.signed_distance(BS) > 0
    np.testing.assert_allclose(np.abs(est.plane.signed_distance(np.array([12.0, 24.0, 3.0]))), 0.0, atol=1e-9)
    np.testing.assert_allclose(est.image_point, geo.mirror_point(wall_plane(), BS), atol=1e-9)


def test_image_point_tracks_the_learned_plane():
    rng = np.random.default_rng(17)
    els = wall_elements(rng, 60, point_noise=0.05, angle_noise=0.005)
    est = mp.ReflectorEstimate.from_elements(1, CFG, BS, els[:30])
    for batch in (els[30:45], els[45:]):
        est.ingest(batch)
        np.testing.assert_allclose(est.image_point, geo.mirror_point(est.plane, BS), atol=1e-9)


def test_image_samples_cluster_on_the_image_point():
    rng = np.random.default_rng(19)
    els = wall_elements(rng, 80, point_noise=0.05, angle_noise=0.005)
    est = mp.ReflectorEstimate.from_elements(1, CFG, BS, els)
    samples = est.image_samples(CFG.n_reflector_samples, np.random.default_rng(0))
    assert samples.shape == (32, 3)
    spread = np.linalg.norm(samples - est.image_point, axis=1)
    assert np.median(spread) < 0.5


# -------------------------------------------------------------------- edges


def test_edge_of_a_uniform_disc_sits_at_its_radius():
    # quasi-uniform lattice fill: the binned density is the analytic one
    n, rho = 4000, 5.0
    i = np.arange(1, n + 1)
    r = rho * np.sqrt((i - 0.5) / n)
    a = i * np.pi * (3.0 - np.sqrt(5.0))
    pts = np.column_stack([r * np.cos(a), r * np.sin(a), np.zeros(n)])
    est = disc_estimate(pts)
    omegas = mp.estimate_edges(est)
    assert omegas.shape == (8, 3)
    radii = np.linalg.norm(omegas - pts.mean(axis=0), axis=1)
    assert np.max(np.abs(radii - rho)) <= CFG.edge_bin_width_value + 1e-9


def test_edge_of_a_sampled_uniform_disc_is_close():
    rng = np.random.default_rng(23)
    rho = 5.0
    r = rho * np.sqrt(rng.uniform(0.0, 1.0, 4000))
    a = rng.uniform(0.0, 2.0 * np.pi, 4000)
    pts = np.column_stack([r * np.cos(a), r * np.sin(a), np.zeros(4000)])
    est = disc_estimate(pts)
    radii = np.linalg.norm(mp.estimate_edges(est) - pts.mean(axis=0), axis=1)
    assert np.max(np.abs(radii - rho)) <= 2.0 * CFG.edge_bin_width_value


def test_edge_points_lie_on_plane_inside_bounding_disc():
    rng = np.random.default_rng(29)
    for _ in range(20):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        phi = rng.uniform(0.4, np.pi - 0.4)
        normal = geo.unit_vector(theta, phi)
        anchor = rng.uniform(-10.0, 10.0, 3)
        u, v = geo.plane_basis(normal)
        n_el = rng.integers(120, 400)
        pts = anchor + rng.uniform(-8, 8, (n_el, 1)) * u + rng.uniform(-3, 3, (n_el, 1)) * v
        learner = mp.FtrlPlaneLearner(
            CFG.l_alpha, CFG.l_beta, CFG.lambda_ref_value, w0=geo.Plane.from_normal_point(normal, anchor).w
        )
        est = mp.ReflectorEstimate(1, CFG, anchor + 40.0 * normal, learner)
        est.elements.extend(
            mp.ReflectingElement(p, theta + rng.normal(0, 0.01), phi + rng.normal(0, 0.01)) for p in pts
        )
        est.lifetime = int(n_el)
        try:
            omegas = mp.estimate_edges(est)
        except EdgeUnavailable:
            continue
        assert np.max(np.abs(est.plane.signed_distance(omegas))) < 1e-6
        projected = pts - est.plane.signed_distance(pts)[:, None] * est.plane.normal
        center = projected.mean(axis=0)
        r_max = np.max(np.linalg.norm(projected - center, axis=1))
        assert np.all(np.linalg.norm(omegas - center, axis=1) <= r_max + 1e-9)


def test_edge_needs_the_trust_scale_element_count():
    rng = np.random.default_rng(31)
    pts = np.column_stack([rng.uniform(-4, 4, 99), rng.uniform(-4, 4, 99), np.zeros(99)])
    with pytest.raises(EdgeUnavailable):
        mp.estimate_edges(disc_estimate(pts))
    # same store, lifetime over the bar
    omegas = mp.estimate_edges(disc_estimate(pts, lifetime=150))
    assert omegas.shape == (CFG.edge_directions, 3)


def test_edge_rejects_collapsed_elements():
    pts = np.tile(np.array([1.0, 2.0, 0.0]), (150, 1))
    with pytest.raises(EdgeUnavailable):
        mp.estimate_edges(disc_estimate(pts))


def test_edge_rejects_when_no_bin_has_support():
    # every occupied radial bin holds a single element
    r = 0.4 * (np.arange(150) + 1.0)
    pts = np.column_stack([r, np.zeros(150), np.zeros(150)])
    with pytest.raises(EdgeUnavailable):
        mp.estimate_edges(disc_estimate(pts))


# ------------------------------------------------------- density and hearing


def square_edge_estimate(side, lifetime):
    half = side / 2.0
    verts = np.array(
        [[half, half, 0.0], [-half, half, 0.0], [-half, -half, 0.0], [half, -half, 0.0]]
    )
    est = disc_estimate(verts, lifetime=lifetime)
    est.set_edge(verts)
    return est


def test_density_zero_below_trust_scale():
    est = square_edge_estimate(2.0, lifetime=99)
    assert mp.density_factor(est) == 0.0


def test_density_formula_and_limit():
    side = np.sqrt(2.0)  # area exactly 2
    est = square_edge_estimate(side, lifetime=200)
    assert mp.density_factor(est) == pytest.approx(1.0 - np.exp(-1.0), abs=1e-12)
    est.lifetime = 10**9
    assert mp.density_factor(est) == pytest.approx(1.0, abs=1e-12)
    est.lifetime = 150
    more = square_edge_estimate(side, lifetime=151)
    assert mp.density_factor(more) > mp.density_factor(est)


def test_density_zero_without_an_edge():
    rng = np.random.default_rng(37)
    pts = np.column_stack([rng.uniform(-4, 4, 200), rng.uniform(-4, 4, 200), np.zeros(200)])
    est = disc_estimate(pts)
    assert est.edge is None
    assert mp.density_factor(est) == 0.0


def test_reflective_probability_falls_back_to_the_prior():
    est = square_edge_estimate(2.0, lifetime=99)
    assert mp.reflective_probability(est, np.array([0.0, 0.0, 10.0])) == CFG.f0_r
    assert mp.reflective_probability(est, np.array([500.0, 0.0, 10.0])) == CFG.f0_r


def test_reflective_probability_saturated_map():
    est = square_edge_estimate(4.0, lifetime=10**9)
    assert mp.density_factor(est) == pytest.approx(1.0, abs=1e-12)
    # bs is at (0, 0, 50); a vehicle straight above the pad reflects through it
    assert mp.reflective_probability(est, np.array([0.5, -0.5, 30.0])) == pytest.approx(1.0)
    assert mp.reflective_probability(est, np.array([400.0, 0.0, 30.0])) == pytest.approx(0.0, abs=1e-12)


def test_reflective_probability_blend():
    est = square_edge_estimate(2.0, lifetime=140)
    fd = mp.density_factor(est)
    assert 0.0 < fd < 1.0
    inside = mp.reflective_probability(est, np.array([0.2, 0.1, 30.0]))
    outside = mp.reflective_probability(est, np.array([400.0, 0.0, 30.0]))
    assert inside == pytest.approx(fd + CFG.f0_r * (1.0 - fd))
    assert outside == pytest.approx(CFG.f0_r * (1.0 - fd))
    # a vehicle behind the facade cannot hear it either
    behind = mp.reflective_probability(est, np.array([0.0, 0.0, -30.0]))
    assert behind == pytest.approx(CFG.f0_r * (1.0 - fd))


def test_reflective_probability_depends_only_on_position():
    rng = np.random.default_rng(41)
    est = square_edge_estimate(3.0, lifetime=400)
    for _ in range(50):
        pos = rng.uniform(-30, 30, 3)
        p = mp.reflective_probability(est, pos)
        assert 0.0 <= p <= 1.0
        assert p == mp.reflective_probability(est, pos.copy())


# ---------------------------------------------------------------- registry


def test_buffered_elements_graduate_into_a_reflector():
    rng = np.random.default_rng(43)
    els = wall_elements(rng, 25, point_noise=0.02, angle_noise=0.002)
    reg = mp.ReflectorMap(CFG)
    for el in els[:9]:
        assert reg.buffer_element(7, el) is None
    rid = reg.buffer_element(7, els[9])
    assert rid == 1
    assert 7 not in reg.pending
    est = reg.get(rid)
    assert est.lifetime == 10
    assert np.linalg.norm(est.image_point - geo.mirror_point(wall_plane(), BS)) < 1.0
    # a second CVT on the same wall reinforces the facade, no duplicate
    for el in els[10:19]:
        assert reg.buffer_element(9, el) is None
    assert reg.buffer_element(9, els[19]) == 1
    assert len(reg) == 1
    assert reg.get(1).lifetime == 20
    reg.drop_pending(9)  # no-op, already graduated
    reg.buffer_element(4, els[20])
    reg.drop_pending(4)
    assert 4 not in reg.pending


def test_distinct_walls_graduate_into_distinct_reflectors():
    rng = np.random.default_rng(59)
    reg = mp.ReflectorMap(CFG)
    for el in wall_elements(rng, 10):
        rid = reg.buffer_element(1, el)
    assert rid == 1
    # opposite side of the road: image point tens of meters away
    other = geo.Plane.from_normal_point([0.0, 1.0, 0.0], [0.0, -20.0, 0.0])
    image = geo.mirror_point(other, BS)
    _, theta, phi = geo.cart_to_sph(BS - image)
    for _ in range(10):
        p = np.array([rng.uniform(30.0, 70.0), -20.0, rng.uniform(0.5, 7.5)])
        rid = reg.buffer_element(2, mp.ReflectingElement(p, theta, phi))
    assert rid == 2
    assert len(reg) == 2


def test_map_roundtrip_through_json(tmp_path):
    rng = np.random.default_rng(47)
    els = wall_elements(rng, 140, point_noise=0.05, angle_noise=0.005)
    reg = mp.ReflectorMap(CFG)
    for i, el in enumerate(els[:10]):
        rid = reg.buffer_element(3, el)
    assert rid == 1
    reg.ingest(1, els[10:])
    reg.refresh_edges()
    est = reg.get(1)
    assert est.edge is not None

    path = tmp_path / "map.json"
    reg.save(path)
    back = mp.ReflectorMap.load(path, CFG)
    est2 = back.get(1)
    np.testing.assert_allclose(est2.learner.z, est.learner.z)
    np.testing.assert_allclose(est2.learner.n, est.learner.n)
    np.testing.assert_allclose(est2.plane.w, est.plane.w, atol=1e-12)
    np.testing.assert_allclose(est2.image_point, est.image_point, atol=1e-9)
    np.testing.assert_allclose(est2.edge, est.edge, atol=1e-9)
    assert est2.lifetime == est.lifetime
    # a same-wall buffer in the restored map folds into the restored id
    for el in els[:10]:
        rid2 = back.buffer_element(11, el)
    assert rid2 == 1


def test_refresh_keeps_last_edge_when_estimation_degrades():
    rng = np.random.default_rng(53)
    pts = np.column_stack([rng.uniform(-4, 4, 200), rng.uniform(-4, 4, 200), np.zeros(200)])
    est = disc_estimate(pts)
    reg = mp.ReflectorMap(CFG)
    reg.estimates[1] = est
    reg.refresh_edges()
    kept = est.edge.copy()
    # collapse the store; the old boundary must survive the failed refresh
    est.elements.clear()
    est.elements.extend(mp.ReflectingElement(np.array([0.0, 0.0, 0.0]), 0.0, 0.0) for _ in range(200))
    reg.refresh_edges()
    np.testing.assert_allclose(est.edge, kept)
