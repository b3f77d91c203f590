import numpy as np
import pytest

import dgsplat.autodiff as ad
from dgsplat.autodiff import DTensor, NumericError, Tape, fd_check
from dgsplat.camera import Camera, look_at
from dgsplat.gaussians import GaussianSet
from dgsplat.render import RenderSettings, project, render, render_motion

from oracle_render import oracle_render


def make_cam(w=16, h=16, fov=60.0):
    return look_at([0.0, 0.0, -4.0], [0.0, 0.0, 0.0], w, h, fov_deg=fov)


def scene(rng, n, spread=0.8):
    g = GaussianSet.random(rng, n, extent=spread)
    # keep opacities in a clamp-safe band
    g.opacity_logits.data[...] = rng.uniform(0.2, 1.8, n)
    g.log_scales.data[...] = np.log(rng.uniform(0.15, 0.4, (n, 3)))
    return g


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(fx=-1, fy=1, cx=0, cy=0, rotation=np.eye(3), translation=np.zeros(3),
               width=4, height=4)
    with pytest.raises(ValueError):
        Camera(fx=1, fy=1, cx=0, cy=0, rotation=np.eye(3) * 1.01,
               translation=np.zeros(3), width=4, height=4)


def test_look_at_camera_center_roundtrip():
    cam = make_cam()
    np.testing.assert_allclose(cam.center, [0, 0, -4], atol=1e-12)


def test_on_axis_gaussian_projects_to_principal_point():
    cam = make_cam()
    g = GaussianSet.from_arrays(
        positions=[[0.0, 0.0, 0.0]], rot_quats=[[1.0, 0, 0, 0]],
        log_scales=[[-1.0, -1.0, -1.0]], opacity_logits=[0.5], colors=[[1.0, 0, 0]])
    proj = project(g.view(), cam)
    assert proj.n == 1
    assert proj.mean_x.data[0] == pytest.approx(cam.cx, abs=1e-9)
    assert proj.mean_y.data[0] == pytest.approx(cam.cy, abs=1e-9)


def test_isotropic_on_axis_cov2d_closed_form():
    cam = make_cam()
    sigma = 0.3
    g = GaussianSet.from_arrays(
        positions=[[0.0, 0.0, 0.0]], rot_quats=[[1.0, 0, 0, 0]],
        log_scales=[[np.log(sigma)] * 3], opacity_logits=[0.0], colors=[[1.0, 1, 1]])
    st = RenderSettings()
    proj = project(g.view(), cam, st)
    d = 4.0
    expect = (cam.fx * sigma / d) ** 2 + st.dilation
    assert proj.cov_a.data[0] == pytest.approx(expect, rel=1e-12)
    assert proj.cov_c.data[0] == pytest.approx(expect, rel=1e-12)
    assert proj.cov_b.data[0] == pytest.approx(0.0, abs=1e-12)


def test_behind_camera_is_culled():
    cam = make_cam()
    g = GaussianSet.from_arrays(
        positions=[[0.0, 0.0, -4.0], [0.0, 0.0, 0.0]],  # first sits at depth 0
        rot_quats=[[1.0, 0, 0, 0]] * 2, log_scales=[[-1.0] * 3] * 2,
        opacity_logits=[0.0, 0.0], colors=[[1.0, 0, 0]] * 2)
    proj = project(g.view(), cam)
    assert proj.n == 1 and proj.indices.tolist() == [1]


def test_projection_depth_sorted():
    rng = np.random.default_rng(0)
    g = scene(rng, 6)
    proj = project(g.view(), make_cam())
    assert (np.diff(proj.depth.data) >= 0).all()


def test_non_finite_parameter_names_gaussian():
    g = GaussianSet.from_arrays(
        positions=[[0.0, 0.0, 0.0], [np.nan, 0.0, 0.0]],
        rot_quats=[[1.0, 0, 0, 0]] * 2, log_scales=[[-1.0] * 3] * 2,
        opacity_logits=[0.0, 0.0], colors=[[1.0, 0, 0]] * 2)
    with pytest.raises(NumericError, match="Gaussian 1"):
        render(g.view(), make_cam())


def test_empty_scene_renders_background():
    cam = make_cam()
    g = GaussianSet.from_arrays(
        positions=[[0.0, 0.0, -5.0]], rot_quats=[[1.0, 0, 0, 0]],
        log_scales=[[-1.0] * 3], opacity_logits=[0.0], colors=[[1.0, 0, 0]])
    out = render(g.view(), cam)  # the only Gaussian is behind the camera
    np.testing.assert_array_equal(out.color.data, np.zeros((16, 16, 3)))
    np.testing.assert_array_equal(out.transmittance.data, np.ones((16, 16)))


def test_single_gaussian_center_pixel_alpha():
    # Pixel at the projected center of one Gaussian: C = c * alpha, alpha = o.
    cam = make_cam(w=17, h=17)  # odd size puts cx on an integer pixel
    o = 0.7
    logit = float(np.log(o / (1 - o)))
    g = GaussianSet.from_arrays(
        positions=[[0.0, 0.0, 0.0]], rot_quats=[[1.0, 0, 0, 0]],
        log_scales=[[0.0] * 3], opacity_logits=[logit], colors=[[0.2, 0.4, 0.8]])
    out = render(g.view(), cam, RenderSettings.exact())
    center = out.color.data[8, 8]
    np.testing.assert_allclose(center, np.array([0.2, 0.4, 0.8]) * o, rtol=1e-12)


def test_two_gaussian_compositing_formula():
    # Both Gaussians dead center: C = c1 a1 + c2 a2 (1 - a1).
    cam = make_cam(w=17, h=17)
    o1, o2 = 0.6, 0.8
    logits = [np.log(o1 / (1 - o1)), np.log(o2 / (1 - o2))]
    g = GaussianSet.from_arrays(
        positions=[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        rot_quats=[[1.0, 0, 0, 0]] * 2, log_scales=[[0.0] * 3] * 2,
        opacity_logits=logits, colors=[[1.0, 0, 0], [0.0, 1.0, 0]])
    out = render(g.view(), cam, RenderSettings.exact())
    center = out.color.data[8, 8]
    np.testing.assert_allclose(center, [o1, o2 * (1 - o1), 0.0], rtol=1e-12)
    assert out.transmittance.data[8, 8] == pytest.approx((1 - o1) * (1 - o2), rel=1e-12)


def test_render_matches_bruteforce_oracle_20_scenes():
    exact = RenderSettings.exact()
    for seed in range(20):
        rng = np.random.default_rng(9000 + seed)
        n = int(rng.integers(1, 6))
        g = scene(rng, n)
        w = int(rng.integers(8, 33))
        h = int(rng.integers(8, 33))
        cam = look_at(rng.uniform(-1, 1, 3) + [0, 0, -4], [0, 0, 0], w, h, fov_deg=55)
        out = render(g.view(), cam, exact)
        ref_img, ref_tr = oracle_render(
            g.positions.data, g.rot_quats.data, g.log_scales.data,
            g.opacity_logits.data, g.colors.data, cam, dilation=exact.dilation)
        assert np.abs(out.color.data - ref_img).max() < 1e-10, f"seed {seed}"
        assert np.abs(out.transmittance.data - ref_tr).max() < 1e-10


def test_composite_pixel_reference_cases():
    from dgsplat.render import composite_pixel
    from dgsplat.render import Projected2DGaussians
    from dgsplat.autodiff import DTensor as D

    # Empty list: background color, transmittance 1.
    empty = Projected2DGaussians(*(D(np.zeros(0)) for _ in range(11)),
                                 indices=np.zeros(0, np.intp))
    c, t = composite_pixel((3.0, 4.0), empty)
    np.testing.assert_array_equal(c, np.zeros(3))
    assert t == 1.0

    # One and two Gaussians exactly at the pixel: the textbook recurrences.
    cam = make_cam(w=17, h=17)
    o1, o2 = 0.6, 0.8
    g = GaussianSet.from_arrays(
        positions=[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        rot_quats=[[1.0, 0, 0, 0]] * 2, log_scales=[[0.0] * 3] * 2,
        opacity_logits=[np.log(o1 / (1 - o1)), np.log(o2 / (1 - o2))],
        colors=[[1.0, 0, 0], [0.0, 1.0, 0]])
    exact = RenderSettings.exact()
    proj = project(g.view(), cam, exact)
    c, t = composite_pixel((cam.cx, cam.cy), proj, exact)
    np.testing.assert_allclose(c, [o1, o2 * (1 - o1), 0.0], rtol=1e-12)
    assert t == pytest.approx((1 - o1) * (1 - o2), rel=1e-12)

    # Against the full renderer on every pixel of a random scene.
    rng = np.random.default_rng(77)
    g2 = scene(rng, 4)
    cam2 = make_cam(w=9, h=9)
    proj2 = project(g2.view(), cam2, exact)
    img = render(g2.view(), cam2, exact).color.data
    for i in range(9):
        for j in range(9):
            c, _ = composite_pixel((j, i), proj2, exact)
            np.testing.assert_allclose(c, img[i, j], atol=1e-12)


def test_render_deterministic_bit_identical():
    rng = np.random.default_rng(1)
    g = scene(rng, 4)
    cam = make_cam()
    a = render(g.view(), cam)
    b = render(g.view(), cam)
    np.testing.assert_array_equal(a.color.data, b.color.data)


def test_transmittance_monotone_through_list():
    rng = np.random.default_rng(2)
    g = scene(rng, 5)
    cam = make_cam()
    proj = project(g.view(), cam, RenderSettings.exact())
    # Reconstruct per-Gaussian running transmittance the way render does.
    from dgsplat.render import _pixel_grid
    px, py = _pixel_grid(16, 16)
    dx = px - proj.mean_x.data[None, :]
    dy = py - proj.mean_y.data[None, :]
    power = -0.5 * (proj.inv_a.data * dx ** 2 + 2 * proj.inv_b.data * dx * dy
                    + proj.inv_c.data * dy ** 2)
    alpha = proj.opacity.data * np.exp(power)
    running = np.cumprod(1 - alpha, axis=1)
    assert (np.diff(running, axis=1) <= 1e-15).all()


def test_occlusion_full_cover_attenuation():
    # A huge opaque front Gaussian scales a back Gaussian's contribution by
    # exactly (1 - alpha_front) at every pixel.
    cam = make_cam(w=9, h=9, fov=30)
    front_o = 0.9
    base = dict(rot_quats=[[1.0, 0, 0, 0]], log_scales=[[np.log(50.0)] * 3])
    back = GaussianSet.from_arrays(
        positions=[[0.0, 0.0, 1.0]], opacity_logits=[0.3], colors=[[0.0, 1.0, 0]],
        rot_quats=[[1.0, 0, 0, 0]], log_scales=[[0.0] * 3])
    both = GaussianSet.from_arrays(
        positions=[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        rot_quats=[[1.0, 0, 0, 0]] * 2,
        log_scales=[base["log_scales"][0], [0.0] * 3],
        opacity_logits=[np.log(front_o / (1 - front_o)), 0.3],
        colors=[[1.0, 0, 0], [0.0, 1.0, 0]])
    exact = RenderSettings.exact()
    img_back = render(back.view(), cam, exact).color.data
    img_both = render(both.view(), cam, exact).color.data
    # Per-pixel alpha of the front Gaussian, recomputed independently.
    proj = project(both.view(), cam, exact)
    from dgsplat.render import _pixel_grid
    px, py = _pixel_grid(9, 9)
    dx = (px - proj.mean_x.data[0]).reshape(9, 9)
    dy = (py - proj.mean_y.data[0]).reshape(9, 9)
    power = -0.5 * (proj.inv_a.data[0] * dx ** 2 + 2 * proj.inv_b.data[0] * dx * dy
                    + proj.inv_c.data[0] * dy ** 2)
    a_front = proj.opacity.data[0] * np.exp(power)
    np.testing.assert_allclose(img_both[:, :, 1], img_back[:, :, 1] * (1 - a_front),
                               atol=1e-13)


def test_render_gradient_vs_fd_positions():
    rng = np.random.default_rng(3)
    g = scene(rng, 3)
    cam = make_cam(w=12, h=12)
    exact = RenderSettings.exact()

    def f(pos):
        view = g.view()
        view.positions = pos
        out = render(view, cam, exact)
        return ad.mean(out.color)

    r = fd_check(f, g.positions, h=1e-5, tol=1e-4)
    assert r.passed, r


@pytest.mark.parametrize("field", ["rot_quats", "log_scales", "opacity_logits", "colors"])
def test_render_gradient_vs_fd_other_params(field):
    rng = np.random.default_rng(4)
    g = scene(rng, 2)
    cam = make_cam(w=10, h=10)
    exact = RenderSettings.exact()

    def f(t):
        view = g.view()
        setattr(view, field, t)
        out = render(view, cam, exact)
        return ad.mean(out.color)

    r = fd_check(f, getattr(g, field), h=1e-5, tol=1e-4)
    assert r.passed, f"{field}: {r}"


def test_thresholds_change_little_but_run():
    rng = np.random.default_rng(5)
    g = scene(rng, 5)
    cam = make_cam()
    full = render(g.view(), cam, RenderSettings()).color.data
    exact = render(g.view(), cam, RenderSettings.exact()).color.data
    assert np.abs(full - exact).max() < 0.1  # skip threshold drops faint tails only


def test_early_exit_stops_contributions():
    # Three stacked fully-opaque-ish Gaussians: with early exit the third
    # contributes nothing once transmittance dies.
    cam = make_cam(w=5, h=5, fov=25)
    g = GaussianSet.from_arrays(
        positions=[[0, 0, 0], [0, 0, 0.5], [0, 0, 1.0]],
        rot_quats=[[1.0, 0, 0, 0]] * 3, log_scales=[[np.log(30.0)] * 3] * 3,
        opacity_logits=[8.0, 8.0, 8.0], colors=[[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    st = RenderSettings(early_exit_transmittance=1e-2)
    out = render(g.view(), cam, st).color.data
    assert out[2, 2, 2] == 0.0  # blue never composited


def test_motion_heatmap_zero_deformation_black():
    rng = np.random.default_rng(6)
    g = scene(rng, 3)
    out = render_motion(g.view(), np.zeros((3, 3)), make_cam())
    np.testing.assert_array_equal(out.color.data, np.zeros((16, 16, 3)))


def test_motion_heatmap_single_axis():
    cam = make_cam(w=17, h=17)
    g = GaussianSet.from_arrays(
        positions=[[0.0, 0.0, 0.0]], rot_quats=[[1.0, 0, 0, 0]],
        log_scales=[[0.0] * 3], opacity_logits=[4.0], colors=[[0.5, 0.5, 0.5]])
    d = np.array([[0.5, 0.0, 0.0]])
    out = render_motion(g.view(), d, cam, RenderSettings.exact())
    center = out.color.data[8, 8]
    o = 1 / (1 + np.exp(-4.0))
    # normalization: 99th percentile of |d| is ~0.5 -> red channel ~= 1 * alpha
    assert center[0] == pytest.approx(o, rel=5e-2)
    assert center[1] == 0.0 and center[2] == 0.0


def test_motion_heatmap_matches_oracle_with_swapped_colors():
    rng = np.random.default_rng(7)
    g = scene(rng, 4)
    d = 0.3 * rng.standard_normal((4, 3))
    cam = make_cam()
    exact = RenderSettings.exact()
    out = render_motion(g.view(), d, cam, exact)
    mag = np.abs(d)
    ref = np.clip(mag / np.percentile(mag, 99.0), 0.0, 1.0)
    ref_img, _ = oracle_render(g.positions.data, g.rot_quats.data, g.log_scales.data,
                               g.opacity_logits.data, ref, cam, dilation=exact.dilation)
    assert np.abs(out.color.data - ref_img).max() < 1e-10
