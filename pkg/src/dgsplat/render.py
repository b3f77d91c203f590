"""Differentiable forward splatting.

Gaussians are projected through a pinhole camera with the usual local
affine (Jacobian) covariance transfer, globally depth-sorted, and
alpha-composited front to back per pixel.  The whole path is built from
taped primitives, so image losses differentiate back to every Gaussian
parameter.  Threshold behavior (alpha clamp, skip, early exit) follows the
stock splatting conventions but each threshold can be disabled, which the
brute-force oracle tests rely on.

Transmittance is accumulated in log space (exclusive cumulative sum of
log(1 - alpha)), which is exact to rounding because clamped alphas stay
strictly below 1.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

import dgsplat.autodiff as ad
from dgsplat.autodiff import DTensor, NumericError
from dgsplat.camera import Camera
from dgsplat.gaussians import GaussianView, assemble_covariance


@dataclass(frozen=True)
class RenderSettings:
    """Compositing knobs; ``None`` disables the corresponding threshold."""

    alpha_clamp: float | None = 0.99
    skip_threshold: float | None = 1.0 / 255.0
    early_exit_transmittance: float | None = 1e-4
    dilation: float = 0.3           # px^2 added to cov2d diagonal
    background: tuple = (0.0, 0.0, 0.0)

    @staticmethod
    def exact() -> "RenderSettings":
        """All thresholds off: the configuration the oracle tests compare."""
        return RenderSettings(alpha_clamp=None, skip_threshold=None,
                              early_exit_transmittance=None)


@dataclass
class Projected2DGaussians:
    """Screen-space Gaussians surviving the near-plane cull, depth sorted.

    ``indices`` maps each row back to the input Gaussian.  ``inv_*`` are the
    entries of the 2x2 inverse covariance [[inv_a, inv_b], [inv_b, inv_c]].
    """

    mean_x: DTensor
    mean_y: DTensor
    cov_a: DTensor
    cov_b: DTensor
    cov_c: DTensor
    inv_a: DTensor
    inv_b: DTensor
    inv_c: DTensor
    depth: DTensor
    opacity: DTensor
    colors: DTensor
    indices: np.ndarray

    @property
    def n(self) -> int:
        return len(self.indices)


@dataclass
class RenderedImage:
    """Composited color (H,W,3) and final per-pixel transmittance (H,W)."""

    color: DTensor
    transmittance: DTensor

    def array(self) -> np.ndarray:
        """Display/metric view: color clipped to [0, 1]."""
        return np.clip(self.color.data, 0.0, 1.0)


def _check_finite(view: GaussianView) -> None:
    for name in ("positions", "rot_quats", "log_scales", "opacity_logits", "colors"):
        data = getattr(view, name).data
        bad = ~np.isfinite(data).reshape(data.shape[0], -1).all(axis=1)
        if bad.any():
            raise NumericError(f"Gaussian {int(np.nonzero(bad)[0][0])} has non-finite {name}")


def project(view: GaussianView, cam: Camera,
            settings: RenderSettings = RenderSettings()) -> Projected2DGaussians:
    """Project to screen space, cull behind the near plane, sort by depth."""
    _check_finite(view)
    rot = DTensor(cam.rotation)
    xc = ad.add(ad.matmul(view.positions, ad.transpose(rot, (1, 0))),
                DTensor(cam.translation))                      # (N,3) camera frame
    depth_all = xc.data[:, 2]
    keep = np.nonzero(depth_all > cam.near)[0]
    order = keep[np.argsort(depth_all[keep], kind="stable")]

    if order.size == 0:
        empty = DTensor(np.zeros(0))
        return Projected2DGaussians(empty, empty, empty, empty, empty, empty,
                                    empty, empty, empty, empty,
                                    DTensor(np.zeros((0, 3))), order)

    xc = ad.take(xc, order, axis=0)
    x = ad.take(xc, 0, axis=1)
    y = ad.take(xc, 1, axis=1)
    z = ad.take(xc, 2, axis=1)
    inv_z = ad.div(1.0, z)
    mean_x = ad.add(ad.scale(ad.mul(x, inv_z), cam.fx), cam.cx)
    mean_y = ad.add(ad.scale(ad.mul(y, inv_z), cam.fy), cam.cy)

    cov3 = assemble_covariance(ad.take(view.rot_quats, order, axis=0),
                               ad.take(view.log_scales, order, axis=0))
    cov_cam = ad.matmul(ad.matmul(rot, cov3), ad.transpose(rot, (1, 0)))

    # Projection Jacobian at the center: rows [fx/z, 0, -fx x/z^2],
    # [0, fy/z, -fy y/z^2]; assembled as (N,2,3).
    zero = DTensor(np.zeros(order.size))
    inv_z2 = ad.mul(inv_z, inv_z)
    j = ad.reshape(
        ad.stack([
            ad.scale(inv_z, cam.fx), zero, ad.scale(ad.mul(x, inv_z2), -cam.fx),
            zero, ad.scale(inv_z, cam.fy), ad.scale(ad.mul(y, inv_z2), -cam.fy),
        ], axis=-1),
        (order.size, 2, 3),
    )
    cov2 = ad.matmul(ad.matmul(j, cov_cam), ad.transpose(j, (0, 2, 1)))
    flat = ad.reshape(cov2, (order.size, 4))
    cov_a = ad.add(ad.take(flat, 0, axis=1), settings.dilation)
    cov_b = ad.take(flat, 1, axis=1)
    cov_c = ad.add(ad.take(flat, 3, axis=1), settings.dilation)

    det = ad.sub(ad.mul(cov_a, cov_c), ad.mul(cov_b, cov_b))
    inv_a = ad.div(cov_c, det)
    inv_b = ad.negate(ad.div(cov_b, det))
    inv_c = ad.div(cov_a, det)

    return Projected2DGaussians(
        mean_x=mean_x, mean_y=mean_y,
        cov_a=cov_a, cov_b=cov_b, cov_c=cov_c,
        inv_a=inv_a, inv_b=inv_b, inv_c=inv_c,
        depth=z,
        opacity=ad.take(ad.sigmoid(view.opacity_logits), order, axis=0),
        colors=ad.take(view.colors, order, axis=0),
        indices=order,
    )


_PIXEL_CACHE: dict = {}


def _pixel_grid(width: int, height: int):
    key = (width, height)
    if key not in _PIXEL_CACHE:
        ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                             np.arange(width, dtype=np.float64), indexing="ij")
        _PIXEL_CACHE[key] = (xs.reshape(-1, 1), ys.reshape(-1, 1))
    return _PIXEL_CACHE[key]


try:  # jit-compiled per-pixel loops; the numpy fused path is the fallback
    from dgsplat._composite_jit import composite_backward, composite_forward
    _HAVE_JIT = True
except ImportError:  # pragma: no cover - numba not installed
    _HAVE_JIT = False

use_jit_composite = True


def _composite_jit(proj: Projected2DGaussians, px, py, settings: RenderSettings):
    """Same contract as ``_composite`` but via compiled sequential loops.

    Backward recomputes the per-pixel forward sweep instead of retaining
    (pixels x Gaussians) intermediates.
    """
    mx, my = proj.mean_x, proj.mean_y
    ia, ib, ic = proj.inv_a, proj.inv_b, proj.inv_c
    op, colors = proj.opacity, proj.colors
    flags_and_args = (
        px[:, 0], py[:, 0], mx.data, my.data, ia.data, ib.data, ic.data,
        op.data, colors.data,
        -1.0 if settings.alpha_clamp is None else settings.alpha_clamp,
        -1.0 if settings.skip_threshold is None else settings.skip_threshold,
        -1.0 if settings.early_exit_transmittance is None
        else settings.early_exit_transmittance,
    )
    color, total_log = composite_forward(*flags_and_args)

    inputs = (mx, my, ia, ib, ic, op, colors)
    out_color = ad._wrap(color)
    out_log = ad._wrap(total_log)
    zero_c = np.zeros((px.shape[0], 3))
    zero_l = np.zeros(px.shape[0])

    def bwd_color(gc):
        return composite_backward(*flags_and_args, np.ascontiguousarray(gc), zero_l)

    def bwd_log(gl):
        return composite_backward(*flags_and_args, zero_c, np.ascontiguousarray(gl))

    ad._record(inputs, out_color, bwd_color)
    ad._record(inputs, out_log, bwd_log)
    return out_color, out_log


def _composite(proj: Projected2DGaussians, px, py, settings: RenderSettings):
    """Pixel-stage compositing as one fused tape node (plus one for the
    final log-transmittance).

    The (pixels x Gaussians) chain runs dozens of times per training step,
    so the forward math and its vector-Jacobian product are hand-written
    here instead of being built from ~15 recorded primitives.  The
    brute-force oracle and the renderer finite-difference tests pin both
    directions down.
    """
    mx, my = proj.mean_x, proj.mean_y
    ia, ib, ic = proj.inv_a, proj.inv_b, proj.inv_c
    op, colors = proj.opacity, proj.colors

    dx = px - mx.data[None, :]
    dy = py - my.data[None, :]
    quad = ia.data * dx * dx + 2.0 * ib.data * dx * dy + ic.data * dy * dy
    gauss = np.exp(-0.5 * quad)
    alpha = op.data[None, :] * gauss

    m_clamp = None
    if settings.alpha_clamp is not None:
        m_clamp = alpha <= settings.alpha_clamp
        alpha = np.minimum(alpha, settings.alpha_clamp)
    # Threshold masks are decided on forward values and enter as constants:
    # a skipped or dead contribution also contributes no gradient, exactly
    # like the sequential early-exit loop this mirrors.
    m_skip = None
    if settings.skip_threshold is not None:
        m_skip = (alpha >= settings.skip_threshold).astype(alpha.dtype)
        alpha_eff = alpha * m_skip
    else:
        alpha_eff = alpha
    one_minus = 1.0 - alpha_eff
    log_keep = np.log(one_minus)
    trans = np.exp(_excl_cumsum_np(log_keep))      # T before each Gaussian
    m_live = None
    if settings.early_exit_transmittance is not None:
        m_live = (trans >= settings.early_exit_transmittance).astype(alpha.dtype)
        weight = alpha_eff * trans * m_live
        total_log = (log_keep * m_live).sum(axis=1)
    else:
        weight = alpha_eff * trans
        total_log = log_keep.sum(axis=1)
    color = weight @ colors.data

    def grads_from_alpha_eff(ae_bar):
        """Chain an alpha_eff cotangent down to the seven projected inputs."""
        a_bar = ae_bar if m_skip is None else ae_bar * m_skip
        if m_clamp is not None:
            a_bar = a_bar * m_clamp
        g_bar = a_bar * op.data[None, :]
        o_bar = (a_bar * gauss).sum(axis=0)
        q_bar = -0.5 * g_bar * gauss
        ia_bar = (q_bar * dx * dx).sum(axis=0)
        ib_bar = (2.0 * q_bar * dx * dy).sum(axis=0)
        ic_bar = (q_bar * dy * dy).sum(axis=0)
        dx_bar = q_bar * (2.0 * ia.data * dx + 2.0 * ib.data * dy)
        dy_bar = q_bar * (2.0 * ic.data * dy + 2.0 * ib.data * dx)
        return (-dx_bar.sum(axis=0), -dy_bar.sum(axis=0),
                ia_bar, ib_bar, ic_bar, o_bar)

    inputs = (mx, my, ia, ib, ic, op, colors)
    out_color = ad._wrap(color)

    def bwd_color(gc):
        w_bar = gc @ colors.data.T
        colors_bar = weight.T @ gc
        if m_live is None:
            ae_bar = w_bar * trans
            t_bar = w_bar * alpha_eff
        else:
            ae_bar = w_bar * trans * m_live
            t_bar = w_bar * alpha_eff * m_live
        # T = exp(exclusive_cumsum(log_keep)); log_keep = log(1 - alpha_eff)
        s_bar = t_bar * trans
        l_bar = _rev_excl_cumsum_np(s_bar)
        ae_bar = ae_bar - l_bar / one_minus
        return (*grads_from_alpha_eff(ae_bar), colors_bar)

    ad._record(inputs, out_color, bwd_color)

    out_log = ad._wrap(total_log)

    def bwd_log(gl):
        l_bar = gl[:, None] if m_live is None else gl[:, None] * m_live
        ae_bar = -l_bar / one_minus
        return (*grads_from_alpha_eff(ae_bar), None)

    ad._record(inputs, out_log, bwd_log)
    return out_color, out_log


def _excl_cumsum_np(a):
    c = np.cumsum(a, axis=1)
    out = np.empty_like(c)
    out[:, 0] = 0.0
    out[:, 1:] = c[:, :-1]
    return out


def _rev_excl_cumsum_np(a):
    return _excl_cumsum_np(a[:, ::-1])[:, ::-1]


def composite_pixel(pixel_xy, proj: Projected2DGaussians,
                    settings: RenderSettings = RenderSettings()):
    """Front-to-back compositing of one pixel over the depth-sorted list.

    Plain-float reference of the per-pixel recurrence (the batched paths
    above are the production implementations): C accumulates c*alpha*T,
    T multiplies down by (1 - alpha), faint splats are skipped, and the
    loop exits once T dies.  Returns (color (3,), transmittance).
    """
    x, y = float(pixel_xy[0]), float(pixel_xy[1])
    color = np.zeros(3)
    trans = 1.0
    for n in range(proj.n):
        if settings.early_exit_transmittance is not None \
                and trans < settings.early_exit_transmittance:
            break
        dx = x - proj.mean_x.data[n]
        dy = y - proj.mean_y.data[n]
        q = (proj.inv_a.data[n] * dx * dx + 2.0 * proj.inv_b.data[n] * dx * dy
             + proj.inv_c.data[n] * dy * dy)
        alpha = proj.opacity.data[n] * np.exp(-0.5 * q)
        if settings.alpha_clamp is not None:
            alpha = min(alpha, settings.alpha_clamp)
        if settings.skip_threshold is not None and alpha < settings.skip_threshold:
            continue
        color += proj.colors.data[n] * (alpha * trans)
        trans *= 1.0 - alpha
    return color + np.asarray(settings.background) * trans, trans


def render(view: GaussianView, cam: Camera,
           settings: RenderSettings = RenderSettings()) -> RenderedImage:
    """Alpha-composite the scene into an image, differentiably."""
    proj = project(view, cam, settings)
    h, w = cam.height, cam.width
    bg = np.asarray(settings.background, dtype=np.float64)

    if proj.n == 0:
        color = np.broadcast_to(bg, (h, w, 3)).copy()
        return RenderedImage(DTensor(color), DTensor(np.ones((h, w))))

    px, py = _pixel_grid(w, h)
    if _HAVE_JIT and use_jit_composite:
        color, total_log = _composite_jit(proj, px, py, settings)
    else:
        color, total_log = _composite(proj, px, py, settings)
    trans_final = ad.exp(total_log)                               # (P,)
    if bg.any():
        color = ad.add(color, ad.mul(ad.reshape(trans_final, (-1, 1)), DTensor(bg)))
    return RenderedImage(
        color=ad.reshape(color, (h, w, 3)),
        transmittance=ad.reshape(trans_final, (h, w)),
    )


def render_motion(view: GaussianView, d_pos, cam: Camera,
                  settings: RenderSettings = RenderSettings(),
                  percentile: float = 99.0) -> RenderedImage:
    """Motion heatmap: colors replaced by |d_pos| per Gaussian.

    The absolute displacement is normalized by its ``percentile`` over the
    frame (robust to outliers) and clipped to [0, 1]; compositing is the
    standard path with original opacities.
    """
    d_pos = ad.as_dtensor(d_pos)
    mag = ad.absolute(d_pos)
    ref = float(np.percentile(mag.data, percentile))
    if ref > 0.0:
        heat = ad.clamp_max(ad.scale(mag, 1.0 / ref), 1.0)
    else:
        heat = ad.mul(mag, 0.0)  # fully static frame renders black
    return render(replace(view, colors=heat), cam, settings)
