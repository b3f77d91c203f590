"""Brute-force per-pixel compositing oracle.

Independent of the production renderer: plain python loops over pixels and
Gaussians, explicit matrix formulas, np.linalg for the 2x2 inverse, running
transmittance product.  No thresholds, ever.
"""

import numpy as np


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _quat_rot(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def oracle_render(positions, quats, log_scales, opacity_logits, colors, cam,
                  dilation=0.3, background=(0.0, 0.0, 0.0)):
    """Returns (H,W,3) color and (H,W) transmittance."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    splats = []
    for k in range(n):
        xc = cam.rotation @ positions[k] + cam.translation
        if xc[2] <= cam.near:
            continue
        x, y, z = xc
        r = _quat_rot(quats[k])
        s = np.exp(np.asarray(log_scales[k], dtype=np.float64))
        cov3 = r @ np.diag(s ** 2) @ r.T
        cov_cam = cam.rotation @ cov3 @ cam.rotation.T
        jac = np.array([
            [cam.fx / z, 0.0, -cam.fx * x / z ** 2],
            [0.0, cam.fy / z, -cam.fy * y / z ** 2],
        ])
        cov2 = jac @ cov_cam @ jac.T + dilation * np.eye(2)
        splats.append({
            "z": z,
            "mx": cam.fx * x / z + cam.cx,
            "my": cam.fy * y / z + cam.cy,
            "icov": np.linalg.inv(cov2),
            "o": _sigmoid(float(opacity_logits[k])),
            "c": np.asarray(colors[k], dtype=np.float64),
        })
    splats.sort(key=lambda s: s["z"])  # python sort is stable, like the renderer

    bg = np.asarray(background, dtype=np.float64)
    img = np.zeros((cam.height, cam.width, 3))
    trans = np.ones((cam.height, cam.width))
    for i in range(cam.height):
        for j in range(cam.width):
            t = 1.0
            c = np.zeros(3)
            for s in splats:
                d = np.array([j - s["mx"], i - s["my"]])
                alpha = s["o"] * np.exp(-0.5 * d @ s["icov"] @ d)
                c = c + s["c"] * alpha * t
                t = t * (1.0 - alpha)
            img[i, j] = c + bg * t
            trans[i, j] = t
    return img, trans
