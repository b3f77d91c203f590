"""Canonical 3D Gaussian scene representation.

Parameters are stored unconstrained (log-scales, opacity logits, raw
quaternions) and activated on use: scale = exp, opacity = sigmoid,
quaternions normalized whenever a rotation is built.  Appearance is a
plain per-Gaussian RGB triple (no view dependence).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import dgsplat.autodiff as ad
from dgsplat.autodiff import DTensor, NumericError


@dataclass
class GaussianSet:
    """N canonical Gaussians: the time-independent scene state.

    positions (N,3), rot_quats (N,4, unnormalized wxyz), log_scales (N,3),
    opacity_logits (N,), colors (N,3, RGB in [0,1]).
    """

    positions: DTensor
    rot_quats: DTensor
    log_scales: DTensor
    opacity_logits: DTensor
    colors: DTensor

    def __post_init__(self):
        n = self.positions.shape[0]
        if n < 1:
            raise ad.ContractError("GaussianSet needs at least one Gaussian")
        shapes = {
            "positions": (n, 3),
            "rot_quats": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
            "colors": (n, 3),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ad.DimensionError(f"GaussianSet.{name} has shape {got}, want {want}")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def parameters(self) -> dict[str, DTensor]:
        return {
            "gaussians.positions": self.positions,
            "gaussians.rot_quats": self.rot_quats,
            "gaussians.log_scales": self.log_scales,
            "gaussians.opacity_logits": self.opacity_logits,
            "gaussians.colors": self.colors,
        }

    def set_requires_grad(self, flag: bool = True) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag

    def view(self) -> "GaussianView":
        """Undeformed view of the canonical parameters."""
        return GaussianView(self.positions, self.rot_quats, self.log_scales,
                            self.opacity_logits, self.colors)

    @staticmethod
    def from_arrays(positions, rot_quats, log_scales, opacity_logits, colors,
                    requires_grad: bool = False) -> "GaussianSet":
        g = GaussianSet(
            DTensor(positions), DTensor(rot_quats), DTensor(log_scales),
            DTensor(opacity_logits), DTensor(colors),
        )
        if requires_grad:
            g.set_requires_grad(True)
        return g

    @staticmethod
    def random(rng: np.random.Generator, n: int, extent: float = 1.0,
               requires_grad: bool = False) -> "GaussianSet":
        """Random initialization for optimization from scratch."""
        positions = rng.uniform(-extent, extent, size=(n, 3))
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        quats += 0.1 * rng.standard_normal((n, 4))
        log_scales = np.log(rng.uniform(0.08, 0.25, size=(n, 3)) * extent)
        opacity_logits = np.full(n, _logit(0.5)) + 0.1 * rng.standard_normal(n)
        colors = rng.uniform(0.2, 0.8, size=(n, 3))
        return GaussianSet.from_arrays(positions, quats, log_scales,
                                       opacity_logits, colors, requires_grad)


@dataclass
class GaussianView:
    """Per-timestamp (possibly deformed) parameter views fed to the renderer."""

    positions: DTensor
    rot_quats: DTensor
    log_scales: DTensor
    opacity_logits: DTensor
    colors: DTensor

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass
class DeformationResidual:
    """Residuals for one time batch: d_pos (B,N,3), d_rot (B,N,4), d_scale (B,N,3)."""

    d_pos: DTensor
    d_rot: DTensor
    d_scale: DTensor

    @property
    def batch(self) -> int:
        return self.d_pos.shape[0]


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def quat_normalize(q: DTensor) -> DTensor:
    """Unit-normalize quaternions along the last axis; zero norm is an error."""
    sq = ad.sum_(ad.mul(q, q), axis=-1, keepdims=True)
    if np.any(sq.data <= 0.0) or not np.isfinite(sq.data).all():
        raise NumericError("cannot normalize quaternion with zero (or non-finite) norm")
    return ad.div(q, ad.sqrt(sq))


def quat_to_rotation(q: DTensor) -> DTensor:
    """Rotation matrices (...,3,3) from quaternions (...,4) in wxyz order.

    The quaternion is normalized first, so the map is differentiable in the
    raw (unnormalized) parameters.
    """
    qn = quat_normalize(q)
    w = ad.take(qn, 0, axis=-1)
    x = ad.take(qn, 1, axis=-1)
    y = ad.take(qn, 2, axis=-1)
    z = ad.take(qn, 3, axis=-1)

    xx, yy, zz = ad.mul(x, x), ad.mul(y, y), ad.mul(z, z)
    xy, xz, yz = ad.mul(x, y), ad.mul(x, z), ad.mul(y, z)
    wx, wy, wz = ad.mul(w, x), ad.mul(w, y), ad.mul(w, z)

    one = 1.0
    rows = [
        ad.sub(one, ad.scale(ad.add(yy, zz), 2.0)),
        ad.scale(ad.sub(xy, wz), 2.0),
        ad.scale(ad.add(xz, wy), 2.0),
        ad.scale(ad.add(xy, wz), 2.0),
        ad.sub(one, ad.scale(ad.add(xx, zz), 2.0)),
        ad.scale(ad.sub(yz, wx), 2.0),
        ad.scale(ad.sub(xz, wy), 2.0),
        ad.scale(ad.add(yz, wx), 2.0),
        ad.sub(one, ad.scale(ad.add(xx, yy), 2.0)),
    ]
    flat = ad.stack(rows, axis=-1)
    return ad.reshape(flat, (*q.shape[:-1], 3, 3))


def assemble_covariance(q: DTensor, log_s: DTensor) -> DTensor:
    """World covariance R S S^T R^T (...,3,3) from quaternion and log-scale."""
    r = quat_to_rotation(q)
    s = ad.exp(log_s)
    rs = ad.mul(r, ad.reshape(s, (*s.shape[:-1], 1, 3)))  # columns scaled
    return ad.matmul(rs, ad.transpose(rs, _swap_last_two(rs.ndim)))


def _swap_last_two(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def density_at(position, quat, log_scale, opacity, x) -> float:
    """Contribution of a single Gaussian at a world point.

    G(x) = opacity * exp(-0.5 (x-mu)^T Sigma^{-1} (x-mu)).  Plain numpy;
    this is the analysis-side counterpart of the differentiable renderer.
    """
    mu = np.asarray(position, dtype=np.float64)
    cov = assemble_covariance(DTensor(np.asarray(quat, dtype=np.float64)),
                              DTensor(np.asarray(log_scale, dtype=np.float64))).data
    d = np.asarray(x, dtype=np.float64) - mu
    maha = float(d @ np.linalg.solve(cov, d))
    return float(opacity) * float(np.exp(-0.5 * maha))


def apply_residual(g: GaussianSet, res: DeformationResidual, i: int) -> GaussianView:
    """Deformed parameter view for time-batch index i.

    positions' = mu + d_pos[i]; quats' = normalize(r + d_rot[i]);
    log_scales' = s + d_scale[i].  Opacity and color pass through untouched.
    """
    if not 0 <= i < res.batch:
        raise ad.ContractError(f"batch index {i} out of range for B={res.batch}")
    return GaussianView(
        positions=ad.add(g.positions, ad.take(res.d_pos, i, axis=0)),
        rot_quats=quat_normalize(ad.add(g.rot_quats, ad.take(res.d_rot, i, axis=0))),
        log_scales=ad.add(g.log_scales, ad.take(res.d_scale, i, axis=0)),
        opacity_logits=g.opacity_logits,
        colors=g.colors,
    )


def shifted_view(g: GaussianSet, d_pos: DTensor, d_rot: DTensor,
                 d_scale: DTensor) -> GaussianView:
    """Like apply_residual but for already-selected (N,*) residuals."""
    return GaussianView(
        positions=ad.add(g.positions, d_pos),
        rot_quats=quat_normalize(ad.add(g.rot_quats, d_rot)),
        log_scales=ad.add(g.log_scales, d_scale),
        opacity_logits=g.opacity_logits,
        colors=g.colors,
    )
