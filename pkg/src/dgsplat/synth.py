"""Synthetic dynamic scenes with exact ground truth.

Gaussians follow parametric trajectories (static, linear, orbital, or a
sudden appearance via an opacity step) and every frame is rendered from the
true states, so reconstruction experiments can measure both photometric and
trajectory-recovery error.  Generation is fully determined by the spec's
seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from dgsplat.autodiff import ContractError
from dgsplat.camera import Camera, look_at
from dgsplat.gaussians import GaussianSet
from dgsplat.render import RenderSettings, render

TRAJECTORY_KINDS = ("static", "linear", "orbital", "sudden")


@dataclass(frozen=True)
class SceneSpec:
    kinds: tuple                     # per-Gaussian trajectory kind
    seed: int = 0
    n_frames: int = 20
    image_size: int = 32
    fov_deg: float = 50.0
    camera_positions: tuple = ((0.0, 0.0, -4.0), (2.4, 0.8, -3.2))
    extent: float = 1.0              # canonical positions in [-extent, extent]^3
    scale_range: tuple = (0.07, 0.18)
    opacity_range: tuple = (0.55, 0.9)
    color_range: tuple = (0.15, 0.95)
    linear_travel: tuple = (0.5, 1.1)    # total displacement over t in [0,1]
    orbit_radius: tuple = (0.2, 0.5)
    orbit_revolutions: float = 0.75
    appearance_time: float = 0.48    # opacity step for the 'sudden' kind
    hidden_opacity: float = 0.002

    @property
    def n_gaussians(self) -> int:
        return len(self.kinds)

    def __post_init__(self):
        for k in self.kinds:
            if k not in TRAJECTORY_KINDS:
                raise ContractError(f"unknown trajectory kind '{k}'")

    def cameras(self) -> list[Camera]:
        return [look_at(p, (0.0, 0.0, 0.0), self.image_size, self.image_size,
                        fov_deg=self.fov_deg) for p in self.camera_positions]

    def to_dict(self) -> dict:
        # JSON-normalized (tuples become lists) so the echo round-trips
        # through manifests unchanged.
        return json.loads(json.dumps(asdict(self)))


@dataclass
class FrameSet:
    """T timestamps x K cameras of rendered frames (float32, [0,1])."""

    timestamps: np.ndarray           # (T,) strictly increasing in [0,1]
    cameras: list
    images: np.ndarray               # (T, K, H, W, 3) float32
    bounds: np.ndarray               # (2,3) min/max of true positions over time

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.float64)
        if t.ndim != 1 or (np.diff(t) <= 0).any():
            raise ContractError("timestamps must be strictly increasing")
        if self.images.shape[:2] != (len(t), len(self.cameras)):
            raise ContractError(
                f"images shaped {self.images.shape} do not match "
                f"T={len(t)}, K={len(self.cameras)}")
        for cam in self.cameras:
            if self.images.shape[2:4] != (cam.height, cam.width):
                raise ContractError("image size does not match camera")

    @property
    def n_frames(self) -> int:
        return len(self.timestamps)

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    def split_holdout(self, every: int = 5, offset: int = 2):
        """(train, holdout) FrameSets; every ``every``-th timestamp held out."""
        idx = np.arange(self.n_frames)
        hold = idx[idx % every == offset]
        keep = idx[idx % every != offset]
        return self._subset(keep), self._subset(hold)

    def _subset(self, idx) -> "FrameSet":
        return FrameSet(self.timestamps[idx], self.cameras,
                        self.images[idx], self.bounds)


@dataclass
class GroundTruth:
    """Exact per-frame Gaussian states, aligned with FrameSet timestamps."""

    positions: np.ndarray        # (T, N, 3)
    rot_quats: np.ndarray        # (T, N, 4)
    log_scales: np.ndarray       # (T, N, 3)
    opacity_logits: np.ndarray   # (T, N)
    colors: np.ndarray           # (N, 3)
    kinds: tuple
    spec: dict                   # spec echo

    def state_at(self, i: int) -> GaussianSet:
        return GaussianSet.from_arrays(
            self.positions[i], self.rot_quats[i], self.log_scales[i],
            self.opacity_logits[i], self.colors)

    def moving_mask(self) -> np.ndarray:
        """True for Gaussians whose position actually changes over time."""
        return np.array([k in ("linear", "orbital") for k in self.kinds])


def _logit(p):
    return np.log(p / (1.0 - p))


def generate(spec: SceneSpec, n_frames: int | None = None,
             cameras: list | None = None,
             settings: RenderSettings = RenderSettings()):
    """Build (FrameSet, GroundTruth) for a spec; deterministic in the seed."""
    t_count = n_frames if n_frames is not None else spec.n_frames
    if t_count < 2:
        raise ContractError("need at least two frames")
    cams = cameras if cameras is not None else spec.cameras()
    if not cams:
        raise ContractError("need at least one camera")
    rng = np.random.default_rng(spec.seed)
    n = spec.n_gaussians

    base_pos = rng.uniform(-spec.extent, spec.extent, (n, 3))
    quats = np.concatenate([np.ones((n, 1)), 0.25 * rng.standard_normal((n, 3))], axis=1)
    log_scales = np.log(rng.uniform(*spec.scale_range, (n, 3)))
    opacity = rng.uniform(*spec.opacity_range, n)
    colors = rng.uniform(*spec.color_range, (n, 3))

    # Per-kind trajectory parameters.
    velocity = np.zeros((n, 3))
    orbit_u = np.zeros((n, 3))
    orbit_v = np.zeros((n, 3))
    orbit_r = np.zeros(n)
    orbit_phase = np.zeros(n)
    for k in range(n):
        kind = spec.kinds[k]
        if kind == "linear":
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            travel = rng.uniform(*spec.linear_travel) * spec.extent
            velocity[k] = direction * travel
            base_pos[k] -= 0.5 * velocity[k]  # center the path in the volume
        elif kind == "orbital":
            a = rng.standard_normal(3)
            a /= np.linalg.norm(a)
            b = np.cross(a, rng.standard_normal(3))
            b /= np.linalg.norm(b)
            orbit_u[k], orbit_v[k] = a, b
            orbit_r[k] = rng.uniform(*spec.orbit_radius) * spec.extent
            orbit_phase[k] = rng.uniform(0, 2 * np.pi)

    timestamps = np.arange(t_count, dtype=np.float64) / (t_count - 1)
    positions = np.empty((t_count, n, 3))
    opacity_logits = np.empty((t_count, n))
    for i, t in enumerate(timestamps):
        ang = 2 * np.pi * spec.orbit_revolutions * t + orbit_phase
        positions[i] = (
            base_pos
            + velocity * t
            + orbit_r[:, None] * (np.cos(ang)[:, None] * orbit_u
                                  + np.sin(ang)[:, None] * orbit_v)
        )
        op = opacity.copy()
        for k in range(n):
            if spec.kinds[k] == "sudden" and t < spec.appearance_time:
                op[k] = spec.hidden_opacity
        opacity_logits[i] = _logit(op)

    gt = GroundTruth(
        positions=positions,
        rot_quats=np.broadcast_to(quats, (t_count, n, 4)).copy(),
        log_scales=np.broadcast_to(log_scales, (t_count, n, 3)).copy(),
        opacity_logits=opacity_logits,
        colors=colors,
        kinds=tuple(spec.kinds),
        spec=spec.to_dict(),
    )

    images = np.empty((t_count, len(cams), cams[0].height, cams[0].width, 3),
                      dtype=np.float32)
    for i in range(t_count):
        state = gt.state_at(i).view()
        for j, cam in enumerate(cams):
            images[i, j] = render(state, cam, settings).array().astype(np.float32)

    lo = positions.reshape(-1, 3).min(axis=0)
    hi = positions.reshape(-1, 3).max(axis=0)
    frames = FrameSet(timestamps=timestamps, cameras=cams, images=images,
                      bounds=np.stack([lo, hi]))
    return frames, gt


def standard_scene() -> SceneSpec:
    """The fixture scene: 50 Gaussians, 20 frames, 2 cameras, 32x32 images.

    Mixture of static, linear, and orbital motion plus one sudden-appearance
    Gaussian, under a fixed seed.
    """
    kinds = (["static"] * 24 + ["linear"] * 13 + ["orbital"] * 12 + ["sudden"])
    return SceneSpec(kinds=tuple(kinds), seed=20240, n_frames=20, image_size=32)
