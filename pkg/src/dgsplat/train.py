"""Two-stream training with a shared deformation field.

Each step samples a time batch, renders the plain branch (canonical
positions into the deformation field) and the encoder branch (positions
first shifted by the cross-time offsets) against the same ground-truth
frames, combines the two L1 losses with (lambda_c, lambda_t), and runs one
Adam update over all parameter groups.  Inference uses the plain branch
only; the encoder never executes outside training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

import dgsplat.autodiff as ad
from dgsplat.autodiff import ContractError, DTensor, NumericError, Tape
from dgsplat.deform import DeformationField
from dgsplat.encoder import CrossTimeEncoder, EncoderConfig
from dgsplat.gaussians import GaussianSet, shifted_view
from dgsplat.metrics import MetricReport, per_frame_curve
from dgsplat.optim import Adam
from dgsplat.render import RenderSettings, RenderedImage, render
from dgsplat.synth import FrameSet

SAMPLING_STRATEGIES = ("random", "continuous")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    time_batch: int = 4
    lambda_c: float = 1.0
    lambda_t: float = 0.8
    sampling: str = "random"
    seed: int = 0
    encoder_enabled: bool = True
    shared_weights: bool = True
    # Alternative reading of the aux branch where the encoder offset also
    # shifts the rendered position (off by default; see render path).
    offset_in_render: bool = False
    n_gaussians: int = 50
    pe_octaves: int = 6
    deform_depth: int = 6
    deform_width: int = 128
    encoder_layers: int = 4
    encoder_heads: int = 4
    encoder_hidden: int = 192
    lr_positions: float = 1.6e-4   # scaled by scene extent at init
    lr_colors: float = 2.5e-3
    lr_opacities: float = 0.05
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_deform: float = 1.6e-3
    lr_encoder: float = 1.6e-4
    lr_decay: float = 0.1
    render: RenderSettings = field(default_factory=RenderSettings)

    def __post_init__(self):
        if self.time_batch < 1:
            raise ContractError("time_batch must be >= 1")
        if self.sampling not in SAMPLING_STRATEGIES:
            raise ContractError(f"unknown sampling strategy '{self.sampling}'")
        if self.encoder_enabled and not (self.lambda_c > self.lambda_t > 0):
            raise ContractError(
                f"need lambda_c > lambda_t > 0, got {self.lambda_c}, {self.lambda_t}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["render"]["background"] = list(d["render"]["background"])
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        rs = d.pop("render", {})
        rs = dict(rs)
        if "background" in rs:
            rs["background"] = tuple(rs["background"])
        return TrainConfig(render=RenderSettings(**rs), **d)


@dataclass
class TimeBatch:
    """B sampled timestamps with their cameras and ground-truth frames."""

    t_indices: np.ndarray
    timestamps: np.ndarray
    cam_indices: np.ndarray
    cameras: list
    images: np.ndarray     # (B, H, W, 3)


def sample_batch(frames: FrameSet, b: int, strategy: str,
                 rng: np.random.Generator) -> TimeBatch:
    """Draw a time batch; 'random' is without replacement, 'continuous' is a
    uniformly placed run of consecutive frames."""
    t_count = frames.n_frames
    if b > t_count:
        raise ContractError(f"batch size {b} exceeds {t_count} available frames")
    if strategy == "random":
        t_idx = rng.choice(t_count, size=b, replace=False)
    elif strategy == "continuous":
        start = int(rng.integers(0, t_count - b + 1))
        t_idx = np.arange(start, start + b)
    else:
        raise ContractError(f"unknown sampling strategy '{strategy}'")
    cam_idx = rng.integers(0, frames.n_cameras, size=b)
    return TimeBatch(
        t_indices=t_idx,
        timestamps=frames.timestamps[t_idx],
        cam_indices=cam_idx,
        cameras=[frames.cameras[int(j)] for j in cam_idx],
        images=frames.images[t_idx, cam_idx],
    )


@dataclass
class TrainState:
    config: TrainConfig
    gaussians: GaussianSet
    deform: DeformationField
    deform_aux: DeformationField        # identical object when shared_weights
    encoder: CrossTimeEncoder | None
    optimizer: Adam
    rng: np.random.Generator
    iteration: int = 0
    loss_history: list = field(default_factory=list)   # (L_c, L_t) per step
    wall_times: list = field(default_factory=list)

    @property
    def shared_storage(self) -> bool:
        return self.deform_aux is self.deform

    def parameters(self) -> dict[str, DTensor]:
        params = dict(self.gaussians.parameters())
        params.update({f"deform.{k}": v for k, v in self.deform.parameters().items()})
        if not self.shared_storage:
            params.update({f"deform_aux.{k}": v
                           for k, v in self.deform_aux.parameters().items()})
        if self.encoder is not None:
            params.update({f"encoder.{k}": v
                           for k, v in self.encoder.parameters().items()})
        return params


def init_state(frames: FrameSet, config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(config.seed)
    lo, hi = frames.bounds
    center = (lo + hi) / 2.0
    extent = float(max(np.max(hi - lo) / 2.0, 1e-3))

    gaussians = GaussianSet.random(rng, config.n_gaussians, extent=extent)
    gaussians.positions.data += center
    gaussians.set_requires_grad(True)

    deform = DeformationField(rng, octaves=config.pe_octaves,
                              depth=config.deform_depth, width=config.deform_width)
    deform_aux = deform
    encoder = None
    if config.encoder_enabled:
        encoder = CrossTimeEncoder(rng, EncoderConfig(
            n_layers=config.encoder_layers, n_heads=config.encoder_heads,
            octaves=config.pe_octaves, d_hidden=config.encoder_hidden,
            time_batch=config.time_batch))
        if not config.shared_weights:
            deform_aux = deform.copy()

    groups = [
        ("gaussians.positions", gaussians.positions, config.lr_positions * extent),
        ("gaussians.rot_quats", gaussians.rot_quats, config.lr_rotations),
        ("gaussians.log_scales", gaussians.log_scales, config.lr_scales),
        ("gaussians.opacity_logits", gaussians.opacity_logits, config.lr_opacities),
        ("gaussians.colors", gaussians.colors, config.lr_colors),
    ]
    groups += [(f"deform.{k}", p, config.lr_deform)
               for k, p in deform.parameters().items()]
    if deform_aux is not deform:
        groups += [(f"deform_aux.{k}", p, config.lr_deform)
                   for k, p in deform_aux.parameters().items()]
    if encoder is not None:
        groups += [(f"encoder.{k}", p, config.lr_encoder)
                   for k, p in encoder.parameters().items()]
    optimizer = Adam(groups, decay=config.lr_decay, decay_steps=config.iterations)
    return TrainState(config=config, gaussians=gaussians, deform=deform,
                      deform_aux=deform_aux, encoder=encoder,
                      optimizer=optimizer, rng=rng)


def _branch1_image(state: TrainState, t, cam) -> RenderedImage:
    """Plain-branch render; the single code path shared by training and
    inference, so the two are bit-identical by construction."""
    d_pos, d_rot, d_scale = state.deform.deform(state.gaussians.positions, t)
    view = shifted_view(state.gaussians, d_pos, d_rot, d_scale)
    return render(view, cam, state.config.render)


def _branch2_image(state: TrainState, offsets_i: DTensor, t, cam) -> RenderedImage:
    """Encoder-branch render: the offset shifts the deformation input; the
    rendered position stays mu + d_pos unless offset_in_render is set."""
    a = ad.add(state.gaussians.positions, offsets_i)
    d_pos, d_rot, d_scale = state.deform_aux.deform(a, t)
    if state.config.offset_in_render:
        d_pos = ad.add(d_pos, offsets_i)
    view = shifted_view(state.gaussians, d_pos, d_rot, d_scale)
    return render(view, cam, state.config.render)


def two_stream_loss(state: TrainState, batch: TimeBatch) -> tuple:
    """Taped losses for one batch: (loss_c, loss_t | None, combined loss).

    Offsets are computed once for the whole batch and indexed per timestamp
    inside the loop; batch losses are averaged over B so learning rates do
    not depend on the batch size.
    """
    cfg = state.config
    b = len(batch.timestamps)
    ts = DTensor(batch.timestamps)
    offsets = None
    if cfg.encoder_enabled:
        offsets = state.encoder.offsets(state.gaussians.positions, ts)
    lc_terms = []
    lt_terms = []
    for i in range(b):
        t_i = ad.take(ts, i, axis=0)
        gt = DTensor(batch.images[i])
        if gt.shape != (batch.cameras[i].height, batch.cameras[i].width, 3):
            raise ContractError(
                f"frame {i} shaped {gt.shape} does not match its camera")
        img1 = _branch1_image(state, t_i, batch.cameras[i])
        lc_terms.append(ad.l1_loss(img1.color, gt))
        if cfg.encoder_enabled:
            img2 = _branch2_image(state, ad.take(offsets, i, axis=0),
                                  t_i, batch.cameras[i])
            lt_terms.append(ad.l1_loss(img2.color, gt))
    loss_c = ad.scale(_sum_terms(lc_terms), 1.0 / b)
    if cfg.encoder_enabled:
        loss_t = ad.scale(_sum_terms(lt_terms), 1.0 / b)
        loss = ad.add(ad.scale(loss_c, cfg.lambda_c), ad.scale(loss_t, cfg.lambda_t))
    else:
        loss_t = None
        loss = ad.scale(loss_c, cfg.lambda_c)
    return loss_c, loss_t, loss


def train_step(state: TrainState, batch: TimeBatch) -> tuple:
    """One two-stream optimization step; returns (L_c, L_t, L) as floats."""
    state.optimizer.zero_grad()
    tape = Tape()
    with tape:
        loss_c, loss_t, loss = two_stream_loss(state, batch)
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite loss at iteration {state.iteration}")
    tape.backward(loss)
    state.optimizer.step()

    lc = loss_c.item()
    lt = loss_t.item() if loss_t is not None else float("nan")
    state.iteration += 1
    state.loss_history.append((lc, lt))
    return lc, lt, loss.item()


def _sum_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def train(frames: FrameSet, config: TrainConfig,
          state: TrainState | None = None, stop_at: int | None = None,
          log_every: int = 0) -> TrainState:
    """Run (or resume) training to ``config.iterations`` steps.

    ``stop_at`` pauses earlier without touching the learning-rate schedule,
    which stays pinned to config.iterations; a paused-and-resumed run is
    bit-identical to an uninterrupted one.
    """
    if state is None:
        state = init_state(frames, config)
    target = config.iterations if stop_at is None else min(stop_at, config.iterations)
    while state.iteration < target:
        batch = sample_batch(frames, config.time_batch, config.sampling, state.rng)
        t0 = time.perf_counter()
        lc, lt, loss = train_step(state, batch)
        state.wall_times.append(time.perf_counter() - t0)
        if log_every and state.iteration % log_every == 0:
            print(f"step {state.iteration:5d}  L_c {lc:.5f}  L_t {lt:.5f}")
    return state


def inference_render(state: TrainState, t: float, cam) -> RenderedImage:
    """Deployed path: plain branch only, no encoder evaluation anywhere."""
    return _branch1_image(state, float(t), cam)


def evaluate(state: TrainState, frames: FrameSet) -> MetricReport:
    return per_frame_curve(
        lambda t, cam: inference_render(state, t, cam).array(), frames)


def ablate(frames: FrameSet, grid: dict, config: TrainConfig,
           seeds=(0, 1, 2), holdout_every: int = 5, holdout_offset: int = 2):
    """Train every grid configuration per seed; evaluate on held-out frames.

    ``grid`` maps TrainConfig field names to lists of values.  Returns
    (header, rows) ready for CSV; one row per (configuration, seed).
    """
    import itertools

    train_fs, hold_fs = frames.split_holdout(every=holdout_every, offset=holdout_offset)
    keys = sorted(grid)
    header = keys + ["seed", "psnr", "ssim"]
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        for seed in seeds:
            cfg = replace(config, seed=seed, **overrides)
            result = train(train_fs, cfg)
            report = evaluate(result, hold_fs)
            rows.append(list(combo) + [seed, report.mean_psnr, report.mean_ssim])
    return header, rows


# ---------------------------------------------------------------------------
# Checkpoint payloads (binary layout lives in dataio)


def checkpoint_payload(state: TrainState):
    meta = {
        "precision": 64 if ad.get_default_dtype() == np.float64 else 32,
        "iteration": state.iteration,
        "optimizer_step": state.optimizer.step_count,
        "config": state.config.to_dict(),
        "rng_state": _rng_state_to_json(state.rng),
        # Effective base rates (the position rate is extent-scaled at init,
        # so it cannot be rederived from the config alone).
        "group_lrs": {n: lr for n, _, lr in state.optimizer.groups},
    }
    arrays = {name: p.data for name, p in state.parameters().items()}
    arrays.update(state.optimizer.state_arrays())
    arrays["history.loss"] = np.array(state.loss_history, dtype=np.float64).reshape(-1, 2)
    arrays["history.wall"] = np.array(state.wall_times, dtype=np.float64)
    return meta, arrays


def state_from_payload(meta: dict, arrays: dict) -> TrainState:
    config = TrainConfig.from_dict(meta["config"])
    # Rebuild with a throwaway seed, then overwrite every array bit-exactly.
    shell_frames = _bounds_only_frameset(arrays)
    state = init_state(shell_frames, config)
    for name, p in state.parameters().items():
        if arrays[name].shape != p.data.shape:
            raise ContractError(f"checkpoint array {name} has shape "
                                f"{arrays[name].shape}, expected {p.data.shape}")
        p.data = np.ascontiguousarray(arrays[name])
    state.optimizer.load_state_arrays(arrays, meta["optimizer_step"])
    group_lrs = meta["group_lrs"]
    state.optimizer.groups = [(n, p, float(group_lrs[n]))
                              for n, p, _ in state.optimizer.groups]
    state.iteration = int(meta["iteration"])
    state.loss_history = [tuple(row) for row in arrays["history.loss"]]
    state.wall_times = list(arrays["history.wall"])
    state.rng = _rng_from_json(meta["rng_state"])
    return state


def _bounds_only_frameset(arrays) -> FrameSet:
    # init_state only reads frames.bounds; synthesize a stub around the
    # checkpointed positions (values are replaced right after).
    from dgsplat.camera import look_at
    pos = arrays["gaussians.positions"]
    lo, hi = pos.min(axis=0) - 0.5, pos.max(axis=0) + 0.5
    cam = look_at([0, 0, -4], [0, 0, 0], 4, 4)
    return FrameSet(np.array([0.0, 1.0]), [cam],
                    np.zeros((2, 1, 4, 4, 3), np.float32), np.stack([lo, hi]))


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {k: int(v) for k, v in st["state"].items()},
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"])}


def _rng_from_json(d: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": d["bit_generator"],
        "state": {k: int(v) for k, v in d["state"].items()},
        "has_uint32": int(d["has_uint32"]),
        "uinteger": int(d["uinteger"]),
    }
    return rng
