"""The aggregated finite-difference suite behind the ``gradcheck`` command.

Covers every diffcore primitive (h=1e-5, tol 1e-6) and the end-to-end
paths: deformation field, one encoder layer, the full encoder, the
renderer in a clamp-safe configuration, and the complete two-stream loss
(tol 1e-4, with the probe step adapted to each composition's depth).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import dgsplat.autodiff as ad
from dgsplat.autodiff import DTensor, fd_check
from dgsplat.deform import DeformationField, encode
from dgsplat.encoder import CrossTimeEncoder, EncoderConfig
from dgsplat.gaussians import GaussianSet
from dgsplat.render import RenderSettings, render
from dgsplat.synth import SceneSpec, generate
from dgsplat.train import TrainConfig, init_state, sample_batch, two_stream_loss


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        mark = "ok  " if self.passed else "FAIL"
        return f"{mark}  {self.name:28s} max rel err {self.max_rel_err:.3e}  (tol {self.tol:.0e})"


def _weighted_sum(op, rng, x):
    w = DTensor(rng.standard_normal(op(x).shape))  # frozen: f must stay pure
    return lambda t: ad.sum_(ad.mul(op(t), w))


def _primitive_checks(seeds=range(3)) -> list:
    cases = {
        "add": ((3, 4), (-1, 1), lambda x, o: ad.add(x, o)),
        "sub": ((3, 4), (-1, 1), lambda x, o: ad.sub(o, x)),
        "mul": ((3, 4), (-1, 1), lambda x, o: ad.mul(x, o)),
        "div": ((3, 4), (0.5, 2.0), lambda x, o: ad.div(o, x)),
        "negate": ((3, 4), (-1, 1), lambda x, o: ad.negate(x)),
        "scale": ((3, 4), (-1, 1), lambda x, o: ad.scale(x, 1.7)),
        "exp": ((3, 4), (-1, 1), lambda x, o: ad.exp(x)),
        "log": ((3, 4), (0.5, 2.0), lambda x, o: ad.log(x)),
        "sqrt": ((3, 4), (0.5, 2.0), lambda x, o: ad.sqrt(x)),
        "tanh": ((3, 4), (-2, 2), lambda x, o: ad.tanh(x)),
        "sigmoid": ((3, 4), (-2, 2), lambda x, o: ad.sigmoid(x)),
        "sin": ((3, 4), (-3, 3), lambda x, o: ad.sin(x)),
        "cos": ((3, 4), (-3, 3), lambda x, o: ad.cos(x)),
        "absolute": ((3, 4), (0.2, 1.0), lambda x, o: ad.absolute(x)),
        "clamp_max": ((3, 4), (-1, 0.4), lambda x, o: ad.clamp_max(x, 0.5)),
        "sum": ((3, 4), (-1, 1), lambda x, o: ad.sum_(x, axis=1, keepdims=True)),
        "reshape": ((3, 4), (-1, 1), lambda x, o: ad.reshape(x, (2, 6))),
        "transpose": ((2, 3, 4), (-1, 1), lambda x, o: ad.transpose(x, (2, 0, 1))),
        "broadcast_to": ((1, 4), (-1, 1), lambda x, o: ad.broadcast_to(x, (3, 4))),
        "concat": ((3, 4), (-1, 1), lambda x, o: ad.concat([x, x], axis=1)),
        "stack": ((3, 4), (-1, 1), lambda x, o: ad.stack([x, x], axis=0)),
        "take": ((5, 3), (-1, 1), lambda x, o: ad.take(x, [0, 4, 0], axis=0)),
        "exclusive_cumsum": ((3, 5), (-1, 1), lambda x, o: ad.exclusive_cumsum(x, axis=1)),
        "softmax": ((3, 5), (-2, 2), lambda x, o: ad.softmax(x, axis=1)),
        "matmul": ((3, 4), (-1, 1), None),
        "layer_norm": ((3, 6), (-1, 1), None),
    }
    results = []
    for name, (shape, (lo, hi), op) in cases.items():
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng(7000 + seed)
            x = DTensor(rng.uniform(lo, hi, shape), requires_grad=True)
            if name == "matmul":
                other = DTensor(rng.standard_normal((shape[1], 2)))
                f = _weighted_sum(lambda t: ad.matmul(t, other), rng, x)
            elif name == "layer_norm":
                gain = DTensor(rng.uniform(0.5, 1.5, shape[-1]))
                bias = DTensor(rng.uniform(-0.5, 0.5, shape[-1]))
                f = _weighted_sum(lambda t: ad.layer_norm(t, gain, bias), rng, x)
            else:
                other = DTensor(rng.uniform(0.5, 1.5, shape))
                f = _weighted_sum(lambda t, o=other: op(t, o), rng, x)
            worst = max(worst, fd_check(f, x, h=1e-5, tol=1e-6).max_rel_err)
        results.append(CheckResult(f"primitive.{name}", worst, 1e-6))
    return results


def _deform_check() -> CheckResult:
    rng = np.random.default_rng(42)
    field = DeformationField(rng, depth=3, width=32)
    for k, p in field.params.items():
        if k.startswith("head"):
            p.data[...] = 0.2 * rng.standard_normal(p.shape)
    mu = DTensor(rng.uniform(-0.5, 0.5, (3, 3)), requires_grad=True)
    w = DTensor(rng.standard_normal((3, 3)))

    def f(m):
        d_pos, d_rot, _ = field.deform(m, 0.4)
        return ad.add(ad.sum_(ad.mul(d_pos, w)), ad.sum_(d_rot))

    return CheckResult("deformation_field", fd_check(f, mu, h=1e-5).max_rel_err, 1e-4)


def _encoder_layer_check() -> CheckResult:
    rng = np.random.default_rng(43)
    enc = CrossTimeEncoder(rng, EncoderConfig(n_layers=1, d_hidden=64))
    x = DTensor(rng.standard_normal((3, 2, 48)) * 0.5, requires_grad=True)
    w = DTensor(rng.standard_normal((3, 2, 48)))
    f = lambda t: ad.sum_(ad.mul(enc.layer_forward(t, 0), w))
    return CheckResult("encoder_layer", fd_check(f, x, h=1e-5).max_rel_err, 1e-4)


def _encoder_full_check() -> CheckResult:
    rng = np.random.default_rng(44)
    enc = CrossTimeEncoder(rng, EncoderConfig(n_layers=2, d_hidden=64))
    enc.params["head_w"].data[...] = 0.2 * rng.standard_normal((48, 3))
    mu = DTensor(rng.uniform(-0.5, 0.5, (2, 3)), requires_grad=True)
    ts = DTensor(rng.uniform(0, 1, 2))
    w = DTensor(rng.standard_normal((2, 2, 3)))
    f = lambda t: ad.sum_(ad.mul(enc.offsets(t, ts), w))
    return CheckResult("encoder_full", fd_check(f, mu, h=1e-5).max_rel_err, 1e-4)


def _renderer_checks() -> list:
    rng = np.random.default_rng(45)
    g = GaussianSet.random(rng, 3)
    g.opacity_logits.data[...] = rng.uniform(0.2, 1.5, 3)
    g.log_scales.data[...] = np.log(rng.uniform(0.15, 0.4, (3, 3)))
    from dgsplat.camera import look_at
    cam = look_at([0, 0, -4], [0, 0, 0], 12, 12, fov_deg=60)
    exact = RenderSettings.exact()  # clamp-safe: thresholds off

    results = []
    for field in ("positions", "rot_quats", "log_scales", "opacity_logits", "colors"):
        def f(t, field=field):
            view = g.view()
            setattr(view, field, t)
            return ad.mean(render(view, cam, exact).color)
        err = fd_check(f, getattr(g, field), h=1e-5).max_rel_err
        results.append(CheckResult(f"renderer.{field}", err, 1e-4))
    return results


def _two_stream_check() -> CheckResult:
    frames, _ = generate(SceneSpec(kinds=("static", "linear"), seed=3,
                                   n_frames=6, image_size=8))
    cfg = TrainConfig(iterations=1, time_batch=2, n_gaussians=2, deform_depth=2,
                      deform_width=16, encoder_layers=1, encoder_hidden=32,
                      render=RenderSettings.exact())
    state = init_state(frames, cfg)
    rng = np.random.default_rng(46)
    for k, p in state.deform.params.items():
        if k.startswith("head"):
            p.data[...] = 0.05 * rng.standard_normal(p.shape)
    state.encoder.params["head_w"].data[...] = 0.05 * rng.standard_normal((48, 3))
    batch = sample_batch(frames, 2, "random", np.random.default_rng(4))
    f = lambda _pos: two_stream_loss(state, batch)[2]
    # Deep double-encoded composition: probe at h=1e-6 (see encoder tests).
    err = fd_check(f, state.gaussians.positions, h=1e-6).max_rel_err
    return CheckResult("two_stream_loss", err, 1e-4)


def run_gradcheck(verbose: bool = True) -> list:
    """Run every check; returns the list of CheckResults."""
    results = _primitive_checks()
    results.append(_deform_check())
    results.append(_encoder_layer_check())
    results.append(_encoder_full_check())
    results.extend(_renderer_checks())
    results.append(_two_stream_check())
    if verbose:
        for r in results:
            print(r.line())
        failed = [r for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return results
