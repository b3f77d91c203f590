import numpy as np
import pytest

import dgsplat.autodiff as ad
from dgsplat.autodiff import ContractError, DTensor, Tape, fd_check
from dgsplat.dataio import load_checkpoint, save_checkpoint
from dgsplat.render import RenderSettings
from dgsplat.synth import SceneSpec, generate
from dgsplat.train import (
    TrainConfig,
    ablate,
    evaluate,
    inference_render,
    init_state,
    sample_batch,
    train,
    train_step,
    two_stream_loss,
)


def tiny_frames(seed=0, n_frames=6, image_size=10, kinds=("static", "linear")):
    return generate(SceneSpec(kinds=kinds, seed=seed, n_frames=n_frames,
                              image_size=image_size))[0]


def tiny_config(**kw):
    defaults = dict(iterations=5, time_batch=2, n_gaussians=3,
                    deform_depth=2, deform_width=16,
                    encoder_layers=1, encoder_hidden=32, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# config and sampling


def test_config_lambda_invariant():
    with pytest.raises(ContractError):
        TrainConfig(lambda_c=0.5, lambda_t=0.8)
    TrainConfig(lambda_c=0.5, lambda_t=0.8, encoder_enabled=False)  # fine


def test_config_roundtrip():
    cfg = tiny_config(render=RenderSettings.exact())
    back = TrainConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_sample_batch_exhaustive_draw_is_permutation():
    frames = tiny_frames()
    rng = np.random.default_rng(0)
    batch = sample_batch(frames, frames.n_frames, "random", rng)
    assert sorted(batch.t_indices.tolist()) == list(range(frames.n_frames))


def test_sample_batch_continuous_is_consecutive():
    frames = tiny_frames()
    rng = np.random.default_rng(1)
    for _ in range(20):
        batch = sample_batch(frames, 3, "continuous", rng)
        np.testing.assert_array_equal(np.diff(batch.t_indices), [1, 1])


def test_sample_batch_rejects_oversize():
    frames = tiny_frames()
    with pytest.raises(ContractError):
        sample_batch(frames, frames.n_frames + 1, "random", np.random.default_rng(0))


def test_sample_batch_random_uniform_chi_square():
    frames = tiny_frames(n_frames=8)
    rng = np.random.default_rng(2)
    counts = np.zeros(8)
    draws = 10_000
    for _ in range(draws):
        batch = sample_batch(frames, 2, "random", rng)
        for t in batch.t_indices:
            counts[t] += 1
    total = draws * 2
    expected = total / 8
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 7 dof: mean 7, sd sqrt(14) -> 3 sigma above mean ~= 18.2
    assert chi2 < 7 + 3 * np.sqrt(14), f"chi2 {chi2}"


def test_sample_batch_pairs_cameras_and_frames():
    frames = tiny_frames()
    rng = np.random.default_rng(3)
    batch = sample_batch(frames, 3, "random", rng)
    for k in range(3):
        np.testing.assert_array_equal(
            batch.images[k], frames.images[batch.t_indices[k], batch.cam_indices[k]])


# ---------------------------------------------------------------------------
# state construction


def test_shared_weights_single_storage():
    frames = tiny_frames()
    state = init_state(frames, tiny_config(shared_weights=True))
    assert state.deform_aux is state.deform   # identity, not value equality
    unshared = init_state(frames, tiny_config(shared_weights=False))
    assert unshared.deform_aux is not unshared.deform
    for k in unshared.deform.params:
        np.testing.assert_array_equal(unshared.deform.params[k].data,
                                      unshared.deform_aux.params[k].data)


def test_optimizer_covers_all_groups():
    frames = tiny_frames()
    state = init_state(frames, tiny_config(shared_weights=False))
    names = {n for n, _, _ in state.optimizer.groups}
    assert any(n.startswith("gaussians.") for n in names)
    assert any(n.startswith("deform.") for n in names)
    assert any(n.startswith("deform_aux.") for n in names)
    assert any(n.startswith("encoder.") for n in names)


# ---------------------------------------------------------------------------
# the step itself


def test_step0_branches_identical_bit_exact():
    frames = tiny_frames()
    state = init_state(frames, tiny_config())
    batch = sample_batch(frames, 2, "random", state.rng)
    lc, lt, loss = train_step(state, batch)
    assert lc == lt  # zero-init heads: both branches render the same image
    assert loss == pytest.approx(lc * (1.0 + 0.8), rel=1e-15)


def test_lambda_combination_exact():
    frames = tiny_frames()
    state = init_state(frames, tiny_config())
    batch = sample_batch(frames, 2, "random", state.rng)
    with Tape():
        loss_c, loss_t, loss = two_stream_loss(state, batch)
    assert loss.item() == loss_c.item() + 0.8 * loss_t.item()


def test_baseline_has_no_encoder_term():
    frames = tiny_frames()
    state = init_state(frames, tiny_config(encoder_enabled=False))
    batch = sample_batch(frames, 2, "random", state.rng)
    lc, lt, loss = train_step(state, batch)
    assert np.isnan(lt)
    assert loss == lc
    assert state.encoder is None


def test_step_decreases_loss_eventually():
    frames = tiny_frames()
    cfg = tiny_config(iterations=40)
    state = train(frames, cfg)
    first = np.mean([h[0] for h in state.loss_history[:5]])
    last = np.mean([h[0] for h in state.loss_history[-5:]])
    assert last < first


def test_full_two_stream_gradient_vs_fd():
    # N=2 Gaussians, B=2 timestamps, 8x8 frames, thresholds disabled.
    frames = tiny_frames(image_size=8)
    cfg = tiny_config(n_gaussians=2, render=RenderSettings.exact())
    state = init_state(frames, cfg)
    # Give the heads some life so both branches carry real gradients.
    rng = np.random.default_rng(9)
    for k, p in state.deform.params.items():
        if k.startswith("head"):
            p.data[...] = 0.05 * rng.standard_normal(p.shape)
    state.encoder.params["head_w"].data[...] = 0.05 * rng.standard_normal((48, 3))
    batch = sample_batch(frames, 2, "random", np.random.default_rng(4))

    def f(_pos):
        return two_stream_loss(state, batch)[2]

    r = fd_check(f, state.gaussians.positions, h=1e-6, tol=1e-4)
    assert r.passed, r


def test_training_deterministic_bit_identical():
    frames = tiny_frames()
    cfg = tiny_config(iterations=8)
    h1 = train(frames, cfg).loss_history
    h2 = train(frames, cfg).loss_history
    assert h1 == h2


def test_different_seeds_differ():
    frames = tiny_frames()
    a = train(frames, tiny_config(iterations=3, seed=0)).loss_history
    b = train(frames, tiny_config(iterations=3, seed=1)).loss_history
    assert a != b


# ---------------------------------------------------------------------------
# inference


def test_inference_matches_branch1_bitwise():
    from dgsplat.train import _branch1_image
    frames = tiny_frames()
    state = train(frames, tiny_config(iterations=5))
    for t in (0.0, 0.4, 1.0):
        a = inference_render(state, t, frames.cameras[0])
        b = _branch1_image(state, t, frames.cameras[0])
        np.testing.assert_array_equal(a.color.data, b.color.data)


def test_inference_never_calls_encoder():
    frames = tiny_frames()
    state = train(frames, tiny_config(iterations=3))
    before = state.encoder.forward_calls
    inference_render(state, 0.5, frames.cameras[0])
    inference_render(state, 0.9, frames.cameras[1])
    assert state.encoder.forward_calls == before


def test_inference_t0_zero_init_equals_canonical_render():
    from dgsplat.render import render
    frames = tiny_frames()
    state = init_state(frames, tiny_config())
    out = inference_render(state, 0.0, frames.cameras[0])
    direct = render(state.gaussians.view(), frames.cameras[0], state.config.render)
    np.testing.assert_allclose(out.color.data, direct.color.data, atol=1e-12)


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_roundtrip_state(tmp_path):
    frames = tiny_frames()
    state = train(frames, tiny_config(iterations=6))
    p = str(tmp_path / "s.ckpt")
    save_checkpoint(state, p)
    loaded = load_checkpoint(p)
    assert loaded.iteration == state.iteration
    assert loaded.loss_history == state.loss_history
    for name, param in state.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[name].data, param.data)
    assert loaded.rng.bit_generator.state == state.rng.bit_generator.state
    assert loaded.shared_storage == state.shared_storage


def test_resume_equals_uninterrupted(tmp_path):
    frames = tiny_frames()
    cfg = tiny_config(iterations=20)
    full = train(frames, cfg)

    half = train(frames, cfg, stop_at=10)
    p = str(tmp_path / "half.ckpt")
    save_checkpoint(half, p)
    resumed = train(frames, cfg, state=load_checkpoint(p))

    assert resumed.loss_history == full.loss_history
    for name, param in full.parameters().items():
        np.testing.assert_array_equal(resumed.parameters()[name].data, param.data)


def test_save_then_load_then_save_byte_identical(tmp_path):
    frames = tiny_frames()
    state = train(frames, tiny_config(iterations=4))
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(state, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_unshared_checkpoint_roundtrip(tmp_path):
    frames = tiny_frames()
    state = train(frames, tiny_config(iterations=4, shared_weights=False))
    p = str(tmp_path / "u.ckpt")
    save_checkpoint(state, p)
    loaded = load_checkpoint(p)
    assert not loaded.shared_storage
    for k in state.deform_aux.params:
        np.testing.assert_array_equal(loaded.deform_aux.params[k].data,
                                      state.deform_aux.params[k].data)


# ---------------------------------------------------------------------------
# evaluation and ablation plumbing


def test_evaluate_report_length():
    frames = tiny_frames(image_size=12)
    state = train(frames, tiny_config(iterations=3))
    report = evaluate(state, frames)
    assert len(report.psnr) == frames.n_frames


def test_ablate_degenerate_grid_matches_plain_run():
    frames = tiny_frames(n_frames=10, image_size=12)
    cfg = tiny_config(iterations=4)
    header, rows = ablate(frames, {"shared_weights": [True]}, cfg, seeds=(0,))
    assert header == ["shared_weights", "seed", "psnr", "ssim"]
    assert len(rows) == 1

    train_fs, hold_fs = frames.split_holdout(every=5, offset=2)
    direct = evaluate(train(train_fs, cfg), hold_fs)
    assert rows[0][2] == direct.mean_psnr
    assert rows[0][3] == direct.mean_ssim
