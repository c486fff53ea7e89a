"""Loss identities, Adam trajectory, and the alternating training loop."""

import numpy as np
import pytest

from martagan.autodiff import Graph, Tensor, ops
from martagan.model import ArchConfig, Discriminator, Generator
from martagan.reference import adam_reference
from martagan.train import (
    Adam,
    LossRecord,
    TrainConfig,
    TrainingDiverged,
    _FrozenParams,
    d_loss,
    g_feature_match_loss,
    g_final_loss,
    g_perceptual_loss,
    render_loss_rows,
    total_iterations,
    train,
    write_loss_csv,
)


def tiny_setup(seed=0, n=8, channels=1):
    cfg = ArchConfig(image_size=16, channels=channels, z_dim=5,
                     base_width=4, max_width=8, fusion_depth=1)
    gen = Generator(cfg, seed=seed)
    disc = Discriminator(cfg, seed=seed)
    rng = np.random.default_rng([99, seed])
    images = rng.uniform(-1, 1, size=(n, channels, 16, 16)).astype(np.float32)
    return cfg, gen, disc, images


def run_loss(fn):
    return fn().item()  # values only; gradients are covered elsewhere


# ---------------------------------------------------------------- losses

def test_d_loss_at_even_odds_is_two_log_two():
    zeros = Tensor(np.zeros(6, dtype=np.float64))
    val = run_loss(lambda: d_loss(zeros, zeros))
    assert abs(val - 2.0 * np.log(2.0)) <= 1e-9


def test_d_loss_matches_hand_formula():
    rng = np.random.default_rng(1)
    lr = rng.standard_normal(16)
    lf = rng.standard_normal(16)
    val = run_loss(lambda: d_loss(Tensor(lr), Tensor(lf)))

    def logsig(v):
        return np.where(v >= 0, -np.log1p(np.exp(-v)), v - np.log1p(np.exp(v)))

    want = -(logsig(lr).mean() + logsig(-lf).mean())
    assert abs(val - want) <= 1e-12


def test_perceptual_loss_sign_distinguishes_the_two_forms():
    lf = Tensor(np.random.default_rng(2).standard_normal(32))
    saturating = run_loss(lambda: g_perceptual_loss(lf))
    non_saturating = run_loss(lambda: g_perceptual_loss(lf, non_saturating=True))
    assert saturating < 0  # E[log(1 - D)] is a log-probability
    assert non_saturating > 0  # -E[log D] is a negative log-probability


def test_feature_match_is_zero_for_identical_statistics():
    feats = np.tile(np.arange(5.0), (4, 1))  # every row equals the mean
    val = run_loss(lambda: g_feature_match_loss(Tensor(feats), feats.mean(axis=0)))
    assert val == 0.0


def test_feature_match_matches_hand_norm():
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((6, 9))
    target = rng.standard_normal(9)
    val = run_loss(lambda: g_feature_match_loss(Tensor(feats), target))
    want = float(((feats.mean(axis=0) - target) ** 2).sum())
    assert abs(val - want) <= 1e-12


def test_final_loss_is_the_plain_sum():
    a = Tensor(np.array(0.75))
    b = Tensor(np.array(-0.25))
    assert run_loss(lambda: g_final_loss(a, b)) == 0.5


# ---------------------------------------------------------------- Adam

def test_adam_tracks_scalar_reference_for_100_steps():
    rng = np.random.default_rng(4)
    p0 = rng.standard_normal((3, 2))
    grads = [rng.standard_normal((3, 2)) for _ in range(100)]
    p = Tensor(p0.copy(), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-3, beta1=0.5, beta2=0.999, eps=1e-8)
    for g in grads:
        p.grad = g
        opt.step()
    want = adam_reference(p0, grads, lr=1e-3, beta1=0.5, beta2=0.999, eps=1e-8)
    assert np.abs(p.data - want).max() <= 1e-12


def test_adam_first_step_has_learning_rate_magnitude():
    g = np.array([0.3, -2.0, 10.0, -0.5])
    p = Tensor(np.zeros(4), requires_grad=True)
    opt = Adam({"p": p}, lr=2e-4)
    p.grad = g.copy()
    opt.step()
    # bias correction makes the very first update lr * sign(g) (up to eps)
    assert np.allclose(np.abs(p.data), 2e-4, rtol=1e-6)
    assert np.array_equal(np.sign(p.data), -np.sign(g))


def test_adam_refuses_missing_gradients():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam({"d/head/w": p})
    with pytest.raises(RuntimeError, match="d/head/w"):
        opt.step()


def test_adam_state_round_trip():
    rng = np.random.default_rng(5)
    p = Tensor(rng.standard_normal(4), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-2)
    for _ in range(3):
        p.grad = rng.standard_normal(4)
        opt.step()
    stash = {k: v.copy() for k, v in opt.state_arrays().items()}
    opt2 = Adam({"p": p}, lr=1e-2)
    opt2.load_state_arrays(stash, t=opt.t)
    assert opt2.t == 3
    assert np.array_equal(opt2.m[0], opt.m[0])
    assert np.array_equal(opt2.v[0], opt.v[0])
    with pytest.raises(ValueError, match="shape"):
        opt2.load_state_arrays({"p/adam_m": np.zeros(5), "p/adam_v": np.zeros(5)}, t=1)


# ---------------------------------------------------------------- schedule

def test_total_iterations_arithmetic():
    assert total_iterations(TrainConfig(batch_size=4, epochs=3), n_images=10) == 6
    assert total_iterations(TrainConfig(batch_size=64, epochs=2), n_images=10) == 2  # floor to 1/epoch
    assert total_iterations(TrainConfig(batch_size=4, epochs=5, max_iterations=7), n_images=8) == 7
    assert total_iterations(TrainConfig(batch_size=4, epochs=1, max_iterations=100), n_images=8) == 2


# ---------------------------------------------------------------- the loop

def test_training_is_deterministic_and_additive():
    results = []
    finals = []
    for _ in range(2):
        cfg, gen, disc, images = tiny_setup(seed=7)
        tcfg = TrainConfig(batch_size=4, epochs=3, seed=7)
        res = train(gen, disc, images, tcfg)
        results.append(res)
        finals.append({k: v.data.copy() for k, v in gen.named_params().items()})
    a, b = results
    assert a.iterations_run == b.iterations_run == 6
    for ra, rb in zip(a.records, b.records):
        assert (ra.d_loss, ra.g_perceptual, ra.g_feature_match, ra.g_final) == (
            rb.d_loss, rb.g_perceptual, rb.g_feature_match, rb.g_final)
        assert abs(ra.g_final - (ra.g_perceptual + ra.g_feature_match)) <= 1e-6
    for k in finals[0]:
        assert np.array_equal(finals[0][k], finals[1][k])


def test_resumed_run_matches_uninterrupted_run():
    cfg, gen, disc, images = tiny_setup(seed=3)
    tcfg = TrainConfig(batch_size=4, epochs=3, seed=3)
    straight = train(gen, disc, images, tcfg)

    cfg2, gen2, disc2, images2 = tiny_setup(seed=3)
    opt_g = Adam(gen2.named_params(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    opt_d = Adam(disc2.named_params(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    first = train(gen2, disc2, images2, tcfg, start_iteration=0,
                  opt_g=opt_g, opt_d=opt_d, on_iteration=None)
    # rewind nothing -- simply continue with the same optimizers from iter 3
    half = TrainConfig(batch_size=4, epochs=3, seed=3, max_iterations=3)
    cfg3, gen3, disc3, images3 = tiny_setup(seed=3)
    og = Adam(gen3.named_params(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    od = Adam(disc3.named_params(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    part1 = train(gen3, disc3, images3, half, opt_g=og, opt_d=od)
    part2 = train(gen3, disc3, images3, tcfg, start_iteration=3, opt_g=og, opt_d=od)

    merged = part1.records + part2.records
    assert [r.iteration for r in merged] == [r.iteration for r in straight.records]
    for rm, rs in zip(merged, straight.records):
        assert (rm.d_loss, rm.g_perceptual, rm.g_feature_match, rm.g_final) == (
            rs.d_loss, rs.g_perceptual, rs.g_feature_match, rs.g_final)
    ga = gen.named_params()
    gb = gen3.named_params()
    for k in ga:
        assert np.array_equal(ga[k].data, gb[k].data), k
    assert first.iterations_run == 6


def test_generator_step_leaves_discriminator_untouched():
    cfg, gen, disc, images = tiny_setup(seed=1)
    d_params = list(disc.named_params().values())
    z = np.random.default_rng(0).uniform(-1, 1, (4, cfg.z_dim)).astype(np.float32)
    real_mean = np.zeros(cfg.fusion_dim, dtype=np.float32)
    with _FrozenParams(d_params), Graph() as g:
        imgs = gen.forward(Tensor(z), training=True)
        out = disc.forward(imgs, training=False)
        final = g_final_loss(g_perceptual_loss(out.logit),
                             g_feature_match_loss(out.features, real_mean))
        g.backward(final)
    assert all(p.grad is None for p in d_params)
    assert all(p.grad is not None for p in gen.named_params().values())
    assert all(p.requires_grad for p in d_params)  # restored on exit


def test_d_steps_per_g_step_advances_d_clock_faster():
    cfg, gen, disc, images = tiny_setup(seed=2)
    tcfg = TrainConfig(batch_size=4, epochs=1, seed=2, d_steps_per_g_step=2, max_iterations=3)
    opt_g = Adam(gen.named_params(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    opt_d = Adam(disc.named_params(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    res = train(gen, disc, images, tcfg, opt_g=opt_g, opt_d=opt_d)
    assert res.iterations_run == 2  # epochs * (8 // 4) caps before max_iterations
    assert opt_d.t == 4
    assert opt_g.t == 2


def test_loss_mode_changes_generator_updates_only_at_start():
    runs = {}
    for mode in ("final", "perceptual_only"):
        cfg, gen, disc, images = tiny_setup(seed=5)
        tcfg = TrainConfig(batch_size=4, epochs=2, seed=5, loss_mode=mode)
        res = train(gen, disc, images, tcfg)
        runs[mode] = (res, {k: v.data.copy() for k, v in gen.named_params().items()})
    ra, rb = runs["final"][0], runs["perceptual_only"][0]
    # iteration 0's D step happens before the modes can diverge
    assert ra.records[0].d_loss == rb.records[0].d_loss
    # both modes log all four columns either way
    assert all(np.isfinite(r.g_feature_match) for r in rb.records)
    assert any(not np.array_equal(runs["final"][1][k], runs["perceptual_only"][1][k])
               for k in runs["final"][1])


def test_train_config_validation():
    with pytest.raises(ValueError, match="loss_mode"):
        TrainConfig(loss_mode="hinge")
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="betas"):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError, match="d_steps"):
        TrainConfig(d_steps_per_g_step=0)
    t = TrainConfig(batch_size=4, max_iterations=9)
    assert TrainConfig.from_dict(t.to_dict()) == t


def test_divergence_raises_and_names_the_iteration():
    cfg, gen, disc, images = tiny_setup(seed=6)
    gen.project_w.data[0, 0] = np.nan
    tcfg = TrainConfig(batch_size=4, epochs=1, seed=6)
    with pytest.raises(TrainingDiverged, match="iteration 0") as exc:
        train(gen, disc, images, tcfg)
    assert exc.value.record.iteration == 0
    assert not exc.value.record.is_finite()


def test_train_rejects_bad_image_arrays():
    cfg, gen, disc, images = tiny_setup()
    with pytest.raises(ValueError, match="empty"):
        train(gen, disc, images[:0], TrainConfig(batch_size=4))
    with pytest.raises(ValueError, match="4-D"):
        train(gen, disc, images[:, 0], TrainConfig(batch_size=4))


# ---------------------------------------------------------------- loss log

def test_loss_csv_format_and_append(tmp_path):
    records = [
        LossRecord(0, 1.3862944, -0.69314718, 0.0, -0.69314718),
        LossRecord(1, 1.25, -0.5, 0.125, -0.375),
    ]
    path = tmp_path / "loss.csv"
    write_loss_csv(path, records)
    text = path.read_text()
    lines = text.splitlines()
    assert lines[0] == "iteration,d_loss,g_perceptual,g_feature_match,g_final"
    assert lines[1] == "0,1.3862944,-0.69314718,0,-0.69314718"
    assert len(lines) == 3

    write_loss_csv(path, [LossRecord(2, 1.0, -0.25, 0.5, 0.25)], append=True)
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert lines[3].startswith("2,")

    # rendering is pure: same records, same bytes
    assert render_loss_rows(records) == render_loss_rows(records)
    assert render_loss_rows(records, header=True).startswith("iteration,")
