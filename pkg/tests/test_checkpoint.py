"""Checkpoint format: bit-exact round trips and resumable training state."""

import struct

import numpy as np
import pytest

from martagan.checkpoint import (
    MAGIC,
    load_tensors,
    load_training_checkpoint,
    save_tensors,
    save_training_checkpoint,
)
from martagan.model import ArchConfig, Discriminator, Generator
from martagan.train import Adam, TrainConfig, train


def tiny():
    cfg = ArchConfig(image_size=16, channels=1, z_dim=5,
                     base_width=4, max_width=8, fusion_depth=1)
    gen = Generator(cfg, seed=11)
    disc = Discriminator(cfg, seed=11)
    tcfg = TrainConfig(batch_size=4, epochs=3, seed=11)
    images = np.random.default_rng(42).uniform(-1, 1, (8, 1, 16, 16)).astype(np.float32)
    return cfg, gen, disc, tcfg, images


def optimizers(gen, disc, tcfg):
    return (Adam(gen.named_params(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps),
            Adam(disc.named_params(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps))


def test_tensor_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a/w": rng.standard_normal((3, 4)).astype(np.float32),
        "a/b": rng.standard_normal(7),
        "blob": np.frombuffer(b"hello world", dtype=np.uint8).copy(),
        "scalar": np.asarray(3.5),
    }
    path = tmp_path / "t.mrta"
    save_tensors(path, tensors, iteration=123)
    loaded, it = load_tensors(path)
    assert it == 123
    assert list(loaded) == list(tensors)  # insertion order preserved
    for k in tensors:
        assert loaded[k].dtype == tensors[k].dtype
        assert loaded[k].shape == tensors[k].shape
        assert loaded[k].tobytes() == tensors[k].tobytes()


def test_save_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(ValueError, match="labels.*dtype|dtype"):
        save_tensors(tmp_path / "x.mrta", {"labels": np.arange(3, dtype=np.int64)})


def test_load_rejects_foreign_files(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"PNG\x00 definitely not a checkpoint")
    with pytest.raises(ValueError, match="magic"):
        load_tensors(p)


def test_load_rejects_future_versions(tmp_path):
    p = tmp_path / "v9.mrta"
    p.write_bytes(MAGIC + struct.pack("<II", 9, 0) + struct.pack("<I", 0))
    with pytest.raises(ValueError, match="version 9"):
        load_tensors(p)


def test_truncation_error_names_what_was_being_read(tmp_path):
    path = tmp_path / "t.mrta"
    save_tensors(path, {"conv/w": np.ones((2, 2), dtype=np.float32)}, iteration=1)
    blob = path.read_bytes()
    # cut in the middle of the payload: the message should blame conv/w
    cut = tmp_path / "cut.mrta"
    cut.write_bytes(blob[: len(blob) - 12])
    with pytest.raises(ValueError, match="truncated.*conv/w|conv/w.*truncated"):
        load_tensors(cut)
    # cut inside the fixed header too
    head = tmp_path / "head.mrta"
    head.write_bytes(blob[:6])
    with pytest.raises(ValueError, match="truncated"):
        load_tensors(head)


def test_training_state_round_trip(tmp_path):
    cfg, gen, disc, tcfg, images = tiny()
    opt_g, opt_d = optimizers(gen, disc, tcfg)
    half = TrainConfig(**{**tcfg.to_dict(), "max_iterations": 3})
    train(gen, disc, images, half, opt_g=opt_g, opt_d=opt_d)

    path = tmp_path / "ck.mrta"
    save_training_checkpoint(path, gen, disc, opt_g, opt_d, cfg, tcfg, iteration=3)
    gen2, disc2, og2, od2, cfg2, tcfg2, it = load_training_checkpoint(path)

    assert it == 3
    assert cfg2 == cfg
    assert tcfg2 == tcfg
    for m, m2 in ((gen, gen2), (disc, disc2)):
        for k, p in m.named_params().items():
            assert p.data.tobytes() == m2.named_params()[k].data.tobytes(), k
        for k, b in m.named_buffers().items():
            assert b.tobytes() == m2.named_buffers()[k].tobytes(), k
    for o, o2 in ((opt_g, og2), (opt_d, od2)):
        assert o2.t == o.t
        for i in range(len(o.m)):
            assert o.m[i].tobytes() == o2.m[i].tobytes()
            assert o.v[i].tobytes() == o2.v[i].tobytes()


def test_resume_through_checkpoint_equals_straight_run(tmp_path):
    # six iterations in one go ...
    cfg, gen_a, disc_a, tcfg, images = tiny()
    res_a = train(gen_a, disc_a, images, tcfg)

    # ... versus three, a save/load cycle, and three more
    _, gen_b, disc_b, _, _ = tiny()
    og, od = optimizers(gen_b, disc_b, tcfg)
    half = TrainConfig(**{**tcfg.to_dict(), "max_iterations": 3})
    res_1 = train(gen_b, disc_b, images, half, opt_g=og, opt_d=od)
    path = tmp_path / "mid.mrta"
    save_training_checkpoint(path, gen_b, disc_b, og, od, cfg, tcfg, iteration=3)

    gen_c, disc_c, og2, od2, cfg2, tcfg2, it = load_training_checkpoint(path)
    res_2 = train(gen_c, disc_c, images, tcfg2, start_iteration=it, opt_g=og2, opt_d=od2)

    merged = res_1.records + res_2.records
    assert len(merged) == len(res_a.records) == 6
    for rm, rs in zip(merged, res_a.records):
        assert (rm.iteration, rm.d_loss, rm.g_perceptual, rm.g_feature_match, rm.g_final) == (
            rs.iteration, rs.d_loss, rs.g_perceptual, rs.g_feature_match, rs.g_final)
    for k, p in gen_a.named_params().items():
        assert p.data.tobytes() == gen_c.named_params()[k].data.tobytes(), k
    for k, p in disc_a.named_params().items():
        assert p.data.tobytes() == disc_c.named_params()[k].data.tobytes(), k
    for k, b in gen_a.named_buffers().items():
        assert b.tobytes() == gen_c.named_buffers()[k].tobytes(), k


def test_load_requires_every_parameter(tmp_path):
    cfg, gen, disc, tcfg, images = tiny()
    opt_g, opt_d = optimizers(gen, disc, tcfg)
    path = tmp_path / "ck.mrta"
    save_training_checkpoint(path, gen, disc, opt_g, opt_d, cfg, tcfg, iteration=0)
    tensors, it = load_tensors(path)

    tensors_missing = dict(tensors)
    del tensors_missing["d/head/w"]
    gap = tmp_path / "gap.mrta"
    save_tensors(gap, tensors_missing, it)
    with pytest.raises(ValueError, match="d/head/w"):
        load_training_checkpoint(gap)

    tensors_bad = dict(tensors)
    tensors_bad["g/output/b"] = np.zeros(99, dtype=np.float32)
    bad = tmp_path / "bad.mrta"
    save_tensors(bad, tensors_bad, it)
    with pytest.raises(ValueError, match="g/output/b.*shape|shape.*g/output/b"):
        load_training_checkpoint(bad)

    tensors_noconf = dict(tensors)
    del tensors_noconf["meta/config_json"]
    noconf = tmp_path / "noconf.mrta"
    save_tensors(noconf, tensors_noconf, it)
    with pytest.raises(ValueError, match="config"):
        load_training_checkpoint(noconf)


def test_load_missing_optimizer_state(tmp_path):
    cfg, gen, disc, tcfg, images = tiny()
    opt_g, opt_d = optimizers(gen, disc, tcfg)
    path = tmp_path / "ck.mrta"
    save_training_checkpoint(path, gen, disc, opt_g, opt_d, cfg, tcfg, iteration=0)
    tensors, it = load_tensors(path)
    lossy = {k: v for k, v in tensors.items() if not k.startswith("opt_g/")}
    out = tmp_path / "lossy.mrta"
    save_tensors(out, lossy, it)
    with pytest.raises(ValueError, match="optimizer state"):
        load_training_checkpoint(out)


def test_learning_rate_override_on_load(tmp_path):
    cfg, gen, disc, tcfg, images = tiny()
    opt_g, opt_d = optimizers(gen, disc, tcfg)
    path = tmp_path / "ck.mrta"
    save_training_checkpoint(path, gen, disc, opt_g, opt_d, cfg, tcfg, iteration=0)
    _, _, og, od, _, tcfg2, _ = load_training_checkpoint(path, lr=5e-5)
    assert tcfg2.lr == 5e-5
    assert og.lr == od.lr == 5e-5


def test_checkpoint_bytes_are_deterministic(tmp_path):
    cfg, gen, disc, tcfg, images = tiny()
    opt_g, opt_d = optimizers(gen, disc, tcfg)
    a, b = tmp_path / "a.mrta", tmp_path / "b.mrta"
    save_training_checkpoint(a, gen, disc, opt_g, opt_d, cfg, tcfg, iteration=5)
    save_training_checkpoint(b, gen, disc, opt_g, opt_d, cfg, tcfg, iteration=5)
    assert a.read_bytes() == b.read_bytes()
