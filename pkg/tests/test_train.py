import warnings

import numpy as np
import pytest

from shapetok import diff as D
from shapetok.geom import random_shape
from shapetok.net import NetConfig
from shapetok.ssl import SSLConfig
from shapetok.train import (CKPT_MAGIC, Adam, Batch, Checkpoint, CheckpointError, TrainConfig, Tokenizer,
                            TrainingDiverged, cosine_distance, eikonal_penalty, fit, load_checkpoint,
                            loss_stage1, loss_stage2, make_batch, prepare_stage2, save_checkpoint,
                            train_step, with_stage)
from shapetok.vq import QUANTIZE, SHORTCUT

CFG = NetConfig.tiny()
SCFG = SSLConfig(n_prototypes=8)
SPECS = [random_shape("sphere", 0), random_shape("box", 1)]


def tcfg(**kw):
    base = dict(n_uniform=16, n_near=16, n_eikonal=8, steps=3, ssl=SCFG, lam_ssl=0.1)
    base.update(kw)
    return TrainConfig(**base)


def model(seed=0):
    return Tokenizer.create(CFG, seed, SCFG)


@pytest.fixture(autouse=True)
def _quiet_sinkhorn():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", "sinkhorn", RuntimeWarning)
        yield


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage="sdf")
    with pytest.raises(ValueError):
        TrainConfig(lam_eik=-1)
    with pytest.raises(ValueError):
        TrainConfig(stage="tsdf", n_eikonal=10, n_near=5)
    t = tcfg()
    assert TrainConfig.from_json(t.to_json()) == t


def test_perfect_logits_give_tiny_bce():
    y = np.array([1.0, 0.0, 1.0])
    assert D.bce_with_logits(D.Tensor(np.array([30.0, -30.0, 30.0])), y).item() < 1e-3


def test_shortcut_step_without_ssl_is_bce_only():
    t = tcfg(lam_ssl=0.0)
    b = make_batch(SPECS, CFG, t, 0)
    out = loss_stage1(b, model(), t, SHORTCUT)
    assert list(out.parts) == ["bce"]
    assert out.total.item() == out.parts["bce"].item()


def test_total_is_weighted_sum_and_parts_nonnegative():
    t = tcfg()
    m = model()
    b = make_batch(SPECS, CFG, t, 0)
    for fn, tt, mm in ((loss_stage1, t, m), (loss_stage2, with_stage(t, "tsdf"), prepare_stage2(model()))):
        out = fn(b, mm, tt, QUANTIZE)
        assert set(out.parts) >= {"vq_codebook", "vq_commitment", "ssl"}
        expect = 0.0
        for k, v in out.parts.items():
            assert v.item() >= 0 and np.isfinite(v.item())
            expect = expect + out.weights[k] * v.item()
        assert out.total.item() == pytest.approx(expect, rel=1e-14)


def test_eikonal_unit_gradient_field():
    rng = np.random.default_rng(0)
    x, h = rng.uniform(-1, 1, (2, 1, 5)), 1e-3
    # f(x) = x0: +h along axis 0 only
    fp = np.concatenate([x + h, x, x], axis=1)
    fm = np.concatenate([x - h, x, x], axis=1)
    assert eikonal_penalty(D.Tensor(fp), D.Tensor(fm), h).item() < 1e-6


def test_eikonal_constant_field_is_one():
    c = D.Tensor(np.full((1, 3, 4), 0.2))
    assert eikonal_penalty(c, c, 1e-3).item() == pytest.approx(1.0, abs=1e-5)


def test_repa_zero_when_projection_matches():
    a = np.random.default_rng(0).normal(size=(2, 4, 3))
    assert cosine_distance(D.Tensor(a), D.Tensor(a)).item() == pytest.approx(0.0, abs=1e-12)
    assert cosine_distance(D.Tensor(a), D.Tensor(-a)).item() == pytest.approx(2.0)


def test_stage_mismatch_raises():
    t = tcfg()
    b = make_batch(SPECS, CFG, t, 0)
    with pytest.raises(ValueError, match="stage"):
        loss_stage2(b, model(), t, QUANTIZE)
    with pytest.raises(ValueError, match="stage"):
        loss_stage1(b, model(), with_stage(t, "tsdf"), QUANTIZE)
    with pytest.raises(ValueError, match="prepare"):
        loss_stage2(b, model(), with_stage(t, "tsdf"), QUANTIZE)


def test_tsdf_stage_requires_warm_start_or_cold_flag():
    with pytest.raises(ValueError, match="stage-1"):
        fit(SPECS, tcfg(stage="tsdf"), CFG)
    r = fit(SPECS, tcfg(stage="tsdf", cold_start=True, steps=1), CFG)
    assert "head/tsdf/w" in r.model.params


def test_zero_learning_rate_keeps_params():
    m = model()
    before = {k: v.data.copy() for k, v in m.params.items()}
    train_step(m, SPECS, tcfg(lr=0.0, lam_ssl=0.0))
    for k, v in m.params.items():
        if k != "vq/codebook":  # dead-code revival can still reseed codes
            np.testing.assert_array_equal(v.data, before[k])


def test_adam_first_step_moves_by_lr():
    P = D.ModelParams.from_arrays({"w": np.array([1.0, -2.0])})
    P["w"].grad = np.array([0.3, -0.001])
    Adam(lr=0.1, clip=0).step(P)
    np.testing.assert_allclose(P["w"].data, [0.9, -1.9], atol=1e-6)


def test_adam_clips_global_norm():
    P = D.ModelParams.from_arrays({"a": np.zeros(1), "b": np.zeros(1)})
    P["a"].grad, P["b"].grad = np.array([3.0]), np.array([4.0])
    opt = Adam(lr=1.0, clip=1.0)
    assert opt.step(P) == pytest.approx(5.0)
    np.testing.assert_allclose(opt.m["a"], 0.1 * 0.6)


def test_training_is_deterministic():
    a = fit(SPECS, tcfg(), CFG).history
    b = fit(SPECS, tcfg(), CFG).history
    assert [r.total for r in a] == [r.total for r in b]


def test_resume_reproduces_loss_curve(tmp_path):
    t = tcfg(steps=6)
    full = fit(SPECS, t, CFG).history
    half = fit(SPECS, t, CFG, steps=3).model
    save_checkpoint(half, tmp_path / "h.ckpt", t)
    resumed = Tokenizer.from_checkpoint(load_checkpoint(tmp_path / "h.ckpt"))
    rest = fit(SPECS, t, model=resumed, steps=3).history
    assert [r.total for r in full] == [r.total for r in full[:3]] + [r.total for r in rest]
    assert [r.step for r in rest] == [3, 4, 5]


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = fit(SPECS, tcfg(), CFG).model
    ck = save_checkpoint(m, tmp_path / "a.ckpt", tcfg())
    raw = (tmp_path / "a.ckpt").read_bytes()
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.to_bytes() == raw
    assert Tokenizer.from_checkpoint(back).to_checkpoint(tcfg()).to_bytes() == raw
    assert back.train_config() == tcfg()
    assert raw[:4] == CKPT_MAGIC and raw[4] == 1
    assert set(ck.arrays) >= {"state/ssl_center", "state/codebook_usage"}


def test_checkpoint_layout_by_hand():
    ck = Checkpoint({"a": 1}, {"x": np.array([[1.5, 2.0]])})
    raw = ck.to_bytes()
    cfg = b'{"a": 1}'
    expect = (b"CUBC" + bytes([1]) + len(cfg).to_bytes(4, "little") + cfg + (1).to_bytes(4, "little")
              + (1).to_bytes(4, "little") + b"x" + (2).to_bytes(4, "little")
              + (1).to_bytes(8, "little") + (2).to_bytes(8, "little") + np.array([1.5, 2.0], "<f8").tobytes())
    assert raw == expect


@pytest.mark.parametrize("mutate, msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + bytes([7]) + b[5:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_checkpoint_errors(mutate, msg):
    raw = Checkpoint({}, {"x": np.ones(3)}).to_bytes()
    with pytest.raises(CheckpointError, match=msg):
        Checkpoint.from_bytes(mutate(raw))


def test_warm_start_adds_zero_tsdf_head_and_keeps_weights():
    m = fit(SPECS, tcfg(), CFG).model
    before = {k: v.data.copy() for k, v in m.params.items()}
    prepare_stage2(m)
    for k, v in before.items():
        np.testing.assert_array_equal(m.params[k].data, v)
    assert not np.any(m.params["head/tsdf/w"].data)
    assert "repa/fc1/w" in m.params and m.opt.t == 0
    rec = train_step(m, SPECS, tcfg(stage="tsdf"))
    assert {"l1", "repa"} <= set(rec.parts) and rec.step == 3


def test_nan_loss_aborts_with_untouched_model():
    m = model()
    m.params["enc/in/w"].data[0, 0] = np.nan
    snapshot = {k: v.data.copy() for k, v in m.params.items()}
    with pytest.raises(TrainingDiverged) as e:
        train_step(m, SPECS, tcfg())
    assert e.value.model is m and m.step == 0
    for k, v in m.params.items():
        np.testing.assert_array_equal(v.data, snapshot[k])


def test_batch_layout():
    t = tcfg(batch_size=2)
    b = make_batch(SPECS, CFG, t, 4)
    assert isinstance(b, Batch)
    assert b.surface.shape == (2, CFG.n_points, 3) and b.queries.shape == (2, 32, 3)
    assert b.n_uniform == 16
    for i, s in enumerate(b.shapes):
        np.testing.assert_array_equal(b.occupancy[i], SPECS[s].sdf(b.queries[i]) <= 0)


def _grad_check(stage):
    t = tcfg(stage=stage, n_uniform=6, n_near=6, n_eikonal=3)
    m = model()
    if stage == "tsdf":
        prepare_stage2(m)
        for k in ("head/tsdf/w", "head/tsdf/b"):
            m.params[k].data[...] = np.random.default_rng(1).normal(scale=0.3, size=m.params[k].shape)
    b = make_batch(SPECS[:1], CFG, t, 0)
    fn = loss_stage1 if stage == "occupancy" else loss_stage2
    reports = []
    for coin in (QUANTIZE, SHORTCUT):
        reports.append(D.grad_check(m.params, lambda p: fn(b, m, t, coin, straight_through=False).total,
                                    tol=1e-4, max_entries=1))
    return reports


@pytest.mark.parametrize("stage", ["occupancy", "tsdf"])
def test_full_loss_gradient_check(stage):
    for rep in _grad_check(stage):
        assert rep.passed, sorted(rep.errors.items(), key=lambda kv: -kv[1])[:3]
