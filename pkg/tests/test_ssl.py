import numpy as np
import pytest

from shapetok import diff as D
from shapetok import ssl as S
from shapetok.net import NetConfig, init_params

CFG = NetConfig.tiny()


def student(seed=0, scfg=S.SSLConfig(n_prototypes=8)):
    arr = init_params(CFG, seed)
    arr.update(S.init_head(CFG, scfg, seed))
    return D.ModelParams.from_arrays(arr)


def pts(seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (CFG.n_points, 3))


def test_config_invariants():
    for bad in (dict(mask_ratio=1.0), dict(tau_teacher=0.5, tau_student=0.1), dict(m_ema=1.5)):
        with pytest.raises(ValueError):
            S.SSLConfig(**bad)


@pytest.mark.parametrize("m", [0.0, 1.0])
def test_teacher_update_extremes(m):
    s = student(0)
    t = S.make_teacher(student(1))
    before = {k: v.data.copy() for k, v in t.items()}
    S.teacher_update(s, t, m)
    for k, v in t.items():
        np.testing.assert_array_equal(v.data, s[k].data if m == 0 else before[k])


def test_two_half_updates_reach_three_quarters():
    s = D.ModelParams.from_arrays({"enc/a": np.ones(3)})
    t = D.ModelParams.from_arrays({"enc/a": np.zeros(3)})
    S.teacher_update(s, t, 0.5)
    S.teacher_update(s, t, 0.5)
    np.testing.assert_array_equal(t["enc/a"].data, 0.75)


def test_teacher_update_checks_trees():
    s = D.ModelParams.from_arrays({"enc/a": np.ones(3)})
    with pytest.raises(KeyError):
        S.teacher_update(s, D.ModelParams.from_arrays({"enc/b": np.ones(3)}), 0.5)
    with pytest.raises(ValueError):
        S.teacher_update(s, D.ModelParams.from_arrays({"enc/a": np.ones(2)}), 0.5)


def test_teacher_holds_encoder_and_head_only():
    t = S.make_teacher(student())
    assert all(k.startswith(("enc/", "ssl/")) for k in t)
    assert "ssl/fc2/w" in t and "enc/queries" in t


def test_mask_count_is_exact():
    m = S.query_mask(5, 16, 0.3, np.random.default_rng(0))
    np.testing.assert_array_equal(m.sum(1), round(0.3 * 16))


def test_self_distillation_without_mask_is_teacher_entropy():
    scfg = S.SSLConfig(n_prototypes=8, mask_ratio=0.0, tau_student=0.1, tau_teacher=0.1)
    s = student(scfg=scfg)
    r = S.ssl_loss(pts(), s, S.make_teacher(s), CFG, scfg, np.zeros(8), seed=0)
    assert r.loss.item() == pytest.approx(r.teacher_entropy, rel=1e-10)


def test_uniform_teacher_lower_bound():
    # cross-entropy against a uniform target is ln P exactly when the student is
    # uniform too, and larger otherwise
    scfg = S.SSLConfig(n_prototypes=8)
    s = student(scfg=scfg)
    t = S.make_teacher(s)
    for k in ("ssl/fc2/w", "ssl/fc2/b"):
        t[k].data[...] = 0
    r = S.ssl_loss(pts(), s, t, CFG, scfg, np.zeros(8), seed=0)
    assert r.teacher_entropy == pytest.approx(np.log(8))
    assert r.loss.item() > np.log(8)
    for k in ("ssl/fc2/w", "ssl/fc2/b"):
        s[k].data[...] = 0
    r = S.ssl_loss(pts(), s, t, CFG, scfg, np.zeros(8), seed=0)
    assert r.loss.item() == pytest.approx(np.log(8), rel=1e-12)


def test_loss_bounded_below_by_teacher_entropy():
    scfg = S.SSLConfig(n_prototypes=8)
    s = student(0, scfg)
    t = S.make_teacher(student(3, scfg))
    r = S.ssl_loss(pts(), s, t, CFG, scfg, np.zeros(8), seed=1)
    assert r.loss.item() >= r.teacher_entropy


def test_no_gradient_reaches_teacher_or_center():
    scfg = S.SSLConfig(n_prototypes=8)
    s = student(scfg=scfg)
    t = S.make_teacher(s)
    center = np.zeros(8)
    r = S.ssl_loss(pts(), s, t, CFG, scfg, center, seed=0)
    s.zero_grad()
    t.zero_grad()
    D.backward(r.loss, s)
    assert all(v.grad is None or not np.any(v.grad) for v in t.values())
    assert np.any(s["enc/queries"].grad != 0)
    np.testing.assert_array_equal(center, 0)


def test_ssl_gradient_check_through_student():
    scfg = S.SSLConfig(n_prototypes=8)
    s = student(scfg=scfg)
    t = S.make_teacher(student(2, scfg))
    rep = D.grad_check(s, lambda p: S.ssl_loss(pts(), p, t, CFG, scfg, np.zeros(8), seed=0).loss,
                       tol=1e-4, max_entries=2)
    assert rep.passed, rep.errors


def test_center_update_and_similarity():
    np.testing.assert_allclose(S.update_center(np.zeros(3), np.ones(3), 0.9), 0.1)
    a = np.random.default_rng(0).normal(size=(4, 6))
    assert S.latent_similarity(a, a) == pytest.approx(1.0)
    assert S.latent_similarity(a, -a) == pytest.approx(-1.0)
