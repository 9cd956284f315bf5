import warnings

import numpy as np
import pytest
from scipy.optimize import linprog

from shapetok import diff as D
from shapetok import vq
from shapetok.net import NetConfig, init_params


def codebook(arr):
    return vq.Codebook(D.Tensor(np.asarray(arr, dtype=np.float64)))


def test_constant_cost_gives_uniform_plan():
    P = vq.sinkhorn_plan(np.ones((4, 6)))
    np.testing.assert_allclose(P, 1 / 24, atol=1e-12)


def _lp_plan(C):
    n, K = C.shape
    A = np.zeros((n + K, n * K))
    for i in range(n):
        A[i, i * K:(i + 1) * K] = 1
    for j in range(K):
        A[n + j, j::K] = 1
    b = np.concatenate([np.full(n, 1 / n), np.full(K, 1 / K)])
    return linprog(C.ravel(), A_eq=A, b_eq=b, bounds=(0, None), method="highs").x.reshape(n, K)


def test_two_by_two_small_eps_matches_exact_lp():
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    P = vq.sinkhorn_plan(C, eps=0.01)
    np.testing.assert_allclose(P, _lp_plan(C), atol=1e-3)
    assert P[0, 1] < 1e-3 and P[1, 0] < 1e-3


@pytest.mark.parametrize("shape, eps", [((64, 64), 0.05), ((64, 256), 0.05), ((8, 16), 0.1), ((16, 8), 0.1)])
def test_marginals_are_uniform(shape, eps):
    # tiny matrices need a softer eps to converge within 50 iterations
    C = np.random.default_rng(0).random(shape)
    P = vq.sinkhorn_plan(C, eps=eps)
    n, K = shape
    assert np.abs(P.sum(1) - 1 / n).max() < 1e-6 and np.abs(P.sum(0) - 1 / K).max() < 1e-6
    assert np.all(P >= 0)


def test_sinkhorn_warns_on_non_convergence_and_rejects_bad_input():
    C = np.random.default_rng(1).random((8, 8)) * 50
    with pytest.warns(RuntimeWarning, match="did not converge"):
        vq.sinkhorn_plan(C, eps=0.01, iters=1)
    with pytest.raises(ValueError):
        vq.sinkhorn_plan(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        vq.sinkhorn_plan(np.ones((2, 2)), eps=0)


def test_exact_code_match_is_assigned():
    rng = np.random.default_rng(0)
    codes = rng.normal(size=(16, 4)) * 5
    z = codes[[7]]
    assert vq.assign_nearest(z, codes)[0] == 7


def test_ot_spreads_usage_where_nearest_collapses():
    rng = np.random.default_rng(0)
    codes = rng.normal(size=(8, 4))
    z = codes[2] + 0.01 * rng.normal(size=(16, 4))
    assert len(np.unique(vq.assign_nearest(z, codes))) <= 2
    assert len(np.unique(vq.assign_ot(z, codes))) >= 6


def test_tie_goes_to_lowest_index():
    codes = np.zeros((6, 1))
    codes[3], codes[5] = -1.0, 1.0
    codes[[0, 1, 2, 4]] = 10.0
    assert vq.assign_nearest(np.zeros((1, 1)), codes)[0] == 3


def test_infer_round_trip_and_permutation_equivariance():
    rng = np.random.default_rng(3)
    cb = codebook(rng.normal(size=(32, 4)))
    toks = vq.TokenSequence(rng.integers(32, size=10), 32)
    assert vq.quantize_infer(cb.lookup(toks.indices), cb) == toks
    perm = rng.permutation(10)
    z = rng.normal(size=(10, 4))
    np.testing.assert_array_equal(vq.quantize_infer(z[perm], cb).indices, vq.quantize_infer(z, cb).indices[perm])


def test_vq_losses_zero_when_latents_sit_on_codes():
    cb = codebook(np.eye(4))
    out = vq.quantize_train(D.Tensor(np.eye(4)), cb)
    assert out.commitment_loss.item() == 0 and out.codebook_loss.item() == 0
    out = vq.quantize_train(D.Tensor(np.eye(4) + 0.1), cb)
    assert out.commitment_loss.item() > 0
    assert out.commitment_loss.item() == pytest.approx(0.25 * out.codebook_loss.item())


def test_straight_through_gradient_reaches_latents_exactly():
    rng = np.random.default_rng(0)
    cb = codebook(rng.normal(size=(8, 3)))
    P = D.ModelParams.from_arrays({"z": rng.normal(size=(5, 3))})
    w = rng.normal(size=(5, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = vq.quantize_train(P["z"], cb)
    D.backward(D.sum(out.embeddings * w), P)
    np.testing.assert_array_equal(P["z"].grad, w)
    np.testing.assert_array_equal(out.embeddings.data, cb.lookup(out.indices))


def test_quantize_train_errors():
    cb = codebook(np.eye(4))
    with pytest.raises(ValueError, match="empty"):
        vq.quantize_train(D.Tensor(np.zeros((0, 4))), cb)
    with pytest.raises(ValueError, match="dim"):
        vq.quantize_train(D.Tensor(np.zeros((2, 3))), cb)
    with pytest.raises(ValueError):
        codebook(np.zeros((1, 4)))


def test_shortcut_coin_frequency():
    hits = sum(vq.shortcut_coin(0, s) == vq.SHORTCUT for s in range(10_000))
    assert abs(hits / 10_000 - 0.5) <= 0.02
    assert vq.shortcut_coin(5, 17) == vq.shortcut_coin(5, 17)


def _bottleneck(bias=False):
    cfg = NetConfig.tiny(shortcut_bias=bias)
    P = D.ModelParams.from_arrays(init_params(cfg, 0))
    return cfg, P, vq.Codebook(P["vq/codebook"])


def test_shortcut_path_is_linear_without_bias():
    cfg, P, cb = _bottleneck()
    z = np.random.default_rng(0).normal(size=(1, cfg.n_latent, cfg.width))
    f = lambda x: vq.bottleneck_forward(D.Tensor(x), cb, P, coin=vq.SHORTCUT).decoder_input.data  # noqa: E731
    np.testing.assert_allclose(f(2.5 * z), 2.5 * f(z), atol=1e-12)
    out = vq.bottleneck_forward(D.Tensor(z), cb, P, coin=vq.SHORTCUT)
    assert out.path == vq.SHORTCUT and out.vq is None and out.tokens is None


def test_infer_mode_always_quantizes():
    cfg, P, cb = _bottleneck(True)
    z = D.Tensor(np.random.default_rng(0).normal(size=(2, cfg.n_latent, cfg.width)))
    out = vq.bottleneck_forward(z, cb, P, mode="infer")
    assert out.path == vq.QUANTIZE and out.tokens.shape == (2, cfg.n_latent)
    with pytest.raises(ValueError, match="training-only"):
        vq.bottleneck_forward(z, cb, P, mode="infer", coin=vq.SHORTCUT)
    # the same tokens decoded from a file land on the same decoder input
    seq = vq.TokenSequence(out.tokens[0], cb.K)
    np.testing.assert_array_equal(vq.tokens_to_decoder_input(seq, cb, P).data[0], out.decoder_input.data[0])


def test_dead_codes_are_revived():
    cb = codebook(np.zeros((4, 2)))
    cb.record([0, 1], step=2500)
    recent = np.array([[9.0, 9.0]])
    dead = cb.revive_dead(recent, 2500, np.random.default_rng(0))
    assert dead.tolist() == [2, 3]
    np.testing.assert_array_equal(cb.embeddings.data[2:], 9.0)
    assert cb.revive_dead(recent, 2600, np.random.default_rng(0)).size == 0


def test_token_file_round_trip_and_layout(tmp_path):
    t = vq.TokenSequence([0, 255, 7], 256)
    raw = t.to_bytes()
    assert raw[:4] == b"CUBE" and raw[4] == 2 and len(raw) == 13 + 12
    t.save(tmp_path / "a.tok")
    assert (tmp_path / "a.tok").read_bytes() == raw
    back = vq.TokenSequence.load(tmp_path / "a.tok")
    assert back == t and back.to_bytes() == raw


@pytest.mark.parametrize("mutate, msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + bytes([9]) + b[5:], "version"),
    (lambda b: b[:-1], "truncated"),
])
def test_token_file_errors(mutate, msg):
    with pytest.raises(vq.TokenFormatError, match=msg):
        vq.TokenSequence.from_bytes(mutate(vq.TokenSequence([1, 2], 4).to_bytes()))


def test_token_range_checked():
    with pytest.raises(ValueError):
        vq.TokenSequence([4], 4)


def test_converged_plan_does_not_warn():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        vq.sinkhorn_plan(np.random.default_rng(0).random((64, 256)))
