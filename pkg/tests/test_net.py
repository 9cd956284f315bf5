import numpy as np
import pytest

from shapetok import diff as D
from shapetok.geom import icosphere, normalize, sample_surface
from shapetok.net import NetConfig, add_head, decode, encode, init_params

CFG = NetConfig.tiny()


@pytest.fixture(scope="module")
def P():
    arr = init_params(CFG, 0)
    add_head(arr, CFG, "tsdf", np.random.default_rng(1))
    return D.ModelParams.from_arrays(arr)


def pts(n=32, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3))


def test_config_invariants():
    with pytest.raises(ValueError):
        NetConfig(width=10, heads=4)
    with pytest.raises(ValueError):
        NetConfig(n_latent=0)
    with pytest.raises(ValueError):
        NetConfig(width=8, heads=2, code_dim=16)
    assert NetConfig.from_json(CFG.to_json()) == CFG


def test_encoder_is_point_permutation_invariant(P):
    x = pts()
    perm = np.random.default_rng(1).permutation(len(x))
    np.testing.assert_allclose(encode(x[perm], P, CFG).data, encode(x, P, CFG).data, atol=1e-9)


def test_fully_masked_output_ignores_points(P):
    mask = np.ones((1, CFG.n_latent), bool)
    np.testing.assert_array_equal(encode(pts(seed=1), P, CFG, mask).data, encode(pts(seed=2), P, CFG, mask).data)


def test_translated_copies_encode_identically_after_normalize(P):
    m = icosphere(2).transformed(scale=(1.0, 0.6, 0.8))
    a = normalize(m)
    b = normalize(m.transformed(offset=(3.0, -2.0, 0.5)))
    za = encode(sample_surface(a, 32, 0), P, CFG).data
    zb = encode(sample_surface(b, 32, 0), P, CFG).data
    np.testing.assert_allclose(za, zb, atol=1e-9)


def test_decode_is_batch_consistent(P):
    lat = encode(pts(), P, CFG)
    q = pts(7, 5)
    full = decode(lat, q, P, CFG).values.data[0]
    one = [decode(lat, q[i:i + 1], P, CFG).values.data[0, 0] for i in range(len(q))]
    np.testing.assert_allclose(full, one, atol=1e-12)


def test_zero_latents_and_head_give_bias():
    arr = init_params(CFG, 0)
    arr["head/occ/w"][:] = 0
    arr["head/occ/b"][:] = 0.37
    out = decode(D.Tensor(np.zeros((1, CFG.n_latent, CFG.width))), pts(9), D.ModelParams.from_arrays(arr), CFG)
    np.testing.assert_array_equal(out.values.data, 0.37)


def test_tsdf_head_is_bounded(P):
    arr = {k: v.data * 50 if k.startswith("head/tsdf") else v.data for k, v in P.items()}
    out = decode(encode(pts(), P, CFG), pts(200, 3) * 3, D.ModelParams.from_arrays(arr), CFG, head="tsdf")
    assert np.all(np.abs(out.values.data) <= CFG.tau)


def test_missing_head_raises(P):
    with pytest.raises(KeyError, match="sdf"):
        decode(encode(pts(), P, CFG), pts(2), P, CFG, head="sdf")


def test_repa_features_shape_and_batching(P):
    x = np.stack([pts(seed=0), pts(seed=1)])
    lat = encode(x, P, CFG)
    assert lat.shape == (2, CFG.n_latent, CFG.width)
    out = decode(lat, np.stack([pts(5), pts(5)]), P, CFG)
    assert out.repa_features.shape == (2, CFG.n_latent, CFG.width)
    np.testing.assert_allclose(lat.data[1], encode(x[1], P, CFG).data[0], atol=1e-12)


def test_encode_decode_gradients_pass_check(P):
    x, q = pts(16), pts(8, 9)
    y = (np.linalg.norm(q, axis=1) < 0.8) * 1.0

    def loss(p):
        return D.bce_with_logits(decode(encode(x, p, CFG), q, p, CFG).values[0], y)

    rep = D.grad_check(P.copy(), loss, tol=1e-4, max_entries=2)
    assert rep.passed, rep.errors
