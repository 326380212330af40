import math

import numpy as np
import pytest

from knn_finetune.encoder import (
    Checkpoint,
    CheckpointError,
    EncoderParams,
    HeadParams,
    ShapeError,
    encode,
    encoder_backward,
    head_backward,
    init_encoder,
    init_head,
    linear_head,
    load_checkpoint,
    save_checkpoint,
)


def random_params(rng, dims, bias=True):
    D, H, d = dims
    return EncoderParams(
        W1=rng.normal(size=(D, H)),
        b1=rng.normal(size=H) if bias else np.zeros(H),
        W2=rng.normal(size=(H, d)),
        b2=rng.normal(size=d) if bias else np.zeros(d),
    )


def forward_oracle(p, x):
    """Scalar-loop forward pass, independent of the matrix code."""
    D, H, d = p.dims
    a = [math.tanh(sum(x[i] * p.W1[i, j] for i in range(D)) + p.b1[j]) for j in range(H)]
    return np.array([sum(a[j] * p.W2[j, k] for j in range(H)) + p.b2[k] for k in range(d)])


def test_init_deterministic():
    a, b = init_encoder(3, (10, 7, 4)), init_encoder(3, (10, 7, 4))
    for k in a.as_dict():
        assert a.as_dict()[k].tobytes() == b.as_dict()[k].tobytes()


def test_init_shapes():
    p = init_encoder(0, (4, 3, 2))
    assert p.W1.shape == (4, 3) and p.W2.shape == (3, 2)
    assert p.b1.shape == (3,) and p.b2.shape == (2,)
    assert not p.b1.any() and not p.b2.any()


def test_init_bounds_and_mean():
    p = init_encoder(11, (100, 100, 100))
    limit = math.sqrt(6.0 / 200)
    w = np.concatenate([p.W1.ravel(), p.W2.ravel()])[:10_000]
    assert np.all(np.abs(w) <= limit)
    # uniform(-L, L) has std L/sqrt(3); standard error of the mean over n draws
    se = limit / math.sqrt(3) / math.sqrt(w.size)
    assert abs(w.mean()) < 3 * se


def test_normalization_345():
    p = EncoderParams(W1=np.zeros((2, 2)), b1=np.zeros(2), W2=np.zeros((2, 2)), b2=np.array([3.0, 4.0]))
    rep = encode(p, np.ones(2))
    np.testing.assert_allclose(rep.h, [3.0, 4.0])
    np.testing.assert_allclose(rep.z, [0.6, 0.8], atol=1e-15)


def test_zero_input_degenerate_fallback():
    p = init_encoder(0, (5, 4, 3))
    rep = encode(p, np.zeros(5))
    np.testing.assert_array_equal(rep.h, np.zeros(3))
    np.testing.assert_array_equal(rep.z, [1.0, 0.0, 0.0])


def test_forward_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    p = random_params(rng, (8, 6, 4))
    x = rng.normal(size=8)
    np.testing.assert_allclose(encode(p, x).h, forward_oracle(p, x), rtol=0, atol=1e-12)


def test_batched_forward_matches_rows():
    rng = np.random.default_rng(6)
    p = random_params(rng, (8, 6, 4))
    X = rng.normal(size=(5, 8))
    batch = encode(p, X)
    for i in range(5):
        np.testing.assert_allclose(batch.z[i], encode(p, X[i]).z, atol=1e-14)
    np.testing.assert_allclose(np.linalg.norm(batch.z, axis=1), 1.0, atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        encode(init_encoder(0, (4, 3, 2)), np.zeros(5))


def test_linear_head_cases():
    rng = np.random.default_rng(2)
    b = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(linear_head(HeadParams(np.zeros((4, 3)), b), rng.normal(size=4)), b)
    h = rng.normal(size=3)
    np.testing.assert_array_equal(linear_head(HeadParams(np.eye(3), np.zeros(3)), h), h)
    W, b, h = rng.normal(size=(5, 3)), rng.normal(size=3), rng.normal(size=5)
    oracle = [sum(h[i] * W[i, c] for i in range(5)) + b[c] for c in range(3)]
    np.testing.assert_allclose(linear_head(HeadParams(W, b), h), oracle, atol=1e-12)
    with pytest.raises(ShapeError):
        linear_head(HeadParams(W, b), np.zeros(4))


def test_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(0)
    p = random_params(rng, (8, 6, 4))
    grads, gx = encoder_backward(p, rng.normal(size=8), np.zeros(4), np.zeros(4))
    for g in grads.values():
        assert not g.any()
    assert not gx.any()


def test_projection_kills_radial_direction():
    rng = np.random.default_rng(1)
    z = rng.normal(size=5)
    z /= np.linalg.norm(z)
    J = np.eye(5) - np.outer(z, z)
    np.testing.assert_allclose(J @ z, 0.0, atol=1e-15)
    # through the encoder: an upstream gradient along z itself contributes nothing
    p = random_params(rng, (6, 4, 5))
    x = rng.normal(size=6)
    zq = encode(p, x).z
    grads, _ = encoder_backward(p, x, None, zq)
    for g in grads.values():
        np.testing.assert_allclose(g, 0.0, atol=1e-12)


def _fd_check(p, x, gh, gz, step=1e-5):
    """Relative error of analytic vs central-difference gradients of
    f = gh . h + gz . z."""

    def f(params, xx):
        rep = encode(params, xx)
        return float(gh @ rep.h + gz @ rep.z)

    grads, gx = encoder_backward(p, x, gh, gz)
    worst = 0.0
    pd = p.as_dict()
    for name, arr in pd.items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in pd.items()}
            minus = {k: v.copy() for k, v in pd.items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            num[idx] = (f(EncoderParams.from_dict(plus), x) - f(EncoderParams.from_dict(minus), x)) / (2 * step)
        worst = max(worst, _rel(grads[name], num))
    num_x = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        num_x[i] = (f(p, x + e) - f(p, x - e)) / (2 * step)
    return max(worst, _rel(gx, num_x))


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def test_backward_finite_differences():
    rng = np.random.default_rng(42)
    p = random_params(rng, (8, 6, 4))
    assert _fd_check(p, rng.normal(size=8), rng.normal(size=4), rng.normal(size=4)) < 1e-4


@pytest.mark.parametrize("seed", range(100))
def test_backward_finite_differences_many_seeds(seed):
    rng = np.random.default_rng(1000 + seed)
    p = random_params(rng, (5, 4, 3))
    x = rng.normal(size=5)
    assert _fd_check(p, x, rng.normal(size=3), rng.normal(size=3)) < 1e-4


def test_head_backward_fd():
    rng = np.random.default_rng(3)
    head = HeadParams(rng.normal(size=(4, 3)), rng.normal(size=3))
    h, g = rng.normal(size=4), rng.normal(size=3)
    grads, gh = head_backward(head, h, g)
    np.testing.assert_allclose(grads["W"], np.outer(h, g))
    np.testing.assert_allclose(grads["b"], g)
    np.testing.assert_allclose(gh, head.W @ g)


def test_degenerate_branch_has_zero_z_gradient():
    p = init_encoder(0, (5, 4, 3))
    grads, _ = encoder_backward(p, np.zeros(5), None, np.ones(3))
    for g in grads.values():
        assert not g.any()


def test_checkpoint_round_trip(tmp_path):
    q = init_encoder(1, (7, 5, 3))
    k = init_encoder(2, (7, 5, 3))
    head = init_head(1, 3, 4)
    ckpt = Checkpoint(q, k, head, seed=9, step=123, config_echo="lambda = 0.5\n")
    path = tmp_path / "c.bin"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert (back.seed, back.step, back.config_echo) == (9, 123, "lambda = 0.5\n")
    assert back.dims == (7, 5, 3) and back.num_classes == 4
    for a, b in zip(
        [*q.as_dict().values(), *k.as_dict().values(), head.W, head.b],
        [*back.query.as_dict().values(), *back.key.as_dict().values(), back.head.W, back.head.b],
    ):
        assert a.tobytes() == b.tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"KNNC"
    (tmp_path / "bad.bin").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.bin")
