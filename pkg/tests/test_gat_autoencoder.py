import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stensemble import gat_autoencoder as gae
from stensemble.gat_autoencoder import (AutoencoderParams, GatLayerParams, RecurrentParams,
                                        TrainConfig, attention_weights, build_graph, cache_loss,
                                        cluster_latent, decode, default_dims, encode, forward,
                                        gatv2_layer, init_params, load_checkpoint, loss,
                                        loss_and_grad, recurrent_layer, resume_training,
                                        save_checkpoint, topk_pool, train)

FD_STENCIL = ((2, -1.0), (1, 8.0), (-1, -8.0), (-2, 1.0))


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _tiny_graph(seed, T=6, F=3):
    rng = np.random.default_rng(seed)
    A = rng.random((T, T))
    A = (A + A.T) / 2
    A[A < 0.4] = 0
    return build_graph(A, rng.normal(size=(T, F))), rng


def _fd_params(graph, cfg, rng):
    """Inflated weights and non-zero biases keep every activation off its kinks."""
    P = init_params(graph.X.shape[1], cfg)
    blocks = {k: (0.3 * rng.normal(size=v.shape) if k.endswith(".b") else 2.0 * v)
              for k, v in P.blocks.items()}
    return AutoencoderParams(blocks, P.f_node, P.dims, P.leaky_slope)


def _fd_grad(f, arr, h=1e-5):
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        acc = 0.0
        for step, w in FD_STENCIL:
            arr[idx] = orig + step * h
            acc += w * f()
        arr[idx] = orig
        out[idx] = acc / (12 * h)
    return out


def _rel_err(ga, fd):
    return float(np.max(np.abs(ga - fd)) / max(np.max(np.abs(fd)), 1e-6))


# -- graph ---------------------------------------------------------------------------


def test_build_graph_edges_and_self_loops():
    A = np.array([[0.0, 0.5, 0.0], [0.5, 0.0, 0.1], [0.0, 0.1, 0.0]])
    g = build_graph(A, tau_edge=0.2)
    assert sorted(g.edge_list()) == [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)]
    assert np.array_equal(g.X, A)


def test_build_graph_rejects_bad_adjacency():
    with pytest.raises(ValueError):
        build_graph(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        build_graph(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        build_graph(np.zeros((2, 2)), np.zeros((3, 1)))


# -- attention -----------------------------------------------------------------------


def test_gat_isolated_node(backend, rng):
    g = build_graph(np.zeros((1, 1)), rng.normal(size=(1, 3)))
    lp = GatLayerParams(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=2))
    assert attention_weights(g.X, g, lp).tolist() == [1.0]
    assert np.allclose(gatv2_layer(g.X, g, lp), g.X @ lp.W_r.T, atol=1e-15)


def test_gat_identical_neighbours_split_evenly(backend, rng):
    h = rng.normal(size=3)
    g = build_graph(np.array([[0.0, 1.0], [1.0, 0.0]]), np.stack([h, h]))
    lp = GatLayerParams(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=2))
    assert np.allclose(attention_weights(g.X, g, lp), 0.5, atol=1e-15)


def test_gat_matches_dense_reference(backend, rng):
    g, _ = _tiny_graph(4, T=7, F=3)
    lp = GatLayerParams(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=4), 0.2)
    L, R = g.X @ lp.W_l.T, g.X @ lp.W_r.T
    ref = np.zeros((7, 4))
    for i in range(7):
        nb = g.indices[g.indptr[i]:g.indptr[i + 1]]
        z = L[i] + R[nb]
        e = np.where(z > 0, z, 0.2 * z) @ lp.a
        w = np.exp(e - e.max())
        ref[i] = (w / w.sum()) @ R[nb]
    assert np.allclose(gatv2_layer(g.X, g, lp), ref, atol=1e-13)


def test_attention_rows_sum_to_one(backend):
    rng = np.random.default_rng(0)
    A = rng.random((6, 6))
    A = (A + A.T) / 2
    A[A < 0.5] = 0
    g = build_graph(A, rng.normal(size=(6, 4)))
    lp = GatLayerParams(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=3) * 4)
    alpha = attention_weights(g.X, g, lp)
    assert np.max(np.abs(np.add.reduceat(alpha, g.indptr[:-1]) - 1)) <= 1e-12


# -- pooling -------------------------------------------------------------------------


def test_topk_example():
    H = np.array([[3.0], [1.0], [2.0], [0.0]])
    out, kept = topk_pool(H, np.array([1.0]), 0.5)
    assert kept.tolist() == [0, 2]
    assert np.allclose(out, np.tanh([[3.0], [2.0]]) * [[3.0], [2.0]], atol=1e-15)


def test_topk_ratio_one_and_ties(rng):
    H = rng.normal(size=(5, 2))
    _, kept = topk_pool(H, rng.normal(size=2), 1.0)
    assert kept.tolist() == list(range(5))
    _, kept = topk_pool(np.ones((4, 1)), np.array([1.0]), 0.5)
    assert kept.tolist() == [0, 1]
    with pytest.raises(ValueError):
        topk_pool(H, np.ones(2), 0.0)


@given(st.integers(1, 12), st.floats(0.05, 1.0), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_topk_gating_and_count(n, ratio, seed):
    rng = np.random.default_rng(seed)
    H, p = rng.normal(size=(n, 3)), rng.normal(size=3)
    out, kept = topk_pool(H, p, ratio)
    assert len(kept) == max(1, math.ceil(ratio * n - 1e-9)) and np.all(np.diff(kept) > 0)
    s = H @ p / np.linalg.norm(p)
    assert np.max(np.abs(out - np.tanh(s[kept])[:, None] * H[kept])) <= 1e-15
    dropped = np.setdiff1d(np.arange(n), kept)
    if len(dropped):
        assert s[kept].min() >= s[dropped].max()


# -- recurrent -----------------------------------------------------------------------


def test_lstm_zero_network(backend):
    rp = RecurrentParams(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    out = recurrent_layer(np.random.default_rng(0).normal(size=(5, 3)), rp)
    assert np.all(out == 0)


def test_lstm_scalar_cell(backend):
    W, U, b = np.array([[0.3], [-0.7], [1.1], [0.4]]), np.array([[0.2], [0.5], [-0.3], [0.9]]), \
        np.array([0.1, -0.2, 0.05, 0.3])
    xs = [0.8, -1.3, 0.4]
    h = c = 0.0
    ref = []
    for x in xs:
        i = _sig(W[0, 0] * x + U[0, 0] * h + b[0])
        f = _sig(W[1, 0] * x + U[1, 0] * h + b[1])
        g = math.tanh(W[2, 0] * x + U[2, 0] * h + b[2])
        o = _sig(W[3, 0] * x + U[3, 0] * h + b[3])
        c = f * c + i * g
        h = o * math.tanh(c)
        ref.append(h)
    out = recurrent_layer(np.array(xs)[:, None], RecurrentParams(W, U, b))
    assert np.allclose(out[:, 0], ref, atol=1e-15)


def test_lstm_gradients_match_finite_differences(backend):
    rng = np.random.default_rng(1)
    X, R = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    rp = RecurrentParams(rng.normal(size=(8, 2)), rng.normal(size=(8, 2)), rng.normal(size=8))
    H, cache = gae._rec_fwd(X, rp)
    dX, dW, dU, db = gae._rec_bwd(R, cache, rp)

    def f():
        return float(np.sum(recurrent_layer(X, rp) * R))

    for ga, arr in ((dW, rp.W), (dU, rp.U), (db, rp.b), (dX, X)):
        assert _rel_err(ga, _fd_grad(f, arr)) <= 1e-4


# -- encoder / decoder ---------------------------------------------------------------


def test_default_dims():
    assert default_dims(100) == (64, 32, 16, 8)
    assert default_dims(20) == (20, 10, 5, 2)
    assert min(default_dims(1)) >= 2


def test_pool_ratio_one_paths_coincide():
    g, _ = _tiny_graph(0, T=8)
    cfg = TrainConfig(pool_ratio=1.0, dims=(4, 3, 3, 2))
    Zf, Zp, kept = encode(g, init_params(3, cfg), cfg)
    assert np.array_equal(Zf, Zp) and kept.tolist() == list(range(8))


def test_encode_deterministic():
    g, _ = _tiny_graph(1, T=9)
    cfg = TrainConfig(dims=(4, 3, 2, 2))
    P = init_params(3, cfg)
    a, b = encode(g, P, cfg), encode(g, P, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_shapes_across_random_dims():
    rng = np.random.default_rng(5)
    for _ in range(20):
        T, F = int(rng.integers(2, 12)), int(rng.integers(1, 6))
        dims = tuple(int(d) for d in rng.integers(1, 7, size=4))
        ratio = float(rng.uniform(0.1, 1.0))
        g, _ = _tiny_graph(int(rng.integers(1000)), T=T, F=F)
        cfg = TrainConfig(dims=dims, pool_ratio=ratio)
        P = init_params(F, cfg)
        Zf, Zp, kept = encode(g, P, cfg)
        assert Zf.shape == (T, dims[3]) and Zp.shape == (len(kept), dims[3])
        X_hat, A_hat = decode(Zp, kept, P, g)
        assert X_hat.shape == (T, F) and A_hat.shape == (T, T)
        assert np.array_equal(A_hat, A_hat.T)
        assert A_hat.min() > 0 and A_hat.max() < 1


def test_unpool_pool_identity_on_kept_rows():
    Zp = np.arange(6.0).reshape(3, 2)
    kept = np.array([1, 4, 5])
    U0 = np.zeros((7, 2))
    U0[kept] = Zp
    assert np.array_equal(U0[kept], Zp)


# -- loss ----------------------------------------------------------------------------


def test_loss_perfect_reconstruction(rng):
    X, A = rng.normal(size=(4, 3)), rng.random((4, 4))
    Z = rng.normal(size=(4, 2))
    assert loss(X, A, X, A, Z, rng.normal(size=(2, 2)), 0.0) == 0.0
    assert loss(X, A, X, A, Z, None, 0.0) == 0.0


def test_loss_two_node_example():
    X, X_hat = np.array([[1.0], [0.0]]), np.array([[0.5], [0.0]])
    A, A_hat = np.eye(2), np.full((2, 2), 0.5)
    Z, C = np.array([[0.0], [2.0]]), np.array([[1.0]])
    # 0.25/2 + 4*0.25/4 + 0.1 * (1 + 1)/2
    assert abs(loss(X, A, X_hat, A_hat, Z, C, 0.1) - 0.475) <= 1e-12


def test_loss_lambda_zero_ignores_centroids(rng):
    X, A = rng.normal(size=(3, 2)), rng.random((3, 3))
    args = (X, A, X + 0.1, A * 0.5, rng.normal(size=(3, 2)))
    assert loss(*args, rng.normal(size=(2, 2)), 0.0) == loss(*args, rng.normal(size=(2, 2)), 0.0)


# -- gradients -----------------------------------------------------------------------


@pytest.mark.parametrize("seed, ratio", [(0, 1.0), (3, 0.5)])
def test_full_gradient_matches_finite_differences(backend, seed, ratio):
    g, rng = _tiny_graph(seed)
    cfg = TrainConfig(lam=0.5, pool_ratio=ratio, dims=(4, 3, 3, 2), seed=seed, k=2)
    P = _fd_params(g, cfg, rng)
    C = rng.normal(size=(2, 2))
    cache = forward(P, g, cfg)
    s = np.sort(cache.store["pool"][1])[::-1]
    n_keep = len(cache.kept)
    if n_keep < g.T:
        assert s[n_keep - 1] - s[n_keep] > 1e-3  # keep-set is locally constant
    _, grads = loss_and_grad(P, g, cfg, C)
    for name, arr in P.blocks.items():
        fd = _fd_grad(lambda: cache_loss(forward(P, g, cfg), g, C, cfg.lam), arr)
        assert _rel_err(grads[name], fd) <= 1e-4, name


# -- training ------------------------------------------------------------------------


def test_training_halves_loss_without_clustering_term():
    rng = np.random.default_rng(0)
    A = rng.random((6, 6))
    g = build_graph((A + A.T) / 2)  # node features default to the adjacency rows
    cfg = TrainConfig(lam=0.0, epochs=2000, step_size=0.05, dims=(4, 3, 3, 2), seed=0)
    res = train(g, cfg)
    assert res.loss_history[-1] <= 0.5 * res.loss_history[0]
    assert np.all(np.diff(res.loss_history) <= 0)


def test_plain_autoencoder_does_not_get_worse():
    g, _ = _tiny_graph(7, T=10)
    cfg = TrainConfig(lam=0.0, pool_ratio=1.0, epochs=50, dims=(4, 3, 3, 2), seed=1)
    res = train(g, cfg)
    assert res.loss_history[-1] <= res.loss_history[0]


def test_training_deterministic():
    g, _ = _tiny_graph(3, T=8)
    cfg = TrainConfig(lam=0.1, epochs=15, centroid_refresh=5, dims=(4, 3, 3, 2), seed=4, k=2)
    a, b = train(g, cfg), train(g, cfg)
    for k in a.params.blocks:
        assert a.params.blocks[k].tobytes() == b.params.blocks[k].tobytes()
    assert a.Z_full.tobytes() == b.Z_full.tobytes()


def test_centroid_refresh_schedule():
    g, _ = _tiny_graph(3, T=8)
    seen = []
    cfg = TrainConfig(lam=0.1, epochs=7, centroid_refresh=3, dims=(4, 3, 3, 2), k=2)
    train(g, cfg, callback=lambda e, p, c, l: seen.append(c.copy()))
    changed = [e for e in range(1, 7) if not np.array_equal(seen[e], seen[e - 1])]
    assert set(changed) <= {3, 6}


def test_non_finite_loss_aborts():
    g, _ = _tiny_graph(0)
    cfg = TrainConfig(lam=0.0, epochs=3, dims=(4, 3, 3, 2))
    P = init_params(3, cfg)
    P.blocks["dec.gat3.W_r"][0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="epoch 0"):
        train(g, cfg, init=P)


def test_config_validation():
    for bad in ({"lam": -1}, {"pool_ratio": 0}, {"epochs": -1}, {"dims": (1, 2, 3)}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    g, _ = _tiny_graph(5, T=8)
    cfg = TrainConfig(lam=0.1, epochs=12, centroid_refresh=4, dims=(4, 3, 3, 2), seed=2, k=2)
    full = train(g, cfg)
    snap = {}

    def cb(epoch, params, cents, _):
        if epoch == 5:
            snap["p"], snap["c"] = params.copy(), cents.copy()

    train(g, cfg, callback=cb)
    save_checkpoint(tmp_path, snap["p"], cfg, 6, snap["c"])
    P, manifest, C = load_checkpoint(tmp_path)
    assert manifest["epoch"] == 6 and np.array_equal(C, snap["c"])
    assert all(np.array_equal(P.blocks[k], snap["p"].blocks[k]) for k in P.blocks)
    resumed = resume_training(tmp_path, g)
    assert resumed.Z_full.tobytes() == full.Z_full.tobytes()


def test_checkpoint_rejects_truncation(tmp_path):
    cfg = TrainConfig(dims=(2, 2, 2, 2))
    save_checkpoint(tmp_path, init_params(3, cfg), cfg, 0)
    data = (tmp_path / "params.bin").read_bytes()
    (tmp_path / "params.bin").write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)


# -- latent clustering ---------------------------------------------------------------


def test_cluster_latent_coincident_groups():
    Z = np.array([[0.0, 0.0]] * 3 + [[5.0, 5.0]] * 4)
    p = cluster_latent(Z, 2, seed=1)
    assert p.labels.tolist() == [0, 0, 0, 1, 1, 1, 1]
    assert np.array_equal(cluster_latent(Z, 2, seed=1).labels, p.labels)
    with pytest.raises(ValueError):
        cluster_latent(Z, 8)
