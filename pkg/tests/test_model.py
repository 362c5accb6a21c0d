import numpy as np
import pytest

from fimgcn import autodiff as ad
from fimgcn.graph import chain_graph, label_partitions, normalized_adjacency
from fimgcn.model import (TINY_CONFIG, CheckpointError, ModelConfig, attention_pool, bilstm, cross_entropy,
                          forward, init_params, load_checkpoint, one_hot, param_shapes, save_checkpoint,
                          spatial_graph_conv, stgcn_block, temporal_conv)

from conftest import random_tree

J5 = chain_graph(5)
P5 = label_partitions(J5)


def _sig(v):
    return 1 / (1 + np.exp(-v))


def reference_forward(x, params, config, partition):
    """Single sample [9, T, J], plain loops over the architecture's definition."""
    p = {k: v.value.astype(np.float64) for k, v in params.items()}
    mask = np.zeros(9)
    for g, sl in {"coords": slice(0, 3), "vel": slice(3, 6), "ang": slice(6, 9)}.items():
        if g in config.feature_groups:
            mask[sl] = 1
    if config.input_mean is not None:
        x = (x - np.array(config.input_mean)[:, None, None]) / np.array(config.input_std)[:, None, None]
    h = x * mask[:, None, None]
    for i, (_, c_out, stride) in enumerate(config.block_specs):
        adj = normalized_adjacency(partition, p[f"block{i}.M"])
        C, T, J = h.shape
        g = np.zeros((c_out, T, J))
        for t in range(T):
            f = h[:, t, :].T  # [J, C]
            g[:, t, :] = sum(adj[m] @ f @ p[f"block{i}.W"][m].T for m in range(3)).T
        g = np.maximum(g, 0)
        w, b = p[f"block{i}.tconv.weight"], p[f"block{i}.tconv.bias"]
        K = w.shape[2]
        pad = (K - 1) // 2
        T_out = -(-T // stride)
        out = np.zeros((c_out, T_out, J))
        for to in range(T_out):
            for tap in range(K):
                src = to * stride + tap - pad
                if 0 <= src < T:
                    out[:, to, :] += w[:, :, tap] @ g[:, src, :]
        out += b[:, None, None]
        if out.shape == h.shape:
            out = out + h
        h = np.maximum(out, 0)
    C, T, J = h.shape
    if config.use_bilstm:
        H = config.lstm_hidden
        z = np.zeros((2 * H, T, J))
        for j in range(J):
            for d, steps in (("fwd", range(T)), ("bwd", range(T - 1, -1, -1))):
                wi, wh, bb = p[f"lstm.{d}.W_ih"], p[f"lstm.{d}.W_hh"], p[f"lstm.{d}.b"]
                hs, cs = np.zeros(H), np.zeros(H)
                for t in steps:
                    a = wi @ h[:, t, j] + wh @ hs + bb
                    cs = _sig(a[H:2 * H]) * cs + _sig(a[:H]) * np.tanh(a[2 * H:3 * H])
                    hs = _sig(a[3 * H:]) * np.tanh(cs)
                    z[(0 if d == "fwd" else H):(H if d == "fwd" else 2 * H), t, j] = hs
    else:
        z = h
    if config.use_attention:
        alpha = np.zeros((T, J))
        v = np.zeros((T, z.shape[0]))
        for t in range(T):
            s = np.array([p["att.spatial.w2"] @ np.tanh(p["att.spatial.W1"] @ z[:, t, j] + p["att.spatial.b1"])
                          for j in range(J)])
            alpha[t] = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
            v[t] = z[:, t, :] @ alpha[t]
        s = np.array([p["att.temporal.w2"] @ np.tanh(p["att.temporal.W1"] @ v[t] + p["att.temporal.b1"])
                      for t in range(T)])
        beta = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        z_out = beta @ v
    else:
        z_out = z.mean(axis=(1, 2))
    logits = p["head.W"] @ z_out + p["head.b"]
    return np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()


def _params64(config, J, seed=0):
    params = init_params(config, J, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for prm in params.values():
        prm.value += 0.2 * rng.normal(size=prm.value.shape)
    return params


@pytest.mark.parametrize("bilstm_on,attention_on,groups,standardize", [
    (True, True, ("coords", "vel", "ang"), False),
    (True, True, ("coords", "vel", "ang"), True),
    (False, True, ("coords", "vel", "ang"), False),
    (True, False, ("coords",), True),
    (False, False, ("coords", "vel"), False),
])
def test_forward_matches_straight_line_oracle(bilstm_on, attention_on, groups, standardize):
    config = ModelConfig(block_specs=TINY_CONFIG.block_specs, temporal_kernel=3, lstm_hidden=4,
                         attention_hidden=4, use_bilstm=bilstm_on, use_attention=attention_on,
                         feature_groups=groups)
    params = _params64(config, 5)
    X = np.random.default_rng(1).normal(size=(2, 9, 12, 5))
    if standardize:
        config = config.standardized(3 + 2 * np.random.default_rng(2).normal(size=(4, 9, 12, 5)))
    probs = forward(X, params, config, P5).probs.value
    for n in range(2):
        np.testing.assert_allclose(probs[n], reference_forward(X[n], params, config, P5), rtol=1e-10, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)
    with pytest.raises(ValueError):
        ModelConfig(temporal_kernel=4)
    with pytest.raises(ValueError):
        ModelConfig(block_specs=((9, 8, 1), (7, 8, 1)))
    with pytest.raises(ValueError):
        ModelConfig(block_specs=((3, 8, 1),))
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()
    with pytest.raises(ValueError):
        ModelConfig(input_mean=(0.0,) * 9)
    with pytest.raises(ValueError):
        ModelConfig(input_mean=(0.0,) * 9, input_std=(1.0,) * 8)
    with pytest.raises(ValueError):
        ModelConfig(input_mean=(0.0,) * 9, input_std=(0.0,) + (1.0,) * 8)


def test_standardized_statistics():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 9, 10, 4)) * np.arange(1, 10)[None, :, None, None] + 5
    X[:, 4] = 2.0  # a constant channel is shifted but not scaled
    config = ModelConfig().standardized(X)
    np.testing.assert_allclose(config.input_mean, X.mean(axis=(0, 2, 3)))
    assert config.input_std[4] == 1.0 and config.input_mean[4] == 2.0
    np.testing.assert_allclose(np.delete(config.input_std, 4), np.delete(X.std(axis=(0, 2, 3)), 4))
    assert ModelConfig.from_dict(config.to_dict()) == config


def test_default_time_chain():
    assert ModelConfig().output_length(150) == 38
    params = init_params(TINY_CONFIG, 5)
    acts = forward(np.zeros((1, 9, 12, 5), np.float32), params, TINY_CONFIG, P5)
    assert [b.shape[2] for b in acts.blocks] == [12, 6]
    assert acts.z.shape == (1, 8, 6, 5) and acts.alpha.shape == (1, 6, 5) and acts.beta.shape == (1, 6)


def test_init_params():
    config = ModelConfig()
    params = init_params(config, 17, seed=0)
    assert [(k, v.value.shape) for k, v in params.items()] == list(param_shapes(config, 17).items())
    np.testing.assert_array_equal(params["block0.M"].value, 1.0)
    np.testing.assert_array_equal(params["head.b"].value, 0.0)
    W = params["block1.tconv.weight"].value
    bound = np.sqrt(6 / (64 * 9 + 64 * 9))
    assert np.abs(W).max() <= bound and np.abs(W).max() > 0.9 * bound
    again = init_params(config, 17, seed=0)
    assert all(np.array_equal(params[k].value, again[k].value) for k in params)


def test_ablation_flags_drop_unused_groups():
    names = param_shapes(ModelConfig(use_bilstm=False, use_attention=False), 17)
    assert not any(k.startswith(("lstm", "att")) for k in names)
    assert param_shapes(ModelConfig(use_bilstm=False), 17)["head.W"] == (2, 128)


def test_graph_conv_scalar_reduction():
    p = label_partitions(chain_graph(1))
    F = np.full((1, 1, 3, 1), 2.0)
    W = np.zeros((3, 1, 1))
    W[0] = 1
    out = spatial_graph_conv(F, p, np.ones((1, 1)), W).value
    np.testing.assert_allclose(out, 2.0 / (1 + 1e-3))
    np.testing.assert_array_equal(spatial_graph_conv(F, p, np.ones((1, 1)), np.zeros((3, 1, 1))).value, 0.0)


def test_graph_conv_two_node_hand_computed():
    g = chain_graph(2, root=0)
    p = label_partitions(g)
    al = 1e-3
    F = np.array([3.0, -1.0]).reshape(1, 1, 1, 2)
    W = np.array([2.0, 5.0, 7.0]).reshape(3, 1, 1)
    out = spatial_graph_conv(F, p, np.ones((2, 2)), W).value[0, 0, 0]
    e = 1 / (1 + al)  # out-degree 1 at the source, in-degree 1 at the target
    expected = [2 * 3 / (1 + al) + 7 * e * (-1), 2 * (-1) / (1 + al) + 5 * e * 3]
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_graph_conv_is_linear(partition):
    rng = np.random.default_rng(0)
    F1, F2 = rng.normal(size=(2, 2, 3, 4, 17))
    M, W = rng.normal(size=(17, 17)), rng.normal(size=(3, 5, 3))
    f = lambda F: spatial_graph_conv(F, partition, M, W).value  # noqa: E731
    np.testing.assert_allclose(f(2 * F1 - 3 * F2), 2 * f(F1) - 3 * f(F2), rtol=1e-6, atol=1e-9)


def test_relabeling_equivariance():
    rng = np.random.default_rng(3)
    g = random_tree(rng, 7)
    perm = rng.permutation(7)
    names = [g.joint_names[i] for i in perm]
    from fimgcn.graph import build_graph
    edges = [(g.joint_names[a], g.joint_names[b]) for a, b in g.edges]
    pose = {n: g.reference_pose[g.joint_names.index(n)] for n in g.joint_names}
    g2 = build_graph(edges, pose, g.joint_names[g.root], names)
    p1, p2 = label_partitions(g), label_partitions(g2)
    F = rng.normal(size=(1, 2, 3, 7))
    M, W = rng.normal(size=(7, 7)), rng.normal(size=(3, 4, 2))
    out1 = spatial_graph_conv(F, p1, M, W).value
    out2 = spatial_graph_conv(F[..., perm], p2, M[np.ix_(perm, perm)], W).value
    np.testing.assert_allclose(out2, out1[..., perm], rtol=1e-12, atol=1e-12)


def test_temporal_conv_identity_and_dc():
    F = np.random.default_rng(0).normal(size=(1, 2, 6, 3))
    w = np.zeros((2, 2, 3))
    w[0, 0, 1] = w[1, 1, 1] = 1
    np.testing.assert_allclose(temporal_conv(F, w, np.zeros(2)).value, F)
    const = np.full((1, 1, 9, 2), 4.0)
    avg = np.full((1, 1, 3), 1 / 3)
    np.testing.assert_allclose(temporal_conv(const, avg, np.zeros(1)).value[:, :, 1:-1], 4.0)


def test_block_zero_params_and_nonnegative():
    config = TINY_CONFIG
    params = init_params(config, 5)
    F = np.random.default_rng(0).normal(size=(2, 9, 12, 5))
    out = stgcn_block(F, params, 0, P5, 1).value
    assert np.all(out >= 0)
    for prm in params.values():
        prm.value[...] = 0
    np.testing.assert_array_equal(stgcn_block(F, params, 0, P5, 1).value, 0.0)


def test_bilstm_time_reversal_swaps_halves():
    config = TINY_CONFIG
    params = _params64(config, 5)
    # tie the two directions so reversal maps one onto the other
    for n in ("W_ih", "W_hh", "b"):
        params[f"lstm.bwd.{n}"].value[...] = params[f"lstm.fwd.{n}"].value
    F = np.random.default_rng(0).normal(size=(2, 4, 7, 5))
    z = bilstm(ad.constant(F), params).value
    zr = bilstm(ad.constant(F[:, :, ::-1]), params).value
    H = config.lstm_hidden
    np.testing.assert_allclose(zr[:, :H], z[:, H:, ::-1], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(zr[:, H:], z[:, :H, ::-1], rtol=1e-12, atol=1e-12)


def test_attention_uniform_scores():
    params = init_params(TINY_CONFIG, 5, dtype=np.float64)
    params["att.spatial.w2"].value[...] = 0
    params["att.temporal.w2"].value[...] = 0
    z = np.random.default_rng(0).normal(size=(1, 8, 6, 5))
    z_out, alpha, beta, v = attention_pool(ad.constant(z), params)
    np.testing.assert_allclose(alpha.value, 1 / 5)
    np.testing.assert_allclose(v.value[0], z[0].mean(axis=2).T)
    np.testing.assert_allclose(z_out.value[0], z[0].mean(axis=(1, 2)))


def test_batch_independence_and_normalization():
    params = init_params(ModelConfig(), 17, seed=1)
    from fimgcn.graph import default_graph
    p = label_partitions(default_graph())
    x = np.random.default_rng(0).normal(size=(9, 30, 17)).astype(np.float32)
    acts = forward(np.stack([x, x]), params, ModelConfig(), p)
    np.testing.assert_array_equal(acts.probs.value[0], acts.probs.value[1])
    np.testing.assert_allclose(acts.probs.value.sum(axis=1), 1, atol=1e-6)
    single = forward(x, params, ModelConfig(), p).probs.value
    np.testing.assert_allclose(single[0], acts.probs.value[0], rtol=1e-5)


def test_cross_entropy_examples():
    y = one_hot([0, 1], 2)
    assert float(cross_entropy(y, y).value) == 0.0
    assert float(cross_entropy(np.full((2, 2), 0.5), y).value) == pytest.approx(np.log(2), abs=1e-7)
    assert float(cross_entropy(np.array([[0.8, 0.2]]), one_hot([0], 2)).value) == pytest.approx(-np.log(0.8))
    with pytest.raises(ValueError):
        cross_entropy(np.full((1, 2), 0.5), np.array([[0.5, 0.5]]))


def test_logit_gradient_is_probs_minus_targets():
    params = _params64(TINY_CONFIG, 5)
    X = np.random.default_rng(0).normal(size=(3, 9, 12, 5))
    y = one_hot([0, 1, 1], 2, dtype=np.float64)
    with ad.Tape() as tape:
        acts = forward(X, params, TINY_CONFIG, P5)
        loss = cross_entropy(acts.probs, y)
    captured = {}
    original = acts.logits.vjp

    def spy(g):
        captured["g"] = g
        return original(g)
    acts.logits.vjp = spy  # capture the gradient arriving at the logits
    tape.backward(loss)
    np.testing.assert_allclose(captured["g"], (acts.probs.value - y) / 3, atol=1e-9)


def test_masked_channels_get_zero_input_gradient():
    config = ModelConfig(block_specs=TINY_CONFIG.block_specs, temporal_kernel=3, lstm_hidden=4,
                         attention_hidden=4, feature_groups=("coords",))
    params = _params64(config, 5)
    X = ad.parameter(np.random.default_rng(0).normal(size=(2, 9, 12, 5)))
    with ad.Tape() as tape:
        loss = cross_entropy(forward(X, params, config, P5).probs, one_hot([0, 1], 2, np.float64))
    tape.backward(loss)
    np.testing.assert_array_equal(X.grad[:, 3:], 0.0)
    assert np.abs(X.grad[:, :3]).max() > 0
    # a nonzero shift on a masked channel must not leak into the network
    shifted = config.standardized(np.random.default_rng(1).normal(3.0, 2.0, size=(4, 9, 12, 5)))
    a = forward(X.value, params, shifted, P5).probs.value
    b = forward(np.where(np.arange(9)[None, :, None, None] < 3, X.value, 7.0), params, shifted, P5).probs.value
    np.testing.assert_array_equal(a, b)


def test_backward_is_deterministic():
    params = _params64(TINY_CONFIG, 5)
    X = np.random.default_rng(0).normal(size=(2, 9, 12, 5))
    grads = []
    for _ in range(2):
        params.zero_grad()
        with ad.Tape() as tape:
            loss = cross_entropy(forward(X, params, TINY_CONFIG, P5).probs, one_hot([0, 1], 2, np.float64))
        tape.backward(loss)
        grads.append({k: g.copy() for k, g in params.grads().items()})
    assert all(np.array_equal(grads[0][k], grads[1][k]) for k in grads[0])


def test_checkpoint_round_trip(tmp_path, graph):
    config = ModelConfig(block_specs=((9, 4, 1), (4, 8, 2)), temporal_kernel=3, lstm_hidden=3, attention_hidden=2)
    config = config.standardized(np.random.default_rng(0).normal(1.0, 0.3, size=(3, 9, 6, 17)))
    params = init_params(config, 17, seed=4)
    save_checkpoint(tmp_path / "m.ckpt", params, config, graph, {"seed": 4})
    data = (tmp_path / "m.ckpt").read_bytes()
    assert data[:8] == b"FIMGCNCK"
    back, config2, graph2, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert config2 == config and meta == {"seed": 4} and graph2.edges == graph.edges
    assert all(np.array_equal(back[k].value, params[k].value) for k in params)
    (tmp_path / "trail.ckpt").write_bytes(data + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trail.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
