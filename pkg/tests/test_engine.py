import numpy as np
import pytest

from opsearch.engine.autodiff import eval_operator, forward
from opsearch.engine.data import decode, encode, load_pair, save_pair, synthetic
from opsearch.engine.params import ParamStore, init_tensor
from opsearch.engine.train import (
    TrainConfig,
    TrainLog,
    accuracy,
    eval_model,
    finetune,
    grad,
)
from opsearch.errors import ConfigError, KernelMissing, NumericalError
from opsearch.graph import Node, OperatorGraph
from opsearch.model import MODEL_INPUT, ModelGraph, ModelOp, init_params, relabel_model, toy_cnn
from opsearch.seeds import build_seed


def _params(g, rng):
    return {n.id: init_tensor(n, rng) for n in g.nodes.values() if n.is_parameter}


def test_relu_seed():
    g = build_seed("activation", (3,), (3,), opcode="relu")
    out = eval_operator(g, {}, np.array([-1.0, 0.0, 2.0], np.float32))
    assert out.tolist() == [0.0, 0.0, 2.0]


def test_softmax_seed():
    g = build_seed("activation", (1, 2), (1, 2), opcode="softmax")
    assert np.allclose(eval_operator(g, {}, np.zeros((1, 2), np.float32)), [[0.5, 0.5]])


def test_softmax_rows_and_standardize_moments(rng):
    g = build_seed("activation", (1, 7), (1, 7), opcode="softmax")
    out = eval_operator(g, {}, rng.standard_normal((5, 7)).astype(np.float32) * 4)
    assert np.all(np.abs(out.sum(axis=1) - 1) <= 1e-6)
    bn = build_seed("batchnorm", (1, 3, 6, 6), (1, 3, 6, 6))
    nodes = [n for n in bn.nodes.values() if n.opcode == "standardize"]
    x = (rng.standard_normal((4, 3, 6, 6)) * 3 + 2).astype(np.float32)
    _, vals = forward(bn, _params(bn, rng), x, keep=True)
    z = vals[nodes[0].id].astype(np.float64)
    assert np.abs(z.mean(axis=(2, 3))).max() <= 1e-5
    assert np.abs(z.var(axis=(2, 3)) - 1).max() <= 1e-4


def test_non_finite_and_missing_kernel():
    g = build_seed("activation", (2,), (2,), opcode="relu")
    with pytest.raises(NumericalError):
        eval_operator(g, {}, np.array([np.inf, 1], np.float32))
    nodes = [Node.activation(0, (1, 3, 3)), Node.instruction(1, "inverse")]
    inv = OperatorGraph.build(nodes, [(0, 1, 0)], 0, 1, (1, 3, 3))
    with pytest.raises(KernelMissing):
        eval_operator(inv, {}, np.eye(3, dtype=np.float32)[None])


def test_linear_mse_gradient_closed_form():
    nodes = [Node.activation(0, (1, 3)), Node.weight(1, (3, 1)), Node.instruction(2, "matmul")]
    g = OperatorGraph.build(nodes, [(0, 2, 0), (1, 2, 1)], 0, 2, (1, 1))
    w = np.array([[0.5], [-1.0], [2.0]], np.float32)
    x = np.array([[1.0, 2.0, 3.0]], np.float32)
    y = np.array([[1.0]], np.float32)
    gw = grad(g, {1: w}, x, "mse", y)[1]
    expect = 2 * (x @ w - y) * x.T
    assert np.allclose(gw, expect, atol=1e-6)


def test_frozen_weight_has_no_gradient(toy):
    m, p, data, _ = toy
    store = p.freeze_all_except([6])
    g = grad(m, store, data.val.inputs[:4], "cross_entropy", data.val.labels[:4])
    assert g and all(k[0] == 6 for k in g)


def test_model_grad_matches_finite_difference(toy):
    m, p, data, _ = toy
    store = p.freeze_all_except([8])
    x, y = data.val.inputs[:8], data.val.labels[:8]
    g = grad(m, store, x, "cross_entropy", y)
    key = next(k for k in g if store[k].ndim == 2)
    from opsearch.engine.train import cross_entropy

    def loss(t):
        s = ParamStore(dict(p.tensors))
        s.tensors[key] = t
        return cross_entropy(eval_model(m, s, x).astype(np.float64), y)[0]

    base = p[key].astype(np.float64)
    h = 1e-2
    for idx in [(0, 0), (5, 1), (20, 2)]:
        up, dn = base.copy(), base.copy()
        up[idx] += h
        dn[idx] -= h
        num = (loss(up.astype(np.float32)) - loss(dn.astype(np.float32))) / (2 * h)
        assert abs(num - float(g[key][idx])) <= 1e-2 * max(1.0, abs(num))


def test_eval_model_composes_operators(toy, rng):
    m, p, data, _ = toy
    x = data.val.inputs[:3]
    y = x
    for o in m.order:
        y = eval_operator(m.operators[o].graph, p.for_operator(o), y)
    assert np.allclose(eval_model(m, p, x), y, atol=1e-5)


def test_reshape_chain_identity(rng):
    a = build_seed("reshape", (1, 2, 6), (1, 12))
    b = build_seed("reshape", (1, 12), (1, 2, 6))
    ops = {0: ModelOp(0, "graph", a), 1: ModelOp(1, "graph", b)}
    m = ModelGraph(ops, ((MODEL_INPUT, 0, 0), (0, 1, 0)), (1, 2, 6), 6, 1)
    x = rng.standard_normal((4, 2, 6)).astype(np.float32)
    assert np.array_equal(eval_model(m, ParamStore(), x), x)


def test_residual_block(rng):
    conv = build_seed("conv2d", (1, 2, 5, 5), (1, 2, 5, 5), kernel=3, padding=1)
    flat = build_seed("reshape", (1, 2, 5, 5), (1, 50))
    lin = build_seed("linear", (1, 50), (1, 3))
    ops = {0: ModelOp(0, "graph", conv), 1: ModelOp(1, "add"), 2: ModelOp(2, "graph", flat),
           3: ModelOp(3, "graph", lin)}
    edges = ((MODEL_INPUT, 0, 0), (MODEL_INPUT, 1, 0), (0, 1, 1), (1, 2, 0), (2, 3, 0))
    m = relabel_model(ModelGraph(ops, edges, (1, 2, 5, 5), 3, 3)).check()
    p = init_params(m, rng)
    x = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
    branch = eval_operator(m.operators[0].graph, p.for_operator(0), x)
    manual = eval_operator(m.operators[3].graph, p.for_operator(3), (x + branch).reshape(2, 50))
    assert np.allclose(eval_model(m, p, x), manual, atol=1e-5)


def test_finetune_contracts(toy):
    m, p, data, _ = toy
    sub = data.train.subset(np.arange(256))
    same = finetune(m, p, [6], sub, TrainConfig(epochs=0), np.random.default_rng(0))
    assert all(np.array_equal(same[k], p[k]) for k in p.keys())
    cfg = TrainConfig(epochs=2)
    a = finetune(m, p, [6], sub, cfg, np.random.default_rng(3))
    b = finetune(m, p, [6], sub, cfg, np.random.default_rng(3))
    for k in p.keys():
        assert np.array_equal(a[k], b[k])  # deterministic
        if k[0] != 6:
            assert np.array_equal(a[k], p[k])  # frozen bit-identical
    assert any(not np.array_equal(a[k], p[k]) for k in p.keys() if k[0] == 6)


def test_finetune_loss_non_increasing_or_stops(toy):
    m, p, data, _ = toy
    store = ParamStore(dict(p.tensors))
    fresh = init_params(m, np.random.default_rng(9))
    for k in fresh.keys():
        if k[0] == 6:
            store.tensors[k] = fresh[k]
    log = TrainLog([])
    finetune(m, store, [6], data.train.subset(np.arange(512)), TrainConfig(epochs=4), np.random.default_rng(0),
             log=log)
    losses = log.epoch_losses
    rises = [b > a for a, b in zip(losses, losses[1:])]
    assert log.stopped_early or not any(x and y for x, y in zip(rises, rises[1:]))


def test_identical_linear_replacement_keeps_accuracy(toy):
    m, p, data, acc = toy
    out = finetune(m, p, [8], data.train, TrainConfig(epochs=1), np.random.default_rng(1))
    assert abs(accuracy(m, out, data.val) - acc) <= 0.01


def test_toy_baseline_accuracy(toy):
    m, p, data, acc = toy
    assert acc >= 0.85
    assert sum(p[k].size for k in p.keys()) == 50_595


def test_constant_model_accuracy():
    data = synthetic(3, 30, 30)
    lin = build_seed("linear", (1, 256), (1, 3))
    flat = build_seed("reshape", (1, 1, 16, 16), (1, 256))
    ops = {0: ModelOp(0, "graph", flat), 1: ModelOp(1, "graph", lin)}
    m = relabel_model(ModelGraph(ops, ((MODEL_INPUT, 0, 0), (0, 1, 0)), (1, 1, 16, 16), 3, 1))
    p = init_params(m, np.random.default_rng(0))
    for k in p.keys():
        p.tensors[k] = np.zeros_like(p[k])  # every logit equal: argmax picks class 0
    assert accuracy(m, p, data.val) == pytest.approx(np.mean(data.val.labels == 0))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_dataset_round_trip(tmp_path):
    pair = synthetic(1, 30, 12)
    path = tmp_path / "d.gosd"
    save_pair(pair, str(path))
    blob = path.read_bytes()
    assert blob[:4] == b"GOSD"
    back = load_pair(str(path))
    assert np.array_equal(back.train.inputs, pair.train.inputs)
    assert np.array_equal(back.val.labels, pair.val.labels)
    x, y, n_train = decode(encode(pair.train.inputs, pair.train.labels))
    assert np.array_equal(x, pair.train.inputs) and n_train == 30


def test_synthetic_balanced_and_deterministic(tmp_path):
    a, b = synthetic(1), synthetic(1)
    assert np.array_equal(a.train.inputs, b.train.inputs)
    assert np.bincount(a.train.labels).tolist() == [600, 600, 600]
    assert a.train.inputs.shape == (1800, 1, 16, 16) and len(a.val) == 600


def test_toy_cnn_structure():
    m = toy_cnn()
    names = [m.operators[o].name for o in m.order]
    assert names == ["conv1", "relu1", "pool1", "conv2", "relu2", "flatten", "fc1", "relu3", "fc2"]


def test_fused_channel_sum_matches_unfused(rng):
    from opsearch.engine.autodiff import backward, plan_for

    g = build_seed("conv2d", (1, 3, 7, 7), (1, 5, 7, 7), kernel=3, padding=1)
    assert len(plan_for(g).fused) == 1
    prm = {n.id: init_tensor(n, rng) for n in g.nodes.values() if n.is_parameter}
    x = rng.standard_normal((4, 3, 7, 7)).astype(np.float32)
    fused, vals = forward(g, prm, x, keep=True)
    plain, full = forward(g, prm, x, keep=True, fuse=False)
    assert np.allclose(fused, plain, atol=1e-5)
    assert set(full) - set(vals) == set(plan_for(g).fused.values())
    gy = rng.standard_normal(fused.shape).astype(np.float32)
    gx, gp = backward(g, vals, gy, set(prm))
    gx2, gp2 = backward(g, full, gy, set(prm), fuse=False)
    assert np.allclose(gx, gx2, atol=1e-5)
    assert all(np.allclose(gp[k], gp2[k], rtol=1e-4, atol=1e-5) for k in prm)
