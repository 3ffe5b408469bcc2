import json

import numpy as np
import pytest

from opsearch import cost
from opsearch.errors import ConfigError, ParseError
from opsearch.graph import Node, OperatorGraph
from opsearch.model import toy_cnn
from opsearch.seeds import build_seed

RPI = cost.load_profile("rpi3-like")


def _sqrt_graph(tile):
    nodes = [Node.activation(0, (1, 100)), Node.instruction(1, "sqrt", tile=tile)]
    return OperatorGraph.build(nodes, [(0, 1, 0)], 0, 1, (1, 100))


def test_builtin_profiles_load():
    for name in cost.BUILTIN_PROFILES:
        p = cost.load_profile(name)
        assert p.name == name and p.mode == "analytic"
    assert cost.DeviceProfile.from_dict(RPI.to_dict()) == RPI


def test_profile_errors(tmp_path):
    with pytest.raises(ParseError):
        cost.load_profile(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**RPI.to_dict(), "colour": "red"}))
    with pytest.raises(ConfigError):
        cost.load_profile(str(bad))
    with pytest.raises(ConfigError):
        cost.DeviceProfile("x", 10, mode="guess")
    with pytest.raises(ConfigError):
        cost.DeviceProfile("x", 10, tiling_speedup_factor=1.5)


def test_toy_parameter_count_and_memory():
    # hand count: conv1 8*9+8, conv2 16*8*9+16, fc1 1024*48+48, fc2 48*3+3
    m = toy_cnn()
    assert cost.model_param_count(m) == 80 + 1168 + 49200 + 147
    # widest operator output is conv1: 8 x 16 x 16 floats
    assert cost.peak_activation_bytes(m) == 8 * 16 * 16 * 4
    assert cost.required_bytes(m, RPI) == 50595 * 4 + 8192
    assert cost.deployable(m, None, cost.with_capacity(RPI, 210572)) == (True, 210572)
    assert cost.deployable(m, None, cost.with_capacity(RPI, 210571))[0] is False


def test_relu_latency_by_hand():
    # 2048 flops at 1e6 flops/ms, plus 2 us for relu and 0.5 us for the identity output
    g = build_seed("activation", (1, 8, 16, 16), (1, 8, 16, 16), opcode="relu")
    assert cost.analytic_latency(g, RPI).mean_ms == pytest.approx(0.002048 + 0.002 + 0.0005)


def test_tiling_annotation_discounts():
    plain = cost.analytic_latency(_sqrt_graph(False), RPI).mean_ms
    tiled = cost.analytic_latency(_sqrt_graph(True), RPI).mean_ms
    assert tiled == pytest.approx(plain * RPI.tiling_speedup_factor)
    assert cost.graph_flops(_sqrt_graph(True)) == cost.graph_flops(_sqrt_graph(False))


def test_latency_monotone_in_size():
    small = build_seed("conv2d", (1, 3, 8, 8), (1, 4, 8, 8), kernel=3, padding=1)
    wide = build_seed("conv2d", (1, 3, 8, 8), (1, 8, 8, 8), kernel=3, padding=1)
    big = build_seed("conv2d", (1, 3, 16, 16), (1, 4, 16, 16), kernel=3, padding=1)
    a = cost.analytic_latency(small, RPI).mean_ms
    assert cost.analytic_latency(wide, RPI).mean_ms > a
    assert cost.analytic_latency(big, RPI).mean_ms > a


def test_model_latency_is_sum_of_operators():
    m = toy_cnn()
    per = cost.operator_latencies(m, RPI)
    assert cost.model_latency(m, RPI).mean_ms == pytest.approx(sum(l.mean_ms for l in per.values()))
    assert cost.group_latency(m, [0, 3], RPI) == pytest.approx(per[0].mean_ms + per[3].mean_ms)


def test_attribution_identity_and_sign():
    m = toy_cnn()
    assert cost.operator_latency_attribution(m, m, [3], RPI) == pytest.approx(cost.group_latency(m, [3], RPI))


def test_energy():
    g = _sqrt_graph(False)
    assert cost.energy_j(g, RPI) == pytest.approx(100 * 1e-9)
    assert cost.energy_j(g, cost.DeviceProfile("x", 1)) is None


def test_measured_latency(rng):
    g = build_seed("activation", (1, 64), (1, 64), opcode="tanh")
    est = cost.measured_latency(g, {}, rng.standard_normal((4, 64)).astype(np.float32), n_runs=5)
    assert est.runs == 5 and est.mean_ms > 0 and est.stddev_ms >= 0
    with pytest.raises(ConfigError):
        cost.measured_latency(g, {}, np.zeros((1, 64), np.float32), n_runs=0)


def test_measured_mode_model(toy):
    m, p, _, _ = toy
    prof = cost.DeviceProfile("timed", 1 << 30, mode="measured", n_runs=2)
    lats = cost.operator_latencies(m, prof, p)
    assert set(lats) == set(m.order) and all(l.runs == 2 for l in lats.values())
    with pytest.raises(ConfigError):
        cost.operator_latencies(m, prof)


def test_seed_parameter_counts():
    conv = build_seed("conv2d", (1, 3, 8, 8), (1, 4, 6, 6), kernel=3)
    assert cost.param_count(conv) == 4 * 3 * 3 * 3 + 4
    assert cost.param_count(build_seed("activation", (1, 6), (1, 6), opcode="relu")) == 0
    poly = build_seed("batchnorm", (1, 4, 5, 5), (1, 4, 5, 5), variant="polynomial")
    assert cost.param_count(poly) == 3 * 4


def test_reshape_chain_costs_only_overhead():
    nodes = [Node.activation(0, (1, 4, 6)), Node.instruction(1, "reshape", target=(1, 24)),
             Node.instruction(2, "reshape", target=(1, 4, 6)), Node.instruction(3, "identity")]
    g = OperatorGraph.build(nodes, [(0, 1, 0), (1, 2, 0), (2, 3, 0)], 0, 3, (1, 4, 6))
    assert cost.graph_flops(g) == 0
    assert cost.analytic_latency(g, RPI).mean_ms == pytest.approx(3 * 0.0005, abs=1e-12)


def test_three_node_graph_hand_sum():
    # relu on 6 elements, matmul (1x6)(6x2): 2*1*6*2 flops, identity
    nodes = [Node.activation(0, (1, 6)), Node.instruction(1, "relu"), Node.weight(2, (6, 2)),
             Node.instruction(3, "matmul"), Node.instruction(4, "identity")]
    g = OperatorGraph.build(nodes, [(0, 1, 0), (1, 3, 0), (2, 3, 1), (3, 4, 0)], 0, 4, (1, 2))
    hand = (6 / 1e6 + 0.002) + (24 / 1e6 + 0.002) + (0 / 1e6 + 0.0005)
    assert abs(cost.analytic_latency(g, RPI).mean_ms - hand) <= 1e-9


def test_deployability_boundaries():
    m = toy_cnn()
    assert cost.deployable(m, None, cost.with_capacity(RPI, 0))[0] is False
    assert cost.deployable(m, None, cost.with_capacity(RPI, 1 << 20))[0] is True


def _replaced_conv2(m):
    small = build_seed("conv2d", (1, 8, 8, 8), (1, 16, 8, 8), kernel=1)
    return m.replace_operators([3], small), small


def test_attribution_telescopes_in_analytic_mode():
    m = toy_cnn()
    m2, small = _replaced_conv2(m)
    got = cost.operator_latency_attribution(m, m2, [3], RPI)
    assert got == pytest.approx(cost.analytic_latency(small, RPI).mean_ms, abs=1e-12)


def test_measured_runs_field_and_ordering(rng):
    tiny = build_seed("activation", (1, 1), (1, 1), opcode="relu")
    assert cost.measured_latency(tiny, {}, np.zeros((1, 1), np.float32), n_runs=1).runs == 1
    big = build_seed("conv2d", (1, 16, 48, 48), (1, 32, 48, 48), kernel=3, padding=1)  # ~10 ms class
    pb = {n.id: np.ones(n.shape, np.float32) for n in big.nodes.values() if n.is_parameter}
    x = rng.standard_normal((1, 16, 48, 48)).astype(np.float32)
    slow = cost.measured_latency(big, pb, x, n_runs=100)
    fast = cost.measured_latency(tiny, {}, np.zeros((1, 1), np.float32), n_runs=100)
    assert slow.mean_ms > fast.mean_ms
    assert slow.stddev_ms / slow.mean_ms <= 0.5


def test_measured_attribution_close_to_direct_timing(toy, rng):
    m, p, data, _ = toy
    m2, small = _replaced_conv2(m)
    from opsearch.engine.params import ParamStore, init_tensor

    p2 = ParamStore({k: v for k, v in p.items() if k[0] != 3})
    for n in small.nodes.values():
        if n.is_parameter:
            p2.tensors[(3, n.id)] = init_tensor(n, rng)
    prof = cost.DeviceProfile("timed", 1 << 30, mode="measured", n_runs=200)
    attr = cost.operator_latency_attribution(m, m2, [3], prof, p, p2)
    x = np.zeros((1, 8, 8, 8), np.float32)
    direct = cost.measured_latency(small, p2.for_operator(3), x, 200)
    whole = cost.model_latency(m, prof, p)
    spread = direct.stddev_ms + whole.stddev_ms + cost.model_latency(m2, prof, p2).stddev_ms
    assert abs(attr - direct.mean_ms) <= 3 * spread
