import pytest

from opsearch.analyzer import NON_DEPLOYABLE, RANKED, OperatorRecord, analyze, select
from opsearch.cost import LatencyEstimate, load_profile
from opsearch.errors import AllExcluded, ConfigError
from opsearch.model import toy_cnn

RPI = load_profile("rpi3-like")


def rec(o, lat, params, digest=0, excluded=False):
    return OperatorRecord(o, digest, LatencyEstimate(lat), params, excluded)


def test_toy_ranking():
    records = analyze(toy_cnn(), None, RPI)
    assert [r.operator for r in records[:2]] == [3, 6]  # conv2 is slowest, then fc1
    lats = [r.latency.mean_ms for r in records]
    assert lats == sorted(lats, reverse=True)
    assert {r.operator: r.params for r in records}[6] == 49200


def test_toy_selection_branches():
    records = analyze(toy_cnn(), None, RPI)
    assert select(records, True).chosen == (3,)
    nd = select(records, False)
    assert nd.branch == NON_DEPLOYABLE and nd.chosen == (6,)


def test_closeness_window_prefers_params():
    records = [rec(0, 10.0, 5, 1), rec(1, 9.6, 50, 2), rec(2, 9.0, 500, 3)]
    r = select(records, True)
    assert r.branch == RANKED and r.chosen == (1,)  # 9.0 is outside the 5% window
    assert select(records, True, closeness_tol=0.2).chosen == (2,)


def test_same_digest_extension_and_cap():
    records = [rec(i, 10.0 - i * 0.01, 10, digest=7) for i in range(6)] + [rec(9, 1.0, 1, digest=8)]
    r = select(records, True, n_o=4)
    assert r.chosen == (0, 1, 2, 3) and r.digest == 7
    assert select(records, True, n_o=1).chosen == (0,)


def test_non_deployable_ignores_latency():
    records = [rec(0, 1.0, 100, digest=1), rec(1, 50.0, 100, digest=1), rec(2, 99.0, 10, digest=1)]
    assert select(records, False).chosen == (0, 1, 2)


def test_exclusion():
    records = [rec(0, 5.0, 1, excluded=True), rec(1, 1.0, 1)]
    assert select(records, True).chosen == (1,)
    with pytest.raises(AllExcluded):
        select([rec(0, 1.0, 1, excluded=True)], True)
    assert all(r.excluded == (r.operator == 3) for r in analyze(toy_cnn(), None, RPI, excluded=[3]))


def test_bad_arguments():
    with pytest.raises(ConfigError):
        select([rec(0, 1.0, 1)], True, n_o=0)
    with pytest.raises(ConfigError):
        select([rec(0, 1.0, 1)], True, closeness_tol=1.0)
    with pytest.raises(ConfigError):
        analyze(toy_cnn(), None, RPI, n_i=0)


def test_zero_latency_window():
    records = [rec(0, 0.0, 1, 1), rec(1, 0.0, 3, 2)]
    assert select(records, True).chosen == (1,)


def test_three_operator_chain_records():
    from opsearch.cost import node_latencies
    from opsearch.model import chain
    from opsearch.seeds import build_seed

    m = chain([build_seed("linear", (1, 8), (1, 6)), build_seed("activation", (1, 6), (1, 6), opcode="tanh"),
               build_seed("linear", (1, 6), (1, 3))], 3)
    records = analyze(m, None, RPI)
    assert len(records) == 3
    for r in records:
        assert r.latency.mean_ms == pytest.approx(sum(node_latencies(m.operators[r.operator].graph, RPI).values()))


def test_record_order_matches_independent_sort(rng):
    m = toy_cnn()
    records = analyze(m, None, RPI)
    rows = [(r.latency.mean_ms, r.params, r.operator) for r in records]
    # bubble sort on (latency desc, params desc, id asc)
    want = list(rows)
    for i in range(len(want)):
        for j in range(len(want) - 1 - i):
            a, b = want[j], want[j + 1]
            if (a[0] < b[0]) or (a[0] == b[0] and (a[1] < b[1] or (a[1] == b[1] and a[2] > b[2]))):
                want[j], want[j + 1] = b, a
    assert rows == want


def test_worked_examples():
    nd = [rec(1, 1.0, 10, 1), rec(2, 1.0, 500, 2), rec(3, 1.0, 200, 3)]
    assert select(nd, False).chosen == (2,)
    dep = [rec(1, 5.0, 10, 1), rec(2, 5.1, 900, 2), rec(3, 1.0, 1, 3)]
    assert select(dep, True).chosen == (2,)
    convs = [rec(i, 3.0, 100, 42) for i in range(3)]
    assert len(select(convs, True, n_o=2).chosen) == 2
