import json

import pytest

from opsearch import adapt as adapt_mod, cli, report
from opsearch.adapt import RunConfig, adapt, random_vs_adapted, sweep
from opsearch.cost import load_profile
from opsearch.errors import ConfigError, NumericalError
from opsearch.model import load_model, save_model

RPI = load_profile("rpi3-like")
TINY = dict(iterations=1, population_size=4, max_layers_replaced=1)


@pytest.fixture(scope="module")
def tiny_run(toy):
    m, p, data, _ = toy
    return adapt(m, p, data, RPI, RunConfig(**TINY))


@pytest.fixture(scope="module")
def model_file(toy, tmp_path_factory):
    m, p, _, _ = toy
    path = str(tmp_path_factory.mktemp("model") / "toy.json")
    save_model(m, p, path)
    return path


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(max_layers_replaced=0)
    with pytest.raises(ConfigError):
        RunConfig(population_size=1)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"speed": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"rate": 1}})
    cfg = RunConfig(rng_seed=4, n_o=2)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert RunConfig.from_dict({"rng_seed": 1}, rng_seed=None).rng_seed == 1
    assert cfg.search(3).rng_seed == 7


def test_adapt_report_shape(tiny_run, toy):
    rep = tiny_run.report
    assert rep["kind"] == "adaptation" and rep["original"]["accuracy"] == pytest.approx(toy[3])
    assert rep["stop_reason"] in ("MaxLayersReplaced", "AllExcluded", "RolledBack", "TargetMet")
    assert len(rep["iterations"]) == 1
    it = rep["iterations"][0]
    assert it["branch"] == "Ranked" and it["selected"] == [3]  # conv2 is the slowest operator
    assert len(rep["replaced_operators"]) <= 1
    assert rep["no_improvement"] == (not rep["replaced_operators"])
    if rep["replaced_operators"]:
        assert rep["adapted"]["accuracy"] > rep["original"]["accuracy"] - 0.01
        assert rep["adapted"]["latency_ms"] <= rep["original"]["latency_ms"]


def test_report_round_trip_and_markdown(tiny_run):
    text = report.to_json(tiny_run.report)
    assert report.to_json(report.from_json(text)) == text
    md = report.render(tiny_run.report, "markdown")
    rows = [line for line in md.splitlines() if line.startswith("| Original") or line.startswith("| GOS")]
    assert len(rows) == 2
    assert md.splitlines()[0] == "| Model | #Parameters | Top-1 Accuracy | Latency(ms) | Speedup |"
    with pytest.raises(ConfigError):
        report.render(tiny_run.report, "yaml")
    with pytest.raises(ConfigError):
        report.to_markdown({"kind": "analysis"})


def test_report_cleans_non_finite():
    assert json.loads(report.to_json({"x": float("inf"), "y": [float("nan"), 1.0]})) == {"x": None, "y": [None, 1.0]}


def test_saved_model_round_trip(toy, tiny_run, tmp_path):
    path = str(tmp_path / "adapted.json")
    save_model(tiny_run.model, tiny_run.params, path)
    m2, p2 = load_model(path)
    assert [m2.digest(o) for o in m2.order] == [tiny_run.model.digest(o) for o in tiny_run.model.order]
    assert sorted(p2.keys()) == sorted(tiny_run.params.keys())


def test_random_vs_adapted_small(toy):
    m, p, data, _ = toy
    out = random_vs_adapted(m, p, data, RPI, 10, seed=2)
    assert len(out["records"]) == 20
    assert sum(out["arms"]["random"]["histogram"]["counts"]) == 10
    assert out["operator"] == 0
    with pytest.raises(ConfigError):
        random_vs_adapted(m, p, data, RPI, 9)


def test_sweep_bounds(toy):
    m, p, data, _ = toy
    for bad in ([41], [1], []):
        with pytest.raises(ConfigError):
            sweep(m, p, data, RPI, RunConfig(**TINY), bad)


def test_histogram_bins():
    h = adapt_mod.histogram([0.0, 0.05, 0.95, 1.0])
    assert len(h["counts"]) == 10 and h["counts"][0] == 2 and h["counts"][-1] == 2


# -- command line ---------------------------------------------------------------


def test_cli_gen_dataset_byte_identical(tmp_path):
    a, b = str(tmp_path / "a.gosd"), str(tmp_path / "b.gosd")
    assert cli.main(["gen-dataset", "--seed", "5", "--out", a, "--n-train", "60", "--n-val", "30"]) == 0
    assert cli.main(["gen-dataset", "--seed", "5", "--out", b, "--n-train", "60", "--n-val", "30"]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()


def test_cli_analyze(model_file, tmp_path):
    out = str(tmp_path / "a.json")
    assert cli.main(["analyze", "--model", model_file, "--out", out]) == 0
    doc = json.load(open(out))
    assert doc["deployable"] and doc["selection"]["chosen"] == [3]
    assert doc["operators"][0]["name"] == "conv2"


def test_cli_adapt_markdown(model_file, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    out = str(tmp_path / "r.md")
    code = cli.main(["adapt", "--model", model_file, "--config", str(cfg), "--format", "markdown", "--out", out])
    assert code in (cli.EXIT_OK, cli.EXIT_NO_IMPROVEMENT)
    assert "| GOS |" in open(out).read()


def test_cli_error_exit_codes(model_file, tmp_path, monkeypatch, capsys):
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"max_layers_replaced": 0}))
    assert cli.main(["analyze", "--model", model_file, "--config", str(bad_cfg)]) == cli.EXIT_CONFIG
    assert cli.main(["analyze", "--model", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG
    (tmp_path / "junk.json").write_text("{not json")
    assert cli.main(["analyze", "--model", str(tmp_path / "junk.json")]) == cli.EXIT_CONFIG
    assert cli.main(["experiment", "sweep", "--model", model_file, "--values", "41"]) == cli.EXIT_CONFIG
    assert cli.main(["evolve-one", "--model", model_file, "--operator", "99"]) == cli.EXIT_CONFIG

    def boom(*a, **k):
        raise NumericalError("non-finite activations")

    monkeypatch.setattr(adapt_mod, "adapt", boom)
    assert cli.main(["adapt", "--model", model_file]) == cli.EXIT_NUMERICAL
    assert "error:" in capsys.readouterr().err


def test_cli_no_improvement_exit(model_file, monkeypatch, tmp_path):
    class Fake:
        no_improvement = True
        report = {"kind": "adaptation"}
        model = params = None

    monkeypatch.setattr(adapt_mod, "adapt", lambda *a, **k: Fake())
    assert cli.main(["adapt", "--model", model_file, "--out", str(tmp_path / "r.json")]) == cli.EXIT_NO_IMPROVEMENT


def test_cli_catalog_dump(tmp_path):
    out = str(tmp_path / "c.json")
    assert cli.main(["catalog", "dump", "--out", out]) == 0
    assert any(s["opcode"] == "matmul" for s in json.load(open(out))["instructions"])
