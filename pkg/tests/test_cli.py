import json
import logging
import subprocess
import sys

import numpy as np

from nlquant.cli import main
from nlquant.groupquant import quantize_per_tensor
from nlquant.tensorio import Tensor, read_tensor, write_tensor


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def report_of(text):
    rep = json.loads(text)
    assert rep["schema"] == "nlquant.report/1"
    assert {"seed", "version", "timestamp"} <= set(rep["provenance"])
    return rep


def test_sweep_within_frozen_bound(tmp_path, capsys):
    code, _, _ = run(capsys, "sweep", "--kernel", "gelu", "--domain", "-6:6:0.001",
                     "--out", str(tmp_path / "g.json"))
    assert code == 0
    rep = report_of((tmp_path / "g.json").read_text())
    assert rep["metrics"]["within_bounds"] and rep["metrics"]["frozen_bounds"]
    assert (tmp_path / "g.csv").exists()


def test_sweep_regression_violation_exits_one(tmp_path, capsys, monkeypatch):
    import nlquant.refmodel as rm

    tight = {"sweeps": {"gelu": {"domain": "-6:6:0.001", "max_abs_error": 1e-6}}}
    monkeypatch.setattr(rm, "load_expectations", lambda: tight)
    code, out, _ = run(capsys, "sweep", "--kernel", "gelu", "--domain", "-6:6:0.001")
    assert code == 1
    assert report_of(out)["metrics"]["within_bounds"] is False


def test_sweep_positive_exp_is_a_contract_error(capsys):
    code, out, err = run(capsys, "sweep", "--kernel", "exp", "--domain", "0:1:0.1")
    assert code == 2 and out == "" and "extended" in err
    code, out, _ = run(capsys, "sweep", "--kernel", "exp", "--domain", "0:1:0.1", "--extended")
    assert code == 0


def test_report_goes_to_stdout_without_out(capsys):
    code, out, _ = run(capsys, "sweep", "--kernel", "ln", "--domain", "1:4:0.5")
    assert code == 0 and report_of(out)["command"] == "sweep"


def test_unknown_kernel_is_usage_error(capsys):
    code, _, err = run(capsys, "sweep", "--kernel", "tanh")
    assert code == 2 and "usage" in err


def test_invalid_config_is_usage_error(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("clamp_percentile: 40\n")
    code, _, err = run(capsys, "census", "--kernel", "exp", "--config", str(tmp_path / "c.yaml"))
    assert code == 2 and "clamp_percentile" in err


def test_census_reports_counts(capsys):
    code, out, _ = run(capsys, "census", "--kernel", "softmax", "--size", "4")
    m = report_of(out)["metrics"]
    assert code == 0 and m["mults"] == 18 and m["divides"] == 0


def _write_layers(root, rng, scales, layers=("a", "b"), n=4):
    for layer in layers:
        d = root / layer
        d.mkdir(parents=True)
        for i in range(n):
            write_tensor(d / f"s{i}.qtns", rng.standard_normal((32, len(scales))) * scales)


def test_calibrate_separates_two_scales(tmp_path, capsys):
    rng = np.random.default_rng(0)
    scales = np.where(np.arange(16) % 2 == 0, 0.1, 10.0)
    _write_layers(tmp_path / "acts", rng, scales, layers=("ffn",))
    (tmp_path / "c.yaml").write_text(f"bop_budget: {16 * 8}\ncandidate_groups: [1, 2]\n")
    code, out, _ = run(capsys, "calibrate", "--activations", str(tmp_path / "acts"),
                       "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "plan.json"))
    assert code == 0
    assert report_of(out)["metrics"]["layers"]["ffn"]["groups"] == 2
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert plan["schema"] == "nlquant.plan/1"
    p = plan["layers"]["ffn"]
    small, large = p["permutation"][:8], p["permutation"][8:]
    assert all(c % 2 == 0 for c in small) and all(c % 2 == 1 for c in large)


def test_calibrate_zero_budget_gives_single_groups(tmp_path, capsys):
    rng = np.random.default_rng(1)
    _write_layers(tmp_path / "acts", rng, np.geomspace(0.01, 10, 8))
    (tmp_path / "c.yaml").write_text("bop_budget: 0\n")
    code, out, _ = run(capsys, "calibrate", "--activations", str(tmp_path / "acts"),
                       "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "p.json"))
    layers = report_of(out)["metrics"]["layers"]
    assert code == 0 and [v["groups"] for v in layers.values()] == [1, 1]


def test_calibrate_constant_sample_warns(tmp_path, capsys, caplog):
    d = tmp_path / "acts"
    d.mkdir()
    write_tensor(d / "only.qtns", np.full((4, 6), 2.0))
    with caplog.at_level(logging.WARNING, logger="nlquant"):
        code, out, _ = run(capsys, "calibrate", "--activations", str(d),
                           "--out", str(tmp_path / "p.json"))
    assert code == 0 and "degenerate" in caplog.text
    assert all(k == 0 for k in report_of(out)["metrics"]["layers"]["acts"]["k"])


def test_calibrate_names_inconsistent_file(tmp_path, capsys):
    d = tmp_path / "acts"
    d.mkdir()
    write_tensor(d / "a.qtns", np.ones((4, 6)))
    write_tensor(d / "b.qtns", np.ones((5, 6)))
    code, _, err = run(capsys, "calibrate", "--activations", str(d), "--out", str(tmp_path / "p.json"))
    assert code == 2 and "b.qtns" in err


def test_quantize_single_group_equals_per_tensor(tmp_path, capsys):
    rng = np.random.default_rng(2)
    _write_layers(tmp_path / "acts", rng, np.geomspace(0.1, 10, 8), layers=("x",))
    (tmp_path / "c.yaml").write_text("bop_budget: 0\n")
    run(capsys, "calibrate", "--activations", str(tmp_path / "acts"),
        "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "p.json"))
    x = rng.standard_normal((10, 8)) * 3
    write_tensor(tmp_path / "x.qtns", x)
    code, out, _ = run(capsys, "quantize", "--tensor", str(tmp_path / "x.qtns"),
                       "--plan", str(tmp_path / "p.json"), "--out", str(tmp_path / "q.qtns"))
    assert code == 0 and report_of(out)["metrics"]["reconstruction_mse"] >= 0
    q = read_tensor(tmp_path / "q.qtns")
    plan = q.meta["plan"]
    assert q.kind == "i8"
    baseline = quantize_per_tensor(x, plan["thresholds"][0], 8)[..., plan["permutation"]]
    np.testing.assert_array_equal(q.data, baseline)


def test_quantize_channel_mismatch(tmp_path, capsys):
    rng = np.random.default_rng(3)
    _write_layers(tmp_path / "acts", rng, np.ones(8), layers=("x",))
    run(capsys, "calibrate", "--activations", str(tmp_path / "acts"), "--out", str(tmp_path / "p.json"))
    write_tensor(tmp_path / "x.qtns", Tensor(np.ones((2, 5))))
    code, _, err = run(capsys, "quantize", "--tensor", str(tmp_path / "x.qtns"),
                       "--plan", str(tmp_path / "p.json"), "--out", str(tmp_path / "q.qtns"))
    assert code == 2 and "channels" in err


def test_simulate_is_reproducible(capsys):
    reports = []
    for _ in range(2):
        code, out, _ = run(capsys, "simulate", "--seed", "42", "--bits", "8", "--groups", "8")
        assert code == 0
        rep = report_of(out)
        rep["provenance"].pop("timestamp")
        reports.append(rep)
    assert reports[0] == reports[1]
    assert reports[0]["metrics"]["cosine_similarity"] >= 0.99


def test_simulate_grouping_on_heavy_preset(capsys):
    cos = {}
    for g in ("1", "8"):
        _, out, _ = run(capsys, "simulate", "--preset", "heavy-tailed", "--bits", "8", "--groups", g)
        cos[g] = report_of(out)["metrics"]["cosine_similarity"]
    assert cos["8"] >= cos["1"]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "nlquant", "census", "--kernel", "gelu", "--size", "1"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["metrics"]["mults"] == 0
