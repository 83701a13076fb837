"""Config schema, overrides, and the CLI subcommands end to end."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from sparqsim import ConfigError, ExperimentConfig, parse_config, render_config
from sparqsim.cli_config import main

pytestmark = pytest.mark.filterwarnings(
    "ignore:decaying-LR precondition", "ignore:fixed-LR trigger precondition"
)

BASE = """
algorithm: sparq
T: 60
H: 5
seed: 3
graph: {kind: ring, n: 8}
objective: {kind: quadratic, d: 10}
compression: {kind: sign_top_k, k: 2}
lr: {kind: strongly_convex, a: 320.0, mu: auto}
trigger: {kind: power, c0: 10.0, eps: 0.5}
flags: {record_states: true}
"""


def _write(tmp_path, text, name="exp.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# --- schema ---------------------------------------------------------------------


def test_defaults_fill_in():
    cfg = parse_config("T: 10")
    assert cfg.algorithm == "sparq"
    assert cfg.graph["kind"] == "ring" and cfg.graph["n"] == 8
    assert cfg.trigger["kind"] == "always"
    assert cfg.forced_initial_broadcast is True
    assert cfg.record_states is False


def test_T_is_required_and_positive():
    with pytest.raises(ConfigError, match="'T'"):
        parse_config("algorithm: sparq")
    with pytest.raises(ConfigError, match="'T'"):
        parse_config("T: 0")


def test_unknown_keys_are_named():
    with pytest.raises(ConfigError, match="mystery"):
        parse_config("T: 5\nmystery: 1")
    with pytest.raises(ConfigError, match="lr.warmup"):
        parse_config("T: 5\nlr: {warmup: 3}")
    with pytest.raises(ConfigError, match="flags.verbose"):
        parse_config("T: 5\nflags: {verbose: true}")


def test_type_and_enum_validation():
    with pytest.raises(ConfigError, match="algorithm"):
        parse_config("T: 5\nalgorithm: sgd")
    with pytest.raises(ConfigError, match="expected int"):
        parse_config("T: 5\nseed: 1.5")
    with pytest.raises(ConfigError, match="graph.n"):
        parse_config("T: 5\ngraph: {n: true}")
    with pytest.raises(ConfigError, match="gamma"):
        parse_config("T: 5\ngamma: sometimes")


def test_roundtrip_is_exact():
    cfg = parse_config(BASE)
    again = parse_config(render_config(cfg))
    assert again == cfg
    assert render_config(again) == render_config(cfg)


def test_roundtrip_covers_non_defaults():
    text = """
T: 17
algorithm: choco
seed: 9
gamma: 0.125
init: per_node_gaussian
bit_counting: per_edge
graph: {kind: custom, n: 4, edges: [[0, 1], [1, 2], [2, 3], [3, 0]], weights: metropolis}
objective: {kind: logistic, d: 6, lam: 0.2, shard: label_sorted}
compression: {kind: quant_top_k, k: 3, s: 5}
lr: {kind: fixed, eta: 0.01}
trigger: {kind: piecewise, steps: [[0, 1.0], [10, 4.0]]}
oracle: {mode: full, minibatch: 16}
flags: {forced_initial_broadcast: false, record_states: true}
"""
    cfg = parse_config(text)
    assert parse_config(render_config(cfg)) == cfg


def test_overrides():
    cfg = parse_config(BASE)
    out = cfg.with_overrides(["lr.a=500", "flags.record_states=false", "T=99"])
    assert out.lr["a"] == 500.0
    assert out.record_states is False
    assert out.T == 99
    assert cfg.T == 60  # original untouched


def test_override_unknown_key_is_named():
    cfg = parse_config(BASE)
    with pytest.raises(ConfigError, match="trigger.shape"):
        cfg.with_overrides(["trigger.shape=round"])
    with pytest.raises(ConfigError, match="key=value"):
        cfg.with_overrides(["lr.a"])


def test_config_equality_survives_yaml_int_float_blur():
    # YAML renders 500.0; a hand-written "500" must normalize to the same config
    a = parse_config("T: 5\nlr: {kind: inverse, a: 500, b: 1}")
    b = parse_config("T: 5\nlr: {kind: inverse, a: 500.0, b: 1.0}")
    assert a == b


# --- CLI ------------------------------------------------------------------------


def test_cli_run_writes_artifacts(tmp_path):
    runner = CliRunner()
    cfg_path = _write(tmp_path, BASE)
    out = tmp_path / "out"
    res = runner.invoke(main, ["run", cfg_path, "--output", str(out)])
    assert res.exit_code == 0, res.output
    lines = (out / "run.csv").read_text().splitlines()
    assert len(lines) == 61  # header + T rows
    sidecar = json.loads((out / "summary.json").read_text())
    assert sidecar["audit"]["passed"] is True
    assert (out / "states.npz").exists()
    assert "PASS" in res.output


def test_cli_run_exit_2_on_bad_config(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["run", _write(tmp_path, "T: 10\nbogus: 1")])
    assert res.exit_code == 2
    assert "bogus" in res.output


def test_cli_run_exit_2_on_schedule_error(tmp_path):
    runner = CliRunner()
    text = BASE.replace(
        "flags: {record_states: true}",
        "flags: {record_states: true, enforce_theorem_preconditions: true}",
    )
    res = runner.invoke(main, ["run", _write(tmp_path, text)])
    assert res.exit_code == 2
    assert "a=" in res.output  # quotes the violated inequality


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_cli_run_exit_3_on_divergence(tmp_path):
    runner = CliRunner()
    text = BASE.replace(
        "lr: {kind: strongly_convex, a: 320.0, mu: auto}", "lr: {kind: fixed, eta: 1.0}"
    ).replace("T: 60", "T: 400")
    out = tmp_path / "div"
    res = runner.invoke(main, ["run", _write(tmp_path, text), "--output", str(out)])
    assert res.exit_code == 3
    assert "diverged" in res.output
    # the partial log was still written
    assert (out / "run.csv").exists()
    sidecar = json.loads((out / "summary.json").read_text())
    assert sidecar["summary"]["diverged"] is True


def test_cli_set_overrides(tmp_path):
    runner = CliRunner()
    out = tmp_path / "o"
    res = runner.invoke(
        main,
        ["run", _write(tmp_path, BASE), "--set", "T=30", "--set", "seed=7",
         "--output", str(out)],
    )
    assert res.exit_code == 0, res.output
    assert len((out / "run.csv").read_text().splitlines()) == 31
    res2 = runner.invoke(main, ["run", _write(tmp_path, BASE), "--set", "lr.zeta=1"])
    assert res2.exit_code == 2
    assert "lr.zeta" in res2.output


def test_cli_audit_roundtrip(tmp_path):
    runner = CliRunner()
    out = tmp_path / "r"
    assert runner.invoke(
        main, ["run", _write(tmp_path, BASE), "--output", str(out)]
    ).exit_code == 0
    res = runner.invoke(main, ["audit", str(out)])
    assert res.exit_code == 0
    assert res.output.count("PASS") == 4


def test_cli_audit_requires_states(tmp_path):
    runner = CliRunner()
    text = BASE.replace("flags: {record_states: true}", "flags: {record_states: false}")
    out = tmp_path / "r"
    assert runner.invoke(
        main, ["run", _write(tmp_path, text), "--output", str(out)]
    ).exit_code == 0
    res = runner.invoke(main, ["audit", str(out)])
    assert res.exit_code == 2
    assert "record_states" in res.output


def test_cli_audit_vanilla_not_applicable(tmp_path):
    runner = CliRunner()
    text = BASE.replace("algorithm: sparq", "algorithm: vanilla")
    out = tmp_path / "v"
    assert runner.invoke(
        main, ["run", _write(tmp_path, text), "--output", str(out)]
    ).exit_code == 0
    res = runner.invoke(main, ["audit", str(out)])
    assert res.exit_code == 0
    assert res.output.count("SKIP") == 4
    assert "not applicable" in res.output


def test_cli_audit_detects_corrupted_states(tmp_path):
    runner = CliRunner()
    out = tmp_path / "r"
    assert runner.invoke(
        main, ["run", _write(tmp_path, BASE), "--output", str(out)]
    ).exit_code == 0
    # flip one replica element on disk, then re-audit
    with np.load(out / "states.npz") as z:
        states = {k: z[k].copy() for k in z.files}
    states["replicas_post"][2, 7, 1] += 1e-12
    np.savez_compressed(out / "states.npz", **states)
    res = runner.invoke(main, ["audit", str(out)])
    assert res.exit_code == 4
    assert "FAIL replica_consistency" in res.output


def test_cli_compare(tmp_path):
    runner = CliRunner()
    cfg_path = _write(tmp_path, BASE.replace("T: 60", "T: 600"))
    a, b = tmp_path / "a", tmp_path / "b"
    assert runner.invoke(main, ["run", cfg_path, "--output", str(a)]).exit_code == 0
    assert runner.invoke(
        main,
        ["run", cfg_path, "--set", "algorithm=vanilla", "--set",
         "compression.kind=identity", "--output", str(b)],
    ).exit_code == 0
    csv_out = tmp_path / "table.csv"
    res = runner.invoke(
        main, ["compare", str(a), str(b), "--target", "0.01", "--out", str(csv_out)]
    )
    assert res.exit_code == 0, res.output
    assert "sparq:a" in res.output and "vanilla:b" in res.output
    rows = csv_out.read_text().splitlines()
    assert rows[0] == "run,reached,t,bits"
    assert len(rows) == 3


def test_cli_compare_needs_two_dirs(tmp_path):
    runner = CliRunner()
    out = tmp_path / "r"
    assert runner.invoke(
        main, ["run", _write(tmp_path, BASE), "--output", str(out)]
    ).exit_code == 0
    res = runner.invoke(main, ["compare", str(out), "--target", "0.01"])
    assert res.exit_code == 2


def test_cli_compare_refuses_mismatched_objectives(tmp_path):
    runner = CliRunner()
    a, b = tmp_path / "a", tmp_path / "b"
    assert runner.invoke(
        main, ["run", _write(tmp_path, BASE), "--output", str(a)]
    ).exit_code == 0
    assert runner.invoke(
        main,
        ["run", _write(tmp_path, BASE), "--set", "objective.d=12", "--output", str(b)],
    ).exit_code == 0
    res = runner.invoke(main, ["compare", str(a), str(b), "--target", "0.01"])
    assert res.exit_code == 2
    assert "refusing" in res.output


def test_cli_compare_marks_unreached(tmp_path):
    runner = CliRunner()
    cfg_path = _write(tmp_path, BASE)
    a, b = tmp_path / "a", tmp_path / "b"
    assert runner.invoke(main, ["run", cfg_path, "--output", str(a)]).exit_code == 0
    assert runner.invoke(
        main, ["run", cfg_path, "--set", "algorithm=choco", "--output", str(b)]
    ).exit_code == 0
    res = runner.invoke(main, ["compare", str(a), str(b), "--target", "1e-30"])
    assert res.exit_code == 0
    assert "unreached" in res.output


def test_cli_certify_omega():
    runner = CliRunner()
    res = runner.invoke(
        main,
        ["certify-omega", "--kind", "sign_top_k", "--kind", "rand_k", "--d", "16",
         "--d", "64", "--trials", "2000"],
    )
    assert res.exit_code == 0, res.output
    assert res.output.count("PASS") == 4


def test_cli_spectral_matches_library():
    from sparqsim import build_ring, consensus_params, spectral_info

    runner = CliRunner()
    res = runner.invoke(main, ["spectral", "--graph", "ring", "--n", "8", "--omega", "0.2"])
    assert res.exit_code == 0
    cp = consensus_params(spectral_info(build_ring(8)), 0.2)
    assert f"{cp.gamma:.12g}" in res.output
    assert f"{cp.p:.12g}" in res.output


def test_flagship_scale_config_runs(tmp_path):
    # the flagship configuration shape: 60 workers on a ring, 5 local steps,
    # eta_t = 1/(t+100), sign-top-k with k=10, constant trigger threshold 5000
    text = """
algorithm: sparq
T: 60
H: 5
seed: 0
graph: {kind: ring, n: 60}
objective: {kind: quadratic, d: 20}
compression: {kind: sign_top_k, k: 10}
lr: {kind: inverse, a: 100.0, b: 1.0}
trigger: {kind: constant, c0: 5000.0}
"""
    runner = CliRunner()
    out = tmp_path / "big"
    res = runner.invoke(main, ["run", _write(tmp_path, text), "--output", str(out)])
    assert res.exit_code == 0, res.output
    assert len((out / "run.csv").read_text().splitlines()) == 61


def test_minimal_vanilla_config(tmp_path):
    text = """
algorithm: vanilla
T: 100
graph: {kind: ring, n: 4}
objective: {kind: quadratic, d: 5}
"""
    runner = CliRunner()
    out = tmp_path / "mini"
    res = runner.invoke(main, ["run", _write(tmp_path, text), "--output", str(out)])
    assert res.exit_code == 0, res.output
    lines = (out / "run.csv").read_text().splitlines()
    assert len(lines) == 101
    assert lines[0].startswith("t,eta_t,c_t,train_loss")


def test_fixed_eta_auto_resolves_to_sqrt_n_over_T(tmp_path):
    text = """
algorithm: vanilla
T: 16
graph: {kind: ring, n: 4}
objective: {kind: quadratic, d: 5}
lr: {kind: fixed, eta: auto}
"""
    runner = CliRunner()
    out = tmp_path / "autoeta"
    res = runner.invoke(main, ["run", _write(tmp_path, text), "--output", str(out)])
    assert res.exit_code == 0, res.output
    first = (out / "run.csv").read_text().splitlines()[1].split(",")
    assert float(first[1]) == 0.5  # sqrt(4 / 16)
