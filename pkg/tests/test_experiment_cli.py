import json

import pytest

from acs_sim import cli
from acs_sim.experiment import REPORT_KEYS, ExperimentConfig, run_experiment


def _cfg(**kw):
    base = dict(name="off-graph-callsite", b=8, trials=400, seed=11)
    base.update(kw)
    return ExperimentConfig(**base)


def test_report_fields_and_byte_identical_reruns(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run_experiment(_cfg(), str(a))
    run_experiment(_cfg(), str(b))
    assert a.read_bytes() == b.read_bytes()
    body = json.loads(a.read_text())
    assert set(REPORT_KEYS) <= set(body)
    assert body["config"]["seed"] == 11


def test_parallel_workers_do_not_change_aggregates():
    one, _ = run_experiment(_cfg(workers=1))
    two, _ = run_experiment(_cfg(workers=2))
    one["config"].pop("workers"), two["config"].pop("workers")
    assert one == two


def test_single_trial_flags_degenerate_ci():
    body, _ = run_experiment(_cfg(trials=1))
    assert body["ci_degenerate"] is True
    assert body["ci_low"] <= body["rate"] <= body["ci_high"]


def test_config_validation():
    for bad in (dict(name="teleport"), dict(trials=0), dict(format="xml"),
                dict(process_model="loose"), dict(b=40), dict(scheme="magic"), dict(seed=None)):
        with pytest.raises(ValueError):
            _cfg(**bad)


def test_unwritable_output():
    with pytest.raises(OSError):
        run_experiment(_cfg(trials=2), "/no/such/dir/out.json")


def test_exit_status_follows_verdict():
    _, ok = run_experiment(_cfg(name="reuse-sp", scheme="sp-modifier", trials=20))
    assert ok == 0
    # deliberately tight tolerance on a noisy mean
    _, bad = run_experiment(ExperimentConfig(name="fork-bruteforce", b=4, trials=20, seed=1,
                                             process_model="lenient", tolerance=1e-6))
    assert bad == 1


def test_on_graph_unmasked_b16_end_to_end():
    body, code = run_experiment(ExperimentConfig(name="on-graph", scheme="acs-nomask", b=16,
                                                 trials=1000, seed=21))
    assert code == 0 and body["verdict"] is True
    assert body["analytic_ref"] == pytest.approx(320.85, abs=0.01)


def test_csv_projection(tmp_path):
    out = tmp_path / "r.csv"
    run_experiment(_cfg(format="csv"), str(out))
    header, row = out.read_text().splitlines()
    cols = header.split(",")
    assert "rate" in cols and "config.seed" in cols
    assert row.split(",")[cols.index("n_trials")] == "400"


def test_cli_analytic(capsys):
    assert cli.main(["analytic", "--formula", "p_collision", "--b", "1", "--q", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["value"] == 0.5
    assert cli.main(["analytic", "--formula", "p_collision", "--b", "4"]) == 2


def test_cli_attack_and_game(tmp_path, capsys):
    out = tmp_path / "x.json"
    code = cli.main(["attack", "--type", "reuse-sp", "--scheme", "sp-modifier", "--b", "16",
                     "--trials", "50", "--seed", "1", "--out", str(out), "--format", "json"])
    assert code == 0 and json.loads(out.read_text())["rate"] == 1.0
    assert "-> " + str(out) in capsys.readouterr().out
    code = cli.main(["game", "--name", "pac-collision", "--b", "8", "--q", "16", "--masked",
                     "--trials", "200", "--seed", "2"])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["config"]["masked"] is True


def test_cli_rejects_unknown_attack():
    with pytest.raises(SystemExit):
        cli.main(["attack", "--type", "teleport"])


def test_cli_suite_subset(capsys):
    assert cli.main(["suite", "--acceptance", "--only", "11"]) == 1
    assert "criterion 11 FAIL" in capsys.readouterr().out
