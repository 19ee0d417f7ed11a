import json

import pytest

from zofa import cli

FAST = """
[task]
seed = 8
dim = 8
classes = 4
n_train = 600
n_test = 240
hidden = [8]

[pretrain]
steps = 120
lr = 0.05

[protocol]
samples_per_domain = 48
severity = 3

[adapt]
batch = 4
lr = 0.02
mu = 0.1
align_lambda = 2.0
params = "norm"
seed = 5

[run]
"""


def write_cfg(tmp_path, extra=""):
    path = tmp_path / "run.conf"
    model = tmp_path / "model.zofa"
    out = tmp_path / "out"
    text = FAST + f'model = "{model}"\nout = "{out}"\n' + extra
    path.write_text(text)
    return path, model, out


def test_pretrain_then_adapt_produces_artifacts(tmp_path, capsys):
    cfg_path, model, out = write_cfg(tmp_path)
    assert cli.main(["pretrain", "--config", str(cfg_path)]) == 0
    assert model.exists()
    first = model.read_bytes()
    assert cli.main(["pretrain", "--config", str(cfg_path)]) == 0
    assert model.read_bytes() == first  # same seed, bit-identical file

    assert cli.main(["adapt", "--config", str(cfg_path)]) == 0
    trace = (out / "trace.csv").read_bytes()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["adapt"]["mode"] == "zofa"
    assert summary["total_forwards"] == 2 * summary["total_samples"]
    assert len(summary["domains"]) == 15

    # byte-for-byte reproducible artifacts
    assert cli.main(["adapt", "--config", str(cfg_path)]) == 0
    assert (out / "trace.csv").read_bytes() == trace


def test_adapt_without_model_is_io_error(tmp_path):
    cfg_path, model, out = write_cfg(tmp_path)
    assert cli.main(["adapt", "--config", str(cfg_path)]) == cli.EXIT_IO


def test_alignment_weight_without_stats_is_config_error(tmp_path):
    cfg_path, model, out = write_cfg(tmp_path, 'quantize_bits = 0\n')
    text = cfg_path.read_text().replace("[pretrain]", "[pretrain]\nstore_stats = false")
    cfg_path.write_text(text)
    assert cli.main(["pretrain", "--config", str(cfg_path)]) == 0
    assert cli.main(["adapt", "--config", str(cfg_path)]) == cli.EXIT_CONFIG
    # the entropy-only mode runs fine without stats
    assert cli.main(["adapt", "--config", str(cfg_path), "--mode", "zofa-entropy"]) == 0


def test_bad_config_reports_exit_code(tmp_path):
    path = tmp_path / "broken.conf"
    path.write_text("[task]\nunknown_key = 3\n")
    assert cli.main(["adapt", "--config", str(path)]) == cli.EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_pretraining_reports_numeric_exit_code(tmp_path):
    cfg_path, model, out = write_cfg(tmp_path)
    text = cfg_path.read_text().replace("lr = 0.05", "lr = 1000000.0")
    cfg_path.write_text(text)
    assert cli.main(["pretrain", "--config", str(cfg_path)]) == cli.EXIT_NUMERIC


def test_quantize_flag_runs_quantized_model(tmp_path):
    cfg_path, model, out = write_cfg(tmp_path)
    assert cli.main(["pretrain", "--config", str(cfg_path)]) == 0
    rc = cli.main(["adapt", "--config", str(cfg_path), "--quantize-bits", "8",
                   "--mode", "zofa-entropy"])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["run"]["quantize_bits"] == 8


def test_protocol_flag_switches_policy(tmp_path):
    cfg_path, model, out = write_cfg(tmp_path)
    assert cli.main(["pretrain", "--config", str(cfg_path)]) == 0
    assert cli.main(["adapt", "--config", str(cfg_path), "--protocol", "continual"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["protocol"]["policy"] == "continual"


def test_single_setting_sweep_matches_adapt(tmp_path):
    cfg_path, model, out = write_cfg(tmp_path)
    assert cli.main(["pretrain", "--config", str(cfg_path)]) == 0
    assert cli.main(["adapt", "--config", str(cfg_path), "--mode", "zofa"]) == 0
    adapt_acc = json.loads((out / "summary.json").read_text())["avg_acc"]
    assert cli.main(["sweep", "--config", str(cfg_path), "--axis", "estimator",
                     "--seeds", "5"]) == 0
    rows = (out / "sweep_estimator.csv").read_text().splitlines()
    header = rows[0].split(",")
    body = {r.split(",")[1]: r.split(",") for r in rows[1:]}
    acc_col = header.index("avg_acc")
    assert float(body["mode=zofa"][acc_col]) == pytest.approx(adapt_acc, rel=1e-12)


def test_components_sweep_enumerates_full_grid(tmp_path):
    cfg_path, model, out = write_cfg(tmp_path)
    assert cli.main(["pretrain", "--config", str(cfg_path)]) == 0
    assert cli.main(["sweep", "--config", str(cfg_path), "--axis", "components",
                     "--seeds", "5"]) == 0
    rows = (out / "sweep_components.csv").read_text().splitlines()
    assert len(rows) == 17  # header + 2^4 settings


def test_probe_commands_emit_reports(tmp_path):
    cfg_path, model, out = write_cfg(tmp_path)
    assert cli.main(["pretrain", "--config", str(cfg_path)]) == 0
    assert cli.main(["probe", "--config", str(cfg_path), "--kind", "alignment",
                     "--trials", "5"]) == 0
    payload = json.loads((out / "probe_alignment.json").read_text())
    assert payload["trials"] == 5
    assert cli.main(["probe", "--config", str(cfg_path), "--kind", "shortcut",
                     "--trials", "2000"]) == 0
    shortcut = json.loads((out / "probe_shortcut.json").read_text())
    assert set(shortcut["projections"]) == {"A=1", "A=5", "A=10"}


def test_env_threads_controls_sweep_workers(tmp_path, monkeypatch):
    cfg_path, model, out = write_cfg(tmp_path)
    assert cli.main(["pretrain", "--config", str(cfg_path)]) == 0
    monkeypatch.setenv("ZOFA_THREADS", "2")
    assert cli.main(["sweep", "--config", str(cfg_path), "--axis", "k",
                     "--seeds", "5"]) == 0
    rows = (out / "sweep_k.csv").read_text().splitlines()
    assert len(rows) == 7
