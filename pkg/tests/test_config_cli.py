import csv
import json

import numpy as np
import pytest

from vnfsim import cli, numkernel
from vnfsim.config import config_hash, load_config, parse_override
from vnfsim.errors import ConfigInvalid

BASE = """
[experiment]
name = "tiny"
seeds = [3]

[simengine]
episodes = 5

[workload]
max_services = 15
"""

COMPARE = BASE + """
[[variant]]
name = "fifo"
[variant.simengine]
scheduler = "fifo"

[[variant]]
name = "adsch"
[variant.simengine]
scheduler = "adsch"
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text(BASE)
    return p


def test_run_writes_csv_and_manifest(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    original = cfg_file.read_text()
    assert cli.main(["run", "--config", str(cfg_file), "--out", str(out)]) == 0
    rows = (out / "tiny_seed3.csv").read_text().splitlines()
    assert rows[0].split(",")[0] == "episode" and len(rows) == 6
    assert "\r" not in (out / "tiny_seed3.csv").read_bytes().decode()
    manifest = json.loads((out / "tiny_seed3.manifest.json").read_text())
    assert manifest["seed"] == 3 and len(manifest["config_hash"]) == 64
    assert "numpy" in manifest["versions"]
    assert (out / "tiny_seed3.events.log").stat().st_size > 0
    assert cfg_file.read_text() == original


def test_missing_config_exits_one_without_output(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(tmp_path / "nope.toml"), "--out", str(out)]) == 1
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


def test_seed_override_is_byte_stable(cfg_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", str(cfg_file), "--out", str(a), "--seed", "7"]) == 0
    assert cli.main(["run", "--config", str(cfg_file), "--out", str(b), "--seed", "7"]) == 0
    for name in ("tiny_seed7.csv", "tiny_seed7.events.log", "tiny_seed7.manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_out_dir_from_environment(cfg_file, tmp_path, monkeypatch):
    env_out = tmp_path / "env"
    monkeypatch.setenv(cli.OUT_ENV, str(env_out))
    assert cli.main(["run", "--config", str(cfg_file)]) == 0
    assert (env_out / "tiny_seed3.csv").exists()


def test_unknown_keys_and_bad_values_rejected(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text(BASE + "\n[adsch]\ngamma_typo = 0.5\n")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    with pytest.raises(ConfigInvalid):
        load_config(None, ["nosuch.key=1"])
    with pytest.raises(ConfigInvalid):
        load_config(None, ["adsch.gamma=\"high\""])
    with pytest.raises(ConfigInvalid):
        load_config(None, ["simengine.scheduler=lottery"])
    assert cli.main(["run", "--bogus"]) == 1


def test_overrides_apply():
    exp = load_config(None, ["adsch.gamma=0.5", "simengine.scheduler=fifo", "netmodel.capacity_profile=scarce",
                             "workload.twt_max=40"])
    cfg = exp.pipeline
    assert cfg.adsch.gamma == 0.5 and cfg.scheduler == "fifo" and cfg.capacity_profile == "scarce"
    assert cfg.workload.twt_max == 40.0 and isinstance(cfg.workload.twt_max, float)
    assert parse_override("a.b=[1, 2]") == (["a", "b"], [1, 2])
    assert parse_override("a.b=word") == (["a", "b"], "word")


def test_config_hash_ignores_seed_only():
    a = load_config(None, []).with_seed(1)
    b = load_config(None, []).with_seed(2)
    c = load_config(None, ["adsch.tau=0.02"]).with_seed(1)
    assert config_hash(a) == config_hash(b) != config_hash(c)


def test_compare_summary_recount_and_streams(tmp_path):
    p = tmp_path / "cmp.toml"
    p.write_text(COMPARE)
    out = tmp_path / "out"
    assert cli.main(["compare", "--config", str(p), "--out", str(out), "--window", "3"]) == 0
    lines = (out / "tiny.summary.csv").read_text().splitlines()
    footer = [l for l in lines if l.startswith("# streams")]
    assert footer and all("identical=yes" in l for l in footer)
    rows = list(csv.DictReader([l for l in lines if not l.startswith("#")]))
    per_seed = [r for r in rows if r["seed"] != "mean"]
    assert {r["variant"] for r in per_seed} == {"fifo", "adsch"}
    for r in per_seed:
        series = cli.read_metrics_csv(out / f"tiny-{r['variant']}_seed3.csv")
        assert float(r["sar"]) == pytest.approx(np.mean(series["sar"][-3:]), rel=1e-12)
        assert float(r["remaining_cpu_avg"]) == pytest.approx(np.mean(series["remaining_cpu_avg"][-3:]))


def test_identical_variants_identical_columns(tmp_path):
    p = tmp_path / "same.toml"
    p.write_text(BASE + '\n[[variant]]\nname = "a"\n[[variant]]\nname = "b"\n')
    out = tmp_path / "out"
    assert cli.main(["compare", "--config", str(p), "--out", str(out)]) == 0
    rows = list(csv.reader(l for l in (out / "tiny.summary.csv").read_text().splitlines() if not l.startswith("#")))
    a = [r for r in rows if r[0] == "a"]
    b = [r for r in rows if r[0] == "b"]
    assert [r[1:] for r in a] == [r[1:] for r in b]


def test_compare_needs_two_variants(cfg_file, tmp_path):
    assert cli.main(["compare", "--config", str(cfg_file), "--out", str(tmp_path / "o")]) == 1


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_selftest_catches_corrupted_backward(monkeypatch):
    real = numkernel.Mlp.backward

    def broken(self, x, upstream, cache=None):
        grads, dx = real(self, x, upstream, cache)
        return [g * 1.01 for g in grads], dx
    monkeypatch.setattr(numkernel.Mlp, "backward", broken)
    assert cli.main(["selftest"]) == 3


def test_runtime_error_exit_code(cfg_file, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(cli, "run_experiment", boom)
    assert cli.main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "o")]) == 2
