import json

import numpy as np
import pytest

from ppo_repr import harness
from ppo_repr.cli import main
from ppo_repr.diagnostics import read_records
from ppo_repr.errors import ConfigurationError
from ppo_repr.harness import (
    load_config,
    load_config_text,
    parse_override,
    resummarize,
    run_experiment,
    summarize_records,
)

SMOKE = """
name = "smoke"
seeds = [0]
total_steps = 512

[env]
kind = "chain_dense"

[network]
hidden_widths = [8, 8]

[ppo]
n_envs = 2
steps_per_env = 64
minibatch_size = 64
epochs = 2

[logging]
capacity_every = 0.5

[capacity]
dataset_steps = 128
n_envs = 2
epochs = 1
minibatch_size = 64
"""


def test_minimal_config_resolves_defaults():
    cfg = load_config_text('[env]\nkind = "chain_dense"\n')
    assert cfg.total_steps == 200_000 and cfg.seeds == (0,)
    assert cfg.ppo["epochs"] == 4 and cfg.network["hidden_widths"] == (64, 64)
    cont = load_config_text('[env]\nkind = "point_mass"\n')
    assert cont.total_steps == 300_000


def test_unknown_keys_rejected():
    for text in ("bogus = 1", "[ppo]\nepoch = 4", "[toy]\nalpha = 3"):
        with pytest.raises(ConfigurationError):
            load_config_text(text)
    with pytest.raises(ConfigurationError) as exc:
        load_config_text("[ppo]\nclip_eps = 'wide'")
    assert "ppo.clip_eps" in str(exc.value)


def test_minibatch_larger_than_batch():
    with pytest.raises(ConfigurationError) as exc:
        load_config_text("[ppo]\nn_envs = 2\nsteps_per_env = 8\nminibatch_size = 64")
    msg = str(exc.value)
    assert "minibatch_size" in msg and ("n_envs" in msg or "steps_per_env" in msg)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "nope.toml")


def test_round_trip(tmp_path):
    cfg = load_config_text(SMOKE + "\n", ["ppo.epochs=[1, 4]", "network.shared_trunk=true"])
    again = load_config_text(cfg.to_toml())
    assert again == cfg
    assert again.to_toml() == cfg.to_toml()


def test_overrides():
    assert parse_override("ppo.epochs=16") == (["ppo", "epochs"], 16)
    assert parse_override("env.kind=point_mass") == (["env", "kind"], "point_mass")
    assert parse_override("ppo.pfo_coef=0.5") == (["ppo", "pfo_coef"], 0.5)
    with pytest.raises(ConfigurationError):
        parse_override("epochs")


def test_epochs_grid_distinct_paths():
    cfg = load_config_text(SMOKE, ["ppo.epochs=[1, 4, 16]", "seeds=[0, 1]"])
    variants = cfg.variants()
    assert [v[0] for v in variants] == ["epochs=1", "epochs=4", "epochs=16"]
    assert [v[2].ppo.epochs for v in variants] == [1, 4, 16]
    assert len({v[0] for v in variants}) == 3


def test_grid_over_two_axes():
    cfg = load_config_text(SMOKE, ["ppo.epochs=[1, 4]", "network.shared_trunk=[false, true]"])
    assert len(cfg.variants()) == 4
    assert {v[2].ppo.shared_trunk for v in cfg.variants()} == {False, True}


def test_run_experiment_artifacts_and_reproducibility(tmp_path):
    cfg = load_config_text(SMOKE)
    status, root = run_experiment(cfg, tmp_path / "a")
    assert status == 0
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["status"] == "completed" and manifest["seeds"] == [0]
    assert manifest["config"]["ppo"]["epochs"] == 2
    run = root / manifest["runs"][0]["metrics"]
    recs = read_records(run)
    assert len(recs) == 5  # one per batch plus the initial record
    ckpts = sorted(p.name for p in (run.parent / "checkpoints").iterdir())
    assert ckpts[0] == "step_000000000.bin" and len(ckpts) >= 2
    _, root_b = run_experiment(cfg, tmp_path / "b")
    assert (root_b / manifest["runs"][0]["metrics"]).read_bytes() == run.read_bytes()
    stored = json.loads((run.parent / "summary.json").read_text())
    assert resummarize(run.parent) == stored


def test_summary_tail_window_recomputes():
    recs = [{"step": s, "batch": i, "episode_return_mean": float(i) ** 0.5}
            for i, s in enumerate(range(0, 2001, 100))]
    summary = summarize_records(recs, 2000)
    tail = [r["episode_return_mean"] for r in recs if r["step"] > 1900]
    assert abs(summary["metrics"]["episode_return_mean"] - np.mean(tail)) < 1e-12


def test_empty_run_summary_is_header_only():
    summary = summarize_records([])
    assert summary["n_records"] == 0 and summary["metrics"] == {}


def test_failure_leaves_partial_manifest(tmp_path, monkeypatch):
    cfg = load_config_text(SMOKE, ["seeds=[0, 1]"])
    real = harness.run_single

    def flaky(tc, run_dir, checkpoints=True):
        if tc.seed == 1:
            raise RuntimeError("disk full")
        return real(tc, run_dir, checkpoints)

    monkeypatch.setattr(harness, "run_single", flaky)
    status, root = run_experiment(cfg, tmp_path)
    assert status == 1
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert [r.get("status") for r in manifest["runs"]] == ["completed", "failed"]
    assert "disk full" in manifest["failures"][0]["error"]
    assert (root / manifest["runs"][0]["metrics"]).is_file()


# -- CLI -----------------------------------------------------------------------------


def test_cli_toy(tmp_path, capsys):
    assert main(["toy", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "toy_alpha3.csv").read_text()
    assert text.splitlines()[0] == "update_index,state,theta1,theta2,p_x,p_y"
    assert len(text.splitlines()) == 22
    assert main(["toy", "--override", "alpha=-1", "--out", str(tmp_path / "neg.csv")]) == 0
    assert (tmp_path / "neg.csv").is_file()
    assert main(["toy", "--override", "gamma=1"]) == 2


def test_cli_train_summarize_correlate_capacity(tmp_path, capsys):
    cfg = tmp_path / "smoke.toml"
    cfg.write_text(SMOKE)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "runs"), "--seed", "3"]) == 0
    root = tmp_path / "runs" / "smoke"
    assert (root / "base" / "seed_3" / "metrics.jsonl").is_file()
    assert main(["summarize", str(root), "--check"]) == 0
    assert main(["correlate", str(root), "--pair", "actor_effective_rank:actor_srank", "--width", "8"]) == 0
    ckpt = sorted((root / "base" / "seed_3" / "checkpoints").iterdir())[-1]
    capsys.readouterr()
    assert main(["capacity", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["actor_capacity_loss"] >= 0 and result["critic_capacity_loss"] >= 0


def test_cli_config_errors_exit_2(tmp_path):
    assert main(["train", "--override", "ppo.nonsense=1", "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.toml")]) == 2
