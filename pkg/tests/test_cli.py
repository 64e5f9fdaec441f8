import json

import pytest

from permsort.cli import main
from permsort.model import init_params, ModelConfig, save_checkpoint
from permsort.report import discover

SHORT = ["--timesteps", "2048"]


def train(out, *extra):
    return main(["train", "--length", "3", "--embed-dim", "4", "--out", str(out), *SHORT, *extra])


def test_train_writes_a_complete_run(tmp_path, capsys):
    assert train(tmp_path / "a", "--no-plots") == 0
    run = tmp_path / "a"
    for name in ("manifest", "config.json", "trainlog.jsonl", "metrics.json", "traces/violin.csv"):
        assert (run / name).is_file(), name
    manifest = (run / "manifest").read_text()
    assert "status = complete" in manifest
    assert "final_checkpoint = checkpoints/step_2048" in manifest


def test_train_twice_is_bit_identical(tmp_path):
    train(tmp_path / "a", "--no-plots")
    train(tmp_path / "b", "--no-plots")
    for name in ("checkpoints/step_2048/params.f32", "metrics.json", "trainlog.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_train_refuses_existing_run(tmp_path):
    train(tmp_path / "a", "--no-plots", "--no-probe")
    assert train(tmp_path / "a", "--no-plots", "--no-probe") == 1
    assert train(tmp_path / "a", "--no-plots", "--no-probe", "--force") == 0


@pytest.mark.parametrize("argv", [
    ["train", "--length", "2", "--embed-dim", "4", "--out", "x"],
    ["train", "--length", "4", "--embed-dim", "4", "--out", "x", "--timesteps", "0"],
    ["probe"],
])
def test_usage_errors_exit_one(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_bad_embed_dim_is_a_usage_error(tmp_path):
    assert main(["train", "--length", "4", "--embed-dim", "1", "--out", str(tmp_path / "x")]) == 1


def test_probe_json_round_trips(tmp_path, capsys):
    train(tmp_path / "a", "--no-plots", "--no-probe")
    capsys.readouterr()
    assert main(["probe", "--checkpoint", str(tmp_path / "a"), "--format", "json",
                 "--out", str(tmp_path / "p"), "--no-plots"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((tmp_path / "p" / "metrics.json").read_text())
    assert printed["n_permutations_evaluated"] == 6


def test_probe_writes_figures(tmp_path):
    train(tmp_path / "a", "--no-probe")
    assert main(["probe", "--checkpoint", str(tmp_path / "a"), "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "traces" / "heatmap.png").stat().st_size > 0
    assert (tmp_path / "p" / "traces" / "violin.png").stat().st_size > 0


def test_probe_version_mismatch_exits_two(tmp_path):
    ck = tmp_path / "ck"
    save_checkpoint(ck, init_params(ModelConfig(3, 4), 0), seed=0, timesteps=0)
    (ck / "manifest").write_text((ck / "manifest").read_text().replace("permsort-ckpt-1", "permsort-ckpt-9"))
    assert main(["probe", "--checkpoint", str(ck), "--out", str(tmp_path / "p")]) == 2
    assert main(["probe", "--checkpoint", str(tmp_path / "missing")]) == 2


def test_eval_reports_rollouts(tmp_path, capsys):
    train(tmp_path / "a", "--no-plots", "--no-probe")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "a"), "--max-steps", "20"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n_starts"] == 5
    assert 0.0 <= out["optimal_fraction"] <= out["solved_fraction"] <= 1.0


def write_spec(path, out, **extra):
    spec = {"embed_dims": [2, 4, 8], "lengths": [3], "seeds": 2, "timesteps": 1024,
            "out": str(out), "plots": False, **extra}
    path.write_text(json.dumps(spec))
    return path


def cell_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "sweep_status.json"}


def test_sweep_accounting_resume_and_workers(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("PERMSORT_OUT", raising=False)
    monkeypatch.delenv("PERMSORT_WORKERS", raising=False)
    spec = write_spec(tmp_path / "one.json", tmp_path / "one")
    assert main(["sweep", str(spec)]) == 0
    runs = sorted(p.name for p in (tmp_path / "one").iterdir() if p.is_dir())
    assert runs == [f"L3_d{d}_s{s}" for d in (2, 4, 8) for s in (0, 1)]

    before = {p: p.stat().st_mtime_ns for p in (tmp_path / "one").rglob("params.f32")}
    capsys.readouterr()
    assert main(["sweep", str(spec)]) == 0
    assert capsys.readouterr().out.count("skipped") == 6
    assert before == {p: p.stat().st_mtime_ns for p in (tmp_path / "one").rglob("params.f32")}

    spec2 = write_spec(tmp_path / "two.json", tmp_path / "two")
    assert main(["sweep", str(spec2), "--workers", "2"]) == 0
    assert cell_bytes(tmp_path / "one") == cell_bytes(tmp_path / "two")


def test_sweep_rejects_unknown_keys(tmp_path):
    spec = write_spec(tmp_path / "s.json", tmp_path / "o", colour="red")
    assert main(["sweep", str(spec)]) == 1


def test_report_end_to_end(tmp_path, capsys):
    for seed in ("0", "1"):
        train(tmp_path / "runs" / f"s{seed}", "--no-plots", "--seed", seed)
    assert len(discover(tmp_path / "runs")) == 2
    assert main(["report", str(tmp_path / "runs"), "--out", str(tmp_path / "rep")]) == 0
    for name in ("summary.csv", "agents.csv", "scatter.csv", "value_loss.csv", "report.json",
                 "scatter.png", "accuracy_vs_dim.png", "value_loss.png"):
        assert (tmp_path / "rep" / name).is_file(), name


def test_report_on_empty_dir_exits_two(tmp_path):
    assert main(["report", str(tmp_path)]) == 2
