"""Run-directory layout and the train / probe steps that populate it.

A run directory looks like::

    manifest              key = value, written first and finalized last
    config.json           full configuration snapshot
    trainlog.jsonl        one JSON object per optimization update
    checkpoints/step_<N>/ manifest + params.f32
    metrics.json          probe report for the final checkpoint
    traces/*.csv          heatmap and violin tables (plus rendered figures)
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict
from pathlib import Path

from permsort.env import EnvConfig
from permsort.errors import CheckpointVersionError
from permsort.model import ModelConfig, load_checkpoint, read_manifest
from permsort.ppo import PPOConfig, train
from permsort.probe import ProbeConfig, extract_trace_data, run_probes, write_trace_csvs

log = logging.getLogger(__name__)

RUN_FORMAT = "permsort-run-1"


def write_manifest(path: Path, values: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    tmp.replace(path)


def run_manifest(run_dir: str | Path) -> dict[str, str]:
    path = Path(run_dir) / "manifest"
    if not path.is_file():
        raise CheckpointVersionError(f"{run_dir} is not a run directory (no manifest)")
    m = read_manifest(path)
    if m.get("format") != RUN_FORMAT:
        raise CheckpointVersionError(f"{run_dir}: unsupported run format {m.get('format')!r}")
    return m


def is_complete(run_dir: str | Path) -> bool:
    try:
        return run_manifest(run_dir).get("status") == "complete"
    except CheckpointVersionError:
        return False


def train_run(run_dir: str | Path, ppo_cfg: PPOConfig, model_cfg: ModelConfig, env_cfg: EnvConfig,
              probe: bool = True, plots: bool = True) -> Path:
    """Train into ``run_dir`` and, by default, probe the final checkpoint."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    base = {
        "format": RUN_FORMAT,
        "length": model_cfg.length,
        "embed_dim": model_cfg.embed_dim,
        "num_layers": model_cfg.num_layers,
        "seed": ppo_cfg.seed,
        "timesteps": ppo_cfg.total_timesteps,
        "max_steps": env_cfg.max_steps,
    }
    write_manifest(run_dir / "manifest", {**base, "status": "running"})
    snapshot = {"ppo": asdict(ppo_cfg), "model": asdict(model_cfg), "env": asdict(env_cfg)}
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    try:
        result = train(ppo_cfg, model_cfg, env_cfg, run_dir)
    except FloatingPointError:
        write_manifest(run_dir / "manifest", {**base, "status": "diverged"})
        raise
    final = f"checkpoints/step_{result.global_step}"
    base["final_checkpoint"] = final
    base["global_step"] = result.global_step
    write_manifest(run_dir / "manifest", {**base, "status": "trained"})
    if probe:
        probe_checkpoint(run_dir / final, run_dir, plots=plots)
    write_manifest(run_dir / "manifest", {**base, "status": "complete"})
    return run_dir


def resolve_checkpoint(path: str | Path) -> Path:
    """Accept either a checkpoint directory or a run directory (its final checkpoint)."""
    path = Path(path)
    if (path / "params.f32").is_file():
        return path
    if (path / "manifest").is_file():
        m = run_manifest(path)
        if "final_checkpoint" in m:
            return path / m["final_checkpoint"]
        steps = sorted((path / "checkpoints").glob("step_*"),
                       key=lambda p: int(re.sub(r"\D", "", p.name) or 0))
        if steps:
            return steps[-1]
    raise CheckpointVersionError(f"no checkpoint found at {path}")


def probe_checkpoint(checkpoint: str | Path, out_dir: str | Path | None = None,
                     cfg: ProbeConfig = ProbeConfig(), plots: bool = True):
    """Run every probe, write ``metrics.json`` and ``traces/`` under ``out_dir``."""
    ckpt = resolve_checkpoint(checkpoint)
    params, manifest = load_checkpoint(ckpt)
    if out_dir is None:
        out_dir = ckpt.parent.parent if ckpt.parent.name == "checkpoints" else ckpt
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = run_probes(params, cfg)
    report.extra = {"checkpoint": str(ckpt.relative_to(out_dir)) if ckpt.is_relative_to(out_dir) else str(ckpt),
                    "timesteps": int(manifest["timesteps"])}
    (out_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    data = extract_trace_data(params, cfg)
    write_trace_csvs(data, out_dir / "traces")
    if plots:
        from permsort import plotting

        plotting.plot_trace_data(data, out_dir / "traces")
    return report
