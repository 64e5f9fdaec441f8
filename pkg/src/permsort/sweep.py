"""Embedding-dimension sweeps: one independent run directory per (length, dim, seed).

Sweep files are JSON objects::

    {
      "embed_dims": [2, 4, 8, 16, 32],
      "lengths": [4, 5],
      "seeds": 5,                 # count (seeds 0..4) or explicit list
      "timesteps": 300000,
      "workers": 1,
      "out": "runs/sweep",
      "layers": 1,                # optional
      "max_steps": 1000           # optional
    }

``PERMSORT_OUT`` and ``PERMSORT_WORKERS`` override ``out`` and ``workers``.
"""

from __future__ import annotations

import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from permsort.env import EnvConfig
from permsort.errors import ContractViolation
from permsort.model import ModelConfig
from permsort.ppo import PPOConfig
from permsort.runs import is_complete, train_run

log = logging.getLogger(__name__)

DEFAULT_DIMS = (2, 4, 8, 16, 32)
DEFAULT_LENGTHS = (4, 5)


@dataclass(frozen=True)
class SweepSpec:
    embed_dims: tuple[int, ...] = DEFAULT_DIMS
    lengths: tuple[int, ...] = DEFAULT_LENGTHS
    seeds: tuple[int, ...] = tuple(range(5))
    timesteps: int = 300_000
    workers: int = 1
    out: str = "runs/sweep"
    layers: int = 1
    max_steps: int = 1000
    plots: bool = True

    def __post_init__(self):
        if self.workers < 1:
            raise ContractViolation("workers must be >= 1")
        keys = self.cells()
        if len(set(keys)) != len(keys):
            raise ContractViolation("sweep cells are not unique; check for repeated dims, lengths or seeds")
        for length, dim, _ in keys:
            ModelConfig(length, dim, self.layers)

    @classmethod
    def from_dict(cls, d: dict, environ=os.environ) -> "SweepSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractViolation(f"unknown sweep keys: {sorted(unknown)}")
        if isinstance(d.get("seeds"), int):
            d["seeds"] = tuple(range(d["seeds"]))
        for key in ("embed_dims", "lengths", "seeds"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        if environ.get("PERMSORT_OUT"):
            d["out"] = environ["PERMSORT_OUT"]
        if environ.get("PERMSORT_WORKERS"):
            d["workers"] = int(environ["PERMSORT_WORKERS"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path, environ=os.environ) -> "SweepSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ContractViolation(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, environ)

    def cells(self) -> list[tuple[int, int, int]]:
        return [(n, d, s) for n in self.lengths for d in self.embed_dims for s in self.seeds]


def cell_dir(out: str | Path, length: int, dim: int, seed: int) -> Path:
    return Path(out) / f"L{length}_d{dim}_s{seed}"


def run_cell(out: str, length: int, dim: int, seed: int, timesteps: int, layers: int,
             max_steps: int, plots: bool) -> tuple[str, str]:
    path = cell_dir(out, length, dim, seed)
    try:
        train_run(path, PPOConfig(total_timesteps=timesteps, seed=seed),
                  ModelConfig(length, dim, layers), EnvConfig(length, max_steps, seed), plots=plots)
        return str(path), "complete"
    except Exception:  # recorded per cell; the sweep carries on
        (path / "error.txt").write_text(traceback.format_exc())
        return str(path), "failed"


def run_sweep(spec: SweepSpec) -> dict[str, str]:
    """Run every cell not already complete.  Returns ``{cell_dir: status}``."""
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    status, todo = {}, []
    for length, dim, seed in spec.cells():
        path = cell_dir(out, length, dim, seed)
        if is_complete(path):
            status[str(path)] = "skipped"
        else:
            path.mkdir(parents=True, exist_ok=True)
            todo.append((str(out), length, dim, seed, spec.timesteps, spec.layers, spec.max_steps, spec.plots))
    log.info("%d cells, %d to run, %d already complete", len(spec.cells()), len(todo), len(status))
    if spec.workers == 1:
        results = [run_cell(*args) for args in todo]
    else:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(run_cell, *zip(*todo))) if todo else []
    status.update(dict(results))
    (out / "sweep_status.json").write_text(json.dumps(dict(sorted(status.items())), indent=2) + "\n")
    return status
