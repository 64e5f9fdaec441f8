"""Interpretability probes over the final attention row.

Three behavioural/representational measures are computed over an evaluation
set of permutations:

* sorting accuracy of the greedy action,
* how faithfully the last attention row orders the tokens (non-inversion
  proportion against the input permutation),
* how often the greedy swap sits at the extreme adjacent difference of that
  row (top-k hit rates).

The array-level functions take permutations, actions and rows directly so they
can score hand-written policies as well as trained networks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from permsort.diffcore import Tensor
from permsort.env import all_permutations
from permsort.errors import ContractViolation
from permsort.model import forward, greedy_from_logits

MOST_NEGATIVE = "most-negative"
MOST_POSITIVE = "most-positive"
CONVENTIONS = (MOST_NEGATIVE, MOST_POSITIVE)
EXHAUSTIVE_MAX_LENGTH = 8
SAMPLE_SIZE = 40_320


@dataclass(frozen=True)
class ProbeConfig:
    weight_source: str = "post"  # "post" softmax weights or "pre" softmax scores
    sample_size: int = SAMPLE_SIZE
    seed: int = 0
    batch_size: int = 4096

    def __post_init__(self):
        if self.weight_source not in ("post", "pre"):
            raise ContractViolation(f"weight_source must be 'post' or 'pre', got {self.weight_source!r}")


def evaluation_set(length: int, cfg: ProbeConfig = ProbeConfig()) -> np.ndarray:
    """All ``length!`` permutations up to length 8, otherwise a seeded duplicate-free sample."""
    if length <= EXHAUSTIVE_MAX_LENGTH:
        return all_permutations(length)
    rng = np.random.default_rng(cfg.seed)
    seen: dict[tuple, None] = {}
    while len(seen) < cfg.sample_size:
        seen.setdefault(tuple(rng.permutation(length) + 1))
    return np.array(list(seen), dtype=np.int64)


def _unsorted_rows(perms: np.ndarray) -> np.ndarray:
    return ~np.all(np.diff(perms, axis=1) > 0, axis=1)


# array-level metrics -------------------------------------------------------

def correct_swaps(perms: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Whether each swap hits a descending pair, i.e. strictly reduces inversions."""
    rows = np.arange(len(perms))
    return perms[rows, actions] > perms[rows, actions + 1]


def accuracy_from_actions(perms: np.ndarray, actions: np.ndarray) -> float:
    """Fraction of unsorted states whose chosen swap is correct."""
    perms, actions = np.asarray(perms), np.asarray(actions)
    keep = _unsorted_rows(perms)
    if not keep.any():
        return float("nan")
    return float(correct_swaps(perms[keep], actions[keep]).mean())


def non_inversion_batch(weights: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """Per-row share of position pairs ordered the same way by tokens and weights.

    Ties in the weights never count as agreement.
    """
    w = np.asarray(weights, dtype=np.float64)
    p = np.asarray(perms)
    n = p.shape[-1]
    i, j = np.triu_indices(n, k=1)
    agree = np.sign(p[..., j] - p[..., i]) == np.sign(w[..., j] - w[..., i])
    agree &= w[..., j] != w[..., i]
    return agree.sum(axis=-1) / math.comb(n, 2)


def non_inversion_proportion(last_row: Sequence[float], p: Sequence[int]) -> float:
    w = np.asarray(last_row, dtype=np.float64)
    if w.shape != (len(p),):
        raise ContractViolation(f"weight vector length {w.shape} does not match permutation length {len(p)}")
    return float(non_inversion_batch(w[None], np.asarray(p)[None])[0])


def _sign(convention: str) -> float:
    if convention == MOST_NEGATIVE:
        return 1.0
    if convention == MOST_POSITIVE:
        return -1.0
    raise ContractViolation(f"unknown sign convention {convention!r}")


def swap_ranks_batch(weights: np.ndarray, actions: np.ndarray, convention: str) -> np.ndarray:
    """1-based rank of each chosen action when adjacent differences are ordered by the convention."""
    w = np.asarray(weights, dtype=np.float64)
    keyed = _sign(convention) * np.diff(w, axis=-1)
    order = np.argsort(keyed, axis=-1, kind="stable")
    pos = np.argmax(order == np.asarray(actions)[..., None], axis=-1)
    return pos + 1


def swap_rank(last_row: Sequence[float], chosen: int, convention: str = MOST_NEGATIVE) -> int:
    w = np.asarray(last_row, dtype=np.float64)
    if not 0 <= chosen < len(w) - 1:
        raise ContractViolation(f"action {chosen} out of range for row length {len(w)}")
    return int(swap_ranks_batch(w[None], np.array([chosen]), convention)[0])


def top_k_from_ranks(ranks: np.ndarray, num_actions: int) -> dict[int, float]:
    ranks = np.asarray(ranks)
    return {k: float(np.mean(ranks <= k)) for k in range(1, num_actions + 1)}


def select_convention(weights: np.ndarray, actions: np.ndarray):
    """Pick the agent-level sign convention with the higher top-1 rate (ties: most-negative)."""
    best = None
    for conv in CONVENTIONS:
        ranks = swap_ranks_batch(weights, actions, conv)
        rates = top_k_from_ranks(ranks, np.shape(weights)[-1] - 1)
        if best is None or rates[1] > best[1][1]:
            best = (conv, rates, ranks)
    return best


def trap_mask(perms: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Incorrect swaps of the adjacent pair with the largest token gap.

    The swapped pair looks most out of place locally (largest
    ``|p[i+1] - p[i]|``), yet swapping it adds an inversion.
    """
    perms, actions = np.asarray(perms), np.asarray(actions)
    gaps = np.abs(np.diff(perms, axis=1))
    chosen_gap = gaps[np.arange(len(perms)), actions]
    return ~correct_swaps(perms, actions) & (chosen_gap == gaps.max(axis=1))


def greedy_trap_rate_from_actions(perms: np.ndarray, actions: np.ndarray) -> float:
    perms, actions = np.asarray(perms), np.asarray(actions)
    keep = _unsorted_rows(perms)
    if not keep.any():
        return float("nan")
    return float(trap_mask(perms[keep], actions[keep]).mean())


# model-level probes --------------------------------------------------------

@dataclass
class Evaluation:
    perms: np.ndarray
    actions: np.ndarray
    last_row_scores: np.ndarray
    last_row_weights: np.ndarray

    def rows(self, source: str) -> np.ndarray:
        return self.last_row_weights if source == "post" else self.last_row_scores


def evaluate(params: dict[str, Tensor], perms: np.ndarray, batch_size: int = 4096) -> Evaluation:
    """Greedy actions and final-layer last attention rows for every permutation."""
    actions, scores, weights = [], [], []
    for start in range(0, len(perms), batch_size):
        out = forward(params, perms[start:start + batch_size])
        actions.append(greedy_from_logits(out.action_logits.data))
        scores.append(out.trace.last_row_scores)
        weights.append(out.trace.last_row_weights)
    return Evaluation(perms, np.concatenate(actions), np.concatenate(scores), np.concatenate(weights))


def _evaluate(params, cfg: ProbeConfig) -> Evaluation:
    n = params["token_embed"].shape[0]
    return evaluate(params, evaluation_set(n, cfg), cfg.batch_size)


def sorting_accuracy(params: dict[str, Tensor], cfg: ProbeConfig = ProbeConfig()) -> float:
    ev = _evaluate(params, cfg)
    return accuracy_from_actions(ev.perms, ev.actions)


def top_k_hit_rates(params: dict[str, Tensor], cfg: ProbeConfig = ProbeConfig()):
    """Returns ``(rates, convention)``; rates maps k to the share of greedy swaps ranked <= k."""
    ev = _evaluate(params, cfg)
    conv, rates, _ = select_convention(ev.rows(cfg.weight_source), ev.actions)
    return rates, conv


def greedy_trap_rate(params: dict[str, Tensor], cfg: ProbeConfig = ProbeConfig()) -> float:
    ev = _evaluate(params, cfg)
    return greedy_trap_rate_from_actions(ev.perms, ev.actions)


@dataclass
class MetricsReport:
    accuracy: float
    non_inversion_proportion: float
    top_k_hit_rates: dict[int, float]
    sign_convention: str
    greedy_trap_rate: float
    n_permutations_evaluated: int
    weight_source: str = "post"
    non_inversion_sorted_input: float | None = None
    error_rate: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["top_k_hit_rates"] = {str(k): v for k, v in self.top_k_hit_rates.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["top_k_hit_rates"] = {int(k): float(v) for k, v in d["top_k_hit_rates"].items()}
        return cls(**d)


def report_from_evaluation(ev: Evaluation, weight_source: str = "post",
                           sorted_row: np.ndarray | None = None) -> MetricsReport:
    rows = ev.rows(weight_source)
    conv, rates, _ = select_convention(rows, ev.actions)
    n = ev.perms.shape[1]
    acc = accuracy_from_actions(ev.perms, ev.actions)
    return MetricsReport(
        accuracy=acc,
        non_inversion_proportion=float(non_inversion_batch(rows, ev.perms).mean()),
        top_k_hit_rates=rates,
        sign_convention=conv,
        greedy_trap_rate=greedy_trap_rate_from_actions(ev.perms, ev.actions),
        n_permutations_evaluated=len(ev.perms),
        weight_source=weight_source,
        non_inversion_sorted_input=(None if sorted_row is None else
                                    non_inversion_proportion(sorted_row, range(1, n + 1))),
        error_rate=1.0 - acc,
    )


def run_probes(params: dict[str, Tensor], cfg: ProbeConfig = ProbeConfig()) -> MetricsReport:
    ev = _evaluate(params, cfg)
    n = ev.perms.shape[1]
    sorted_out = forward(params, np.arange(1, n + 1)).trace
    sorted_row = sorted_out.last_row_weights if cfg.weight_source == "post" else sorted_out.last_row_scores
    return report_from_evaluation(ev, cfg.weight_source, sorted_row)


# trace export --------------------------------------------------------------

@dataclass
class TraceData:
    heatmap: list[tuple[int, int, float]]   # (row, col, weight) for the sorted input, final layer
    violin: list[tuple[int, float]]         # (token_id, last-row weight)
    length: int


def extract_trace_data(params: dict[str, Tensor], cfg: ProbeConfig = ProbeConfig()) -> TraceData:
    n = params["token_embed"].shape[0]
    weights = forward(params, np.arange(1, n + 1)).trace.layers[-1].weights
    heatmap = [(r, c, float(weights[r, c])) for r in range(n) for c in range(n)]
    ev = _evaluate(params, cfg)
    tokens = ev.perms.reshape(-1)
    vals = ev.last_row_weights.reshape(-1)
    order = np.argsort(tokens, kind="stable")
    violin = [(int(tokens[i]), float(vals[i])) for i in order]
    return TraceData(heatmap, violin, n)


def write_trace_csvs(data: TraceData, directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"heatmap": directory / "heatmap.csv", "violin": directory / "violin.csv"}
    with open(paths["heatmap"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "col", "weight"])
        w.writerows((r, c, repr(v)) for r, c, v in data.heatmap)
    with open(paths["violin"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["token_id", "weight"])
        w.writerows((t, repr(v)) for t, v in data.violin)
    return paths
