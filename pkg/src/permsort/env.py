"""Adjacent-swap sorting environment.

States are permutations of the token ids ``1..length``; action ``i`` swaps
positions ``i`` and ``i + 1``.  A transition that produces the sorted sequence
pays ``SORTED_REWARD`` and ends the episode, every other transition pays
``STEP_PENALTY``.  Episodes are also cut after ``max_steps`` transitions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from permsort.errors import ContractViolation

SORTED_REWARD = 1.0
STEP_PENALTY = -0.001
MIN_LENGTH = 3
MAX_LENGTH = 10

Permutation = tuple[int, ...]


def as_permutation(tokens: Sequence[int]) -> Permutation:
    """Validate ``tokens`` and return them as a tuple of ints."""
    p = tuple(int(t) for t in tokens)
    n = len(p)
    if n < MIN_LENGTH:
        raise ContractViolation(f"permutation length must be >= {MIN_LENGTH}, got {n}")
    if sorted(p) != list(range(1, n + 1)):
        raise ContractViolation(f"{p} is not a permutation of 1..{n}")
    return p


def is_sorted(p: Sequence[int]) -> bool:
    p = as_permutation(p)
    return all(a < b for a, b in zip(p, p[1:]))


def inversion_count(p: Sequence[int]) -> int:
    """Number of position pairs ``i < j`` with ``p[i] > p[j]``.

    Equal to the minimum number of adjacent swaps that sorts ``p``.
    """
    p = as_permutation(p)
    n = len(p)
    return sum(p[i] > p[j] for i in range(n) for j in range(i + 1, n))


def apply_swap(p: Sequence[int], action: int) -> Permutation:
    p = as_permutation(p)
    i = int(action)
    if not 0 <= i <= len(p) - 2:
        raise ContractViolation(f"swap index {action} out of range for length {len(p)}")
    out = list(p)
    out[i], out[i + 1] = out[i + 1], out[i]
    return tuple(out)


def is_correct_swap(p: Sequence[int], action: int) -> bool:
    """True when the swap strictly reduces the inversion count (a descending pair)."""
    return p[action] > p[action + 1]


@dataclass(frozen=True)
class EnvConfig:
    length: int
    max_steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not MIN_LENGTH <= self.length <= MAX_LENGTH:
            raise ContractViolation(
                f"length must be in [{MIN_LENGTH}, {MAX_LENGTH}], got {self.length}"
            )
        if self.max_steps < 1:
            raise ContractViolation(f"max_steps must be >= 1, got {self.max_steps}")


class StepOutcome(NamedTuple):
    next_state: Permutation
    reward: float
    terminated: bool
    truncated: bool


def reset(cfg: EnvConfig, rng: np.random.Generator) -> Permutation:
    """Draw a uniformly random permutation, resampling the sorted one."""
    identity = tuple(range(1, cfg.length + 1))
    while True:
        p = tuple(int(t) for t in rng.permutation(cfg.length) + 1)
        if p != identity:
            return p


def step(p: Sequence[int], action: int, episode_steps: int, cfg: EnvConfig) -> StepOutcome:
    """Apply one swap.  ``episode_steps`` counts transitions already taken."""
    if len(p) != cfg.length:
        raise ContractViolation(f"state length {len(p)} does not match config length {cfg.length}")
    if episode_steps >= cfg.max_steps:
        raise ContractViolation("step called on a truncated episode")
    if is_sorted(p):
        raise ContractViolation("step called on a terminated episode")
    nxt = apply_swap(p, action)
    if is_sorted(nxt):
        return StepOutcome(nxt, SORTED_REWARD, True, False)
    return StepOutcome(nxt, STEP_PENALTY, False, episode_steps + 1 >= cfg.max_steps)


class SortingEnv:
    """Stateful single-episode wrapper around :func:`reset` and :func:`step`."""

    def __init__(self, cfg: EnvConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.state: Permutation | None = None
        self.steps = 0
        self.done = True

    def reset(self) -> Permutation:
        self.state = reset(self.cfg, self.rng)
        self.steps = 0
        self.done = False
        return self.state

    def step(self, action: int) -> StepOutcome:
        if self.done:
            raise ContractViolation("episode has ended; call reset()")
        out = step(self.state, action, self.steps, self.cfg)
        self.state = out.next_state
        self.steps += 1
        self.done = out.terminated or out.truncated
        return out


class VecStep(NamedTuple):
    obs: np.ndarray  # (num_envs, length) observations after auto-reset
    rewards: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    final_obs: np.ndarray  # pre-reset observation; equals obs where no episode ended
    episode_returns: list[float]
    episode_lengths: list[int]


class VecSortEnv:
    """``num_envs`` independent environments stepped in lockstep with auto-reset.

    Each sub-environment draws from its own generator spawned from ``seed``, so
    results do not depend on how the batch is scheduled.
    """

    def __init__(self, cfg: EnvConfig, num_envs: int, seed: int | None = None):
        seed = cfg.seed if seed is None else seed
        streams = np.random.SeedSequence(seed).spawn(num_envs)
        self.cfg = cfg
        self.envs = [SortingEnv(cfg, np.random.default_rng(s)) for s in streams]
        self._returns = np.zeros(num_envs)

    @property
    def num_envs(self) -> int:
        return len(self.envs)

    def reset(self) -> np.ndarray:
        self._returns[:] = 0.0
        return np.array([e.reset() for e in self.envs], dtype=np.int64)

    def step(self, actions: Sequence[int]) -> VecStep:
        n = self.num_envs
        obs = np.empty((n, self.cfg.length), dtype=np.int64)
        final_obs = np.empty_like(obs)
        rewards = np.empty(n)
        terminated = np.zeros(n, dtype=bool)
        truncated = np.zeros(n, dtype=bool)
        ep_returns, ep_lengths = [], []
        for k, (env, a) in enumerate(zip(self.envs, actions)):
            out = env.step(int(a))
            rewards[k] = out.reward
            terminated[k] = out.terminated
            truncated[k] = out.truncated
            self._returns[k] += out.reward
            final_obs[k] = out.next_state
            if env.done:
                ep_returns.append(float(self._returns[k]))
                ep_lengths.append(env.steps)
                self._returns[k] = 0.0
                obs[k] = env.reset()
            else:
                obs[k] = out.next_state
        return VecStep(obs, rewards, terminated, truncated, final_obs, ep_returns, ep_lengths)


def all_permutations(length: int) -> np.ndarray:
    """Every permutation of ``1..length`` in lexicographic order, shape (length!, length)."""
    from itertools import permutations

    return np.array(list(permutations(range(1, length + 1))), dtype=np.int64)
