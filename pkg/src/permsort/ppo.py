"""PPO trainer: lockstep rollouts, GAE, clipped surrogate and clipped value loss."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from permsort import diffcore as dc
from permsort.diffcore import Tensor
from permsort.env import EnvConfig, VecSortEnv
from permsort.errors import ContractViolation, DivergenceError
from permsort.model import ModelConfig, forward, init_params, sample_from_logits, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PPOConfig:
    total_timesteps: int = 1_000_000
    num_envs: int = 8
    rollout_steps: int = 128
    learning_rate: float = 2.5e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    num_minibatches: int = 4
    update_epochs: int = 4
    clip_coef: float = 0.1
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    seed: int = 0
    checkpoint_every: float = 0.1  # fraction of total_timesteps

    def __post_init__(self):
        if (self.num_envs * self.rollout_steps) % self.num_minibatches:
            raise ContractViolation("num_envs * rollout_steps must be divisible by num_minibatches")
        for name in ("learning_rate", "gamma", "gae_lambda", "clip_coef", "entropy_coef",
                     "value_coef", "max_grad_norm", "total_timesteps", "update_epochs"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.rollout_steps

    @property
    def minibatch_size(self) -> int:
        return self.batch_size // self.num_minibatches

    @property
    def num_updates(self) -> int:
        return max(1, self.total_timesteps // self.batch_size)


@dataclass
class RolloutBuffer:
    """Arrays indexed ``[step, env]``."""

    obs: np.ndarray
    actions: np.ndarray
    logprobs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_values: np.ndarray  # V of the true successor state; bootstrap for truncation and rollout end
    terminated: np.ndarray
    truncated: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episode_returns: list[float] = field(default_factory=list)
    episode_lengths: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, steps: int, num_envs: int, length: int) -> "RolloutBuffer":
        z = lambda dtype=np.float32: np.zeros((steps, num_envs), dtype=dtype)
        return cls(np.zeros((steps, num_envs, length), dtype=np.int64), z(np.int64),
                   z(np.float64), z(), z(), z(), z(bool), z(bool))

    def __len__(self) -> int:
        return self.actions.size


Policy = Callable[[np.ndarray, np.random.Generator], tuple[np.ndarray, np.ndarray, np.ndarray]]


def model_policy(params: dict[str, Tensor]) -> Policy:
    """Wrap parameters as a batched sampler ``(obs, rng) -> (actions, logprobs, values)``."""
    def policy(obs, rng):
        out = forward(params, obs)
        actions, logp = sample_from_logits(out.action_logits.data, rng)
        return actions, logp, out.value.data

    return policy


def _values(policy: Policy, obs: np.ndarray) -> np.ndarray:
    # the value estimate does not depend on the sampling stream
    return policy(obs, np.random.default_rng(0))[2]


class RolloutCollector:
    """Keeps the vectorized environment and its current observation across rollouts."""

    def __init__(self, envs: VecSortEnv, steps: int):
        self.envs = envs
        self.steps = steps
        self.obs = envs.reset()

    def collect(self, policy: Policy, rng: np.random.Generator) -> RolloutBuffer:
        n = self.envs.num_envs
        buf = RolloutBuffer.empty(self.steps, n, self.envs.cfg.length)
        for t in range(self.steps):
            actions, logp, values = policy(self.obs, rng)
            buf.obs[t] = self.obs
            buf.actions[t] = actions
            buf.logprobs[t] = logp
            buf.values[t] = values
            out = self.envs.step(actions)
            buf.rewards[t] = out.rewards
            buf.terminated[t] = out.terminated
            buf.truncated[t] = out.truncated
            buf.episode_returns.extend(out.episode_returns)
            buf.episode_lengths.extend(out.episode_lengths)
            if out.truncated.any():
                buf.next_values[t, out.truncated] = _values(policy, out.final_obs[out.truncated])
            self.obs = out.obs
        buf.next_values[:-1] = np.where(buf.truncated[:-1], buf.next_values[:-1], buf.values[1:])
        last = ~buf.truncated[-1]
        if last.any():
            buf.next_values[-1, last] = _values(policy, self.obs)[last]
        return buf


def collect_rollout(envs: VecSortEnv, params_or_policy, steps: int, rng: np.random.Generator) -> RolloutBuffer:
    """One-shot rollout from freshly reset environments."""
    policy = params_or_policy if callable(params_or_policy) else model_policy(params_or_policy)
    return RolloutCollector(envs, steps).collect(policy, rng)


def compute_gae(rewards, values, next_values, terminated, truncated, gamma: float, lam: float):
    """Generalized advantage estimates over ``[step, env]`` arrays.

    ``next_values[t]`` is V of the state reached by transition ``t``; it is
    ignored when the transition terminated.  Any episode end (terminated or
    truncated) stops the advantage recursion.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    terminated = np.asarray(terminated, dtype=bool)
    done = terminated | np.asarray(truncated, dtype=bool)
    adv = np.zeros_like(rewards)
    carry = np.zeros_like(rewards[0])
    for t in reversed(range(len(rewards))):
        delta = rewards[t] + gamma * next_values[t] * ~terminated[t] - values[t]
        carry = delta + gamma * lam * ~done[t] * carry
        adv[t] = carry
    return adv, adv + values


def normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return x - x.mean()
    return (x - x.mean()) / (x.std() + 1e-8)


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    logprobs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    values: np.ndarray


def ppo_loss(batch: Batch, params: dict[str, Tensor], cfg: PPOConfig):
    """Total PPO loss as a tensor, plus float diagnostics."""
    out = forward(params, batch.obs)
    logp_all = dc.log_softmax(out.action_logits)
    new_logp = dc.take_along_last(logp_all, batch.actions)
    entropy = dc.mean(dc.mul(dc.sum_(dc.mul(dc.exp(logp_all), logp_all), axis=-1), -1.0))

    dt = new_logp.dtype
    adv = Tensor(batch.advantages.astype(dt))
    log_ratio = new_logp - Tensor(batch.logprobs.astype(dt))
    ratio = dc.exp(log_ratio)
    eps = cfg.clip_coef
    surrogate = dc.minimum(ratio * adv, dc.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)
    policy_loss = dc.mul(dc.mean(surrogate), -1.0)

    old_v = Tensor(batch.values.astype(dt))
    ret = Tensor(batch.returns.astype(dt))
    v = out.value
    v_clipped = old_v + dc.clip(v - old_v, -eps, eps)
    value_loss = dc.mul(dc.mean(dc.maximum(dc.square(v - ret), dc.square(v_clipped - ret))), 0.5)

    total = policy_loss + dc.mul(value_loss, cfg.value_coef) - dc.mul(entropy, cfg.entropy_coef)
    if not np.isfinite(total.data):
        raise DivergenceError("PPO loss is not finite")
    r = ratio.data.astype(np.float64)
    lr = log_ratio.data.astype(np.float64)
    diag = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "approx_kl": float(np.mean((r - 1.0) - lr)),
        "clipfrac": float(np.mean(np.abs(r - 1.0) > eps)),
        "max_abs_log_ratio": float(np.max(np.abs(lr))),
    }
    return total, diag


def flatten(buf: RolloutBuffer, normalize_advantages: bool = True) -> Batch:
    adv = buf.advantages.reshape(-1)
    if normalize_advantages:
        adv = normalize(adv)
    return Batch(
        obs=buf.obs.reshape(-1, buf.obs.shape[-1]),
        actions=buf.actions.reshape(-1),
        logprobs=buf.logprobs.reshape(-1),
        advantages=adv,
        returns=buf.returns.reshape(-1),
        values=buf.values.reshape(-1).astype(np.float64),
    )


def _subset(batch: Batch, idx: np.ndarray) -> Batch:
    return Batch(*(getattr(batch, f)[idx] for f in Batch.__dataclass_fields__))


def update(params, opt: dc.OptimizerState, batch: Batch, cfg: PPOConfig, rng: np.random.Generator):
    """``update_epochs`` passes of shuffled minibatches.  Returns new params and averaged diagnostics."""
    sums: dict[str, float] = {}
    count = 0
    n = len(batch.actions)
    for _ in range(cfg.update_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = _subset(batch, order[start:start + cfg.minibatch_size])
            with dc.Tape() as tape:
                loss, diag = ppo_loss(mb, params, cfg)
            grads = dc.gradients(loss, tape, params)
            params, opt, norm = dc.adam_step(params, grads, opt)
            diag["grad_norm"] = norm
            for k, v in diag.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    return params, {k: v / count for k, v in sums.items()}


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    log: list[dict]
    global_step: int


def checkpoint_steps(cfg: PPOConfig) -> set[int]:
    """Update indices (1-based) after which a checkpoint is written."""
    n = cfg.num_updates
    marks = {n}
    k = 1
    while cfg.checkpoint_every * k < 1.0 - 1e-12:
        marks.add(max(1, int(np.ceil(cfg.checkpoint_every * k * n))))
        k += 1
    return marks


def iter_train(cfg: PPOConfig, model_cfg: ModelConfig, env_cfg: EnvConfig,
               params: dict[str, Tensor] | None = None) -> Iterator[tuple[dict, dict[str, Tensor]]]:
    """Yield ``(log_record, params)`` after each optimization update."""
    if env_cfg.length != model_cfg.length:
        raise ContractViolation("environment and model lengths differ")
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    if params is None:
        params = init_params(model_cfg, np.random.default_rng(seeds[0]))
    envs = VecSortEnv(env_cfg, cfg.num_envs, seed=int(seeds[1].generate_state(1)[0]))
    action_rng = np.random.default_rng(seeds[2])
    shuffle_rng = np.random.default_rng(seeds[3])
    opt = dc.OptimizerState(learning_rate=cfg.learning_rate, clip_norm=cfg.max_grad_norm)
    collector = RolloutCollector(envs, cfg.rollout_steps)
    global_step = 0
    for update_idx in range(1, cfg.num_updates + 1):
        buf = collector.collect(model_policy(params), action_rng)
        global_step += len(buf)
        buf.advantages, buf.returns = compute_gae(
            buf.rewards, buf.values, buf.next_values, buf.terminated, buf.truncated,
            cfg.gamma, cfg.gae_lambda)
        params, diag = update(params, opt, flatten(buf), cfg, shuffle_rng)
        record = {
            "update": update_idx,
            "global_step": global_step,
            **diag,
            "episodes": len(buf.episode_returns),
            "episode_return_mean": float(np.mean(buf.episode_returns)) if buf.episode_returns else None,
            "episode_length_mean": float(np.mean(buf.episode_lengths)) if buf.episode_lengths else None,
        }
        yield record, params


def train(cfg: PPOConfig, model_cfg: ModelConfig, env_cfg: EnvConfig,
          run_dir: str | Path | None = None) -> TrainResult:
    """Train an agent.  With ``run_dir``, stream ``trainlog.jsonl`` and write checkpoints.

    On divergence the exception propagates; checkpoints already written stay in place.
    """
    marks = checkpoint_steps(cfg)
    logfile = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        logfile = open(run_dir / "trainlog.jsonl", "w")
    records = []
    params = None
    global_step = 0
    try:
        for record, params in iter_train(cfg, model_cfg, env_cfg):
            records.append(record)
            global_step = record["global_step"]
            if logfile is not None:
                logfile.write(json.dumps(record) + "\n")
                logfile.flush()
                if record["update"] in marks:
                    save_checkpoint(run_dir / "checkpoints" / f"step_{global_step}", params,
                                    seed=cfg.seed, timesteps=global_step)
            if record["update"] % 25 == 0 or record["update"] == cfg.num_updates:
                log.info("update %d step %d return %s vloss %.4f", record["update"], global_step,
                         record["episode_return_mean"], record["value_loss"])
    finally:
        if logfile is not None:
            logfile.close()
    return TrainResult(params, records, global_step)


def config_dict(cfg: PPOConfig) -> dict:
    return asdict(cfg)
