"""Single-head causal transformer policy with actor and critic heads.

The network is deliberately bare: token + position embeddings, one or two
single-head causal attention layers, no residual stream, no layer norm, no
MLP.  The attention output at the final position is the shared hidden vector
read by two separate linear heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from permsort import diffcore as dc
from permsort.diffcore import Tensor
from permsort.env import MAX_LENGTH, MIN_LENGTH
from permsort.errors import CheckpointVersionError, ContractViolation

CHECKPOINT_FORMAT = "permsort-ckpt-1"


@dataclass(frozen=True)
class ModelConfig:
    length: int
    embed_dim: int
    num_layers: int = 1

    def __post_init__(self):
        if not MIN_LENGTH <= self.length <= MAX_LENGTH:
            raise ContractViolation(f"length must be in [{MIN_LENGTH}, {MAX_LENGTH}], got {self.length}")
        if not 2 <= self.embed_dim <= 128:
            raise ContractViolation(f"embed_dim must be in [2, 128], got {self.embed_dim}")
        if self.num_layers not in (1, 2):
            raise ContractViolation(f"num_layers must be 1 or 2, got {self.num_layers}")

    @property
    def num_actions(self) -> int:
        return self.length - 1


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, in checkpoint order."""
    d, n = cfg.embed_dim, cfg.length
    shapes = {"token_embed": (n, d), "pos_embed": (n, d)}
    for layer in range(cfg.num_layers):
        for proj in ("w_q", "w_k", "w_v"):
            shapes[f"layer{layer}.{proj}"] = (d, d)
    shapes.update({
        "actor.w": (d, n - 1), "actor.b": (n - 1,),
        "critic.w": (d, 1), "critic.b": (1,),
    })
    return shapes


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(cfg: ModelConfig, rng: np.random.Generator | int) -> dict[str, Tensor]:
    """Embeddings and projections ~ N(0, 1/d); orthogonal heads (actor gain 0.01, critic 1)."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    scale = 1.0 / math.sqrt(cfg.embed_dim)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "actor.w":
            data = _orthogonal(rng, shape, 0.01)
        elif name == "critic.w":
            data = _orthogonal(rng, shape, 1.0)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, scale, size=shape)
        params[name] = Tensor(data.astype(np.float32), name=name)
    return params


def config_from_params(params: dict[str, Tensor]) -> ModelConfig:
    n, d = params["token_embed"].shape
    layers = sum(1 for k in params if k.endswith(".w_q"))
    return ModelConfig(length=n, embed_dim=d, num_layers=layers)


class LayerTrace(NamedTuple):
    scores: np.ndarray   # (..., n, n) pre-softmax, masked entries = -inf
    weights: np.ndarray  # (..., n, n) post-softmax


class AttentionTrace(NamedTuple):
    layers: tuple[LayerTrace, ...]

    @property
    def last_row_scores(self) -> np.ndarray:
        """Final layer, final query row; all ``n`` entries are visible under the causal mask."""
        return self.layers[-1].scores[..., -1, :]

    @property
    def last_row_weights(self) -> np.ndarray:
        return self.layers[-1].weights[..., -1, :]


class PolicyOutput(NamedTuple):
    action_logits: Tensor
    value: Tensor
    trace: AttentionTrace


def _as_ids(tokens, length: int) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.shape[-1] != length:
        raise ContractViolation(f"permutation length {ids.shape[-1]} does not match model length {length}")
    return ids - 1


def forward(params: dict[str, Tensor], tokens) -> PolicyOutput:
    """Run the network on one permutation ``(n,)`` or a batch ``(B, n)`` of them."""
    n, d = params["token_embed"].shape
    ids = _as_ids(tokens, n)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    mask = dc.causal_mask(n)
    x = dc.embedding_lookup(params["token_embed"], ids) + params["pos_embed"]
    inv_sqrt_d = 1.0 / math.sqrt(d)
    layers = []
    layer = 0
    while f"layer{layer}.w_q" in params:
        q = x @ params[f"layer{layer}.w_q"]
        k = x @ params[f"layer{layer}.w_k"]
        v = x @ params[f"layer{layer}.w_v"]
        scores = dc.mul(q @ dc.transpose(k), inv_sqrt_d)
        attn = dc.masked_softmax_rows(scores, mask)
        layers.append(LayerTrace(np.where(mask, scores.data, -np.inf), attn.data))
        x = attn @ v
        layer += 1
    h = x[..., -1, :]
    logits = h @ params["actor.w"] + params["actor.b"]
    value = (h @ params["critic.w"] + params["critic.b"])[..., 0]
    if single:
        logits, value = logits[0], value[0]
        layers = [LayerTrace(t.scores[0], t.weights[0]) for t in layers]
    return PolicyOutput(logits, value, AttentionTrace(tuple(layers)))


def greedy_from_logits(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return np.argmax(logits, axis=-1)


def act_greedy(params: dict[str, Tensor], tokens) -> int | np.ndarray:
    out = greedy_from_logits(forward(params, tokens).action_logits.data)
    return int(out) if np.ndim(out) == 0 else out


def sample_from_logits(logits: np.ndarray, rng: np.random.Generator):
    """Categorical draws by inverse CDF in float64.  Returns (actions, log-probs)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    cdf = np.cumsum(np.exp(logp), axis=-1)
    u = rng.random(cdf.shape[:-1] + (1,))
    actions = np.minimum((u * cdf[..., -1:] > cdf).sum(axis=-1), z.shape[-1] - 1)
    return actions, np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0]


def act_sample(params: dict[str, Tensor], tokens, rng: np.random.Generator):
    """Sample a swap from the policy.  Returns ``(action, log_prob, value)``."""
    out = forward(params, tokens)
    actions, logp = sample_from_logits(out.action_logits.data, rng)
    if np.ndim(actions) == 0:
        return int(actions), float(logp), float(out.value.data)
    return actions, logp, out.value.data


# checkpoints ----------------------------------------------------------------

def save_checkpoint(path: str | Path, params: dict[str, Tensor], *, seed: int, timesteps: int) -> Path:
    """Write ``path/manifest`` (key = value text) and ``path/params.f32`` (little-endian float32)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = config_from_params(params)
    shapes = param_shapes(cfg)
    order = ",".join(f"{k}:{'x'.join(map(str, s))}" for k, s in shapes.items())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "length": cfg.length,
        "embed_dim": cfg.embed_dim,
        "num_layers": cfg.num_layers,
        "seed": seed,
        "timesteps": timesteps,
        "arrays": order,
    }
    blob = b"".join(np.ascontiguousarray(params[k].data, dtype="<f4").tobytes() for k in shapes)
    (path / "params.f32").write_bytes(blob)
    (path / "manifest").write_text("".join(f"{k} = {v}\n" for k, v in manifest.items()))
    return path


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None):
    """Load a checkpoint directory.  Returns ``(params, manifest)``."""
    path = Path(path)
    if not (path / "manifest").is_file():
        raise CheckpointVersionError(f"{path} has no manifest")
    manifest = read_manifest(path / "manifest")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(
            f"unsupported checkpoint format {manifest.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
    try:
        cfg = ModelConfig(int(manifest["length"]), int(manifest["embed_dim"]), int(manifest["num_layers"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointVersionError(f"malformed manifest in {path}: {exc}") from exc
    if expect is not None and expect != cfg:
        raise CheckpointVersionError(f"checkpoint is {cfg}, expected {expect}")
    shapes = param_shapes(cfg)
    declared = ",".join(f"{k}:{'x'.join(map(str, s))}" for k, s in shapes.items())
    if manifest.get("arrays") != declared:
        raise CheckpointVersionError(f"array layout in {path} does not match {cfg}")
    flat = np.frombuffer((path / "params.f32").read_bytes(), dtype="<f4")
    total = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != total:
        raise CheckpointVersionError(f"{path}/params.f32 holds {flat.size} floats, expected {total}")
    params, offset = {}, 0
    for k, s in shapes.items():
        size = int(np.prod(s))
        params[k] = Tensor(flat[offset:offset + size].reshape(s).astype(np.float32), name=k)
        offset += size
    return params, manifest
