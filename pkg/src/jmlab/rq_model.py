"""Desk-scale RQ-Transformer over multi-stream token grids.

A temporal transformer reads one summed embedding per frame and emits a
hidden vector ``z`` for the next frame. Text tokens come from a linear head
on ``z``; audio tokens come from a small depth transformer that runs over
the streams of a single frame, with ``z`` prepended as its first position.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .token_grid import GridSchema, Role, TokenGrid

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NumericError(RuntimeError):
    """Non-finite loss or gradients during training."""


@dataclass(frozen=True)
class ModelConfig:
    schema: GridSchema
    d_model: int = 128
    n_heads: int = 4
    temporal_layers: int = 4
    depth_layers: int = 2
    max_frames: int = 2048
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError("d_model must be a positive multiple of n_heads")
        if self.max_frames < 1:
            raise ValueError("max_frames must be >= 1")
        if self.temporal_layers < 0 or self.depth_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "schema"}
        d["schema"] = self.schema.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        schema = GridSchema.from_dict(d.pop("schema"))
        return cls(schema=schema, **d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 3e-5
    warmup_steps: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-5
    weight_decay: float = 0.1
    batch_frames: int = 2048
    batch_size: int = 1
    pad_loss_factor: float = 0.5
    w_text: float = 100.0
    w_semantic: float = 100.0
    w_acoustic: float = 1.0
    temporal_lr: Optional[float] = None
    depth_lr: Optional[float] = None
    epochs: int = 1
    steps: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if min(self.w_text, self.w_semantic, self.w_acoustic, self.pad_loss_factor) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")

    @classmethod
    def finetune(cls, **kw) -> "TrainConfig":
        """Fine-tuning preset: per-stack learning rates 2e-6 / 4e-6."""
        kw.setdefault("temporal_lr", 2e-6)
        kw.setdefault("depth_lr", 4e-6)
        return cls(**kw)


# --- network ----------------------------------------------------------------

class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x, cache: Optional[dict] = None):
        B, L, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).split(D, dim=-1)
        q, k, v = (t.view(B, L, h, D // h).transpose(1, 2) for t in (q, k, v))
        past = 0
        if cache is not None:
            if "k" in cache:
                past = cache["k"].shape[2]
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        S = k.shape[2]
        future = torch.ones(L, S, dtype=torch.bool).triu(diagonal=past + 1)
        att = att.masked_fill(future, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, D)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc = nn.Linear(d_model, 4 * d_model)
        self.out = nn.Linear(4 * d_model, d_model)

    def forward(self, x, cache=None):
        x = x + self.attn(self.ln1(x), cache)
        return x + self.out(F.gelu(self.fc(self.ln2(x))))


class RQTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        schema = config.schema
        d = config.d_model
        self.text_streams = schema.text_indices
        self.audio_streams = schema.audio_indices
        n_text, n_audio = len(self.text_streams), len(self.audio_streams)

        self.temporal_emb = nn.ModuleList(nn.Embedding(s.vocab_size, d) for s in schema.streams)
        self.start = nn.Parameter(torch.zeros(d))
        self.temporal_pos = nn.Embedding(config.max_frames, d)
        self.temporal = nn.ModuleList(Block(d, config.n_heads) for _ in range(config.temporal_layers))
        self.temporal_norm = nn.LayerNorm(d)
        self.text_linear = nn.ModuleList(
            nn.Linear(d, schema.streams[i].vocab_size) for i in self.text_streams)

        self.depth_in = nn.Linear(d, d)
        self.depth_text_emb = nn.ModuleList(
            nn.Embedding(schema.streams[i].vocab_size, d) for i in self.text_streams)
        # the last audio stream is never fed back in
        self.depth_audio_emb = nn.ModuleList(
            nn.Embedding(schema.streams[i].vocab_size, d) for i in self.audio_streams[:-1])
        self.depth_pos = nn.Embedding(n_text + n_audio, d)
        self.depth = nn.ModuleList(Block(d, config.n_heads) for _ in range(config.depth_layers))
        self.depth_norm = nn.LayerNorm(d)
        self.audio_heads = nn.ModuleList(
            nn.Linear(d, schema.streams[i].vocab_size) for i in self.audio_streams)

        self.to(_DTYPES[config.dtype])
        self.reset_parameters(torch.Generator().manual_seed(config.seed))

    @property
    def n_text(self) -> int:
        return len(self.text_streams)

    def reset_parameters(self, gen: torch.Generator, names: Optional[Sequence[str]] = None):
        with torch.no_grad():
            for name, p in self.named_parameters():
                if names is not None and not any(name == n or name.startswith(n + ".") for n in names):
                    continue
                _init_param(name, p, gen)

    # temporal stack

    def frame_embeddings(self, tokens: torch.Tensor) -> torch.Tensor:
        """Sum of per-stream embeddings, ``(B, T, S) -> (B, T, d)``."""
        out = self.temporal_emb[0](tokens[..., 0])
        for s in range(1, tokens.shape[-1]):
            out = out + self.temporal_emb[s](tokens[..., s])
        return out

    def temporal_hidden(self, tokens: torch.Tensor) -> torch.Tensor:
        """Hidden vectors ``z`` for frames ``0..T-1`` of a ``(B, T, S)`` batch.

        ``z[:, t]`` sees the start embedding and frames ``< t`` only.
        """
        B, T, _ = tokens.shape
        if T > self.config.max_frames:
            raise ValueError(f"{T} frames exceed max_frames={self.config.max_frames}")
        start = self.start.expand(B, 1, -1)
        x = torch.cat([start, self.frame_embeddings(tokens[:, : T - 1])], dim=1)
        x = x + self.temporal_pos.weight[:T]
        for block in self.temporal:
            x = block(x)
        return self.temporal_norm(x)

    def new_cache(self) -> dict:
        return {"pos": 0, "layers": [{} for _ in self.temporal]}

    def temporal_step(self, cache: dict, frame_tokens: Optional[torch.Tensor], batch: int = 1):
        """Incremental ``z`` for the next position.

        Pass ``None`` first (the start position), then each completed frame's
        ``(B, S)`` tokens in order.
        """
        pos = cache["pos"]
        if pos >= self.config.max_frames:
            raise ValueError("context exceeds max_frames")
        if frame_tokens is None:
            x = self.start.expand(batch, 1, -1)
        else:
            x = self.frame_embeddings(frame_tokens[:, None, :])
        x = x + self.temporal_pos.weight[pos]
        for block, c in zip(self.temporal, cache["layers"]):
            x = block(x, c)
        cache["pos"] = pos + 1
        return self.temporal_norm(x)[:, 0]

    # heads

    def text_logits(self, z: torch.Tensor, which: int = 0) -> torch.Tensor:
        return self.text_linear[which](z)

    def depth_inputs(self, z: torch.Tensor, frame_tokens: torch.Tensor) -> torch.Tensor:
        """Depth sequence ``[z, text..., audio_0..audio_{k-1}]``.

        ``frame_tokens`` is ``(N, n_text + k)`` holding text tokens then the
        first ``k`` audio tokens of the frame.
        """
        n_text = self.n_text
        k = frame_tokens.shape[-1] - n_text
        parts = [self.depth_in(z)[:, None]]
        for j in range(n_text):
            parts.append(self.depth_text_emb[j](frame_tokens[:, j])[:, None])
        for a in range(k):
            parts.append(self.depth_audio_emb[a](frame_tokens[:, n_text + a])[:, None])
        x = torch.cat(parts, dim=1)
        return x + self.depth_pos.weight[: x.shape[1]]

    def depth_hidden(self, z: torch.Tensor, frame_tokens: torch.Tensor) -> torch.Tensor:
        x = self.depth_inputs(z, frame_tokens)
        for block in self.depth:
            x = block(x)
        return self.depth_norm(x)

    def depth_logits(self, z: torch.Tensor, frame_tokens: torch.Tensor) -> torch.Tensor:
        """Logits for audio position ``k = frame_tokens.shape[-1] - n_text``."""
        k = frame_tokens.shape[-1] - self.n_text
        if k < 0 or k >= len(self.audio_streams):
            raise ValueError(f"depth position {k} out of range")
        h = self.depth_hidden(z, frame_tokens)
        return self.audio_heads[k](h[:, -1])


def _init_param(name: str, p: torch.Tensor, gen: torch.Generator):
    leaf = name.rsplit(".", 1)[-1]
    if ".ln" in name or "_norm" in name:
        p.fill_(1.0 if leaf == "weight" else 0.0)
    elif leaf == "bias":
        p.zero_()
    else:
        p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).mul_(0.02).to(p.dtype))


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count for ``config``."""
    s = config.schema
    d = config.d_model
    vocab = [st.vocab_size for st in s.streams]
    text_v = [vocab[i] for i in s.text_indices]
    audio_v = [vocab[i] for i in s.audio_indices]
    block = 2 * 2 * d + (3 * d * d + 3 * d) + (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d)
    temporal = sum(vocab) * d + d + config.max_frames * d + config.temporal_layers * block + 2 * d
    text_head = sum(v * d + v for v in text_v)
    depth = ((d * d + d) + sum(text_v) * d + sum(audio_v[:-1]) * d
             + (len(text_v) + len(audio_v)) * d + config.depth_layers * block + 2 * d
             + sum(v * d + v for v in audio_v))
    return temporal + text_head + depth


# --- state, loss, optimizer ---------------------------------------------------

@dataclass
class ModelState:
    config: ModelConfig
    model: RQTransformer
    moments: dict = field(default_factory=dict)
    step: int = 0

    def named_parameters(self) -> dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.model.named_parameters()}


def init_model(config: ModelConfig) -> ModelState:
    schema = config.schema
    if not schema.text_indices or not schema.audio_indices:
        raise ValueError("schema needs at least one text and one audio stream")
    if len(schema.audio_indices) < 1:
        raise ValueError("schema has no audio streams")
    return ModelState(config, RQTransformer(config))


def text_param_names(state: ModelState) -> list[str]:
    prefixes = [f"temporal_emb.{i}" for i in state.model.text_streams] + ["depth_text_emb", "text_linear"]
    return [n for n, _ in state.model.named_parameters()
            if any(n == p or n.startswith(p + ".") for p in prefixes)]


def _as_batch(grids: Sequence[TokenGrid] | TokenGrid, dtype=torch.long) -> torch.Tensor:
    if isinstance(grids, TokenGrid):
        grids = [grids]
    lengths = {g.length for g in grids}
    if len(lengths) != 1:
        raise ValueError("grids in a batch must share their length")
    return torch.as_tensor(np.stack([g.tokens for g in grids]), dtype=dtype)


def token_weights(schema: GridSchema, tokens: torch.Tensor, tc: TrainConfig, dtype) -> torch.Tensor:
    """Per-token loss weights for a ``(B, T, S)`` batch; filler positions get 0."""
    B, T, S = tokens.shape
    w = torch.zeros(B, T, S, dtype=dtype)
    frames = torch.arange(T)
    for s, spec in enumerate(schema.streams):
        if spec.role == Role.TEXT:
            base = torch.full((B, T), tc.w_text, dtype=dtype)
            base = torch.where(tokens[..., s] == spec.pad_id, base * tc.pad_loss_factor, base)
        elif spec.role == Role.SEMANTIC:
            base = torch.full((B, T), tc.w_semantic, dtype=dtype)
        else:
            base = torch.full((B, T), tc.w_acoustic, dtype=dtype)
        base = base * (frames >= spec.delay).to(dtype)
        w[..., s] = base
    return w


@dataclass
class LossResult:
    total: torch.Tensor
    weighted: dict[str, float]
    weight_sum: dict[str, float]
    mean_ce: dict[str, float]

    def as_metrics(self) -> dict[str, float]:
        out = {"loss": float(self.total.detach())}
        for role in self.weighted:
            out[f"{role}_weighted"] = self.weighted[role]
            out[f"{role}_ce"] = self.mean_ce[role]
        return out


def stream_ce(model: RQTransformer, tokens: torch.Tensor) -> torch.Tensor:
    """Teacher-forced cross-entropy for every ``(b, t, s)`` position."""
    B, T, S = tokens.shape
    z = model.temporal_hidden(tokens)
    ce = torch.zeros(B, T, S, dtype=z.dtype)
    for j, s in enumerate(model.text_streams):
        logits = model.text_logits(z, j)
        ce[..., s] = F.cross_entropy(logits.reshape(B * T, -1), tokens[..., s].reshape(-1),
                                     reduction="none").view(B, T)
    order = model.text_streams + model.audio_streams[:-1]
    h = model.depth_hidden(z.reshape(B * T, -1), tokens.reshape(B * T, S)[:, order])
    n_text = model.n_text
    for k, s in enumerate(model.audio_streams):
        logits = model.audio_heads[k](h[:, n_text + k])
        ce[..., s] = F.cross_entropy(logits, tokens[..., s].reshape(-1), reduction="none").view(B, T)
    return ce


def loss(state: ModelState, grids, tc: TrainConfig) -> LossResult:
    """Weighted teacher-forced loss: ``sum(w * ce) / sum(w)``."""
    tokens = _as_batch(grids)
    if isinstance(grids, TokenGrid):
        grids = [grids]
    if any(not g.delayed for g in grids):
        raise ValueError("loss expects delayed grids")
    if tokens.shape[1] < 2:
        raise ValueError("loss needs at least two frames")
    model = state.model
    dtype = _DTYPES[state.config.dtype]
    ce = stream_ce(model, tokens)
    w = token_weights(state.config.schema, tokens, tc, dtype)
    weighted_sum = (w * ce).sum()
    weight_total = w.sum()
    total = weighted_sum / weight_total if float(weight_total) > 0 else weighted_sum
    roles = {"text": Role.TEXT, "semantic": Role.SEMANTIC, "acoustic": Role.ACOUSTIC}
    weighted, wsum, mean_ce = {}, {}, {}
    with torch.no_grad():
        for name, role in roles.items():
            cols = [i for i, s in enumerate(state.config.schema.streams) if s.role == role]
            mask = (torch.arange(tokens.shape[1])[:, None] >= torch.tensor(
                [state.config.schema.streams[c].delay for c in cols])[None, :])
            weighted[name] = float((w[..., cols] * ce[..., cols]).sum())
            wsum[name] = float(w[..., cols].sum())
            sel = ce[..., cols][:, mask]
            mean_ce[name] = float(sel.mean()) if sel.numel() else 0.0
    return LossResult(total, weighted, wsum, mean_ce)


def lr_at(step: int, tc: TrainConfig, base: Optional[float] = None) -> float:
    lr_max = tc.lr_max if base is None else base
    return lr_max * min(1.0, step / tc.warmup_steps)


def _group_of(name: str) -> str:
    return "depth" if name.startswith(("depth", "audio_heads")) else "temporal"


def _decays(name: str, p: torch.Tensor) -> bool:
    return p.ndim >= 2


def adamw_update(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], moments: dict,
                 step: int, lrs: dict[str, float], tc: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``step`` is the 1-based update index used for bias correction; ``lrs``
    maps each parameter name to its learning rate.
    """
    b1, b2, eps = tc.adam_beta1, tc.adam_beta2, tc.adam_eps
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m, v = moments.setdefault(name, (torch.zeros_like(p), torch.zeros_like(p)))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            lr = lrs[name]
            if tc.weight_decay and _decays(name, p):
                p.mul_(1 - lr * tc.weight_decay)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)


def train_step(state: ModelState, grids: Sequence[TokenGrid], tc: TrainConfig) -> dict:
    if len({g.schema for g in grids}) != 1 or grids[0].schema != state.config.schema:
        raise ValueError("batch grids must share the model's schema")
    model = state.model
    model.zero_grad(set_to_none=True)
    res = loss(state, grids, tc)
    if not torch.isfinite(res.total):
        raise NumericError(f"non-finite loss at step {state.step}: {float(res.total)}")
    res.total.backward()
    params = dict(model.named_parameters())
    grads = {}
    bad = []
    for name, p in params.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            bad.append(name)
        grads[name] = g
    if bad:
        raise NumericError(f"non-finite gradients at step {state.step} in: {', '.join(bad)}")
    step = state.step + 1
    base = {"temporal": tc.temporal_lr if tc.temporal_lr is not None else tc.lr_max,
            "depth": tc.depth_lr if tc.depth_lr is not None else tc.lr_max}
    group_lr = {g: lr_at(step, tc, b) for g, b in base.items()}
    lrs = {n: group_lr[_group_of(n)] for n in params}
    adamw_update(params, grads, state.moments, step, lrs, tc)
    state.step = step
    model.zero_grad(set_to_none=True)
    metrics = res.as_metrics()
    metrics.update(step=step, lr=group_lr["temporal"], lr_depth=group_lr["depth"])
    return metrics


def swap_text_vocab(state: ModelState, new_text_vocab: int, seed: int) -> ModelState:
    """Re-initialize the text embedding tables and Text Linear for a new vocabulary.

    Every other parameter is carried over bitwise. Optimizer moments for the
    re-initialized tensors are reset.
    """
    if new_text_vocab < 4:
        raise ValueError("text vocab must be >= 4")
    old = state.config.schema
    streams = []
    for s in old.streams:
        if s.role == Role.TEXT:
            s = replace(s, vocab_size=new_text_vocab, pad_id=new_text_vocab - 2,
                        initial_id=new_text_vocab - 1)
        streams.append(s)
    schema = GridSchema(tuple(streams), kind=old.kind)
    config = replace(state.config, schema=schema)
    new_model = RQTransformer(config)
    fresh = set(text_param_names(ModelState(config, new_model)))
    old_params = dict(state.model.named_parameters())
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in new_model.named_parameters():
            if name in fresh:
                _init_param(name, p, gen)
            else:
                p.copy_(old_params[name])
    moments = {k: (m.clone(), v.clone()) for k, (m, v) in state.moments.items() if k not in fresh}
    return ModelState(config, new_model, moments, state.step)


# --- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"JMCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _blobs(state: ModelState):
    for name, p in state.model.named_parameters():
        yield name, p
    for name in sorted(state.moments):
        m, v = state.moments[name]
        yield f"adam_m/{name}", m
        yield f"adam_v/{name}", v


def save_checkpoint(state: ModelState, path) -> None:
    cfg = json.dumps(state.config.to_dict(), sort_keys=True).encode()
    blobs = list(_blobs(state))
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<H", CKPT_VERSION))
        f.write(state.config.digest())
        f.write(struct.pack("<QI", state.step, len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(blobs)))
        for name, t in blobs:
            raw = name.encode()
            arr = t.detach().cpu().to(torch.float64).numpy()
            f.write(struct.pack("<HB", len(raw), arr.ndim))
            f.write(raw)
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> ModelState:
    """Load a checkpoint; a given ``config`` must match the stored digest."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        (version,) = struct.unpack_from("<H", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        digest = data[6:38]
        step, n_cfg = struct.unpack_from("<QI", data, 38)
        off = 50
        stored = ModelConfig.from_dict(json.loads(data[off:off + n_cfg]))
        off += n_cfg
        if stored.digest() != digest:
            raise CheckpointError("stored config does not match its digest")
        if config is not None and config.digest() != digest:
            raise CheckpointError("config digest mismatch")
        state = init_model(stored)
        state.step = step
        params = dict(state.model.named_parameters())
        (n_blobs,) = struct.unpack_from("<I", data, off)
        off += 4
        loaded, moments_m, moments_v = set(), {}, {}
        for _ in range(n_blobs):
            n_name, ndim = struct.unpack_from("<HB", data, off)
            off += 3
            name = data[off:off + n_name].decode()
            off += n_name
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if off + 8 * count > len(data):
                raise CheckpointError(f"truncated checkpoint in blob {name}")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            t = torch.as_tensor(arr.copy())
            if name.startswith("adam_m/"):
                moments_m[name[7:]] = t
            elif name.startswith("adam_v/"):
                moments_v[name[7:]] = t
            else:
                if name not in params or tuple(params[name].shape) != tuple(shape):
                    raise CheckpointError(f"unexpected parameter {name} {shape}")
                with torch.no_grad():
                    params[name].copy_(t)
                loaded.add(name)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if loaded != set(params):
        raise CheckpointError(f"missing parameters: {sorted(set(params) - loaded)}")
    dtype = _DTYPES[stored.dtype]
    state.moments = {k: (moments_m[k].to(dtype), moments_v[k].to(dtype)) for k in moments_m}
    return state


# --- gradient check -------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: dict[str, float]
    n_checked: int

    @property
    def worst_group(self) -> str:
        return max(self.per_group, key=self.per_group.get)


def grad_check(config: ModelConfig, tc: Optional[TrainConfig] = None, T: int = 6, seed: int = 0,
               h: float = 1e-5, floor: float = 1e-6, max_per_tensor: Optional[int] = None,
               grid: Optional[TokenGrid] = None) -> GradCheckReport:
    """Compare autograd gradients against central finite differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if config.d_model > 16 or T > 8:
        raise ValueError("grad_check is meant for tiny configs (d_model <= 16, T <= 8)")
    config = replace(config, dtype="float64")
    tc = tc or TrainConfig()
    state = init_model(config)
    rng = np.random.default_rng(seed)
    if grid is None:
        grid = random_grid(config.schema, T, rng, delayed=True)
    res = loss(state, grid, tc)
    state.model.zero_grad()
    res.total.backward()
    params = dict(state.model.named_parameters())
    per_group: dict[str, float] = {}
    n_checked = 0
    with torch.no_grad():
        for name, p in params.items():
            analytic = p.grad if p.grad is not None else torch.zeros_like(p)
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_per_tensor is not None and flat.numel() > max_per_tensor:
                idx = rng.choice(flat.numel(), size=max_per_tensor, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss(state, grid, tc).total)
                flat[i] = orig - h
                down = float(loss(state, grid, tc).total)
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = float(analytic.view(-1)[i])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
                n_checked += 1
            group = name.split(".")[0]
            per_group[group] = max(per_group.get(group, 0.0), worst)
    return GradCheckReport(max(per_group.values()), per_group, n_checked)


def random_grid(schema: GridSchema, T: int, rng: np.random.Generator, delayed: bool = True) -> TokenGrid:
    """Random grid avoiding filler ids; delayed prefixes hold the filler."""
    cols = []
    for spec in schema.streams:
        cols.append(rng.integers(0, spec.vocab_size - 1, size=T))
    g = TokenGrid(schema, np.stack(cols, axis=1) if T else np.zeros((0, len(schema)), np.int64))
    if delayed:
        from .token_grid import apply_delays
        g = apply_delays(g)
    return g
