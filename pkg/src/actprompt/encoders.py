"""Toy transformer towers with prompt-injection slots.

The image encoder is a pre-norm ViT whose forward pass accepts a
:class:`PromptPack`.  Each layer sees the token layout::

    [class, action prompt(s), patches, temporal prompts]

Temporal prompts live for exactly one layer: their outputs are dropped before
the next layer is assembled.  Deep prompts (verb-guided or vanilla) replace the
previous layer's prompt output at the same position.
"""

from __future__ import annotations

import hashlib
import re
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import EncoderConfig
from .exceptions import ConfigError, ValidationError

_WORD_STRIP = re.compile(r"^[^\w]+|[^\w]+$")


def trunc_normal_(tensor, std):
    return nn.init.trunc_normal_(tensor, std=std, a=-2 * std, b=2 * std)


class Tokenizer:
    """Lowercase whitespace tokenizer hashing words into ``vocab_size - 2`` buckets.

    The last two ids are reserved for BOS and EOS.  Hashing uses CRC32 so ids
    are stable across processes and platforms.
    """

    def __init__(self, vocab_size=1024, max_tokens=16):
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.bos_id = vocab_size - 2
        self.eos_id = vocab_size - 1

    def words(self, text: str) -> list[str]:
        words = [_WORD_STRIP.sub("", w) for w in text.lower().split()]
        return [w for w in words if w][: self.max_tokens - 2]

    def word_id(self, word: str) -> int:
        return zlib.crc32(word.encode("utf-8")) % (self.vocab_size - 2)

    def encode(self, text: str) -> list[int]:
        words = self.words(text)
        if not words:
            raise ValidationError("empty query")
        return [self.bos_id] + [self.word_id(w) for w in words] + [self.eos_id]


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        B, S, D = x.shape
        qkv = self.qkv(x).reshape(B, S, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        scores = (q @ k.transpose(-2, -1)) * self.head_dim ** -0.5
        if mask is not None:
            scores = scores + mask
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, S, D)
        return self.proj(out), attn


class Block(nn.Module):
    """Pre-norm transformer layer returning its attention probabilities."""

    def __init__(self, dim, num_heads, mlp_ratio=4):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.ln_2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x, mask=None):
        h, attn = self.attn(self.ln_1(x), mask)
        x = x + h
        x = x + self.mlp(self.ln_2(x))
        return x, attn


def _init_linear_stack(module: nn.Module):
    # Fan-in scaled weights keep attention away from the uniform regime that a
    # sigma=0.02 random backbone falls into.
    for m in module.modules():
        if isinstance(m, nn.Linear):
            trunc_normal_(m.weight, m.weight.shape[1] ** -0.5)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class PromptPack:
    """Prompts injected into one image-encoder forward pass.

    ``video`` holds one prompt per frame, ``[V, L, D]``; it enters layer 1 only.
    ``deep`` holds prompts re-injected at every layer, ``[V, N_L, k, D]``; this
    is used for verb-guided prompts (k=1) and vanilla prompts.  ``temporal``
    maps a 1-based layer ``l`` to the prompts consumed by layer ``l + 1``
    (``[V, L, m, D]``); ``temporal_fn`` builds them during the sweep instead.
    Leading ``V`` dims may be omitted when the frames are a single video.
    """

    video: Optional[torch.Tensor] = None
    deep: Optional[torch.Tensor] = None
    temporal: Optional[Mapping[int, torch.Tensor]] = None
    temporal_fn: Optional[Callable] = None
    kind: str = field(default="")

    def __post_init__(self):
        if self.video is not None and self.deep is not None:
            raise ConfigError("a PromptPack carries one action prompt stream, not two")
        if self.temporal is not None and self.temporal_fn is not None:
            raise ConfigError("give either precomputed temporal prompts or a generator")
        if not self.kind:
            self.kind = "video" if self.video is not None else "deep" if self.deep is not None else "none"

    @property
    def num_prompts(self) -> int:
        if self.video is not None:
            return 1
        if self.deep is not None:
            return self.deep.shape[-2]
        return 0

    @classmethod
    def verb(cls, prompts, temporal_fn=None):
        """Verb-guided pack from per-layer prompts ``[(V,) N_L, D]``."""
        return cls(deep=prompts.unsqueeze(-2), temporal_fn=temporal_fn, kind="verb")


@dataclass
class LayerState:
    """Token groups entering (or leaving) one layer, with their positions."""

    layer: int
    cls: torch.Tensor
    prompts: Optional[torch.Tensor]
    patches: torch.Tensor
    temporal: Optional[torch.Tensor] = None

    @property
    def layout(self) -> list[tuple[str, int, int]]:
        spans, pos = [], 0
        for name, t in (("class", self.cls), ("prompt", self.prompts),
                        ("patch", self.patches), ("temporal", self.temporal)):
            n = 0 if t is None else t.shape[-2]
            if n:
                spans.append((name, pos, pos + n))
            pos += n
        return spans

    def sequence(self) -> torch.Tensor:
        parts = [t for t in (self.cls, self.prompts, self.patches, self.temporal) if t is not None]
        return torch.cat(parts, dim=-2)

    @property
    def length(self) -> int:
        return self.sequence().shape[-2]


@dataclass
class AttentionStack:
    """Prompt-to-patch attention rows, ``maps[..., layer, patch]``.

    ``excluded`` is the softmax mass the prompt put on non-patch tokens, so
    ``maps.sum(-1) + excluded == 1``.
    """

    maps: torch.Tensor
    excluded: torch.Tensor

    @property
    def empty(self) -> bool:
        return self.maps.shape[-2] == 0


@dataclass
class ImageForward:
    features: torch.Tensor
    final: LayerState
    attention: AttentionStack
    states: list[LayerState]
    selections: list[torch.Tensor] = field(default_factory=list)


class ImageEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = c = config
        D, P = c.embed_dim, c.patch_size
        self.patch_proj = nn.Linear(c.channels * P * P, D, bias=False)
        self.class_embedding = nn.Parameter(torch.zeros(D))
        self.positional_embedding = nn.Parameter(torch.zeros(1 + c.num_patches, D))
        self.ln_pre = nn.LayerNorm(D)
        self.blocks = nn.ModuleList([Block(D, c.num_heads) for _ in range(c.num_layers)])
        self.ln_post = nn.LayerNorm(D)
        self.proj = nn.Linear(D, D, bias=False)
        _init_linear_stack(self)
        trunc_normal_(self.class_embedding, 0.02)
        trunc_normal_(self.positional_embedding, 0.02)

    def patchify(self, frames):
        """``[B, C, H, W]`` -> ``[B, N_p, C*P*P]`` in row-major patch order."""
        c = self.config
        if frames.shape[-3:] != (c.channels, c.image_size, c.image_size):
            raise ConfigError(
                f"frame shape {tuple(frames.shape[-3:])} does not match "
                f"({c.channels}, {c.image_size}, {c.image_size})"
            )
        B, P, g = frames.shape[0], c.patch_size, c.grid_size
        x = frames.reshape(B, c.channels, g, P, g, P).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(B, g * g, c.channels * P * P)

    def embed_patches(self, frames):
        single = frames.dim() == 3
        if single:
            frames = frames.unsqueeze(0)
        E = self.patch_proj(self.patchify(frames)) + self.positional_embedding[1:]
        return E[0] if single else E

    def forward(self, frames, prompts: Optional[PromptPack] = None) -> ImageForward:
        """Run frames of one or more videos through the prompted encoder.

        ``frames`` is ``[L, C, H, W]`` or ``[V, L, C, H, W]``.  All frames advance
        through layer ``l`` together, so temporal prompts for layer ``l + 1`` can
        read layer-``l`` selections from neighbouring frames.
        """
        pack = prompts or PromptPack()
        c = self.config
        single = frames.dim() == 4
        if single:
            frames = frames.unsqueeze(0)
        V, L = frames.shape[:2]
        D, Np, NL = c.embed_dim, c.num_patches, c.num_layers
        B = V * L

        video = deep = None
        if pack.video is not None:
            v = pack.video.unsqueeze(0) if single else pack.video
            if v.shape[-1] != D:
                raise ConfigError(f"video prompt dimension {v.shape[-1]} != embed_dim {D}")
            video = v.reshape(B, 1, D)
        if pack.deep is not None:
            d = pack.deep if not single else pack.deep.unsqueeze(0)
            if d.shape[-1] != D:
                raise ConfigError(f"deep prompt dimension {d.shape[-1]} != embed_dim {D}")
            if d.shape[1] != NL:
                raise ConfigError(f"deep prompts cover {d.shape[1]} layers, encoder has {NL}")
            deep = d.unsqueeze(1).expand(V, L, *d.shape[1:]).reshape(B, NL, d.shape[-2], D)
        if pack.temporal is not None:
            for l in pack.temporal:
                if not 1 <= l < NL:
                    raise ConfigError(f"temporal prompt for layer {l} has no consumer layer")

        E = self.embed_patches(frames.reshape(B, *frames.shape[2:]))
        x = (self.class_embedding + self.positional_embedding[0]).expand(B, 1, D)
        seq = self.ln_pre(torch.cat([x, E], dim=1))
        cls, patches = seq[:, :1], seq[:, 1:]
        prompt = video if video is not None else (deep[:, 0] if deep is not None else None)
        k = 0 if prompt is None else prompt.shape[1]

        temporal = None
        states, rows, excluded, selections = [], [], [], []
        for l, block in enumerate(self.blocks, start=1):
            if deep is not None and l > 1:
                prompt = deep[:, l - 1]
            state = LayerState(l, cls, prompt, patches, temporal)
            states.append(state)
            out, attn = block(state.sequence())
            cls, patches = out[:, :1], out[:, 1 + k:1 + k + Np]
            prompt = out[:, 1:1 + k] if k else None
            temporal = None
            if k:
                full = attn.mean(dim=1)[:, 1:1 + k].mean(dim=1)
                row = full[:, 1 + k:1 + k + Np]
                rows.append(row)
                excluded.append(full.sum(-1) - row.sum(-1))
                selections.append(row.detach().argmax(dim=-1).reshape(V, L))
            if l < NL:
                temporal = self._temporal_for(pack, l, rows[-1] if k else None, patches, V, L)
                if temporal is not None and temporal.shape[-1] != D:
                    raise ConfigError("temporal prompt dimension != embed_dim")

        final = LayerState(NL + 1, cls, prompt, patches)
        feats = self.proj(self.ln_post(cls[:, 0]))
        if rows:
            maps = torch.stack(rows, dim=1).reshape(V, L, NL, Np)
            exc = torch.stack(excluded, dim=1).reshape(V, L, NL)
        else:
            maps = feats.new_zeros(V, L, 0, Np)
            exc = feats.new_zeros(V, L, 0)
        feats = feats.reshape(V, L, D)
        if single:
            feats, maps, exc = feats[0], maps[0], exc[0]
            selections = [s[0] for s in selections]
        return ImageForward(feats, final, AttentionStack(maps, exc), states, selections)

    def _temporal_for(self, pack, layer, row, patches, V, L):
        if pack.temporal is not None:
            t = pack.temporal.get(layer)
            if t is None:
                return None
            t = t.reshape(V, L, *t.shape[-2:]) if t.dim() == 4 else t.unsqueeze(0)
            return t.reshape(V * L, *t.shape[-2:])
        if pack.temporal_fn is None:
            return None
        if row is None:
            raise ConfigError("temporal prompts need an action prompt to select patches")
        D = patches.shape[-1]
        out = pack.temporal_fn(layer, row.reshape(V, L, -1), patches.reshape(V, L, -1, D))
        return out.reshape(V * L, *out.shape[-2:])


class TextEncoder(nn.Module):
    """Causal text transformer exposing every layer's token embeddings."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = c = config
        D = c.embed_dim
        self.token_embedding = nn.Embedding(c.vocab_size, D)
        self.positional_embedding = nn.Parameter(torch.zeros(c.max_tokens, D))
        self.blocks = nn.ModuleList([Block(D, c.num_heads) for _ in range(c.num_layers)])
        self.ln_final = nn.LayerNorm(D)
        self.proj = nn.Linear(D, D, bias=False)
        _init_linear_stack(self)
        trunc_normal_(self.token_embedding.weight, 0.02)
        trunc_normal_(self.positional_embedding, 0.01)

    def causal_mask(self, n, like):
        return torch.full((n, n), float("-inf"), dtype=like.dtype, device=like.device).triu(1)

    def forward(self, token_ids):
        """Return ``(per-layer embeddings [N_L, N, D], t_q [D])``.

        ``t_q`` is the projected final-layer embedding at the last (EOS) position.
        """
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.dim() != 1 or ids.numel() == 0:
            raise ValidationError("token sequence must be a non-empty 1-D list")
        if ids.numel() > self.config.max_tokens:
            raise ValidationError(f"{ids.numel()} tokens exceed max_tokens={self.config.max_tokens}")
        n = ids.numel()
        x = (self.token_embedding(ids) + self.positional_embedding[:n]).unsqueeze(0)
        mask = self.causal_mask(n, x)
        layers = []
        for block in self.blocks:
            x, _ = block(x, mask)
            layers.append(x[0])
        t_q = self.proj(self.ln_final(x[0, -1]))
        return torch.stack(layers), t_q


def clip_statistics(clip, grid_size):
    """Summary statistics of a clip ``[F, C, H, W]``.

    Concatenates per-channel means and stds of the mean frame, per-channel
    mean absolute inter-frame difference, and the channel-averaged absolute
    difference pooled over the ``grid_size x grid_size`` patch grid.
    """
    clip = torch.as_tensor(clip)
    if clip.dim() != 4 or clip.shape[0] < 1:
        raise ValidationError("a clip needs at least one frame [F, C, H, W]")
    C, H, W = clip.shape[1:]
    mean_frame = clip.mean(dim=0)
    ch_mean = mean_frame.mean(dim=(1, 2))
    ch_std = mean_frame.reshape(C, -1).std(dim=1, unbiased=False)
    if clip.shape[0] > 1:
        diff = (clip[1:] - clip[:-1]).abs().mean(dim=0)
    else:
        diff = torch.zeros_like(mean_frame)
    ch_diff = diff.mean(dim=(1, 2))
    g = grid_size
    grid = diff.mean(dim=0).reshape(g, H // g, g, W // g).mean(dim=(1, 3)).reshape(-1)
    return torch.cat([ch_mean, ch_std, ch_diff, grid])


# Gain of the stats projection; keeps per-dimension video features near unit scale.
VIDEO_FEATURE_GAIN = 4.0


class VideoFeatureProvider(nn.Module):
    """Default motion-statistics video encoder (frozen stand-in for a 3D CNN)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.stat_dim = 3 * config.channels + config.num_patches
        self.proj = nn.Linear(self.stat_dim, config.video_dim, bias=False)
        trunc_normal_(self.proj.weight, VIDEO_FEATURE_GAIN * self.stat_dim ** -0.5)

    def forward(self, clip_frames):
        stats = clip_statistics(clip_frames, self.config.grid_size).to(self.proj.weight.dtype)
        return self.proj(stats)

    def encode_clips(self, clips: Sequence) -> torch.Tensor:
        return torch.stack([self(c) for c in clips])


class PrecomputedVideoFeatures:
    """Video-feature provider backed by saved feature bundles in a directory."""

    def __init__(self, directory):
        from pathlib import Path

        self.directory = Path(directory)

    def __call__(self, video_id: str) -> torch.Tensor:
        from .data import load_features

        path = self.directory / f"{video_id}.actp"
        if not path.exists():
            raise FileNotFoundError(f"no precomputed video features for video {video_id!r} ({path})")
        return torch.from_numpy(load_features(path).video_features.copy())


_WARM_CACHE: dict = {}


class Backbone(nn.Module):
    """The frozen towers: image, text and video-feature encoders.

    Towers start from a seeded random init; ``config.pretrain_steps`` > 0 then
    runs the colour-caption contrastive warm-up (cached per config within a
    process, so repeated builds are cheap and identical).
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(config.seed)
        try:
            self.image = ImageEncoder(config)
            self.text = TextEncoder(config)
            self.video = VideoFeatureProvider(config)
        finally:
            torch.random.set_rng_state(gen_state)
        self.tokenizer = Tokenizer(config.vocab_size, config.max_tokens)
        self.requires_grad_(False)
        if config.pretrain_steps:
            self._warm_up()

    def _warm_up(self):
        key = self.config
        if key not in _WARM_CACHE:
            from .pretrain import pretrain_backbone

            pretrain_backbone(self, self.config.pretrain_steps, seed=self.config.seed)
            _WARM_CACHE[key] = {k: v.clone() for k, v in self.state_dict().items()}
        self.load_state_dict(_WARM_CACHE[key])

    def hash(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            arr = tensor.detach().cpu().numpy()
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()
