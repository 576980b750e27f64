"""The prompted encoder: frozen backbone plus trainable prompt modules."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .aci import VerbCouplerStack, VerbIndex, VideoCoupler, extract_verb, make_extractor
from .config import EncoderConfig, TemporalConfig
from .ctpl import TemporalPromptLearner
from .data import clipize
from .encoders import Backbone, ImageForward, PromptPack, trunc_normal_


@dataclass
class VideoInput:
    """A clipized video ready for the encoders."""

    video_id: str
    frames: torch.Tensor  # representative frame per clip, [L, C, H, W]
    video_features: torch.Tensor  # [L, D_V]
    clip_length: float
    duration: float

    @property
    def num_clips(self) -> int:
        return self.frames.shape[0]


@dataclass
class QueryEncoding:
    text: str
    token_ids: list[int]
    verb: VerbIndex
    layers: torch.Tensor  # [N_L, N, D]
    t_q: torch.Tensor  # [D]

    @property
    def verb_embeddings(self) -> torch.Tensor:
        return self.layers[:, self.verb.index]


class _seeded:
    """Run a block under a fixed torch seed without disturbing the global RNG."""

    def __init__(self, seed):
        self.seed = seed

    def __enter__(self):
        self.state = torch.random.get_rng_state()
        torch.manual_seed(self.seed)

    def __exit__(self, *exc):
        torch.random.set_rng_state(self.state)


class ActPromptModel(nn.Module):
    """Frozen towers with action-aware (or vanilla) prompt modules.

    ``prompt="action"`` trains the video coupler, the per-layer verb couplers
    and the temporal prompt learner.  ``prompt="vanilla"`` trains deep
    learnable prompt tokens instead, with the token count chosen so the
    parameter budget matches the action-aware model.
    """

    def __init__(self, encoder: EncoderConfig = EncoderConfig(),
                 temporal: TemporalConfig = TemporalConfig(), prompt: str = "action", seed: int = 0):
        super().__init__()
        self.encoder_config = encoder
        self.temporal_config = temporal
        self.prompt = prompt
        self.backbone = Backbone(encoder)
        D, NL = encoder.embed_dim, encoder.num_layers
        with _seeded(seed):
            if prompt == "action":
                self.video_coupler = VideoCoupler(encoder.video_dim, D)
                self.verb_couplers = VerbCouplerStack(NL, D)
                self.temporal = TemporalPromptLearner(NL, D, temporal) if temporal.enabled else None
            elif prompt == "vanilla":
                k = self.vanilla_tokens(encoder, temporal)
                self.vanilla = nn.Parameter(torch.empty(NL, k, D))
                trunc_normal_(self.vanilla, 0.02)
            else:
                raise ValueError(f"unknown prompt type {prompt!r}")

    @staticmethod
    def action_budget(encoder: EncoderConfig, temporal: TemporalConfig) -> int:
        D, DV, NL = encoder.embed_dim, encoder.video_dim, encoder.num_layers
        n = D * DV + D + NL * (D * D + D)
        if temporal.enabled:
            H = temporal.hidden_width or D
            n += (D * H + H) + (H * D + D) + max(NL - 1, 0) * temporal.window * D
        return n

    @classmethod
    def vanilla_tokens(cls, encoder, temporal) -> int:
        per_token = encoder.num_layers * encoder.embed_dim
        return max(1, math.ceil(cls.action_budget(encoder, temporal) / per_token))

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters()
                if not n.startswith("backbone.") and p.requires_grad]

    def trainable_state(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if not n.startswith("backbone.")}

    # --- inputs -------------------------------------------------------------

    def prepare_video(self, video_id, frames, fps, clip_length=2.0) -> VideoInput:
        clips = clipize(frames, fps, clip_length)
        dtype = self.backbone.video.proj.weight.dtype
        with torch.no_grad():
            center = torch.from_numpy(np.stack([c.center_frame for c in clips])).to(dtype)
            feats = self.backbone.video.encode_clips(
                [torch.from_numpy(np.asarray(c.frames)).to(dtype) for c in clips])
        return VideoInput(video_id, center, feats, clip_length, len(frames) / fps)

    def encode_query(self, text, extractor="heuristic", verb_index=None) -> QueryEncoding:
        tok = self.backbone.tokenizer
        ids = tok.encode(text)
        verb = extract_verb(tok.words(text), make_extractor(extractor, verb_index))
        with torch.no_grad():
            layers, t_q = self.backbone.text(ids)
        return QueryEncoding(text, ids, verb, layers, t_q)

    # --- forward ------------------------------------------------------------

    def pack(self, stream, video_features=None, verb_embeddings=None) -> PromptPack:
        """Prompt pack for ``stream`` in {"vid", "veb"}; vanilla ignores the cues."""
        if self.prompt == "vanilla":
            lead = video_features.shape[:-2] if video_features is not None else ()
            return PromptPack(deep=self.vanilla.expand(*lead, *self.vanilla.shape), kind="vanilla")
        fn = self.temporal
        if stream == "vid":
            return PromptPack(video=self.video_coupler(video_features), temporal_fn=fn, kind="video")
        if stream == "veb":
            return PromptPack.verb(self.verb_couplers(verb_embeddings), temporal_fn=fn)
        raise ValueError(f"unknown stream {stream!r}")

    def forward_stream(self, stream, frames, video_features, verb_embeddings=None) -> ImageForward:
        """Encode frames ``[(V,) L, C, H, W]`` with one prompt stream."""
        pack = self.pack(stream, video_features, verb_embeddings)
        return self.backbone.image(frames, pack)

    def forward_videos(self, stream, videos: list[VideoInput], verb_embeddings=None):
        """Forward several videos, batching those with equal clip counts.

        Returns one :class:`ImageForward` per video (single-video shapes).
        """
        out: list[Optional[ImageForward]] = [None] * len(videos)
        groups: dict[int, list[int]] = {}
        for i, v in enumerate(videos):
            groups.setdefault(v.num_clips, []).append(i)
        for members in groups.values():
            frames = torch.stack([videos[i].frames for i in members])
            vfeat = torch.stack([videos[i].video_features for i in members])
            verb = None
            if verb_embeddings is not None:
                verb = verb_embeddings.expand(len(members), *verb_embeddings.shape[-2:])
            res = self.forward_stream(stream, frames, vfeat, verb)
            for j, i in enumerate(members):
                out[i] = ImageForward(
                    res.features[j], res.final, type(res.attention)(res.attention.maps[j], res.attention.excluded[j]),
                    res.states, [s[j] for s in res.selections],
                )
        return out
