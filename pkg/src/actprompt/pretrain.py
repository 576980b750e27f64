"""Contrastive warm-up that turns the random towers into a toy "pretrained" VLM.

Frames show a static coloured square and captions only name its colour, so
the towers learn object/colour alignment but never see motion or action
words.  That is the gap the action cues are meant to fill.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ConfigError
from .data import COLOURS, random_background, render_frame


def caption_batch(rng, image_size, channels, square_size=8):
    colours = [sorted(COLOURS)[i] for i in rng.permutation(len(COLOURS))]
    frames, captions = [], []
    for colour in colours:
        y, x = rng.integers(0, image_size - square_size + 1, size=2)
        frames.append(render_frame(random_background(rng, channels, image_size), colour, y, x, square_size))
        captions.append(f"{colour} square")
    return np.stack(frames).astype(np.float32), captions


def pretrain_backbone(backbone, steps: int, seed: int = 0, lr: float = 1e-3, logit_scale: float = 10.0):
    """Symmetric InfoNCE on (frame, caption) pairs; returns per-step losses."""
    c = backbone.config
    if c.channels != 3 or c.image_size < 8:
        raise ConfigError("caption warm-up draws RGB frames of at least 8x8 pixels")
    rng = np.random.default_rng(seed)
    towers = [backbone.image, backbone.text]
    params = [p for t in towers for p in t.parameters()]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    dtype = backbone.image.proj.weight.dtype
    sq = min(8, c.image_size // 2)
    losses = []
    try:
        for _ in range(steps):
            frames, captions = caption_batch(rng, c.image_size, c.channels, sq)
            img = F.normalize(backbone.image(torch.from_numpy(frames).to(dtype)).features, dim=-1)
            txt = F.normalize(torch.stack(
                [backbone.text(backbone.tokenizer.encode(t))[1] for t in captions]), dim=-1)
            logits = logit_scale * img @ txt.T
            target = torch.arange(len(captions))
            loss = (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)) / 2
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
    finally:
        for p in params:
            p.requires_grad_(False)
    return losses
