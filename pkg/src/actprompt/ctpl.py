"""Context-aware temporal prompts built from attention-selected patches."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import TemporalConfig
from .encoders import trunc_normal_
from .exceptions import ConfigError


def select_top_patch(attention_row, patches):
    """Return ``(i*, patches[i*])`` for the most-attended patch.

    Ties go to the lowest index.  The index carries no gradient; the gathered
    embedding does.
    """
    i = int(torch.as_tensor(attention_row).detach().argmax())
    return i, patches[i]


def window_indices(num_frames: int, T: int) -> torch.Tensor:
    """0-based frame index for each ``(center, offset)``, replication padded."""
    centers = torch.arange(num_frames).unsqueeze(1)
    offsets = torch.arange(-T, T + 1).unsqueeze(0)
    return (centers + offsets).clamp(0, num_frames - 1)


def assemble_window(selected, center: int, T: int, positional=None):
    """Stack ``selected`` rows for frames ``center-T .. center+T`` (1-based).

    Out-of-range frames are clamped to the first/last frame; ``positional``
    (``[2T+1, D]``) is added row-wise when given.
    """
    L = selected.shape[0]
    if not 1 <= center <= L:
        raise ConfigError(f"center frame {center} outside 1..{L}")
    rows = window_indices(L, T)[center - 1]
    window = selected[rows]
    return window if positional is None else window + positional


class TemporalGenerator(nn.Module):
    """Tokenwise two-layer MLP; the residual is added by the caller."""

    def __init__(self, embed_dim, hidden_width=0):
        super().__init__()
        hidden = hidden_width or embed_dim
        self.fc1 = nn.Linear(embed_dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, embed_dim)
        trunc_normal_(self.fc1.weight, embed_dim ** -0.5)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def temporal_prompt(window, generator: TemporalGenerator):
    return generator(window) + window


class TemporalPromptLearner(nn.Module):
    """Generator plus per-layer positional tables.

    Only layers ``1 .. N_L-1`` get a table, since a layer-``l`` prompt is
    consumed by layer ``l+1``.  Instances are used as ``PromptPack.temporal_fn``.
    """

    def __init__(self, num_layers, embed_dim, config: TemporalConfig = TemporalConfig()):
        super().__init__()
        self.config = config
        self.T = config.T
        self.positional = nn.Parameter(torch.zeros(max(num_layers - 1, 0), config.window, embed_dim))
        self.generator = TemporalGenerator(embed_dim, config.hidden_width)

    def windows(self, layer, attention, patches):
        """Replication-padded windows ``[V, L, 2T+1, D]`` for 1-based ``layer``."""
        if not 1 <= layer <= self.positional.shape[0]:
            raise ConfigError(f"no temporal prompt for layer {layer} (no consumer layer)")
        V, L, Np, D = patches.shape
        idx = attention.detach().argmax(dim=-1)
        selected = patches.gather(2, idx[..., None, None].expand(V, L, 1, D)).squeeze(2)
        rows = window_indices(L, self.T).to(selected.device)
        return selected[:, rows] + self.positional[layer - 1]

    def forward(self, layer, attention, patches):
        return temporal_prompt(self.windows(layer, attention, patches), self.generator)
