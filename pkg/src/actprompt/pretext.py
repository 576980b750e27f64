"""Moment-query pretext objectives and quadruple sampling."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .config import LossWeights
from .exceptions import SamplingError, ValidationError

_EPS = 1e-12


@dataclass(frozen=True)
class MomentSpan:
    start: float
    end: float
    video_id: str = ""

    def __post_init__(self):
        if not (self.start >= 0 and self.end > self.start):
            raise ValidationError(f"invalid moment [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start

    def overlap(self, other: "MomentSpan") -> float:
        return max(0.0, min(self.end, other.end) - max(self.start, other.start))

    def clip_range(self, clip_length: float, num_clips: int) -> tuple[int, int]:
        """Half-open range of clip indices the span touches."""
        a = int(math.floor(self.start / clip_length + 1e-9))
        b = int(math.ceil(self.end / clip_length - 1e-9))
        a = min(max(a, 0), num_clips - 1)
        return a, min(max(b, a + 1), num_clips)


@dataclass(frozen=True)
class MomentQuadruple:
    qid: str
    query: str
    positive: MomentSpan
    intra_negative: Optional[MomentSpan]
    inter_negative: MomentSpan
    verb_index: Optional[int] = None

    @property
    def moments(self) -> list[MomentSpan]:
        spans = [self.positive, self.intra_negative, self.inter_negative]
        return [s for s in spans if s is not None]


def num_clips(duration: float, clip_length: float) -> int:
    """Clip count with the final partial clip kept iff it is >= half a clip."""
    full = int(math.floor(duration / clip_length + 1e-9))
    rest = duration - full * clip_length
    return full + (1 if rest >= clip_length / 2 - 1e-9 and rest > 1e-9 else 0)


def _clip_span(first, count, clip_length, duration, video_id):
    return MomentSpan(first * clip_length, min((first + count) * clip_length, duration), video_id)


def _free_runs(blocked: np.ndarray) -> list[tuple[int, int]]:
    runs, start = [], None
    for i, b in enumerate(list(blocked) + [True]):
        if not b and start is None:
            start = i
        elif b and start is not None:
            runs.append((start, i))
            start = None
    return runs


def sample_intra_negative(record, positive: MomentSpan, rng, clip_length, min_gap_clips=0):
    """Clip-aligned span of the same video that touches none of its windows.

    Same length (in clips) as the positive when the free region allows,
    otherwise the longest fitting span; ``None`` with a warning if not even one
    clip is free.
    """
    L = num_clips(record.duration, clip_length)
    a, b = positive.clip_range(clip_length, L)
    n = b - a
    blocked = np.zeros(L, dtype=bool)
    for w in list(record.relevant_windows) + [positive]:
        wa, wb = w.clip_range(clip_length, L)
        blocked[max(wa - min_gap_clips, 0):min(wb + min_gap_clips, L)] = True
    runs = _free_runs(blocked)
    if not runs:
        warnings.warn(f"{record.qid}: positive leaves no free clip; no intra-video negative")
        return None
    longest = max(e - s for s, e in runs)
    if longest < n:
        warnings.warn(f"{record.qid}: intra-video negative shrunk from {n} to {longest} clips")
        n = longest
    starts = [s for rs, re in runs for s in range(rs, re - n + 1)]
    first = starts[int(rng.integers(len(starts)))]
    return _clip_span(first, n, clip_length, record.duration, record.video_id)


def sample_quadruple(batch: Sequence, position: int, rng: np.random.Generator, clip_length=2.0,
                     min_gap_clips=0, inter_negative="annotated") -> MomentQuadruple:
    """Build the quadruple for ``batch[position]``.

    ``rng`` is a numpy Generator threaded by the caller, so results depend only
    on its state.
    """
    record = batch[position]
    others = [r for r in batch if r.video_id != record.video_id]
    if not others:
        raise SamplingError("batch holds a single video; use a larger batch for inter-video negatives")
    windows = record.relevant_windows
    positive = windows[int(rng.integers(len(windows)))]
    positive = MomentSpan(positive.start, positive.end, record.video_id)
    intra = sample_intra_negative(record, positive, rng, clip_length, min_gap_clips)

    other = others[int(rng.integers(len(others)))]
    if inter_negative == "annotated":
        w = other.relevant_windows[int(rng.integers(len(other.relevant_windows)))]
        inter = MomentSpan(w.start, w.end, other.video_id)
    else:
        L_other = num_clips(other.duration, clip_length)
        pa, pb = positive.clip_range(clip_length, num_clips(record.duration, clip_length))
        n = min(pb - pa, L_other)
        first = int(rng.integers(L_other - n + 1))
        inter = _clip_span(first, n, clip_length, other.duration, other.video_id)
    return MomentQuadruple(record.qid, record.query, positive, intra, inter, record.verb_index)


def moment_representation(frame_features):
    """L2-normalize each frame feature ``[L_m, D]``, then average."""
    x = torch.as_tensor(frame_features)
    if x.dim() != 2 or x.shape[0] < 1:
        raise ValidationError("moment needs at least one frame feature [L_m, D]")
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms.detach() == 0).any()):
        warnings.warn("zero-norm frame feature in moment; treated as zero")
    return (x / norms.clamp_min(_EPS)).mean(dim=0)


def cosine(a, b):
    """Cosine similarity along the last dim (broadcasting)."""
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(_EPS)


def _check_query(t_q):
    if float(torch.as_tensor(t_q).detach().norm()) == 0:
        raise ValidationError("query representation has zero norm")


def triplet_loss(vid_reps, veb_reps, t_q):
    """Joint softmax ranking of the positive (row 0) in both prompt streams.

    ``vid_reps``/``veb_reps`` stack ``[positive, intra-, inter-]`` moment
    representations; the intra row may be absent.
    """
    _check_query(t_q)
    s_vid = cosine(torch.as_tensor(vid_reps), t_q)
    s_veb = cosine(torch.as_tensor(veb_reps), t_q)
    return -(torch.log_softmax(s_vid, dim=0)[0] + torch.log_softmax(s_veb, dim=0)[0])


def contrastive_loss(positive_rep, queries, positive_index: int):
    """Cross-entropy of the positive moment against all batch queries."""
    queries = torch.as_tensor(queries)
    if not 0 <= positive_index < queries.shape[0]:
        raise ValidationError(f"positive index {positive_index} outside batch of {queries.shape[0]}")
    _check_query(queries[positive_index])
    sims = cosine(torch.as_tensor(positive_rep).unsqueeze(0), queries)
    return -torch.log_softmax(sims, dim=0)[positive_index]


def total_loss(l_ce, l_tri, l_con, weights: LossWeights = LossWeights()):
    return l_ce + weights.alpha1 * l_tri + weights.alpha2 * l_con
