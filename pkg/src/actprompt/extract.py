"""Feature extraction and attention inspection with a fine-tuned checkpoint."""

from __future__ import annotations

import warnings
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .aci import prompt_attention_map
from .data import Dataset, FeatureBundle, save_features
from .exceptions import ValidationError
from .model import ActPromptModel
from .train import Checkpoint

MODES = ("vid", "vid+veb")


def _np(t):
    return None if t is None else t.detach().cpu().numpy().astype(np.float32)


def _model(source: Union[Checkpoint, ActPromptModel]) -> ActPromptModel:
    return source.build_model() if isinstance(source, Checkpoint) else source


def _clip_length(source, default=2.0):
    return source.config.clip_length if isinstance(source, Checkpoint) else default


def extract(source, dataset: Dataset, video_id: str, mode: str = "vid", query: Optional[str] = None,
            clip_length: Optional[float] = None, extractor: str = "heuristic") -> FeatureBundle:
    """Per-clip V^I_vid features (plus V^I_veb and t^q for ``vid+veb``)."""
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "vid+veb" and not query:
        raise ValidationError("mode vid+veb needs a query")
    model = _model(source)
    clip_length = clip_length or _clip_length(source)
    video = model.prepare_video(video_id, dataset.frames(video_id), dataset.fps(video_id), clip_length)
    with torch.no_grad():
        vid = model.forward_stream("vid", video.frames, video.video_features).features
        veb = t_q = None
        if mode == "vid+veb":
            q = model.encode_query(query, extractor)
            veb = model.forward_stream("veb", video.frames, video.video_features, q.verb_embeddings).features
            t_q = q.t_q
    return FeatureBundle(video_id, _np(vid), _np(video.video_features), _np(veb), _np(t_q))


def extract_to_dir(source, dataset: Dataset, video_ids, out_dir, mode="vid", query=None) -> list[Path]:
    model = _model(source)
    clip_length = _clip_length(source)
    out_dir = Path(out_dir)
    paths = []
    for vid in video_ids:
        bundle = extract(model, dataset, vid, mode, query, clip_length)
        paths.append(save_features(bundle, out_dir / f"{vid}.actp"))
    return paths


def _default_query(dataset: Dataset, video_id: str) -> Optional[str]:
    for r in dataset.records:
        if r.video_id == video_id:
            return r.query
    return None


def attention_maps(source, dataset: Dataset, video_id: str, frame: int, query: Optional[str] = None,
                   clip_length: Optional[float] = None):
    """Per-stream ``[N_L, g, g]`` prompt attention for one clip and the argmax cells.

    The verb stream needs a query; without one (and none annotated for the
    video) only the video stream is returned.
    """
    model = _model(source)
    clip_length = clip_length or _clip_length(source)
    video = model.prepare_video(video_id, dataset.frames(video_id), dataset.fps(video_id), clip_length)
    if not 0 <= frame < video.num_clips:
        raise ValidationError(f"frame {frame} outside 0..{video.num_clips - 1} for {video_id}")
    g = model.encoder_config.grid_size
    query = query or _default_query(dataset, video_id)
    maps, selected = {}, {}
    with torch.no_grad():
        runs = {"vid": model.forward_stream("vid", video.frames, video.video_features)}
        if query:
            q = model.encode_query(query)
            runs["veb"] = model.forward_stream("veb", video.frames, video.video_features, q.verb_embeddings)
        else:
            warnings.warn(f"{video_id}: no query given or annotated; verb stream skipped")
    for stream, out in runs.items():
        if out.attention.empty:
            raise ValidationError(f"{stream} stream carries no prompt token to inspect")
        m = prompt_attention_map(out.attention, frame).numpy()
        maps[stream] = m.reshape(m.shape[0], g, g)
        selected[stream] = [int(np.argmax(row)) for row in m]
    return maps, selected, query


def attention_tsv(maps, selected) -> str:
    lines = ["stream\tlayer\tcell\trow\tcol\tvalue\tselected"]
    for stream, m in maps.items():
        g = m.shape[-1]
        for l in range(m.shape[0]):
            for cell in range(g * g):
                r, c = divmod(cell, g)
                lines.append(f"{stream}\t{l + 1}\t{cell}\t{r}\t{c}\t{m[l, r, c]:.3f}\t"
                             f"{int(cell == selected[stream][l])}")
    return "\n".join(lines) + "\n"


def inspect_attention(source, dataset: Dataset, video_id: str, frame: int, out_path,
                      query: Optional[str] = None) -> tuple[Path, Path]:
    """Write a heatmap image and a sibling ``.tsv`` grid of the same numbers."""
    from .plotting import attention_grid

    maps, selected, query = attention_maps(source, dataset, video_id, frame, query)
    out_path = Path(out_path)
    title = f"{video_id} clip {frame}" + (f" / {query}" if query else "")
    img = attention_grid(maps, selected, out_path, title)
    tsv = out_path.with_suffix(".tsv")
    tsv.write_text(attention_tsv(maps, selected), encoding="utf-8")
    return img, tsv
