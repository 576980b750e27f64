"""Fine-tuning with a frozen backbone, checkpoints and parameter accounting."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .aci import consistency_loss
from .config import TrainConfig, from_flat, to_flat
from .data import Dataset
from .exceptions import FormatError, NumericError, SamplingError, ValidationError
from .model import ActPromptModel, QueryEncoding, VideoInput
from .pretext import (MomentQuadruple, contrastive_loss, cosine, moment_representation,
                      sample_quadruple, total_loss, triplet_loss)

log = logging.getLogger(__name__)


def disjoint_epoch_sampler(n_samples: int, data_ratio: float, epoch: int, seed: int = 0) -> list[int]:
    """Indices used in ``epoch``.

    A seed-fixed permutation of ``range(n_samples)`` is cut into
    ``ceil(1/data_ratio)`` near-equal contiguous chunks; epoch ``e`` takes
    chunk ``e mod ceil(1/data_ratio)``.
    """
    if not 0 < data_ratio <= 1:
        raise ValidationError("data_ratio must lie in (0, 1]")
    chunks = math.ceil(1 / data_ratio - 1e-9)
    perm = np.random.default_rng(seed).permutation(n_samples)
    return [int(i) for i in np.array_split(perm, chunks)[epoch % chunks]]


def make_batches(indices, batch_size):
    batches = [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = batches[-1] + last
    return batches


@dataclass
class LossParts:
    l_ce: torch.Tensor
    l_tri: torch.Tensor
    l_con: torch.Tensor
    l_total: torch.Tensor

    def as_floats(self):
        return {k: float(getattr(self, k).detach()) for k in ("l_ce", "l_tri", "l_con", "l_total")}


def _moment_frames(span, video: VideoInput):
    a, b = span.clip_range(video.clip_length, video.num_clips)
    return slice(a, b)


def batch_loss(model: ActPromptModel, quads: list[MomentQuadruple], videos: dict[str, VideoInput],
               queries: dict[str, QueryEncoding], weights) -> LossParts:
    """Mean total loss over a batch of quadruples.

    The video-guided stream runs once per batch video; the verb-guided stream
    runs per quadruple because its prompts come from that quadruple's query.
    The consistency term covers the frames of the quadruple's moments.
    """
    vids = sorted({m.video_id for q in quads for m in q.moments})
    vid_out = dict(zip(vids, model.forward_videos("vid", [videos[v] for v in vids])))
    t_all = torch.stack([queries[q.qid].t_q for q in quads])
    vanilla = model.prompt == "vanilla"

    ce, tri, con = [], [], []
    for i, q in enumerate(quads):
        enc = queries[q.qid]
        own = sorted({m.video_id for m in q.moments})
        if vanilla:
            veb_out = {v: vid_out[v] for v in own}
        else:
            res = model.forward_videos("veb", [videos[v] for v in own], enc.verb_embeddings)
            veb_out = dict(zip(own, res))
        reps_vid, reps_veb, a_vid, a_veb = [], [], [], []
        for m in q.moments:
            sl = _moment_frames(m, videos[m.video_id])
            reps_vid.append(moment_representation(vid_out[m.video_id].features[sl]))
            reps_veb.append(moment_representation(veb_out[m.video_id].features[sl]))
            a_vid.append(vid_out[m.video_id].attention.maps[sl])
            a_veb.append(veb_out[m.video_id].attention.maps[sl])
        reps_vid, reps_veb = torch.stack(reps_vid), torch.stack(reps_veb)
        tri.append(triplet_loss(reps_vid, reps_veb, enc.t_q))
        ce.append(contrastive_loss(reps_vid[0], t_all, i))
        if vanilla:
            con.append(reps_vid.new_zeros(()))
        else:
            con.append(consistency_loss(torch.cat(a_vid), torch.cat(a_veb)))
    l_ce, l_tri, l_con = torch.stack(ce).mean(), torch.stack(tri).mean(), torch.stack(con).mean()
    return LossParts(l_ce, l_tri, l_con, total_loss(l_ce, l_tri, l_con, weights))


class PreparedData:
    """Clipized videos and encoded queries for a dataset, computed once."""

    def __init__(self, model: ActPromptModel, dataset: Dataset, config: TrainConfig):
        self.dataset = dataset
        self.records = dataset.records
        self.videos = {}
        for vid in dataset.video_ids:
            self.videos[vid] = model.prepare_video(vid, dataset.frames(vid), dataset.fps(vid),
                                                   config.clip_length)
        self.queries = {
            r.qid: model.encode_query(r.query, config.verb_extractor, r.verb_index)
            for r in self.records
        }

    def quadruples(self, indices, rng, config: TrainConfig):
        batch = [self.records[i] for i in indices]
        if len({r.video_id for r in batch}) < 2:
            raise SamplingError(
                f"batch {indices} holds a single video; use a larger batch for inter-video negatives")
        return [sample_quadruple(batch, j, rng, config.clip_length, config.sampling.min_gap_clips,
                                 config.sampling.inter_negative) for j in range(len(batch))]


@dataclass
class Checkpoint:
    trainables: dict[str, np.ndarray]
    backbone_hash: str
    config: TrainConfig
    epoch: int = 0

    MAGIC = b"ACTC"
    VERSION = 1

    def to_bytes(self) -> bytes:
        names = sorted(self.trainables)
        header = {
            "backbone_hash": self.backbone_hash,
            "config": to_flat(self.config),
            "epoch": self.epoch,
            "tensors": [{"name": n, "shape": list(self.trainables[n].shape),
                         "dtype": self.trainables[n].dtype.str.lstrip("<>=|")} for n in names],
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        parts = [self.MAGIC, struct.pack("<HI", self.VERSION, len(head)), head]
        for n in names:
            arr = self.trainables[n]
            parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:4] != cls.MAGIC:
            raise FormatError("not an ActPrompt checkpoint (bad magic)")
        version, n = struct.unpack_from("<HI", blob, 4)
        if version != cls.VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 10 + n
        header = json.loads(blob[10:pos])
        tensors = {}
        for t in header["tensors"]:
            dtype = np.dtype("<" + t["dtype"])
            count = int(np.prod(t["shape"], dtype=np.int64))
            if pos + count * dtype.itemsize > len(blob):
                raise FormatError("truncated checkpoint payload")
            tensors[t["name"]] = np.frombuffer(blob, dtype, count, pos).reshape(t["shape"]).copy()
            pos += count * dtype.itemsize
        if pos != len(blob):
            raise FormatError("trailing bytes after checkpoint payload")
        return cls(tensors, header["backbone_hash"], from_flat(header["config"]), header["epoch"])

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_model(cls, model: ActPromptModel, config: TrainConfig, epoch: int) -> "Checkpoint":
        tensors = {n: p.detach().cpu().numpy().copy() for n, p in model.trainable_state().items()}
        return cls(tensors, model.backbone.hash(), config, epoch)

    def build_model(self) -> ActPromptModel:
        c = self.config
        model = ActPromptModel(c.encoder, c.temporal, c.prompt, c.seed)
        if model.backbone.hash() != self.backbone_hash:
            raise ValidationError("checkpoint backbone hash does not match the rebuilt backbone")
        state = model.trainable_state()
        if set(state) != set(self.trainables):
            raise FormatError("checkpoint tensors do not match the model's trainable parameters")
        with torch.no_grad():
            for n, p in state.items():
                p.copy_(torch.from_numpy(self.trainables[n]).to(p.dtype))
        return model


@dataclass
class ParameterCount:
    trainable: int
    frozen: int
    by_module: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        total = self.trainable + self.frozen
        return self.trainable / total if total else 0.0

    def banner(self) -> str:
        lines = [f"parameters: trainable={self.trainable:,} frozen={self.frozen:,} "
                 f"({100 * self.ratio:.1f}% trainable)"]
        for name, (t, f) in sorted(self.by_module.items()):
            lines.append(f"  {name:<20} trainable={t:>9,} frozen={f:>9,}")
        return "\n".join(lines)


def count_parameters(model: torch.nn.Module) -> ParameterCount:
    by_module: dict[str, list[int]] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "backbone" else parts[0]
        slot = by_module.setdefault(key, [0, 0])
        slot[0 if p.requires_grad else 1] += p.numel()
    trainable = sum(t for t, _ in by_module.values())
    frozen = sum(f for _, f in by_module.values())
    return ParameterCount(trainable, frozen, {k: tuple(v) for k, v in by_module.items()})


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    model: ActPromptModel
    backbone_hash_before: str
    backbone_hash_after: str

    def epoch_means(self, key="l_total") -> list[float]:
        epochs = sorted({h["epoch"] for h in self.history})
        return [float(np.mean([h[key] for h in self.history if h["epoch"] == e])) for e in epochs]


def finetune(config: TrainConfig, dataset: Dataset, model: Optional[ActPromptModel] = None,
             log_path=None, prepared: Optional[PreparedData] = None) -> TrainResult:
    """Train the prompt modules; the backbone must come out bit-identical.

    Writes one JSON line per step to ``log_path`` when given.
    """
    if len({r.video_id for r in dataset.records}) < 2:
        raise SamplingError("dataset holds a single video; inter-video negatives need two")
    model = model or ActPromptModel(config.encoder, config.temporal, config.prompt, config.seed)
    hash_before = model.backbone.hash()
    prepared = prepared or PreparedData(model, dataset, config)
    params = [p for _, p in model.trainable_named_parameters()]
    optimizer = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    history = []
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", encoding="utf-8")
    try:
        for epoch in range(config.epochs):
            indices = disjoint_epoch_sampler(len(dataset.records), config.data_ratio, epoch, config.seed)
            for step, batch in enumerate(make_batches(indices, config.batch_size)):
                rng = np.random.default_rng([config.seed, epoch, step])
                quads = prepared.quadruples(batch, rng, config)
                parts = batch_loss(model, quads, prepared.videos, prepared.queries, config.loss)
                if not torch.isfinite(parts.l_total):
                    raise NumericError(f"non-finite loss in batch epoch={epoch} step={step} "
                                       f"(qids {', '.join(q.qid for q in quads)})")
                optimizer.zero_grad()
                parts.l_total.backward()
                optimizer.step()
                entry = {"epoch": epoch, "step": step, **parts.as_floats()}
                history.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry) + "\n")
            log.info("epoch %d: mean l_total %.4f", epoch,
                     np.mean([h["l_total"] for h in history if h["epoch"] == epoch]))
    finally:
        if log_fh:
            log_fh.close()
    hash_after = model.backbone.hash()
    if hash_after != hash_before:
        raise ValidationError("backbone parameters changed during fine-tuning")
    ckpt = Checkpoint.from_model(model, config, config.epochs)
    return TrainResult(ckpt, history, model, hash_before, hash_after)


def triplet_accuracy(model: ActPromptModel, prepared: PreparedData, config: TrainConfig,
                     seed: int = 1234, batch_size: int = 8, stream: str = "vid") -> float:
    """Fraction of sampled quadruples whose positive outranks both negatives.

    Similarities use ``stream`` moment representations against ``t_q``.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(prepared.records))
    hits = total = 0
    with torch.no_grad():
        feats = dict(zip(prepared.videos, model.forward_videos(
            "vid", list(prepared.videos.values())))) if stream == "vid" else None
        for batch in make_batches([int(i) for i in order], batch_size):
            for q in prepared.quadruples(batch, rng, config):
                if q.intra_negative is None:
                    continue
                enc = prepared.queries[q.qid]
                if stream == "vid":
                    out = feats
                else:
                    own = sorted({m.video_id for m in q.moments})
                    out = dict(zip(own, model.forward_videos(
                        "veb", [prepared.videos[v] for v in own], enc.verb_embeddings)))
                sims = [float(cosine(moment_representation(
                    out[m.video_id].features[_moment_frames(m, prepared.videos[m.video_id])]), enc.t_q))
                    for m in q.moments]
                hits += sims[0] > max(sims[1:])
                total += 1
    return hits / total if total else float("nan")
