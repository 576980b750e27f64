"""Moment retrieval and highlight detection metrics (percentages)."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import ValidationError
from .pretext import MomentSpan

log = logging.getLogger(__name__)

AVG_MAP_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_THRESHOLDS = (0.3, 0.5, 0.7)


def iou(a: MomentSpan, b: MomentSpan) -> float:
    inter = a.overlap(b)
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class GroundingPrediction:
    """Ranked windows ``(span, confidence)`` and optional per-clip saliency."""

    qid: str
    windows: list[tuple[MomentSpan, float]] = field(default_factory=list)
    saliency: Optional[list[float]] = None

    def __post_init__(self):
        # stable sort keeps file order among equal confidences
        self.windows = sorted(self.windows, key=lambda w: -w[1])

    @classmethod
    def from_json(cls, obj) -> "GroundingPrediction":
        if not isinstance(obj, dict) or "qid" not in obj:
            raise ValidationError("prediction needs a qid")
        windows = []
        for w in obj.get("pred_relevant_windows", []):
            if len(w) not in (2, 3):
                raise ValidationError(f"{obj['qid']}: window {w!r} is not [start, end(, score)]")
            windows.append((MomentSpan(float(w[0]), float(w[1])), float(w[2]) if len(w) == 3 else 1.0))
        sal = obj.get("pred_saliency_scores")
        return cls(str(obj["qid"]), windows, None if sal is None else [float(s) for s in sal])

    def to_json(self) -> dict:
        out = {"qid": self.qid, "pred_relevant_windows": [[s.start, s.end, c] for s, c in self.windows]}
        if self.saliency is not None:
            out["pred_saliency_scores"] = list(self.saliency)
        return out


def load_predictions(path) -> list[GroundingPrediction]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"prediction file not found: {path}")
    preds = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            preds.append(GroundingPrediction.from_json(json.loads(line)))
        except (json.JSONDecodeError, ValidationError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path} line {lineno}: {exc}") from None
    return preds


def _match(preds, gts, require_all):
    by_qid = {r.qid: r for r in gts}
    out = {}
    for p in preds:
        if p.qid not in by_qid:
            raise ValidationError(f"prediction for unknown qid {p.qid!r}")
        if p.qid in out:
            raise ValidationError(f"duplicate prediction for qid {p.qid!r}")
        out[p.qid] = p
    if require_all:
        missing = [r.qid for r in gts if r.qid not in out]
        if missing:
            raise ValidationError(f"no prediction for {len(missing)} queries, e.g. {missing[0]!r}")
    return out, by_qid


def _check_spans(pred: GroundingPrediction, duration: float):
    for span, conf in pred.windows:
        if span.end > duration + 1e-6:
            raise ValidationError(f"{pred.qid}: predicted span [{span.start}, {span.end}] past duration {duration}")
        if not np.isfinite(conf):
            raise ValidationError(f"{pred.qid}: non-finite confidence")


def interpolated_ap(tp: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated AP from a ranked TP/FP sequence."""
    if num_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=float)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    rec = ctp / num_gt
    prec = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mprec = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def detection_tp(ranked: Sequence[MomentSpan], gts: Sequence[MomentSpan], threshold: float) -> list[bool]:
    """Greedy matching in rank order: each prediction takes the best unmatched GT with IoU >= threshold."""
    used = [False] * len(gts)
    tp = []
    for span in ranked:
        ious = [iou(span, g) for g in gts]
        hit = False
        for j in sorted(range(len(gts)), key=lambda j: -ious[j]):
            if ious[j] < threshold:
                break
            if not used[j]:
                used[j] = hit = True
                break
        tp.append(hit)
    return tp


def query_ap(pred: GroundingPrediction, gts: Sequence[MomentSpan], threshold: float) -> float:
    return interpolated_ap(detection_tp([s for s, _ in pred.windows], gts, threshold), len(gts))


def evaluate_retrieval(preds, gts, thresholds=AVG_MAP_THRESHOLDS, require_all=True) -> dict[str, float]:
    """R1@{0.3,0.5,0.7}, mIoU, mAP@{0.5,0.75} and mAP averaged over ``thresholds``.

    ``gts`` are annotation records; every prediction must name a known qid.
    """
    by_pred, by_qid = _match(preds, gts, require_all)
    if not by_pred:
        raise ValidationError("no predictions to evaluate")
    top_iou, aps = [], {t: [] for t in sorted(set(thresholds) | {0.5, 0.75})}
    for qid, pred in by_pred.items():
        rec = by_qid[qid]
        _check_spans(pred, rec.duration)
        windows = rec.relevant_windows
        top_iou.append(max(iou(pred.windows[0][0], g) for g in windows) if pred.windows else 0.0)
        for t in aps:
            aps[t].append(query_ap(pred, windows, t))
    top_iou = np.asarray(top_iou)
    out = {f"R1@{t}": 100.0 * float(np.mean(top_iou >= t - 1e-12)) for t in RECALL_THRESHOLDS}
    out["mIoU"] = 100.0 * float(top_iou.mean())
    out["mAP@0.5"] = 100.0 * float(np.mean(aps[0.5]))
    out["mAP@0.75"] = 100.0 * float(np.mean(aps[0.75]))
    out["mAP"] = 100.0 * float(np.mean([np.mean(aps[t]) for t in thresholds]))
    return out


def ranked_ap(scores: Sequence[float], relevant: Sequence[bool]) -> float:
    """Non-interpolated AP of items ranked by descending score (ties: lower index first)."""
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    rel = np.asarray(relevant, dtype=bool)[order]
    if not rel.any():
        return 0.0
    hits = np.cumsum(rel)
    return float(np.mean(hits[rel] / (np.nonzero(rel)[0] + 1)))


def evaluate_highlight(preds, gts, require_all=True) -> dict[str, float]:
    """HIT@1 and mAP with "Very Good" clips (top of the rating scale) as positives.

    Queries without any Very-Good clip are excluded from both denominators.
    """
    by_pred, by_qid = _match(preds, gts, require_all)
    hits, aps, skipped = [], [], []
    for qid, pred in by_pred.items():
        rec = by_qid[qid]
        if rec.saliency_scores is None:
            raise ValidationError(f"{qid}: ground truth has no saliency ratings")
        lo, hi = rec.saliency_scale
        bad = [s for s in rec.saliency_scores if not lo <= s <= hi]
        if bad:
            raise ValidationError(f"{qid}: rating {bad[0]} outside scale [{lo}, {hi}]")
        if pred.saliency is None or len(pred.saliency) != len(rec.saliency_scores):
            raise ValidationError(f"{qid}: need one predicted saliency per rated clip "
                                  f"({len(rec.saliency_scores)})")
        relevant = [s == rec.very_good for s in rec.saliency_scores]
        if not any(relevant):
            skipped.append(qid)
            continue
        top = int(np.argmax(pred.saliency))
        hits.append(float(relevant[top]))
        aps.append(ranked_ap(pred.saliency, relevant))
    if skipped:
        log.info("excluded %d queries without Very-Good clips: %s", len(skipped), ", ".join(skipped))
    if not hits:
        raise ValidationError("no query has a Very-Good clip; highlight metrics undefined")
    return {"HIT@1": 100.0 * float(np.mean(hits)), "mAP": 100.0 * float(np.mean(aps)),
            "excluded": float(len(skipped))}
