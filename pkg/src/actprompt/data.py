"""Annotations, clips, feature bundles and the synthetic motion dataset.

Dataset directory layout::

    <dir>/annotations.jsonl      one JSON record per line (optional header line)
    <dir>/videos/<vid>.npy       float32 frames [F, C, H, W] in [0, 1]

The frame rate of a video is ``F / duration``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import FormatError, ValidationError
from .pretext import MomentSpan, num_clips

DEFAULT_SALIENCY_SCALE = (0, 4)


@dataclass
class AnnotationRecord:
    qid: str
    video_id: str
    duration: float
    query: str
    relevant_windows: list[MomentSpan]
    saliency_scores: Optional[list[int]] = None
    verb_index: Optional[int] = None
    saliency_scale: tuple[int, int] = DEFAULT_SALIENCY_SCALE

    @property
    def very_good(self) -> int:
        return self.saliency_scale[1]

    def to_json(self) -> dict:
        out = {
            "qid": self.qid,
            "vid": self.video_id,
            "duration": self.duration,
            "query": self.query,
            "relevant_windows": [[w.start, w.end] for w in self.relevant_windows],
        }
        if self.saliency_scores is not None:
            out["saliency_scores"] = list(self.saliency_scores)
        if self.verb_index is not None:
            out["verb_index"] = self.verb_index
        return out


_REQUIRED = ("qid", "vid", "duration", "query", "relevant_windows")


def parse_record(obj, scale=DEFAULT_SALIENCY_SCALE) -> AnnotationRecord:
    """Validate one decoded JSON object; raises ValidationError with the reason."""
    if not isinstance(obj, dict):
        raise ValidationError("record is not a JSON object")
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise ValidationError(f"missing required key(s): {', '.join(missing)}")
    try:
        duration = float(obj["duration"])
    except (TypeError, ValueError):
        raise ValidationError("duration is not a number") from None
    if not (duration > 0 and math.isfinite(duration)):
        raise ValidationError(f"duration must be positive, got {obj['duration']!r}")
    query = obj["query"]
    if not isinstance(query, str) or not query.strip():
        raise ValidationError("query must be a non-empty string")
    windows = []
    raw_windows = obj["relevant_windows"]
    if not isinstance(raw_windows, list) or not raw_windows:
        raise ValidationError("relevant_windows must be a non-empty list")
    for w in raw_windows:
        if not (isinstance(w, (list, tuple)) and len(w) == 2):
            raise ValidationError(f"window {w!r} is not a [start, end] pair")
        start, end = float(w[0]), float(w[1])
        if not (0 <= start < end <= duration):
            raise ValidationError(f"window [{start}, {end}] outside [0, {duration}]")
        windows.append(MomentSpan(start, end, str(obj["vid"])))
    scores = obj.get("saliency_scores")
    if scores is not None:
        if not isinstance(scores, list):
            raise ValidationError("saliency_scores must be a list")
        lo, hi = scale
        for s in scores:
            if isinstance(s, bool) or not isinstance(s, int) or not lo <= s <= hi:
                raise ValidationError(f"saliency rating {s!r} outside scale [{lo}, {hi}]")
    verb_index = obj.get("verb_index")
    if verb_index is not None and (isinstance(verb_index, bool) or not isinstance(verb_index, int)
                                   or verb_index < 0):
        raise ValidationError(f"verb_index must be a nonnegative integer, got {verb_index!r}")
    return AnnotationRecord(str(obj["qid"]), str(obj["vid"]), duration, query, windows,
                            scores, verb_index, tuple(scale))


def load_annotations(path) -> list[AnnotationRecord]:
    """Read a JSON-lines annotation file.

    An optional first line ``{"_header": {"saliency_scale": [lo, hi]}}``
    declares the rating scale (default 0-4, top rating = "Very Good").  All
    malformed lines are reported together with their line numbers.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"annotation file not found: {path}")
    scale = DEFAULT_SALIENCY_SCALE
    records, errors = [], []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(f"line {lineno}: invalid JSON ({exc.msg})")
                continue
            if isinstance(obj, dict) and "_header" in obj:
                if records or lineno != 1:
                    errors.append(f"line {lineno}: header must be the first line")
                    continue
                lo, hi = obj["_header"].get("saliency_scale", scale)
                scale = (int(lo), int(hi))
                continue
            try:
                records.append(parse_record(obj, scale))
            except ValidationError as exc:
                errors.append(f"line {lineno}: {exc}")
    if errors:
        raise ValidationError(f"{path}: " + "; ".join(errors))
    return records


def save_annotations(records, path, scale=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        if scale is not None:
            fh.write(json.dumps({"_header": {"saliency_scale": list(scale)}}) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


@dataclass
class Clip:
    index: int
    start: float
    end: float
    frames: np.ndarray

    @property
    def center_frame(self) -> np.ndarray:
        return self.frames[(len(self.frames) - 1) // 2]


def clipize(frames, fps: float, clip_length: float = 2.0) -> list[Clip]:
    """Split ``[F, C, H, W]`` frames into uniform clips of ``clip_length`` seconds.

    A trailing partial clip is kept only if it spans at least half a clip.
    """
    frames = np.asarray(frames)
    if clip_length <= 0:
        raise ValidationError("clip_length must be positive")
    if frames.ndim != 4 or len(frames) == 0:
        raise ValidationError("empty video")
    duration = len(frames) / fps
    L = num_clips(duration, clip_length)
    if L == 0:
        raise ValidationError(f"video of {duration:g}s is shorter than half a clip")
    times = np.arange(len(frames)) / fps
    clips = []
    for t in range(L):
        start = t * clip_length
        end = min((t + 1) * clip_length, duration)
        last = t == L - 1
        mask = (times >= start - 1e-9) & ((times < end - 1e-9) | (last & (times < duration)))
        idx = np.nonzero(mask)[0]
        if len(idx) == 0:
            raise ValidationError(f"clip {t} holds no frames at {fps:g} fps")
        clips.append(Clip(t, start, end, frames[idx]))
    return clips


# --- feature bundles -----------------------------------------------------

MAGIC = b"ACTP"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIIH")


@dataclass
class FeatureBundle:
    video_id: str
    image_features: np.ndarray  # V^I_vid, [L, D]
    video_features: np.ndarray  # v^V, [L, D_V]
    verb_features: Optional[np.ndarray] = None  # V^I_veb, [L, D]
    query_feature: Optional[np.ndarray] = None  # t^q, [D]

    def __post_init__(self):
        self.image_features = np.asarray(self.image_features, dtype=np.float32)
        self.video_features = np.asarray(self.video_features, dtype=np.float32)
        L, D = self.image_features.shape
        if self.video_features.ndim != 2 or self.video_features.shape[0] != L:
            raise ValidationError("video features must have one row per clip")
        if self.verb_features is not None:
            self.verb_features = np.asarray(self.verb_features, dtype=np.float32)
            if self.verb_features.shape != (L, D):
                raise ValidationError("verb features must match image features in shape")
        if self.query_feature is not None:
            self.query_feature = np.asarray(self.query_feature, dtype=np.float32)
            if self.query_feature.shape != (D,):
                raise ValidationError("query feature must be a D-vector")


def _le_bytes(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def feature_bytes(bundle: FeatureBundle) -> bytes:
    vid = bundle.video_id.encode("utf-8")
    L, D = bundle.image_features.shape
    head = _HEADER.pack(MAGIC, VERSION, bundle.verb_features is not None,
                        bundle.query_feature is not None, L, D,
                        bundle.video_features.shape[1], len(vid))
    parts = [head, vid, _le_bytes(bundle.image_features), _le_bytes(bundle.video_features)]
    if bundle.verb_features is not None:
        parts.append(_le_bytes(bundle.verb_features))
    if bundle.query_feature is not None:
        parts.append(_le_bytes(bundle.query_feature))
    return b"".join(parts)


def save_features(bundle: FeatureBundle, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(feature_bytes(bundle))
    return path


def parse_features(blob: bytes) -> FeatureBundle:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated feature bundle header")
    magic, version, has_veb, has_tq, L, D, DV, n = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported feature bundle version {version}")
    if has_veb > 1 or has_tq > 1:
        raise FormatError("presence flags must be 0 or 1")
    pos = _HEADER.size + n
    expected = pos + 4 * (L * D + L * DV + has_veb * L * D + has_tq * D)
    if len(blob) != expected:
        raise FormatError(f"payload is {len(blob)} bytes, header implies {expected}")
    vid = blob[_HEADER.size:pos].decode("utf-8")

    def take(count, shape):
        nonlocal pos
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        return arr.astype(np.float32)

    image = take(L * D, (L, D))
    video = take(L * DV, (L, DV))
    verb = take(L * D, (L, D)) if has_veb else None
    query = take(D, (D,)) if has_tq else None
    return FeatureBundle(vid, image, video, verb, query)


def load_features(path) -> FeatureBundle:
    return parse_features(Path(path).read_bytes())


# --- synthetic motion dataset --------------------------------------------

COLOURS = {
    "red": (0.95, 0.1, 0.1), "green": (0.1, 0.9, 0.1), "blue": (0.15, 0.2, 0.95),
    "yellow": (0.95, 0.9, 0.1), "cyan": (0.1, 0.9, 0.9), "magenta": (0.9, 0.1, 0.9),
    "white": (0.95, 0.95, 0.95), "orange": (0.95, 0.55, 0.05),
}
# verb -> unit displacement for (first, second) direction word
MOTIONS = {
    "slides": {"left": (0, -1), "right": (0, 1)},
    "jumps": {"up": (-1, 0), "down": (1, 0)},
    "moves": {"left": (1, -1), "right": (1, 1)},
}


@dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int = 50
    clips_per_video: int = 6
    image_size: int = 32
    channels: int = 3
    clip_length: float = 2.0
    fps: float = 2.0
    square_size: int = 8
    min_window_clips: int = 1
    max_window_clips: int = 2
    noise: float = 0.03
    prefix: str = "syn"

    def __post_init__(self):
        if self.channels != 3:
            raise ValidationError("the synthetic generator draws RGB frames")
        if not 1 <= self.min_window_clips <= self.max_window_clips < self.clips_per_video:
            raise ValidationError("window clips must satisfy 1 <= min <= max < clips_per_video")
        if self.square_size >= self.image_size:
            raise ValidationError("square must be smaller than the frame")
        if (self.fps * self.clip_length) % 1 or self.fps * self.clip_length < 2:
            raise ValidationError("each clip needs a whole number (>= 2) of frames")


def random_background(rng, channels, size, noise=0.03):
    base = rng.uniform(0.1, 0.35) + noise * rng.standard_normal((channels, size, size))
    return np.clip(base, 0.0, 1.0)


def render_frame(background, colour, y, x, size):
    frame = background.copy()
    frame[:, y:y + size, x:x + size] = np.asarray(COLOURS[colour])[:, None, None]
    return frame


def _trajectory(displacement, span, rng):
    """Start/end top-left corners for a square crossing the frame."""
    dy, dx = displacement
    lane = int(rng.integers(0, span + 1))

    def ends(d):
        return (0, span) if d > 0 else (span, 0) if d < 0 else (lane, lane)

    (y0, y1), (x0, x1) = ends(dy), ends(dx)
    return np.array([y0, x0], float), np.array([y1, x1], float)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0):
    """Generate ``(videos, records)``; ``videos`` maps video id to frames.

    Each video shows a coloured square resting on a static noisy background,
    translating across the frame only during its annotated window.  The query
    names colour, verb (motion axis) and direction.
    """
    rng = np.random.default_rng(seed)
    S, C, sq = spec.image_size, spec.channels, spec.square_size
    fpc = int(round(spec.fps * spec.clip_length))
    n_frames = spec.clips_per_video * fpc
    duration = spec.clips_per_video * spec.clip_length
    videos, records = {}, []
    colour_names = sorted(COLOURS)
    for i in range(spec.num_videos):
        colour = colour_names[int(rng.integers(len(colour_names)))]
        verb = sorted(MOTIONS)[int(rng.integers(len(MOTIONS)))]
        direction = sorted(MOTIONS[verb])[int(rng.integers(2))]
        n = int(rng.integers(spec.min_window_clips, spec.max_window_clips + 1))
        a = int(rng.integers(0, spec.clips_per_video - n + 1))
        p0, p1 = _trajectory(MOTIONS[verb][direction], S - sq, rng)

        background = random_background(rng, C, S, spec.noise)
        first, last = a * fpc, (a + n) * fpc
        frames = np.empty((n_frames, C, S, S), dtype=np.float32)
        for f in range(n_frames):
            k = min(max((f - first + 1) / (last - first), 0.0), 1.0)
            y, x = np.rint(p0 + k * (p1 - p0)).astype(int)
            frames[f] = render_frame(background, colour, y, x, sq)
        vid = f"{spec.prefix}{seed}_v{i:04d}"
        videos[vid] = frames
        saliency = [4 if a <= t < a + n else int(rng.integers(0, 2))
                    for t in range(spec.clips_per_video)]
        window = MomentSpan(a * spec.clip_length, (a + n) * spec.clip_length, vid)
        records.append(AnnotationRecord(
            f"{spec.prefix}{seed}_q{i:04d}", vid, duration, f"{colour} square {verb} {direction}",
            [window], saliency, verb_index=2,
        ))
    return videos, records


def write_dataset(directory, videos, records, scale=None):
    directory = Path(directory)
    (directory / "videos").mkdir(parents=True, exist_ok=True)
    for vid, frames in videos.items():
        np.save(directory / "videos" / f"{vid}.npy", np.asarray(frames, dtype=np.float32))
    save_annotations(records, directory / "annotations.jsonl", scale)
    return directory


@dataclass
class Dataset:
    """Annotations plus lazily loaded frame arrays."""

    records: list[AnnotationRecord]
    videos: dict[str, np.ndarray] = field(default_factory=dict)
    directory: Optional[Path] = None

    def frames(self, video_id: str) -> np.ndarray:
        if video_id not in self.videos:
            if self.directory is None:
                raise FileNotFoundError(f"no frames for video {video_id!r}")
            path = self.directory / "videos" / f"{video_id}.npy"
            if not path.exists():
                raise FileNotFoundError(f"no frames for video {video_id!r} ({path})")
            self.videos[video_id] = np.load(path)
        return self.videos[video_id]

    def fps(self, video_id: str) -> float:
        return len(self.frames(video_id)) / self.duration(video_id)

    def duration(self, video_id: str) -> float:
        for r in self.records:
            if r.video_id == video_id:
                return r.duration
        raise ValidationError(f"no annotation mentions video {video_id!r}")

    @property
    def video_ids(self) -> list[str]:
        return sorted({r.video_id for r in self.records})


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    records = load_annotations(directory / "annotations.jsonl")
    return Dataset(records, {}, directory)


def parse_synthetic_spec(path) -> SyntheticSpec:
    from .config import load_config

    return load_config(path, SyntheticSpec(), SyntheticSpec)
