"""Action cue injection: video-/verb-guided prompts and attention consistency."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import torch
import torch.nn as nn

from .encoders import AttentionStack, trunc_normal_
from .exceptions import ConfigError, ValidationError

# Weight std is COUPLER_GAIN / sqrt(fan_in) so a unit-lr step stays small relative to the weights.
COUPLER_GAIN = 1.0


class VideoCoupler(nn.Module):
    """Linear map from a clip's video feature to a frame prompt."""

    def __init__(self, video_dim, embed_dim):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(embed_dim, video_dim))
        self.bias = nn.Parameter(torch.zeros(embed_dim))
        trunc_normal_(self.weight, COUPLER_GAIN * video_dim ** -0.5)

    def forward(self, video_features):
        if video_features.shape[-1] != self.weight.shape[1]:
            raise ConfigError(
                f"video feature dim {video_features.shape[-1]} != coupler input {self.weight.shape[1]}"
            )
        return video_features @ self.weight.T + self.bias


def video_guided_prompt(video_features, coupler: VideoCoupler):
    return coupler(video_features)


class VerbCouplerStack(nn.Module):
    """One linear verb-to-image coupler per encoder layer."""

    def __init__(self, num_layers, embed_dim):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_layers, embed_dim, embed_dim))
        self.bias = nn.Parameter(torch.zeros(num_layers, embed_dim))
        trunc_normal_(self.weight, COUPLER_GAIN * embed_dim ** -0.5)

    @property
    def num_layers(self):
        return self.weight.shape[0]

    def layer(self, verb_embedding, layer: int):
        """Prompt for 1-based ``layer`` from that layer's verb embedding."""
        if not 1 <= layer <= self.num_layers:
            raise ConfigError(f"layer {layer} outside 1..{self.num_layers}")
        return verb_embedding @ self.weight[layer - 1].T + self.bias[layer - 1]

    def forward(self, verb_embeddings):
        """``[..., N_L, D]`` per-layer verb embeddings -> ``[..., N_L, D]`` prompts."""
        if verb_embeddings.shape[-2] != self.num_layers:
            raise ConfigError("need one verb embedding per encoder layer")
        return torch.einsum("...ld,lkd->...lk", verb_embeddings, self.weight) + self.bias


def verb_guided_prompt(verb_embedding, layer: int, couplers: VerbCouplerStack):
    return couplers.layer(verb_embedding, layer)


@dataclass(frozen=True)
class VerbIndex:
    """Position of the verb in the token-id sequence (BOS occupies 0)."""

    index: int
    source: str  # "parsed" | "annotation" | "fallback"
    word: Optional[str] = None


class VerbExtractor(Protocol):
    def find(self, words: Sequence[str]) -> Optional[int]:
        """Index of the first verb in ``words``, or ``None``."""


_LEXICON = {
    "move", "jump", "slide", "run", "walk", "drink", "eat", "talk", "speak", "sit",
    "stand", "open", "close", "hold", "cut", "pour", "cook", "play", "dance", "swim",
    "drive", "ride", "throw", "catch", "kick", "push", "pull", "put", "take", "give",
    "look", "watch", "turn", "wash", "climb", "fall", "laugh", "smile", "sing", "write",
    "read", "carry", "lift", "drop", "enter", "leave", "show", "make", "fix", "clean",
    "wave", "hug", "shake", "point", "bounce", "roll", "spin", "fly", "swing", "grab",
}
_IRREGULAR = {
    "ran": "run", "sat": "sit", "stood": "stand", "ate": "eat", "drank": "drink",
    "drove": "drive", "rode": "ride", "threw": "throw", "caught": "catch", "took": "take",
    "gave": "give", "spoke": "speak", "wrote": "write", "fell": "fall", "made": "make",
    "swam": "swim", "sang": "sing", "held": "hold", "flew": "fly", "spun": "spin",
}
_STOPWORDS = {
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "does",
    "do", "did", "this", "that", "his", "her", "its", "their", "the", "a", "an", "as",
    "during", "something", "thing", "things", "morning", "evening", "nothing", "everything",
    "anything", "ceiling", "building", "king", "ring", "string", "wedding", "clothing",
    "red", "bed", "shed", "seed", "need", "speed", "hundred", "sacred", "bus", "glass",
    "dress", "news", "always", "perhaps", "across", "towards", "whereas",
}


def _lemma_candidates(word):
    yield word
    if word in _IRREGULAR:
        yield _IRREGULAR[word]
    for suffix in ("ing", "ed", "es", "s"):
        if word.endswith(suffix) and len(word) > len(suffix) + 1:
            stem = word[: -len(suffix)]
            yield stem
            yield stem + "e"
            if len(stem) > 2 and stem[-1] == stem[-2]:
                yield stem[:-1]
            if suffix in ("es", "ed") and stem.endswith("i"):
                yield stem[:-1] + "y"


class HeuristicVerbExtractor:
    """Lexicon lookup with light morphology.

    A word is a verb if one of its lemma candidates is in the lexicon, or if it
    is an unknown ``-ing``/``-ed`` form of at least five letters that is not a
    stopword.  Bare ``-s`` forms only count via the lexicon, so plural nouns
    are not mistaken for verbs.
    """

    def __init__(self, lexicon=None, stopwords=None):
        self.lexicon = set(_LEXICON if lexicon is None else lexicon)
        self.stopwords = set(_STOPWORDS if stopwords is None else stopwords)

    def is_verb(self, word: str) -> bool:
        if word in self.stopwords:
            return False
        if any(c in self.lexicon for c in _lemma_candidates(word)):
            return True
        return len(word) >= 5 and word.endswith(("ing", "ed"))

    def find(self, words):
        for i, w in enumerate(words):
            if self.is_verb(w.lower()):
                return i
        return None


class AnnotationVerbExtractor:
    """Uses a word index supplied by the dataset (``verb_index`` key)."""

    def __init__(self, verb_index: Optional[int]):
        self.verb_index = verb_index

    def find(self, words):
        if self.verb_index is None or not 0 <= self.verb_index < len(words):
            return None
        return self.verb_index


def extract_verb(words: Sequence[str], extractor: VerbExtractor) -> VerbIndex:
    """Locate the verb; falls back to the EOS position when none is found."""
    if not words:
        raise ValidationError("cannot extract a verb from an empty query")
    found = extractor.find(list(words))
    if found is None:
        return VerbIndex(len(words) + 1, "fallback")
    source = "annotation" if isinstance(extractor, AnnotationVerbExtractor) else "parsed"
    return VerbIndex(found + 1, source, words[found])


def make_extractor(name: str, verb_index: Optional[int] = None) -> VerbExtractor:
    if name == "heuristic":
        return HeuristicVerbExtractor()
    if name == "annotation":
        return AnnotationVerbExtractor(verb_index)
    raise ConfigError(f"unknown verb extractor {name!r}")


def consistency_loss(attn_vid, attn_veb):
    """Mean over frames of the per-layer-summed patchwise MSE of two stacks.

    Accepts :class:`AttentionStack` or raw ``[..., L, N_L, N_p]`` tensors; any
    leading dims are averaged like frames.
    """
    a = attn_vid.maps if isinstance(attn_vid, AttentionStack) else attn_vid
    b = attn_veb.maps if isinstance(attn_veb, AttentionStack) else attn_veb
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValidationError(f"attention stacks differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() < 3:
        raise ValidationError("attention stacks need [frames, layers, patches] dims")
    per_frame = ((a - b) ** 2).mean(dim=-1).sum(dim=-1)
    return per_frame.reshape(-1).mean()


def prompt_attention_map(stack, frame: int, grid_size: Optional[int] = None):
    """One frame's per-layer prompt attention, ``[N_L, N_p]`` or ``[N_L, g, g]``."""
    maps = stack.maps if isinstance(stack, AttentionStack) else torch.as_tensor(stack)
    if not 0 <= frame < maps.shape[-3]:
        raise ValidationError(f"frame {frame} outside 0..{maps.shape[-3] - 1}")
    out = maps[..., frame, :, :]
    return out if grid_size is None else out.reshape(*out.shape[:-1], grid_size, grid_size)
