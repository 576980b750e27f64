"""Action-cue-injected temporal prompt learning for video temporal grounding."""

__version__ = "0.1.0"
