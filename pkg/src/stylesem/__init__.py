"""Style/semantics disentanglement and personalized generation on a synthetic factor world."""

__version__ = "0.1.0"

from . import evalkit, fusion, generator, masks, pipeline, tokenizer, towers, training, world  # noqa: F401
