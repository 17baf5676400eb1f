"""Controlled-attribute experimentation framework for speech enhancement.

Synthesizes training datasets that vary exactly one attribute at a time
(text, language, speaker, noise), trains discriminative and generative
enhancement models on them, and evaluates with objective metrics.
"""

SAMPLE_RATE = 16000

__version__ = "0.1.0"
