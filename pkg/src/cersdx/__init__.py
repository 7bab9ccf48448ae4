"""Downstream diagnostic machinery for histopathology embeddings: slide
tiling, gated-attention MIL, reciprocal-point open-set detection, LoRA and
linear probes, zero-shot prompts and evaluation statistics."""

__version__ = "0.1.0"
