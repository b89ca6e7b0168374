"""Multimodal self-supervised pretraining for ICU stays: a bidirectional
contrastive objective aligning measurement windows with clinical notes,
masked reconstruction in both modalities, and the downstream evaluation
suite (retrieval, zero-shot mortality, linear probing, semi-supervised
fine-tuning)."""

__version__ = "0.1.0"
