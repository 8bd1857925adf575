"""Desk-scale masked-LM re-pretraining with back-translation augmentation.

Everything runs on CPU from a from-scratch numpy autodiff core: corpus
handling, a small transformer encoder, MLM re-pretraining, a trainable toy
translator for round-trip paraphrasing, benchmark augmenters, test-time noise
generators, and an experiment harness with CSV/SVG reporting.
"""

__version__ = "0.1.0"
