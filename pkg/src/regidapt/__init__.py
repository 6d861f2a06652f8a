"""Toolkit for detecting cognitive distortions across languages and registers.

Subpackages cover the full experiment pipeline: corpus handling and
pseudonymization, lexicon feature extraction, encoder training (full
fine-tuning, adapters, feature augmentation), domain-confused contrastive
learning, prompt-based classification, and statistical evaluation.
"""

__version__ = "0.1.0"

CHECKPOINT_FORMAT = "regidapt-ckpt-v1"
