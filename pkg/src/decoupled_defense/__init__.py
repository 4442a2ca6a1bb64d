"""Backdoor defense by decoupled training: supervised learning, entropy filtering,
unlearning on the filtered poisoned subset, then semi-supervised fine-tuning."""

__version__ = "0.1.0"
