"""Adversarial training with complementary labels.

Subpackages build on a small numpy reverse-mode engine (``atcl.tensor``):
losses, PGD, warm-up and pseudo-label schedules, training drivers and
gradient diagnostics.
"""

__version__ = "0.1.0"
