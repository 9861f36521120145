"""Full-field optical deformation measurement toolkit.

Subset-based image correlation (2D and stereo), strain post-processing,
point-cloud deviation analysis, and a synthetic-experiment harness that
generates ground-truth sequences for verification.
"""

__version__ = "0.1.0"
