"""Two-stage volumetric lesion detection at desk scale.

Stage I trains a slab-level residual encoder whose gradient-based attention
maps are supervised against sparse lesion masks. Stage II freezes that
encoder and trains a bidirectional convolutional-recurrent aggregator over
the per-slab features to produce one study-level probability. A synthetic
corpus generator with a configurable lesion-correlated confounder stands in
for clinical data, and the metrics module provides ROC/AUC, DeLong
confidence intervals, and attention-localization scores.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, TrainingDivergenceError

__all__ = ["ConfigError", "DataError", "TrainingDivergenceError", "__version__"]
