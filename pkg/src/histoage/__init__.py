"""histoage: biological age from skin-biopsy images.

Pipeline: tile slides -> contrastive pretraining -> per-slide cluster features
-> bootstrap boosted-tree age regression -> prevalent disease and survival models.
"""

__version__ = "0.3.0"
