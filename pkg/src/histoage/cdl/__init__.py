"""Contrastive (stop-gradient siamese) pretraining of the patch encoder."""
from histoage.cdl.networks import CDLModel, Encoder, EncoderConfig, Predictor, PredictorConfig
from histoage.cdl.training import cdl_step, cosine_loss, extract_features, train_cdl

__all__ = [
    "CDLModel", "Encoder", "EncoderConfig", "Predictor", "PredictorConfig",
    "cdl_step", "cosine_loss", "extract_features", "train_cdl",
]
