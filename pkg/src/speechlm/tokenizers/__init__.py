"""Offline unit tokenizers: k-means for speech, upsampling and text-to-unit for text."""

from .kmeans import KMeansModel, kmeans_assign, kmeans_fit, load_kmeans, save_kmeans
from .t2u import T2UConfig, T2UPair, TextToUnitModel, t2u_infer, t2u_train
from .upsample import UpsamplerConfig, phoneme_upsample

__all__ = [
    "KMeansModel",
    "T2UConfig",
    "T2UPair",
    "TextToUnitModel",
    "UpsamplerConfig",
    "kmeans_assign",
    "kmeans_fit",
    "load_kmeans",
    "phoneme_upsample",
    "save_kmeans",
    "t2u_infer",
    "t2u_train",
]
