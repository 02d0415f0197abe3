"""Language-guided multi-dataset segmentation.

One segmentation model is trained jointly on datasets whose label sets conflict.
Classes are represented by text embeddings, so each dataset is queried with its
own taxonomy at train and test time.
"""
from .taxonomy import DatasetTaxonomy, TaxonomyRegistry
from .model import ModelConfig, SegmentationModel
from .config import ExperimentConfig, load_config

__version__ = "0.1.0"

__all__ = ["DatasetTaxonomy", "TaxonomyRegistry", "ModelConfig", "SegmentationModel",
           "ExperimentConfig", "load_config", "__version__"]
