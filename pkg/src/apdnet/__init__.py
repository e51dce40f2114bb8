"""Semi-supervised pathology segmentation with disentangled anatomy, modality, and pathology factors."""

__version__ = "0.1.0"
