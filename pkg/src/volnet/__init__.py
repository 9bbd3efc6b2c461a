"""volnet: a self-contained 3D Inception-based volumetric classifier.

Siamese per-ROI/per-modality pipelines with late fusion, trained with
class-balanced shift augmentation and RMSprop, evaluated with
confusion-matrix metrics and Wald confidence intervals. Everything runs
on numpy arrays; no deep-learning framework is involved.
"""

__version__ = "0.1.0"
