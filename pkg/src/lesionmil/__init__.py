"""Weakly supervised lesion detection in 3D volumes.

Texture descriptors over sampled patches feed quantile-relaxed
multiple-instance classifiers; the evaluation protocol (stratified nested
cross-validation, bag AUC, Separability, dense slice maps, density
baseline and agreement statistics) runs end to end on synthetic phantoms
with known lesion ground truth.
"""

__version__ = "0.1.0"
