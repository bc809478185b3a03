"""tumorforge: controllable synthesis of multi-contrast brain-tumor MR
slices for segmentation data augmentation.

Pipeline: simplify grade tumor masks to concentric circles, learn the
inverse map with two mask generators, inpaint tumors into normal brain
slices with an adversarially trained generator, and evaluate the
synthesized data via FID and a segmentation augmentation A/B experiment.
"""

__version__ = "0.1.0"

from .core_data import (  # noqa: F401
    BinaryMask,
    DatasetManifest,
    GradeMask,
    MCSlice,
    SliceRecord,
    gaussian_normalize,
    load_manifest,
    load_slice,
    save_slice,
)
from .geometry import (  # noqa: F401
    ConcentricCircles,
    apply_mask,
    binarize,
    brain_support,
    centroid,
    quantize_grades,
    render_circles,
    render_disk,
    simplify_to_circles,
)
