"""Class-conditional diffusion augmentation: generate, curate, mix, train, evaluate."""

from .dataset import (
    DEFAULT_TAXONOMY,
    ClassTaxonomy,
    ImageRecord,
    Manifest,
    class_counts,
    load_manifest,
    save_manifest,
    stratified_split,
)

__version__ = "0.1.0"
