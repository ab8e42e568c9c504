from .folds import FoldAssignment, assign_folds, kfold_splits
from .phantom import PhantomParams, VolumeSample, generate_dataset, generate_phantom
from .preprocess import lung_mask_threshold, resample
from .volume_io import Volume, list_cases, read_case, read_dataset, read_volume, write_case, write_volume

__all__ = [
    "FoldAssignment",
    "PhantomParams",
    "Volume",
    "VolumeSample",
    "assign_folds",
    "generate_dataset",
    "generate_phantom",
    "kfold_splits",
    "list_cases",
    "lung_mask_threshold",
    "read_case",
    "read_dataset",
    "read_volume",
    "resample",
    "write_case",
    "write_volume",
]
