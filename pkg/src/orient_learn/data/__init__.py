"""Image I/O, keypoints, homographies, patches and training-pair synthesis."""

from .dataset import TrainingPair, load_dataset, save_dataset
from .detector import Keypoint, detect_keypoints, dominant_orientation, load_keypoints, save_keypoints
from .geometry import (CorrespondenceSet, Homography, build_correspondences, load_homography,
                       map_point, save_homography)
from .images import GrayImage, load_image, save_pgm
from .patches import PATCH_SIDE, RejectedKeypoint, extract_patch, patch_from_context
from .pyramid import Pyramid
from .synth import Perturbation, synth_pairs

__all__ = [
    "CorrespondenceSet", "GrayImage", "Homography", "Keypoint", "PATCH_SIDE", "Perturbation",
    "Pyramid", "RejectedKeypoint", "TrainingPair", "build_correspondences", "detect_keypoints",
    "dominant_orientation", "extract_patch", "load_dataset", "load_homography", "load_image",
    "load_keypoints", "map_point", "patch_from_context", "save_dataset", "save_homography",
    "save_keypoints", "save_pgm", "synth_pairs",
]
