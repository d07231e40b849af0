"""Assembly of training corpora from generated poses or written datasets."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .cameras import Rig, project
from .dataio import read_dataset
from .refinement import RefinementCrop, fit_source_frame, random_crop
from .skeleton import KeypointLayout, Pose3D, center_on
from .synthetic import SyntheticPoseGenerator

PART_CHOICES = {"face": ("face",), "hand": ("left_hand", "right_hand")}


def crop_from_part_points(part_img: np.ndarray, rng: np.random.Generator,
                          sigma_px: float = 3.0) -> RefinementCrop:
    """Place one part's image-frame keypoints into a random 224 crop."""
    frame = fit_source_frame(part_img)
    src = frame.to_source(part_img)
    crop = random_crop(src, rng)
    return RefinementCrop(crop.to_crop(src), sigma_px)


def synthetic_refinement_crops(generator: SyntheticPoseGenerator, rig: Rig,
                               layout: KeypointLayout, part: str, n: int,
                               seed: int, sigma_px: float = 3.0
                               ) -> list[RefinementCrop]:
    """Non-occluded part crops from generated poses, one random view each."""
    rng = np.random.default_rng(seed)
    cams = list(rig.cameras)
    crops = []
    i = 0
    while len(crops) < n:
        pose = generator.generate(seed * 1_000_003 + i)
        i += 1
        cam = cams[rng.integers(len(cams))]
        sub_part = PART_CHOICES[part][rng.integers(len(PART_CHOICES[part]))]
        pts = project(pose.coords, cam)[layout.part_indices(sub_part)]
        crops.append(crop_from_part_points(pts, rng, sigma_px))
    return crops


def refinement_crops_from_dataset(data_dir: str | Path, rig: Rig,
                                  layout: KeypointLayout, part: str,
                                  max_crops: int, seed: int,
                                  sigma_px: float = 3.0) -> list[RefinementCrop]:
    """Crops from stored samples whose part is fully detected (non-occluded)."""
    rng = np.random.default_rng(seed)
    samples = read_dataset(data_dir, "train")["train"]
    crops = []
    for s in samples:
        if len(crops) >= max_crops:
            break
        sub_part = PART_CHOICES[part][rng.integers(len(PART_CHOICES[part]))]
        idx = layout.part_indices(sub_part)
        if not s.pose2d.visibility[idx].all():
            continue
        crops.append(crop_from_part_points(s.pose2d.coords[idx], rng, sigma_px))
    if not crops:
        raise ValueError(f"no non-occluded {part} instances in {data_dir}")
    return crops


def pelvis_centered_corpus(generator: SyntheticPoseGenerator,
                           layout: KeypointLayout, n: int,
                           seed_base: int = 0) -> np.ndarray:
    """Stacked pelvis-centered poses (n, 133, 3) for completion training."""
    return np.stack([
        center_on(generator.generate(seed_base + s), "pelvis", layout).coords
        for s in range(n)])
