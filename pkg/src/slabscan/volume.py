"""Volumetric study data: a 3-D HU grid with per-axis spacing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container

HU_MIN = -1024.0
HU_MAX = 3071.0


@dataclass
class Volume:
    """3-D scalar grid in Hounsfield units, axes (z, y, x), spacing in mm."""

    values: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError("volume must be 3-D (slices, height, width)")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def n_slices(self) -> int:
        return self.values.shape[0]

    @property
    def slice_thickness_mm(self) -> float:
        return self.spacing[0]


def save_volume(path: str | Path, volume: Volume) -> None:
    container.write_tensor(path, container.MAGIC_VOLUME, volume.values,
                           spacing=volume.spacing)


def load_volume(path: str | Path) -> Volume:
    values, spacing = container.read_tensor(path, container.MAGIC_VOLUME)
    return Volume(values=values, spacing=spacing)
