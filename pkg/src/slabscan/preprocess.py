"""Preprocessing chain: thickness resampling, HU windowing, center crop,
band selection, slab sequence construction, and mask downsampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .volume import Volume

WINDOW_LO_HU = -1024.0
WINDOW_HI_HU = 500.0
_WINDOW_SPAN = WINDOW_HI_HU - WINDOW_LO_HU  # 1524


@dataclass
class PreprocessConfig:
    """Parameters of the preprocessing chain, serialized with the experiment."""

    target_thickness_mm: float = 2.5
    crop_height: int = 384
    crop_width: int = 384
    sequence_length: int = 50
    slab_stride: int = 4
    slices_per_slab: int = 5
    band_variance_threshold: float = 50.0
    mask_downsample_factor: int = 16

    def validate(self) -> None:
        if self.target_thickness_mm <= 0:
            raise ConfigError("target_thickness_mm must be > 0")
        for name in ("crop_height", "crop_width", "sequence_length",
                     "slab_stride", "slices_per_slab", "mask_downsample_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.slices_per_slab % 2 == 0:
            raise ConfigError("slices_per_slab must be odd")
        if self.band_variance_threshold <= 0:
            raise ConfigError("band_variance_threshold must be > 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "target_thickness_mm", "crop_height", "crop_width",
            "sequence_length", "slab_stride", "slices_per_slab",
            "band_variance_threshold", "mask_downsample_factor")}

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class Slab:
    """A 5-slice window with an optional center-slice lesion mask."""

    pixels: np.ndarray  # (slices_per_slab, H, W), values in [0, 255]
    label: int
    center_mask: np.ndarray | None = None
    source: tuple[str, int] = ("", -1)


@dataclass
class SlabSequence:
    """Ordered slabs for one study, ascending z."""

    slabs: list[Slab]
    label: int

    def __len__(self) -> int:
        return len(self.slabs)

    def pixel_stack(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.slabs])


class LungBand(NamedTuple):
    start: int
    end: int  # inclusive
    fallback: bool = False


def resample_thickness(volume: Volume, target_mm: float) -> Volume:
    """Linear resampling along z to the target slice thickness.

    Output slices sit at physical positions j * target_mm for
    j = 0 .. floor(extent / target_mm), with extent = (n - 1) * thickness.
    In-plane axes are untouched.
    """
    if volume.n_slices < 2:
        raise ValueError("resampling requires at least 2 slices")
    if target_mm <= 0:
        raise ValueError("target_mm must be > 0")
    sz = volume.slice_thickness_mm
    if sz == target_mm:
        return Volume(volume.values.copy(), volume.spacing)
    extent = (volume.n_slices - 1) * sz
    n_out = int(np.floor(extent / target_mm)) + 1
    new_z = np.arange(n_out) * target_mm
    pos = new_z / sz
    idx0 = np.clip(np.floor(pos).astype(int), 0, volume.n_slices - 1)
    idx1 = np.clip(idx0 + 1, 0, volume.n_slices - 1)
    frac = (pos - idx0).astype(np.float32)[:, None, None]
    values = (1.0 - frac) * volume.values[idx0] + frac * volume.values[idx1]
    return Volume(values, (target_mm, volume.spacing[1], volume.spacing[2]))


def window_hu(values):
    """Affine HU window: [-1024, 500] mapped to [0, 255], clamped outside.

    Accepts a Volume or a bare array; returns the same kind.
    """
    if isinstance(values, Volume):
        return Volume(window_hu(values.values), values.spacing)
    v = np.asarray(values)
    if v.dtype != np.float64:
        v = v.astype(np.float32)
    return np.clip(255.0 * (v - WINDOW_LO_HU) / _WINDOW_SPAN, 0.0, 255.0)


def center_crop(image_stack: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center crop of the last two axes to (out_h, out_w); zero-pads small inputs."""
    arr = np.asarray(image_stack)
    h, w = arr.shape[-2], arr.shape[-1]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    out = np.zeros(arr.shape[:-2] + (out_h, out_w), dtype=arr.dtype)
    # overlap window in input and output coordinates
    src_y = max(0, (h - out_h) // 2)
    src_x = max(0, (w - out_w) // 2)
    dst_y = max(0, (out_h - h) // 2)
    dst_x = max(0, (out_w - w) // 2)
    span_y = min(h, out_h)
    span_x = min(w, out_w)
    out[..., dst_y:dst_y + span_y, dst_x:dst_x + span_x] = \
        arr[..., src_y:src_y + span_y, src_x:src_x + span_x]
    return out


def select_lung_band(volume: Volume, variance_threshold: float = 50.0) -> LungBand:
    """Longest contiguous run of slices whose windowed intensity variance
    exceeds the threshold; the full range with ``fallback=True`` when no
    slice qualifies.
    """
    values = volume.values
    if values.min() < 0 or values.max() > 255:
        values = window_hu(values)
    variances = values.reshape(values.shape[0], -1).var(axis=1)
    candidates = variances > variance_threshold
    if not candidates.any():
        return LungBand(0, volume.n_slices - 1, fallback=True)
    best_start = best_end = -1
    run_start = None
    padded = np.r_[candidates, False]
    for i, flag in enumerate(padded):
        if flag and run_start is None:
            run_start = i
        elif not flag and run_start is not None:
            if best_start < 0 or i - run_start > best_end - best_start + 1:
                best_start, best_end = run_start, i - 1
            run_start = None
    return LungBand(int(best_start), int(best_end), fallback=False)


def _resize_z(stack: np.ndarray, n_out: int) -> np.ndarray:
    """Linear z resize mapping endpoints to endpoints; identity when sizes match."""
    n_in = stack.shape[0]
    if n_in == n_out:
        return stack.copy()
    if n_out == 1:
        mid = (n_in - 1) / 2.0
        lo = int(np.floor(mid))
        hi = min(lo + 1, n_in - 1)
        frac = mid - lo
        return ((1.0 - frac) * stack[lo] + frac * stack[hi])[None].astype(stack.dtype)
    if n_in == 1:
        return np.repeat(stack, n_out, axis=0)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    idx0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    idx1 = np.clip(idx0 + 1, 0, n_in - 1)
    frac = (pos - idx0).astype(stack.dtype if stack.dtype.kind == "f" else np.float32)
    frac = frac[:, None, None]
    return ((1.0 - frac) * stack[idx0] + frac * stack[idx1]).astype(stack.dtype, copy=False)


def extract_slab(stack: np.ndarray, center: int, slices_per_slab: int = 5) -> np.ndarray:
    """Slices [center - k, center + k] with boundary replication, k = (n-1)/2."""
    half = slices_per_slab // 2
    idx = np.clip(np.arange(center - half, center + half + 1), 0, stack.shape[0] - 1)
    return stack[idx]


def build_slab_sequence(stack: np.ndarray, band: tuple[int, int],
                        T: int = 50, stride: int = 4, slices_per_slab: int = 5,
                        label: int = 0, study_id: str = "") -> SlabSequence:
    """Resize the band to T * stride slices and cut T slabs.

    Slab t is centered at resized slice t * stride (slices replicated at
    the boundaries); the degenerate T = 1 sequence takes the middle slice
    of the resized band as its center. ``band`` is inclusive on both ends.
    """
    z0, z1 = int(band[0]), int(band[1])
    if z1 < z0:
        raise ValueError("band must be nonempty")
    sub = stack[z0:z1 + 1]
    resized = _resize_z(sub, T * stride)
    n_resized = resized.shape[0]
    if T == 1:
        centers = [(n_resized - 1) // 2]
    else:
        centers = [t * stride for t in range(T)]
    slabs = []
    for c in centers:
        # map the resized-band center back to the nearest original slice
        if n_resized == 1 or sub.shape[0] == 1:
            orig = z0
        else:
            orig = z0 + int(round(c * (sub.shape[0] - 1) / (n_resized - 1)))
        slabs.append(Slab(pixels=extract_slab(resized, c, slices_per_slab),
                          label=label, source=(study_id, orig)))
    return SlabSequence(slabs=slabs, label=label)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear mask downsampling followed by (value > 0) binarization.

    The bilinear kernel is widened to the scale factor (triangle filter of
    half-width ``factor``), so any positive input pixel contributes to at
    least one output pixel and small lesions survive. Inputs whose sides
    are not divisible by ``factor`` are zero-padded first.
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = m.shape
    pad_h = (-h) % factor
    pad_w = (-w) % factor
    if pad_h or pad_w:
        m = np.pad(m, ((0, pad_h), (0, pad_w)))
        h, w = m.shape
    out_h, out_w = h // factor, w // factor
    wr = _triangle_weights(out_h, h, factor)
    wc = _triangle_weights(out_w, w, factor)
    low = wr @ m.astype(np.float64) @ wc.T
    return (low > 0).astype(np.uint8)


def _triangle_weights(n_out: int, n_in: int, factor: int) -> np.ndarray:
    """Row-normalized triangle filter of half-width ``factor`` at each output center."""
    centers = (np.arange(n_out) + 0.5) * factor - 0.5
    pos = np.arange(n_in)
    weights = np.maximum(0.0, 1.0 - np.abs(pos[None, :] - centers[:, None]) / factor)
    return weights / weights.sum(axis=1, keepdims=True)


def preprocess_study(volume: Volume, config: PreprocessConfig,
                     label: int = 0, study_id: str = "") -> tuple[SlabSequence, LungBand]:
    """Full chain for one study: resample, window, crop, band, slab sequence."""
    config.validate()
    vol = resample_thickness(volume, config.target_thickness_mm)
    windowed = window_hu(vol.values)
    cropped = center_crop(windowed, config.crop_height, config.crop_width)
    band = select_lung_band(Volume(vol.values, vol.spacing),
                            config.band_variance_threshold)
    seq = build_slab_sequence(cropped, (band.start, band.end),
                              T=config.sequence_length, stride=config.slab_stride,
                              slices_per_slab=config.slices_per_slab,
                              label=label, study_id=study_id)
    return seq, band
