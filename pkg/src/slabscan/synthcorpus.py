"""Synthetic confounded corpus generator.

Studies are soft-tissue volumes carrying bright vessel-like tubes that
wander through the slices. Positive studies hide dark ellipsoidal lesions
inside those tubes; a bright rib-like arc near the image boundary acts as
a label-correlated confounder whose strength is set by
``confounder_correlation``. Sparse per-slice lesion masks mimic
annotations drawn every few millimeters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import ConfigError, DataError
from .volume import HU_MAX, HU_MIN, Volume

_BACKGROUND_HU = -50.0
_VESSEL_HU = (250.0, 400.0)
_LESION_HU = (30.0, 80.0)
_CONFOUNDER_HU = (650.0, 750.0)
_VESSEL_COUNT = (3, 5)
# fractions of min(height, width); chosen so vessels plus lesions can
# never reach the confounder arc (see _confounder_params)
_VESSEL_OFFSET_FRAC = 0.18
_VESSEL_AMP_FRAC = (0.04, 0.10)
_ARC_RADIUS_FRAC = (0.40, 0.46)
_BAND_LO_FRAC = 0.125
_BAND_HI_FRAC = 0.875

MANIFEST_NAME = "manifest.json"
_MANIFEST_FORMAT = "slabscan-corpus-v1"


@dataclass
class CorpusConfig:
    """Knobs of the synthetic corpus."""

    study_count: int = 200
    positive_fraction: float = 0.5
    volume_shape: tuple[int, int, int] = (40, 96, 96)
    slice_thickness_mm: float = 2.5
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range_vox: tuple[float, float] = (2.0, 4.0)
    confounder_correlation: float = 0.9
    noise_std_hu: float = 25.0
    annotation_spacing_mm: float = 10.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.study_count < 0:
            raise ConfigError("study_count must be >= 0")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigError("positive_fraction must lie in [0, 1]")
        if len(self.volume_shape) != 3 or any(s < 1 for s in self.volume_shape):
            raise ConfigError("volume_shape must be three positive extents")
        if self.volume_shape[0] < 5:
            raise ConfigError("volume_shape needs at least 5 slices")
        if self.slice_thickness_mm <= 0:
            raise ConfigError("slice_thickness_mm must be > 0")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise ConfigError("lesion_count_range must be a nonempty "
                              "nonnegative interval")
        rlo, rhi = self.lesion_radius_range_vox
        if rlo < 1.0 or rhi < rlo:
            raise ConfigError("lesion_radius_range_vox must be a nonempty "
                              "interval with lower bound >= 1")
        if rhi > min(self.volume_shape[1], self.volume_shape[2]) / 8.0:
            raise ConfigError("lesion_radius_range_vox too large for "
                              "volume_shape")
        if not 0.0 <= self.confounder_correlation <= 1.0:
            raise ConfigError("confounder_correlation must lie in [0, 1]")
        if self.noise_std_hu < 0:
            raise ConfigError("noise_std_hu must be >= 0")
        if self.annotation_spacing_mm <= 0:
            raise ConfigError("annotation_spacing_mm must be > 0")

    def to_dict(self) -> dict:
        return {
            "study_count": self.study_count,
            "positive_fraction": self.positive_fraction,
            "volume_shape": list(self.volume_shape),
            "slice_thickness_mm": self.slice_thickness_mm,
            "lesion_count_range": list(self.lesion_count_range),
            "lesion_radius_range_vox": list(self.lesion_radius_range_vox),
            "confounder_correlation": self.confounder_correlation,
            "noise_std_hu": self.noise_std_hu,
            "annotation_spacing_mm": self.annotation_spacing_mm,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for key in ("volume_shape", "lesion_count_range",
                    "lesion_radius_range_vox"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class Study:
    """One generated study: HU volume, label, sparse masks, metadata."""

    volume: Volume
    label: int
    lesion_masks: dict[int, np.ndarray]
    meta: dict

    @property
    def annotated_slices(self) -> list[int]:
        return sorted(self.lesion_masks)


@dataclass
class StudyRecord:
    """Manifest row for one study on disk."""

    study_id: str
    index: int
    label: int
    split: str
    confounder: bool
    annotated_slices: list[int]
    volume_file: str
    mask_file: str | None
    n_lesions: int

    def to_dict(self) -> dict:
        return {
            "study_id": self.study_id, "index": self.index,
            "label": self.label, "split": self.split,
            "confounder": self.confounder,
            "annotated_slices": self.annotated_slices,
            "volume_file": self.volume_file, "mask_file": self.mask_file,
            "n_lesions": self.n_lesions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyRecord":
        return cls(**d)


@dataclass
class CorpusManifest:
    """Corpus index: config plus one record per study."""

    config: CorpusConfig
    records: list[StudyRecord]
    root: Path | None = field(default=None, compare=False)

    def split_records(self, split: str) -> list[StudyRecord]:
        return [r for r in self.records if r.split == split]

    def record_for(self, study_id: str) -> StudyRecord:
        for r in self.records:
            if r.study_id == study_id:
                return r
        raise KeyError(study_id)

    def to_dict(self) -> dict:
        return {
            "format": _MANIFEST_FORMAT,
            "config": self.config.to_dict(),
            "studies": [r.to_dict() for r in self.records],
            "counts": {
                "total": len(self.records),
                "positive": sum(r.label for r in self.records),
                "train": sum(r.split == "train" for r in self.records),
                "val": sum(r.split == "val" for r in self.records),
            },
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True)
                        + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        if d.get("format") != _MANIFEST_FORMAT:
            raise DataError(f"{path}: not a corpus manifest")
        records = [StudyRecord.from_dict(r) for r in d["studies"]]
        return cls(config=CorpusConfig.from_dict(d["config"]),
                   records=records, root=path.parent)


def _study_label(config: CorpusConfig, index: int) -> int:
    """Deterministic label: n_pos positives spread evenly over the indices."""
    n = max(config.study_count, 1)
    n_pos = int(round(config.positive_fraction * n))
    return int((index + 1) * n_pos // n > index * n_pos // n)


def _study_rng(config: CorpusConfig, index: int) -> np.random.Generator:
    return np.random.default_rng([int(config.rng_seed), int(index)])


def structure_band(n_slices: int) -> tuple[int, int]:
    """Inclusive slice range that holds vessels, lesions, and confounder."""
    lo = int(round(_BAND_LO_FRAC * n_slices))
    hi = int(round(_BAND_HI_FRAC * n_slices)) - 1
    return lo, hi


def study_geometry(config: CorpusConfig, index: int,
                   force_label: int | None = None) -> dict:
    """Draw the full structure geometry for one study.

    Pure in (config, index, force_label); ``generate_study`` rasterizes
    exactly this geometry, so tests can audit masks against it.
    """
    config.validate()
    if not 0 <= index < max(config.study_count, 1):
        raise ConfigError("index must lie in [0, study_count)")
    rng = _study_rng(config, index)
    geo = _draw_geometry(config, index, rng, force_label)
    return geo


def _draw_geometry(config: CorpusConfig, index: int,
                   rng: np.random.Generator,
                   force_label: int | None) -> dict:
    n_slices, height, width = config.volume_shape
    side = float(min(height, width))
    z_lo, z_hi = structure_band(n_slices)
    label = _study_label(config, index) if force_label is None \
        else int(force_label)

    r_lesion_max = config.lesion_radius_range_vox[1]
    vessel_radius_base = max(2.5, 1.15 * r_lesion_max)
    n_vessels = int(rng.integers(_VESSEL_COUNT[0], _VESSEL_COUNT[1] + 1))
    vessels = []
    for _ in range(n_vessels):
        cy = (height - 1) / 2.0 + rng.uniform(-1, 1) * _VESSEL_OFFSET_FRAC * side
        cx = (width - 1) / 2.0 + rng.uniform(-1, 1) * _VESSEL_OFFSET_FRAC * side
        vessels.append({
            "cy": cy, "cx": cx,
            "radius": float(rng.uniform(1.0, 1.25) * vessel_radius_base),
            "amp_y": float(rng.uniform(*_VESSEL_AMP_FRAC) * side),
            "amp_x": float(rng.uniform(*_VESSEL_AMP_FRAC) * side),
            "freq_y": float(rng.uniform(0.5, 1.5)),
            "freq_x": float(rng.uniform(0.5, 1.5)),
            "phase_y": float(rng.uniform(0, 2 * np.pi)),
            "phase_x": float(rng.uniform(0, 2 * np.pi)),
            "hu": float(rng.uniform(*_VESSEL_HU)),
        })

    lesions = []
    if label:
        lo, hi = config.lesion_count_range
        if hi < 1:
            raise ConfigError("lesion_count_range excludes positives; "
                              "cannot generate a positive study")
        n_lesions = int(rng.integers(max(lo, 1), hi + 1))
        for _ in range(n_lesions):
            r_xy = float(rng.uniform(*config.lesion_radius_range_vox))
            rz = 1.0 + 0.5 * r_xy
            margin = int(np.ceil(rz))
            zc_lo = min(z_lo + margin, z_hi)
            zc_hi = max(z_hi - margin, zc_lo)
            lesions.append({
                "vessel": int(rng.integers(0, n_vessels)),
                "zc": int(rng.integers(zc_lo, zc_hi + 1)),
                "r_xy": r_xy,
                "rz": rz,
                "hu": float(rng.uniform(*_LESION_HU)),
            })

    has_confounder = bool(
        rng.random() < (config.confounder_correlation if label
                        else 1.0 - config.confounder_correlation))
    confounder = {
        "theta0": float(-np.pi / 2 + rng.uniform(-0.5, 0.5)),
        "span": float(rng.uniform(1.6, 2.6)),
        "radius": float(rng.uniform(*_ARC_RADIUS_FRAC) * side),
        "thickness": float(rng.uniform(2.5, 4.0)),
        "hu": float(rng.uniform(*_CONFOUNDER_HU)),
    }
    return {
        "index": index, "label": label, "band": (z_lo, z_hi),
        "vessels": vessels, "lesions": lesions,
        "has_confounder": has_confounder, "confounder": confounder,
    }


def vessel_center(vessel: dict, z: int, band: tuple[int, int]) -> tuple[float, float]:
    """In-plane vessel axis position at slice z (sinusoidal wander)."""
    z_lo, z_hi = band
    length = max(z_hi - z_lo, 1)
    t = (z - z_lo) / length
    cy = vessel["cy"] + vessel["amp_y"] * np.sin(
        2 * np.pi * vessel["freq_y"] * t + vessel["phase_y"])
    cx = vessel["cx"] + vessel["amp_x"] * np.sin(
        2 * np.pi * vessel["freq_x"] * t + vessel["phase_x"])
    return float(cy), float(cx)


def lesion_slice_radius(lesion: dict, z: int) -> float:
    """In-plane radius of the lesion ellipsoid at slice z (0 outside)."""
    dz = (z - lesion["zc"]) / lesion["rz"]
    if abs(dz) > 1.0:
        return 0.0
    return lesion["r_xy"] * float(np.sqrt(max(0.0, 1.0 - dz * dz)))


def _disk(height: int, width: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy = np.arange(height)[:, None] - cy
    xx = np.arange(width)[None, :] - cx
    return yy * yy + xx * xx <= radius * radius


def lesion_support(geo: dict, shape: tuple[int, int, int]) -> np.ndarray:
    """Boolean (slices, H, W) rasterization of every lesion in the geometry."""
    n_slices, height, width = shape
    support = np.zeros(shape, dtype=bool)
    for lesion in geo["lesions"]:
        vessel = geo["vessels"][lesion["vessel"]]
        z0 = max(0, int(np.floor(lesion["zc"] - lesion["rz"])))
        z1 = min(n_slices - 1, int(np.ceil(lesion["zc"] + lesion["rz"])))
        for z in range(z0, z1 + 1):
            r = lesion_slice_radius(lesion, z)
            if r <= 0.0:
                continue
            cy, cx = vessel_center(vessel, z, geo["band"])
            support[z] |= _disk(height, width, cy, cx, r)
    return support


def _confounder_mask(geo: dict, height: int, width: int) -> np.ndarray:
    p = geo["confounder"]
    cy0, cx0 = (height - 1) / 2.0, (width - 1) / 2.0
    yy = np.arange(height)[:, None] - cy0
    xx = np.arange(width)[None, :] - cx0
    dist = np.sqrt(yy * yy + xx * xx)
    angle = np.arctan2(yy, xx)
    delta = np.angle(np.exp(1j * (angle - p["theta0"])))
    ring = np.abs(dist - p["radius"]) <= p["thickness"] / 2.0
    return ring & (np.abs(delta) <= p["span"] / 2.0)


def annotated_slice_indices(geo: dict, config: CorpusConfig,
                            support: np.ndarray) -> list[int]:
    """Annotated slices: a regular grid plus every lesion-center slice.

    The grid step is floor(annotation_spacing_mm / slice_thickness_mm);
    only grid slices that actually cut a lesion are recorded.
    """
    step = max(1, int(config.annotation_spacing_mm // config.slice_thickness_mm))
    z_lo, z_hi = geo["band"]
    grid = set(range(z_lo, z_hi + 1, step))
    centers = {lesion["zc"] for lesion in geo["lesions"]}
    annotated = {z for z in grid if support[z].any()} | centers
    return sorted(annotated)


def generate_study(config: CorpusConfig, index: int,
                   force_label: int | None = None) -> Study:
    """Rasterize one study. Deterministic in (config, index, force_label)."""
    config.validate()
    if not 0 <= index < max(config.study_count, 1):
        raise ConfigError("index must lie in [0, study_count)")
    rng = _study_rng(config, index)
    geo = _draw_geometry(config, index, rng, force_label)
    n_slices, height, width = config.volume_shape
    z_lo, z_hi = geo["band"]

    values = np.full(config.volume_shape, _BACKGROUND_HU, dtype=np.float32)
    for z in range(z_lo, z_hi + 1):
        for vessel in geo["vessels"]:
            cy, cx = vessel_center(vessel, z, geo["band"])
            values[z][_disk(height, width, cy, cx, vessel["radius"])] = vessel["hu"]

    support = lesion_support(geo, config.volume_shape)
    for lesion in geo["lesions"]:
        vessel = geo["vessels"][lesion["vessel"]]
        z0 = max(0, int(np.floor(lesion["zc"] - lesion["rz"])))
        z1 = min(n_slices - 1, int(np.ceil(lesion["zc"] + lesion["rz"])))
        for z in range(z0, z1 + 1):
            r = lesion_slice_radius(lesion, z)
            if r <= 0.0:
                continue
            cy, cx = vessel_center(vessel, z, geo["band"])
            values[z][_disk(height, width, cy, cx, r)] = lesion["hu"]

    if geo["has_confounder"]:
        arc = _confounder_mask(geo, height, width)
        values[z_lo:z_hi + 1][:, arc] = geo["confounder"]["hu"]

    if config.noise_std_hu > 0:
        values += rng.normal(0.0, config.noise_std_hu,
                             size=config.volume_shape).astype(np.float32)
    np.clip(values, HU_MIN, HU_MAX, out=values)

    masks = {}
    if geo["lesions"]:
        for z in annotated_slice_indices(geo, config, support):
            masks[int(z)] = support[z].astype(np.uint8)

    label = int(geo["label"])
    meta = {
        "study_id": f"study_{index:04d}",
        "index": index,
        "seed": [int(config.rng_seed), int(index)],
        "confounder": geo["has_confounder"],
        "n_lesions": len(geo["lesions"]),
    }
    spacing = (config.slice_thickness_mm, 1.0, 1.0)
    return Study(volume=Volume(values, spacing), label=label,
                 lesion_masks=masks, meta=meta)


def _assign_splits(labels: list[int]) -> list[str]:
    """Deterministic stratified 80/20 split: every fifth study of each
    class (by index order) goes to validation."""
    splits = [""] * len(labels)
    for cls in (0, 1):
        rank = 0
        for i, lab in enumerate(labels):
            if lab != cls:
                continue
            splits[i] = "val" if rank % 5 == 4 else "train"
            rank += 1
    return splits


def generate_corpus(config: CorpusConfig, output_dir: str | Path,
                    force: bool = False) -> CorpusManifest:
    """Write every study plus a manifest under ``output_dir``."""
    config.validate()
    output_dir = Path(output_dir)
    manifest_path = output_dir / MANIFEST_NAME
    if manifest_path.exists() and not force:
        raise DataError(f"{manifest_path} already exists (use force to "
                        "regenerate)")
    study_dir = output_dir / "studies"
    study_dir.mkdir(parents=True, exist_ok=True)

    labels = [_study_label(config, i) for i in range(config.study_count)]
    splits = _assign_splits(labels)

    records = []
    for index, split in enumerate(splits):
        study = generate_study(config, index)
        sid = study.meta["study_id"]
        volume_file = f"studies/{sid}.avol"
        spacing = study.volume.spacing
        stored = np.round(study.volume.values).astype("<i2")
        container.write_tensor(output_dir / volume_file,
                               container.MAGIC_VOLUME, stored, spacing)
        mask_file = None
        annotated = study.annotated_slices
        if annotated:
            mask_file = f"studies/{sid}_masks.avol"
            stack = np.stack([study.lesion_masks[z] for z in annotated])
            container.write_tensor(output_dir / mask_file,
                                   container.MAGIC_VOLUME,
                                   stack.astype("u1"), spacing)
        sidecar = {
            "study_id": sid,
            "index": study.meta["index"],
            "label": study.label,
            "seed": study.meta["seed"],
            "confounder": study.meta["confounder"],
            "n_lesions": study.meta["n_lesions"],
            "annotated_slices": annotated,
            "volume_file": volume_file,
            "mask_file": mask_file,
            "spacing": list(spacing),
        }
        (study_dir / f"{sid}.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        records.append(StudyRecord(
            study_id=sid, index=study.meta["index"], label=study.label,
            split=split, confounder=study.meta["confounder"],
            annotated_slices=annotated, volume_file=volume_file,
            mask_file=mask_file, n_lesions=study.meta["n_lesions"]))

    manifest = CorpusManifest(config=config, records=records, root=output_dir)
    manifest.save(manifest_path)
    return manifest


def load_study(manifest: CorpusManifest, record: StudyRecord | str) -> Study:
    """Read one study (volume plus masks) back from disk."""
    if isinstance(record, str):
        record = manifest.record_for(record)
    if manifest.root is None:
        raise DataError("manifest has no root directory")
    values, spacing = container.read_tensor(manifest.root / record.volume_file,
                                            container.MAGIC_VOLUME)
    volume = Volume(values.astype(np.float32), spacing)
    masks: dict[int, np.ndarray] = {}
    if record.mask_file is not None:
        stack, _ = container.read_tensor(manifest.root / record.mask_file,
                                         container.MAGIC_VOLUME)
        if stack.shape[0] != len(record.annotated_slices):
            raise DataError(f"{record.mask_file}: mask count does not match "
                            "annotated slices")
        for z, mask in zip(record.annotated_slices, stack):
            masks[int(z)] = mask.astype(np.uint8)
    meta = {
        "study_id": record.study_id, "index": record.index,
        "seed": [manifest.config.rng_seed, record.index],
        "confounder": record.confounder, "n_lesions": record.n_lesions,
    }
    return Study(volume=volume, label=record.label, lesion_masks=masks,
                 meta=meta)
