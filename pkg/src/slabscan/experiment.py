"""Experiment orchestration: one config object tying corpus, preprocessing,
both training stages, and evaluation together, plus the three-scenario
comparison.

Scenarios follow the study-availability axis: 1 trains stage II on the
annotated subset only (attention training on), 2 uses every study but no
attention training, 3 uses every study with attention training.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, container, metrics, preprocess
from .aggregator import (AggregatorConfig, FeatureStore, baseline_aggregate,
                         encode_study, load_aggregator, predict_studies,
                         train_stage2)
from .attention import compute_attention
from .encoder import (EncoderConfig, SlabEncoder, attention_inside_fractions,
                      build_slab_dataset, checkpoint_hash,
                      checkpoint_matches, config_hash, load_encoder,
                      stage1_slab_scores, train_stage1, validate_stage1)
from .errors import ConfigError, DataError
from .losses import LossConfig
from .preprocess import PreprocessConfig, preprocess_study
from .synthcorpus import (CorpusConfig, CorpusManifest, MANIFEST_NAME,
                          generate_corpus, load_study)

SCENARIOS = (1, 2, 3)


@dataclass
class PathsConfig:
    """Workspace layout; relative entries resolve against the base directory."""

    corpus_dir: str = "corpus"
    test_corpus_dir: str = "corpus_test"
    slab_dir: str = "slabs"
    feature_dir: str = "features"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"

    def resolve(self, base: str | Path) -> "PathsConfig":
        base = Path(base)
        resolved = {}
        for f in dataclasses.fields(self):
            value = Path(getattr(self, f.name))
            resolved[f.name] = str(value if value.is_absolute()
                                   else base / value)
        return PathsConfig(**resolved)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name)
                for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PathsConfig":
        return cls(**d)


def _desk_corpus() -> CorpusConfig:
    return CorpusConfig(study_count=200, volume_shape=(40, 128, 128),
                        lesion_radius_range_vox=(2.0, 3.5),
                        annotation_spacing_mm=2.5)


def _desk_preprocess() -> PreprocessConfig:
    return PreprocessConfig(crop_height=128, crop_width=128,
                            sequence_length=10, slab_stride=4)


def _desk_encoder() -> EncoderConfig:
    return EncoderConfig(input_size=(128, 128), width_multiplier=0.125,
                         epochs=48, learning_rate=5e-4)


def _desk_aggregator() -> AggregatorConfig:
    return AggregatorConfig(filters=16, batch_size=8, learning_rate=1e-3)


@dataclass
class ExperimentConfig:
    """Full pipeline configuration.

    The component defaults on CorpusConfig, EncoderConfig, and
    AggregatorConfig are the full-scale values; the defaults here form a
    coherent desk-scale profile that trains on a CPU in minutes.
    """

    corpus: CorpusConfig = field(default_factory=_desk_corpus)
    preprocess: PreprocessConfig = field(default_factory=_desk_preprocess)
    encoder: EncoderConfig = field(default_factory=_desk_encoder)
    loss: LossConfig = field(default_factory=LossConfig)
    aggregator: AggregatorConfig = field(default_factory=_desk_aggregator)
    scenario: int = 3
    annotated_fraction: float = 0.15
    stage1_negative_fraction: float = 0.3
    test_study_count: int = 200
    test_seed_offset: int = 10000
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def validate(self, for_scenario: bool = False) -> None:
        self.corpus.validate()
        self.preprocess.validate()
        self.encoder.validate()
        self.loss.validate()
        self.aggregator.validate()
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        for name in ("annotated_fraction", "stage1_negative_fraction"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if self.test_study_count < 2:
            raise ConfigError("test_study_count must be >= 2")
        if (self.preprocess.crop_height, self.preprocess.crop_width) != \
                tuple(self.encoder.input_size):
            raise ConfigError("preprocess crop size must equal encoder "
                              "input_size")
        if self.preprocess.slices_per_slab != self.encoder.in_channels:
            raise ConfigError("slices_per_slab must equal encoder "
                              "in_channels")
        if for_scenario:
            u, v = self.encoder.feature_size
            factor = self.aggregator.pool_stride ** self.aggregator.units
            if u % factor or v % factor:
                raise ConfigError(
                    f"feature grid {u}x{v} cannot survive "
                    f"{self.aggregator.units} pool steps of stride "
                    f"{self.aggregator.pool_stride}")

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus.to_dict(),
            "preprocess": self.preprocess.to_dict(),
            "encoder": self.encoder.to_dict(),
            "loss": self.loss.to_dict(),
            "aggregator": self.aggregator.to_dict(),
            "scenario": self.scenario,
            "annotated_fraction": self.annotated_fraction,
            "stage1_negative_fraction": self.stage1_negative_fraction,
            "test_study_count": self.test_study_count,
            "test_seed_offset": self.test_seed_offset,
            "paths": self.paths.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls(
            corpus=CorpusConfig.from_dict(d.get("corpus", {})),
            preprocess=PreprocessConfig.from_dict(d.get("preprocess", {})),
            encoder=EncoderConfig.from_dict(d.get("encoder", {})),
            loss=LossConfig.from_dict(d.get("loss", {})),
            aggregator=AggregatorConfig.from_dict(d.get("aggregator", {})),
            scenario=d.get("scenario", 3),
            annotated_fraction=d.get("annotated_fraction", 0.3),
            stage1_negative_fraction=d.get("stage1_negative_fraction", 0.3),
            test_study_count=d.get("test_study_count", 80),
            test_seed_offset=d.get("test_seed_offset", 10000),
            paths=PathsConfig.from_dict(d.get("paths", {})),
            seed=d.get("seed", 0),
        )
        cfg.validate()
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2,
                                         sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Rederive every component seed from one global seed."""
        out = dataclasses.replace(
            self,
            corpus=dataclasses.replace(self.corpus, rng_seed=seed),
            encoder=dataclasses.replace(self.encoder, seed=seed + 1),
            aggregator=dataclasses.replace(self.aggregator, seed=seed + 2),
            seed=seed)
        return out

    def with_scenario(self, scenario: int) -> "ExperimentConfig":
        return dataclasses.replace(self, scenario=scenario)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def test_corpus_config(self) -> CorpusConfig:
        return dataclasses.replace(
            self.corpus, study_count=self.test_study_count,
            rng_seed=self.corpus.rng_seed + self.test_seed_offset)

    def effective_stage1(self) -> tuple[EncoderConfig, LossConfig]:
        """Stage-I configs with the scenario's attention setting applied."""
        encoder = dataclasses.replace(self.encoder)
        loss = dataclasses.replace(self.loss)
        if self.scenario == 2:
            encoder.use_attention_loss = False
            loss.lambda_attention = 0.0
        else:
            encoder.use_attention_loss = True
            if loss.lambda_attention <= 0:
                raise ConfigError(f"scenario {self.scenario} requires "
                                  "lambda_attention > 0")
        return encoder, loss

    def encoder_tag(self) -> str:
        return "noat" if self.scenario == 2 else "at"


def annotated_subset(manifest: CorpusManifest, annotated_fraction: float,
                     negative_fraction: float, seed: int) -> set[str]:
    """Deterministic choice of the studies treated as annotated.

    Positive studies keep their masks with probability ``annotated_fraction``
    (exact count, rounded up); a ``negative_fraction`` share of negatives
    joins them as the stage-I negative pool. Selection is per split so both
    splits stay populated.
    """
    rng = np.random.default_rng([seed, 777])
    chosen: set[str] = set()
    for split in ("train", "val"):
        for label, fraction in ((1, annotated_fraction),
                                (0, negative_fraction)):
            ids = sorted(r.study_id for r in manifest.split_records(split)
                         if r.label == label)
            if not ids:
                continue
            keep = max(1, int(np.ceil(fraction * len(ids))))
            chosen.update(rng.choice(ids, size=keep, replace=False))
    return chosen


def ensure_corpus(config: CorpusConfig, directory: str | Path,
                  force: bool = False, log=None) -> CorpusManifest:
    """Generate the corpus unless an identical one is already on disk."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if manifest_path.exists() and not force:
        manifest = CorpusManifest.load(manifest_path)
        if manifest.config.to_dict() == config.to_dict():
            if log is not None:
                log(f"corpus {directory} is up to date, skipping")
            return manifest
        raise DataError(f"{directory} holds a corpus with a different "
                        "config (use force to regenerate)")
    if log is not None:
        log(f"generating corpus {directory} ({config.study_count} studies)")
    return generate_corpus(config, directory, force=force)


def _study_sequence(manifest: CorpusManifest, record,
                    pp: PreprocessConfig) -> preprocess.SlabSequence:
    study = load_study(manifest, record)
    sequence, _ = preprocess_study(study.volume, pp, label=study.label,
                                   study_id=record.study_id)
    return sequence


def build_feature_store(manifest: CorpusManifest, encoder: SlabEncoder,
                        pp: PreprocessConfig, directory: str | Path,
                        encoder_hash: str, force: bool = False,
                        log=None) -> FeatureStore:
    """Extract features for every study in the manifest (resumable)."""
    directory = Path(directory)
    index_path = directory / "index.json"
    if index_path.exists() and not force:
        store = FeatureStore.open(directory)
        if store.encoder_hash == encoder_hash and \
                all(r.study_id in store for r in manifest.records):
            if log is not None:
                log(f"feature store {directory} is up to date, skipping")
            return store
        if store.encoder_hash != encoder_hash:
            raise DataError(f"{directory} was built by a different encoder "
                            "(use force to rebuild)")
    else:
        store = FeatureStore.create(directory, encoder_hash=encoder_hash,
                                    force=force)
    for record in manifest.records:
        if record.study_id in store:
            continue
        sequence = _study_sequence(manifest, record, pp)
        store.add(encode_study(encoder, sequence, study_id=record.study_id,
                               label=record.label))
    if log is not None:
        log(f"feature store {directory}: {len(store.ids())} studies")
    return store


def export_slabs(exp: ExperimentConfig, force: bool = False,
                 log=None) -> Path:
    """Materialize every study's slab sequence as ASLB1 container files.

    Training rebuilds slabs in memory, so these files exist for pipeline
    inspection and downstream tooling rather than as a training input.
    """
    exp.validate()
    manifest = ensure_corpus(exp.corpus, exp.paths.corpus_dir, log=log)
    out_dir = Path(exp.paths.slab_dir)
    index_path = out_dir / "index.json"
    fingerprint = config_hash({"preprocess": exp.preprocess.to_dict(),
                               "corpus": exp.corpus.to_dict()})
    if index_path.exists() and not force:
        try:
            index = json.loads(index_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read {index_path}: {exc}") from exc
        if index.get("config_hash") == fingerprint:
            if log is not None:
                log(f"slab files in {out_dir} are up to date, skipping")
            return out_dir
        raise DataError(f"{out_dir} holds slabs from a different config "
                        "(use force to rebuild)")
    out_dir.mkdir(parents=True, exist_ok=True)
    studies = {}
    for record in manifest.records:
        sequence = _study_sequence(manifest, record, exp.preprocess)
        stack = sequence.pixel_stack().astype("<f4")
        name = f"{record.study_id}.aslb"
        container.write_tensor(out_dir / name, container.MAGIC_SLABS, stack,
                               spacing=(exp.preprocess.target_thickness_mm,
                                        1.0, 1.0))
        studies[record.study_id] = {"file": name, "label": record.label,
                                    "length": int(stack.shape[0])}
    index_path.write_text(json.dumps(
        {"format": "slabscan-slabs-v1", "config_hash": fingerprint,
         "studies": studies}, indent=2, sort_keys=True) + "\n")
    if log is not None:
        log(f"wrote {len(studies)} slab files to {out_dir}")
    return out_dir


class _Stage:
    """Context wrapper that prefixes failures with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, Exception):
            exc.args = (f"stage {self.name}: {exc.args[0]}"
                        if exc.args else f"stage {self.name} failed",) \
                + exc.args[1:]
        return False


def stage1_checkpoint_path(exp: ExperimentConfig) -> Path:
    """Stage-I checkpoints are shared by scenarios with the same attention
    setting, so the filename carries the at/noat tag rather than the
    scenario number."""
    return Path(exp.paths.checkpoint_dir) / \
        f"stage1_{exp.encoder_tag()}_seed{exp.seed}.pt"


def stage2_checkpoint_path(exp: ExperimentConfig) -> Path:
    return Path(exp.paths.checkpoint_dir) / \
        f"stage2_s{exp.scenario}_seed{exp.seed}.pt"


def run_stage1(exp: ExperimentConfig, force: bool = False,
               resume: bool = False, log=None
               ) -> tuple[Path, CorpusManifest, set[str]]:
    """Corpus + stage-I training for the experiment's scenario."""
    exp.validate()
    encoder_cfg, loss_cfg = exp.effective_stage1()
    with _Stage("gen"):
        manifest = ensure_corpus(exp.corpus, exp.paths.corpus_dir,
                                 force=False, log=log)
    subset = annotated_subset(manifest, exp.annotated_fraction,
                              exp.stage1_negative_fraction, exp.seed)
    context = {"corpus": exp.corpus.to_dict(), "subset": sorted(subset)}
    path = stage1_checkpoint_path(exp)
    if resume and not force and \
            checkpoint_matches(path, encoder_cfg, loss_cfg, context):
        if log is not None:
            log(f"stage 1 checkpoint {path} matches, skipping (hash "
                "verified)")
        return path, manifest, subset
    with _Stage("train-stage1"):
        train_stage1(manifest, encoder_cfg, loss_cfg, path,
                     preprocess_config=exp.preprocess, study_ids=subset,
                     context=context, log=log)
    return path, manifest, subset


def run_features(exp: ExperimentConfig, stage1_path: Path,
                 force: bool = False, log=None
                 ) -> tuple[FeatureStore, FeatureStore, CorpusManifest]:
    """Feature stores for the training corpus and the held-out test corpus."""
    model, _, _ = load_encoder(stage1_path, expect=exp.encoder)
    encoder_hash = checkpoint_hash_of(stage1_path)
    with _Stage("gen"):
        test_manifest = ensure_corpus(exp.test_corpus_config(),
                                      exp.paths.test_corpus_dir,
                                      force=False, log=log)
    manifest = CorpusManifest.load(Path(exp.paths.corpus_dir) / MANIFEST_NAME)
    tag = exp.encoder_tag()
    base = Path(exp.paths.feature_dir) / f"{tag}_seed{exp.seed}"
    with _Stage("extract-features"):
        train_store = build_feature_store(
            manifest, model, exp.preprocess, base / "train", encoder_hash,
            force=force, log=log)
        test_store = build_feature_store(
            test_manifest, model, exp.preprocess, base / "test", encoder_hash,
            force=force, log=log)
    return train_store, test_store, test_manifest


def checkpoint_hash_of(path: str | Path) -> str:
    return checkpoint_hash(path)


def _store_dir(exp: ExperimentConfig, which: str) -> Path:
    return Path(exp.paths.feature_dir) / \
        f"{exp.encoder_tag()}_seed{exp.seed}" / which


def open_store(exp: ExperimentConfig, which: str) -> FeatureStore:
    base = _store_dir(exp, which)
    if not (base / "index.json").exists():
        raise DataError(f"feature store {base} not found; run "
                        "extract-features first")
    return FeatureStore.open(base)


def run_stage2(exp: ExperimentConfig, force: bool = False,
               resume: bool = False, log=None) -> Path:
    """Stage-II training from an existing feature store."""
    exp.validate(for_scenario=True)
    stage1_path = stage1_checkpoint_path(exp)
    if not stage1_path.exists():
        raise DataError(f"stage-1 checkpoint {stage1_path} not found; run "
                        "train-stage1 first")
    manifest = CorpusManifest.load(Path(exp.paths.corpus_dir) / MANIFEST_NAME)
    train_store = open_store(exp, "train")

    stage2_ids = None
    if exp.scenario == 1:
        stage2_ids = annotated_subset(manifest, exp.annotated_fraction,
                                      exp.stage1_negative_fraction, exp.seed)
    stage2_path = stage2_checkpoint_path(exp)
    context = {
        "scenario": exp.scenario,
        "encoder_checkpoint": checkpoint_hash_of(stage1_path),
        "study_ids": sorted(stage2_ids) if stage2_ids else None,
    }
    if resume and not force and stage2_path.exists() and \
            _aggregator_matches(stage2_path, exp.aggregator, context):
        if log is not None:
            log(f"stage 2 checkpoint {stage2_path} matches, skipping")
        return stage2_path
    with _Stage("train-stage2"):
        train_stage2(train_store, manifest, exp.aggregator, stage2_path,
                     study_ids=stage2_ids, context=context, log=log)
    return stage2_path


def run_scenario(exp: ExperimentConfig, force: bool = False,
                 resume: bool = False, log=None) -> dict:
    """Full pipeline for one scenario; returns the written report."""
    exp.validate(for_scenario=True)
    stage1_path, manifest, _ = run_stage1(exp, force=force, resume=resume,
                                          log=log)
    _, test_store, test_manifest = run_features(exp, stage1_path,
                                                force=force, log=log)
    stage2_path = run_stage2(exp, force=force, resume=resume, log=log)

    with _Stage("evaluate"):
        report = _evaluate_scenario(exp, stage1_path, stage2_path, manifest,
                                    test_manifest, test_store, log=log)
    return report


def _aggregator_matches(path: Path, config: AggregatorConfig,
                        context: dict) -> bool:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception:
        return False
    if not isinstance(blob, dict) or "payload" not in blob:
        return False
    payload = blob["payload"]
    return payload.get("aggregator") == config.to_dict() and \
        payload.get("context") == context


def _evaluate_scenario(exp: ExperimentConfig, stage1_path: Path,
                       stage2_path: Path, manifest: CorpusManifest,
                       test_manifest: CorpusManifest,
                       test_store: FeatureStore, log=None) -> dict:
    model, _ = load_aggregator(stage2_path)
    test_ids = [r.study_id for r in test_manifest.records]
    test_labels = np.array([r.label for r in test_manifest.records])
    test_scores = predict_studies(model, test_store, test_ids)
    result = metrics.evaluate(test_scores, test_labels)

    stage1_eval = validate_stage1(stage1_path, manifest, split="val",
                                  preprocess_config=exp.preprocess)

    report_dir = Path(exp.paths.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    stem = f"scenario{exp.scenario}_seed{exp.seed}"
    report = {
        "report": "scenario",
        "scenario": exp.scenario,
        "seed": exp.seed,
        "config_hash": exp.hash(),
        "version": __version__,
        "stage1_checkpoint": str(stage1_path),
        "stage2_checkpoint": str(stage2_path),
        "stage1_val": {"accuracy": stage1_eval.accuracy,
                       "auc": stage1_eval.auc},
        "test": result.to_dict(),
    }
    (report_dir / f"{stem}.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    metrics.write_scores_csv(
        report_dir / f"{stem}.csv",
        list(zip(test_ids, test_scores.tolist(), test_labels.tolist())))
    try:
        metrics.save_roc_plot(result.roc_points, report_dir / f"{stem}.png",
                              label=f"scenario {exp.scenario} "
                                    f"(AUC {result.auc:.3f})")
    except Exception as exc:  # plotting is an optional artifact
        warnings.warn(f"ROC plot skipped: {exc}", RuntimeWarning)
    if log is not None:
        log(f"scenario {exp.scenario} test AUC {result.auc:.3f} "
            f"accuracy {result.accuracy:.3f}")
    return report


def eval_baselines(exp: ExperimentConfig, force: bool = False,
                   resume: bool = True, log=None) -> dict:
    """Mean/max slab-score baselines against the recurrent model."""
    exp.validate(for_scenario=True)
    stage1_path = stage1_checkpoint_path(exp)
    stage2_path = stage2_checkpoint_path(exp)
    if not stage1_path.exists():
        raise DataError(f"stage-1 checkpoint {stage1_path} not found; run "
                        "train-stage1 or run-scenario first")
    if not stage2_path.exists():
        raise DataError(f"stage-2 checkpoint {stage2_path} not found; run "
                        "run-scenario first")
    model, _, _ = load_encoder(stage1_path)
    test_manifest = ensure_corpus(exp.test_corpus_config(),
                                  exp.paths.test_corpus_dir, log=log)

    ids, labels = [], []
    mean_scores, max_scores = [], []
    for record in test_manifest.records:
        sequence = _study_sequence(test_manifest, record, exp.preprocess)
        slabs = torch.from_numpy(
            sequence.pixel_stack().astype(np.float32))
        slab_scores = stage1_slab_scores(model, slabs)
        ids.append(record.study_id)
        labels.append(record.label)
        mean_scores.append(baseline_aggregate(slab_scores, "mean"))
        max_scores.append(baseline_aggregate(slab_scores, "max"))
    labels_arr = np.array(labels)

    aggregator, _ = load_aggregator(stage2_path)
    test_store = open_store(exp, "test")
    recurrent_scores = predict_studies(aggregator, test_store, ids)

    def _result(scores):
        return metrics.evaluate(np.asarray(scores), labels_arr).to_dict()

    report = {
        "report": "baselines",
        "scenario": exp.scenario,
        "seed": exp.seed,
        "config_hash": exp.hash(),
        "version": __version__,
        "baseline_mean": _result(mean_scores),
        "baseline_max": _result(max_scores),
        "recurrent": _result(recurrent_scores),
    }
    report_dir = Path(exp.paths.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    path = report_dir / f"baselines_s{exp.scenario}_seed{exp.seed}.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if log is not None:
        log(f"baselines: mean {report['baseline_mean']['auc']:.3f} "
            f"max {report['baseline_max']['auc']:.3f} recurrent "
            f"{report['recurrent']['auc']:.3f}")
    return report


def _upsample_map(values: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    tensor = torch.from_numpy(values.astype(np.float32))[None, None]
    up = torch.nn.functional.interpolate(tensor, size=size, mode="bilinear",
                                         align_corners=False)
    return up[0, 0].numpy()


def export_attention(exp: ExperimentConfig, study_ids: list[str] | None,
                     output_dir: str | Path, log=None) -> list[Path]:
    """Overlay images for every annotated slab of the given studies.

    Each image shows the grayscale center slice, the upsampled attention
    heat map, and the ground-truth lesion contour side by side. A slab
    whose attention map is all zero is rendered without the heat layer and
    flagged with a ``_noattn`` filename suffix.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    exp.validate()
    stage1_path = stage1_checkpoint_path(exp)
    if not stage1_path.exists():
        raise DataError(f"stage-1 checkpoint {stage1_path} not found; run "
                        "train-stage1 first")
    model, _, _ = load_encoder(stage1_path)
    manifest = CorpusManifest.load(Path(exp.paths.corpus_dir) / MANIFEST_NAME)
    if study_ids is None:
        study_ids = [r.study_id for r in manifest.split_records("val")
                     if r.label and r.annotated_slices]
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    pp = exp.preprocess
    written: list[Path] = []
    for study_id in study_ids:
        try:
            record = manifest.record_for(study_id)
        except KeyError:
            warnings.warn(f"study {study_id!r} not in corpus, skipped",
                          RuntimeWarning)
            continue
        study = load_study(manifest, record)
        vol = preprocess.resample_thickness(study.volume,
                                            pp.target_thickness_mm)
        stack = preprocess.center_crop(preprocess.window_hu(vol.values),
                                       pp.crop_height, pp.crop_width)
        src_mm = study.volume.slice_thickness_mm
        for z in record.annotated_slices:
            z_r = int(round(z * src_mm / pp.target_thickness_mm))
            z_r = min(max(z_r, 0), stack.shape[0] - 1)
            slab = preprocess.extract_slab(stack, z_r, pp.slices_per_slab)
            amap = compute_attention(
                model, torch.from_numpy(slab.astype(np.float32)),
                class_index=1)
            mask = preprocess.center_crop(study.lesion_masks[z],
                                          pp.crop_height, pp.crop_width)
            center = slab[pp.slices_per_slab // 2]
            heat = _upsample_map(amap.values, center.shape)

            fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
            for ax in axes:
                ax.imshow(center, cmap="gray", vmin=0, vmax=255)
                ax.set_axis_off()
            axes[0].set_title("slab center")
            if amap.peak > 0:
                axes[1].imshow(heat, cmap="jet", alpha=0.5, vmin=0, vmax=1)
            axes[1].set_title("attention")
            if mask.any():
                axes[2].contour(mask, levels=[0.5], colors="lime",
                                linewidths=1.2)
            axes[2].set_title("annotation")
            suffix = "" if amap.peak > 0 else "_noattn"
            path = output_dir / f"{study_id}_z{z:03d}{suffix}.png"
            fig.tight_layout()
            fig.savefig(path, dpi=110)
            plt.close(fig)
            written.append(path)
    if log is not None:
        log(f"wrote {len(written)} attention overlays to {output_dir}")
    return written


def distracted_attention_comparison(corpus_config: CorpusConfig,
                                    encoder_config: EncoderConfig,
                                    loss_config: LossConfig,
                                    pp: PreprocessConfig,
                                    work_dir: str | Path,
                                    log=None) -> dict:
    """Train matched AT and no-AT encoders on one corpus and compare
    attention localization plus slab-level validation AUC."""
    work_dir = Path(work_dir)
    manifest = ensure_corpus(corpus_config, work_dir / "corpus", log=log)

    out = {}
    for tag, use_at in (("at", True), ("noat", False)):
        enc = dataclasses.replace(encoder_config, use_attention_loss=use_at)
        loss = dataclasses.replace(
            loss_config, lambda_attention=loss_config.lambda_attention
            if use_at else 0.0)
        path = work_dir / f"stage1_{tag}.pt"
        train_stage1(manifest, enc, loss, path, preprocess_config=pp,
                     log=log)
        model, _, _ = load_encoder(path)
        val_set = build_slab_dataset(manifest, "val", enc, pp)
        fractions = attention_inside_fractions(model, val_set)
        evaluation = validate_stage1(model, manifest, "val", pp)
        out[tag] = {
            "inside_fraction": float(fractions.mean()),
            "auc": evaluation.auc,
            "accuracy": evaluation.accuracy,
        }
        if log is not None:
            log(f"{tag}: inside {out[tag]['inside_fraction']:.3f} "
                f"val auc {evaluation.auc:.3f}")
    return out
