"""Stage-I slab encoder: an 18-layer residual CNN over 5-channel slabs.

The network follows the standard 18-layer residual stage plan with two
modifications: the input convolution takes 5 channels, and the stage
strides are arranged so the total stride is 16, leaving a feature grid of
input_size / 16 for the attention map. A width multiplier scales every
stage for desk-scale runs.
"""

from __future__ import annotations

import copy
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import preprocess
from .attention import compute_attention, training_attention
from .errors import ConfigError, DataError, TrainingDivergenceError
from .losses import LossConfig, attention_loss, categorical_cross_entropy
from .metrics import attention_localization, auc, roc_points
from .preprocess import PreprocessConfig
from .synthcorpus import CorpusManifest, load_study

_STAGE_WIDTHS = (64, 128, 256, 512)
_CHECKPOINT_FORMAT = "slabscan-encoder-v1"


@dataclass
class EncoderConfig:
    """Architecture and stage-I training parameters."""

    input_size: tuple[int, int] = (384, 384)
    in_channels: int = 5
    total_stride: int = 16
    width_multiplier: float = 1.0
    epochs: int = 100
    batch_size: int = 48
    learning_rate: float = 1e-4
    use_attention_loss: bool = True
    pixel_scale: float = 255.0
    seed: int = 0

    def validate(self) -> None:
        h, w = self.input_size
        if self.total_stride not in (8, 16, 32):
            raise ConfigError("total_stride must be one of 8, 16, 32")
        if h % self.total_stride or w % self.total_stride:
            raise ConfigError("input_size must be divisible by total_stride")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.pixel_scale <= 0:
            raise ConfigError("pixel_scale must be > 0")
        if round(_STAGE_WIDTHS[0] * self.width_multiplier) < 1:
            raise ConfigError("width_multiplier too small")

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(int(round(w * self.width_multiplier))
                     for w in _STAGE_WIDTHS)

    @property
    def feature_channels(self) -> int:
        return self.stage_widths[-1]

    @property
    def feature_size(self) -> tuple[int, int]:
        return (self.input_size[0] // self.total_stride,
                self.input_size[1] // self.total_stride)

    def arch_fingerprint(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "in_channels": self.in_channels,
            "total_stride": self.total_stride,
            "width_multiplier": self.width_multiplier,
            "pixel_scale": self.pixel_scale,
        }

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "in_channels": self.in_channels,
            "total_stride": self.total_stride,
            "width_multiplier": self.width_multiplier,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "use_attention_loss": self.use_attention_loss,
            "pixel_scale": self.pixel_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class TrainingHistory:
    """Per-epoch loss components plus the selected-epoch index."""

    train_ce: list[float] = field(default_factory=list)
    train_attention: list[float] = field(default_factory=list)
    val_ce: list[float] = field(default_factory=list)
    val_attention: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    selected_epoch: int = 0

    def record(self, train_ce: float, train_attention: float,
               val_ce: float, val_attention: float,
               val_accuracy: float) -> None:
        self.train_ce.append(float(train_ce))
        self.train_attention.append(float(train_attention))
        self.val_ce.append(float(val_ce))
        self.val_attention.append(float(val_attention))
        self.val_accuracy.append(float(val_accuracy))

    @property
    def epochs(self) -> int:
        return len(self.val_accuracy)

    def to_dict(self) -> dict:
        return {
            "train_ce": self.train_ce,
            "train_attention": self.train_attention,
            "val_ce": self.val_ce,
            "val_attention": self.val_attention,
            "val_accuracy": self.val_accuracy,
            "selected_epoch": self.selected_epoch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingHistory":
        return cls(**d)


class _BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1,
                               bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class SlabEncoder(nn.Module):
    """5-channel residual classifier exposing its last convolutional stage.

    ``forward_features`` returns the post-activation output of the final
    stage, ``head`` turns features into two-class logits, and ``forward``
    returns both. Inputs are raw slab intensities in [0, pixel_scale].
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.stage_widths
        # stem contributes stride 4; distribute the rest over stages 2..4
        extra = int(np.log2(config.total_stride // 4))
        stage_strides = [1] + [2] * extra + [1] * (3 - extra)
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, widths[0], 7, stride=2, padding=3,
                      bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1))
        stages = []
        in_ch = widths[0]
        for width, stride in zip(widths, stage_strides):
            stages.append(nn.Sequential(_BasicBlock(in_ch, width, stride),
                                        _BasicBlock(width, width, 1)))
            in_ch = width
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(widths[-1], 2)

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (N, {self.config.in_channels}, H, W)"
                             f" input, got {tuple(x.shape)}")
        if tuple(x.shape[2:]) != tuple(self.config.input_size):
            raise ValueError(f"expected spatial size {self.config.input_size},"
                             f" got {tuple(x.shape[2:])}")
        out = self.stem(x / self.config.pixel_scale)
        for stage in self.stages:
            out = stage(out)
        return out

    def head(self, features: torch.Tensor) -> torch.Tensor:
        pooled = features.mean(dim=(-2, -1))
        return self.fc(pooled)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        features = self.forward_features(x)
        return self.head(features), features


def encoder_forward(model: SlabEncoder, slab_batch: torch.Tensor
                    ) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch forward pass: (pre-softmax scores (N, 2), features (N, K, u, v))."""
    return model(slab_batch)


def config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _checkpoint_payload(encoder_config: EncoderConfig,
                        loss_config: LossConfig,
                        context: dict | None) -> dict:
    return {
        "encoder": encoder_config.to_dict(),
        "loss": loss_config.to_dict(),
        "context": context or {},
    }


def save_encoder(path: str | Path, model: SlabEncoder,
                 loss_config: LossConfig,
                 history: TrainingHistory | None = None,
                 context: dict | None = None) -> str:
    """Persist weights plus configuration; returns the config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _checkpoint_payload(model.config, loss_config, context)
    digest = config_hash(payload)
    torch.save({
        "format": _CHECKPOINT_FORMAT,
        "config_hash": digest,
        "payload": payload,
        "state_dict": model.state_dict(),
        "history": (history or TrainingHistory()).to_dict(),
    }, path)
    return digest


def _read_checkpoint(path: Path) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # unreadable, truncated, or not a pickle
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    return blob


def load_encoder(path: str | Path, expect: EncoderConfig | None = None
                 ) -> tuple[SlabEncoder, LossConfig, TrainingHistory]:
    """Load a stage-I checkpoint; refuses architecture mismatches."""
    path = Path(path)
    blob = _read_checkpoint(path)
    if not isinstance(blob, dict) or blob.get("format") != _CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a stage-I checkpoint")
    stored = EncoderConfig.from_dict(blob["payload"]["encoder"])
    if expect is not None and \
            expect.arch_fingerprint() != stored.arch_fingerprint():
        raise ConfigError(f"{path}: checkpoint architecture "
                          f"{stored.arch_fingerprint()} does not match "
                          f"requested {expect.arch_fingerprint()}")
    model = SlabEncoder(stored)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    loss_config = LossConfig.from_dict(blob["payload"]["loss"])
    history = TrainingHistory.from_dict(blob["history"])
    return model, loss_config, history


def checkpoint_hash(path: str | Path) -> str:
    blob = _read_checkpoint(Path(path))
    if not isinstance(blob, dict) or "config_hash" not in blob:
        raise DataError(f"{path}: not a slabscan checkpoint")
    return blob["config_hash"]


def checkpoint_matches(path: str | Path, encoder_config: EncoderConfig,
                       loss_config: LossConfig,
                       context: dict | None = None) -> bool:
    """True when the stored hash equals the hash of the given configs."""
    try:
        stored = checkpoint_hash(path)
    except (DataError, OSError):
        return False
    return stored == config_hash(
        _checkpoint_payload(encoder_config, loss_config, context))


@dataclass
class SlabDataset:
    """Materialized slab tensors for one split."""

    slabs: torch.Tensor         # (N, C, H, W) float32, raw intensities
    labels: torch.Tensor        # (N,) long
    masks: torch.Tensor         # (N, u, v) float32, zero rows for negatives
    sources: list[tuple[str, int]]

    def __len__(self) -> int:
        return self.slabs.shape[0]


def _resampled_index(z: int, source_mm: float, target_mm: float) -> int:
    return int(round(z * source_mm / target_mm))


def build_slab_dataset(manifest: CorpusManifest, split: str,
                       encoder_config: EncoderConfig,
                       preprocess_config: PreprocessConfig | None = None,
                       rng: np.random.Generator | None = None,
                       study_ids: set[str] | None = None) -> SlabDataset:
    """Balanced stage-I slab set for one split.

    Positive slabs are centered on annotated slices; an equal number of
    negative slabs is drawn from the lung bands of negative studies. The
    draw is deterministic in (encoder seed, split) unless ``rng`` is given.
    """
    pp = preprocess_config or PreprocessConfig(
        crop_height=encoder_config.input_size[0],
        crop_width=encoder_config.input_size[1])
    if (pp.crop_height, pp.crop_width) != tuple(encoder_config.input_size):
        raise ConfigError("preprocess crop size must equal encoder "
                          "input_size")
    if rng is None:
        rng = np.random.default_rng(
            [encoder_config.seed, 0 if split == "train" else 1])

    records = manifest.split_records(split)
    if study_ids is not None:
        records = [r for r in records if r.study_id in study_ids]
    if not records:
        raise DataError(f"split {split!r} is empty")

    u, v = encoder_config.feature_size
    pos_slabs, pos_masks, pos_sources = [], [], []
    negative_candidates = []
    for record in records:
        study = load_study(manifest, record)
        vol = preprocess.resample_thickness(study.volume,
                                            pp.target_thickness_mm)
        band = preprocess.select_lung_band(vol, pp.band_variance_threshold)
        stack = preprocess.center_crop(preprocess.window_hu(vol.values),
                                       pp.crop_height, pp.crop_width)
        if record.label and record.annotated_slices:
            src_mm = study.volume.slice_thickness_mm
            for z in record.annotated_slices:
                z_r = _resampled_index(z, src_mm, pp.target_thickness_mm)
                z_r = min(max(z_r, 0), stack.shape[0] - 1)
                slab = preprocess.extract_slab(stack, z_r, pp.slices_per_slab)
                mask = preprocess.center_crop(study.lesion_masks[z],
                                              pp.crop_height, pp.crop_width)
                small = preprocess.downsample_mask(
                    mask, encoder_config.total_stride)
                if small.shape != (u, v):
                    raise DataError(f"mask downsamples to {small.shape}, "
                                    f"expected {(u, v)}")
                pos_slabs.append(slab)
                pos_masks.append(small.astype(np.float32))
                pos_sources.append((record.study_id, int(z)))
        elif not record.label:
            negative_candidates.append((record.study_id, stack, band))

    if not pos_slabs:
        raise DataError(f"split {split!r} has no annotated positive slabs")
    if not negative_candidates:
        raise DataError(f"split {split!r} has no negative studies")

    n_neg = len(pos_slabs)
    neg_slabs, neg_sources = [], []
    study_pick = rng.integers(0, len(negative_candidates), size=n_neg)
    for pick in study_pick:
        study_id, stack, band = negative_candidates[pick]
        z = int(rng.integers(band.start, band.end + 1))
        neg_slabs.append(preprocess.extract_slab(stack, z,
                                                 pp.slices_per_slab))
        neg_sources.append((study_id, z))

    slabs = np.stack(pos_slabs + neg_slabs).astype(np.float32)
    labels = np.array([1] * len(pos_slabs) + [0] * n_neg, dtype=np.int64)
    masks = np.zeros((len(labels), u, v), dtype=np.float32)
    masks[:len(pos_masks)] = np.stack(pos_masks)
    return SlabDataset(slabs=torch.from_numpy(slabs),
                       labels=torch.from_numpy(labels),
                       masks=torch.from_numpy(masks),
                       sources=pos_sources + neg_sources)


def _epoch_batches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _validate_epoch(model: SlabEncoder, dataset: SlabDataset,
                    loss_config: LossConfig, batch_size: int
                    ) -> tuple[float, float, float]:
    """Mean val CE, mean val attention loss, accuracy at argmax."""
    model.eval()
    ce_sum = att_sum = 0.0
    att_count = 0
    correct = 0
    n = len(dataset)
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        slabs = dataset.slabs[sl]
        labels = dataset.labels[sl]
        if loss_config.lambda_attention > 0:
            # detached mode yields identical map values without the
            # second-order graph, which validation never needs
            scores, _, maps = training_attention(
                model, slabs, class_index=1, mode="detached_weights")
            scores = scores.detach()
            att = attention_loss(maps.detach(), dataset.masks[sl],
                                 loss_config.smoothing_epsilon)
            att_sum += float(att.sum())
            att_count += len(labels)
        else:
            with torch.no_grad():
                scores, _ = model(slabs)
        if not torch.isfinite(scores).all():
            raise TrainingDivergenceError("non-finite stage-I scores "
                                          "during validation")
        probs = torch.softmax(scores.double(), dim=1)
        ce_sum += float(categorical_cross_entropy(probs, labels)) * len(labels)
        correct += int((scores.argmax(dim=1) == labels).sum())
    mean_att = att_sum / att_count if att_count else 0.0
    return ce_sum / n, mean_att, correct / n


def train_stage1(manifest: CorpusManifest, encoder_config: EncoderConfig,
                 loss_config: LossConfig, checkpoint_path: str | Path,
                 preprocess_config: PreprocessConfig | None = None,
                 redraw_negatives: bool = False,
                 study_ids: set[str] | None = None,
                 context: dict | None = None,
                 log=None) -> tuple[Path, TrainingHistory]:
    """Train the slab encoder; persists the best-validation-accuracy epoch."""
    encoder_config.validate()
    loss_config.validate()
    checkpoint_path = Path(checkpoint_path)
    torch.manual_seed(encoder_config.seed)

    train_rng = np.random.default_rng([encoder_config.seed, 0])
    train_set = build_slab_dataset(manifest, "train", encoder_config,
                                   preprocess_config, rng=train_rng,
                                   study_ids=study_ids)
    val_set = build_slab_dataset(manifest, "val", encoder_config,
                                 preprocess_config, study_ids=study_ids)

    model = SlabEncoder(encoder_config)
    optimizer = torch.optim.Adam(model.parameters(),
                                 lr=encoder_config.learning_rate)
    use_at = encoder_config.use_attention_loss and \
        loss_config.lambda_attention > 0
    history = TrainingHistory()
    best_accuracy = -1.0
    best_state = None

    for epoch in range(encoder_config.epochs):
        if redraw_negatives and epoch > 0:
            train_set = build_slab_dataset(manifest, "train", encoder_config,
                                           preprocess_config, rng=train_rng,
                                           study_ids=study_ids)
        model.train()
        gen = torch.Generator().manual_seed(encoder_config.seed * 100003
                                            + epoch)
        ce_sum = att_sum = 0.0
        seen = 0
        for batch in _epoch_batches(len(train_set),
                                    encoder_config.batch_size, gen):
            slabs = train_set.slabs[batch]
            labels = train_set.labels[batch]
            optimizer.zero_grad()
            if use_at:
                scores, _, maps = training_attention(
                    model, slabs, class_index=1,
                    mode=loss_config.attention_mode)
            else:
                scores, _ = model(slabs)
                maps = None
            if not torch.isfinite(scores).all():
                raise TrainingDivergenceError(
                    f"non-finite stage-I scores at epoch {epoch}")
            probs = torch.softmax(scores.double(), dim=1)
            ce = categorical_cross_entropy(probs, labels)
            if maps is not None:
                att = attention_loss(maps, train_set.masks[batch],
                                     loss_config.smoothing_epsilon).mean()
                loss = ce + loss_config.lambda_attention * att
            else:
                att = torch.zeros(())
                loss = ce
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite stage-I loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            ce_sum += ce.detach().item() * len(labels)
            att_sum += att.detach().item() * len(labels)
            seen += len(labels)

        val_ce, val_att, val_acc = _validate_epoch(
            model, val_set, loss_config if use_at else
            LossConfig(lambda_attention=0.0), encoder_config.batch_size)
        history.record(ce_sum / seen, att_sum / seen, val_ce, val_att,
                       val_acc)
        if val_acc > best_accuracy:
            best_accuracy = val_acc
            best_state = copy.deepcopy(model.state_dict())
            history.selected_epoch = epoch
        if log is not None:
            log(f"stage1 epoch {epoch + 1}/{encoder_config.epochs} "
                f"ce {ce_sum / seen:.4f} att {att_sum / seen:.4f} "
                f"val_acc {val_acc:.3f}")

    model.load_state_dict(best_state)
    _warn_if_loss_increased(history)
    save_encoder(checkpoint_path, model, loss_config, history,
                 context=context)
    return checkpoint_path, history


def _warn_if_loss_increased(history: TrainingHistory,
                            window: int = 5) -> None:
    total = np.array(history.train_ce) + np.array(history.train_attention)
    half = len(total) // 2
    if half < 2 * window:
        return
    kernel = np.ones(window) / window
    smoothed = np.convolve(total[:half], kernel, mode="valid")
    tolerance = max(1e-3, 0.01 * float(np.abs(smoothed).max()))
    if np.any(np.diff(smoothed) > tolerance):
        warnings.warn("smoothed training loss increased during the first "
                      "half of the run; check learning rate and data",
                      RuntimeWarning)


@dataclass
class Stage1Eval:
    """Slab-level validation result."""

    accuracy: float
    roc_points: list[tuple[float, float]]
    auc: float
    scores: np.ndarray
    labels: np.ndarray


def stage1_slab_scores(model: SlabEncoder, slabs: torch.Tensor,
                       batch_size: int = 64) -> np.ndarray:
    """Positive-class softmax probability per slab."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, slabs.shape[0], batch_size):
            scores, _ = model(slabs[start:start + batch_size])
            out.append(torch.softmax(scores, dim=1)[:, 1].numpy())
    return np.concatenate(out) if out else np.zeros(0)


def validate_stage1(checkpoint: str | Path | SlabEncoder,
                    manifest: CorpusManifest, split: str = "val",
                    preprocess_config: PreprocessConfig | None = None,
                    study_ids: set[str] | None = None) -> Stage1Eval:
    """Slab-level accuracy (argmax) and ROC on one split."""
    if isinstance(checkpoint, SlabEncoder):
        model = checkpoint
    else:
        model, _, _ = load_encoder(checkpoint)
    dataset = build_slab_dataset(manifest, split, model.config,
                                 preprocess_config, study_ids=study_ids)
    scores = stage1_slab_scores(model, dataset.slabs)
    labels = dataset.labels.numpy()
    accuracy = float(((scores >= 0.5).astype(int) == labels).mean())
    return Stage1Eval(accuracy=accuracy, roc_points=roc_points(scores, labels),
                      auc=auc(scores, labels), scores=scores, labels=labels)


def attention_inside_fractions(model: SlabEncoder, dataset: SlabDataset,
                               batch_size: int = 32) -> np.ndarray:
    """Per-slab share of attention mass inside the mask, positive slabs only."""
    model.eval()
    keep = [i for i in range(len(dataset))
            if float(dataset.masks[i].sum()) > 0]
    fractions = []
    for start in range(0, len(keep), batch_size):
        idx = keep[start:start + batch_size]
        slabs = dataset.slabs[idx]
        maps = compute_attention(model, slabs, class_index=1)
        for j, amap in zip(idx, maps):
            inside, _ = attention_localization(
                amap.values, dataset.masks[j].numpy() > 0)
            fractions.append(inside)
    return np.array(fractions)
