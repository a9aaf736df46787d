"""Stage-II aggregator: bidirectional convolutional-recurrent units over
the frozen encoder's per-slab feature sequence, ending in one study-level
probability.

Each unit runs one ascending and one descending convolutional LSTM over
the sequence, merges the two directions (channel concatenation by default,
sum optionally), batch-normalizes the merged maps, and max-pools 2x2. Two
units halve the feature grid twice; the frames are then averaged along z,
flattened, passed through dropout and a single sigmoid output.
"""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import container
from .encoder import SlabEncoder, TrainingHistory, config_hash
from .errors import ConfigError, DataError, TrainingDivergenceError
from .losses import binary_cross_entropy
from .preprocess import SlabSequence
from .synthcorpus import CorpusManifest

_CHECKPOINT_FORMAT = "slabscan-aggregator-v1"
_INDEX_NAME = "index.json"
_INDEX_FORMAT = "slabscan-features-v1"

MERGE_MODES = ("concat", "sum")
Z_AVERAGE_MODES = ("time", "time_space")


@dataclass
class AggregatorConfig:
    """Architecture and stage-II training parameters."""

    units: int = 2
    filters: int = 96
    kernel_size: int = 3
    pool_size: int = 2
    pool_stride: int = 2
    recurrent_dropout: float = 0.2
    head_dropout: float = 0.5
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-4
    merge_mode: str = "concat"
    z_average: str = "time"
    seed: int = 0

    def validate(self) -> None:
        for name in ("units", "filters", "kernel_size", "pool_size",
                     "pool_stride", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        for name in ("recurrent_dropout", "head_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.merge_mode not in MERGE_MODES:
            raise ConfigError(f"merge_mode must be one of {MERGE_MODES}")
        if self.z_average not in Z_AVERAGE_MODES:
            raise ConfigError(f"z_average must be one of {Z_AVERAGE_MODES}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "units", "filters", "kernel_size", "pool_size", "pool_stride",
            "recurrent_dropout", "head_dropout", "epochs", "batch_size",
            "learning_rate", "merge_mode", "z_average", "seed")}

    @classmethod
    def from_dict(cls, d: dict) -> "AggregatorConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class FeatureSequence:
    """Frozen encoder features for one study, slabs in ascending z."""

    values: torch.Tensor  # (T, K, u, v) float32
    study_id: str
    label: int

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError("feature values must be (T, K, u, v)")

    @property
    def length(self) -> int:
        return self.values.shape[0]


def encode_study(frozen_encoder: SlabEncoder,
                 slab_sequence: SlabSequence | torch.Tensor,
                 study_id: str = "", label: int = 0,
                 batch_size: int = 16) -> FeatureSequence:
    """Per-slab features, stacked in z order; no gradients reach the encoder."""
    if isinstance(slab_sequence, SlabSequence):
        if len(slab_sequence) == 0:
            raise DataError("empty slab sequence")
        tensor = torch.from_numpy(
            slab_sequence.pixel_stack().astype(np.float32))
        label = slab_sequence.label
        if not study_id:
            study_id = slab_sequence.slabs[0].source[0]
    else:
        tensor = slab_sequence
    frozen_encoder.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, tensor.shape[0], batch_size):
            chunks.append(frozen_encoder.forward_features(
                tensor[start:start + batch_size]))
    return FeatureSequence(values=torch.cat(chunks), study_id=study_id,
                           label=int(label))


class FeatureStore:
    """One binary container file per study plus a JSON index."""

    def __init__(self, root: str | Path, index: dict):
        self.root = Path(root)
        self.index = index

    @classmethod
    def create(cls, root: str | Path, encoder_hash: str = "",
               force: bool = False) -> "FeatureStore":
        root = Path(root)
        index_path = root / _INDEX_NAME
        if index_path.exists() and not force:
            raise DataError(f"{index_path} already exists (use force to "
                            "rebuild)")
        root.mkdir(parents=True, exist_ok=True)
        index = {"format": _INDEX_FORMAT, "encoder_hash": encoder_hash,
                 "entries": {}}
        store = cls(root, index)
        store._save_index()
        return store

    @classmethod
    def open(cls, root: str | Path) -> "FeatureStore":
        root = Path(root)
        try:
            index = json.loads((root / _INDEX_NAME).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read feature index under {root}: {exc}"
                            ) from exc
        if index.get("format") != _INDEX_FORMAT:
            raise DataError(f"{root}: not a feature store")
        return cls(root, index)

    def _save_index(self) -> None:
        (self.root / _INDEX_NAME).write_text(
            json.dumps(self.index, indent=2, sort_keys=True) + "\n")

    @property
    def encoder_hash(self) -> str:
        return self.index.get("encoder_hash", "")

    def ids(self) -> list[str]:
        return sorted(self.index["entries"])

    def __contains__(self, study_id: str) -> bool:
        return study_id in self.index["entries"]

    def add(self, sequence: FeatureSequence) -> None:
        filename = f"{sequence.study_id}.aftr"
        container.write_tensor(self.root / filename,
                               container.MAGIC_FEATURES,
                               sequence.values.numpy().astype(np.float32))
        self.index["entries"][sequence.study_id] = {
            "file": filename,
            "label": int(sequence.label),
            "length": int(sequence.length),
        }
        self._save_index()

    def get(self, study_id: str) -> FeatureSequence:
        if study_id not in self:
            raise DataError(f"feature store has no study {study_id!r}")
        entry = self.index["entries"][study_id]
        values, _ = container.read_tensor(self.root / entry["file"],
                                          container.MAGIC_FEATURES)
        return FeatureSequence(values=torch.from_numpy(values),
                               study_id=study_id, label=entry["label"])


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM cell: gates are 2D convolutions over the
    concatenated input and hidden state; tanh cell update, sigmoid gates,
    no peephole connections."""

    def __init__(self, in_channels: int, hidden_channels: int,
                 kernel_size: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.conv = nn.Conv2d(in_channels + hidden_channels,
                              4 * hidden_channels, kernel_size,
                              padding=kernel_size // 2)
        with torch.no_grad():
            self.conv.bias[hidden_channels:2 * hidden_channels].fill_(1.0)

    def forward(self, x: torch.Tensor,
                state: tuple[torch.Tensor, torch.Tensor]
                ) -> tuple[torch.Tensor, torch.Tensor]:
        h, c = state
        gates = self.conv(torch.cat([x, h], dim=1))
        i, f, g, o = gates.chunk(4, dim=1)
        i, f, o = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o)
        c = f * c + i * torch.tanh(g)
        h = o * torch.tanh(c)
        return h, c


def _channel_mask(batch: int, channels: int, p: float, training: bool,
                  device, dtype) -> torch.Tensor | None:
    """Inverted channel-wise dropout mask, sampled once per forward pass."""
    if not training or p <= 0.0:
        return None
    keep = torch.bernoulli(
        torch.full((batch, channels, 1, 1), 1.0 - p, device=device,
                   dtype=dtype))
    return keep / (1.0 - p)


class _BidirectionalUnit(nn.Module):
    def __init__(self, in_channels: int, config: AggregatorConfig):
        super().__init__()
        self.in_channels = in_channels
        self.config = config
        self.forward_cell = ConvLSTMCell(in_channels, config.filters,
                                         config.kernel_size)
        self.backward_cell = ConvLSTMCell(in_channels, config.filters,
                                          config.kernel_size)
        self.out_channels = (2 * config.filters
                             if config.merge_mode == "concat"
                             else config.filters)
        self.norm = nn.BatchNorm2d(self.out_channels)
        self.pool = nn.MaxPool2d(config.pool_size, config.pool_stride)

    def _run(self, cell: ConvLSTMCell, x: torch.Tensor,
             reverse: bool) -> torch.Tensor:
        n, t, _, hh, ww = x.shape
        p = self.config.recurrent_dropout
        in_mask = _channel_mask(n, cell.in_channels, p, self.training,
                                x.device, x.dtype)
        state_mask = _channel_mask(n, cell.hidden_channels, p, self.training,
                                   x.device, x.dtype)
        h = x.new_zeros(n, cell.hidden_channels, hh, ww)
        c = x.new_zeros(n, cell.hidden_channels, hh, ww)
        outputs: list[torch.Tensor | None] = [None] * t
        steps = range(t - 1, -1, -1) if reverse else range(t)
        for step in steps:
            xt = x[:, step]
            if in_mask is not None:
                xt = xt * in_mask
            h_in = h if state_mask is None else h * state_mask
            h, c = cell(xt, (h_in, c))
            outputs[step] = h
        return torch.stack(outputs, dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, t, c, hh, ww = x.shape
        if hh % self.config.pool_stride or ww % self.config.pool_stride:
            raise ConfigError(f"spatial size {hh}x{ww} not divisible by the "
                              f"{self.config.pool_size}x{self.config.pool_size}"
                              " pool")
        fwd = self._run(self.forward_cell, x, reverse=False)
        bwd = self._run(self.backward_cell, x, reverse=True)
        if self.config.merge_mode == "concat":
            merged = torch.cat([fwd, bwd], dim=2)
        else:
            merged = fwd + bwd
        cm = merged.shape[2]
        normed = self.norm(merged.reshape(n * t, cm, hh, ww))
        pooled = self.pool(normed)
        return pooled.reshape(n, t, cm, pooled.shape[-2], pooled.shape[-1])


class AggregatorNet(nn.Module):
    """Stacked bidirectional units, z-average, dropout, sigmoid head."""

    def __init__(self, config: AggregatorConfig, in_channels: int,
                 spatial: tuple[int, int]):
        super().__init__()
        config.validate()
        self.config = config
        self.in_channels = in_channels
        self.spatial = tuple(spatial)
        units = []
        channels = in_channels
        side_h, side_w = self.spatial
        for _ in range(config.units):
            unit = _BidirectionalUnit(channels, config)
            units.append(unit)
            channels = unit.out_channels
            if side_h % config.pool_stride or side_w % config.pool_stride:
                raise ConfigError(
                    f"feature grid {self.spatial} cannot survive "
                    f"{config.units} pool steps")
            side_h //= config.pool_stride
            side_w //= config.pool_stride
        self.units = nn.ModuleList(units)
        self.head_dropout = nn.Dropout(config.head_dropout)
        if config.z_average == "time":
            head_in = channels * side_h * side_w
        else:
            head_in = channels
        self.head = nn.Linear(head_in, 1)

    def forward(self, x: torch.Tensor,
                lengths: torch.Tensor | None = None) -> torch.Tensor:
        if x.ndim != 5:
            raise ValueError("expected (N, T, K, u, v) input")
        if x.shape[2] != self.in_channels or \
                tuple(x.shape[3:]) != self.spatial:
            raise ValueError(f"expected feature geometry "
                             f"{(self.in_channels, *self.spatial)}, got "
                             f"{tuple(x.shape[2:])}")
        for unit in self.units:
            x = unit(x)
        if lengths is None:
            z_mean = x.mean(dim=1)
        else:
            valid = (torch.arange(x.shape[1], device=x.device)[None, :]
                     < lengths[:, None])
            mask = valid[:, :, None, None, None].to(x.dtype)
            z_mean = (x * mask).sum(dim=1) / \
                lengths[:, None, None, None].to(x.dtype).clamp_min(1)
        if self.config.z_average == "time":
            flat = z_mean.flatten(1)
        else:
            flat = z_mean.mean(dim=(-2, -1))
        logit = self.head(self.head_dropout(flat))
        return torch.sigmoid(logit).squeeze(-1)


def aggregator_forward(model: AggregatorNet, feature_batch: torch.Tensor,
                       lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Study-level probabilities in (0, 1) for a batch of sequences."""
    return model(feature_batch, lengths)


def baseline_aggregate(slab_scores, mode: str) -> float:
    """Mean or max assembly of per-slab probabilities into one study score."""
    scores = np.asarray(slab_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score sequence")
    if scores.min() < 0 or scores.max() > 1:
        raise ValueError("slab scores must lie in [0, 1]")
    if mode == "mean":
        return float(scores.mean())
    if mode == "max":
        return float(scores.max())
    raise ValueError(f"unknown baseline mode {mode!r}")


def save_aggregator(path: str | Path, model: AggregatorNet,
                    history: TrainingHistory,
                    context: dict | None = None) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "aggregator": model.config.to_dict(),
        "in_channels": model.in_channels,
        "spatial": list(model.spatial),
        "context": context or {},
    }
    digest = config_hash(payload)
    torch.save({
        "format": _CHECKPOINT_FORMAT,
        "config_hash": digest,
        "payload": payload,
        "state_dict": model.state_dict(),
        "history": history.to_dict(),
    }, path)
    return digest


def load_aggregator(path: str | Path) -> tuple[AggregatorNet, TrainingHistory]:
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != _CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a stage-II checkpoint")
    config = AggregatorConfig.from_dict(blob["payload"]["aggregator"])
    model = AggregatorNet(config, blob["payload"]["in_channels"],
                          tuple(blob["payload"]["spatial"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, TrainingHistory.from_dict(blob["history"])


def _gather_sequences(store: FeatureStore, manifest: CorpusManifest,
                      split: str, study_ids: set[str] | None
                      ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor,
                                 list[str]]:
    """Stack one split's sequences, right-padding unequal lengths."""
    records = manifest.split_records(split)
    if study_ids is not None:
        records = [r for r in records if r.study_id in study_ids]
    if not records:
        raise DataError(f"split {split!r} is empty")
    sequences = []
    for record in records:
        if record.study_id not in store:
            raise DataError(f"feature store is missing study "
                            f"{record.study_id!r}")
        sequences.append(store.get(record.study_id))
    max_t = max(s.length for s in sequences)
    first = sequences[0].values
    batch = first.new_zeros(len(sequences), max_t, *first.shape[1:])
    lengths = torch.zeros(len(sequences), dtype=torch.long)
    labels = torch.zeros(len(sequences), dtype=torch.float32)
    for i, seq in enumerate(sequences):
        batch[i, :seq.length] = seq.values
        lengths[i] = seq.length
        labels[i] = seq.label
    return batch, lengths, labels, [r.study_id for r in records]


def train_stage2(store: FeatureStore, manifest: CorpusManifest,
                 config: AggregatorConfig, checkpoint_path: str | Path,
                 study_ids: set[str] | None = None,
                 context: dict | None = None,
                 log=None) -> tuple[Path, TrainingHistory]:
    """Train the aggregator on stored features; persists the best epoch."""
    config.validate()
    checkpoint_path = Path(checkpoint_path)
    torch.manual_seed(config.seed)

    train_x, train_len, train_y, _ = _gather_sequences(
        store, manifest, "train", study_ids)
    val_x, val_len, val_y, _ = _gather_sequences(store, manifest, "val", None)
    if len(torch.unique(train_y)) < 2:
        warnings.warn("stage-II training labels are single-class; the model "
                      "will collapse toward the prior", RuntimeWarning)

    model = AggregatorNet(config, train_x.shape[2],
                          (train_x.shape[3], train_x.shape[4]))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = TrainingHistory()
    best_accuracy = -1.0
    best_state = None

    equal_lengths = bool((train_len == train_len[0]).all())
    for epoch in range(config.epochs):
        model.train()
        gen = torch.Generator().manual_seed(config.seed * 100003 + epoch)
        order = torch.randperm(len(train_y), generator=gen)
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            optimizer.zero_grad()
            probs = model(train_x[idx],
                          None if equal_lengths else train_len[idx])
            loss = binary_cross_entropy(probs, train_y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite stage-II loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            loss_sum += loss.detach().item() * len(idx)

        model.eval()
        with torch.no_grad():
            val_probs = model(val_x, None if equal_lengths else val_len)
            val_loss = float(binary_cross_entropy(val_probs, val_y))
            val_acc = float(((val_probs >= 0.5).float() == val_y)
                            .float().mean())
        history.record(loss_sum / len(train_y), 0.0, val_loss, 0.0, val_acc)
        if val_acc > best_accuracy:
            best_accuracy = val_acc
            best_state = copy.deepcopy(model.state_dict())
            history.selected_epoch = epoch
        if log is not None:
            log(f"stage2 epoch {epoch + 1}/{config.epochs} "
                f"bce {loss_sum / len(train_y):.4f} val_acc {val_acc:.3f}")

    model.load_state_dict(best_state)
    save_aggregator(checkpoint_path, model, history, context=context)
    return checkpoint_path, history


def predict_studies(model: AggregatorNet, store: FeatureStore,
                    study_ids: list[str]) -> np.ndarray:
    """Probability per study, deterministic (dropout off)."""
    model.eval()
    out = []
    with torch.no_grad():
        for study_id in study_ids:
            seq = store.get(study_id)
            out.append(float(model(seq.values.unsqueeze(0))))
    return np.array(out)


def _swap_halves(tensor: torch.Tensor, dim: int = 0) -> torch.Tensor:
    half = tensor.shape[dim] // 2
    first, second = tensor.narrow(dim, 0, half), tensor.narrow(dim, half, half)
    return torch.cat([second, first], dim=dim)


def mirror_aggregator(model: AggregatorNet) -> AggregatorNet:
    """Direction-swapped copy: feeding it a z-reversed sequence reproduces
    the original model's output exactly.

    Swaps each unit's forward and backward cells; under concat merge it
    also swaps the two channel halves of each batch norm, the input-channel
    halves of every later unit's gate convolutions, and the channel blocks
    of the head weights.
    """
    mirrored = copy.deepcopy(model)
    concat = model.config.merge_mode == "concat"
    for i, unit in enumerate(mirrored.units):
        unit.forward_cell, unit.backward_cell = \
            unit.backward_cell, unit.forward_cell
        if not concat:
            continue
        with torch.no_grad():
            for name in ("weight", "bias", "running_mean", "running_var"):
                tensor = getattr(unit.norm, name)
                tensor.copy_(_swap_halves(tensor))
            if i > 0:
                for cell in (unit.forward_cell, unit.backward_cell):
                    w = cell.conv.weight
                    w[:, :unit.in_channels].copy_(
                        _swap_halves(w[:, :unit.in_channels], dim=1))
    if concat:
        with torch.no_grad():
            w = mirrored.head.weight
            if model.config.z_average == "time":
                channels = mirrored.units[-1].out_channels
                side = w.shape[1] // channels
                blocks = w.reshape(w.shape[0], channels, side)
                blocks.copy_(_swap_halves(blocks, dim=1))
            else:
                w.copy_(_swap_halves(w, dim=1))
    return mirrored
