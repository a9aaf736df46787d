"""Tests for the stage-II recurrent aggregator and feature store."""

import numpy as np
import pytest
import torch

from conftest import make_manifest, tiny_aggregator_config, \
    tiny_encoder_config, tiny_preprocess_config
from slabscan.aggregator import AggregatorConfig, AggregatorNet, ConvLSTMCell, \
    FeatureSequence, FeatureStore, baseline_aggregate, encode_study, \
    load_aggregator, mirror_aggregator, predict_studies, save_aggregator, \
    train_stage2
from slabscan.encoder import SlabEncoder, TrainingHistory
from slabscan.errors import ConfigError, DataError, TrainingDivergenceError
from slabscan.preprocess import preprocess_study
from slabscan.synthcorpus import load_study


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


_manifest = make_manifest


def _feature_values(label, rng, t=4, k=8, side=8):
    """Random features with a strong class signal in channel 0."""
    values = rng.normal(0.0, 1.0, size=(t, k, side, side))
    values[:, 0] += 3.0 * label
    return torch.from_numpy(values.astype(np.float32))


def _filled_store(path, manifest, rng, t=4, k=8, side=8, skip=()):
    store = FeatureStore.create(path, encoder_hash="abc123")
    for record in manifest.records:
        if record.study_id in skip:
            continue
        store.add(FeatureSequence(
            values=_feature_values(record.label, rng, t=t, k=k, side=side),
            study_id=record.study_id, label=record.label))
    return store


# ---------------------------------------------------------------- config

def test_config_defaults():
    cfg = AggregatorConfig()
    assert cfg.units == 2
    assert cfg.filters == 96
    assert cfg.kernel_size == 3
    assert (cfg.pool_size, cfg.pool_stride) == (2, 2)
    assert cfg.recurrent_dropout == 0.2
    assert cfg.head_dropout == 0.5
    assert cfg.merge_mode == "concat"
    cfg.validate()


def test_config_round_trip():
    cfg = tiny_aggregator_config(merge_mode="sum", z_average="time_space")
    assert AggregatorConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("field,value", [
    ("units", 0), ("filters", 0), ("kernel_size", 4), ("pool_size", 0),
    ("recurrent_dropout", 1.0), ("head_dropout", -0.1),
    ("learning_rate", 0.0), ("merge_mode", "stack"), ("z_average", "space"),
])
def test_config_validation(field, value):
    cfg = tiny_aggregator_config(**{field: value})
    with pytest.raises(ConfigError):
        cfg.validate()


# ---------------------------------------------------------- ConvLSTM cell

def test_convlstm_cell_matches_scalar_oracle():
    """One cell step against explicit gate arithmetic, 1x1 kernel."""
    torch.manual_seed(7)
    in_ch, hid, side = 2, 3, 2
    cell = ConvLSTMCell(in_ch, hid, kernel_size=1).double()
    x = torch.randn(1, in_ch, side, side, dtype=torch.float64)
    h0 = torch.randn(1, hid, side, side, dtype=torch.float64)
    c0 = torch.randn(1, hid, side, side, dtype=torch.float64)

    with torch.no_grad():
        h1, c1 = cell(x, (h0, c0))

    weight = cell.conv.weight.detach().numpy()[:, :, 0, 0]
    bias = cell.conv.bias.detach().numpy()
    xin = np.concatenate([x.numpy()[0], h0.numpy()[0]], axis=0)
    expected_h = np.zeros((hid, side, side))
    expected_c = np.zeros((hid, side, side))
    for r in range(side):
        for col in range(side):
            gates = weight @ xin[:, r, col] + bias
            for j in range(hid):
                i_g = _sigmoid(gates[j])
                f_g = _sigmoid(gates[hid + j])
                g_g = np.tanh(gates[2 * hid + j])
                o_g = _sigmoid(gates[3 * hid + j])
                c_new = f_g * c0.numpy()[0, j, r, col] + i_g * g_g
                expected_c[j, r, col] = c_new
                expected_h[j, r, col] = o_g * np.tanh(c_new)

    np.testing.assert_allclose(h1.numpy()[0], expected_h, atol=1e-12)
    np.testing.assert_allclose(c1.numpy()[0], expected_c, atol=1e-12)


def test_convlstm_forget_bias_starts_open():
    cell = ConvLSTMCell(4, 6, kernel_size=3)
    bias = cell.conv.bias.detach()
    assert torch.all(bias[6:12] == 1.0)


# ----------------------------------------------------------- net geometry

def test_geometry_two_units_concat():
    cfg = tiny_aggregator_config(filters=4)
    model = AggregatorNet(cfg, in_channels=8, spatial=(8, 8))
    assert model.units[0].out_channels == 8
    assert model.units[1].out_channels == 8
    assert model.head.in_features == 8 * 2 * 2
    model.eval()
    out = model(torch.randn(2, 3, 8, 8, 8))
    assert out.shape == (2,)
    assert torch.all((out > 0) & (out < 1))


def test_geometry_sum_merge():
    cfg = tiny_aggregator_config(filters=4, merge_mode="sum")
    model = AggregatorNet(cfg, in_channels=8, spatial=(8, 8))
    assert model.units[0].out_channels == 4
    assert model.head.in_features == 4 * 2 * 2


def test_geometry_time_space_head():
    cfg = tiny_aggregator_config(filters=4, z_average="time_space")
    model = AggregatorNet(cfg, in_channels=8, spatial=(8, 8))
    assert model.head.in_features == 8


def test_geometry_full_scale_head():
    model = AggregatorNet(AggregatorConfig(), in_channels=512,
                          spatial=(24, 24))
    assert model.units[0].out_channels == 192
    assert model.head.in_features == 192 * 6 * 6


def test_geometry_indivisible_grid_rejected():
    with pytest.raises(ConfigError):
        AggregatorNet(tiny_aggregator_config(), in_channels=8, spatial=(6, 6))


def test_forward_rejects_wrong_shapes():
    model = AggregatorNet(tiny_aggregator_config(filters=4), in_channels=8,
                          spatial=(8, 8))
    model.eval()
    with pytest.raises(ValueError):
        model(torch.randn(2, 8, 8, 8))
    with pytest.raises(ValueError):
        model(torch.randn(2, 3, 5, 8, 8))
    with pytest.raises(ValueError):
        model(torch.randn(2, 3, 8, 4, 4))


# ----------------------------------------------------- forward behaviour

def test_eval_forward_deterministic_train_forward_not():
    model = AggregatorNet(tiny_aggregator_config(filters=4), in_channels=8,
                          spatial=(8, 8))
    x = torch.randn(2, 4, 8, 8, 8)
    model.eval()
    with torch.no_grad():
        first, second = model(x), model(x)
    assert torch.equal(first, second)
    model.train()
    with torch.no_grad():
        a = model(x)
        b = model(x)
    assert not torch.equal(a, b)


@pytest.mark.parametrize("merge_mode,z_average", [
    ("concat", "time"), ("concat", "time_space"), ("sum", "time"),
])
def test_mirror_aggregator_reproduces_reversed(merge_mode, z_average):
    """Swapping directions and flipping z leaves the output unchanged."""
    torch.manual_seed(21)
    cfg = tiny_aggregator_config(filters=4, merge_mode=merge_mode,
                                 z_average=z_average)
    model = AggregatorNet(cfg, in_channels=6, spatial=(8, 8))
    model.train()
    with torch.no_grad():
        for _ in range(3):  # move batch-norm stats off their defaults
            model(torch.randn(4, 5, 6, 8, 8))
    model.eval()
    mirrored = mirror_aggregator(model)
    mirrored.eval()

    x = torch.randn(2, 5, 6, 8, 8)
    with torch.no_grad():
        direct = model(x)
        flipped = mirrored(torch.flip(x, dims=[1]))
    np.testing.assert_allclose(direct.numpy(), flipped.numpy(), atol=1e-6)


def test_aggregator_is_order_sensitive():
    torch.manual_seed(5)
    model = AggregatorNet(tiny_aggregator_config(filters=4), in_channels=8,
                          spatial=(8, 8))
    model.train()
    with torch.no_grad():
        for _ in range(3):
            model(torch.randn(4, 6, 8, 8, 8))
    model.eval()
    x = torch.randn(1, 6, 8, 8, 8)
    permuted = x[:, torch.tensor([3, 1, 5, 0, 4, 2])]
    with torch.no_grad():
        delta = abs(float(model(x)) - float(model(permuted)))
    assert delta > 1e-6


# ----------------------------------------------------------- baselines

def test_baseline_aggregate_examples():
    assert baseline_aggregate([0.2, 0.4], "mean") == pytest.approx(0.3)
    assert baseline_aggregate([0.2, 0.4], "max") == pytest.approx(0.4)
    assert baseline_aggregate([0.0, 0.0, 0.0], "max") == 0.0
    assert baseline_aggregate([1.0], "mean") == 1.0


def test_baseline_aggregate_order_invariant(rng):
    scores = rng.uniform(0, 1, size=37)
    shuffled = rng.permutation(scores)
    assert baseline_aggregate(scores, "max") == \
        baseline_aggregate(shuffled, "max")
    assert baseline_aggregate(scores, "mean") == \
        pytest.approx(baseline_aggregate(shuffled, "mean"), rel=1e-12)


def test_baseline_aggregate_rejects_bad_input():
    with pytest.raises(ValueError):
        baseline_aggregate([], "mean")
    with pytest.raises(ValueError):
        baseline_aggregate([0.5, 1.2], "mean")
    with pytest.raises(ValueError):
        baseline_aggregate([-0.1], "max")
    with pytest.raises(ValueError):
        baseline_aggregate([0.5], "median")


# -------------------------------------------------------- feature store

def test_feature_store_round_trip(tmp_path, rng):
    store = FeatureStore.create(tmp_path / "fs", encoder_hash="deadbeef")
    values = _feature_values(1, rng)
    store.add(FeatureSequence(values=values, study_id="study_0001", label=1))
    store.add(FeatureSequence(values=_feature_values(0, rng),
                              study_id="study_0002", label=0))

    reopened = FeatureStore.open(tmp_path / "fs")
    assert reopened.encoder_hash == "deadbeef"
    assert reopened.ids() == ["study_0001", "study_0002"]
    assert "study_0001" in reopened and "study_9999" not in reopened
    seq = reopened.get("study_0001")
    assert seq.label == 1
    assert torch.equal(seq.values, values)


def test_feature_store_create_respects_force(tmp_path, rng):
    store = FeatureStore.create(tmp_path / "fs")
    store.add(FeatureSequence(values=_feature_values(0, rng),
                              study_id="s", label=0))
    with pytest.raises(DataError):
        FeatureStore.create(tmp_path / "fs")
    fresh = FeatureStore.create(tmp_path / "fs", force=True)
    assert fresh.ids() == []


def test_feature_store_open_errors(tmp_path):
    with pytest.raises(DataError):
        FeatureStore.open(tmp_path / "missing")
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "index.json").write_text('{"format": "something-else"}')
    with pytest.raises(DataError):
        FeatureStore.open(bad)


def test_feature_store_missing_study(tmp_path):
    store = FeatureStore.create(tmp_path / "fs")
    with pytest.raises(DataError):
        store.get("nope")


# --------------------------------------------------------- encode_study

def test_encode_study_matches_forward_features():
    encoder = SlabEncoder(tiny_encoder_config())
    slabs = torch.rand(7, 5, 64, 64) * 255
    seq = encode_study(encoder, slabs, study_id="s1", label=1, batch_size=3)
    encoder.eval()
    with torch.no_grad():
        direct = encoder.forward_features(slabs)
    assert seq.study_id == "s1" and seq.label == 1
    assert seq.values.shape == (7, 64, 4, 4)
    # chunked encoding may differ from the whole-batch pass in the last bit
    np.testing.assert_allclose(seq.values.numpy(), direct.numpy(), atol=1e-6)
    again = encode_study(encoder, slabs, batch_size=16)
    assert torch.equal(again.values, direct)


def test_encode_study_from_slab_sequence(tiny_corpus):
    record = tiny_corpus.split_records("train")[0]
    study = load_study(tiny_corpus, record)
    slab_seq, _ = preprocess_study(study.volume, tiny_preprocess_config(),
                                   label=study.label,
                                   study_id=record.study_id)
    encoder = SlabEncoder(tiny_encoder_config())
    features = encode_study(encoder, slab_seq)
    assert features.study_id == record.study_id
    assert features.label == record.label
    assert features.length == len(slab_seq)


def test_feature_sequence_rejects_bad_rank():
    with pytest.raises(ValueError):
        FeatureSequence(values=torch.zeros(3, 4, 4), study_id="s", label=0)


# ---------------------------------------------------------- checkpoints

def test_aggregator_checkpoint_round_trip(tmp_path):
    torch.manual_seed(2)
    cfg = tiny_aggregator_config(filters=4)
    model = AggregatorNet(cfg, in_channels=8, spatial=(8, 8))
    history = TrainingHistory()
    history.record(0.5, 0.0, 0.4, 0.0, 0.8)
    path = tmp_path / "agg.pt"
    digest = save_aggregator(path, model, history, context={"scenario": 3})

    loaded, loaded_history = load_aggregator(path)
    assert loaded.config == cfg
    assert loaded_history.to_dict() == history.to_dict()
    x = torch.randn(2, 4, 8, 8, 8)
    model.eval()
    with torch.no_grad():
        np.testing.assert_array_equal(model(x).numpy(), loaded(x).numpy())

    assert save_aggregator(tmp_path / "again.pt", model, history,
                           context={"scenario": 3}) == digest


def test_load_aggregator_rejects_bad_files(tmp_path):
    garbage = tmp_path / "garbage.pt"
    garbage.write_text("not a checkpoint")
    with pytest.raises(DataError):
        load_aggregator(garbage)
    wrong = tmp_path / "wrong.pt"
    torch.save({"format": "other"}, wrong)
    with pytest.raises(DataError):
        load_aggregator(wrong)
    with pytest.raises(DataError):
        load_aggregator(tmp_path / "missing.pt")


# --------------------------------------------------------- train_stage2

def test_train_stage2_learns_signal(tmp_path, rng):
    manifest = _manifest({"train": [1, 0] * 6, "val": [1, 0, 1, 0]})
    store = _filled_store(tmp_path / "fs", manifest, rng)
    cfg = tiny_aggregator_config(epochs=12, learning_rate=3e-3,
                                 recurrent_dropout=0.0, head_dropout=0.0)
    path, history = train_stage2(store, manifest, cfg, tmp_path / "agg.pt")
    assert path.exists()
    assert len(history.train_ce) == cfg.epochs
    assert len(history.val_accuracy) == cfg.epochs
    assert 0 <= history.selected_epoch < cfg.epochs
    assert history.train_ce[-1] < 0.05
    assert max(history.val_accuracy) == 1.0


def test_train_stage2_deterministic(tmp_path, rng):
    manifest = _manifest({"train": [1, 0] * 4, "val": [1, 0]})
    store = _filled_store(tmp_path / "fs", manifest, rng)
    cfg = tiny_aggregator_config(epochs=3)
    _, first = train_stage2(store, manifest, cfg, tmp_path / "a.pt")
    _, second = train_stage2(store, manifest, cfg, tmp_path / "b.pt")
    assert first.to_dict() == second.to_dict()
    model_a, _ = load_aggregator(tmp_path / "a.pt")
    model_b, _ = load_aggregator(tmp_path / "b.pt")
    for key, value in model_a.state_dict().items():
        assert torch.equal(value, model_b.state_dict()[key]), key


def test_train_stage2_respects_study_subset(tmp_path, rng):
    manifest = _manifest({"train": [1, 0, 1, 0, 1, 0], "val": [1, 0]})
    keep = {r.study_id for r in manifest.split_records("train")[:4]}
    keep |= {r.study_id for r in manifest.split_records("val")}
    dropped = {r.study_id for r in manifest.records} - keep
    store = _filled_store(tmp_path / "fs", manifest, rng, skip=dropped)

    with pytest.raises(DataError):
        train_stage2(store, manifest, tiny_aggregator_config(epochs=1),
                     tmp_path / "full.pt")
    path, _ = train_stage2(store, manifest, tiny_aggregator_config(epochs=1),
                           tmp_path / "subset.pt", study_ids=keep)
    assert path.exists()


def test_train_stage2_single_class_warns(tmp_path, rng):
    manifest = _manifest({"train": [1, 1, 1, 1], "val": [1, 0]})
    store = _filled_store(tmp_path / "fs", manifest, rng)
    with pytest.warns(RuntimeWarning, match="single-class"):
        train_stage2(store, manifest, tiny_aggregator_config(epochs=1),
                     tmp_path / "agg.pt")


def test_train_stage2_divergence_detected(tmp_path, rng):
    manifest = _manifest({"train": [1, 0] * 4, "val": [1, 0]})
    store = _filled_store(tmp_path / "fs", manifest, rng)
    cfg = tiny_aggregator_config(epochs=4, learning_rate=1e20)
    with pytest.raises(TrainingDivergenceError):
        train_stage2(store, manifest, cfg, tmp_path / "agg.pt")


def test_train_stage2_unequal_lengths(tmp_path, rng):
    manifest = _manifest({"train": [1, 0, 1, 0], "val": [1, 0]})
    store = FeatureStore.create(tmp_path / "fs")
    for i, record in enumerate(manifest.records):
        t = 3 + (i % 2)
        store.add(FeatureSequence(
            values=_feature_values(record.label, rng, t=t),
            study_id=record.study_id, label=record.label))
    path, history = train_stage2(store, manifest,
                                 tiny_aggregator_config(epochs=2),
                                 tmp_path / "agg.pt")
    assert path.exists()
    assert np.isfinite(history.train_ce).all()


def test_predict_studies_deterministic(tmp_path, rng):
    manifest = _manifest({"train": [1, 0] * 4, "val": [1, 0]})
    store = _filled_store(tmp_path / "fs", manifest, rng)
    _, _ = train_stage2(store, manifest, tiny_aggregator_config(epochs=2),
                        tmp_path / "agg.pt")
    model, _ = load_aggregator(tmp_path / "agg.pt")
    ids = store.ids()
    first = predict_studies(model, store, ids)
    second = predict_studies(model, store, ids)
    np.testing.assert_array_equal(first, second)
    assert np.all((first > 0) & (first < 1))
