import numpy as np
import pytest
import torch

from slabscan.aggregator import AggregatorConfig
from slabscan.encoder import EncoderConfig
from slabscan.preprocess import PreprocessConfig
from slabscan.synthcorpus import CorpusConfig, CorpusManifest, StudyRecord, \
    generate_corpus

ACCEPTANCE_RESULTS = []


def record_acceptance(name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if ok else "FAIL"
        line = f"{status}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    torch.manual_seed(0)
    yield


def tiny_corpus_config(**overrides) -> CorpusConfig:
    base = dict(study_count=12, positive_fraction=0.5,
                volume_shape=(24, 64, 64),
                lesion_radius_range_vox=(2.0, 3.0), rng_seed=11)
    base.update(overrides)
    return CorpusConfig(**base)


def tiny_preprocess_config(**overrides) -> PreprocessConfig:
    base = dict(crop_height=64, crop_width=64, sequence_length=4,
                slab_stride=2)
    base.update(overrides)
    return PreprocessConfig(**base)


def tiny_encoder_config(**overrides) -> EncoderConfig:
    base = dict(input_size=(64, 64), width_multiplier=0.125, epochs=2,
                batch_size=8, learning_rate=1e-3, seed=3)
    base.update(overrides)
    return EncoderConfig(**base)


def tiny_aggregator_config(**overrides) -> AggregatorConfig:
    base = dict(filters=8, epochs=3, batch_size=4, learning_rate=1e-3,
                seed=4)
    base.update(overrides)
    return AggregatorConfig(**base)


def make_manifest(labels_by_split) -> CorpusManifest:
    """In-memory manifest: {'train': [1, 0, ...], 'val': [...]}."""
    records = []
    index = 0
    for split, labels in labels_by_split.items():
        for label in labels:
            records.append(StudyRecord(
                study_id=f"study_{index:04d}", index=index, label=label,
                split=split, confounder=False, annotated_slices=[],
                volume_file=f"study_{index:04d}.avol", mask_file=None,
                n_lesions=label))
            index += 1
    return CorpusManifest(config=CorpusConfig(study_count=len(records)),
                          records=records)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    return generate_corpus(tiny_corpus_config(), root)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
