import hashlib

import numpy as np
import pytest

from segxplain.classification import (
    ClassifierConfig,
    TrainSchedule,
    backbone_parameter_names,
    build_classifier,
    predict_proba,
    predict_proba_batch,
    train_two_phase,
)
from segxplain.classification import _run_phase
from segxplain.dataio import generate_synthetic_corpus
from segxplain.nn import ConfigurationError, Conv2D
from segxplain.rng import derive_rng

CLASSES = ["lung_opacity", "normal"]


def small_config(**overrides):
    defaults = dict(input_size=32, backbone_blocks=2, base_channels=4,
                    head_sizes=(32, 16, 8), dropout_rate=0.1, seed=1)
    defaults.update(overrides)
    return ClassifierConfig(**defaults)


def checksum(model, group):
    """Digest of a group's parameters (buffers such as BN running stats keep
    tracking activations during warm-up and are not part of the freezing
    contract)."""
    h = hashlib.sha256()
    for p in model.parameters():
        if p.group == group and not p.is_buffer:
            h.update(p.array.tobytes())
    return h.hexdigest()


class TestBuildClassifier:
    def test_output_is_probability_vector(self):
        model = build_classifier(small_config(), 3)
        p = predict_proba(model, derive_rng(0).random((32, 32)))
        assert p.shape == (3,)
        assert p.sum() == pytest.approx(1.0, abs=1e-6)

    def test_default_head_widths_are_paper_values(self):
        cfg = ClassifierConfig()
        assert cfg.head_sizes == (1024, 1024, 512)

    def test_default_schedule_values(self):
        s = TrainSchedule()
        assert (s.warmup_epochs, s.finetune_epochs, s.batch_size) == (50, 100, 40)
        assert (s.warmup_lr, s.finetune_lr) == (0.001, 0.0001)
        assert (s.plateau_patience, s.plateau_factor) == (3, 0.5)

    def test_frozen_tag_query_returns_conv_stack(self):
        model = build_classifier(small_config(), 2)
        names = backbone_parameter_names(model)
        assert names  # conv weights/biases + BN affine
        conv_layers = [i for i, s in enumerate(model.specs)
                       if isinstance(s, Conv2D)]
        for i in conv_layers:
            assert f"layer{i}.weight" in names
        # nothing from the dense head is freezable
        dense_start = max(conv_layers) + 1
        assert not any(int(n.split(".")[0][5:]) > dense_start + 3
                       for n in names)

    def test_fewer_than_two_classes_rejected(self):
        with pytest.raises(ConfigurationError):
            build_classifier(small_config(), 1)


class TestPredictProba:
    def test_zeroed_final_layer_gives_uniform(self):
        model = build_classifier(small_config(), 4)
        final_dense = len(model.specs) - 2
        model.param(f"layer{final_dense}.weight").array *= 0
        model.param(f"layer{final_dense}.bias").array *= 0
        p = predict_proba(model, derive_rng(1).random((32, 32)))
        assert np.allclose(p, 0.25, atol=1e-6)

    def test_probabilities_sum_to_one_in_bulk(self):
        model = build_classifier(small_config(), 3)
        images = derive_rng(2).random((200, 32, 32))
        probs = predict_proba_batch(model, images)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(probs >= 0)

    def test_argmax_stable_under_tiny_perturbation(self):
        model = build_classifier(small_config(), 3)
        rng = derive_rng(3)
        for _ in range(10):
            img = rng.random((32, 32))
            a = predict_proba(model, img).argmax()
            b = predict_proba(model, img + 1e-7 * rng.random((32, 32))).argmax()
            assert a == b

    def test_resizes_input(self):
        model = build_classifier(small_config(), 2)
        p = predict_proba(model, derive_rng(4).random((48, 48)))
        assert p.shape == (2,)


def corpus_data(n=40, size=32, bias=True, seed=11):
    corpus = generate_synthetic_corpus(n, size, bias, seed)
    return corpus.images, corpus.labels


class TestTwoPhaseTraining:
    def test_backbone_frozen_through_warmup(self):
        images, labels = corpus_data(20)
        model = build_classifier(small_config(), 2)
        before = checksum(model, "backbone")
        sched = TrainSchedule(warmup_epochs=2, finetune_epochs=0,
                              batch_size=10, seed=3)
        model, history = train_two_phase(model, CLASSES, (images, labels),
                                         (images, labels), sched)
        assert checksum(model, "backbone") == before
        assert all(h["phase"] == "warmup" for h in history)

    def test_finetune_updates_backbone(self):
        images, labels = corpus_data(20)
        model = build_classifier(small_config(), 2)
        before = checksum(model, "backbone")
        sched = TrainSchedule(warmup_epochs=1, finetune_epochs=1,
                              batch_size=10, seed=3)
        model, _ = train_two_phase(model, CLASSES, (images, labels),
                                   (images, labels), sched)
        assert checksum(model, "backbone") != before

    def test_finetune_starts_at_configured_lr(self):
        images, labels = corpus_data(20)
        model = build_classifier(small_config(), 2)
        sched = TrainSchedule(warmup_epochs=1, finetune_epochs=2,
                              batch_size=10, seed=4)
        _, history = train_two_phase(model, CLASSES, (images, labels),
                                     (images, labels), sched)
        finetune = [h for h in history if h["phase"] == "finetune"]
        assert finetune[0]["learning_rate"] == 0.0001

    def test_empty_class_rejected_with_name(self):
        images, labels = corpus_data(20)
        labels = ["normal"] * len(labels)
        model = build_classifier(small_config(), 2)
        sched = TrainSchedule(warmup_epochs=1, finetune_epochs=0, seed=0)
        with pytest.raises(ValueError, match="lung_opacity"):
            train_two_phase(model, CLASSES, (images, labels),
                            (images, labels), sched)

    def test_zero_warmup_equals_direct_single_phase(self):
        images, labels = corpus_data(16)
        data = (images, labels)
        sched = TrainSchedule(warmup_epochs=0, finetune_epochs=3,
                              batch_size=8, seed=7)
        m1 = build_classifier(small_config(), 2)
        m1, h1 = train_two_phase(m1, CLASSES, data, data, sched)
        m2 = build_classifier(small_config(), 2)
        h2 = []
        _run_phase(m2, "finetune", 3, sched.finetune_lr, sched, CLASSES,
                   data, data, None, h2)
        assert h1 == h2
        for a, b in zip(m1.state_arrays(), m2.state_arrays()):
            assert np.array_equal(a, b)

    def test_separable_corpus_smoke(self):
        images, labels = corpus_data(40, size=64, bias=True, seed=11)
        cfg = ClassifierConfig(input_size=64, backbone_blocks=3,
                               base_channels=8, head_sizes=(64, 32, 16),
                               dropout_rate=0.1, seed=1)
        model = build_classifier(cfg, 2)
        sched = TrainSchedule(warmup_epochs=3, finetune_epochs=6,
                              batch_size=10, warmup_lr=0.003,
                              finetune_lr=0.001, seed=2)
        model, _ = train_two_phase(model, CLASSES, (images, labels),
                                   (images, labels), sched)
        probs = predict_proba_batch(model, images)
        truth = np.array([CLASSES.index(l) for l in labels])
        accuracy = float((probs.argmax(axis=1) == truth).mean())
        assert accuracy > 0.9
