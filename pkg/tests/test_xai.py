import numpy as np
import pytest
from scipy import ndimage
from scipy.ndimage import gaussian_filter

from segxplain.nn import Activation, Conv2D, Dense, MaxPool2D, Network
from segxplain.nn import layers as nn_layers
from segxplain.rng import derive_rng
from segxplain.xai import (
    AggregateHeatmap,
    IntegrationError,
    LimeConfig,
    aggregate,
    cam_to_mask,
    explanation_to_mask,
    gradcam,
    lime_explain,
    quickshift,
    segment_count,
)
from segxplain.xai.lime import BlackboxError, weighted_ridge


def textured_image(seed, size=48):
    rng = derive_rng("tex", seed)
    base = gaussian_filter(rng.random((size, size)), 1.5)
    return 0.15 + 0.3 * (base - base.min()) / (base.max() - base.min())


class TestQuickshift:
    def test_constant_image_single_superpixel(self):
        labels = quickshift(np.full((24, 24), 0.5), kernel_size=3, max_dist=6)
        assert segment_count(labels) == 1

    def test_uniform_halves_not_bridged(self):
        img = np.zeros((32, 32))
        img[:, 16:] = 1.0
        labels = quickshift(img, kernel_size=4, max_dist=8)
        assert not set(np.unique(labels[:, :16])) & set(np.unique(labels[:, 16:]))

    def test_partition_contiguous_labels(self):
        for seed in range(3):
            labels = quickshift(textured_image(seed), 2, 4)
            uniq = np.unique(labels)
            assert uniq[0] == 0
            assert np.array_equal(uniq, np.arange(len(uniq)))

    def test_labels_ordered_by_first_occurrence(self):
        labels = quickshift(textured_image(7), 2, 4)
        seen = []
        for lab in labels.reshape(-1):
            if lab not in seen:
                seen.append(int(lab))
        assert seen == sorted(seen)

    def test_every_segment_4_connected(self):
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        for seed in range(3):
            labels = quickshift(textured_image(seed), 2, 4)
            for lab in np.unique(labels):
                _, n = ndimage.label(labels == lab, structure=structure)
                assert n == 1, f"segment {lab} disconnected"

    def test_no_tiny_segments(self):
        for seed in range(3):
            labels = quickshift(textured_image(seed), 2, 4)
            sizes = np.bincount(labels.reshape(-1))
            assert sizes.min() >= 4

    def test_count_non_increasing_in_max_dist(self):
        img = textured_image(11)
        counts = [segment_count(quickshift(img, 2, md))
                  for md in (2, 3, 4, 6, 8)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_invalid_kernel_size(self):
        with pytest.raises(ValueError):
            quickshift(np.zeros((8, 8)), kernel_size=0)

    def test_deterministic(self):
        img = textured_image(5)
        assert np.array_equal(quickshift(img, 2, 4), quickshift(img, 2, 4))


def quadrant_blackbox(img):
    size = img.shape[0]
    m = float(np.clip(img[:size // 2, size // 2:].mean(), 0.0, 1.0))
    return np.array([1.0 - m, m])


def planted_image(seed, size=64):
    img = textured_image(seed, size).copy()
    img[:size // 2, size // 2:] += 0.45
    return np.clip(img, 0, 1)


DESK_LIME = dict(kernel_size=2.0, max_dist=4.0, n_samples=400)


class TestLime:
    def test_constant_blackbox_gives_empty_positive_explanation(self):
        config = LimeConfig(**DESK_LIME)
        expl = lime_explain(textured_image(0), lambda img: np.array([0.5, 0.5]),
                            1, config, derive_rng("c"))
        assert len(expl) == 0
        assert np.all(np.abs(expl.all_weights) < 1e-6)

    def test_planted_quadrant_features_found(self):
        config = LimeConfig(**DESK_LIME)
        for seed in (0, 1, 3):
            img = planted_image(seed)
            expl = lime_explain(img, quadrant_blackbox, 1, config,
                                derive_rng("lime", seed))
            quad = np.zeros_like(img, dtype=bool)
            quad[:32, 32:] = True
            n_in = sum(((expl.segments == sp_id) & quad).any()
                       for sp_id, _ in expl)
            assert n_in >= 4

    def test_deterministic_given_seed(self):
        config = LimeConfig(**DESK_LIME)
        img = planted_image(2)
        a = lime_explain(img, quadrant_blackbox, 1, config, derive_rng("d", 0))
        b = lime_explain(img, quadrant_blackbox, 1, config, derive_rng("d", 0))
        assert a.features == b.features

    def test_exactly_one_call_per_sample(self):
        config = LimeConfig(kernel_size=2.0, max_dist=4.0, n_samples=50)
        calls = []

        def counting_blackbox(img):
            calls.append(1)
            return quadrant_blackbox(img)

        lime_explain(planted_image(4), counting_blackbox, 1, config,
                     derive_rng("n"))
        assert len(calls) == 51  # all-ones row + n_samples draws

    def test_non_probability_blackbox_rejected(self):
        config = LimeConfig(**DESK_LIME)
        with pytest.raises(BlackboxError):
            lime_explain(textured_image(1), lambda img: np.array([2.0, 3.0]),
                         1, config, derive_rng("bad"))

    def _linear_blackbox_setup(self, seed, zero_fraction=0.5):
        """Blackbox exactly linear in superpixel on/off indicators."""
        img = textured_image(seed)
        segments = quickshift(img, 2, 4)
        k = segment_count(segments)
        rng = derive_rng("coef", seed)
        coef = rng.uniform(0.5, 1.0, k)
        coef[rng.random(k) < zero_fraction] = 0.0
        fill = float(img.mean())
        reps = []  # most fill-distinguishable pixel of each segment
        for s in range(k):
            ys, xs = np.nonzero(segments == s)
            j = np.argmax(np.abs(img[ys, xs] - fill))
            reps.append((ys[j], xs[j]))

        def blackbox(perturbed):
            z = np.array([float(perturbed[y, x] == img[y, x])
                          for y, x in reps])
            p1 = 0.05 + 0.9 * float(coef @ z) / max(coef.sum(), 1e-9)
            return np.array([1.0 - p1, p1])

        return img, segments, coef, blackbox

    def test_linear_blackbox_ridge_recovers_ranking(self):
        img, segments, coef, blackbox = self._linear_blackbox_setup(
            3, zero_fraction=0.0)
        config = LimeConfig(kernel_size=2.0, max_dist=4.0, n_samples=600,
                            ridge_lambda=1e-6, n_features=5)
        expl = lime_explain(img, blackbox, 1, config, derive_rng("lin"))
        true_rank = list(np.argsort(-coef)[:5])
        got_rank = [sp for sp, _ in expl.features]
        assert got_rank == true_rank

    def test_ridge_against_closed_form_wls_oracle(self):
        rng = derive_rng("wls")
        X = rng.integers(0, 2, size=(40, 6)).astype(float)
        y = rng.random(40)
        w = rng.uniform(0.2, 1.0, 40)
        lam = 0.7
        got = weighted_ridge(X, y, w, lam)
        # oracle: explicit normal equations via pinv on the augmented system
        Xa = np.column_stack([X, np.ones(40)])
        reg = lam * np.eye(7)
        reg[-1, -1] = 0
        want = np.linalg.pinv(Xa.T @ np.diag(w) @ Xa + reg) \
            @ Xa.T @ np.diag(w) @ y
        assert np.allclose(got, want[:-1], atol=1e-10)

    def test_ignored_superpixel_stays_out_of_top_set(self):
        for seed in (0, 5, 9):
            img, segments, coef, blackbox = self._linear_blackbox_setup(
                seed, zero_fraction=0.6)
            if (coef > 0).sum() < 5:
                continue
            config = LimeConfig(kernel_size=2.0, max_dist=4.0, n_samples=600,
                                ridge_lambda=1.0, n_features=5)
            expl = lime_explain(img, blackbox, 1, config,
                                derive_rng("loc", seed))
            zero_ids = set(np.nonzero(coef == 0)[0])
            assert not zero_ids & {sp for sp, _ in expl.features}


def tail_score(model, start_idx, activation, target_class):
    """Class score (pre-softmax) from layer ``start_idx``'s activation."""
    stop = len(model.specs)
    last = model.specs[-1]
    if isinstance(last, Activation) and last.kind == "softmax":
        stop -= 1
    cur = activation[None]
    for i in range(start_idx + 1, stop):
        cur, _ = nn_layers._layer_forward(model, i, model.specs[i], cur,
                                          [], "eval", derive_rng(0))
    return float(cur[0, target_class])


class TestGradcam:
    def _gap_model(self, positive=True):
        # conv(1->1) then uniform dense: output == mean of conv map
        net = Network([Conv2D(1, 1, 3, padding=1), Activation("relu"),
                       Dense(64, 1)],
                      input_shape=(1, 8, 8), precision=np.float64, seed=4)
        # positive kernel so the conv map has live (unclipped) structure
        net.param("layer0.weight").array = np.abs(
            net.param("layer0.weight").array) + 0.05
        net.param("layer0.bias").array = np.full(1, 0.1)
        sign = 1.0 if positive else -1.0
        net.param("layer2.weight").array = np.full((64, 1), sign / 64.0)
        net.param("layer2.bias").array = np.zeros(1)
        return net

    def test_gap_model_cam_proportional_to_activation(self):
        net = self._gap_model()
        img = derive_rng("cam").random((8, 8))
        cam = gradcam(net, img, 0)
        out, tape = nn_layers.forward(net, img[None, None], mode="eval")
        act = np.maximum(tape.step_outputs[0][0, 0], 0)  # ReLU'd conv map
        expected = act / act.max()
        assert np.allclose(cam, expected, atol=1e-9)

    def test_negative_everywhere_gives_zero_map(self):
        net = self._gap_model(positive=False)
        net.param("layer0.bias").array = np.full(1, 5.0)  # activations > 0
        cam = gradcam(net, derive_rng("neg").random((8, 8)), 0)
        assert np.all(cam == 0)

    def test_nonzero_cam_max_is_one(self):
        net = Network([Conv2D(1, 2, 3, padding=1), Activation("relu"),
                       MaxPool2D(2), Dense(2 * 4 * 4, 3),
                       Activation("softmax")],
                      input_shape=(1, 8, 8), precision=np.float64, seed=7)
        cam = gradcam(net, derive_rng("m").random((8, 8)), 1)
        if cam.max() > 0:
            assert cam.max() == pytest.approx(1.0)
        assert cam.min() >= 0.0 and cam.shape == (8, 8)

    def test_model_without_conv_rejected(self):
        net = Network([Dense(16, 2), Activation("softmax")],
                      input_shape=(16,), precision=np.float64)
        with pytest.raises(IntegrationError):
            gradcam(net, np.zeros((4, 4)), 0)

    def test_gradient_path_matches_finite_differences(self):
        net = Network([Conv2D(1, 3, 3, padding=1), Activation("relu"),
                       MaxPool2D(2), Dense(3 * 4 * 4, 2),
                       Activation("softmax")],
                      input_shape=(1, 8, 8), precision=np.float64, seed=2)
        from segxplain.xai.gradcam import cam_source_step

        img = derive_rng("fd").random((8, 8))
        out, tape = nn_layers.forward(net, img[None, None], mode="eval")
        score_step = len(net.specs) - 2  # pre-softmax dense output
        seed_grad = np.zeros((1, 2))
        seed_grad[:, 1] = 1.0
        nn_layers.backward(tape, seed_grad, start_step=score_step)
        conv_idx = cam_source_step(net)
        analytic = tape.step_output_grads[conv_idx][0]
        activation = tape.step_outputs[conv_idx][0].copy()
        eps = 1e-6
        rng = derive_rng("fdpick")
        for _ in range(20):
            c = rng.integers(0, activation.shape[0])
            y = rng.integers(0, activation.shape[1])
            x = rng.integers(0, activation.shape[2])
            base = activation[c, y, x]
            activation[c, y, x] = base + eps
            plus = tail_score(net, conv_idx, activation, 1)
            activation[c, y, x] = base - eps
            minus = tail_score(net, conv_idx, activation, 1)
            activation[c, y, x] = base
            numeric = (plus - minus) / (2 * eps)
            a = analytic[c, y, x]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-10)
            assert rel < 1e-4


class TestMasksAndAggregate:
    def test_explanation_mask_area_is_sum_of_segments(self):
        img = textured_image(3)
        segments = quickshift(img, 2, 4)
        ids = [0, 2]
        mask = explanation_to_mask([(i, 1.0) for i in ids], segments)
        want = sum(int((segments == i).sum()) for i in ids)
        assert int(mask.sum()) == want

    def test_empty_explanation_empty_mask(self):
        segments = np.zeros((4, 4), dtype=int)
        assert explanation_to_mask([], segments).sum() == 0

    def test_all_superpixels_full_mask(self):
        segments = quickshift(textured_image(4), 2, 4)
        ids = range(segment_count(segments))
        mask = explanation_to_mask([(i, 1.0) for i in ids], segments)
        assert np.all(mask == 1)

    def test_unknown_id_rejected(self):
        with pytest.raises(ValueError):
            explanation_to_mask([(99, 1.0)], np.zeros((4, 4), dtype=int))

    def test_cam_to_mask(self):
        cam = np.array([[0.3, 0.9], [0.0, 0.5]])
        assert np.array_equal(cam_to_mask(cam, 0.5), [[0, 1], [0, 1]])
        assert cam_to_mask(np.zeros((3, 3))).sum() == 0
        assert np.all(cam_to_mask(cam, 0.0) == 1)
        with pytest.raises(ValueError):
            cam_to_mask(cam, 1.5)

    def test_aggregate_single_map_identity(self):
        m = derive_rng("agg").random((6, 6))
        hm = aggregate([m], model_id="m", class_label="c", method="lime")
        assert np.array_equal(hm.values, m)
        assert hm.n_images == 1

    def test_aggregate_identical_ones(self):
        ones = np.ones((5, 5))
        hm = aggregate([ones] * 7)
        assert np.all(hm.values == 1.0)

    def test_aggregate_disjoint_halves(self):
        a = np.zeros((4, 4))
        a[:2] = 1
        b = np.zeros((4, 4))
        b[2:] = 1
        hm = aggregate([a, b])
        assert np.all(hm.values == 0.5)

    def test_aggregate_mean_exact(self):
        rng = derive_rng("mean")
        maps = [rng.random((5, 5)) for _ in range(9)]
        hm = aggregate(maps)
        assert np.allclose(hm.values, np.mean(maps, axis=0), atol=1e-12)
        assert hm.values.min() >= 0 and hm.values.max() <= 1

    def test_aggregate_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_aggregate_dimension_mismatch(self):
        with pytest.raises(ValueError):
            aggregate([np.zeros((2, 2)), np.zeros((3, 3))])
