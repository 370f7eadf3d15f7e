import numpy as np
import pytest

from mettle.tasks import (
    ClassificationHead,
    SegSampleSpec,
    SegmentationHead,
    SyntheticClipSpec,
    class_templates,
    classify,
    fpn_decode,
    gen_classification_dataset,
    gen_segmentation_dataset,
    load_dataset,
    metrics,
    miou,
    nearest_template_classify,
    save_dataset,
    segment_accuracy,
    template_match_segment,
)
from mettle.tensorcore import Rng, constant, zeros

SMALL = SyntheticClipSpec(t_steps=3, classes=4, visual_shape=(16, 16, 3),
                          audio_shape=(8, 8, 1))
SEG_SMALL = SegSampleSpec(t_steps=2, classes=4, visual_shape=(64, 64, 3),
                          audio_shape=(32, 32, 1))


class TestClassificationGenerator:
    def test_stratification_exact(self):
        ds = gen_classification_dataset(SMALL, seed=0, n=40)
        clip_classes = []
        for i in range(40):
            nz = ds.labels[i][ds.labels[i] > 0]
            assert len(nz) >= 1  # at least one event per clip
            assert len(set(nz)) == 1
            clip_classes.append(nz[0])
        counts = np.bincount(clip_classes, minlength=5)[1:]
        assert list(counts) == [10, 10, 10, 10]

    def test_n_below_classes_rejected(self):
        with pytest.raises(ValueError):
            gen_classification_dataset(SMALL, seed=0, n=3)

    def test_noiseless_oracle_is_perfect(self):
        spec = SyntheticClipSpec(t_steps=3, classes=4, visual_shape=(16, 16, 3),
                                 audio_shape=(8, 8, 1), noise_sigma=0.0)
        ds = gen_classification_dataset(spec, seed=1, n=16)
        assert nearest_template_classify(ds) == 1.0

    def test_noisy_oracle_ceiling_recorded(self):
        ds = gen_classification_dataset(SMALL, seed=1, n=24)
        acc = nearest_template_classify(ds)
        assert acc >= 0.99  # sigma=0.1 barely perturbs the matched filter

    def test_determinism_and_split_disjointness(self):
        a = gen_classification_dataset(SMALL, seed=7, n=8)
        b = gen_classification_dataset(SMALL, seed=7, n=8)
        assert np.array_equal(a.visual, b.visual)
        assert np.array_equal(a.labels, b.labels)
        ev = gen_classification_dataset(SMALL, seed=7, n=8, split="eval")
        assert not np.array_equal(a.visual, ev.visual)
        # same planted templates across splits
        ta, _ = class_templates(SMALL, 7)
        tb, _ = class_templates(SMALL, 7)
        assert np.array_equal(ta[0], tb[0])

    def test_labels_in_range(self):
        ds = gen_classification_dataset(SMALL, seed=3, n=12)
        assert ds.labels.min() >= 0 and ds.labels.max() <= SMALL.classes


class TestSegmentationGenerator:
    def test_noiseless_single_source_oracle_miou_one(self):
        spec = SegSampleSpec(t_steps=2, classes=3, noise_sigma=0.0)
        ds = gen_segmentation_dataset(spec, seed=0, n=6)
        assert template_match_segment(ds, audio_aware=True) == 1.0

    def test_multi_source_visual_only_oracle_strictly_worse(self):
        spec = SegSampleSpec(t_steps=2, classes=4, noise_sigma=0.05, multi_source=True)
        ds = gen_segmentation_dataset(spec, seed=1, n=10)
        aware = template_match_segment(ds, audio_aware=True)
        blind = template_match_segment(ds, audio_aware=False)
        assert blind < aware
        assert aware > 0.9

    def test_mask_fraction_bounds(self):
        ds = gen_segmentation_dataset(SEG_SMALL, seed=2, n=12)
        area = 64 * 64
        for i in range(len(ds)):
            frac = ds.masks[i, 0].sum() / area
            assert SEG_SMALL.min_mask_frac <= frac <= SEG_SMALL.max_mask_frac

    def test_masks_nonempty_and_patch_aligned(self):
        ds = gen_segmentation_dataset(SEG_SMALL, seed=3, n=6)
        for i in range(len(ds)):
            m = ds.masks[i, 0]
            assert m.sum() > 0
            # aligned: the mask is constant over every 4x4 patch
            blocks = m.reshape(16, 4, 16, 4)
            assert np.all(blocks.min(axis=(1, 3)) == blocks.max(axis=(1, 3)))

    def test_multi_source_distractor_absent_from_audio(self):
        spec = SegSampleSpec(t_steps=1, classes=4, noise_sigma=0.0, multi_source=True)
        ds = gen_segmentation_dataset(spec, seed=4, n=8)
        _, aud_t = class_templates(spec, 4)
        for i in range(len(ds)):
            assert ds.distractor[i] != ds.sounding[i]
            a = ds.audio[i, 0]
            assert np.allclose(a, aud_t[ds.sounding[i] - 1])

    def test_min_two_samples(self):
        with pytest.raises(ValueError):
            gen_segmentation_dataset(SEG_SMALL, seed=0, n=1)


class TestHeads:
    def test_zero_head_uniform_logits(self):
        head = ClassificationHead(4, 4, classes=3)
        a = constant(Rng(0).normal((5, 4)))
        v = constant(Rng(1).normal((5, 4)))
        logits = classify(a, v, head)
        assert logits.shape == (5, 4)
        assert np.array_equal(logits.data, np.zeros((5, 4)))

    def test_classify_oracle(self):
        head = ClassificationHead(2, 2, classes=2, rng=Rng(3))
        a = constant(Rng(0).normal((3, 2)))
        v = constant(Rng(1).normal((3, 2)))
        logits = classify(a, v, head)
        fused = np.concatenate([a.data, v.data], axis=-1)
        expect = fused @ head.params["cls.w"].data + head.params["cls.b"].data
        assert np.allclose(logits.data, expect, atol=1e-12)

    def test_zero_seg_head_zero_logits(self):
        head = SegmentationHead([8, 16], fuse_channels=4)
        feats = [constant(Rng(0).normal((2, 16, 8))),
                 constant(Rng(1).normal((2, 4, 16)))]
        out = fpn_decode(feats, [(4, 4), (2, 2)], head, patch=4)
        assert out.shape == (2, 16, 16)
        assert np.array_equal(out.data, np.zeros((2, 16, 16)))

    def test_decode_shape_law_and_upsampling(self):
        head = SegmentationHead([8, 16], fuse_channels=4, rng=Rng(5))
        feats = [constant(Rng(0).normal((3, 16, 8))),
                 constant(Rng(1).normal((3, 4, 16)))]
        out = fpn_decode(feats, [(4, 4), (2, 2)], head, patch=4)
        assert out.shape == (3, 16, 16)
        # per-pixel logits are constant within each 4x4 patch block
        blocks = out.data.reshape(3, 4, 4, 4, 4)
        assert np.allclose(blocks.max(axis=(2, 4)), blocks.min(axis=(2, 4)))

    def test_missing_stage_rejected(self):
        head = SegmentationHead([8, 16], fuse_channels=4)
        with pytest.raises(Exception):
            fpn_decode([zeros((1, 16, 8))], [(4, 4)], head, patch=4)

    def test_seg_head_golden_single_stage(self):
        # oracle: per-token linear -> relu-MLP -> broadcast to pixels
        head = SegmentationHead([6], fuse_channels=3, rng=Rng(7))
        x = Rng(2).normal((1, 4, 6))
        out = fpn_decode([constant(x)], [(2, 2)], head, patch=2)
        f = x @ head.params["seg.s0.w"].data + head.params["seg.s0.b"].data
        h = np.maximum(f @ head.params["seg.hidden.w"].data
                       + head.params["seg.hidden.b"].data, 0.0)
        logit = h @ head.params["seg.out.w"].data + head.params["seg.out.b"].data
        grid = logit.reshape(1, 2, 2)
        expect = np.repeat(np.repeat(grid, 2, axis=1), 2, axis=2)
        assert np.allclose(out.data, expect, atol=1e-12)


class TestMetrics:
    def test_perfect_prediction(self):
        labels = np.array([[1, 0, 2]])
        logits = np.zeros((1, 3, 4))
        for t, c in enumerate(labels[0]):
            logits[0, t, c] = 5.0
        assert segment_accuracy(logits, labels) == 1.0
        masks = np.zeros((2, 8, 8))
        masks[:, 2:5, 2:5] = 1.0
        pred = np.where(masks > 0, 3.0, -3.0)
        assert miou(pred, masks) == 1.0

    def test_disjoint_masks_iou_zero(self):
        gt = np.zeros((1, 8, 8))
        gt[0, :2, :2] = 1.0
        pred = np.full((1, 8, 8), -1.0)
        pred[0, 6:, 6:] = 1.0
        assert miou(pred, gt) == 0.0

    def test_empty_masks_convention_one(self):
        gt = np.zeros((1, 4, 4))
        pred = np.full((1, 4, 4), -1.0)
        assert miou(pred, gt) == 1.0

    def test_bounds_and_order_invariance(self):
        rng = Rng(0)
        logits = rng.normal((4, 8, 8))
        gt = (rng.uniform((4, 8, 8)) > 0.6).astype(float)
        v = miou(logits, gt)
        assert 0.0 <= v <= 1.0
        perm = [2, 0, 3, 1]
        assert miou(logits[perm], gt[perm]) == pytest.approx(v, abs=1e-12)

    def test_dispatcher_and_errors(self):
        with pytest.raises(ValueError):
            metrics("f1", np.zeros((1, 2)), np.zeros((1, 2)))
        with pytest.raises(Exception):
            segment_accuracy(np.zeros((2, 3)), np.zeros((3,)))


class TestSerialization:
    def test_classification_round_trip(self, tmp_path):
        ds = gen_classification_dataset(SMALL, seed=5, n=8)
        p = tmp_path / "train.mtlw"
        save_dataset(ds, p)
        back = load_dataset(p)
        assert np.array_equal(back.visual, ds.visual)
        assert np.array_equal(back.labels, ds.labels)
        assert back.spec == ds.spec and back.seed == 5

    def test_segmentation_round_trip(self, tmp_path):
        ds = gen_segmentation_dataset(SEG_SMALL, seed=6, n=4)
        p = tmp_path / "seg.mtlw"
        save_dataset(ds, p)
        back = load_dataset(p)
        assert np.array_equal(back.masks, ds.masks)
        assert np.array_equal(back.sounding, ds.sounding)
        assert back.spec == ds.spec
