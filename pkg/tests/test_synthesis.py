import numpy as np
import pytest
import torch
import torch.nn as nn

from helpers import assert_dirs_identical
from tumorforge.core_data import load_manifest, write_dataset
from tumorforge.errors import EmptyDataset, RejectionBudgetExceeded, UntrainedModel
from tumorforge.geometry import ConcentricCircles, binarize, brain_support, render_circles
from tumorforge.networks import ModelBundle, NetworkHandle
from tumorforge.synthesis import (
    SynthesisConfig,
    normal_records,
    sample_circles,
    synthesize_batch,
    synthesize_one,
)
from tumorforge.training import TrainConfig, tumor_records, train_g_binary, train_g_grade, train_inpaint
from tumorforge.losses import LossWeights


class _DiskEcho(nn.Module):
    """Stub G_binary: emits channel 0 (the rendered disk) as probabilities."""

    def forward(self, x):
        return x[:, :1] * 0.9 + 0.05


class _GradeEcho(nn.Module):
    """Stub G_grade: emits channel 0 (the grade-encoded circles)."""

    def forward(self, x):
        return x[:, :1]


class _ConstantFill(nn.Module):
    """Stub G_inpaint: fills everything with a constant."""

    def forward(self, x5, m1):
        return torch.full((x5.shape[0], 4, x5.shape[2], x5.shape[3]), 2.0)


@pytest.fixture(scope="module")
def stub_bundle():
    size = 64
    return ModelBundle(
        g_binary=NetworkHandle("g_binary", size, _DiskEcho(), [(2, size, size)], (1, size, size)),
        g_grade=NetworkHandle("g_grade", size, _GradeEcho(), [(2, size, size)], (1, size, size)),
        g_inpaint=NetworkHandle(
            "g_inpaint", size, _ConstantFill(), [(5, size, size), (1, size, size)], (4, size, size)
        ),
    )


@pytest.fixture(scope="module")
def normal_slice(mini_norm_manifest):
    return normal_records(mini_norm_manifest)[0].images


@pytest.fixture(scope="module")
def trained_bundle(mini_norm_manifest):
    """Small genuinely-trained bundle for integration-level checks."""
    cfg = TrainConfig(learning_rate=2e-3, epochs=15, batch_size=8, checkpoint_every=15, seed=3,
                      loss_weights=LossWeights(w_pix=1.0, w_cont=0.0, w_adv=0.0))
    g_binary, _ = train_g_binary(mini_norm_manifest, cfg)
    g_grade, _ = train_g_grade(mini_norm_manifest, cfg)
    g_inpaint, _, _ = train_inpaint(mini_norm_manifest, cfg)
    return ModelBundle(g_binary=g_binary, g_grade=g_grade, g_inpaint=g_inpaint)


class TestSampleCircles:
    def test_radii_sorted_descending(self):
        cfg = SynthesisConfig.for_size(256, n_images=1, seed=0)
        rng = np.random.default_rng(0)
        for _ in range(200):
            c = sample_circles(rng, cfg)
            assert c.r1 >= c.r2 >= c.r3 >= 0

    def test_reference_ranges(self):
        cfg = SynthesisConfig.for_size(256, n_images=1)
        assert cfg.center_range == (80.0, 160.0)
        assert cfg.radius_range == (0.0, 40.0)
        cfg64 = SynthesisConfig.for_size(64, n_images=1)
        assert cfg64.center_range == (20.0, 40.0)
        assert cfg64.radius_range == (0.0, 10.0)

    def test_monte_carlo_center_mean(self):
        cfg = SynthesisConfig.for_size(256, n_images=1)
        rng = np.random.default_rng(123)
        xs = [sample_circles(rng, cfg).cx for _ in range(10_000)]
        assert 115 <= float(np.mean(xs)) <= 125

    def test_same_seed_same_sequence(self):
        cfg = SynthesisConfig.for_size(256, n_images=1)
        a = [sample_circles(np.random.default_rng(5), cfg) for _ in range(1)]
        b = [sample_circles(np.random.default_rng(5), cfg) for _ in range(1)]
        assert a == b


class TestSynthesizeOne:
    def test_circles_outside_brain_rejected(self, stub_bundle, normal_slice):
        c = ConcentricCircles(cx=2.0, cy=2.0, r1=6.0, r2=3.0, r3=1.0)
        assert synthesize_one(normal_slice, c, stub_bundle) is None

    def test_zero_radii_identity(self, stub_bundle, normal_slice):
        c = ConcentricCircles(cx=32.0, cy=32.0, r1=0.0, r2=0.0, r3=0.0)
        image, grade = synthesize_one(normal_slice, c, stub_bundle)
        assert (image.data == normal_slice.data).all()
        assert grade.is_empty()

    def test_outside_mask_pixels_bit_equal(self, stub_bundle, normal_slice):
        c = ConcentricCircles(cx=32.0, cy=30.0, r1=7.0, r2=4.0, r3=2.0)
        result = synthesize_one(normal_slice, c, stub_bundle)
        assert result is not None
        image, grade = result
        mask = binarize(grade).plane
        outside = mask == 0
        assert (image.data[:, outside] == normal_slice.data[:, outside]).all()
        assert (image.data[:, ~outside] == 2.0).all()  # stub fill value

    def test_grade_support_equals_binary_mask(self, stub_bundle, normal_slice):
        c = ConcentricCircles(cx=30.0, cy=34.0, r1=8.0, r2=8.0, r3=8.0)
        _, grade = synthesize_one(normal_slice, c, stub_bundle)
        # stub g_binary thresholds to the rendered disk; grade support must match it
        support = brain_support(normal_slice)
        disk = binarize((render_circles(c, 64, 64).plane > 0).astype(np.float32) * support.plane, 0)
        assert (binarize(grade).plane == disk.plane).all()

    def test_missing_models_raise(self, normal_slice):
        with pytest.raises(UntrainedModel):
            synthesize_one(normal_slice, ConcentricCircles(32, 32, 5, 3, 1), ModelBundle())


class TestSynthesizeBatch:
    def test_zero_images_empty_manifest(self, stub_bundle, mini_norm_manifest, tmp_path):
        cfg = SynthesisConfig.for_size(64, n_images=0, seed=1)
        manifest = synthesize_batch(mini_norm_manifest, cfg, stub_bundle, tmp_path)
        assert manifest.records == []

    def test_deterministic_across_runs(self, stub_bundle, mini_norm_manifest, tmp_path):
        cfg = SynthesisConfig.for_size(64, n_images=4, seed=11)
        synthesize_batch(mini_norm_manifest, cfg, stub_bundle, tmp_path / "a")
        synthesize_batch(mini_norm_manifest, cfg, stub_bundle, tmp_path / "b")
        assert_dirs_identical(tmp_path / "a", tmp_path / "b")

    def test_impossible_placement_exhausts_budget(self, stub_bundle, mini_norm_manifest, tmp_path):
        cfg = SynthesisConfig(
            n_images=1,
            center_range=(1.0, 2.0),  # corner, far outside the brain
            radius_range=(10.0, 10.0),
            max_attempts_per_image=5,
            seed=0,
        )
        with pytest.raises(RejectionBudgetExceeded):
            synthesize_batch(mini_norm_manifest, cfg, stub_bundle, tmp_path)

    def test_no_normals_raises(self, mini_norm_manifest, stub_bundle, tmp_path):
        tumor_only = tumor_records(mini_norm_manifest, "train")[:2]
        write_dataset(tumor_only, {"train": [r.id for r in tumor_only]}, tmp_path / "data")
        with pytest.raises(EmptyDataset):
            synthesize_batch(
                load_manifest(tmp_path / "data"),
                SynthesisConfig.for_size(64, n_images=1),
                stub_bundle,
                tmp_path / "out",
            )

    def test_records_carry_provenance(self, stub_bundle, mini_norm_manifest, tmp_path):
        cfg = SynthesisConfig.for_size(64, n_images=3, seed=7)
        manifest = synthesize_batch(mini_norm_manifest, cfg, stub_bundle, tmp_path)
        assert manifest.record_ids() == ["synth0000", "synth0001", "synth0002"]
        for j, rec in enumerate(manifest.iter_all()):
            assert rec.source == "synthesized"
            assert rec.seed == 7 + j
            assert rec.images.normalized


class TestTrainedBundleIntegration:
    def test_batch_satisfies_containment_and_fidelity(self, trained_bundle, mini_norm_manifest, tmp_path):
        cfg = SynthesisConfig.for_size(64, n_images=6, seed=29, max_attempts_per_image=200)
        manifest = synthesize_batch(mini_norm_manifest, cfg, trained_bundle, tmp_path)
        assert len(manifest.records) == 6
        for rec in manifest.iter_all():
            support = brain_support(rec.images).plane
            mask = binarize(rec.grade_mask).plane
            assert float((mask * (1 - support)).sum()) == 0.0
