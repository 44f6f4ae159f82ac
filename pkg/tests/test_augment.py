import numpy as np
import pytest

from vesselseg.augment import (
    OP_ORDER,
    AugmentationPlan,
    AugmentationSpec,
    PlannedOp,
    apply_plan,
    sample_plan,
)
from vesselseg.dataio import WindowSample
from vesselseg.errors import ConfigurationError


def _window(seed=0, h=48, w=64):
    rng = np.random.default_rng(seed)
    return WindowSample(
        image_patch=rng.random((h, w)).astype(np.float32),
        mask_patch=(rng.random((h, w)) < 0.2).astype(np.uint8),
        origin_x=5,
        origin_y=7,
        source_id="win",
    )


class TestSpecValidation:
    def test_defaults_valid(self):
        AugmentationSpec()

    def test_probability_out_of_range(self):
        with pytest.raises(ConfigurationError, match="probability"):
            AugmentationSpec(blur_prob=1.5)

    def test_inverted_range(self):
        with pytest.raises(ConfigurationError, match="low > high"):
            AugmentationSpec(scale_range=(1.2, 0.8))

    def test_nonpositive_scale(self):
        with pytest.raises(ConfigurationError, match="positive"):
            AugmentationSpec(scale_range=(0.0, 1.0))


class TestSampling:
    def test_disabled_spec_yields_empty_plan(self):
        plan = sample_plan(AugmentationSpec(enabled=False), np.random.default_rng(0))
        assert len(plan) == 0

    def test_all_probabilities_one_includes_everything_in_order(self):
        spec = AugmentationSpec(
            affine_prob=1.0, equalize_prob=1.0, clahe_prob=1.0,
            rescale_prob=1.0, log_prob=1.0, blur_prob=1.0,
        )
        plan = sample_plan(spec, np.random.default_rng(0))
        assert plan.names() == OP_ORDER

    def test_all_probabilities_zero_yields_empty_plan(self):
        spec = AugmentationSpec(
            affine_prob=0.0, equalize_prob=0.0, clahe_prob=0.0,
            rescale_prob=0.0, log_prob=0.0, blur_prob=0.0,
        )
        assert sample_plan(spec, np.random.default_rng(0)).names() == ()

    def test_plan_order_always_canonical(self):
        rng = np.random.default_rng(1)
        spec = AugmentationSpec()
        for _ in range(200):
            names = sample_plan(spec, rng).names()
            assert list(names) == [n for n in OP_ORDER if n in names]

    def test_sampled_parameters_within_ranges(self):
        rng = np.random.default_rng(2)
        spec = AugmentationSpec(affine_prob=1.0)
        for _ in range(50):
            plan = sample_plan(spec, rng)
            affine = plan.ops[0]
            assert spec.scale_range[0] <= affine.params["scale"] <= spec.scale_range[1]
            assert spec.rotation_range[0] <= affine.params["rotation_deg"] <= spec.rotation_range[1]
            assert spec.shear_range[0] <= affine.params["shear_deg"] <= spec.shear_range[1]

    def test_deterministic_given_rng_state(self):
        a = sample_plan(AugmentationSpec(), np.random.default_rng(5))
        b = sample_plan(AugmentationSpec(), np.random.default_rng(5))
        assert a == b


class TestApply:
    def test_empty_plan_is_noop(self):
        w = _window()
        out = apply_plan(AugmentationPlan(), w)
        np.testing.assert_array_equal(out.image_patch, w.image_patch)
        np.testing.assert_array_equal(out.mask_patch, w.mask_patch)

    def test_photometric_ops_leave_mask_untouched(self):
        w = _window()
        plan = AugmentationPlan(ops=(
            PlannedOp("equalize"),
            PlannedOp("clahe", {"clip_limit": 2.0, "tile_grid": 8}),
            PlannedOp("rescale", {"low": 0.1, "high": 0.9}),
            PlannedOp("log", {"gain": 1.3}),
            PlannedOp("blur", {"sigma": 1.0}),
        ))
        out = apply_plan(plan, w)
        np.testing.assert_array_equal(out.mask_patch, w.mask_patch)
        assert not np.array_equal(out.image_patch, w.image_patch)

    def test_affine_warps_mask_with_image(self):
        # a centered square rotated 90 degrees maps onto itself
        img = np.zeros((33, 33), np.float32)
        msk = np.zeros((33, 33), np.uint8)
        msk[10:23, 10:23] = 1
        img[10:23, 10:23] = 1.0
        w = WindowSample(image_patch=img, mask_patch=msk, origin_x=0, origin_y=0)
        plan = AugmentationPlan(ops=(
            PlannedOp("affine", {"scale": 1.0, "rotation_deg": 90.0, "shear_deg": 0.0}),
        ))
        out = apply_plan(plan, w)
        np.testing.assert_array_equal(out.mask_patch, msk)

    def test_identity_affine_close_to_input(self):
        w = _window()
        plan = AugmentationPlan(ops=(
            PlannedOp("affine", {"scale": 1.0, "rotation_deg": 0.0, "shear_deg": 0.0}),
        ))
        out = apply_plan(plan, w)
        np.testing.assert_allclose(out.image_patch, w.image_patch, atol=1e-6)
        np.testing.assert_array_equal(out.mask_patch, w.mask_patch)

    def test_mask_stays_binary_under_affine(self):
        rng = np.random.default_rng(3)
        spec = AugmentationSpec(affine_prob=1.0)
        for _ in range(25):
            out = apply_plan(sample_plan(spec, rng), _window(seed=4))
            assert out.mask_patch.dtype == np.uint8
            assert set(np.unique(out.mask_patch)) <= {0, 1}

    def test_intensity_clipped_to_unit_interval(self):
        w = _window()
        plan = AugmentationPlan(ops=(PlannedOp("log", {"gain": 2.0}),))
        out = apply_plan(plan, w)
        assert out.image_patch.min() >= 0.0
        assert out.image_patch.max() <= 1.0

    def test_rescale_hits_target_range(self):
        w = _window()
        plan = AugmentationPlan(ops=(PlannedOp("rescale", {"low": 0.2, "high": 0.7}),))
        out = apply_plan(plan, w)
        assert abs(float(out.image_patch.min()) - 0.2) < 1e-5
        assert abs(float(out.image_patch.max()) - 0.7) < 1e-5

    def test_rescale_constant_image(self):
        w = WindowSample(
            image_patch=np.full((16, 16), 0.5, np.float32),
            mask_patch=np.zeros((16, 16), np.uint8),
            origin_x=0, origin_y=0,
        )
        plan = AugmentationPlan(ops=(PlannedOp("rescale", {"low": 0.3, "high": 0.8}),))
        out = apply_plan(plan, w)
        np.testing.assert_allclose(out.image_patch, 0.3)

    def test_dimensions_and_origin_preserved(self):
        rng = np.random.default_rng(6)
        spec = AugmentationSpec()
        w = _window()
        for _ in range(20):
            out = apply_plan(sample_plan(spec, rng), w)
            assert out.image_patch.shape == w.image_patch.shape
            assert out.mask_patch.shape == w.mask_patch.shape
            assert (out.origin_x, out.origin_y, out.source_id) == (5, 7, "win")

    def test_unknown_op_rejected(self):
        plan = AugmentationPlan(ops=(PlannedOp("solarize"),))
        with pytest.raises(ConfigurationError, match="solarize"):
            apply_plan(plan, _window())
