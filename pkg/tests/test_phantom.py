from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from cardioprior import (
    BASE_INTENSITY,
    FOREGROUND_CLASSES,
    DegenerateSpec,
    FovSpec,
    InvalidLabelValue,
    Jitter,
    PhantomSpec,
    UnknownMode,
    canonical_volumes,
    degrade,
    generate,
    overlap,
)
from conftest import label_volume


def zero_jitter_spec(noise=0.0):
    return PhantomSpec(jitter=Jitter.none(), noise_sigma=noise)


class TestJitterValidation:
    def test_rotation_cap(self):
        with pytest.raises(ValueError):
            Jitter(pose_rotation_max_deg=50.0)

    def test_axis_variation_cap(self):
        with pytest.raises(ValueError):
            Jitter(axis_variation=0.5)

    def test_scale_interval(self):
        with pytest.raises(ValueError):
            Jitter(scale_range=(1.05, 0.95))

    def test_none_is_valid(self):
        j = Jitter.none()
        assert j.pose_rotation_max_deg == 0.0
        assert j.scale_range == (1.0, 1.0)


class TestGenerate:
    def test_zero_jitter_labels_identical_across_cases(self):
        spec = zero_jitter_spec(noise=12.0)
        _, lab0 = generate(spec, 0)
        _, lab5 = generate(spec, 5)
        assert (lab0.data == lab5.data).all()

    def test_bit_identical_across_runs_and_threads(self):
        spec = PhantomSpec(seed=3)
        img_a, lab_a = generate(spec, 7)
        img_b, lab_b = generate(spec, 7)
        assert img_a.data.tobytes() == img_b.data.tobytes()
        assert lab_a.data.tobytes() == lab_b.data.tobytes()
        with ThreadPoolExecutor(max_workers=4) as ex:
            results = list(ex.map(lambda k: generate(spec, k), [7, 7, 7, 7]))
        for img_c, lab_c in results:
            assert img_c.data.tobytes() == img_a.data.tobytes()
            assert lab_c.data.tobytes() == lab_a.data.tobytes()

    def test_different_cases_differ(self):
        spec = PhantomSpec()
        _, lab0 = generate(spec, 0)
        _, lab1 = generate(spec, 1)
        assert (lab0.data != lab1.data).any()

    def test_all_classes_populated(self, phantom_case):
        _, labels = phantom_case
        for c in FOREGROUND_CLASSES:
            assert int((labels.data == c).sum()) >= 30

    def test_grid_metadata(self, phantom_case):
        image, labels = phantom_case
        assert image.dims == (48, 48, 48)
        assert image.spacing == (2.0, 2.0, 2.0)
        assert labels.offset == (-47.0, -47.0, -47.0)
        assert image.data.dtype == np.float32
        assert labels.data.dtype == np.uint8

    def test_noiseless_image_is_base_intensity_lookup(self):
        image, labels = generate(zero_jitter_spec(noise=0.0), 0)
        expected = np.asarray(BASE_INTENSITY, dtype=np.float32)[labels.data]
        assert (image.data == expected).all()

    def test_volumes_match_closed_form_within_2pct(self):
        _, labels = generate(zero_jitter_spec(), 0)
        vv = labels.voxel_volume
        for c, analytic in canonical_volumes().items():
            measured = float((labels.data == c).sum()) * vv
            assert abs(measured - analytic) / analytic < 0.02

    def test_grid_too_small_rejected(self):
        with pytest.raises(DegenerateSpec):
            generate(PhantomSpec(grid=FovSpec((16, 16, 16), 2.0)), 0)


class TestDegrade:
    def solid_cube(self):
        lab = np.zeros((12, 12, 12), dtype=np.uint8)
        lab[3:9, 3:9, 3:9] = 1
        return label_volume(lab)

    def test_zero_magnitude_is_identity(self, phantom_case):
        _, labels = phantom_case
        for mode, mag in (("erode", 0), ("dilate", 0), ("swap_boundary", 0.0)):
            out = degrade(labels, mode, mag)
            assert (out.data == labels.data).all()

    def test_erode_shrinks_solid_cube(self):
        cube = self.solid_cube()
        out = degrade(cube, "erode", 1)
        before = int((cube.data == 1).sum())
        after = int((out.data == 1).sum())
        assert after < before
        assert after == 4 ** 3  # 6-cube loses its one-voxel shell

    def test_dilate_grows(self):
        cube = self.solid_cube()
        out = degrade(cube, "dilate", 1)
        assert int((out.data == 1).sum()) > int((cube.data == 1).sum())

    def test_drop_class_zeroes_one_dice(self, phantom_case):
        _, labels = phantom_case
        out = degrade(labels, "drop_class", 3)
        assert overlap(out, labels, 3) == (0.0, 0.0)
        for c in (1, 2, 4, 5, 6, 7):
            assert overlap(out, labels, c) == (1.0, 1.0)

    def test_drop_class_validates_id(self, phantom_case):
        _, labels = phantom_case
        with pytest.raises(InvalidLabelValue):
            degrade(labels, "drop_class", 0)

    def test_swap_boundary_is_seeded(self, phantom_case):
        _, labels = phantom_case
        a = degrade(labels, "swap_boundary", 0.2, seed=5)
        b = degrade(labels, "swap_boundary", 0.2, seed=5)
        c = degrade(labels, "swap_boundary", 0.2, seed=6)
        assert (a.data == b.data).all()
        assert (a.data != c.data).any()
        assert (a.data != labels.data).any()

    def test_unknown_mode(self, phantom_case):
        _, labels = phantom_case
        with pytest.raises(UnknownMode):
            degrade(labels, "blur", 1)
