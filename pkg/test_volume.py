"""Tests for grids, Gaussian targets, heatmap stacks and volume files."""

import math

import numpy as np
import pytest

from vertebra_locator.errors import MalformedHeaderError, MissingArtifactError, PayloadReadError, ShapeError, SizeMismatchError
from vertebra_locator.landmarks import LandmarkSet
from vertebra_locator.volume import (
    HeatmapStack,
    Volume3D,
    argmax_location,
    make_gaussian_heatmap,
    make_target_stack,
    nearest_voxel,
    normalize_stack,
    read_stack,
    read_volume,
    voxel_to_world,
    world_to_voxel,
    write_stack,
    write_volume,
)


def test_gaussian_peak_value_at_mu():
    template = Volume3D.zeros((5, 5, 5))
    heatmap = make_gaussian_heatmap((2.0, 2.0, 2.0), 1.0, template)
    assert heatmap.data[2, 2, 2] == pytest.approx(0.3989423, abs=1e-7)


def test_gaussian_value_at_two_sigma_units():
    template = Volume3D.zeros((7, 7, 7))
    heatmap = make_gaussian_heatmap((3.0, 3.0, 3.0), 2.0, template)
    assert heatmap.data[5, 3, 3] == pytest.approx(0.1209854, abs=1e-7)
    expected = 1.0 / (2.0 * math.sqrt(2 * math.pi)) * math.exp(-4.0 / 8.0)
    assert heatmap.data[3, 1, 3] == pytest.approx(expected, rel=1e-12)


def test_gaussian_is_radially_symmetric_and_decreasing():
    template = Volume3D.zeros((9, 9, 9), (2.0, 2.0, 2.0), (-8.0, -8.0, -8.0))
    heatmap = make_gaussian_heatmap((0.0, 0.0, 0.0), 3.0, template)
    d = heatmap.data
    assert d[5, 4, 4] == d[4, 3, 4] == d[4, 4, 5]
    assert d[6, 4, 4] == d[4, 4, 2]
    r2 = sum(g**2 for g in template.world_grid())
    inside = r2 <= (4 * 3.0) ** 2
    assert (d[inside] > 0).all()
    order = np.argsort(r2[inside], kind="stable")
    values, radii = d[inside][order], r2[inside][order]
    distinct = np.diff(radii) > 0
    assert (np.diff(values)[distinct] < 0).all()


def test_gaussian_truncated_beyond_four_sigma():
    template = Volume3D.zeros((30, 1, 1))
    heatmap = make_gaussian_heatmap((0.0, 0.0, 0.0), 1.0, template)
    assert heatmap.data[4, 0, 0] > 0
    assert (heatmap.data[5:] == 0).all()


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_gaussian_rejects_non_positive_sigma(sigma):
    with pytest.raises(ValueError):
        make_gaussian_heatmap((0, 0, 0), sigma, Volume3D.zeros((2, 2, 2)))


def test_world_voxel_transforms():
    vol = Volume3D.zeros((4, 4, 4), (2.0, 2.0, 2.0))
    np.testing.assert_allclose(voxel_to_world((1, 1, 1), vol), (2.0, 2.0, 2.0))
    shifted = Volume3D.zeros((4, 4, 4), (1.0, 1.0, 1.0), (10.0, 0.0, 0.0))
    np.testing.assert_allclose(world_to_voxel((10.0, 0.0, 0.0), shifted), (0.0, 0.0, 0.0))
    odd = Volume3D.zeros((3, 3, 3), (0.7, 1.3, 2.9), (-5.0, 3.2, 11.0))
    for p in np.random.default_rng(0).uniform(-50, 50, size=(20, 3)):
        np.testing.assert_allclose(voxel_to_world(world_to_voxel(p, odd), odd), p, atol=1e-9)


def test_nearest_voxel_rounds():
    vol = Volume3D.zeros((4, 4, 4), (2.0, 2.0, 2.0))
    assert nearest_voxel((2.9, 3.1, 0.2), vol) == (1, 2, 0)


def test_argmax_single_peak():
    data = np.zeros((3, 4, 5))
    data[2, 1, 3] = 7.0
    assert argmax_location(Volume3D(data)) == ((2, 1, 3), 7.0)


def test_argmax_tie_goes_to_lowest_x_fastest_index():
    data = np.zeros((2, 2, 2))
    data[0, 1, 0] = 1.0
    data[1, 0, 0] = 1.0
    index, _ = argmax_location(Volume3D(data))
    assert index == (1, 0, 0)


def test_argmax_of_gaussian_matches_exhaustive_scan():
    rng = np.random.default_rng(3)
    template = Volume3D.zeros((10, 8, 12), (1.5, 2.0, 2.5), (-3.0, 1.0, 4.0))
    for _ in range(10):
        mu = voxel_to_world(rng.uniform(0, 7, size=3), template)
        heatmap = make_gaussian_heatmap(mu, 4.0, template)
        best, best_value = None, -1.0
        for k in range(12):
            for j in range(8):
                for i in range(10):
                    if heatmap.data[i, j, k] > best_value:
                        best, best_value = (i, j, k), heatmap.data[i, j, k]
        assert argmax_location(heatmap)[0] == best
        assert best == nearest_voxel(mu, template)


def test_from_flat_is_x_fastest():
    vol = Volume3D.from_flat((2, 3, 1), (1, 1, 1), (0, 0, 0), np.arange(6.0))
    assert vol.data[1, 0, 0] == 1.0
    assert vol.data[0, 1, 0] == 2.0
    np.testing.assert_array_equal(vol.flat(), np.arange(6.0))


def test_volume_rejects_bad_geometry():
    with pytest.raises(ShapeError):
        Volume3D(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        Volume3D(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ShapeError):
        Volume3D.from_flat((2, 2, 2), (1, 1, 1), (0, 0, 0), np.zeros(7))


def test_zero_volume_round_trip(tmp_path):
    vol = Volume3D.zeros((2, 2, 2))
    back = read_volume(write_volume(vol, tmp_path / "zero.svh"))
    np.testing.assert_array_equal(back.data, vol.data)
    assert back.dims == (2, 2, 2)


def test_random_volume_round_trip_is_byte_exact(tmp_path):
    rng = np.random.default_rng(11)
    data = rng.normal(size=(5, 3, 4)).astype(np.float32)
    vol = Volume3D(data, (0.5, 1.25, 3.0), (-10.5, 2.0, 7.75))
    path = write_volume(vol, tmp_path / "rand.svh")
    back = read_volume(path)
    assert back.spacing == vol.spacing and back.origin == vol.origin
    np.testing.assert_array_equal(back.data, data.astype(float))
    rewritten = write_volume(back, tmp_path / "again.svh")
    assert (tmp_path / "rand.raw").read_bytes() == (tmp_path / "again.raw").read_bytes()
    assert rewritten.read_text().replace("again", "rand") == path.read_text()


def test_size_mismatch_is_reported(tmp_path):
    path = write_volume(Volume3D.zeros((2, 2, 2)), tmp_path / "v.svh")
    path.write_text(path.read_text().replace("DIMS=2 2 2", "DIMS=3 2 2"))
    with pytest.raises(SizeMismatchError):
        read_volume(path)


def test_malformed_header_is_reported(tmp_path):
    path = write_volume(Volume3D.zeros((2, 2, 2)), tmp_path / "v.svh")
    path.write_text(path.read_text().replace("DIMS=2 2 2", "DIMS=two 2 2"))
    with pytest.raises(MalformedHeaderError):
        read_volume(path)
    path = write_volume(Volume3D.zeros((2, 2, 2)), tmp_path / "w.svh")
    path.write_text("\n".join(l for l in path.read_text().splitlines() if not l.startswith("SPACING")))
    with pytest.raises(MalformedHeaderError):
        read_volume(path)


def test_missing_payload_and_header_are_distinct_errors(tmp_path):
    path = write_volume(Volume3D.zeros((2, 2, 2)), tmp_path / "v.svh")
    (tmp_path / "v.raw").unlink()
    with pytest.raises(PayloadReadError):
        read_volume(path)
    with pytest.raises(MissingArtifactError):
        read_volume(tmp_path / "nowhere.svh")


def test_heatmap_stack_validates_geometry():
    a = Volume3D.zeros((2, 2, 2))
    b = Volume3D.zeros((2, 2, 2), (2.0, 1.0, 1.0))
    with pytest.raises(ShapeError):
        HeatmapStack.from_volumes([a, b], ["T1", "T2"])
    with pytest.raises(ShapeError):
        HeatmapStack.from_volumes([a], ["T1", "T2"])
    stack = HeatmapStack.from_volumes([a, a.like(np.ones((2, 2, 2)))], ["T1", "T2"])
    assert stack.channel("T2").data.sum() == 8.0


def test_target_stack_zeroes_absent_labels(desk_template):
    landmarks = LandmarkSet.from_arrays(["T8", "T9"], [[30, 30, 100], [30, 30, 85]], [True, False])
    stack = make_target_stack(landmarks, 12.0, desk_template)
    assert stack.labels == ("T8", "T9")
    assert stack.channel("T8").data.max() > 0
    assert not stack.channel("T9").data.any()


def test_normalize_stack_keeps_zero_channels():
    data = np.zeros((2, 2, 2, 2))
    data[0, 0, 0, 0] = 3.0
    data[0, 1, 1, 1] = 1.0
    out = normalize_stack(HeatmapStack(("T1", "T2"), data))
    assert out.data[0].sum() == pytest.approx(1.0)
    assert out.data[0, 0, 0, 0] == pytest.approx(0.75)
    assert not out.data[1].any()


def test_stack_directory_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    data = rng.uniform(size=(3, 4, 4, 4)).astype(np.float32)
    stack = HeatmapStack(("L1", "L2", "L3"), data, (2.0, 2.0, 2.0), (1.0, 2.0, 3.0))
    back = read_stack(write_stack(stack, tmp_path / "maps"))
    assert back.labels == stack.labels
    np.testing.assert_array_equal(back.data, stack.data)
