"""Projeção esférica e média por janela circular."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import assert_gradcheck
from data.errors import ConfigError, DimensionError
from engine.projection import SensorSpec, project, unproject, window_mean, window_mean_segments
from engine.tensor import constant, mul, parameter, sum_all

SPEC = SensorSpec(height=16, width=256, fov_down_deg=-22.5, fov_up_deg=22.5)


def test_azimuth_convention():
    xyz = np.array([[10.0, 0.0, 0.0], [-10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, -10.0, 0.0]])
    image = project(xyz, SPEC)
    cols = image.cell_id % SPEC.width
    np.testing.assert_array_equal(cols, [128, 0, 64, 192])


def test_elevation_is_clamped_to_border_rows():
    xyz = np.array([[1.0, 0.0, 50.0], [1.0, 0.0, -50.0], [10.0, 0.0, 0.0]])
    rows = project(xyz, SPEC).cell_id // SPEC.width
    np.testing.assert_array_equal(rows, [0, SPEC.height - 1, SPEC.height // 2])


def test_origin_point_is_kept():
    image = project(np.zeros((1, 3)), SPEC)
    assert image.range[0] == 0.0
    assert image.cell_id[0] == (SPEC.height // 2) * SPEC.width + SPEC.width // 2


def test_occupancy_counts_every_point(rng):
    xyz = rng.normal(scale=10.0, size=(500, 3))
    image = project(xyz, SPEC)
    assert image.occupancy.shape == (SPEC.num_cells,)
    assert image.occupancy.sum() == 500
    assert np.all((image.cell_id >= 0) & (image.cell_id < SPEC.num_cells))
    np.testing.assert_allclose(image.range, np.linalg.norm(xyz, axis=1))


def test_project_rejects_bad_shape():
    with pytest.raises(DimensionError):
        project(np.zeros((4, 2)), SPEC)


@pytest.mark.parametrize(
    "kwargs",
    [dict(height=0), dict(width=0), dict(fov_down_deg=10.0, fov_up_deg=5.0)],
)
def test_sensor_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        SensorSpec(**kwargs)


def test_sensor_spec_from_dict_roundtrip():
    assert SensorSpec.from_dict(SPEC.as_dict()) == SPEC
    with pytest.raises(ConfigError):
        SensorSpec.from_dict({"height": 4})


def test_unproject_gathers_cell_rows(rng):
    image = project(rng.normal(size=(20, 3)), SPEC)
    cells = constant(np.arange(SPEC.num_cells, dtype=float)[:, None])
    np.testing.assert_array_equal(unproject(cells, image).data[:, 0], image.cell_id)
    with pytest.raises(DimensionError):
        unproject(constant(np.zeros((3, 1))), image)


def test_window_mean_identity_for_k1(rng):
    cells = constant(rng.normal(size=(4 * 6, 2)))
    np.testing.assert_allclose(window_mean(cells, 4, 6, 1).data, cells.data)


def test_window_mean_keeps_constant_fields():
    cells = constant(np.full((5 * 8, 3), 2.5))
    np.testing.assert_allclose(window_mean(cells, 5, 8, 3).data, 2.5)


def test_window_mean_wraps_horizontally_and_replicates_vertically():
    grid = np.zeros((3, 5, 1))
    grid[0, 0, 0] = 9.0
    out = window_mean(constant(grid.reshape(-1, 1)), 3, 5, 3).data.reshape(3, 5)
    # linha 0 vê a si mesma duas vezes (borda replicada) e a linha 1 uma vez
    assert out[0, 4] == pytest.approx(2.0)
    assert out[0, 1] == pytest.approx(2.0)
    assert out[1, 4] == pytest.approx(1.0)
    assert out[2, 0] == pytest.approx(0.0)
    assert out[0, 2] == pytest.approx(0.0)


def test_window_mean_gradient(rng):
    cells = parameter(rng.normal(size=(4 * 5, 2)))
    weights = constant(rng.normal(size=(4 * 5, 2)))
    assert_gradcheck(lambda: sum_all(mul(window_mean(cells, 4, 5, 3), weights)), [cells])


def test_window_mean_segments_are_independent(rng):
    first = rng.normal(size=(3 * 4, 2))
    second = rng.normal(size=(3 * 6, 2))
    stacked = window_mean_segments(constant(np.vstack([first, second])), [(3, 4), (3, 6)], 1)
    np.testing.assert_allclose(stacked.data, np.vstack([first, second]))
    joint = window_mean_segments(constant(np.vstack([first, second])), [(3, 4), (3, 6)], 3)
    np.testing.assert_allclose(joint.data[:12], window_mean(constant(first), 3, 4, 3).data)
    np.testing.assert_allclose(joint.data[12:], window_mean(constant(second), 3, 6, 3).data)


@pytest.mark.parametrize("k", [0, 2, 7])
def test_window_mean_rejects_bad_window(k):
    with pytest.raises(ConfigError):
        window_mean(constant(np.zeros((4 * 4, 1))), 4, 4, k)


def test_window_mean_rejects_row_mismatch():
    with pytest.raises(DimensionError):
        window_mean(constant(np.zeros((10, 1))), 4, 4, 3)
