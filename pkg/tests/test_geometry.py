import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from learned_sirt.exceptions import GeometryError
from learned_sirt.geometry import (ConeBeamGeometry, GridSpec, geometry_from_dict, geometry_to_dict,
                                   grid_from_dict, grid_to_dict, magnification, make_cone_geometry,
                                   make_grid, make_parallel_geometry)


def test_parallel_thirty_angles_every_twelve_degrees():
    geo = make_parallel_geometry(30, 185, 1.0)
    np.testing.assert_allclose(np.rad2deg(geo.angles), np.arange(0, 360, 12), atol=1e-12)
    assert geo.sino_shape == (30, 185)


def test_parallel_minimal():
    geo = make_parallel_geometry(1, 1, 1.0)
    assert geo.angles.tolist() == [0.0]
    origins, dirs = geo.rays(0)
    assert origins.shape == (1, 2) and dirs.shape == (1, 2)


def test_parallel_lung_geometry():
    geo = make_parallel_geometry(120, 742, 1.0)
    assert geo.sino_shape == (120, 742)


@pytest.mark.parametrize("args", [(0, 10), (10, 0), (10, 10, 0.0), (10, 10, -1.0)])
def test_parallel_rejects_non_positive(args):
    with pytest.raises(GeometryError):
        make_parallel_geometry(*args)


def test_cone_training_geometries():
    g128 = make_cone_geometry(30, 185, 185, 1.0, 1000, 1500)
    g256 = make_cone_geometry(60, 371, 371, 1.0, 1000, 1500)
    assert g128.sino_shape == (30, 185, 185)
    assert g256.sino_shape == (60, 371, 371)


def test_cone_tiny_geometry():
    geo = make_cone_geometry(4, 3, 3, 1.0, 2.0, 3.0)
    src, dirs = geo.rays(0)
    np.testing.assert_allclose(src, [2.0, 0.0, 0.0])
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0)
    # the central ray goes through the isocenter
    np.testing.assert_allclose(dirs[1, 1], [-1.0, 0.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("sad,sdd", [(1500, 1500), (2000, 1500), (0, 10)])
def test_cone_rejects_bad_distances(sad, sdd):
    with pytest.raises(GeometryError):
        make_cone_geometry(4, 3, 3, 1.0, sad, sdd)


def test_cone_defaults():
    geo = ConeBeamGeometry(10, 5, 5)
    assert (geo.sad, geo.sdd, geo.det_pitch) == (1000, 1500, 1.0)


@pytest.mark.parametrize("sad,sdd,expected", [(1000, 1500, 1.5), (100, 200, 2.0)])
def test_magnification(sad, sdd, expected):
    assert magnification(make_cone_geometry(4, 3, 3, 1.0, sad, sdd)) == expected


def test_grid_voxel_centers():
    grid = make_grid((4, 3), 2.0)
    np.testing.assert_array_equal(grid.axis_coords(0), [-3.0, -1.0, 1.0, 3.0])
    np.testing.assert_array_equal(grid.axis_coords(1), [-2.0, 0.0, 2.0])
    assert grid.extent == (8.0, 6.0)


@pytest.mark.parametrize("dims,pitch", [((0, 4), 1.0), ((4, 4), 0.0), ((4,), 1.0), ((2, 2, 2, 2), 1.0)])
def test_grid_rejects_invalid(dims, pitch):
    with pytest.raises(GeometryError):
        GridSpec(dims, pitch)


@given(st.integers(1, 400))
def test_angles_equispaced(n):
    geo = make_parallel_geometry(n, 3)
    if n > 1:
        gaps = np.diff(geo.angles)
        assert np.max(np.abs(gaps - 2 * math.pi / n)) < 1e-12
    assert geo.angles[0] == 0.0 and geo.angles[-1] < 2 * math.pi


positive = st.floats(0.01, 1e4, allow_nan=False)


@given(st.integers(1, 500), st.integers(1, 500), st.integers(1, 500), positive, positive, positive)
def test_cone_serialisation_round_trip(n, rows, cols, pitch, sad, extra):
    geo = make_cone_geometry(n, rows, cols, pitch, sad, sad + extra)
    back = geometry_from_dict(json.loads(json.dumps(geometry_to_dict(geo))))
    assert back == geo


@given(st.integers(1, 500), st.integers(1, 500), positive)
def test_parallel_serialisation_round_trip(n, det, pitch):
    geo = make_parallel_geometry(n, det, pitch)
    assert geometry_from_dict(json.loads(json.dumps(geometry_to_dict(geo)))) == geo


@given(st.lists(st.integers(1, 300), min_size=2, max_size=3), positive)
def test_grid_serialisation_round_trip(dims, pitch):
    grid = make_grid(dims, pitch)
    assert grid_from_dict(json.loads(json.dumps(grid_to_dict(grid)))) == grid


def test_geometry_dict_rejects_unknown_keys():
    d = geometry_to_dict(make_parallel_geometry(3, 3))
    d["tilt"] = 0.1
    with pytest.raises(GeometryError):
        geometry_from_dict(d)
    with pytest.raises(GeometryError):
        geometry_from_dict({"type": "helical"})
