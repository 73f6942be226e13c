import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stdisagg.errors import IndexOutOfRange, InvalidExtent
from stdisagg.lattice import (
    Field,
    build_lattice,
    coords_index,
    crop_interior,
    default_buffer,
    embed_interior,
    node_coords,
)


def test_paper_grid_spacing():
    spec = build_lattice(24, 24, 24, (0.0, 1.0, 0.0, 1.0))
    assert spec.dx == pytest.approx(1 / 24)
    assert spec.dy == pytest.approx(1 / 24)
    assert spec.n_spatial == 576


def test_single_node():
    spec = build_lattice(1, 1, 1)
    assert spec.n_nodes == 1
    assert spec.node_index(0, 0, 0) == 0


def test_buffer_arithmetic():
    spec = build_lattice(24, 24, 1, buffer=3)
    assert (spec.nbx, spec.nby) == (30, 30)
    assert spec.interior_mask().sum() == 576


def test_first_node_coords():
    spec = build_lattice(2, 2, 2, (0.0, 1.0, 0.0, 1.0), t0=1.0, dt=1.0)
    x, y, t = node_coords(spec, 0)
    assert (x, y, t) == (pytest.approx(0.25), pytest.approx(0.25), 1.0)


def test_roundtrip_5x4x3():
    spec = build_lattice(5, 4, 3, buffer=2)
    for idx in range(spec.n_nodes):
        assert coords_index(spec, *node_coords(spec, idx)) == idx


@settings(max_examples=30, deadline=None)
@given(
    nx=st.integers(1, 8), ny=st.integers(1, 8), nt=st.integers(1, 5),
    buffer=st.integers(0, 3),
)
def test_roundtrip_property(nx, ny, nt, buffer):
    spec = build_lattice(nx, ny, nt, (0.0, 2.0, -1.0, 1.0), buffer=buffer)
    for idx in range(0, spec.n_nodes, max(1, spec.n_nodes // 17)):
        assert coords_index(spec, *node_coords(spec, idx)) == idx


def test_crop_identity_without_buffer():
    spec = build_lattice(3, 3, 2)
    f = Field(spec, np.arange(float(spec.n_nodes)))
    assert crop_interior(f) is f


def test_crop_embed_inverse():
    spec = build_lattice(4, 3, 2, buffer=2)
    inner = Field(spec.interior_spec(), np.arange(float(4 * 3 * 2)))
    f = embed_interior(inner, spec, fill=-1.0)
    back = crop_interior(f)
    assert np.array_equal(back.values, inner.values)


def test_default_buffer():
    assert default_buffer(0.2, 1 / 24) == 5
    assert default_buffer(10.0, 1 / 24) == 8  # capped
    assert default_buffer(0.01, 1 / 24) == 1


def test_invalid_inputs():
    with pytest.raises(InvalidExtent):
        build_lattice(0, 2, 2)
    with pytest.raises(InvalidExtent):
        build_lattice(2, 2, 2, (1.0, 1.0, 0.0, 1.0))
    spec = build_lattice(2, 2, 2)
    with pytest.raises(IndexOutOfRange):
        node_coords(spec, 99)
    with pytest.raises(IndexOutOfRange):
        spec.node_index(5, 0, 0)


def test_field_validation():
    spec = build_lattice(2, 2, 2)
    with pytest.raises(IndexOutOfRange):
        Field(spec, np.zeros(3))
    with pytest.raises(InvalidExtent):
        Field(spec, np.full(spec.n_nodes, np.nan))
