import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twin.ecg import points_inside_mesh
from twin.geometry import (
    BiventricularShape,
    GeometryError,
    TetMesh,
    default_electrodes,
    generate_biventricular,
    generate_slab,
    tet_signed_volumes,
)


def test_slab_counts():
    mesh, _, _ = generate_slab(3, 3, 3, 0.15, 0)
    assert mesh.n_nodes == 27
    assert mesh.n_tets == 48


def test_slab_origin_coordinates():
    mesh, _, coords = generate_slab(2, 2, 2, 0.1, 0)
    k = int(np.flatnonzero(np.all(mesh.nodes == 0, axis=1))[0])
    assert coords.ab[k] == coords.tm[k] == coords.tv[k] == coords.pa[k] == 0.0


def test_slab_fibres_orthonormal():
    _, fibres, _ = generate_slab(4, 4, 4, 0.1, 30)
    assert fibres.orthonormality_error() < 1e-6


@pytest.mark.parametrize("args", [(1, 3, 3, 0.1), (3, 3, 3, 0.0), (3, 3, 3, -0.1)])
def test_slab_rejects_bad_input(args):
    with pytest.raises(GeometryError):
        generate_slab(*args)


@given(st.integers(2, 5), st.integers(2, 5), st.integers(2, 5), st.floats(0.01, 1.0))
@settings(max_examples=25, deadline=None)
def test_kuhn_tiles_each_cube(nx, ny, nz, h):
    mesh, _, _ = generate_slab(nx, ny, nz, h, 0)
    vols = mesh.element_volumes.reshape(-1, 6).sum(axis=1)
    np.testing.assert_allclose(vols, h**3, rtol=1e-12)
    assert np.all(mesh.element_volumes > 0)


@given(st.integers(2, 4), st.floats(-90, 90))
@settings(max_examples=15, deadline=None)
def test_adjacency_symmetric(n, angle):
    mesh, fibres, coords = generate_slab(n, n + 1, n, 0.1, angle)
    for i in range(mesh.n_nodes):
        for j, p, length in mesh.neighbors(i):
            back = {k: q for k, q, _ in mesh.neighbors(j)}
            assert i in back
            np.testing.assert_array_equal(back[i], -p)
            assert length > 0
    arr = coords.as_array()
    assert arr.min() >= 0 and arr.max() <= 1
    assert fibres.orthonormality_error() < 1e-6


def test_every_node_in_a_tet():
    with pytest.raises(GeometryError, match="belongs to no tet"):
        TetMesh.from_arrays(np.vstack([np.eye(3), [[0, 0, 0], [5, 5, 5]]]), [[3, 0, 1, 2]])


def test_reorientation_gives_positive_volumes():
    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    assert tet_signed_volumes(nodes, np.array([[0, 2, 1, 3]]))[0] < 0
    mesh = TetMesh.from_arrays(nodes, [[0, 2, 1, 3]])
    assert mesh.element_volumes[0] == pytest.approx(1 / 6)
    with pytest.raises(GeometryError):
        TetMesh.from_arrays(nodes, [[0, 2, 1, 3]], reorient=False)


def test_biventricular_invariants(biv):
    mesh, fibres, coords = biv
    assert np.all(mesh.element_volumes > 0)
    assert fibres.orthonormality_error() < 1e-6
    for name in ("ab", "tm", "tv", "pa"):
        c = getattr(coords, name)
        assert c.min() == 0.0 and c.max() == 1.0, name
    assert np.all(mesh.adj_len > 0)


@pytest.mark.slow
def test_biventricular_resolution_015_size():
    mesh, fibres, coords = generate_biventricular(0.15)
    assert mesh.n_nodes >= 3000
    assert np.all(mesh.element_volumes > 0)
    assert fibres.orthonormality_error() < 1e-6
    assert coords.as_array().min() >= 0 and coords.as_array().max() <= 1


def test_biventricular_apex_and_endocardium(biv):
    mesh, _, coords = biv
    apex = int(np.argmin(mesh.nodes[:, 2]))
    assert coords.ab[apex] == 0.0
    lv_endo = mesh.surfaces["lv_endo"]
    assert len(lv_endo) > 0
    assert np.all(coords.tm[lv_endo] == 0.0)


def test_biventricular_rejects_bad_shape():
    with pytest.raises(GeometryError):
        generate_biventricular(0.25, BiventricularShape(lv_endo=(2.5, 1.2, 3.0)))
    with pytest.raises(GeometryError):
        generate_biventricular(0.5)


def test_electrodes_outside_and_distinct(biv, slab):
    for mesh, _, _ in (biv, slab):
        el = default_electrodes(mesh)
        assert el.positions.shape == (9, 3)
        assert len(np.unique(el.positions, axis=0)) == 9
        assert not points_inside_mesh(mesh, el.positions).any()


def test_electrodes_deterministic(slab):
    mesh = slab[0]
    np.testing.assert_array_equal(default_electrodes(mesh).positions, default_electrodes(mesh).positions)


@given(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50)))
@settings(max_examples=20, deadline=None)
def test_electrodes_translate_with_mesh(offset):
    mesh, _, _ = generate_slab(3, 4, 5, 0.2, 0)
    moved = TetMesh.from_arrays(mesh.nodes + np.asarray(offset), mesh.tets)
    np.testing.assert_allclose(default_electrodes(moved).positions,
                               default_electrodes(mesh).positions + np.asarray(offset), atol=1e-9)


def test_precordial_electrodes_away_from_heart(biv):
    mesh = biv[0]
    el = default_electrodes(mesh)
    centre = mesh.nodes.mean(axis=0)
    d = np.linalg.norm(el.positions[3:] - centre, axis=1)
    extent = np.linalg.norm(mesh.nodes.max(axis=0) - mesh.nodes.min(axis=0))
    assert np.all(d > 0.5 * extent)
