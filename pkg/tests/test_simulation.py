import numpy as np
import pytest

from twin.activation import ConductionVelocities, RootNodeSet, solve_eikonal
from twin.ecg import pseudo_ecg
from twin.geometry import default_electrodes, generate_slab
from twin.repolarisation import ApdGradientParams, compute_smoothing_weights, smooth_field
from twin.simulation import ForwardError, ForwardModel

THETA = ApdGradientParams(1.0, 0.1, -1.0, 0.3, 216.0, 294.0)


@pytest.fixture(scope="module")
def slab_model(table):
    mesh, fibres, coords = generate_slab(6, 5, 5, 0.1, 20.0)
    cv = ConductionVelocities()
    t_a = solve_eikonal(mesh, fibres, cv, RootNodeSet.at_zero([0]))
    el = default_electrodes(mesh)
    return ForwardModel.build(mesh, fibres, coords, el, t_a, table, cv, duration=450), (mesh, fibres, el, cv)


def test_fast_ecg_matches_explicit_smoothing(slab_model):
    fm, (mesh, fibres, el, cv) = slab_model
    fast = fm.raw_ecg(THETA).leads
    field = smooth_field(fm.field(THETA, smooth=False), compute_smoothing_weights(mesh, fibres, cv))
    slow = pseudo_ecg(field, mesh, el).leads
    assert np.abs(fast - slow).max() <= 1e-9 * np.abs(slow).max()


def test_unsmoothed_model(slab_model, table):
    fm, (mesh, fibres, el, cv) = slab_model
    raw = ForwardModel.build(mesh, fibres, fm.coords, el, fm.t_a, table, cv, duration=450, smoothing=False)
    slow = pseudo_ecg(raw.field(THETA), mesh, el).leads
    np.testing.assert_allclose(raw.raw_ecg(THETA).leads, slow, atol=1e-9 * np.abs(slow).max())


def test_st_window_starts_after_activation(slab_model):
    fm, _ = slab_model
    assert fm.st_start == np.ceil(fm.t_a.max()) + 30
    full, st = fm.ecg(THETA), fm.st_ecg(THETA)
    np.testing.assert_array_equal(st.leads, full.leads[:, int(fm.st_start):])
    assert np.abs(full.leads).max() == pytest.approx(1.0)


def test_with_table_keeps_operators(slab_model):
    fm, _ = slab_model
    _ = fm.projections
    longer = fm.with_table(fm.table, duration=500)
    assert longer.duration == 500 and longer.rounds.shape == (500,)
    np.testing.assert_allclose(longer.raw_ecg(THETA).leads[:, :450], fm.raw_ecg(THETA).leads, rtol=1e-12, atol=1e-12)


def test_shape_checks(slab_model):
    fm, _ = slab_model
    with pytest.raises(ForwardError):
        ForwardModel(fm.mesh, fm.coords, fm.t_a[:-1], fm.table, fm.weights, fm.lead_field)
    with pytest.raises(ForwardError):
        ForwardModel(fm.mesh, fm.coords, fm.t_a, fm.table, None, fm.lead_field, duration=3,
                     rounds=np.array([0, 1, 1]))
