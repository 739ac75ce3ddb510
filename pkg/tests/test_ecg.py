import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import naive_discrepancy, naive_electrode_potentials, naive_leads
from twin.activation import ConductionVelocities, RootNodeSet, solve_eikonal
from twin.cellular import DiffusiveCurrentParams, MsCellModel, integrate_ap
from twin.ecg import (
    LEAD_NAMES,
    EcgError,
    EcgSignal,
    compute_t_biomarkers,
    discrepancy,
    discrepancy_terms,
    electrode_potentials,
    load_ecg,
    normalize_ecg,
    pseudo_ecg,
    repolarisation_maxima,
    save_ecg,
    unipolar_electrogram_approx,
)
from twin.geometry import ElectrodeSet, TetMesh, default_electrodes, generate_slab
from twin.repolarisation import assemble_membrane_field


@pytest.fixture(scope="module")
def slab1k(table):
    """10x10x10 slab with one activated corner region painted from the table."""
    mesh, fibres, _ = generate_slab(10, 10, 10, 0.1, 25)
    t_a = solve_eikonal(mesh, fibres, ConductionVelocities(), RootNodeSet.at_zero([0]))
    apd = 200.0 + 80.0 * mesh.nodes[:, 2] / 0.9
    field = assemble_membrane_field(t_a, apd, table, 400)
    return mesh, fibres, field


def _gauss_ecg(centre=300.0, width=30.0, duration=600, amps=None):
    t = np.arange(duration, dtype=float)
    amps = np.ones(8) if amps is None else np.asarray(amps, dtype=float)
    return EcgSignal(amps[:, None] * np.exp(-((t - centre) ** 2) / (2 * width ** 2))[None, :])


# -- pseudo-ECG -------------------------------------------------------------------

def test_uniform_field_gives_zero(slab):
    mesh = slab[0]
    sig = pseudo_ecg(np.full((mesh.n_nodes, 20), -40.0), mesh, default_electrodes(mesh))
    assert np.all(sig.leads == 0.0)


def test_matches_naive_summation(slab1k):
    mesh, _, field = slab1k
    el = default_electrodes(mesh)
    fast = pseudo_ecg(field, mesh, el).leads
    slow = naive_leads(naive_electrode_potentials(field.values, mesh.nodes, mesh.tets, el.positions))
    scale = np.abs(slow).max()
    assert scale > 0
    assert np.abs(fast - slow).max() <= 1e-10 * scale


def test_linear_in_field(slab1k, rng):
    mesh, _, field = slab1k
    el = default_electrodes(mesh)
    other = rng.normal(size=field.values.shape)
    lhs = pseudo_ecg(2.5 * field.values - 0.7 * other, mesh, el).leads
    rhs = 2.5 * pseudo_ecg(field, mesh, el).leads - 0.7 * pseudo_ecg(other, mesh, el).leads
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * np.abs(rhs).max())


def test_einthoven(slab1k):
    mesh, _, field = slab1k
    el = default_electrodes(mesh)
    phi = electrode_potentials(field, mesh, el)
    sig = pseudo_ecg(field, mesh, el)
    la, ll = phi[0], phi[2]
    np.testing.assert_allclose(sig["I"] - sig["II"] + (ll - la), 0.0, atol=1e-9 * np.abs(phi).max())


def test_mirror_negates_antisymmetric_field(rng):
    mesh, _, _ = generate_slab(6, 5, 4, 0.1, 0)
    L = 0.5
    x = mesh.nodes[:, 0] - L / 2
    u = np.sin(7 * x)[:, None] * rng.uniform(0.5, 1.5, 3)[None, :]
    mirror = mesh.nodes * np.array([-1.0, 1.0, 1.0]) + np.array([L, 0.0, 0.0])
    m2 = TetMesh.from_arrays(mirror, mesh.tets)
    el = default_electrodes(mesh)
    el2 = ElectrodeSet(el.positions * np.array([-1.0, 1.0, 1.0]) + np.array([L, 0.0, 0.0]))
    # mirrored node i carries -u_i: the odd field seen through the mirror
    a = electrode_potentials(u, mesh, el)
    b = electrode_potentials(-u, m2, el2)
    np.testing.assert_allclose(b, -a, atol=1e-12 * np.abs(a).max())


def test_electrode_inside_rejected():
    mesh, _, _ = generate_slab(4, 4, 4, 0.1, 0)
    pos = default_electrodes(mesh).positions.copy()
    pos[4] = [0.15, 0.15, 0.15]
    with pytest.raises(EcgError, match="V2"):
        pseudo_ecg(np.zeros((mesh.n_nodes, 3)), mesh, ElectrodeSet(pos))


# -- normalisation -----------------------------------------------------------------

@given(arrays(float, (8, 30), elements=st.floats(-1e3, 1e3)).filter(lambda a: np.abs(a).max() > 1e-6))
@settings(max_examples=50, deadline=None)
def test_normalise_properties(a):
    sig = EcgSignal(a)
    n = normalize_ecg(sig)
    assert np.abs(n.leads).max() == pytest.approx(1.0)
    np.testing.assert_allclose(normalize_ecg(n).leads, n.leads, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(normalize_ecg(sig.scaled(7.0)).leads, n.leads, rtol=1e-12, atol=1e-15)


def test_normalise_zero_rejected():
    with pytest.raises(EcgError):
        normalize_ecg(EcgSignal(np.zeros((8, 10))))


# -- T-wave biomarkers -----------------------------------------------------------------

def test_gaussian_t_wave():
    bm = compute_t_biomarkers(_gauss_ecg(), qrs_onset=0.0)
    assert bm.tpe > 0 and bm.qt > 300
    assert list(bm.t_polarity) == [1] * 8
    assert bm.tpeak_dispersion_v3_v5 == 0.0
    # 5% of a Gaussian peak sits at sqrt(2 ln 20) widths
    assert bm.tpe == pytest.approx(30 * np.sqrt(2 * np.log(20)), abs=0.5)


def test_negative_t_and_dispersion():
    t = np.arange(600, dtype=float)
    leads = np.exp(-((t - 300) ** 2) / 1800.0)[None, :].repeat(8, axis=0)
    leads[0] *= -1
    leads[LEAD_NAMES.index("V5")] = np.exp(-((t - 312) ** 2) / 1800.0)
    bm = compute_t_biomarkers(EcgSignal(leads))
    assert bm.t_polarity[0] == -1
    assert bm.tpeak_dispersion_v3_v5 == pytest.approx(12.0)


def test_biphasic_t_end_is_settle_point():
    # the zero crossing between the lobes is not the end of the wave
    t = np.arange(600, dtype=float)
    x = np.exp(-((t - 280) ** 2) / 800.0) - 0.6 * np.exp(-((t - 340) ** 2) / 800.0)
    bm = compute_t_biomarkers(EcgSignal(np.tile(x, (8, 1))))
    assert bm.t_end[0] > 340


def test_flat_lead_excluded():
    sig = _gauss_ecg(amps=[1, 1, 0, 1, 1, 1, 1, 1])
    bm = compute_t_biomarkers(sig)
    assert bm.excluded == ("V1",)
    with pytest.raises(EcgError):
        compute_t_biomarkers(EcgSignal(np.zeros((8, 100))))


# -- discrepancy -------------------------------------------------------------------------

def test_discrepancy_identity_and_negation():
    sig = _gauss_ecg(amps=np.linspace(-1, 1, 8) + 0.1)
    assert discrepancy(sig, sig) == 0.0
    terms = discrepancy_terms(sig.scaled(-1.0), sig)
    assert terms.correlation_term == 400.0


def test_zero_variance_lead_recorded():
    a = _gauss_ecg()
    b = EcgSignal(np.vstack([np.zeros(600), a.leads[1:]]))
    terms = discrepancy_terms(b, a)
    assert terms.zero_variance_leads == ("I",)
    assert terms.pcc[0] == 0.0


@given(arrays(float, (8, 40), elements=st.floats(-5, 5)), arrays(float, (8, 40), elements=st.floats(-5, 5)))
@settings(max_examples=100, deadline=None)
def test_discrepancy_matches_oracle(a, b):
    if np.abs(b).max() == 0 or np.any(a.std(axis=1) == 0) or np.any(b.std(axis=1) == 0):
        return
    eps = discrepancy(EcgSignal(a), EcgSignal(b))
    assert eps >= 0
    assert eps == pytest.approx(naive_discrepancy(a, b), rel=1e-9, abs=1e-12)


def test_discrepancy_shape_mismatch():
    with pytest.raises(EcgError):
        discrepancy(_gauss_ecg(duration=100), _gauss_ecg(duration=120))


# -- electrograms --------------------------------------------------------------------

def test_electrogram_trivial_cases():
    assert np.all(unipolar_electrogram_approx(np.full(100, 3.0)) == 0.0)
    assert np.all(unipolar_electrogram_approx(np.linspace(0, 1, 50), shift=0) == 0.0)
    e = unipolar_electrogram_approx(np.arange(30.0), shift=20)
    assert np.all(e[:20] == 0) and np.all(e[20:] == 20.0)


def test_ms_electrogram_single_maximum():
    ap = integrate_ap(MsCellModel(), DiffusiveCurrentParams())
    assert len(repolarisation_maxima(ap.v, shift=20)) == 1


def test_bifid_trace_has_two_maxima():
    # a repolarisation with a plateau notch shows up as two maxima
    t = np.arange(600, dtype=float)
    u = np.where(t < 10, -85.0, 30.0)
    u = u - 50 / (1 + np.exp(-(t - 200) / 5)) - 65 / (1 + np.exp(-(t - 300) / 5))
    assert len(repolarisation_maxima(u)) == 2


# -- file round trip -------------------------------------------------------------------

def test_ecg_csv_round_trip(tmp_path, rng):
    sig = EcgSignal(rng.normal(size=(8, 50)))
    save_ecg(sig, tmp_path / "e.csv")
    back = load_ecg(tmp_path / "e.csv")
    np.testing.assert_array_equal(back.leads, sig.leads)


def test_ecg_csv_resampled(tmp_path):
    t = np.arange(0, 10.5, 0.5)
    with open(tmp_path / "e.csv", "w") as fh:
        fh.write("t_ms," + ",".join(LEAD_NAMES) + "\n")
        for x in t:
            fh.write(f"{x}," + ",".join([str(2 * x)] * 8) + "\n")
    back = load_ecg(tmp_path / "e.csv")
    assert back.duration == 11
    np.testing.assert_allclose(back["V4"], 2 * np.arange(11.0))


def test_ecg_csv_bad_header(tmp_path):
    (tmp_path / "e.csv").write_text("t,I\n0,1\n")
    with pytest.raises(EcgError):
        load_ecg(tmp_path / "e.csv")
