import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from donorpair.gates import (
    FidelityGrid,
    crot_error_budget,
    crot_pulse,
    crot_sequence,
    crot_unitary,
    dephasing_error_estimate,
    exchange_trace,
    fidelity_grid,
    log_axis,
    phase_decomposition,
    population_map,
    rabi_amplitude,
    residual_swap_error,
    rotating_frame_hamiltonian,
    secular_hamiltonian,
    secular_propagator,
    simulated_swap_amplitude,
    swap_duration,
    unitarity_residual,
    x2_amplitude_ratio,
    x2_unitary,
)
from donorpair.pulses import PulseShape
from donorpair.spin import NuclearConfig, SystemParams, delta_bz, dressed_basis

MHZ = 1e6

params_st = st.builds(
    SystemParams,
    B0=st.floats(0.5, 3.0),
    A1=st.floats(50 * MHZ, 150 * MHZ),
    A2=st.floats(50 * MHZ, 150 * MHZ),
    J=st.floats(1e3, 500 * MHZ),
)
configs = st.sampled_from(list(NuclearConfig))


def wrap_quarter_diff(a, b):
    d = math.remainder(a - b, math.pi / 2)
    return abs(d)


# --- SWAP ---------------------------------------------------------------------


def test_rabi_amplitude_examples():
    assert rabi_amplitude(0.0, 1.0) == 0.0
    assert rabi_amplitude(10.0, 1.0) == pytest.approx(100 / 101, rel=1e-15)
    assert rabi_amplitude(3.0, 3.0) == 0.5
    with pytest.raises(ValueError):
        rabi_amplitude(0.0, 0.0)


def test_swap_duration_examples():
    assert swap_duration(0.5, 25 * MHZ, 1e-3) == pytest.approx(10e-9, rel=1e-12)
    assert swap_duration(1.0, 25 * MHZ, 0.0) == pytest.approx(20e-9, rel=1e-15)
    assert swap_duration(0.5, 25 * MHZ, 25 * MHZ) == pytest.approx(0.5 / (2 * 25 * MHZ * math.sqrt(2)), rel=1e-15)
    with pytest.raises(ValueError):
        swap_duration(0.5, 0.0, 1.0)
    with pytest.raises(ValueError):
        swap_duration(2.5, 1.0, 1.0)


def test_residual_swap_error_examples():
    assert residual_swap_error(0.0, 117 * MHZ, 1e-3) == 0.0
    assert residual_swap_error(32.0, 0.0, 1e-3) == pytest.approx(math.sin(math.pi * 32e-3) ** 2, rel=1e-14)
    assert residual_swap_error(32.0, 0.0, 1e-3) == pytest.approx(0.0101, abs=2e-4)
    assert residual_swap_error(32.0, 117 * MHZ, 1e-3) <= rabi_amplitude(32.0, 117 * MHZ) * (1 + 1e-12)
    with pytest.raises(ValueError):
        residual_swap_error(1.0, 0.0, -1.0)


def test_residual_swap_error_is_monotone_in_wait():
    waits = np.linspace(0, 0.05, 200)
    vals = [residual_swap_error(32.0, 0.0, w) for w in waits]
    assert np.all(np.diff(vals) >= 0)
    assert vals[-1] == pytest.approx(1.0)


def test_exchange_trace_stationary_and_validation():
    p = SystemParams(J=5 * MHZ)
    t = np.linspace(0, 1e-6, 11)
    s1, s2 = exchange_trace(p, NuclearConfig.DownUp, [1, 0, 0, 0], t)
    assert np.allclose(s1, 0.5) and np.allclose(s2, 0.5)
    # in the full model only the fully polarised state is stationary
    psi16 = np.zeros(16)
    psi16[NuclearConfig.UpUp.index] = 1
    s1, s2 = exchange_trace(p, NuclearConfig.UpUp, psi16, t)
    assert np.allclose(s1, 0.5, atol=1e-12) and np.allclose(s2, 0.5, atol=1e-12)
    with pytest.raises(ValueError):
        exchange_trace(p, NuclearConfig.DownUp, np.ones(8) / math.sqrt(8), t)
    with pytest.raises(ValueError):
        exchange_trace(p, NuclearConfig.DownUp, [1, 1, 0, 0], t)


def test_exchange_trace_swing_at_ten_dbz():
    c = NuclearConfig.UpUp
    base = SystemParams()
    dBz = delta_bz(base, c)
    p = base.replace(J=10 * dBz)
    period = 1 / math.hypot(p.J, dBz)
    t = np.linspace(0, period, 4001)
    s1, _ = exchange_trace(p, c, [0, 0, 1, 0], t)
    assert s1[0] == pytest.approx(-0.5)
    assert s1.max() == pytest.approx(-0.5 + 100 / 101, abs=1e-6)
    assert s1.max() > 0.48


@settings(max_examples=40, deadline=None)
@given(params_st, configs, st.floats(-2.0, 2.0))
def test_reduced_amplitude_equals_rabi_formula(p, c, log_ratio):
    dBz = delta_bz(p, c)
    if dBz < 1e3:
        return
    q = p.replace(J=dBz * 10**log_ratio)
    assert simulated_swap_amplitude(q, c) == pytest.approx(rabi_amplitude(q.J, dBz), abs=1e-9)


@pytest.mark.parametrize("config", list(NuclearConfig))
@pytest.mark.parametrize("ratio", [0.3, 1.0, 3.0])
def test_full_model_agrees_in_high_field(config, ratio):
    base = SystemParams()
    B0 = 1e4 * base.A_bar / base.gamma_e * 1.01
    p = base.replace(B0=B0)
    dBz = delta_bz(p, config)
    q = p.replace(J=ratio * dBz)
    full = simulated_swap_amplitude(q, config, model="full")
    red = simulated_swap_amplitude(q, config, model="reduced")
    assert abs(full - red) <= 1e-2


# --- CROT budget and grid -----------------------------------------------------


def test_budget_inherent_error_closed_form():
    base = SystemParams()
    b = crot_error_budget(base.replace(J=base.A_bar), 400e-9, 2e3)
    assert b.inherent == pytest.approx(math.sin(math.pi / 8) ** 2, rel=1e-14)
    assert b.inherent == pytest.approx(0.1464, abs=1e-4)


def test_budget_low_j_collapse():
    base = SystemParams()
    b = crot_error_budget(base.replace(J=1.0), 100e-9, 2e3)
    assert b.inherent < 1e-12
    assert b.off_resonant[0] > 0.99
    assert b.fidelity == 0.0


def test_budget_composition():
    base = SystemParams()
    b = crot_error_budget(base.replace(J=1e6), 400e-9, 2e3)
    terms = (b.inherent, *b.off_resonant, b.incomplete)
    assert all(0 <= x <= 1 for x in terms)
    assert b.fidelity == pytest.approx(max(0.0, 1 - sum(terms)), abs=1e-15)


def test_crot_pulse_calibration():
    p = SystemParams(J=2e6)
    pulse = crot_pulse(p, 100e-9)
    assert pulse.shape is PulseShape.GAUSSIAN and pulse.duration == 100e-9


@settings(max_examples=25, deadline=None)
@given(st.floats(3.0, 9.0), st.floats(-8.0, -5.0), st.sampled_from([2e3, 3.2e6]))
def test_budget_bounded_by_inherent_error(log_j, log_t, sigma):
    p = SystemParams(J=10**log_j)
    b = crot_error_budget(p, 10**log_t, sigma)
    terms = (b.inherent, *b.off_resonant, b.incomplete)
    assert all(-1e-12 <= x <= 1 + 1e-12 for x in terms)
    assert 0 <= b.fidelity <= 1 - math.sin(dressed_basis(p).theta) ** 2 + 1e-15


def test_fidelity_grid_order_independent_and_parallel():
    J = log_axis(1e4, 1e8, 5)
    T = log_axis(3e-8, 3e-6, 4)
    g = fidelity_grid(SystemParams(), J, T, 2e3, "iso")
    # evaluate the points in a shuffled order
    rng = np.random.default_rng(3)
    pts = [(i, k) for i in range(J.size) for k in range(T.size)]
    F = np.empty_like(g.F)
    for n in rng.permutation(len(pts)):
        i, k = pts[n]
        F[i, k] = crot_error_budget(SystemParams(J=J[i]), T[k], 2e3).fidelity
    assert np.array_equal(F, g.F)
    gw = fidelity_grid(SystemParams(), J, T, 2e3, "iso", workers=2)
    assert np.array_equal(gw.F, g.F)
    assert np.all((g.F >= 0) & (g.F <= 1))


def test_fidelity_grid_single_point_matches_budget():
    J = log_axis(1e5, 1e7, 3)
    T = log_axis(1e-7, 1e-6, 2)
    g = fidelity_grid(SystemParams(), J, T, 2e3, "iso")
    b = crot_error_budget(SystemParams(J=J[1]), T[1], 2e3)
    assert g.F[1, 1] == b.fidelity


def test_fidelity_grid_summary_helpers():
    J = np.array([1e4, 1e5, 1e6])
    T = np.array([1e-7, 1e-6])
    F = np.array([[0.5, 0.995], [0.999, 0.9995], [0.2, 0.991]])
    g = FidelityGrid(J=J, T=T, F=F, sigma=2e3, material="iso")
    assert g.peak() == (0.9995, 1e5, 1e-6)
    assert g.j_extent(0.99) == (1e4, 1e6)
    assert g.j_span_decades(0.99) == pytest.approx(2.0)
    assert g.t_extent(0.999) == (1e-6, 1e-6)
    assert g.j_extent(0.9999) is None and g.j_span_decades(0.9999) == 0.0


def test_fidelity_grid_rejects_bad_axes():
    with pytest.raises(ValueError):
        FidelityGrid(J=np.array([2.0, 1.0]), T=np.array([1e-7]), F=np.zeros((2, 1)), sigma=1.0, material="x")


def test_log_axis():
    ax = log_axis(1e3, 1e9, 7)
    assert np.allclose(ax, 10.0 ** np.arange(3, 10))
    assert np.all(np.diff(ax) > 0)


# --- Hamiltonians and unitaries -------------------------------------------------


def test_secular_hamiltonian_entries():
    p = SystemParams(J=3 * MHZ)
    E = dressed_basis(p).energies
    H0 = secular_hamiltonian(p, None, 0.0)
    assert np.allclose(H0, np.diag(np.diag(H0)))
    assert H0[0, 0].real == pytest.approx(E[0] - (E[2] - E[3]), rel=1e-15)
    pulse = crot_pulse(p, 100e-9)
    H = secular_hamiltonian(p, pulse, 50e-9)
    assert H[2, 3].real == pytest.approx(p.gamma_e * pulse.b1_max * dressed_basis(p).mu_t, rel=1e-14)
    assert H[0, 1] == 0 and H[1, 3] == 0


@settings(max_examples=50, deadline=None)
@given(params_st, st.floats(0.0, 1.0))
def test_rotating_frame_hamiltonian_hermitian(p, s):
    pulse = crot_pulse(p, 100e-9)
    H = rotating_frame_hamiltonian(p, pulse, s * 100e-9, 28e9)
    assert np.max(np.abs(H - H.conj().T)) <= 1e-12 * np.max(np.abs(H))


def test_rotating_frame_coupling_ratio():
    p = SystemParams(J=40 * MHZ)
    pulse = crot_pulse(p, 100e-9)
    H = rotating_frame_hamiltonian(p, pulse, 50e-9, 28e9)
    th = dressed_basis(p).theta
    assert (H[0, 1] / H[0, 2]).real == pytest.approx((1 - math.tan(th)) / (1 + math.tan(th)), rel=1e-13)
    assert np.allclose(np.diag(rotating_frame_hamiltonian(p, None, 0.0, 0.0)).real, dressed_basis(p).energies)


def test_crot_unitary_structure():
    p = SystemParams(J=2 * MHZ)
    U0 = crot_unitary(p, 0.0, 1e-7)
    assert np.allclose(np.abs(U0), np.eye(4))
    U2 = crot_unitary(p, math.pi / 2, 1e-7)
    assert abs(U2[2, 2]) < 1e-15 and abs(U2[3, 3]) < 1e-15
    assert abs(U2[2, 3]) == pytest.approx(1.0)
    assert unitarity_residual(U2) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(params_st, st.floats(0.0, math.pi), st.floats(1e-9, 1e-6))
def test_crot_unitary_composition(p, phi, t):
    lhs = crot_unitary(p, phi, t) @ crot_unitary(p, phi, t)
    assert np.max(np.abs(lhs - crot_unitary(p, 2 * phi, 2 * t))) <= 1e-9


def test_crot_unitary_matches_secular_propagator():
    p = SystemParams(J=2 * MHZ)
    pulse = crot_pulse(p, 100e-9)
    U = secular_propagator(p, pulse)
    assert np.max(np.abs(U - crot_unitary(p, math.pi / 2, 100e-9))) <= 1e-8


def test_phase_decomposition_examples():
    d = phase_decomposition(np.eye(4))
    assert (d.theta_1, d.theta_2, d.theta_12, d.theta_g) == (0.0, 0.0, 0.0, 0.0)
    a = 0.7
    d = phase_decomposition(np.exp(1j * a) * np.eye(4))
    assert d.theta_g == pytest.approx(a)
    assert abs(d.theta_1) < 1e-15 and abs(d.theta_2) < 1e-15 and abs(d.theta_12) < 1e-15
    with pytest.raises(ValueError):
        phase_decomposition(np.ones((4, 4)))
    with pytest.raises(ValueError):
        phase_decomposition(np.eye(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-math.pi, math.pi), min_size=4, max_size=4))
def test_phase_decomposition_reconstructs(phases):
    d = phase_decomposition(np.diag(np.exp(1j * np.array(phases))))
    uu, ud, du, dd = d.basis_phases
    assert wrap_quarter_diff(d.theta_12, (ud + du - uu - dd) / 4) <= 1e-12
    assert -math.pi / 4 < d.theta_12 <= math.pi / 4


def test_u2_interaction_phase():
    p = SystemParams(J=2 * MHZ)
    t = 1e-7
    E = dressed_basis(p).energies
    g1 = -2 * math.pi * t * (E[0] - (E[2] - E[3]))
    g2 = -2 * math.pi * t * E[1]
    d = phase_decomposition(crot_unitary(p, math.pi / 2, t))
    assert wrap_quarter_diff(d.theta_12, (g2 - g1) / 4) <= 1e-9


def test_x2_properties():
    p = SystemParams(J=2 * MHZ)
    X = x2_unitary(p, 1e-7)
    assert abs(phase_decomposition(X).theta_12) <= 1e-12
    XX = X @ X
    assert np.allclose(np.abs(XX), np.eye(4))
    th = dressed_basis(p).theta
    assert x2_amplitude_ratio(p) == pytest.approx((math.cos(th) + math.sin(th)) / (math.cos(th) - math.sin(th)))


@settings(max_examples=100, deadline=None)
@given(params_st, st.floats(1e-8, 1e-6), st.floats(1e-8, 1e-6))
def test_crot_sequence_properties(p, t_sqrt, t_flip):
    U3 = crot_sequence(p, t_sqrt, t_flip)
    X = x2_unitary(p, t_flip)
    assert unitarity_residual(U3) <= 1e-10
    assert unitarity_residual(X) <= 1e-10
    assert abs(phase_decomposition(U3).theta_12) <= 1e-10
    assert abs(phase_decomposition(X).theta_12) <= 1e-10
    P = population_map(U3)
    expected = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=float)
    assert np.max(np.abs(P - expected)) <= 1e-10


def test_population_map_and_unitarity_residual():
    U = np.array([[0, 1], [1, 0]], dtype=complex)
    assert np.array_equal(population_map(U), np.abs(U) ** 2)
    assert unitarity_residual(U) == 0.0
    assert unitarity_residual(2 * U) == pytest.approx(3.0)


def test_dephasing_error_estimate():
    assert dephasing_error_estimate(1e-6, 1e-1) == pytest.approx(1e-5, rel=1e-12)
    assert dephasing_error_estimate(0.0, 1e-1) == 0.0
    assert dephasing_error_estimate(80e-9, 0.1) == pytest.approx(8e-7, rel=1e-12)
    with pytest.raises(ValueError):
        dephasing_error_estimate(1e-6, 0.0)


def test_iso_400ns_optimum_reaches_four_nines():
    from scipy.optimize import minimize_scalar

    def infidelity(log_j):
        return 1 - crot_error_budget(SystemParams(J=10**log_j), 400e-9, 2e3).fidelity

    res = minimize_scalar(infidelity, bounds=(5.0, 7.5), method="bounded", options={"xatol": 1e-4})
    assert 1 - res.fun >= 0.9999
