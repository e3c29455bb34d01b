import numpy as np
import pytest
from hypothesis import given, strategies as st

from eulertopo import bloch
from eulertopo import labsim as L
from eulertopo.errors import (
    DegenerateTop,
    GapClosed,
    Infeasible,
    InvalidParameter,
    RamanInvalid,
)

rabi = st.floats(0, 0.3)
phase = st.floats(-np.pi, np.pi)


# -- effective Hamiltonian ---------------------------------------------------------


def test_all_couplings_off():
    p = L.PulseParams(delta_1=0.02, delta_2=-0.03)
    assert np.allclose(L.effective_hamiltonian(p), np.diag([0, -0.02, 0.03]))


def test_single_direct_coupling():
    om, phi = 0.1, 0.7
    p = L.PulseParams(omega_12_1=om, phi_1=phi)
    H = L.effective_hamiltonian(p)
    assert H[0, 1] == pytest.approx(0.5 * om * np.exp(1j * phi))
    # no leakage drive, so no Stark shift
    assert H[0, 0] == pytest.approx(0.0) and H[1, 1] == pytest.approx(0.0)
    # drive 1 leaking onto 1<->3 shifts levels 1 and 3 by om^2 / (4 (omega_z + omega_q))
    p = L.PulseParams(omega_12_1=om, omega_13_1=om, phi_1=phi)
    H = L.effective_hamiltonian(p)
    stark = om**2 / (4 * (p.omega_z + p.omega_q))
    assert H[0, 0].real == pytest.approx(-stark)
    assert H[2, 2].real == pytest.approx(stark)


def test_raman_element():
    p = L.PulseParams(omega_12_3=0.1, omega_13_4=0.2, raman_1=2.0, raman_2=3.0, phi_3=0.4, phi_4=1.5)
    H = L.effective_hamiltonian(p)
    assert abs(H[1, 2]) == pytest.approx(0.1 * 0.2 * 5.0 / (8 * 6.0))
    assert np.angle(H[1, 2]) == pytest.approx(1.5 - 0.4)


@given(*(8 * [rabi]), phase, phase, phase, phase, st.floats(-0.1, 0.1), st.floats(-0.1, 0.1))
def test_hermitian(a, b, c, d, e, f, g, h, p1, p2, p3, p4, d1, d2):
    p = L.PulseParams(a, b, c, d, e, f, g, h, d1, d2, 2.0, 2.5, p1, p2, p3, p4)
    H = L.effective_hamiltonian(p)
    assert np.allclose(H, H.conj().T, atol=1e-15)


def test_raman_validity():
    with pytest.raises(RamanInvalid):
        L.effective_hamiltonian(L.PulseParams(omega_12_3=0.5, raman_1=1.0, raman_2=1.0))
    with pytest.raises(InvalidParameter):
        L.effective_hamiltonian(L.PulseParams(omega_12_1=-0.1))


# -- pulse synthesis -----------------------------------------------------------


def test_round_trip_on_grid():
    KX, KY = bloch.BZGrid(12, 12).mesh()
    T = bloch.euler_ham(1.0, KX, KY)
    for basis in ("none", "12", "13", "auto"):
        sol = L.solve_pulse(T, basis=basis)
        H = sol.logical_hamiltonian()
        want = sol.c[..., None, None] * (T - sol.b[..., None, None] * np.eye(3))
        assert np.abs(H - want).max() / sol.c.max() < 1e-6
        assert np.all(sol.c > 0)


def test_raman_entry_costs_scale():
    weak = np.array([[0, 0.5, 0.5], [0.5, 0, 0], [0.5, 0, 0]])
    strong = np.array([[0, 0.1, 0.1], [0.1, 0, 0.9], [0.1, 0.9, 0]])
    assert L.solve_pulse(weak).c > L.solve_pulse(strong).c


def test_diagonal_target():
    sol = L.solve_pulse(np.diag([1.0, -1.0, -1.0]))
    p = sol.params
    for name in ("omega_12_1", "omega_13_2", "omega_12_3", "omega_13_4"):
        assert abs(float(getattr(p, name))) < 1e-12


def test_c_is_maximal():
    T = bloch.euler_ham(1.0, 0.7, -0.4)
    b = L.PulseBounds()
    c = L.max_scale(T, b)
    assert L._feasible(T, c, b)
    assert not L._feasible(T, c * (1 + 1e-6), b)


def test_infeasible_bounds():
    with pytest.raises(Infeasible):
        L.solve_pulse(bloch.euler_ham(1.0, 0.3, 0.2), L.PulseBounds(rabi_max=0.0))
    with pytest.raises(InvalidParameter):
        L.solve_pulse(np.eye(3), basis="23")


# -- paths and adiabatic preparation ---------------------------------------------


def test_shortest_path_examples():
    assert L.shortest_path((0, 0), (0, 0)).shape == (1, 2)
    p = L.shortest_path((0, 0), (np.pi - 0.1, 0), steps=50)
    assert np.all(np.diff(p[:, 0]) > 0) and np.isclose(p[-1, 0], np.pi - 0.1)
    p = L.shortest_path((np.pi, np.pi), (-np.pi + 0.1, np.pi), steps=10)
    # goes through the seam: kx grows past pi instead of sweeping back
    assert np.all(np.diff(p[:, 0]) > 0)
    assert np.isclose(p[-1, 0], np.pi + 0.1)


def test_kstar_has_top_state():
    for k in L.HIGH_SYMMETRY:
        u3 = bloch.eig_frame(bloch.euler_ham(1.0, *k)).u3
        assert abs(abs(u3[0]) - 1) < 1e-12


def test_prepare_at_kstar():
    prep = L.adiabatic_prepare(1.0, (0, 0), (0, 0))
    assert np.allclose(prep.state, [1, 0, 0])


def test_prepare_slow_schedule():
    k = (0.4 * np.pi, 0.3 * np.pi)
    prep = L.adiabatic_prepare(1.0, (0, 0), k)
    assert abs(bloch.n_vec(1.0, *k) @ prep.state) ** 2 >= 0.99


def test_prepare_requires_top_at_start():
    with pytest.raises(InvalidParameter):
        L.adiabatic_prepare(1.0, (0.5, 0.0), (0.8, 0.1))


def test_gap_check():
    with pytest.raises(GapClosed):
        L.adiabatic_prepare(1.0, (0, 0), (0.5, 0.5), gap_min=10.0)


SAMPLE = [(a, b) for a in (-0.7 * np.pi, 0.1, 0.6 * np.pi) for b in (-0.5 * np.pi, 0.35, 0.8 * np.pi)]


def _fidelities(T):
    return np.array([abs(bloch.n_vec(1.0, *k) @ L.adiabatic_prepare(1.0, None, k, duration=T, steps=100).state) ** 2
                     for k in SAMPLE])


def test_fidelity_monotone_in_duration():
    f = [_fidelities(T) for T in (20.0, 40.0, 80.0)]
    assert np.all(f[1] >= f[0] - 1e-12) and np.all(f[2] >= f[1] - 1e-12)
    # halving the duration lowers the worst case
    assert f[0].min() < f[1].min() < f[2].min()


def test_mixed_prepare_matches_pure():
    k = (0.3, -0.6)
    rho = L.adiabatic_prepare_mixed(1.0, None, k, duration=100.0, steps=100)
    psi = L.adiabatic_prepare(1.0, None, k, duration=100.0, steps=100).state
    assert np.allclose(rho, np.outer(psi, psi.conj()), atol=1e-12)
    noisy = L.adiabatic_prepare_mixed(1.0, None, k, duration=100.0, steps=100, dephasing=0.01)
    assert np.trace(noisy).real == pytest.approx(1.0)
    assert np.real(np.trace(noisy @ noisy)) < 1 - 1e-3


# -- tomography ----------------------------------------------------------------


def test_tomography_examples():
    e = np.eye(3)
    assert L.tomo_probabilities(np.diag([1.0, 0, 0]))[0] == pytest.approx(1)
    assert L.tomo_probabilities(np.diag([0, 1.0, 0]))[1] == pytest.approx(1)
    assert np.allclose(L.tomo_probabilities(e / 3)[0], 1 / 3)


def test_rotation_route_matches_closed_forms(rng):
    for _ in range(100):
        rho = L.random_density_matrix(rng)
        assert np.abs(L.tomo_probabilities(rho) - L.tomo_probabilities_closed_form(rho)).max() < 1e-12


def test_unitaries_are_unitary():
    for U in L.TOMO_U:
        assert np.allclose(U.conj().T @ U, np.eye(3))


# -- counts ----------------------------------------------------------------------


def test_dark_false_positive_rate():
    assert L.MEASURED_NOISE.dark_false_positive(1) < 0.01


def test_detection_model_validation():
    with pytest.raises(InvalidParameter):
        L.DetectionModel(N1=2.0)
    with pytest.raises(InvalidParameter):
        L.DetectionModel(p_dark_as_bright=1.5)
    with pytest.raises(InvalidParameter):
        L.DetectionModel(shots=0)


def test_counts_large_shot_limit(rng):
    rho = L.random_density_matrix(rng)
    model = L.DetectionModel(p_bright_as_dark=0.0, p_dark_as_bright=0.0, shots=400000)
    c = L.simulate_counts(rho, model, rng)
    pops = L.level_populations(rho)
    want = pops @ np.array([model.N1, model.N2, model.N3])
    assert np.allclose(c.means, want, rtol=1e-2, atol=2e-2)
    assert np.allclose(L.expected_counts(rho, L.NO_NOISE), want)


def test_dark_state_with_no_background():
    model = L.DetectionModel(N1=0.0, p_bright_as_dark=0.0, p_dark_as_bright=0.0, shots=500)
    c = L.simulate_counts(np.diag([1.0, 0, 0]), model, 7)
    assert c.means[0] == 0.0


def test_counts_seeded():
    rho = np.diag([0.5, 0.3, 0.2]).astype(complex)
    a = L.simulate_counts(rho, L.MEASURED_NOISE, 42)
    b = L.simulate_counts(rho, L.MEASURED_NOISE, 42)
    assert np.array_equal(a.means, b.means)
    assert np.all(a.means >= 0)


# -- reconstruction ----------------------------------------------------------------


def test_t_round_trip(rng):
    for _ in range(20):
        rho = L.random_density_matrix(rng, rank=3)
        assert np.allclose(L.rho_from_t(L.t_from_rho(rho)), rho, atol=1e-8)
        t = L.t_from_rho(rho)
        assert np.all(t[:3] >= 0)


def test_gram_coordinates_match_matrix(rng):
    basis = L._hermitian_basis()
    for _ in range(20):
        t = rng.normal(size=9)
        rho = L.rho_from_t(t)
        assert np.allclose(np.einsum("p,pij->ij", L._gram_coordinates(t), basis), rho)


def test_mle_pure_state(rng):
    psi = rng.normal(size=3) + 1j * rng.normal(size=3)
    psi /= np.linalg.norm(psi)
    rho = np.outer(psi, psi.conj())
    est = L.mle_reconstruct(L.simulate_counts(rho, L.NO_NOISE), L.NO_NOISE)
    assert L.fidelity(est, psi) >= 0.999


def test_mle_maximally_mixed():
    est = L.mle_reconstruct(L.simulate_counts(np.eye(3) / 3, L.NO_NOISE), L.NO_NOISE)
    assert np.abs(est - np.eye(3) / 3).max() < 1e-2


def test_mle_physical_on_noisy_counts(rng):
    for seed in range(5):
        rho = L.random_density_matrix(rng)
        est = L.mle_reconstruct(L.simulate_counts(rho, L.MEASURED_NOISE, seed), L.MEASURED_NOISE)
        assert np.allclose(est, est.conj().T, atol=1e-10)
        assert np.linalg.eigvalsh(est).min() > -1e-10
        assert abs(np.trace(est).real - 1) < 1e-10


def test_mle_objective_zero_at_truth(rng):
    rho = L.random_density_matrix(rng, rank=3)
    A = L.count_model(L.NO_NOISE)
    counts = L.expected_counts(rho, L.NO_NOISE)
    assert L.mle_objective(L.t_from_rho(rho), counts, A) < 1e-12


# -- closest real state ------------------------------------------------------------


def test_closest_real_state_examples():
    psi = np.array([0.6, -0.8, 0.0])
    got = L.closest_real_state(np.outer(psi, psi))
    assert abs(abs(got @ psi) - 1) < 1e-12
    with pytest.raises(DegenerateTop):
        L.closest_real_state(np.eye(3) / 3)


def test_closest_real_state_brute_force(rng):
    rho = L.random_density_matrix(rng, rank=2)
    v = rng.normal(size=(1_000_000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    brute = np.einsum("ni,ij,nj->n", v, rho.real, v).max()
    psi = L.closest_real_state(rho)
    best = float(np.real(psi @ rho @ psi))
    assert best >= brute - 1e-12
    assert best - brute < 1e-3
    # not worse than the real parts of the eigenvectors of rho
    for w in np.linalg.eigh(rho)[1].T:
        r = w.real / np.linalg.norm(w.real)
        assert best >= np.real(r @ rho @ r) - 1e-12


def test_fidelity_examples():
    psi = np.array([0, 1.0, 0])
    assert L.fidelity(np.outer(psi, psi), psi) == pytest.approx(1)
    assert L.fidelity(np.eye(3) / 3, psi) == pytest.approx(1 / 3)
    assert L.fidelity(np.diag([1.0, 0, 0]), psi) == 0.0


# -- per-k replica -----------------------------------------------------------------


def test_pipeline_zero_noise():
    k = (0.4 * np.pi, 0.3 * np.pi)
    r = L.pipeline_measure_state(1.0, k, (0.0, 0.0), rng=1)
    assert r.fidelity >= 0.999
    assert abs(abs(r.psi_real @ bloch.n_vec(1.0, *k)) - 1) < 1e-3


def test_pipeline_detection_noise():
    k = (0.4 * np.pi, 0.3 * np.pi)
    fids = [L.pipeline_measure_state(1.0, k, (0.0, 0.0), model=L.MEASURED_NOISE, rng=s).fidelity for s in range(3)]
    assert all(0.9 <= f <= 1.0 for f in fids)


def test_measure_grid_seeded():
    g = bloch.BZGrid(4, 4)
    sched = L.Schedule(duration=200.0, steps=50)
    a = L.measure_grid(1.0, g, sched, L.MEASURED_NOISE, seed=3)[1]
    b = L.measure_grid(1.0, g, sched, L.MEASURED_NOISE, seed=3)[1]
    assert np.array_equal(a, b)


def test_replica_entanglement_matches_exact(replica_m1):
    # spectra from the zero-noise reconstruction agree with the exact ones
    from eulertopo import invariants as inv

    grid, _, u3 = replica_m1
    exact = bloch.euler_frames(1.0, grid)
    recon = bloch.frames_from_top(u3, grid)
    for cut in ("x", "y"):
        a = np.array([s.eigenvalues for s in inv.entanglement_spectrum(exact, cut)])
        b = np.array([s.eigenvalues for s in inv.entanglement_spectrum(recon, cut)])
        assert np.abs(a - b).max() < 1e-2


def test_replica_wilson_winding(replica_m1):
    from eulertopo import invariants as inv

    grid, _, u3 = replica_m1
    frames = bloch.fix_gauge(bloch.frames_from_top(u3, grid))
    assert abs(inv.wilson_winding(inv.wilson_spectrum(frames, "x"))) == 2
