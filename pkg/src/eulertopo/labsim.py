"""Simulated trapped-ion measurement pipeline for the qutrit Euler model.

Angular frequencies are in rad/us and times in us (hbar = 1).  The
chain is: pulse synthesis for c [H(k) - b I], adiabatic preparation
from |1> at a high-symmetry point, eight-basis tomography with photon
counting, maximum-likelihood reconstruction and extraction of the
closest real state.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.optimize import minimize

from . import bloch
from .errors import (
    DegenerateTop,
    GapClosed,
    Infeasible,
    InvalidParameter,
    OptimizerStalled,
    RamanInvalid,
)

MHZ = 2 * np.pi  # 1 MHz as an angular frequency in rad/us

# splitting between the 1-2 and 1-3 transitions, omega_z + omega_q
ZEEMAN_SUM = MHZ * 11.5697
# second-order Zeeman shift, 310.8 Hz/G^2 at B = 8.264 G (literature coefficient)
OMEGA_Q = MHZ * 310.8e-6 * 8.264**2
OMEGA_Z = ZEEMAN_SUM - OMEGA_Q

RAMAN_RATIO = 5.0

HIGH_SYMMETRY = ((0.0, 0.0), (0.0, np.pi), (np.pi, 0.0), (np.pi, np.pi))


@dataclass
class PulseParams:
    """Microwave settings.  Fields may be arrays (one entry per target).

    omega_12_1 is the Rabi frequency of microwave 1 on 1<->2, etc.
    """

    omega_12_1: float = 0.0
    omega_13_2: float = 0.0
    omega_12_3: float = 0.0
    omega_13_4: float = 0.0
    omega_12_2: float = 0.0
    omega_12_4: float = 0.0
    omega_13_1: float = 0.0
    omega_13_3: float = 0.0
    delta_1: float = 0.0
    delta_2: float = 0.0
    raman_1: float = MHZ * 1.0
    raman_2: float = MHZ * 1.0
    phi_1: float = 0.0
    phi_2: float = 0.0
    phi_3: float = 0.0
    phi_4: float = 0.0
    omega_z: float = OMEGA_Z
    omega_q: float = OMEGA_Q

    def rabi(self):
        return np.stack(np.broadcast_arrays(
            self.omega_12_1, self.omega_13_2, self.omega_12_3, self.omega_13_4,
            self.omega_12_2, self.omega_12_4, self.omega_13_1, self.omega_13_3,
        ), axis=-1)

    def take(self, i):
        """Entry i of an array-valued parameter set."""
        out = {}
        for f in fields(self):
            v = np.asarray(getattr(self, f.name))
            out[f.name] = float(v) if v.ndim == 0 else float(v[i])
        return PulseParams(**out)


def stark_shifts(p: PulseParams):
    """Diagonal AC Stark terms (H_st,11, H_st,22, H_st,33)."""
    zq = p.omega_z + p.omega_q
    t12_2 = p.omega_12_2**2 / (4 * (zq + p.delta_2))
    t12_3 = p.omega_12_3**2 / (4 * p.raman_1)
    t12_4 = p.omega_12_4**2 / (4 * (p.raman_2 - zq))
    t13_1 = p.omega_13_1**2 / (4 * (zq - p.delta_1))
    t13_3 = p.omega_13_3**2 / (4 * (zq + p.raman_1))
    t13_4 = p.omega_13_4**2 / (4 * p.raman_2)
    s11 = t12_2 - t12_3 - t12_4 - t13_1 - t13_3 - t13_4
    s22 = -t12_2 + t12_3 + t12_4
    s33 = t13_1 + t13_3 + t13_4
    return s11, s22, s33


def raman_coupling(p: PulseParams):
    return p.omega_12_3 * p.omega_13_4 * (p.raman_1 + p.raman_2) / (8 * p.raman_1 * p.raman_2)


def check_raman(p: PulseParams, ratio=RAMAN_RATIO):
    rab = p.rabi()
    if np.any(rab < 0):
        raise InvalidParameter("Rabi frequencies must be non-negative")
    big = rab.max(axis=-1)
    for d in (p.raman_1, p.raman_2):
        d = np.asarray(d)
        if np.any(d <= 0) or np.any(d < ratio * big * (1 - 1e-12)):
            raise RamanInvalid("Raman detuning must exceed 5x the largest Rabi frequency")


def effective_hamiltonian(p: PulseParams, validate=True):
    """Time-independent rotating-frame Hamiltonian of the four-tone drive."""
    if validate:
        check_raman(p)
    s11, s22, s33 = stark_shifts(p)
    h12 = 0.5 * p.omega_12_1 * np.exp(1j * np.asarray(p.phi_1))
    h13 = 0.5 * p.omega_13_2 * np.exp(1j * np.asarray(p.phi_2))
    h23 = raman_coupling(p) * np.exp(1j * (np.asarray(p.phi_4) - np.asarray(p.phi_3)))
    s11, s22, s33, h12, h13, h23 = np.broadcast_arrays(
        s11, s22 - p.delta_1, s33 - p.delta_2, h12, h13, h23
    )
    H = np.zeros(s11.shape + (3, 3), dtype=complex)
    H[..., 0, 0] = s11
    H[..., 1, 1] = s22
    H[..., 2, 2] = s33
    H[..., 0, 1] = h12
    H[..., 1, 0] = np.conj(h12)
    H[..., 0, 2] = h13
    H[..., 2, 0] = np.conj(h13)
    H[..., 1, 2] = h23
    H[..., 2, 1] = np.conj(h23)
    return H


# -- pulse synthesis -----------------------------------------------------------


@dataclass(frozen=True)
class PulseBounds:
    """Hardware limits for pulse synthesis (placeholders, see README)."""

    rabi_max: float = MHZ * 0.05
    raman_rabi_max: float = MHZ * 0.05
    delta_max: float = MHZ * 0.1
    raman_detuning_min: float = MHZ * 0.05
    crosstalk: float = 0.05
    c_max: float = MHZ * 0.05


BASES = {
    "none": (0, 1, 2),
    "12": (1, 0, 2),
    "13": (2, 1, 0),
}


def _settings(T, c, bounds: PulseBounds, iterations=4):
    # pulse parameters realising c (T - b I) for real symmetric targets T
    T = np.asarray(T, dtype=float)
    c = np.asarray(c, dtype=float)
    a12, a13, a23 = np.abs(T[..., 0, 1]), np.abs(T[..., 0, 2]), np.abs(T[..., 1, 2])
    o1 = 2 * c * a12
    o2 = 2 * c * a13
    direct = np.maximum(o1, o2)
    floor = np.maximum(bounds.raman_detuning_min, RAMAN_RATIO * direct)
    oR = np.sqrt(4 * c * a23 * floor)
    big = RAMAN_RATIO * oR > floor
    oR = np.where(big, 4 * RAMAN_RATIO * c * a23, oR)
    detuning = np.maximum(floor, RAMAN_RATIO * oR)
    r = bounds.crosstalk
    p = PulseParams(
        omega_12_1=o1, omega_13_2=o2, omega_12_3=oR, omega_13_4=oR,
        omega_12_2=r * o2, omega_12_4=r * oR, omega_13_1=r * o1, omega_13_3=r * oR,
        raman_1=detuning, raman_2=detuning,
        phi_1=np.where(T[..., 0, 1] < 0, np.pi, 0.0),
        phi_2=np.where(T[..., 0, 2] < 0, np.pi, 0.0),
        phi_3=np.zeros_like(c),
        phi_4=np.where(T[..., 1, 2] < 0, np.pi, 0.0),
    )
    d1 = np.zeros_like(c)
    d2 = np.zeros_like(c)
    safe_c = np.where(c > 0, c, 1.0)
    for _ in range(iterations):
        p = replace(p, delta_1=d1, delta_2=d2)
        s11, s22, s33 = stark_shifts(p)
        b = T[..., 0, 0] - s11 / safe_c
        d1 = s22 - c * (T[..., 1, 1] - b)
        d2 = s33 - c * (T[..., 2, 2] - b)
    p = replace(p, delta_1=d1, delta_2=d2)
    return p, b


def _feasible(T, c, bounds: PulseBounds):
    p, _ = _settings(T, c, bounds)
    tol = 1 + 1e-12
    return (
        (np.maximum(p.omega_12_1, p.omega_13_2) <= bounds.rabi_max * tol)
        & (p.omega_12_3 <= bounds.raman_rabi_max * tol)
        & (np.abs(p.delta_1) <= bounds.delta_max * tol)
        & (np.abs(p.delta_2) <= bounds.delta_max * tol)
        & (c <= bounds.c_max * tol)
    )


def max_scale(T, bounds: PulseBounds, iterations=45):
    """Largest feasible energy scale c for each target, by bisection.

    Feasibility is monotone in c: every amplitude and the compensation
    detunings grow with c.
    """
    T = np.asarray(T, dtype=float)
    shape = T.shape[:-2]
    lo = np.zeros(shape)
    hi = np.full(shape, bounds.c_max)
    ok = _feasible(T, hi, bounds)
    lo = np.where(ok, hi, lo)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        f = _feasible(T, mid, bounds)
        lo = np.where(f, mid, lo)
        hi = np.where(f, hi, mid)
    return lo


def _permute(T, order):
    order = list(order)
    return T[..., order, :][..., :, order]


@dataclass
class PulseSolution:
    params: PulseParams
    c: np.ndarray
    b: np.ndarray
    basis: np.ndarray  # index into BASIS_NAMES
    residual: np.ndarray

    def logical_hamiltonian(self):
        """Realised Hamiltonian expressed back in the logical basis."""
        H = effective_hamiltonian(self.params)
        return unpermute(H, self.basis)


BASIS_NAMES = ("none", "12", "13")


def unpermute(H, basis_idx):
    H = np.array(H, copy=True)
    basis_idx = np.broadcast_to(np.asarray(basis_idx), H.shape[:-2])
    for i, name in enumerate(BASIS_NAMES):
        sel = basis_idx == i
        if np.any(sel):
            # the swaps are involutions
            H[sel] = _permute(H[sel], BASES[name])
    return H


def solve_pulse(target, bounds: PulseBounds | None = None, basis="none", tol=1e-4):
    """Pulse parameters with effective_hamiltonian = c (target - b I).

    ``basis`` selects an exact basis swap (|1> <-> |2> as '12',
    |1> <-> |3> as '13') applied to the target before solving; 'auto'
    picks whichever of the three allows the largest c.  b is left free
    because H_11 can only be set through the small Stark shift.
    Works on a single target or a stack of them.
    """
    bounds = bounds or PulseBounds()
    T = np.asarray(target)
    if np.iscomplexobj(T):
        if np.abs(T.imag).max() > 1e-12:
            raise InvalidParameter("target must be real symmetric")
        T = T.real
    T = 0.5 * (T + np.swapaxes(T, -1, -2))
    names = BASIS_NAMES if basis == "auto" else (basis,)
    if any(n not in BASES for n in names):
        raise InvalidParameter(f"unknown basis {basis!r}")
    cs = np.stack([max_scale(_permute(T, BASES[n]), bounds) for n in names], axis=-1)
    pick = np.argmax(cs, axis=-1)
    c = np.take_along_axis(cs, pick[..., None], axis=-1)[..., 0]
    idx = np.array([BASIS_NAMES.index(n) for n in names])[pick]
    Tp = np.array(T, copy=True)
    for i, n in enumerate(names):
        sel = pick == i
        if np.any(sel):
            Tp[sel] = _permute(T[sel], BASES[n])
    if np.any(c <= 0):
        raise Infeasible("no positive energy scale satisfies the pulse bounds")
    params, b = _settings(Tp, c, bounds)
    H = effective_hamiltonian(params)
    want = c[..., None, None] * (Tp - b[..., None, None] * np.eye(3))
    scale = np.linalg.norm(want, axis=(-2, -1))
    res = np.linalg.norm(H - want, axis=(-2, -1)) / np.where(scale > 0, scale, 1.0)
    if np.any(res > tol):
        raise Infeasible(f"pulse residual {res.max():.3g} above {tol}")
    return PulseSolution(params, c, b, idx, res)


# -- adiabatic preparation -------------------------------------------------------


def nearest_high_symmetry(k):
    k = np.asarray(k, dtype=float)
    best = min(HIGH_SYMMETRY, key=lambda q: np.linalg.norm(bloch.wrap_momentum(k - np.array(q))))
    return np.array(best)


def shortest_path(kstar, k, steps=400):
    """Straight path on the torus from kstar to k, endpoints included.

    Each component takes its minimal-winding displacement in [-pi, pi).
    The returned momenta are not wrapped, so the path is continuous.
    """
    kstar = np.asarray(kstar, dtype=float)
    k = np.asarray(k, dtype=float)
    disp = bloch.wrap_momentum(k - kstar)
    if np.allclose(disp, 0.0, atol=1e-15):
        return kstar[None, :].copy()
    s = np.linspace(0.0, 1.0, int(steps) + 1)
    return kstar + s[:, None] * disp


def smooth_ramp(tau):
    """s(tau) = tau - sin(2 pi tau) / (2 pi): zero velocity at both ends."""
    tau = np.asarray(tau, dtype=float)
    return tau - np.sin(2 * np.pi * tau) / (2 * np.pi)


def _step_unitaries(H, dt):
    w, v = np.linalg.eigh(H)
    ph = np.exp(-1j * w * dt)
    return np.einsum("...ij,...j,...kj->...ik", v, ph, v.conj())


@dataclass
class Preparation:
    state: np.ndarray
    path: np.ndarray
    scale: np.ndarray
    min_gap: float


def _path_hamiltonians(m, kstar, k, steps, bounds, basis, hamiltonian, gap_min):
    kstar = nearest_high_symmetry(k) if kstar is None else np.asarray(kstar, dtype=float)
    ham = hamiltonian or (lambda kx, ky: bloch.euler_ham(m, kx, ky))
    e = np.linalg.eigh(ham(*kstar))
    if abs(e[1][0, -1]) < 1 - 1e-9:
        raise InvalidParameter("|1> is not the top eigenstate at kstar")
    disp = bloch.wrap_momentum(np.asarray(k, dtype=float) - kstar)
    tau = (np.arange(steps) + 0.5) / steps
    pts = kstar + smooth_ramp(tau)[:, None] * disp
    Ht = ham(pts[:, 0], pts[:, 1])
    sol = solve_pulse(Ht, bounds, basis=basis)
    H = sol.logical_hamiltonian()
    w = np.linalg.eigvalsh(H)
    gap = float((w[:, 2] - w[:, 1]).min())
    if gap < gap_min:
        raise GapClosed(f"instantaneous gap {gap:.3g} below {gap_min}")
    return pts, H, sol.c, gap


def adiabatic_prepare(m, kstar, k, duration=2000.0, steps=400, bounds=None, basis="auto",
                      hamiltonian=None, gap_min=1e-3):
    """Drive |1> from kstar to k along the shortest path.

    The ramp k(s(tau)) is sampled at ``steps`` midpoints and each step
    applies exp(-i H dt) with H the Hamiltonian the synthesised pulses
    actually produce (expressed in the logical basis).  With
    kstar=None the nearest high-symmetry point is used.
    """
    psi = np.array([1.0, 0.0, 0.0], dtype=complex)
    k = np.asarray(k, dtype=float)
    k0 = nearest_high_symmetry(k) if kstar is None else np.asarray(kstar, dtype=float)
    if np.allclose(bloch.wrap_momentum(k - k0), 0.0, atol=1e-15):
        return Preparation(psi, k0[None, :], np.zeros(0), np.inf)
    pts, H, c, gap = _path_hamiltonians(m, k0, k, steps, bounds, basis, hamiltonian, gap_min)
    U = _step_unitaries(H, duration / steps)
    for u in U:
        psi = u @ psi
    return Preparation(psi, pts, c, gap)


def adiabatic_prepare_mixed(m, kstar, k, duration=2000.0, steps=400, dephasing=0.0,
                            bounds=None, basis="auto", hamiltonian=None, gap_min=1e-3):
    """Density-matrix version with optional pure dephasing (rate in 1/us).

    After each step the off-diagonal elements in the level basis decay by
    exp(-dephasing * dt).  dephasing = 0 reproduces adiabatic_prepare.
    """
    k = np.asarray(k, dtype=float)
    rho = np.zeros((3, 3), dtype=complex)
    rho[0, 0] = 1.0
    k0 = nearest_high_symmetry(k) if kstar is None else np.asarray(kstar, dtype=float)
    if np.allclose(bloch.wrap_momentum(k - k0), 0.0, atol=1e-15):
        return rho
    _, H, _, _ = _path_hamiltonians(m, k0, k, steps, bounds, basis, hamiltonian, gap_min)
    dt = duration / steps
    U = _step_unitaries(H, dt)
    damp = np.full((3, 3), np.exp(-dephasing * dt))
    np.fill_diagonal(damp, 1.0)
    for u in U:
        rho = damp * (u @ rho @ u.conj().T)
    return rho


# -- tomography ----------------------------------------------------------------


def pair_rotation(angle, axis, j):
    """exp(-i angle sigma / 2) on levels (1, j), identity on the third level.

    sigma_x = |1><j| + |j><1|, sigma_y = -i|1><j| + i|j><1|.
    """
    U = np.eye(3, dtype=complex)
    c, s = np.cos(angle / 2), np.sin(angle / 2)
    j = j - 1
    if axis == "x":
        off_1j, off_j1 = -1j * s, -1j * s
    elif axis == "y":
        off_1j, off_j1 = -s, s
    else:
        raise InvalidParameter("axis must be 'x' or 'y'")
    U[0, 0] = c
    U[j, j] = c
    U[0, j] = off_1j
    U[j, 0] = off_j1
    return U


# (pair 1-2 operation, pair 1-3 operation); entries are (angle, axis) or None
TOMO_SEQUENCES = (
    (None, None),
    ((-np.pi, "y"), None),
    ((np.pi / 2, "x"), None),
    ((-np.pi / 2, "y"), None),
    (None, (np.pi / 2, "x")),
    (None, (-np.pi / 2, "y")),
    ((np.pi / 2, "x"), (-np.pi, "y")),
    ((-np.pi / 2, "y"), (-np.pi, "y")),
)


def tomo_unitaries():
    """The eight pre-detection unitaries; the 1-3 pulse acts first."""
    out = []
    for op12, op13 in TOMO_SEQUENCES:
        U = np.eye(3, dtype=complex)
        if op13 is not None:
            U = pair_rotation(op13[0], op13[1], 3) @ U
        if op12 is not None:
            U = pair_rotation(op12[0], op12[1], 2) @ U
        out.append(U)
    return np.array(out)


TOMO_U = tomo_unitaries()


def level_populations(rho):
    """Populations (8, 3) of the three levels after each tomography sequence."""
    rho = np.asarray(rho, dtype=complex)
    r = np.einsum("bij,...jk,blk->...bil", TOMO_U, rho, TOMO_U.conj())
    return np.real(np.diagonal(r, axis1=-2, axis2=-1))


def tomo_probabilities(rho):
    """Dark-state probability P1 for the eight sequences (rotation route)."""
    return level_populations(rho)[..., 0]


def rho_parameters(rho):
    """The eight real numbers (a, b, c, d, e, f, g, h) of a density matrix."""
    rho = np.asarray(rho, dtype=complex)
    return dict(
        a=rho[..., 0, 0].real, b=rho[..., 1, 1].real,
        c=rho[..., 0, 1].real, d=rho[..., 0, 1].imag,
        e=rho[..., 1, 2].real, f=rho[..., 1, 2].imag,
        g=rho[..., 0, 2].real, h=rho[..., 0, 2].imag,
    )


def tomo_probabilities_closed_form(rho):
    """Table of P1 values written directly in terms of the rho parameters."""
    q = rho_parameters(rho)
    a, b = q["a"], q["b"]
    return np.stack([
        a,
        b,
        (a + b) / 2 - q["d"],
        (a + b) / 2 + q["c"],
        (1 - b) / 2 - q["h"],
        (1 - b) / 2 + q["g"],
        (1 - a) / 2 + q["f"],
        (1 - a) / 2 + q["e"],
    ], axis=-1)


@dataclass(frozen=True)
class DetectionModel:
    """Photon-count detection.  shots=None means exact expected counts."""

    N1: float = 0.06
    N2: float = 13.28
    N3: float = 13.34
    p_bright_as_dark: float = 0.019
    p_dark_as_bright: float = 0.0056
    shots: int | None = 3000

    def __post_init__(self):
        if not (self.N1 < 1 < min(self.N2, self.N3)):
            raise InvalidParameter("need N1 < 1 < N2, N3")
        for p in (self.p_bright_as_dark, self.p_dark_as_bright):
            if not 0 <= p <= 1:
                raise InvalidParameter("probabilities must lie in [0, 1]")
        if self.shots is not None and int(self.shots) < 1:
            raise InvalidParameter("shots must be >= 1")

    @property
    def effective_means(self):
        """Mean counts per level including dark/bright misassignment."""
        bright = 0.5 * (self.N2 + self.N3)
        n1 = (1 - self.p_dark_as_bright) * self.N1 + self.p_dark_as_bright * bright
        n2 = (1 - self.p_bright_as_dark) * self.N2 + self.p_bright_as_dark * self.N1
        n3 = (1 - self.p_bright_as_dark) * self.N3 + self.p_bright_as_dark * self.N1
        return np.array([n1, n2, n3])

    def dark_false_positive(self, threshold=1):
        """P(count > threshold | dark) from the Poisson law with mean N1."""
        from scipy.stats import poisson

        return float(poisson.sf(threshold, self.N1))


MEASURED_NOISE = DetectionModel()
NO_NOISE = DetectionModel(p_bright_as_dark=0.0, p_dark_as_bright=0.0, shots=None)


@dataclass
class TomoCounts:
    means: np.ndarray  # mean photon count per basis (8,)
    shots: int | None


def expected_counts(rho, model: DetectionModel):
    return level_populations(rho) @ model.effective_means


def simulate_counts(rho, model: DetectionModel, rng=None):
    """Mean photon counts per basis.

    Per basis the shots are split over levels with a multinomial draw.
    Each shot on a level is misassigned (dark <-> bright) with the model
    probabilities, and then a Poisson count with the level mean is
    drawn.  The photon total of a group of shots is one Poisson draw,
    since Poisson variables add.
    """
    if model.shots is None:
        return TomoCounts(expected_counts(rho, model), None)
    rng = np.random.default_rng(rng)
    pops = np.clip(level_populations(rho), 0.0, None)
    pops /= pops.sum(axis=-1, keepdims=True)
    bright = 0.5 * (model.N2 + model.N3)
    means = np.zeros(8)
    for i in range(8):
        n = rng.multinomial(model.shots, pops[i])
        flip1 = rng.binomial(n[0], model.p_dark_as_bright)
        flip23 = rng.binomial(n[1:], model.p_bright_as_dark)
        lam = (
            (n[0] - flip1) * model.N1 + flip1 * bright
            + ((n[1:] - flip23) * np.array([model.N2, model.N3])).sum()
            + flip23.sum() * model.N1
        )
        means[i] = rng.poisson(lam) / model.shots
    return TomoCounts(means, model.shots)


def t_matrix(t):
    t = np.asarray(t, dtype=float)
    T = np.zeros(t.shape[:-1] + (3, 3), dtype=complex)
    T[..., 0, 0] = t[..., 0]
    T[..., 1, 1] = t[..., 1]
    T[..., 2, 2] = t[..., 2]
    T[..., 1, 0] = t[..., 3] + 1j * t[..., 4]
    T[..., 2, 1] = t[..., 5] + 1j * t[..., 6]
    T[..., 2, 0] = t[..., 7] + 1j * t[..., 8]
    return T


def rho_from_t(t):
    T = t_matrix(t)
    R = np.conj(np.swapaxes(T, -1, -2)) @ T
    return R / np.trace(R, axis1=-2, axis2=-1)[..., None, None].real


_J = np.eye(3)[::-1]


def t_from_rho(rho, eps=1e-9):
    """Parameters t with rho_from_t(t) close to rho (Cholesky of the reversed matrix)."""
    rho = np.asarray(rho, dtype=complex)
    w, v = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    w = np.clip(w, eps, None)
    r = (v * w) @ v.conj().T
    L = np.linalg.cholesky(_J @ r @ _J)  # J r J = L L^+
    T = _J @ L.conj().T @ _J  # lower triangular, T^+ T = r
    # diagonal must be real and non-negative: absorb phases row by row
    ph = np.exp(-1j * np.angle(np.diag(T)))
    T = ph[:, None] * T
    return np.array([
        T[0, 0].real, T[1, 1].real, T[2, 2].real,
        T[1, 0].real, T[1, 0].imag, T[2, 1].real, T[2, 1].imag, T[2, 0].real, T[2, 0].imag,
    ])


def _measurement_operators(model):
    # nbar_i = tr(M_i rho), M_i = U_i^+ diag(N) U_i
    Nm = np.diag(model.effective_means)
    return np.einsum("bji,jk,bkl->bil", TOMO_U.conj(), Nm, TOMO_U)


def linear_inversion(counts: TomoCounts, model: DetectionModel):
    """Least-squares rho from the linear count model, trace fixed to one."""
    M = _measurement_operators(model)
    basis = _hermitian_basis()
    A = np.einsum("bij,pji->bp", M, basis).real  # nbar = A @ x
    A = np.vstack([A, np.trace(basis, axis1=1, axis2=2).real * 10.0])
    y = np.concatenate([counts.means, [10.0]])
    x = np.linalg.lstsq(A, y, rcond=None)[0]
    rho = np.einsum("p,pij->ij", x, basis)
    w, v = np.linalg.eigh(rho)
    w = np.clip(w, 0.0, None)
    rho = (v * w) @ v.conj().T
    return rho / np.trace(rho).real


def _hermitian_basis():
    B = []
    for i in range(3):
        E = np.zeros((3, 3), dtype=complex)
        E[i, i] = 1
        B.append(E)
    for i, j in ((0, 1), (0, 2), (1, 2)):
        E = np.zeros((3, 3), dtype=complex)
        E[i, j] = E[j, i] = 1
        B.append(E)
        E = np.zeros((3, 3), dtype=complex)
        E[i, j] = 1j
        E[j, i] = -1j
        B.append(E)
    return np.array(B)


def _gram_coordinates(t):
    # T^+ T in the coordinates of _hermitian_basis, written out by hand
    # because this sits in the optimiser's inner loop
    t1, t2, t3, t4, t5, t6, t7, t8, t9 = t
    z21, z31, z32 = complex(t4, t5), complex(t8, t9), complex(t6, t7)
    r00 = t1 * t1 + t4 * t4 + t5 * t5 + t8 * t8 + t9 * t9
    r11 = t2 * t2 + t6 * t6 + t7 * t7
    r22 = t3 * t3
    r01 = z21.conjugate() * t2 + z31.conjugate() * z32
    r02 = z31.conjugate() * t3
    r12 = z32.conjugate() * t3
    # an off-diagonal entry x + iy is x (E_ij + E_ji) + y (i E_ij - i E_ji)
    v = np.array([r00, r11, r22, r01.real, r01.imag, r02.real, r02.imag, r12.real, r12.imag])
    return v / (r00 + r11 + r22)


def count_model(model: DetectionModel):
    """Real 8 x 9 matrix A with nbar = A @ coordinates(rho)."""
    M = _measurement_operators(model)
    return np.einsum("bij,pji->bp", M, _hermitian_basis()).real


def mle_objective(t, counts, A, floor=1e-9):
    nbar = A @ _gram_coordinates(t)
    nbar = np.maximum(nbar, floor)
    return float(np.sum((nbar - counts) ** 2 / (2 * nbar)))


def mle_reconstruct(counts: TomoCounts, model: DetectionModel, starts=5, seed=0,
                    bound=100.0, maxiter=4000):
    """Maximum-likelihood density matrix rho = T^+ T / tr(T^+ T).

    Nelder-Mead on the nine real parameters of the lower-triangular T.
    The first start is the linear-inversion estimate, the others are
    random (seeded).  Raises OptimizerStalled if the best objective is
    above ``bound``.
    """
    A = count_model(model)
    y = np.asarray(counts.means, dtype=float)
    rng = np.random.default_rng(seed)
    x0s = [t_from_rho(linear_inversion(counts, model))]
    for _ in range(starts - 1):
        x0s.append(t_from_rho(random_density_matrix(rng)))
    best = None
    for i, x0 in enumerate(x0s):
        # random restarts get a smaller budget; they only guard against
        # a bad linear-inversion start
        n = maxiter if i == 0 else maxiter // 8
        opts = {"xatol": 1e-9, "fatol": 1e-13, "maxiter": n, "maxfev": 2 * n}
        if i == 0:
            # the linear estimate is usually close: start from a tight simplex
            step = 1e-2 * (np.abs(x0) + 1e-2)
            opts["initial_simplex"] = np.vstack([x0, x0 + np.diag(step)])
        res = minimize(mle_objective, x0, args=(y, A), method="Nelder-Mead", options=opts)
        if best is None or res.fun < best.fun:
            best = res
    if not np.isfinite(best.fun) or best.fun > bound:
        raise OptimizerStalled(f"best objective {best.fun:.3g} exceeds {bound}")
    rho = rho_from_t(best.x)
    return 0.5 * (rho + rho.conj().T)


def closest_real_state(rho, tol=1e-9):
    """Real unit vector maximising psi^T rho psi (top eigenvector of Re rho)."""
    rho = np.asarray(rho, dtype=complex)
    R = rho.real
    R = 0.5 * (R + R.T)
    w, v = np.linalg.eigh(R)
    if w[-1] - w[-2] < tol:
        raise DegenerateTop("top eigenvalues of Re(rho) coincide")
    return bloch.canonical_sign(v[:, -1:])[:, 0]


def fidelity(rho, psi):
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    f = np.real(psi.conj() @ np.asarray(rho) @ psi)
    return float(np.clip(f, 0.0, 1.0))


def random_density_matrix(rng, rank=None):
    """Haar-ish random state: rank 1 gives a pure state."""
    rank = rank or int(rng.integers(1, 4))
    G = rng.normal(size=(3, rank)) + 1j * rng.normal(size=(3, rank))
    rho = G @ G.conj().T
    return rho / np.trace(rho).real


# -- full per-k replica ----------------------------------------------------------


@dataclass
class Schedule:
    duration: float = 2000.0
    steps: int = 400
    basis: str = "auto"


@dataclass
class Measurement:
    rho: np.ndarray
    psi_real: np.ndarray
    fidelity: float
    prep_fidelity: float
    counts: TomoCounts


def pipeline_measure_state(m, k, kstar=None, schedule=None, model=NO_NOISE, rng=None,
                           bounds=None, mle_starts=5):
    """Prepare, measure and reconstruct the top band state at one momentum."""
    schedule = schedule or Schedule()
    rng = np.random.default_rng(rng)
    prep = adiabatic_prepare(m, kstar, k, schedule.duration, schedule.steps, bounds, schedule.basis)
    rho_true = np.outer(prep.state, prep.state.conj())
    target = bloch.n_vec(m, *k)
    counts = simulate_counts(rho_true, model, rng)
    rho = mle_reconstruct(counts, model, starts=mle_starts, seed=int(rng.integers(2**31)))
    psi = closest_real_state(rho)
    return Measurement(rho, psi, fidelity(rho, target), fidelity(rho_true, target), counts)


def measure_grid(m, grid=None, schedule=None, model=NO_NOISE, seed=0, bounds=None, mle_starts=5):
    """Run the replica on every node; returns (measurements, u3 field)."""
    grid = grid or bloch.BZGrid()
    rng = np.random.default_rng(seed)
    out = []
    KX, KY = grid.mesh()
    u3 = np.zeros((grid.nx, grid.ny, 3))
    for i in range(grid.nx):
        row = []
        for j in range(grid.ny):
            r = pipeline_measure_state(m, (KX[i, j], KY[i, j]), None, schedule, model, rng, bounds, mle_starts)
            row.append(r)
            u3[i, j] = r.psi_real
        out.append(row)
    return out, u3
