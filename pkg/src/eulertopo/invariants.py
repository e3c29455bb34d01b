"""Equilibrium topological diagnostics.

Euler class (solid angle, finite differences, lattice Chern number),
the Euler/Berry integrand identity, real Berry phases, Wilson-loop
spectra and their winding, entanglement spectra and Dirac-node search.

Unit-vector fields are arrays of shape (nx, ny, 3) on the periodic grid
of :class:`eulertopo.bloch.BZGrid`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import bloch
from .errors import (
    AmbiguousRank,
    GaugeObstruction,
    IllConditionedPlaquette,
    InvalidParameter,
    PathTooCoarse,
    UnwrapFailure,
    ZeroLink,
)

TWO_PI = 2.0 * np.pi


def _dot(a, b):
    return np.einsum("...i,...i", a, b)


# -- Euler class ---------------------------------------------------------------


def _triangle_area(a, b, c):
    # signed solid angle of the geodesic triangle (a, b, c)
    num = _dot(a, np.cross(b, c))
    den = 1.0 + _dot(a, b) + _dot(b, c) + _dot(c, a)
    return 2.0 * np.arctan2(num, den)


def solid_angles(field, antipodal_tol=-0.999):
    """Per-plaquette signed solid angle swept by a unit-vector field.

    Each plaquette (a, b, c, d) = (k, k+x, k+x+y, k+y) is split into
    the triangles (a, b, c) and (a, c, d).
    """
    a = np.asarray(field, dtype=float)
    b = np.roll(a, -1, axis=0)
    c = np.roll(b, -1, axis=1)
    d = np.roll(a, -1, axis=1)
    worst = min(
        _dot(a, b).min(), _dot(b, c).min(), _dot(c, d).min(),
        _dot(d, a).min(), _dot(a, c).min(),
    )
    if worst < antipodal_tol:
        raise IllConditionedPlaquette(
            f"neighbouring vectors nearly antipodal (dot = {worst:.4f}); refine the grid"
        )
    return _triangle_area(a, b, c) + _triangle_area(a, c, d)


def winding_number(field):
    """Euler class xi = (1/2pi) * total solid angle of the field.

    The sphere is covered |xi|/2 times.  Returns a float that is an even
    integer up to rounding for any field on a closed torus.
    """
    return float(solid_angles(field).sum() / TWO_PI)


def euler_class(field):
    """|xi| rounded to the nearest integer (the sign of xi is a gauge choice)."""
    return int(round(abs(winding_number(field))))


def euler_class_direct(field):
    """Euler-class integral evaluated with centred finite differences.

    Converges to :func:`winding_number` as O(1/N^2).
    """
    n = np.asarray(field, dtype=float)
    nx, ny = n.shape[:2]
    hx, hy = TWO_PI / nx, TWO_PI / ny
    dx = (np.roll(n, -1, axis=0) - np.roll(n, 1, axis=0)) / (2 * hx)
    dy = (np.roll(n, -1, axis=1) - np.roll(n, 1, axis=1)) / (2 * hy)
    return float(_dot(n, np.cross(dx, dy)).sum() * hx * hy / TWO_PI)


def lower_band_states(field):
    """Lower eigenvector of n . sigma at every node (nx, ny, 2)."""
    _, v = np.linalg.eigh(bloch.chern_map(field))
    return v[..., :, 0]


def chern_number_fhs(states):
    """Lattice Chern number from link variables (Fukui-Hatsugai-Suzuki).

    Sign convention: C = (1/2pi) * integral of F with
    F = i(<d_x u|d_y u> - <d_y u|d_x u>), which on the lattice reads
    C = -(1/2pi) sum Arg(U_x(k) U_y(k+x) U_x(k+y)^* U_y(k)^*).
    With it the Euler class of n equals twice the Chern number of the
    lower band of n . sigma, sign included.
    """
    psi = np.asarray(states, dtype=complex)
    ux = _dot(psi.conj(), np.roll(psi, -1, axis=0))
    uy = _dot(psi.conj(), np.roll(psi, -1, axis=1))
    if min(np.abs(ux).min(), np.abs(uy).min()) < 1e-12:
        raise ZeroLink("vanishing link overlap; gap closed or grid too coarse")
    plaq = ux * np.roll(uy, -1, axis=0) * np.conj(np.roll(ux, -1, axis=1)) * np.conj(uy)
    c = -np.angle(plaq).sum() / TWO_PI
    return int(round(c))


def chern_of_field(field):
    return chern_number_fhs(lower_band_states(field))


# -- integrand identity --------------------------------------------------------


def _pair_at(n_c, pair_c, n_k, min_sv):
    # project the centre pair into the occupied plane at k and orthonormalise
    proj = np.eye(3) - np.outer(n_k, n_k)
    q = proj @ pair_c
    u, s, vt = np.linalg.svd(q, full_matrices=False)
    if s.min() < min_sv:
        raise GaugeObstruction(f"stencil overlap {s.min():.3f} below {min_sv}")
    return u @ vt  # closest orthonormal pair (polar factor)


def integrand_identity_residual(m, kx, ky, h=1e-3, min_sv=0.9):
    """|<d_x u1|d_y u2> - <d_y u1|d_x u2> - n.(d_x n x d_y n)| at one momentum.

    A smooth real gauge is fixed on the 5-point stencil by transporting
    the centre occupied pair into each neighbouring occupied plane.
    The residual decays at least as O(h^2); in practice faster, since
    the symmetric stencil errors of the two sides largely cancel.
    """
    n0 = bloch.n_vec(m, kx, ky)
    fr = bloch.eig_frame(bloch.euler_ham(m, kx, ky))
    pair = fr.vectors[:, :2].copy()
    if np.dot(np.cross(pair[:, 0], pair[:, 1]), n0) < 0:
        pair[:, 1] = -pair[:, 1]
    shifts = {"x+": (h, 0), "x-": (-h, 0), "y+": (0, h), "y-": (0, -h)}
    ns, pairs = {}, {}
    for key, (dx, dy) in shifts.items():
        ns[key] = bloch.n_vec(m, kx + dx, ky + dy)
        pairs[key] = _pair_at(n0, pair, ns[key], min_sv)
    dpx = (pairs["x+"] - pairs["x-"]) / (2 * h)
    dpy = (pairs["y+"] - pairs["y-"]) / (2 * h)
    lhs = dpx[:, 0] @ dpy[:, 1] - dpy[:, 0] @ dpx[:, 1]
    dnx = (ns["x+"] - ns["x-"]) / (2 * h)
    dny = (ns["y+"] - ns["y-"]) / (2 * h)
    rhs = n0 @ np.cross(dnx, dny)
    return float(abs(lhs - rhs))


# -- Berry phase ---------------------------------------------------------------


def berry_phase(states, min_overlap=0.1):
    """Berry phase (0 or pi) of real states around a closed loop.

    The phase is read off the sign of the product of consecutive
    overlaps, the closing overlap <last|first> included.  A loop that
    repeats its first point at the end therefore works unchanged: the
    closing overlap is then +-1 and only fixes the relative sign.
    """
    u = np.asarray(states, dtype=float)
    if u.ndim != 2 or len(u) < 3:
        raise InvalidParameter("need at least three states along the loop")
    ov = _dot(u, np.roll(u, -1, axis=0))
    if np.abs(ov).min() <= min_overlap:
        raise PathTooCoarse(f"overlap {np.abs(ov).min():.3g} along the loop")
    negative = int(np.count_nonzero(ov < 0))
    return 0.0 if negative % 2 == 0 else float(np.pi)


def loop_states(hamiltonian, center, radius, npts=16, band=0):
    """Eigenstates of ``hamiltonian(kx, ky)`` on a circle, first point repeated."""
    phi = TWO_PI * np.arange(npts + 1) / npts
    kx = center[0] + radius * np.cos(phi)
    ky = center[1] + radius * np.sin(phi)
    fr = bloch.eig_frame(hamiltonian(kx, ky))
    return fr.vectors[..., :, band]


# -- Wilson loops --------------------------------------------------------------


@dataclass
class WilsonSpectrum:
    """Occupied-band Wilson-loop eigenphases.

    branches[j] holds the eigenphases in (-pi, pi] at transverse
    momentum momenta[j]; moduli holds the matching |eigenvalue|.
    """

    direction: str
    momenta: np.ndarray
    branches: np.ndarray
    moduli: np.ndarray

    @property
    def n_branches(self):
        return self.branches.shape[1]


def _oriented_pair(u3):
    # occupied frame (f1, f2) with f1 x f2 = u3, smooth-enough for a fixed u3
    g = np.array([0.0, 0.0, 1.0]) if abs(u3[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    f1 = np.cross(g, u3)
    f1 /= np.linalg.norm(f1)
    f2 = np.cross(u3, f1)
    return np.stack([f1, f2], axis=1)


def _loop_matrices(top, rank_tol):
    # top: (nloops, nsteps, d) unoccupied vectors along each loop
    nl, ns, d = top.shape
    P = np.broadcast_to(np.eye(d), (nl, d, d)).copy()
    for j in range(ns):
        u = top[:, j]
        proj = np.eye(d) - u[:, :, None] * u[:, None, :]
        P = proj @ P
    ev = np.linalg.eigvals(P)
    small = np.sort(np.abs(ev), axis=1)[:, 0]
    if np.any(small > rank_tol):
        raise AmbiguousRank(f"smallest Wilson eigenvalue {small.max():.3g} exceeds {rank_tol}")
    return P


def _orient(frames, direction):
    if direction == "x":
        return frames.top, frames.grid.ky
    if direction == "y":
        return np.swapaxes(frames.top, 0, 1), frames.grid.kx
    raise InvalidParameter(f"direction must be 'x' or 'y', got {direction!r}")


def wilson_spectrum(frames, direction="x", rank_tol=1e-6, base=0):
    """Wilson-loop eigenphases of the occupied bands.

    The product P = prod_j (I - u u^T) of occupied projectors is taken
    along ``direction`` for every transverse momentum; the zero
    eigenvalue belonging to the unoccupied band is dropped.

    For two occupied bands the loop is restricted to an oriented
    occupied frame at the base point (orientation set by a u3 that is
    made continuous along the transverse line).  The first branch then
    carries the rotation sense sign(W21 - W12), which is what makes the
    winding visible; the second branch is the phase of the other
    eigenvalue.  For more occupied bands the phases are returned sorted
    and must be tracked by :func:`track_branches`.
    """
    top, momenta = _orient(frames, direction)
    top = np.roll(top, -base, axis=0)  # base point first
    loops = np.swapaxes(top, 0, 1)  # (n_transverse, n_along, d)
    d = loops.shape[-1]
    P = _loop_matrices(loops, rank_tol)
    nt = len(momenta)
    if d == 3:
        u3 = loops[:, 0].copy()
        for j in range(1, nt):
            if u3[j] @ u3[j - 1] < 0:
                u3[j] = -u3[j]
        if u3[-1] @ u3[0] < 0:
            raise GaugeObstruction("occupied plane along the base line is not orientable")
        phases = np.zeros((nt, 2))
        mods = np.zeros((nt, 2))
        for j in range(nt):
            F = _oriented_pair(u3[j])
            W = F.T @ P[j] @ F
            lam = np.linalg.eigvals(W)
            if abs(lam[0].imag) > 1e-14 * max(1.0, abs(lam[0])):
                sense = np.sign(W[1, 0] - W[0, 1])
                first = 0 if np.sign(lam[0].imag) == sense else 1
            else:
                first = int(np.argmax(np.abs(lam)))
            order = [first, 1 - first]
            phases[j] = np.angle(lam[order])
            mods[j] = np.abs(lam[order])
    else:
        ev = np.linalg.eigvals(P)
        keep = np.argsort(np.abs(ev), axis=1)[:, 1:]
        ev = np.take_along_axis(ev, keep, axis=1)
        ph = np.angle(ev)
        o = np.argsort(ph, axis=1)
        phases = np.take_along_axis(ph, o, axis=1)
        mods = np.take_along_axis(np.abs(ev), o, axis=1)
    # angle() returns values in [-pi, pi]; move -pi to +pi
    phases = np.where(phases <= -np.pi, phases + TWO_PI, phases)
    return WilsonSpectrum(direction, np.asarray(momenta), phases, mods)


def _wrap(x):
    return np.mod(x + np.pi, TWO_PI) - np.pi


def track_branches(spec):
    """Reorder branches so each column varies continuously (nearest permutation)."""
    th = np.array(spec.branches, copy=True)
    nb = th.shape[1]
    perms = list(itertools.permutations(range(nb)))
    for j in range(1, len(th)):
        prev = th[j - 1]
        cost = [np.abs(_wrap(th[j, list(p)] - prev)).sum() for p in perms]
        th[j] = th[j, list(perms[int(np.argmin(cost))])]
    return th


def wilson_winding(spec, threshold=0.75 * np.pi, branch=0):
    """Signed winding of one Wilson branch over the transverse circle.

    Sums the wrapped phase increments between neighbouring transverse
    momenta, the closing step included.  Any increment larger than
    ``threshold`` means the branch cannot be followed reliably and
    raises UnwrapFailure.
    """
    th = spec.branches if spec.n_branches == 2 else track_branches(spec)
    col = th[:, branch]
    steps = _wrap(np.roll(col, -1) - col)
    if np.abs(steps).max() > threshold:
        raise UnwrapFailure(
            f"branch jump {np.abs(steps).max() / np.pi:.3f} pi exceeds {threshold / np.pi:.3f} pi"
        )
    return int(round(steps.sum() / TWO_PI))


def four_band_frames(m, s, grid=None):
    grid = grid or bloch.BZGrid()
    return bloch.frame_grid(lambda kx, ky: bloch.four_band_ham(m, kx, ky, s), grid)


def wilson_spectrum_four_band(m, s, nx=20, ny=20, direction="x"):
    """Three occupied-band Wilson phases along the four-band trivialisation path."""
    return wilson_spectrum(four_band_frames(m, s, bloch.BZGrid(nx, ny)), direction)


def wilson_gap_at_zero(spec, momentum=0.0):
    """Smallest |theta| among the non-trivial branches at the given momentum.

    One branch is pinned to theta = 0 for the four-band path (the
    loop is a real rotation of the three-dimensional occupied space);
    that branch is left out.
    """
    j = int(np.argmin(np.abs(_wrap(spec.momenta - momentum))))
    th = np.sort(np.abs(spec.branches[j]))
    if spec.n_branches == 3:
        th = th[1:]
    return float(th.min())


# -- entanglement spectrum -----------------------------------------------------


@dataclass
class EntanglementSpectrum:
    cut: str
    momentum: float
    eigenvalues: np.ndarray


def entanglement_spectrum(frames, cut="x", L=None):
    """Half-system correlation-matrix eigenvalues for each conserved momentum.

    cut='x' splits the system along x (open bipartition into two
    halves of L cells each) and keeps ky as a good quantum number.
    """
    top, momenta = _orient(frames, cut)
    n_along = top.shape[0]
    L = n_along // 2 if L is None else int(L)
    if 2 * L != n_along:
        raise InvalidParameter(f"grid size along the cut normal ({n_along}) must equal 2L")
    d = top.shape[-1]
    k = bloch.bz_axis(n_along)
    proj = np.eye(d) - top[..., :, None] * top[..., None, :]  # (n_along, n_trans, d, d)
    x = np.arange(L)
    phase = np.exp(1j * k[:, None, None] * (x[None, :, None] - x[None, None, :]))
    C = np.einsum("kab,kjst->jasbt", phase, proj) / n_along
    C = C.reshape(len(momenta), L * d, L * d)
    vals = np.linalg.eigvalsh(0.5 * (C + np.conj(np.swapaxes(C, -1, -2))))
    return [EntanglementSpectrum(cut, float(q), v) for q, v in zip(momenta, vals)]


# -- Dirac nodes ---------------------------------------------------------------


@dataclass
class DiracNode:
    kx: float
    ky: float
    gap: float


def _lower_gap(hamiltonian, kx, ky):
    e = np.linalg.eigvalsh(hamiltonian(kx, ky))
    return e[..., 1] - e[..., 0]


def locate_dirac_nodes(tolerance=1e-6, hamiltonian=None, scan=64):
    """Find touchings of the two lowest bands.

    A ``scan`` x ``scan`` grid is searched for periodic local minima of
    the gap e2 - e1 (8-neighbourhood), each refined with Nelder-Mead.
    Minima whose refined gap is below ``tolerance`` are returned.
    """
    hamiltonian = hamiltonian or bloch.perturbed_ham
    k = bloch.bz_axis(scan)
    KX, KY = np.meshgrid(k, k, indexing="ij")
    g = _lower_gap(hamiltonian, KX, KY)
    if g.max() <= tolerance:
        raise InvalidParameter("lower bands degenerate everywhere; no isolated nodes to locate")
    is_min = np.ones_like(g, dtype=bool)
    for a in (-1, 0, 1):
        for b in (-1, 0, 1):
            if (a, b) != (0, 0):
                is_min &= g <= np.roll(np.roll(g, a, axis=0), b, axis=1)
    nodes = []
    for i, j in np.argwhere(is_min):
        res = minimize(
            lambda p: _lower_gap(hamiltonian, p[0], p[1]),
            x0=[k[i], k[j]],
            method="Nelder-Mead",
            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 5000},
        )
        if res.fun >= tolerance:
            continue
        kx_, ky_ = bloch.wrap_momentum(res.x)
        if any(abs(_wrap(kx_ - q.kx)) < 1e-4 and abs(_wrap(ky_ - q.ky)) < 1e-4 for q in nodes):
            continue
        nodes.append(DiracNode(float(kx_), float(ky_), float(res.fun)))
    nodes.sort(key=lambda q: (q.kx, q.ky))
    return nodes
