"""Model Hamiltonians, real eigenframes and gauge fixing on Brillouin-zone grids.

All functions broadcast over leading array axes, so a whole grid of
momenta can be passed at once.  Vectors live on the last axis and
matrices on the last two.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVector, GaugeObstruction, InvalidParameter

TWO_PI = 2.0 * np.pi

# |m| this close to 0 or 2 makes the normalisation vanish somewhere in the BZ
MASS_GUARD = 1e-9

PAULI = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)


def wrap_momentum(k):
    """Reduce momenta into the window [-pi, pi)."""
    k = np.asarray(k, dtype=float)
    return np.mod(k + np.pi, TWO_PI) - np.pi


def check_mass(m):
    m = float(m)
    if not np.isfinite(m):
        raise InvalidParameter(f"m must be finite, got {m}")
    for bad in (0.0, 2.0):
        if abs(abs(m) - bad) < MASS_GUARD:
            raise InvalidParameter(
                f"m={m}: |m|={bad:g} is excluded, the band gap closes there"
            )
    return m


def bz_axis(n):
    """Grid momenta -pi + 2 pi j / n, j = 0..n-1."""
    return -np.pi + TWO_PI * np.arange(n) / n


@dataclass(frozen=True)
class BZGrid:
    """Uniform periodic nx x ny sampling of the Brillouin zone.

    Node (i, j) sits at (kx[i], ky[j]); arrays built from a grid use
    ``indexing='ij'`` so axis 0 is kx and axis 1 is ky.
    """

    nx: int = 20
    ny: int = 20

    def __post_init__(self):
        if int(self.nx) < 4 or int(self.ny) < 4:
            raise InvalidParameter("grid sizes must be >= 4")

    @property
    def kx(self):
        return bz_axis(self.nx)

    @property
    def ky(self):
        return bz_axis(self.ny)

    def mesh(self):
        return np.meshgrid(self.kx, self.ky, indexing="ij")


def _raw_n(m, kx, ky):
    kx = np.asarray(kx, dtype=float)
    ky = np.asarray(ky, dtype=float)
    return np.stack(
        np.broadcast_arrays(m - np.cos(kx) - np.cos(ky), np.sin(kx), np.sin(ky)),
        axis=-1,
    )


def n_vec(m, kx, ky):
    """Unit vector n(k) = (m - cos kx - cos ky, sin kx, sin ky) / norm."""
    m = check_mass(m)
    v = _raw_n(m, kx, ky)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateVector("n(k) vanishes at a requested momentum")
    return v / norm


def flat_ham(n):
    """2 n n^T - I for unit vectors n of any dimension."""
    n = np.asarray(n, dtype=float)
    d = n.shape[-1]
    return 2.0 * n[..., :, None] * n[..., None, :] - np.eye(d)


def euler_ham(m, kx, ky):
    """Flattened three-band Euler Hamiltonian, spectrum {-1, -1, +1}."""
    return flat_ham(n_vec(m, kx, ky))


def perturbed_ham(kx, ky, m=1.0, strength=0.1, split=0.5):
    """Euler Hamiltonian plus diag(h0, h0 + split, h0 - split).

    h0 = strength * (cos ky - cos kx).  The defaults reproduce the
    node-splitting perturbation that leaves four Dirac points between
    the two lower bands at m = 1.
    """
    kx = np.asarray(kx, dtype=float)
    ky = np.asarray(ky, dtype=float)
    h0 = strength * (np.cos(ky) - np.cos(kx))
    diag = np.stack(np.broadcast_arrays(h0, h0 + split, h0 - split), axis=-1)
    return euler_ham(m, kx, ky) + diag[..., :, None] * np.eye(3)


def four_band_n(m, kx, ky, s):
    """Four-component unit vector (cos(pi s/2) n, sin(pi s/2))."""
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise InvalidParameter(f"s must lie in [0, 1], got {s}")
    n3 = n_vec(m, kx, ky)
    c, sn = np.cos(np.pi * s / 2), np.sin(np.pi * s / 2)
    tail = np.full(n3.shape[:-1] + (1,), sn)
    return np.concatenate([c * n3, tail], axis=-1)


def four_band_ham(m, kx, ky, s):
    """Flattened 4x4 Hamiltonian interpolating from H3 (+) (-1) to diag(-1,-1,-1,1)."""
    return flat_ham(four_band_n(m, kx, ky, s))


def chern_map(n):
    """Two-band Hamiltonian n . sigma (standard Pauli matrices)."""
    n = np.asarray(n, dtype=float)
    return np.einsum("...i,ijk->...jk", n, PAULI)


# -- eigenframes -------------------------------------------------------------


def canonical_sign(vecs):
    """Flip eigenvectors so their largest-magnitude component is positive.

    ``vecs`` holds vectors along axis -2 (columns), as returned by eigh.
    Ties (within 1e-12) go to the lowest index.
    """
    a = np.abs(vecs)
    top = a.max(axis=-2, keepdims=True)
    first = np.argmax(a >= top - 1e-12, axis=-2)[..., None, :]
    lead = np.take_along_axis(vecs, first, axis=-2)
    sign = np.where(lead < 0, -1.0, 1.0)
    return vecs * sign


@dataclass
class BlochFrame:
    """Real orthonormal eigenvectors (columns of ``vectors``) with ascending energies."""

    vectors: np.ndarray
    energies: np.ndarray

    @property
    def u1(self):
        return self.vectors[..., :, 0]

    @property
    def u2(self):
        return self.vectors[..., :, 1]

    @property
    def u3(self):
        return self.vectors[..., :, 2]


def eig_frame(H):
    """Diagonalise real symmetric matrices (single or stacked).

    Returns a BlochFrame whose arrays carry the same leading shape as H.
    """
    H = np.asarray(H, dtype=float)
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    w, v = np.linalg.eigh(H)
    return BlochFrame(canonical_sign(v), w)


@dataclass
class FrameGrid:
    """Bloch frames over a BZGrid: ``vectors`` has shape (nx, ny, d, d)."""

    grid: BZGrid
    vectors: np.ndarray
    energies: np.ndarray
    orientable: bool | None = None
    meta: dict = field(default_factory=dict)

    def band(self, i):
        return self.vectors[..., :, i]

    @property
    def top(self):
        return self.vectors[..., :, -1]


def frame_grid(hamiltonian, grid: BZGrid):
    """Evaluate ``hamiltonian(kx, ky)`` on every node and diagonalise."""
    KX, KY = grid.mesh()
    fr = eig_frame(hamiltonian(KX, KY))
    return FrameGrid(grid, fr.vectors, fr.energies)


def euler_frames(m, grid: BZGrid | None = None):
    grid = grid or BZGrid()
    return frame_grid(lambda kx, ky: euler_ham(m, kx, ky), grid)


def frames_from_top(u3, grid: BZGrid | None = None):
    """Build frames from a field of top-band vectors.

    Used when only u3 is known (e.g. reconstructed from tomography).
    The occupied pair is rebuilt from the projector and is arbitrary.
    """
    u3 = np.asarray(u3, dtype=float)
    u3 = u3 / np.linalg.norm(u3, axis=-1, keepdims=True)
    nx, ny = u3.shape[:2]
    grid = grid or BZGrid(nx, ny)
    fr = eig_frame(flat_ham(u3))
    vecs = fr.vectors.copy()
    vecs[..., :, -1] = u3
    return FrameGrid(grid, vecs, fr.energies)


def fix_gauge(frames: FrameGrid, reference=None, band=-1, min_overlap=0.1):
    """Choose signs of one band so that it varies continuously.

    With a reference field the sign is set by positive overlap.  Without
    one the signs are propagated row-major: first down the kx = first
    column, then along each row.  Afterwards every nearest-neighbour
    bond, including the periodic seams, is checked; ``orientable`` is
    True when all of them have positive overlap.

    Raises GaugeObstruction if a bond used for propagation (or a
    reference overlap) has magnitude below ``min_overlap``.
    """
    vecs = np.array(frames.vectors, copy=True)
    u = vecs[..., :, band]
    nx, ny = u.shape[:2]
    if reference is not None:
        ref = np.asarray(reference, dtype=float)
        ov = np.einsum("...i,...i", u, ref)
        if np.any(np.abs(ov) < min_overlap):
            raise GaugeObstruction("reference overlap too small to fix sign")
        u = u * np.sign(ov)[..., None]
    else:
        u = u.copy()
        for i in range(nx):
            if i > 0:
                ov = u[i, 0] @ u[i - 1, 0]
                if abs(ov) < min_overlap:
                    raise GaugeObstruction(f"overlap {ov:.3g} at node ({i}, 0)")
                if ov < 0:
                    u[i, 0] = -u[i, 0]
            for j in range(1, ny):
                ov = u[i, j] @ u[i, j - 1]
                if abs(ov) < min_overlap:
                    raise GaugeObstruction(f"overlap {ov:.3g} at node ({i}, {j})")
                if ov < 0:
                    u[i, j] = -u[i, j]
    # all bonds, seams included
    bx = np.einsum("...i,...i", u, np.roll(u, -1, axis=0))
    by = np.einsum("...i,...i", u, np.roll(u, -1, axis=1))
    orientable = bool(np.all(bx > 0) and np.all(by > 0))
    vecs[..., :, band] = u
    return FrameGrid(frames.grid, vecs, np.array(frames.energies), orientable, dict(frames.meta))
