"""Quench dynamics under the flattened Euler Hamiltonian and its Hopf structure.

The initial state psi0 = (0, 0, 1) evolves as
psi(k, t) = cos(t) psi0 - i sin(t) a(k) with a(k) = H(k) psi0.  The
image p(k, t) = (psi^+ mu_x psi, psi^+ mu_y psi, psi^+ mu_z psi) maps the
(kx, ky, t) torus to the sphere.  The curves n_z = 0 (ky = 0, pi) are
frozen, which cuts the Brillouin zone into two patches, each carrying
its own Hopf link.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
import itertools

import numpy as np

from . import bloch, invariants
from .errors import (
    BoundaryNotFixed,
    CurvesTooClose,
    InvalidParameter,
    NotFlattened,
    OpenCurve,
)

PSI0 = np.array([0.0, 0.0, 1.0], dtype=complex)
FIXED_IMAGE = np.array([0.0, 0.0, -1.0])
FIXED_A = np.array([0.0, 0.0, -1.0])

MU = np.array(
    [
        [[0, 0, -1], [0, 0, -1j], [-1, 1j, 0]],
        [[0, 0, 1j], [0, 0, -1], [-1j, -1, 0]],
        [[1, 0, 0], [0, 1, 0], [0, 0, -1]],
    ],
    dtype=complex,
)

PATCHES = ("upper", "lower")


def evolve_flat(H, t, psi0=PSI0, tol=1e-9):
    """exp(-i t H) psi0 for H with H^2 = I, via cos(t) - i sin(t) H."""
    H = np.asarray(H)
    sq = H @ H
    if np.abs(sq - np.eye(H.shape[-1])).max() > tol:
        raise NotFlattened("H^2 differs from the identity")
    t = np.asarray(t, dtype=float)[..., None]
    psi0 = np.asarray(psi0, dtype=complex)
    return np.cos(t) * psi0 - 1j * np.sin(t) * np.einsum("...ij,...j->...i", H, psi0)


def a_vectors(n):
    """a = H psi0 = (2 nx nz, 2 ny nz, 2 nz^2 - 1) for unit vectors n."""
    n = np.asarray(n, dtype=float)
    a = 2.0 * n * n[..., 2:3]
    a[..., 2] -= 1.0
    return a


def a_field(m, grid=None):
    grid = grid or bloch.BZGrid()
    return a_vectors(bloch.n_vec(m, *grid.mesh()))


def patch_mask(ky, patch):
    """Open patch: 0 < ky < pi (upper) or -pi < ky < 0 (lower)."""
    ky = bloch.wrap_momentum(ky)
    if patch == "upper":
        return (ky > 0) & (ky < np.pi)
    if patch == "lower":
        return (ky < 0) & (ky > -np.pi)
    raise InvalidParameter(f"patch must be 'upper' or 'lower', got {patch!r}")


def pin_patch(a, ky, patch, tol=1e-6):
    """Replace a outside the open patch by the fixed-point value (0, 0, -1).

    The field actually takes that value on the boundary curves, which is
    checked on any grid row that lies exactly on ky = 0 or ky = -pi.
    """
    a = np.array(a, dtype=float, copy=True)
    ky = np.asarray(ky, dtype=float)
    on_edge = np.isclose(np.abs(bloch.wrap_momentum(ky)), 0.0, atol=1e-12) | np.isclose(
        bloch.wrap_momentum(ky), -np.pi, atol=1e-12
    )
    KY = np.broadcast_to(ky[None, :], a.shape[:2])
    edge = np.broadcast_to(on_edge[None, :], a.shape[:2])
    if edge.any() and np.abs(a[edge] - FIXED_A).max() > tol:
        raise BoundaryNotFixed("a(k) on the ky = 0, pi rows is not (0, 0, -1)")
    a[~patch_mask(KY, patch)] = FIXED_A
    return a


def patch_chern(m, patch, grid=None):
    """Chern number of the lower band of a . sigma restricted to one patch."""
    grid = grid or bloch.BZGrid()
    a = pin_patch(a_field(m, grid), grid.ky, patch)
    return invariants.chern_of_field(a)


def map_degree(d):
    """-(1/4pi) * integral of d . (d_x d x d_y d), evaluated by solid angles."""
    return float(-invariants.solid_angles(d).sum() / (4 * np.pi))


def lift_degree(a):
    """Degree of the map (k, t) -> (cos t, sin t a) onto the three-sphere.

    Same formula as for a two-band quench with the vector d = -a.
    """
    return map_degree(-np.asarray(a, dtype=float))


def hopf_image(psi):
    """p = psi^+ mu psi for the three mu matrices (broadcasts over leading axes)."""
    psi = np.asarray(psi, dtype=complex)
    return np.real(np.einsum("...i,cij,...j->...c", psi.conj(), MU, psi))


def spinor_lift(a, t):
    """Point (cos t, sin t ax, sin t ay, sin t az) on the three-sphere."""
    a = np.asarray(a, dtype=float)
    t = np.asarray(t, dtype=float)
    s = np.sin(t)[..., None]
    x0 = np.broadcast_to(np.cos(t), np.broadcast_shapes(a.shape[:-1], t.shape))
    return np.concatenate([x0[..., None], s * a], axis=-1)


def two_spinor(x):
    """Two-component spinor z = (x2 + i x1, x0 - i x3) of a lift."""
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 2] + 1j * x[..., 1], x[..., 0] - 1j * x[..., 3]], axis=-1)


@dataclass
class HopfField:
    """Evolved states and their images on the (kx, ky, t) grid.

    Axes of the arrays: (kx, ky, t, component).  t runs over [0, pi).
    ``patch`` records the region kept by pinning (None: whole BZ).
    """

    m: float
    kx: np.ndarray
    ky: np.ndarray
    t: np.ndarray
    a: np.ndarray
    psi: np.ndarray
    image: np.ndarray
    lift: np.ndarray
    patch: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.image.shape[:3]

    @property
    def periods(self):
        return (2 * np.pi, 2 * np.pi, np.pi)

    @property
    def origin(self):
        return np.array([-np.pi, -np.pi, 0.0])

    @property
    def spacing(self):
        return np.array(self.periods) / np.array(self.shape)

    def restricted(self, patch):
        """Same field with a pinned outside ``patch``."""
        if self.patch == patch:
            return self
        if self.patch is not None:
            raise InvalidParameter("field is already restricted to another patch")
        return field_from_a(self.m, self.kx, self.ky, self.t, pin_patch(self.a, self.ky, patch), patch)


def field_from_a(m, kx, ky, t, a, patch=None):
    T = t[None, None, :, None]
    A = a[:, :, None, :]
    psi = np.cos(T) * PSI0 - 1j * np.sin(T) * A
    lift = spinor_lift(A, t[None, None, :])
    return HopfField(float(m), kx, ky, t, a, psi, hopf_image(psi), lift, patch)


def build_hopf_field(m, nk=64, nt=64, patch=None, nky=None):
    """Evolve psi0 under H(k) on an nk x nky x nt grid over [-pi, pi)^2 x [0, pi)."""
    nky = nk if nky is None else nky
    grid = bloch.BZGrid(nk, nky)
    if nt < 4:
        raise InvalidParameter("nt must be >= 4")
    t = np.pi * np.arange(nt) / nt
    a = a_field(m, grid)
    if patch is not None:
        a = pin_patch(a, grid.ky, patch)
    return field_from_a(m, grid.kx, grid.ky, t, a, patch)


# -- Hopf invariant ----------------------------------------------------------


def _shift(z, axis, step):
    # periodic neighbour; z(t + pi) = -z(t), so the t seam flips sign
    r = np.roll(z, -step, axis=axis)
    if axis == 2:
        if step == 1:
            r[:, :, -1] *= -1
        else:
            r[:, :, 0] *= -1
    return r


def hopf_invariant(field: HopfField, patch=None):
    """Whitehead integral chi = (1/4pi^2) * sum A . curl A * dV.

    A = Im(z^+ dz) by centred differences of the two-spinor z of the
    lift; curl A comes from plaquette phases of the link variables
    z^+(r) z(r + e), averaged over the four plaquettes sharing a node.
    """
    if patch is not None:
        field = field.restricted(patch)
    z = two_spinor(field.lift)
    d = field.spacing
    conn = [
        np.imag(np.sum(z.conj() * (_shift(z, ax, 1) - _shift(z, ax, -1)), axis=-1)) / (2 * d[ax])
        for ax in range(3)
    ]
    link = [np.angle(np.sum(z.conj() * _shift(z, ax, 1), axis=-1)) for ax in range(3)]

    def curv(p, q):
        f = link[p] + np.roll(link[q], -1, axis=p) - np.roll(link[p], -1, axis=q) - link[q]
        f = np.angle(np.exp(1j * f)) / (d[p] * d[q])
        return 0.25 * (f + np.roll(f, 1, axis=p) + np.roll(f, 1, axis=q)
                       + np.roll(np.roll(f, 1, axis=p), 1, axis=q))

    bx, by, bt = curv(1, 2), curv(2, 0), curv(0, 1)
    dens = conn[0] * bx + conn[1] * by + conn[2] * bt
    return float(dens.sum() * d.prod() / (4 * np.pi**2))


# -- preimages -----------------------------------------------------------------


@dataclass
class Polyline3:
    """Preimage curve in (kx, ky, t) coordinates.

    The points are unwrapped, so a closed curve that winds around the
    torus ends at start + winding * periods.
    """

    points: np.ndarray
    closed: bool
    winding: tuple = (0, 0, 0)

    def __len__(self):
        return len(self.points)

    @property
    def contractible(self):
        return not any(self.winding)


_KUHN = list(itertools.permutations(range(3)))


class _EdgeSigns:
    # exact orientation sign of (F_i, F_j) per global edge, so neighbouring
    # tetrahedra agree on which faces the curve crosses
    def __init__(self):
        self.cache = {}

    def __call__(self, i, j, fi, fj):
        key = (i, j)
        s = self.cache.get(key)
        if s is None:
            cr = fi[0] * fj[1] - fi[1] * fj[0]
            if abs(cr) <= 1e-9 * (abs(fi[0] * fj[1]) + abs(fi[1] * fj[0])) + 1e-300:
                cr = Fraction(fi[0]) * Fraction(fj[1]) - Fraction(fi[1]) * Fraction(fj[0])
            s = 1 if cr > 0 else -1
            self.cache[key] = s
        return s


def _transverse_basis(target):
    g = np.array([0.3183, 0.5772, 0.7071])  # generic, avoids accidental alignment
    e1 = np.cross(target, g)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(target, e1)
    return e1, e2


def extract_preimage(field: HopfField, target, max_nodes=None):
    """Closed curves on which the image equals ``target``.

    Each grid cube is cut into six tetrahedra.  On a tetrahedron the two
    transverse components f1 = p.e1, f2 = p.e2 are linear, so their
    common zero set is a segment joining two faces; segments with
    p.target > 0 at both ends are kept and chained face to face.
    Segments are oriented along grad f1 x grad f2.
    """
    target = np.asarray(target, dtype=float)
    target = target / np.linalg.norm(target)
    if np.linalg.norm(target - FIXED_IMAGE) < 1e-6:
        raise InvalidParameter("target equals the fixed-point image (0, 0, -1)")
    p = field.image
    shape = np.array(field.shape)
    h = field.spacing
    e1, e2 = _transverse_basis(target)
    f1, f2, ft = p @ e1, p @ e2, p @ target

    def corners(f):
        return np.stack(
            [np.roll(f, (-i, -j, -k), axis=(0, 1, 2)) for i in (0, 1) for j in (0, 1) for k in (0, 1)],
            axis=-1,
        )

    c1, c2, ct = corners(f1), corners(f2), corners(ft)
    cand = (c1.min(-1) <= 0) & (c1.max(-1) >= 0) & (c2.min(-1) <= 0) & (c2.max(-1) >= 0) & (ct.max(-1) > 0)
    cubes = np.argwhere(cand)

    def node_id(v):
        w = v % shape
        return int((w[0] * shape[1] + w[1]) * shape[2] + w[2])

    esign = _EdgeSigns()
    faces = {}
    nxt = {}
    for cube in cubes:
        for perm in _KUHN:
            verts = [cube.copy()]
            for ax in perm:
                v = verts[-1].copy()
                v[ax] += 1
                verts.append(v)
            ids = [node_id(v) for v in verts]
            wrapped = [tuple(v % shape) for v in verts]
            F = np.array([[f1[w], f2[w]] for w in wrapped])
            T = np.array([ft[w] for w in wrapped])
            X = np.array(verts, dtype=float) * h
            hits = []
            for drop in range(4):
                loc = sorted((q for q in range(4) if q != drop), key=lambda q: ids[q])
                key = tuple(ids[q] for q in loc)
                if key not in faces:
                    a_, b_, c_ = loc
                    sab = esign(ids[a_], ids[b_], F[a_], F[b_])
                    sbc = esign(ids[b_], ids[c_], F[b_], F[c_])
                    sac = esign(ids[a_], ids[c_], F[a_], F[c_])
                    lam = None
                    if sab == sbc == -sac:
                        M = np.array([F[b_] - F[a_], F[c_] - F[a_]]).T
                        lam = np.linalg.lstsq(M, -F[a_], rcond=None)[0]
                    faces[key] = lam
                lam = faces[key]
                if lam is not None:
                    a_, b_, c_ = loc
                    pt = X[a_] + lam[0] * (X[b_] - X[a_]) + lam[1] * (X[c_] - X[a_])
                    tv = T[a_] + lam[0] * (T[b_] - T[a_]) + lam[1] * (T[c_] - T[a_])
                    hits.append((key, pt, tv, drop))
            if not hits:
                continue
            if len(hits) != 2:
                raise OpenCurve(f"{len(hits)} crossings in one tetrahedron")
            if hits[0][2] <= 0 or hits[1][2] <= 0:
                continue
            E = X[1:] - X[0]
            G = np.linalg.solve(E, F[1:] - F[0])
            direction = np.cross(G[:, 0], G[:, 1])

            def outflux(drop):
                loc = [q for q in range(4) if q != drop]
                nrm = np.cross(X[loc[1]] - X[loc[0]], X[loc[2]] - X[loc[0]])
                if nrm @ (X[drop] - X[loc[0]]) > 0:
                    nrm = -nrm
                return direction @ nrm

            A, B = hits
            if outflux(A[3]) > outflux(B[3]):
                A, B = B, A
            if A[0] in nxt:
                raise OpenCurve("two segments leave the same face; grid too coarse")
            nxt[A[0]] = (B[0], A[1], B[1])

    periods = np.array(field.periods)
    loops = []
    seen = set()
    for start in nxt:
        if start in seen:
            continue
        key = start
        cur = None
        pts = []
        while True:
            seen.add(key)
            if key not in nxt:
                raise OpenCurve("preimage curve ends inside the domain")
            nk, pa, pb = nxt[key]
            if cur is None:
                cur = pa
                pts.append(cur)
            cur = cur + (pb - pa)
            pts.append(cur)
            key = nk
            if key == start:
                break
            if max_nodes and len(pts) > max_nodes:
                raise OpenCurve("curve exceeds max_nodes")
        pts = np.array(pts) + field.origin
        wind = np.rint((pts[-1] - pts[0]) / periods).astype(int)
        loops.append(Polyline3(pts, True, tuple(int(w) for w in wind)))
    loops.sort(key=lambda L: tuple(np.round(L.points.mean(axis=0), 9)))
    return loops


def embed_patch(points, patch):
    """Map patch coordinates (kx, ky, t) into a spherical shell in R^3.

    kx becomes the azimuth, the open ky interval of the patch the polar
    angle and t the radius 1 + t.  The pinned boundary (both ky edges,
    t = 0 and t = pi) then sits on the poles and on the two bounding
    spheres, so curves that wind around kx on the torus become ordinary
    closed curves.  The map is orientation preserving.
    """
    pts = np.asarray(points, dtype=float)
    kx, ky, t = pts[..., 0], pts[..., 1], pts[..., 2]
    if patch == "upper":
        theta = np.pi - np.mod(ky, 2 * np.pi)
    elif patch == "lower":
        theta = np.pi - np.mod(ky + np.pi, 2 * np.pi)
    else:
        raise InvalidParameter(f"patch must be 'upper' or 'lower', got {patch!r}")
    r = 1.0 + t
    return np.stack([r * np.sin(theta) * np.cos(kx), r * np.sin(theta) * np.sin(kx), r * np.cos(theta)], axis=-1)


def gauss_linking(A, B, min_distance=0.0):
    """Gauss double integral for two closed polylines in R^3.

    Midpoint rule on segment pairs.  Raises CurvesTooClose when the
    curves come within ``min_distance`` of each other.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    for C in (A, B):
        if np.linalg.norm(C[-1] - C[0]) > 1e-9 * max(1.0, np.abs(C).max()):
            raise OpenCurve("gauss_linking needs closed curves (last point = first)")
    ma, da = 0.5 * (A[1:] + A[:-1]), A[1:] - A[:-1]
    mb, db = 0.5 * (B[1:] + B[:-1]), B[1:] - B[:-1]
    r = ma[:, None, :] - mb[None, :, :]
    dist = np.linalg.norm(r, axis=-1)
    if dist.min() <= min_distance:
        raise CurvesTooClose(f"curves {dist.min():.3g} apart (limit {min_distance:.3g})")
    num = np.einsum("ijk,ijk->ij", r, np.cross(da[:, None, :], db[None, :, :]))
    return float((num / dist**3).sum() / (4 * np.pi))


DEFAULT_TARGETS = ((1.0, 0.0, 0.0), (-1.0, 0.0, 0.0))


def patch_linking(field: HopfField, patch, targets=DEFAULT_TARGETS):
    """Linking number of the preimages of two targets inside one patch.

    Returns (linking, curves_1, curves_2).  A preimage may consist of
    several closed components; the linking of the two preimages is the
    sum over all component pairs, computed after :func:`embed_patch`.
    """
    pf = field.restricted(patch)
    c1 = extract_preimage(pf, targets[0])
    c2 = extract_preimage(pf, targets[1])
    # half the smallest (radial) cell as the closeness limit
    limit = 0.5 * pf.spacing[2]
    total = 0.0
    for A in c1:
        for B in c2:
            total += gauss_linking(embed_patch(A.points, patch), embed_patch(B.points, patch), limit)
    return total, c1, c2
