import numpy as np
import pytest
from hypothesis import given, strategies as st

from eulertopo import bloch, quench
from eulertopo import invariants as inv
from eulertopo.errors import (
    BoundaryNotFixed,
    CurvesTooClose,
    InvalidParameter,
    NotFlattened,
    OpenCurve,
)

from conftest import NONTRIVIAL, TRIVIAL

momenta = st.floats(-np.pi, np.pi, allow_nan=False)
times = st.floats(0, 2 * np.pi, allow_nan=False)


def image_closed_form(a, t):
    # psi = (-i s ax, -i s ay, c - i s az) pushed through the mu matrices by hand
    c, s = np.cos(t), np.sin(t)
    ax, ay, az = a
    px = -2 * s * s * ax * az + 2 * s * c * ay
    py = -2 * s * s * ay * az - 2 * s * c * ax
    pz = s * s * (ax * ax + ay * ay) - (c * c + s * s * az * az)
    return np.array([px, py, pz])


@pytest.fixture(scope="module")
def field1():
    return quench.build_hopf_field(1.0, 40, 40)


@pytest.fixture(scope="module")
def field3():
    return quench.build_hopf_field(3.0, 40, 40)


# -- evolution and images -------------------------------------------------------


def test_evolve_examples():
    H = bloch.euler_ham(1.0, 0.4, -1.3)
    assert np.allclose(quench.evolve_flat(H, 0.0), quench.PSI0)
    assert np.allclose(quench.evolve_flat(H, np.pi), -quench.PSI0)
    a = H @ quench.PSI0
    assert np.allclose(quench.evolve_flat(H, np.pi / 2), -1j * a)


def test_evolve_rejects_unflattened():
    with pytest.raises(NotFlattened):
        quench.evolve_flat(bloch.perturbed_ham(0.3, 0.2), 1.0)


@given(momenta, momenta, times)
def test_evolution_antiperiodic_and_matches_expm(kx, ky, t):
    from scipy.linalg import expm

    H = bloch.euler_ham(1.0, kx, ky)
    psi = quench.evolve_flat(H, t)
    assert np.allclose(psi, expm(-1j * t * H) @ quench.PSI0, atol=1e-12)
    assert np.allclose(quench.evolve_flat(H, t + np.pi), -psi, atol=1e-12)
    assert abs(np.linalg.norm(quench.hopf_image(psi)) - 1) < 1e-10


@given(st.sampled_from(NONTRIVIAL + TRIVIAL), momenta, momenta, times)
def test_image_against_closed_form(m, kx, ky, t):
    a = quench.a_vectors(bloch.n_vec(m, kx, ky))
    psi = quench.evolve_flat(bloch.euler_ham(m, kx, ky), t)
    assert np.abs(quench.hopf_image(psi) - image_closed_form(a, t)).max() < 1e-12


def test_image_examples():
    assert np.allclose(quench.hopf_image(quench.PSI0), [0, 0, -1])
    assert np.allclose(quench.hopf_image([-1j, 0, 0]), [0, 0, 1])


def test_a_field_examples():
    # n_z = 0 on ky = 0: a is the fixed value
    assert np.allclose(quench.a_vectors(bloch.n_vec(1.0, 0.7, 0.0)), [0, 0, -1])
    assert np.allclose(quench.a_vectors([0.0, 0.0, 1.0]), [0, 0, 1])
    a = quench.a_field(1.0, bloch.BZGrid(20, 20))
    assert np.allclose(np.linalg.norm(a, axis=-1), 1)


@pytest.mark.parametrize("m", NONTRIVIAL + TRIVIAL)
def test_full_zone_winding_of_a_vanishes(m):
    assert abs(inv.winding_number(quench.a_field(m, bloch.BZGrid(40, 40)))) < 1e-9


def test_field_t0_and_fixed_rows(field1):
    assert np.allclose(field1.image[:, :, 0], [0, 0, -1])
    for j in (0, 20):  # ky = -pi, 0
        assert np.allclose(field1.image[:, j], [0, 0, -1], atol=1e-12)
    assert np.allclose(np.sum(field1.lift**2, axis=-1), 1)


def test_field_random_nodes_independent(field1, rng):
    for _ in range(20):
        i, j, k = rng.integers(0, 40, size=3)
        kx, ky, t = field1.kx[i], field1.ky[j], field1.t[k]
        a = quench.a_vectors(bloch.n_vec(1.0, kx, ky))
        assert np.abs(field1.image[i, j, k] - image_closed_form(a, t)).max() < 1e-12


# -- patches -------------------------------------------------------------------


@pytest.mark.parametrize("m", NONTRIVIAL + TRIVIAL)
def test_patch_chern(m):
    g = bloch.BZGrid(40, 40)
    up, low = quench.patch_chern(m, "upper", g), quench.patch_chern(m, "lower", g)
    assert up + low == 0
    xi = inv.euler_class(bloch.n_vec(m, *g.mesh()))
    assert abs(up) == xi // 2


def test_degree_identity():
    # the degree integral equals minus half the solid-angle winding
    g = bloch.BZGrid(40, 40)
    for patch in quench.PATCHES:
        d = quench.pin_patch(quench.a_field(1.0, g), g.ky, patch)
        assert quench.map_degree(d) == pytest.approx(-inv.winding_number(d) / 2, abs=1e-12)
        assert abs(round(quench.lift_degree(d))) == 1


def test_pin_requires_fixed_boundary():
    g = bloch.BZGrid(8, 8)
    a = quench.a_field(1.0, g)
    a[:, 4] = [1.0, 0.0, 0.0]  # ky = 0 row
    with pytest.raises(BoundaryNotFixed):
        quench.pin_patch(a, g.ky, "upper")
    with pytest.raises(InvalidParameter):
        quench.patch_mask(g.ky, "left")


# -- Hopf invariant --------------------------------------------------------------


def test_hopf_invariant_m1(field1):
    up, low = quench.hopf_invariant(field1, "upper"), quench.hopf_invariant(field1, "lower")
    assert abs(abs(up) - 1) < 0.1 and abs(abs(low) - 1) < 0.1
    assert abs(up + low) < 1e-9


def test_hopf_invariant_m3(field3):
    for patch in quench.PATCHES:
        assert abs(quench.hopf_invariant(field3, patch)) < 0.1


def test_restricted_field_consistency(field1):
    up = field1.restricted("upper")
    assert up.restricted("upper") is up
    with pytest.raises(InvalidParameter):
        up.restricted("lower")


# -- preimages and linking -------------------------------------------------------


def test_preimage_rejects_fixed_target(field1):
    with pytest.raises(InvalidParameter):
        quench.extract_preimage(field1, (0, 0, -1))


def test_preimage_points_hit_target(field1):
    for target in [(1, 0, 0), (0, 1, 0)]:
        loops = quench.extract_preimage(field1, target)
        assert loops and all(L.closed for L in loops)
        for L in loops:
            # interpolate the image at the curve points by evaluating the closed form
            kx, ky, t = L.points.T
            a = quench.a_vectors(bloch.n_vec(1.0, kx, ky))
            p = image_closed_form(a.T, t).T
            assert np.min(p @ np.asarray(target, float)) > 0.99


def test_preimage_structure_m1(field1):
    # (0, +-1, 0): one contractible loop per patch
    for target in [(0, 1, 0), (0, -1, 0)]:
        loops = quench.extract_preimage(field1, target)
        assert len(loops) == 2 and all(L.contractible for L in loops)
    # (1, 0, 0): a contractible loop in one patch, two oppositely
    # kx-winding strands in the other
    loops = quench.extract_preimage(field1, (1, 0, 0))
    assert len(loops) == 3
    assert sorted(L.winding[0] for L in loops) == [-1, 0, 1]


def test_preimage_too_coarse():
    coarse = quench.build_hopf_field(1.0, 6, 6)
    with pytest.raises(OpenCurve):
        quench.extract_preimage(coarse, (0, 1, 0))


def circle(center, normal, radius=1.0, n=400):
    normal = np.asarray(normal, float) / np.linalg.norm(normal)
    u = np.cross(normal, [0.3, 0.5, 0.7])
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    phi = 2 * np.pi * np.arange(n + 1) / n
    return np.asarray(center) + radius * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v)


def test_gauss_linking_hopf_link():
    A = circle([0, 0, 0], [0, 0, 1])
    B = circle([1, 0, 0], [0, 1, 0])
    lk = quench.gauss_linking(A, B)
    assert abs(abs(lk) - 1) < 1e-3
    assert quench.gauss_linking(A, B[::-1]) == pytest.approx(-lk, abs=1e-9)
    assert quench.gauss_linking(B, A) == pytest.approx(lk, abs=1e-9)


def test_gauss_linking_unlinked_and_errors():
    A = circle([0, 0, 0], [0, 0, 1])
    B = circle([3, 0, 0], [0, 0, 1])
    assert abs(quench.gauss_linking(A, B)) < 1e-9
    with pytest.raises(CurvesTooClose):
        quench.gauss_linking(A, circle([1.0, 0, 0], [0, 1, 0]), min_distance=2.0)
    with pytest.raises(OpenCurve):
        quench.gauss_linking(A[:-5], B)


def test_patch_linking_m1(field1):
    totals = {}
    for patch in quench.PATCHES:
        total, c1, c2 = quench.patch_linking(field1, patch)
        totals[patch] = total
        assert abs(total - quench.hopf_invariant(field1, patch)) < 0.1
    assert abs(abs(totals["upper"]) - 1) < 0.01
    assert totals["upper"] == pytest.approx(-totals["lower"], abs=1e-4)


def test_patch_linking_m3(field3):
    for patch in quench.PATCHES:
        total, c1, c2 = quench.patch_linking(field3, patch)
        assert total == 0.0
    # loops exist, just not linked
    assert quench.extract_preimage(field3, (1, 0, 0))


def test_refinement_invariance(field1):
    fine = quench.build_hopf_field(1.0, 80, 80)
    for target in [(1, 0, 0), (-1, 0, 0), (0, 1, 0)]:
        a = quench.extract_preimage(field1, target)
        b = quench.extract_preimage(fine, target)
        assert len(a) == len(b)
        assert sorted(L.winding for L in a) == sorted(L.winding for L in b)
    for patch in quench.PATCHES:
        assert round(quench.patch_linking(field1, patch)[0]) == round(quench.patch_linking(fine, patch)[0])


def test_embed_patch_orientation():
    # the embedding maps a small positively oriented frame to one with det > 0
    p = np.array([0.3, 1.2, 1.0])
    h = 1e-6
    J = np.stack([(quench.embed_patch(p + h * e, "upper") - quench.embed_patch(p - h * e, "upper")) / (2 * h)
                  for e in np.eye(3)], axis=1)
    assert np.linalg.det(J) > 0
    with pytest.raises(InvalidParameter):
        quench.embed_patch(p, "middle")
