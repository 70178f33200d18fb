import numpy as np
import pytest

from meshtex.sh import C0, SHBasisConfig, num_coeffs, sh_basis, sh_basis_batch

from oracles import sh_poly


def test_degree_zero_constant():
    assert sh_basis([0.6, 0.0, 0.8], 0) == pytest.approx([0.28209479])
    assert C0 == pytest.approx(1 / (2 * np.sqrt(np.pi)))


def test_z_axis_degree_one():
    # graphics convention: (-C1 y, C1 z, -C1 x), so the z term is positive
    assert sh_basis([0, 0, 1], SHBasisConfig(1)) == pytest.approx([0.28209479, 0, 0.48860251, 0])


def test_config_bounds_and_unit_check():
    assert SHBasisConfig(2).num_coeffs == 9 == num_coeffs(2)
    with pytest.raises(ValueError):
        SHBasisConfig(4)
    with pytest.raises(ValueError):
        sh_basis([1, 1, 0], 1)


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_matches_explicit_polynomials(degree):
    rng = np.random.default_rng(degree)
    d = rng.normal(size=(50, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    ref = np.array([sh_poly(x, degree) for x in d])
    assert np.allclose(sh_basis_batch(d, degree), ref, atol=1e-14)


def test_orthonormality_on_uniform_directions():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    for degree in (1, 2):
        Y = sh_basis_batch(d, degree)
        gram = 4 * np.pi * Y.T @ Y / len(d)
        assert np.abs(gram - np.eye(len(gram))).max() < 0.02
    # equal-area spiral points: same check through degree 3, far tighter
    n = 10_000
    z = 1 - (2 * np.arange(n) + 1) / n
    phi = np.arange(n) * np.pi * (3 - np.sqrt(5))
    r = np.sqrt(1 - z * z)
    Y = sh_basis_batch(np.stack([r * np.cos(phi), r * np.sin(phi), z], 1), 3)
    assert np.abs(4 * np.pi * Y.T @ Y / n - np.eye(16)).max() < 1e-3
