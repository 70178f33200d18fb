"""Real spherical harmonics, degrees 0 to 3.

Uses the common graphics convention (as in most radiance-field code)::

    l=0: C0
    l=1: -C1 y, C1 z, -C1 x
    l=2: C2[0] xy, C2[1] yz, C2[2] (2z^2 - x^2 - y^2), C2[3] xz, C2[4] (x^2 - y^2)
    l=3: C3[0] y(3x^2 - y^2), C3[1] xyz, C3[2] y(4z^2 - x^2 - y^2),
         C3[3] z(2z^2 - 3x^2 - 3y^2), C3[4] x(4z^2 - x^2 - y^2),
         C3[5] z(x^2 - y^2), C3[6] x(x^2 - 3y^2)

The basis is orthonormal on the unit sphere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


@dataclass(frozen=True)
class SHBasisConfig:
    degree: int = 2

    def __post_init__(self):
        if not 0 <= self.degree <= 3:
            raise ValueError(f"SH degree must be in 0..3, got {self.degree}")

    @property
    def num_coeffs(self) -> int:
        return (self.degree + 1) ** 2


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis_batch(dirs, degree: int) -> np.ndarray:
    """Evaluate the basis for an (N, 3) array of unit directions -> (N, K)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full_like(x, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy),
                C2[3] * x * z, C2[4] * (xx - yy)]
    if degree >= 3:
        out += [C3[0] * y * (3 * xx - yy), C3[1] * x * y * z, C3[2] * y * (4 * zz - xx - yy),
                C3[3] * z * (2 * zz - 3 * xx - 3 * yy), C3[4] * x * (4 * zz - xx - yy),
                C3[5] * z * (xx - yy), C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis(direction, cfg: SHBasisConfig | int) -> np.ndarray:
    degree = cfg.degree if isinstance(cfg, SHBasisConfig) else int(cfg)
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("direction must be unit length")
    return sh_basis_batch(d[None], degree)[0]
