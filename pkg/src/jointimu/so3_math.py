# Copyright 2022 Softpoint Consultores SL. All Rights Reserved.
#
# Licensed under MIT License (the "License");
# you may not use this file except in compliance with the License.
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
# ==============================================================================

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.transform import Rotation
from sklearn.utils import check_array

from .errors import IllConditionedWarning, NonFiniteInput, RankDeficient

logger = logging.getLogger(__name__)

SVD_EPS = 2.0 ** -52
DEFAULT_CONDITION_LIMIT = 1e8


def as_finite(x, name='input'):
    """
    Args:
        x:
            array-like of any shape
        name(str):
            argument name used in the error message

    Returns:
        float ndarray with the shape of x. Raises NonFiniteInput
        when any entry is NaN or Inf.
    """
    arr = np.asarray(x, dtype=float)
    flat = arr.reshape(1, -1) if arr.ndim < 2 \
        else arr.reshape(arr.shape[0], -1)
    try:
        check_array(
            flat,
            ensure_min_samples=0,
            ensure_min_features=0,
        )
    except ValueError as error:
        raise NonFiniteInput(f'{name}: {error}') from None
    return arr


def skew(v):
    """Cross-product matrix: skew(v) @ w == np.cross(v, w)."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def axis_angle(axis, angle):
    """Rotation by `angle` rad about the unit vector `axis` (Rodrigues)."""
    k = skew(axis)
    s, c = np.sin(angle), np.cos(angle)
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def rotation_exp(rotvec):
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix()


def rotation_log(R):
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def geodesic_distance(R1, R2):
    """Angle in rad of the relative rotation R1ᵀR2."""
    relative = np.asarray(R1).T @ np.asarray(R2)
    return float(Rotation.from_matrix(relative).magnitude())


def orthonormalize(R):
    """Closest rotation to R (polar factor), used after long products."""
    u, _ = linalg.polar(np.asarray(R, dtype=float))
    if np.linalg.det(u) < 0:
        raise ValueError('matrix is closer to a reflection than a rotation')
    return u


def is_rotation(R, tol=1e-12):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    return bool(
        np.allclose(R.T @ R, np.eye(3), rtol=0, atol=tol)
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def random_rotation(rng):
    """Uniformly distributed rotation drawn from a numpy Generator."""
    return Rotation.random(None, rng).as_matrix()


@dataclass(frozen=True)
class LstsqResult:
    """Outcome of an SVD least-squares solve.

    `condition` is σ_max / σ_min over all N singular values, infinite
    when the matrix loses rank under the truncation tolerance.
    """
    solution: np.ndarray
    condition: float
    rank: int
    singular_values: np.ndarray
    residual: float
    ill_conditioned: bool


class SvdSolver(object):
    """
    Factorizes an M×N matrix once and solves any number of right-hand
    sides in the minimum-norm least-squares sense.

    Singular values below max(M, N)·ε·σ_max (ε = 2⁻⁵²) are treated as
    zero.
    """

    def __init__(self, A, condition_limit=DEFAULT_CONDITION_LIMIT):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2:
            raise ValueError(f'expected a 2-D matrix, got shape {A.shape}')
        self.A = A
        self.condition_limit = condition_limit
        m, n = A.shape
        self.u, self.s, self.vt = linalg.svd(A, full_matrices=False)
        s_max = self.s[0] if self.s.size else 0.0
        tol = max(m, n) * SVD_EPS * s_max
        keep = self.s > tol
        self.rank = int(np.count_nonzero(keep))
        self.s_inv = np.zeros_like(self.s)
        self.s_inv[keep] = 1.0 / self.s[keep]
        if self.rank < n or s_max == 0.0:
            self.condition = float('inf')
        else:
            self.condition = float(s_max / self.s[n - 1])
        self.ill_conditioned = self.condition > condition_limit

    def solve(self, b):
        """Solve for a vector b (length M) or a matrix b (M×K)."""
        return self.vt.T @ (self.s_inv[:, None] * (self.u.T @ b)) \
            if np.ndim(b) == 2 \
            else self.vt.T @ (self.s_inv * (self.u.T @ b))

    def pseudo_inverse(self):
        return (self.vt.T * self.s_inv) @ self.u.T


def pseudo_inverse(A):
    return SvdSolver(A).pseudo_inverse()


def lstsq_svd(A, b, condition_limit=DEFAULT_CONDITION_LIMIT, warn=True):
    """
    Args:
        A:
            M×N matrix, M ≥ N
        b:
            right-hand side, length M (or M×K for several systems)
        condition_limit(float):
            condition number above which the result is flagged
        warn(bool):
            emit an IllConditionedWarning when flagged

    Returns:
        LstsqResult with the minimum-norm least-squares solution.
    """
    A = as_finite(A, 'A')
    b = as_finite(b, 'b')
    if A.ndim != 2 or A.shape[0] < A.shape[1]:
        raise ValueError(f'A must be M×N with M ≥ N, got {A.shape}')
    if b.shape[0] != A.shape[0]:
        raise ValueError(
            f'b has {b.shape[0]} rows but A has {A.shape[0]}'
        )
    solver = SvdSolver(A, condition_limit)
    x = solver.solve(b)
    residual = float(np.linalg.norm(A @ x - b))
    if solver.ill_conditioned and warn:
        warnings.warn(
            f'least-squares condition number {solver.condition:.3e} '
            f'exceeds {condition_limit:.1e}',
            IllConditionedWarning,
            stacklevel=2,
        )
    return LstsqResult(
        solution=x,
        condition=solver.condition,
        rank=solver.rank,
        singular_values=solver.s,
        residual=residual,
        ill_conditioned=solver.ill_conditioned,
    )


def kabsch_fit(A, B):
    """
    Proper rotation R minimizing Σ ‖R aₖ − bₖ‖², with aₖ, bₖ the rows of
    A and B (so that B ≈ A Rᵀ).

    Args:
        A:
            M×3 matrix of source vectors
        B:
            M×3 matrix of target vectors

    Returns:
        3×3 rotation matrix with det +1. Raises RankDeficient when the
        correlation AᵀB has fewer than two significant singular values.
    """
    A = as_finite(A, 'A')
    B = as_finite(B, 'B')
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3:
        raise ValueError(
            f'A and B must both be M×3, got {A.shape} and {B.shape}'
        )
    m = A.shape[0]
    if m < 3:
        raise ValueError(f'at least 3 rows are required, got {m}')

    u, s, vt = linalg.svd(A.T @ B)
    if s[0] == 0.0 or s[1] <= max(m, 3) * SVD_EPS * s[0]:
        raise RankDeficient(
            f'rotation not identifiable, singular values {s}'
        )
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    # X = U diag(1, 1, d) Vᵀ minimizes ‖A X − B‖; R is its transpose
    x = u @ np.diag([1.0, 1.0, d]) @ vt
    return x.T
