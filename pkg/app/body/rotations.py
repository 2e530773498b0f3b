"""Axis-angle rotations.

Rodrigues' formula R = I + a(t)·K + b(t)·K² with K = skew(r), t = |r|,
a = sin t / t and b = (1 - cos t) / t². Below SMALL_ANGLE every coefficient
switches to its Taylor series so the zero rotation and its neighbourhood stay
exact. All functions broadcast over leading axes.
"""
import numpy as np

SMALL_ANGLE = 1e-4


def skew(vectors: np.ndarray) -> np.ndarray:
    """(..., 3) -> (..., 3, 3) cross-product matrices"""
    vectors = np.asarray(vectors, dtype=np.float64)
    x, y, z = vectors[..., 0], vectors[..., 1], vectors[..., 2]
    zero = np.zeros_like(x)
    return np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=-2)


# GENERATORS[k] = skew(e_k)
GENERATORS = skew(np.eye(3))


def _coefficients(theta: np.ndarray):
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    sin_t = np.sin(t)
    cos_t = np.cos(t)
    # 1 - cos t, written to keep its relative precision near zero
    one_minus_cos = 2.0 * np.sin(0.5 * t) ** 2

    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, sin_t / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, one_minus_cos / t ** 2)
    # (da/dt) / t and (db/dt) / t
    a_rate = np.where(small, -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
                      (t * cos_t - sin_t) / t ** 3)
    b_rate = np.where(small, -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
                      (t * sin_t - 2.0 * one_minus_cos) / t ** 4)
    return a, b, a_rate, b_rate


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)"""
    r = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)
    a, b, _, _ = _coefficients(theta)
    K = skew(r)
    identity = np.broadcast_to(np.eye(3), K.shape)
    return identity + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rodrigues_jacobian(axis_angle: np.ndarray) -> np.ndarray:
    """Derivative of R w.r.t. r as (..., 3, 3, 3), indexed [..., i, j, k] = dR_ij / dr_k"""
    r = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)
    a, b, a_rate, b_rate = _coefficients(theta)
    K = skew(r)
    K2 = K @ K
    E = GENERATORS.transpose(1, 2, 0)  # [i, j, k]

    jac = (a_rate[..., None] * r)[..., None, None, :] * K[..., None]
    jac = jac + a[..., None, None, None] * E
    jac = jac + (b_rate[..., None] * r)[..., None, None, :] * K2[..., None]
    EK = np.einsum('kia,...aj->...ijk', GENERATORS, K)
    KE = np.einsum('...ia,kaj->...ijk', K, GENERATORS)
    jac = jac + b[..., None, None, None] * (EK + KE)
    return jac


def canonicalize_axis_angle(axis_angle: np.ndarray) -> np.ndarray:
    """Wrap rotation magnitudes into [0, pi]; vectors already there are returned untouched"""
    r = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    safe = np.where(theta > 0.0, theta, 1.0)
    return np.where(theta > np.pi, r * (wrapped / safe), r)


def rotation_errors(rotations: np.ndarray):
    """Worst orthogonality and determinant deviation over a stack of matrices"""
    R = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    if R.shape[0] == 0:
        return 0.0, 0.0
    gram = R @ np.swapaxes(R, -1, -2)
    ortho = float(np.max(np.abs(gram - np.eye(3))))
    det = float(np.max(np.abs(np.linalg.det(R) - 1.0)))
    return ortho, det
