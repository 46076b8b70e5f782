"""Small SO(3) helpers: quaternions (w, x, y, z), axis-angle and projection."""
import numpy as np

from .errors import ValidationError


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_to_matrix(rotvec):
    """Rodrigues' formula, batched over leading axes."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1)[..., None, None]
    K = skew(rotvec)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a * K + b * (K @ K)


def matrix_to_axis_angle(R):
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    w = np.stack([R[..., 2, 1] - R[..., 1, 2],
                  R[..., 0, 2] - R[..., 2, 0],
                  R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    sin = np.sin(theta)
    small = sin < 1e-8
    scale = np.where(small, 0.5, theta / (2.0 * np.where(small, 1.0, sin)))
    out = w * scale[..., None]
    # near pi the antisymmetric part vanishes; recover the axis from R + I
    near_pi = (theta > np.pi - 1e-4)
    if np.any(near_pi):
        flat_R = R.reshape(-1, 3, 3)
        flat_out = out.reshape(-1, 3)
        flat_theta = np.broadcast_to(theta, R.shape[:-2]).reshape(-1)
        for i in np.flatnonzero(near_pi.reshape(-1)):
            B = (flat_R[i] + np.eye(3)) / 2.0
            col = int(np.argmax(np.diag(B)))
            axis = B[:, col] / np.sqrt(max(B[col, col], 1e-300))
            flat_out[i] = axis * flat_theta[i]
        out = flat_out.reshape(out.shape)
    return out


def rotation_angle(R_a, R_b):
    """Geodesic angle (radians) between two rotations."""
    M = np.swapaxes(R_a, -1, -2) @ R_b
    cos = np.clip((np.trace(M, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(cos)


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def project_to_so3(R):
    """Nearest proper rotation in the Frobenius sense (SVD polar factor)."""
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    U = U.copy()
    U[..., :, -1] *= d[..., None]
    return U @ Vt


def check_rotation(R, tol=1e-6, name="rotation"):
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise ValidationError(f"{name}: expected 3x3 matrices, got shape {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValidationError(f"{name}: non-finite entries")
    gram = np.swapaxes(R, -1, -2) @ R
    err = np.max(np.abs(gram - np.eye(3))) if R.size else 0.0
    if err > tol:
        raise ValidationError(f"{name}: not orthonormal (|R^T R - I| = {err:.3g})")
    det = np.linalg.det(R)
    if R.size and np.max(np.abs(det - 1.0)) > tol:
        raise ValidationError(f"{name}: determinant is not +1")
    return R


def quat_to_matrix(q):
    """Rotation matrices from (possibly unnormalized) wxyz quaternions."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix_vjp(q, grad_R):
    """Pull a gradient on the rotation matrix back to the raw quaternion.

    The result is tangent to the sphere at q since the matrix only depends
    on the normalized quaternion.
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    G = grad_R
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
              - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0]
              - 2 * x * G[..., 1, 1] - w * G[..., 1, 2] + z * G[..., 2, 0]
              + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    gy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2]
              + x * G[..., 1, 0] + z * G[..., 1, 2] - w * G[..., 2, 0]
              + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    gz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2]
              + w * G[..., 1, 0] - 2 * z * G[..., 1, 1] + y * G[..., 1, 2]
              + x * G[..., 2, 0] + y * G[..., 2, 1])
    gqn = np.stack([gw, gx, gy, gz], axis=-1)
    radial = np.sum(gqn * qn, axis=-1, keepdims=True)
    return (gqn - qn * radial) / norm


def matrix_to_quat(R):
    """wxyz unit quaternions with non-negative w (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    tr = np.trace(flat, axis1=1, axis2=2)
    diag = np.stack([tr, flat[:, 0, 0], flat[:, 1, 1], flat[:, 2, 2]], axis=1)
    choice = np.argmax(diag, axis=1)
    for c in range(4):
        idx = choice == c
        if not np.any(idx):
            continue
        m = flat[idx]
        if c == 0:
            s = 2.0 * np.sqrt(1.0 + tr[idx])
            q = np.stack([0.25 * s,
                          (m[:, 2, 1] - m[:, 1, 2]) / s,
                          (m[:, 0, 2] - m[:, 2, 0]) / s,
                          (m[:, 1, 0] - m[:, 0, 1]) / s], axis=1)
        elif c == 1:
            s = 2.0 * np.sqrt(1.0 + m[:, 0, 0] - m[:, 1, 1] - m[:, 2, 2])
            q = np.stack([(m[:, 2, 1] - m[:, 1, 2]) / s,
                          0.25 * s,
                          (m[:, 0, 1] + m[:, 1, 0]) / s,
                          (m[:, 0, 2] + m[:, 2, 0]) / s], axis=1)
        elif c == 2:
            s = 2.0 * np.sqrt(1.0 + m[:, 1, 1] - m[:, 0, 0] - m[:, 2, 2])
            q = np.stack([(m[:, 0, 2] - m[:, 2, 0]) / s,
                          (m[:, 0, 1] + m[:, 1, 0]) / s,
                          0.25 * s,
                          (m[:, 1, 2] + m[:, 2, 1]) / s], axis=1)
        else:
            s = 2.0 * np.sqrt(1.0 + m[:, 2, 2] - m[:, 0, 0] - m[:, 1, 1])
            q = np.stack([(m[:, 1, 0] - m[:, 0, 1]) / s,
                          (m[:, 0, 2] + m[:, 2, 0]) / s,
                          (m[:, 1, 2] + m[:, 2, 1]) / s,
                          0.25 * s], axis=1)
        out[idx] = q
    out *= np.where(out[:, :1] < 0, -1.0, 1.0)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out.reshape(R.shape[:-2] + (4,))


def random_rotation(rng, size=None):
    q = rng.normal(size=(4,) if size is None else (size, 4))
    return quat_to_matrix(q)
