"""Small rotation helpers used on hot paths (IK, sensing).

Quaternions are stored scalar-last ``(x, y, z, w)``. Euler angles follow the
fixed-axis XYZ roll-pitch-yaw convention: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""

import math

import numpy as np


def rot_x(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rpy_to_matrix(rpy):
    roll, pitch, yaw = rpy
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def matrix_to_rpy(R):
    """Roll, pitch, yaw of a rotation matrix.

    At gimbal lock (``|pitch| = pi/2``) roll is set to zero and the whole
    rotation about z is reported as yaw.
    """
    sp = -R[2, 0]
    if sp >= 1.0 - 1e-12 or sp <= -1.0 + 1e-12:
        pitch = math.copysign(math.pi / 2, sp)
        yaw = math.atan2(-R[0, 1], R[1, 1])
        return np.array([0.0, pitch, yaw])
    pitch = math.asin(max(-1.0, min(1.0, sp)))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def matrix_to_quat(R):
    """Unit quaternion (x, y, z, w) with w >= 0."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    q /= math.sqrt(q @ q)
    if q[3] < 0.0:
        q = -q
    return q


def quat_to_matrix(q):
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_rotvec(R):
    """Axis-angle vector of R, robust near 0 and pi."""
    cos_a = (R[0, 0] + R[1, 1] + R[2, 2] - 1.0) * 0.5
    cos_a = max(-1.0, min(1.0, cos_a))
    angle = math.acos(cos_a)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-6:
        # sin(a)/a ~ 1 - a^2/6
        return 0.5 * v * (1.0 + angle * angle / 6.0)
    if angle < math.pi - 1e-6:
        return v * (angle / (2.0 * math.sin(angle)))
    # Near pi: read the axis from the symmetric part.
    B = (R + R.T) * 0.5 - np.eye(3) * cos_a
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / math.sqrt(max(B[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ v < 0.0:
        axis = -axis
    return axis * angle


def rotvec_to_matrix(v):
    angle = math.sqrt(v @ v)
    if angle < 1e-12:
        return np.eye(3) + skew(v)
    k = v / angle
    K = skew(k)
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def make_transform(R=None, p=None):
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if p is not None:
        T[:3, 3] = p
    return T


def invert_transform(T):
    Ti = np.eye(4)
    R = T[:3, :3]
    Ti[:3, :3] = R.T
    Ti[:3, 3] = -R.T @ T[:3, 3]
    return Ti


def is_rigid(T, tol=1e-9):
    R = T[:3, :3]
    return (np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
            and np.allclose(T[3], [0.0, 0.0, 0.0, 1.0], atol=tol))
