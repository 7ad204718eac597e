"""Rigid (SE(3)) and similarity (Sim(3)) transforms with exp/log maps.

Conventions
-----------
- Quaternions are stored ``(w, x, y, z)``, unit norm, and renormalized
  after every composition so long chains do not drift.  The sign is left
  free internally; serialization canonicalizes to ``w >= 0``.
- Poses are camera-to-world: ``pose.apply(p_cam)`` is a world point.
  World-to-camera conventions are converted at I/O boundaries only.
- Twists are plain arrays: SE(3) uses 6 components
  ``[wx, wy, wz, vx, vy, vz]`` (rotation in radians first, translation
  in meters second); Sim(3) appends the log scale as a 7th component.
- ``log`` uses the principal branch and raises ``ValueError`` for
  rotations at exactly pi radians.

The ``quat_*`` / ``sim3_*`` helpers operate on arrays with an arbitrary
leading batch shape.  They back both the scalar classes here and the
vectorized inner loops of the pose-graph optimizer.
"""

from __future__ import annotations

import numpy as np

# Series switch-over for the small-angle / small-log-scale branches of
# the exp/log coefficient functions.  Below this the closed forms lose
# digits to cancellation; the truncated series are accurate to ~1e-13.
_SMALL = 1e-3


# ---------------------------------------------------------------------------
# quaternion kernels (batch shape (..., 4))


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    """Hamilton product of (...,4) quaternion arrays."""
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q, v):
    """Rotate (...,3) vectors by (...,4) unit quaternions."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_from_rotvec(w):
    """exp: rotation vector (radians) -> unit quaternion."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    half = 0.5 * theta
    # sin(theta/2)/theta, stable at zero
    small = theta < 1e-6
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    q = np.empty(w.shape[:-1] + (4,))
    q[..., 0] = np.cos(half)
    q[..., 1:] = w * k[..., None]
    return q


def quat_to_rotvec(q):
    """log: unit quaternion -> rotation vector, principal branch.

    Raises ValueError("non-principal rotation") when the angle reaches pi.
    """
    q = np.asarray(q, dtype=float)
    # canonicalize to the w >= 0 hemisphere so the angle is <= pi
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., 0]
    n = np.linalg.norm(q[..., 1:], axis=-1)
    if np.any(w <= 1e-12):
        raise ValueError("non-principal rotation")
    theta = 2.0 * np.arctan2(n, w)
    small = n < 1e-6
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 2.0 / w * (1.0 - n**2 / (3.0 * w**2)), theta / np.where(small, 1.0, n))
    return q[..., 1:] * k[..., None]


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = (q[..., i] for i in range(4))
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_from_matrix(m):
    """Single 3x3 rotation matrix -> unit quaternion (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise ValueError("expected a single 3x3 matrix")
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    choices = [tr, m[0, 0], m[1, 1], m[2, 2]]
    case = int(np.argmax(choices))
    if case == 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif case == 1:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif case == 2:
        s = np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def _skew(v):
    v = np.asarray(v, dtype=float)
    m = np.zeros(v.shape[:-1] + (3, 3))
    m[..., 0, 1] = -v[..., 2]
    m[..., 0, 2] = v[..., 1]
    m[..., 1, 0] = v[..., 2]
    m[..., 1, 2] = -v[..., 0]
    m[..., 2, 0] = -v[..., 1]
    m[..., 2, 1] = v[..., 0]
    return m


# ---------------------------------------------------------------------------
# Sim(3) kernels.  A Sim(3) element is the triple (q, t, s): the point map
# p -> s * R(q) @ p + t.  SE(3) is the s == 1 special case and shares all
# kernels.


def sim3_compose(qa, ta, sa, qb, tb, sb):
    q = quat_normalize(quat_mul(qa, qb))
    t = np.asarray(sa)[..., None] * quat_rotate(qa, tb) + ta
    return q, t, np.asarray(sa) * np.asarray(sb)


def sim3_inverse(q, t, s):
    qi = quat_conj(q)
    si = 1.0 / np.asarray(s)
    ti = -si[..., None] * quat_rotate(qi, t)
    return qi, ti, si


def sim3_apply(q, t, s, p):
    return np.asarray(s)[..., None] * quat_rotate(q, p) + t


def _w_coefficients(theta, sigma):
    """Coefficients (C, A, B) of W = C*I + A*skew(w) + B*skew(w)^2.

    W is the integral of exp(u*sigma) * R(u*w) over u in [0, 1]; it maps
    the translation component of a Sim(3) twist to the group translation.
    theta = |w|.  Series branches avoid cancellation for small arguments.
    """
    theta = np.asarray(theta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    es = np.exp(sigma)
    small_sig = np.abs(sigma) < _SMALL
    small_th = theta < _SMALL
    sig_safe = np.where(small_sig, 1.0, sigma)
    th_safe = np.where(small_th, 1.0, theta)

    # moments of u^k * exp(u*sigma) over [0, 1]
    j1 = np.where(
        small_sig,
        0.5 + sigma / 3.0 + sigma**2 / 8.0 + sigma**3 / 30.0,
        (es * (sig_safe - 1.0) + 1.0) / sig_safe**2,
    )
    j2 = np.where(
        small_sig,
        1.0 / 3.0 + sigma / 4.0 + sigma**2 / 10.0 + sigma**3 / 36.0,
        (es * (sig_safe**2 - 2.0 * sig_safe + 2.0) - 2.0) / sig_safe**3,
    )
    j3 = np.where(
        small_sig,
        0.25 + sigma / 5.0 + sigma**2 / 12.0 + sigma**3 / 42.0,
        (es * (sig_safe**3 - 3.0 * sig_safe**2 + 6.0 * sig_safe - 6.0) + 6.0) / sig_safe**4,
    )
    j4 = np.where(
        small_sig,
        0.2 + sigma / 6.0 + sigma**2 / 14.0 + sigma**3 / 48.0,
        (
            es * (sig_safe**4 - 4.0 * sig_safe**3 + 12.0 * sig_safe**2 - 24.0 * sig_safe + 24.0)
            - 24.0
        )
        / sig_safe**5,
    )

    c = np.where(small_sig, 1.0 + sigma / 2.0 + sigma**2 / 6.0 + sigma**3 / 24.0, (es - 1.0) / sig_safe)

    sin_t, cos_t = np.sin(theta), np.cos(theta)
    denom = sig_safe**2 + th_safe**2

    # integrals of u^k * sin(u*theta) and u^k * cos(u*theta), k = 0..3
    s0 = (1.0 - cos_t) / th_safe
    s1 = (sin_t - theta * cos_t) / th_safe**2
    s2 = (2.0 * theta * sin_t + (2.0 - theta**2) * cos_t - 2.0) / th_safe**3
    s3 = (3.0 * (theta**2 - 2.0) * sin_t - theta * (theta**2 - 6.0) * cos_t) / th_safe**4
    c1 = (cos_t + theta * sin_t - 1.0) / th_safe**2
    c2 = ((theta**2 - 2.0) * sin_t + 2.0 * theta * cos_t) / th_safe**3
    c3 = ((3.0 * theta**2 - 6.0) * cos_t + theta * (theta**2 - 6.0) * sin_t + 6.0) / th_safe**4

    a_closed = (es * (sigma * sin_t - theta * cos_t) + theta) / (th_safe * denom)
    a_sigser = (s0 + sigma * s1 + sigma**2 / 2.0 * s2 + sigma**3 / 6.0 * s3) / th_safe
    a = np.where(small_th, j1 - theta**2 / 6.0 * j3, np.where(small_sig, a_sigser, a_closed))

    ic_closed = (es * (sigma * cos_t + theta * sin_t) - sigma) / denom
    ic_sigser = sin_t / th_safe + sigma * c1 + sigma**2 / 2.0 * c2 + sigma**3 / 6.0 * c3
    ic = np.where(small_sig, ic_sigser, ic_closed)
    b = np.where(small_th, j2 / 2.0 - theta**2 / 24.0 * j4, (c - ic) / th_safe**2)

    return c, a, b


def _w_matrix(rotvec, sigma):
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1)
    c, a, b = _w_coefficients(theta, sigma)
    k = _skew(rotvec)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return c[..., None, None] * eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def sim3_exp(xi):
    """Sim(3) exponential: (...,7) twist -> (q, t, s)."""
    xi = np.asarray(xi, dtype=float)
    rot, v, sigma = xi[..., :3], xi[..., 3:6], xi[..., 6]
    q = quat_from_rotvec(rot)
    w = _w_matrix(rot, sigma)
    t = np.einsum("...ij,...j->...i", w, v)
    return q, t, np.exp(sigma)


def sim3_log(q, t, s):
    """Sim(3) logarithm: (q, t, s) -> (...,7) twist (principal branch)."""
    rot = quat_to_rotvec(q)
    sigma = np.log(np.asarray(s, dtype=float))
    w = _w_matrix(rot, sigma)
    v = np.linalg.solve(w, np.asarray(t, dtype=float)[..., None])[..., 0]
    return np.concatenate([rot, v, sigma[..., None]], axis=-1)


def se3_exp(xi):
    """SE(3) exponential: (...,6) twist -> (q, t)."""
    xi = np.asarray(xi, dtype=float)
    pad = np.zeros(xi.shape[:-1] + (1,))
    q, t, _ = sim3_exp(np.concatenate([xi, pad], axis=-1))
    return q, t


def se3_log(q, t):
    ones = np.ones(np.asarray(q).shape[:-1])
    return sim3_log(q, t, ones)[..., :6]


def sim3_adjoint(q, t, s):
    """Adjoint matrices (...,7,7) in twist order [rotation, translation, scale]."""
    q = np.asarray(q, dtype=float)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    r = quat_to_matrix(q)
    ad = np.zeros(q.shape[:-1] + (7, 7))
    ad[..., :3, :3] = r
    ad[..., 3:6, :3] = _skew(t) @ r
    ad[..., 3:6, 3:6] = s[..., None, None] * r
    ad[..., 3:6, 6] = -t
    ad[..., 6, 6] = 1.0
    return ad


# ---------------------------------------------------------------------------
# scalar classes


class Rotation:
    """A 3-D rotation stored as a unit quaternion (w, x, y, z)."""

    __slots__ = ("_q",)

    def __init__(self, wxyz, *, atol: float = 1e-6):
        q = np.asarray(wxyz, dtype=float).reshape(4)
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > atol:
            raise ValueError(f"quaternion norm {norm:.6g} is not 1 within {atol:g}")
        self._q = q / norm

    @classmethod
    def identity(cls) -> "Rotation":
        return cls([1.0, 0.0, 0.0, 0.0])

    @classmethod
    def exp(cls, rotvec) -> "Rotation":
        return cls(quat_from_rotvec(np.asarray(rotvec, dtype=float).reshape(3)))

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        return cls(quat_from_matrix(m))

    @property
    def wxyz(self) -> np.ndarray:
        return self._q.copy()

    def canonical_wxyz(self) -> np.ndarray:
        """Quaternion with w >= 0, the serialization form."""
        return -self._q if self._q[0] < 0.0 else self._q.copy()

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self._q)

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_normalize(quat_mul(self._q, other._q)))

    def inverse(self) -> "Rotation":
        return Rotation(quat_conj(self._q))

    def apply(self, points):
        return quat_rotate(self._q, np.asarray(points, dtype=float))

    def log(self) -> np.ndarray:
        return quat_to_rotvec(self._q)

    @property
    def angle(self) -> float:
        w = abs(self._q[0])
        n = float(np.linalg.norm(self._q[1:]))
        return 2.0 * float(np.arctan2(n, w))

    def angle_to(self, other: "Rotation") -> float:
        return self.inverse().compose(other).angle

    def __repr__(self) -> str:
        return f"Rotation(wxyz={np.array2string(self._q, precision=6)})"


class Pose:
    """Camera-to-world rigid transform (rotation + translation)."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation, translation):
        self.rotation = rotation
        self.translation = np.asarray(translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def exp(cls, twist) -> "Pose":
        q, t = se3_exp(np.asarray(twist, dtype=float).reshape(6))
        return cls(Rotation(q), t)

    def log(self) -> np.ndarray:
        return se3_log(self.rotation.wxyz, self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation.compose(other.rotation),
            self.rotation.apply(other.translation) + self.translation,
        )

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def apply(self, points):
        return self.rotation.apply(points) + self.translation

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    def __repr__(self) -> str:
        return f"Pose(t={np.array2string(self.translation, precision=4)})"


class Sim3Transform:
    """Similarity transform: p -> scale * R p + t."""

    __slots__ = ("scale", "rotation", "translation")

    def __init__(self, scale: float, rotation: Rotation, translation):
        scale = float(scale)
        if scale <= 0.0:
            raise ValueError(f"scale must be positive, got {scale:g}")
        self.scale = scale
        self.rotation = rotation
        self.translation = np.asarray(translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls(1.0, Rotation.identity(), np.zeros(3))

    @classmethod
    def from_pose(cls, pose: Pose, scale: float = 1.0) -> "Sim3Transform":
        return cls(scale, pose.rotation, pose.translation)

    @classmethod
    def exp(cls, twist) -> "Sim3Transform":
        q, t, s = sim3_exp(np.asarray(twist, dtype=float).reshape(7))
        return cls(float(s), Rotation(q), t)

    def log(self) -> np.ndarray:
        return sim3_log(self.rotation.wxyz, self.translation, self.scale)

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        q, t, s = sim3_compose(
            self.rotation.wxyz,
            self.translation,
            self.scale,
            other.rotation.wxyz,
            other.translation,
            other.scale,
        )
        return Sim3Transform(float(s), Rotation(q), t)

    def inverse(self) -> "Sim3Transform":
        q, t, s = sim3_inverse(self.rotation.wxyz, self.translation, self.scale)
        return Sim3Transform(float(s), Rotation(q), t)

    def apply(self, points):
        return self.scale * self.rotation.apply(points) + self.translation

    def transform_pose(self, pose: Pose) -> Pose:
        """Carry a camera pose: position through the point map, orientation
        rotated without scale."""
        return Pose(self.rotation.compose(pose.rotation), self.apply(pose.translation))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    def __repr__(self) -> str:
        return (
            f"Sim3Transform(s={self.scale:.6g}, "
            f"t={np.array2string(self.translation, precision=4)})"
        )
