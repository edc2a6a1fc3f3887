"""Ellipse geometry for occupancy sets.

Axis lengths are FULL lengths: an ellipse with ``major_len = l`` has
semi-major axis ``l / 2`` and area ``pi / 4 * l * w``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import InvalidCovarianceError, ShapeError

TO_WORLD = "to_world"
TO_AGENT = "to_agent"


class Point2(NamedTuple):
    x: float
    y: float


def wrap_angle(a):
    """Map an angle to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    return math.pi if a == -math.pi else a


def canonical_theta(theta):
    t = math.fmod(theta, math.pi)
    if t < 0.0:
        t += math.pi
    return 0.0 if t >= math.pi else t


@dataclass(frozen=True)
class Pose:
    position: Point2
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "position", Point2(*map(float, self.position)))
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))


@dataclass(frozen=True)
class EllipseSet:
    """One occupancy ellipse in canonical form (major >= minor, theta in [0, pi))."""

    center: Point2
    major_len: float
    minor_len: float
    theta: float = 0.0

    def __post_init__(self):
        major, minor, theta = float(self.major_len), float(self.minor_len), float(self.theta)
        if not (major > 0.0 and minor > 0.0) or not (math.isfinite(major) and math.isfinite(minor)):
            raise ValueError(f"axis lengths must be positive and finite, got {major}, {minor}")
        if major < minor:
            major, minor = minor, major
            theta += 0.5 * math.pi
        object.__setattr__(self, "center", Point2(*map(float, self.center)))
        object.__setattr__(self, "major_len", major)
        object.__setattr__(self, "minor_len", minor)
        object.__setattr__(self, "theta", canonical_theta(theta))

    @property
    def semi_axes(self):
        return 0.5 * self.major_len, 0.5 * self.minor_len


def _local(e: EllipseSet, p):
    c, s = math.cos(e.theta), math.sin(e.theta)
    dx, dy = p[0] - e.center[0], p[1] - e.center[1]
    return c * dx + s * dy, -s * dx + c * dy


def mahalanobis(e: EllipseSet, p) -> float:
    u, v = _local(e, p)
    a, b = e.semi_axes
    return math.sqrt((u / a) ** 2 + (v / b) ** 2)


def contains(e: EllipseSet, p) -> bool:
    return mahalanobis(e, p) <= 1.0


def area(e: EllipseSet) -> float:
    return 0.25 * math.pi * e.major_len * e.minor_len


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_covariance(e: EllipseSet) -> np.ndarray:
    a, b = e.semi_axes
    r = rotation(e.theta)
    return r @ np.diag([a * a, b * b]) @ r.T


def from_gaussian_contour(mean, cov, z: float) -> EllipseSet:
    """The z-sigma contour of a bivariate Gaussian as an ellipse."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (2, 2):
        raise ShapeError(f"covariance must be 2x2, got {cov.shape}")
    if not np.all(np.isfinite(cov)) or abs(cov[0, 1] - cov[1, 0]) > 1e-12 * max(1.0, abs(cov).max()):
        raise InvalidCovarianceError("covariance must be finite and symmetric")
    if z <= 0:
        raise ValueError("z must be positive")
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] <= 0.0:
        raise InvalidCovarianceError(f"covariance is not positive definite (eigenvalues {vals})")
    major = 2.0 * z * math.sqrt(vals[1])
    minor = 2.0 * z * math.sqrt(vals[0])
    theta = math.atan2(vecs[1, 1], vecs[0, 1])
    return EllipseSet(Point2(*map(float, mean)), major, minor, theta)


def transform(e: EllipseSet, pose: Pose, direction: str = TO_WORLD) -> EllipseSet:
    """Rigidly move an ellipse between the agent frame and the world frame."""
    h = pose.heading
    px, py = pose.position
    if direction == TO_WORLD:
        c, s = math.cos(h), math.sin(h)
        x, y = e.center
        center = Point2(c * x - s * y + px, s * x + c * y + py)
        theta = e.theta + h
    elif direction == TO_AGENT:
        c, s = math.cos(-h), math.sin(-h)
        x, y = e.center[0] - px, e.center[1] - py
        center = Point2(c * x - s * y, s * x + c * y)
        theta = e.theta - h
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return EllipseSet(center, e.major_len, e.minor_len, theta)


def euclidean_distance(e: EllipseSet, p) -> float:
    """Distance from ``p`` to the closed ellipse region (0 when inside)."""
    if contains(e, p):
        return 0.0
    d = kernels.ellipse_distance(
        e.center[0], e.center[1], e.major_len, e.minor_len, e.theta, p[0], p[1]
    )
    return float(d)


def boundary_point(e: EllipseSet, phi: float) -> Point2:
    a, b = e.semi_axes
    c, s = math.cos(e.theta), math.sin(e.theta)
    u, v = a * math.cos(phi), b * math.sin(phi)
    return Point2(e.center[0] + c * u - s * v, e.center[1] + s * u + c * v)


@dataclass
class EllipseBatch:
    """Array-of-ellipses view for vectorised metrics and planning.

    ``center`` has shape ``(..., 2)``; ``length``, ``width`` and ``theta``
    have the leading shape. Axes are full lengths and need not be ordered.
    """

    center: np.ndarray
    length: np.ndarray
    width: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        shape = self.center.shape[:-1]
        self.length = np.broadcast_to(np.asarray(self.length, dtype=np.float64), shape)
        self.width = np.broadcast_to(np.asarray(self.width, dtype=np.float64), shape)
        self.theta = np.broadcast_to(np.asarray(self.theta, dtype=np.float64), shape)

    @property
    def shape(self):
        return self.center.shape[:-1]

    def area(self):
        return 0.25 * np.pi * self.length * self.width

    def mahalanobis(self, points):
        points = np.asarray(points, dtype=np.float64)
        return kernels.mahalanobis(
            self.center[..., 0], self.center[..., 1], self.length, self.width, self.theta,
            points[..., 0], points[..., 1],
        )

    def contains(self, points):
        return self.mahalanobis(points) <= 1.0

    def distance(self, points):
        points = np.asarray(points, dtype=np.float64)
        return kernels.ellipse_distance(
            self.center[..., 0], self.center[..., 1], self.length, self.width, self.theta,
            points[..., 0], points[..., 1],
        )

    def scaled(self, z):
        return EllipseBatch(self.center, self.length * z, self.width * z, self.theta)

    def to_world(self, origin, rotation_angle):
        """Map agent-frame ellipses to the world frame.

        ``origin`` has shape ``lead + (2,)`` and ``rotation_angle`` shape
        ``lead`` where ``lead`` is a prefix of ``self.shape``.
        """
        origin = np.asarray(origin, dtype=np.float64)
        rot = np.asarray(rotation_angle, dtype=np.float64)
        extra = len(self.shape) - rot.ndim
        rot = rot.reshape(rot.shape + (1,) * extra)
        ox = origin[..., 0].reshape(rot.shape)
        oy = origin[..., 1].reshape(rot.shape)
        c, s = np.cos(rot), np.sin(rot)
        x, y = self.center[..., 0], self.center[..., 1]
        center = np.stack([c * x - s * y + ox, s * x + c * y + oy], axis=-1)
        return EllipseBatch(center, self.length, self.width, self.theta + rot)

    def __getitem__(self, idx) -> EllipseSet:
        return EllipseSet(
            Point2(*self.center[idx]), float(self.length[idx]), float(self.width[idx]),
            float(self.theta[idx]),
        )


def gaussian_contour_batch(mean, cov, z):
    """Vectorised ``from_gaussian_contour`` over leading dims; cov shape (..., 2, 2)."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(0.25 * (a - c) ** 2 + b * b)
    lam1 = half_tr + disc
    lam2 = half_tr - disc
    if np.any(lam2 <= 0.0):
        raise InvalidCovarianceError("covariance is not positive definite")
    theta = 0.5 * np.arctan2(2.0 * b, a - c)
    return EllipseBatch(mean, 2.0 * z * np.sqrt(lam1), 2.0 * z * np.sqrt(lam2), np.mod(theta, np.pi))
