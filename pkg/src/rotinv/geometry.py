"""Point clouds, rotations, centroid projection and a brute-force hull oracle."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-12
HULL_MAX_POINTS = 200


class PointCloudError(ValueError):
    """Raised for unreadable or invalid point-cloud input."""


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise PointCloudError(f"expected an (N, 3) array, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise PointCloudError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise PointCloudError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.n

    def subset(self, indices) -> "PointCloud":
        return PointCloud(self.points[np.asarray(indices, dtype=int)])


@dataclass(frozen=True)
class Centroid:
    index: int
    coords: np.ndarray


def load_point_cloud(path) -> PointCloud:
    """Read a whitespace-separated ``x y z`` text file.

    Lines starting with ``#`` and blank lines are skipped. Errors name the
    offending (1-based) line number.
    """
    path = Path(path)
    if not path.is_file():
        raise PointCloudError(f"no such point-cloud file: {path}")
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 3:
                raise PointCloudError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                xyz = [float(p) for p in parts]
            except ValueError:
                raise PointCloudError(f"{path}:{lineno}: malformed number in {text!r}") from None
            if not all(np.isfinite(xyz)):
                raise PointCloudError(f"{path}:{lineno}: non-finite value")
            rows.append(xyz)
    if not rows:
        raise PointCloudError(f"{path}: no data lines")
    return PointCloud(np.array(rows))


def save_point_cloud(cloud: PointCloud, path, header: str | None = None) -> None:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    lines.extend(f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in cloud.points)
    Path(path).write_text("\n".join(lines) + "\n")


def compute_centroid(cloud: PointCloud) -> Centroid:
    """Member of the cloud nearest to its arithmetic mean (lowest index on ties)."""
    mean = cloud.points.mean(axis=0)
    d2 = np.sum((cloud.points - mean) ** 2, axis=1)
    idx = int(np.argmin(d2))  # argmin returns the first minimum
    return Centroid(idx, cloud.points[idx].copy())


def check_rotation(matrix) -> np.ndarray:
    R = np.asarray(matrix, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise ValueError("matrix is not a proper rotation")
    return R


def rotate_cloud(cloud: PointCloud, R) -> PointCloud:
    R = check_rotation(R)
    return PointCloud(cloud.points @ R.T)


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(seed) -> np.ndarray:
    """Haar-uniform rotation from a normalized 4D Gaussian quaternion."""
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-8:
        q = rng.standard_normal(4)
    return quaternion_to_matrix(q)


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def bounding_radius(points: np.ndarray, center: np.ndarray | None = None) -> float:
    center = points.mean(axis=0) if center is None else center
    return float(np.sqrt(np.max(np.sum((points - center) ** 2, axis=1))))


# -- convex hull oracle -------------------------------------------------------


def _in_tetrahedra(p, a, b, c, d, tol):
    # barycentric coordinates by Cramer's rule; singular tetrahedra are skipped
    # here and covered by the triangle/segment passes.
    e1, e2, e3, q = b - a, c - a, d - a, p - a
    det = np.einsum("ij,ij->i", e1, np.cross(e2, e3))
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1) * np.linalg.norm(e3, axis=1)
    ok = np.abs(det) > 1e-10 * np.maximum(scale, 1e-300)
    det = np.where(ok, det, 1.0)
    l1 = np.einsum("ij,ij->i", q, np.cross(e2, e3)) / det
    l2 = np.einsum("ij,ij->i", e1, np.cross(q, e3)) / det
    l3 = np.einsum("ij,ij->i", e1, np.cross(e2, q)) / det
    l0 = 1.0 - l1 - l2 - l3
    inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol) & (l3 >= -tol)
    return bool(np.any(ok & inside))


def _in_triangles(p, a, b, c, tol, dist_tol):
    e1, e2, q = b - a, c - a, p - a
    n = np.cross(e1, e2)
    nn = np.einsum("ij,ij->i", n, n)
    ok = nn > 1e-20 * np.maximum(np.einsum("ij,ij->i", e1, e1) * np.einsum("ij,ij->i", e2, e2), 1e-300)
    nn = np.where(ok, nn, 1.0)
    off_plane = np.abs(np.einsum("ij,ij->i", q, n)) / np.sqrt(nn)
    l1 = np.einsum("ij,ij->i", np.cross(q, e2), n) / nn
    l2 = np.einsum("ij,ij->i", np.cross(e1, q), n) / nn
    l0 = 1.0 - l1 - l2
    inside = (off_plane <= dist_tol) & (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
    return bool(np.any(ok & inside))


def _in_segments(p, a, b, tol, dist_tol):
    e = b - a
    ee = np.einsum("ij,ij->i", e, e)
    ok = ee > 0
    t = np.einsum("ij,ij->i", p - a, e) / np.where(ok, ee, 1.0)
    resid = np.linalg.norm(a + t[:, None] * e - p, axis=1)
    inside = (resid <= dist_tol) & (t >= -tol) & (t <= 1 + tol)
    return bool(np.any(ok & inside))


def _index_combinations(n, r, chunk=200_000):
    it = itertools.combinations(range(n), r)
    while True:
        block = np.fromiter(itertools.chain.from_iterable(itertools.islice(it, chunk)), dtype=np.int64)
        if block.size == 0:
            return
        yield block.reshape(-1, r)


def convex_hull_vertices(cloud: PointCloud, tol: float = 1e-9, candidates=None) -> set[int]:
    """Indices of points that are not convex combinations of the other points.

    Exhaustive test oracle: by Caratheodory's theorem a point lies in the hull
    of the others iff it lies in a simplex spanned by at most 4 of them, so
    every such subset is examined. O(N^5) overall; limited to N <= 200.
    ``candidates`` restricts which indices are tested (the others still span
    the hull).
    """
    pts = cloud.points
    n = len(pts)
    if n > HULL_MAX_POINTS:
        raise ValueError(f"hull oracle limited to {HULL_MAX_POINTS} points, got {n}")
    scale = float(np.max(np.abs(pts - pts[0]))) if n > 1 else 0.0
    if n > 1 and scale == 0.0:
        raise ValueError("degenerate cloud: all points coincide")
    dist_tol = tol * max(scale, 1.0)

    vertices = set()
    for i in range(n) if candidates is None else sorted(set(int(c) for c in candidates)):
        p = pts[i]
        others = np.delete(pts, i, axis=0)
        m = len(others)
        if np.any(np.all(np.abs(others - p) <= dist_tol, axis=1)):
            continue  # duplicate of another point
        inside = False
        # tetrahedra first: interior points almost always exit here
        if m >= 4:
            for idx in _index_combinations(m, 4):
                if _in_tetrahedra(p, *(others[idx[:, j]] for j in range(4)), tol):
                    inside = True
                    break
        if not inside and m >= 3:
            for idx in _index_combinations(m, 3):
                if _in_triangles(p, *(others[idx[:, j]] for j in range(3)), tol, dist_tol):
                    inside = True
                    break
        if not inside and m >= 2:
            for idx in _index_combinations(m, 2):
                if _in_segments(p, others[idx[:, 0]], others[idx[:, 1]], tol, dist_tol):
                    inside = True
                    break
        if not inside:
            vertices.add(i)
    return vertices
