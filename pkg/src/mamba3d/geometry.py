"""Point-cloud geometry: sampling, grouping, Chamfer distance, shapes and file I/O."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

SHAPE_CLASSES = ("sphere", "cube", "torus")


class PointFileError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ValueError(f"point cloud must be (N>=1, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PatchSet:
    centers: np.ndarray  # (L, 3)
    groups: np.ndarray  # (L, K, 3), center-relative
    source_indices: np.ndarray  # (L, K)
    center_indices: np.ndarray  # (L,)


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def fps(cloud, L: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    pts = _points(cloud)
    n = len(pts)
    if not 1 <= L <= n:
        raise ValueError(f"fps needs 1 <= L <= N, got L={L}, N={n}")
    if not 0 <= start_index < n:
        raise IndexError(f"start_index {start_index} out of range for {n} points")
    chosen = np.empty(L, dtype=np.int64)
    chosen[0] = start_index
    mind = ((pts - pts[start_index]) ** 2).sum(axis=1)
    for i in range(1, L):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return chosen


def knn(cloud, queries: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K nearest cloud points per query, nearest first; ties by lowest index."""
    pts = _points(cloud)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if not 1 <= K <= len(pts):
        raise ValueError(f"knn needs 1 <= K <= N, got K={K}, N={len(pts)}")
    d = ((q[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    return np.argsort(d, axis=1, kind="stable")[:, :K]


def group_patches(cloud, L: int, K: int, start_index: int = 0) -> PatchSet:
    pts = _points(cloud)
    if K > len(pts):
        raise ValueError(f"knn needs K <= N, got K={K}, N={len(pts)}")
    cidx = fps(pts, L, start_index)
    centers = pts[cidx]
    nbr = knn(pts, centers, K)
    groups = pts[nbr] - centers[:, None, :]
    return PatchSet(centers=centers, groups=groups, source_indices=nbr, center_indices=cidx)


def group_batch(clouds, L: int, K: int, start_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stack :func:`group_patches` over clouds: groups (B, L, K, 3), centers (B, L, 3)."""
    sets = [group_patches(c, L, K, start_index) for c in clouds]
    return np.stack([s.groups for s in sets]), np.stack([s.centers for s in sets])


# ---------------------------------------------------------------- Chamfer


def _nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = ((a[..., :, None, :] - b[..., None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=-1)


def chamfer_batch(a, b) -> Tensor:
    """Per-pair Chamfer distance for batches a (M, P, 3) and b (M, Q, 3).

    Mean squared distance to the nearest neighbour, summed over both
    directions. Differentiable in both point sets.
    """
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=T.get_default_dtype()))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != 3 or b.shape[2] != 3:
        raise T.ShapeError(f"chamfer_batch expects (M,P,3) and (M,Q,3), got {a.shape}, {b.shape}")
    ab = T.batch_gather(b, _nearest(a.data, b.data))
    ba = T.batch_gather(a, _nearest(b.data, a.data))
    da = ((a - ab) ** 2).sum(axis=2).mean(axis=1)
    db = ((b - ba) ** 2).sum(axis=2).mean(axis=1)
    return da + db


def chamfer_distance(a, b) -> Tensor:
    """Chamfer distance between point sets a (P, 3) and b (Q, 3)."""
    for x in (a, b):
        shape = x.shape if isinstance(x, Tensor) else np.shape(x)
        if len(shape) != 2 or shape[0] < 1:
            raise ValueError(f"chamfer_distance needs non-empty (P, 3) sets, got {shape}")
    a3 = T.reshape(a, (1,) + a.shape) if isinstance(a, Tensor) else np.asarray(a)[None]
    b3 = T.reshape(b, (1,) + b.shape) if isinstance(b, Tensor) else np.asarray(b)[None]
    return T.reshape(chamfer_batch(a3, b3), ())


# ---------------------------------------------------------------- synthetic shapes


def _sample_surface(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-1.0, 1.0, (n, 2))
        pts = np.empty((n, 3))
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        for a in range(3):
            rows = axis == a
            others = [i for i in range(3) if i != a]
            pts[rows, a] = sign[rows]
            pts[np.ix_(rows, others)] = uv[rows]
        return pts
    if kind == "torus":
        major, minor = 1.0, 0.4
        out = np.empty((0, 3))
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            theta = rng.uniform(0, 2 * np.pi, m)
            phi = rng.uniform(0, 2 * np.pi, m)
            # area element (R + r cos phi) makes uniform-angle sampling non-uniform
            keep = rng.uniform(0, major + minor, m) < major + minor * np.cos(phi)
            theta, phi = theta[keep], phi[keep]
            ring = major + minor * np.cos(phi)
            block = np.stack([ring * np.cos(theta), ring * np.sin(theta), minor * np.sin(phi)], axis=1)
            out = np.concatenate([out, block])
        return out[:n]
    raise ValueError(f"unknown shape class {kind!r}; expected one of {SHAPE_CLASSES}")


def synth_shapes(kind, n_points: int, seed: int, noise_sigma: float = 0.0) -> PointCloud:
    """Uniform surface samples of a unit shape centred at the origin.

    Points are jittered by ``noise_sigma`` and scaled so the farthest point sits
    at radius 1 around the shape's centre. Coordinates are rounded to float32
    values, so center-relative patch offsets re-add to the originals exactly.
    """
    if isinstance(kind, (int, np.integer)):
        if not 0 <= kind < len(SHAPE_CLASSES):
            raise ValueError(f"unknown shape class id {kind}")
        kind = SHAPE_CLASSES[kind]
    if kind not in SHAPE_CLASSES:
        raise ValueError(f"unknown shape class {kind!r}; expected one of {SHAPE_CLASSES}")
    if n_points < 8:
        raise ValueError("synth_shapes needs n_points >= 8")
    rng = np.random.default_rng(seed)
    pts = _sample_surface(kind, n_points, rng)
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    pts = pts / np.linalg.norm(pts, axis=1).max()
    return PointCloud(pts.astype(np.float32).astype(np.float64), label=SHAPE_CLASSES.index(kind))


# ---------------------------------------------------------------- file I/O


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("xyz", "off"):
            raise ValueError(f"unknown point format {fmt!r}")
        return fmt
    ext = Path(path).suffix.lower().lstrip(".")
    return "off" if ext == "off" else "xyz"


def _parse_xyz(lines) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 3:
            raise PointFileError(f"line {lineno}: expected at least 3 values, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts[:3]])
        except ValueError:
            raise PointFileError(f"line {lineno}: non-numeric coordinate in {line.strip()!r}") from None
    if not rows:
        raise PointFileError("no points found")
    return np.array(rows)


def _parse_off(lines) -> np.ndarray:
    content = [(i, l.split()) for i, l in enumerate(lines, 1) if l.strip() and not l.lstrip().startswith("#")]
    if not content:
        raise PointFileError("line 1: empty file, expected OFF header")
    lineno, head = content[0]
    if not head[0].startswith("OFF"):
        raise PointFileError(f"line {lineno}: expected 'OFF' header, got {head[0]!r}")
    rest = head[0][3:]
    counts_tokens = ([rest] if rest else []) + head[1:]
    body = content[1:]
    if not counts_tokens:
        if not body:
            raise PointFileError(f"line {lineno}: missing vertex/face counts")
        lineno, counts_tokens = body[0]
        body = body[1:]
    try:
        nv = int(counts_tokens[0])
    except (ValueError, IndexError):
        raise PointFileError(f"line {lineno}: malformed counts {' '.join(counts_tokens)!r}") from None
    if nv < 1:
        raise PointFileError(f"line {lineno}: vertex count must be positive")
    if len(body) < nv:
        raise PointFileError(f"line {lineno}: header declares {nv} vertices, file has {len(body)} more lines")
    rows = []
    for lineno, parts in body[:nv]:
        if len(parts) < 3:
            raise PointFileError(f"line {lineno}: expected 3 vertex coordinates")
        try:
            rows.append([float(p) for p in parts[:3]])
        except ValueError:
            raise PointFileError(f"line {lineno}: non-numeric vertex coordinate") from None
    return np.array(rows)


def load_points(path, format: str | None = None, label: int | None = None) -> PointCloud:
    fmt = _infer_format(path, format)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    pts = _parse_off(lines) if fmt == "off" else _parse_xyz(lines)
    return PointCloud(pts, label=label)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_points(path, cloud, format: str | None = None) -> None:
    """Write with 6 significant digits; OFF files carry no faces."""
    pts = _points(cloud)
    body = "".join(f"{x:.6g} {y:.6g} {z:.6g}\n" for x, y, z in pts)
    if _infer_format(path, format) == "off":
        body = f"OFF\n{len(pts)} 0 0\n" + body
    atomic_write_text(path, body)
