"""Deterministic geometric shape codec.

Maps an oriented point cloud to a fixed-length latent token set and evaluates
a signed distance from it. Each token describes one farthest-point-sampled
anchor: position, neighborhood mean normal, neighborhood radius, and local
covariance eigenvalues, zero-padded to the configured feature width. The SDF
is a point-to-plane blend over the four nearest anchors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import EmptySurface, InvalidArgument
from .geometry import OrientedPointCloud, TriangleMesh, ensure_outward_orientation

_FEATURE_DIM = 10  # pos(3) + mean normal(3) + radius(1) + cov eigenvalues(3)


@dataclass(frozen=True)
class CodecConfig:
    m_tokens: int = 32
    feature_width: int = 16
    n_sample_points: int = 4096

    def __post_init__(self):
        if self.m_tokens < 4:
            raise InvalidArgument("m_tokens must be >= 4")
        if self.n_sample_points < self.m_tokens:
            raise InvalidArgument("n_sample_points must be >= m_tokens")
        if self.feature_width < _FEATURE_DIM:
            raise InvalidArgument(f"feature_width must be >= {_FEATURE_DIM}")


@dataclass(frozen=True)
class LatentShapeCode:
    tokens: np.ndarray  # (M, Dw) float

    def __post_init__(self):
        t = np.ascontiguousarray(np.asarray(self.tokens, dtype=np.float64))
        if t.ndim != 2:
            raise InvalidArgument("tokens must be a 2D (M, Dw) array")
        if not np.all(np.isfinite(t)):
            raise InvalidArgument("latent tokens must be finite")
        object.__setattr__(self, "tokens", t)

    @property
    def m(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def anchors(self) -> np.ndarray:
        return self.tokens[:, 0:3]

    @property
    def anchor_normals(self) -> np.ndarray:
        return self.tokens[:, 3:6]

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.tokens ** 2)))

    @classmethod
    def zero(cls, cfg: CodecConfig) -> "LatentShapeCode":
        return cls(np.zeros((cfg.m_tokens, cfg.feature_width)))


def farthest_point_sample(cloud: OrientedPointCloud, m: int, seed: int) -> np.ndarray:
    """Greedy max-min selection of m indices, starting from index seed % n."""
    n = len(cloud)
    if m > n:
        raise InvalidArgument(f"cannot sample {m} points from a cloud of {n}")
    return _fps_indices(cloud.points, m, int(seed) % n)


def _fps_indices(points: np.ndarray, m: int, start: int) -> np.ndarray:
    n = len(points)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    dist = np.full(n, np.inf)
    for i in range(1, m):
        diff = points - points[chosen[i - 1]]
        dist = np.minimum(dist, np.einsum("ij,ij->i", diff, diff))
        chosen[i] = int(np.argmax(dist))
    return chosen


def encode(cloud: OrientedPointCloud, cfg: CodecConfig) -> LatentShapeCode:
    """Featurize FPS anchors; a deterministic set function of the cloud.

    FPS starts at the lexicographically smallest point so the anchor set does
    not depend on point order, and tokens are sorted by anchor position.
    """
    if len(cloud) != cfg.n_sample_points:
        raise InvalidArgument(
            f"expected {cfg.n_sample_points} points, got {len(cloud)}")
    pts = cloud.points
    start = int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])
    idx = _fps_indices(pts, cfg.m_tokens, start)
    anchors = pts[idx]

    k = max(1, cfg.n_sample_points // cfg.m_tokens)
    tree = cKDTree(pts)
    dist, nbr = tree.query(anchors, k=k)
    dist = np.asarray(dist).reshape(cfg.m_tokens, -1)
    nbr = np.asarray(nbr).reshape(cfg.m_tokens, -1)

    tokens = np.zeros((cfg.m_tokens, cfg.feature_width))
    tokens[:, 0:3] = anchors
    for i in range(cfg.m_tokens):
        nb = nbr[i]
        mean_n = cloud.normals[nb].mean(axis=0)
        norm = np.linalg.norm(mean_n)
        tokens[i, 3:6] = mean_n / norm if norm > 1e-12 else 0.0
        tokens[i, 6] = dist[i].max()
        local = pts[nb] - pts[nb].mean(axis=0)
        cov = local.T @ local / max(len(nb), 1)
        tokens[i, 7:10] = np.sort(np.linalg.eigvalsh(cov))

    order = np.lexsort((tokens[:, 2], tokens[:, 1], tokens[:, 0]))
    return LatentShapeCode(tokens[order])


_N_BLEND = 4


def decode_sdf(code: LatentShapeCode, query) -> float | np.ndarray:
    """Point-to-plane signed distance blended over the 4 nearest anchors."""
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    anchors = code.anchors
    normals = code.anchor_normals
    lengths = np.linalg.norm(normals, axis=1)
    unit = normals / np.maximum(lengths, 1e-12)[:, None]

    k = min(_N_BLEND, code.m)
    tree = cKDTree(anchors)
    dist, idx = tree.query(q2, k=k)
    dist = dist.reshape(len(q2), k)
    idx = idx.reshape(len(q2), k)

    diff = q2[:, None, :] - anchors[idx]
    plane = np.einsum("qkj,qkj->qk", diff, unit[idx])
    w = 1.0 / (dist + 1e-12)
    sdf = np.einsum("qk,qk->q", w, plane) / w.sum(axis=1)
    exact = dist[:, 0] < 1e-9  # query at an anchor: its own plane term (zero) wins
    sdf[exact] = plane[exact, 0]
    return float(sdf[0]) if single else sdf


def extract_mesh(code: LatentShapeCode, resolution: int, bound: float = 1.1) -> TriangleMesh:
    """Zero iso-surface of decode_sdf on a resolution^3 grid over [-bound, bound]^3."""
    if resolution < 16:
        raise InvalidArgument("resolution must be >= 16")
    axis = np.linspace(-bound, bound, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    queries = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    field = decode_sdf(code, queries).reshape(resolution, resolution, resolution)
    if not (np.any(field < 0) and np.any(field > 0)):
        raise EmptySurface("latent decodes to no zero crossing")
    spacing = 2 * bound / (resolution - 1)
    try:
        verts, faces, _, _ = measure.marching_cubes(field, level=0.0,
                                                    spacing=(spacing,) * 3)
    except (ValueError, RuntimeError) as exc:
        raise EmptySurface(str(exc)) from exc
    if not len(faces):
        raise EmptySurface("iso-surface is empty")
    verts = verts - bound
    return ensure_outward_orientation(TriangleMesh(verts, faces.astype(np.int64)))


# ---------------------------------------------------------------------------
# LSC1 binary serialization (header: magic, M, Dw as u32, 4 reserved bytes)

_MAGIC = b"LSC1"


def write_lsc(code: LatentShapeCode, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", code.m, code.width))
        fh.write(b"\x00" * 4)
        fh.write(code.tokens.astype("<f4").tobytes())


def read_lsc(path) -> LatentShapeCode:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != _MAGIC:
            raise InvalidArgument(f"not an LSC1 file: {path}")
        m, dw = struct.unpack("<II", header[4:12])
        data = np.frombuffer(fh.read(m * dw * 4), dtype="<f4")
    if data.size != m * dw:
        raise InvalidArgument(f"truncated LSC1 file: {path}")
    return LatentShapeCode(data.astype(np.float64).reshape(m, dw))
