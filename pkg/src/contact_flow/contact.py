"""Contact-point generation, subsampling, and voxel-space search primitives."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .voxelcore import BinaryGrid, PointCloud, _freeze, index_to_point, surface_mask

PROVENANCE_SAMPLED = "sampled-from-ground-truth"
PROVENANCE_EXTERNAL = "external file"


@dataclass(frozen=True)
class ContactSet:
    """Sparse contact points in unit-cube coordinates."""

    points: np.ndarray
    provenance: str = PROVENANCE_SAMPLED

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"contact points must have shape (M, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise ValueError("contact set must be non-empty")
        if pts.min() < 0.0 or pts.max() > 1.0:
            raise ValueError("contact points must lie inside the unit cube")
        object.__setattr__(self, "points", _freeze(pts))

    def __len__(self) -> int:
        return self.points.shape[0]

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "ContactSet":
        return cls(
            points=np.asarray(d["points"], dtype=np.float64),
            provenance=d.get("provenance", PROVENANCE_EXTERNAL),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "ContactSet":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def hidden_surface_indices(gt: BinaryGrid, visibility: BinaryGrid) -> np.ndarray:
    """Surface voxels of `gt` lying in the hidden region (visibility False), sorted lexicographically."""
    if gt.resolution != visibility.resolution:
        raise ValueError("ground truth and visibility resolutions differ")
    hidden_surface = surface_mask(gt) & ~visibility.data
    return np.argwhere(hidden_surface)


def sample_contacts(gt: BinaryGrid, visibility: BinaryGrid, count: int, seed: int) -> ContactSet:
    """Uniformly sample `count` hidden-region surface voxel centers, without replacement."""
    if count < 1:
        raise ValueError("contact count must be positive")
    idx = hidden_surface_indices(gt, visibility)
    if idx.shape[0] == 0:
        raise ValueError("contacts cannot complement vision: hidden surface is empty")
    if count > idx.shape[0]:
        raise ValueError(
            f"contacts cannot complement vision: requested {count} contacts "
            f"but the hidden surface has only {idx.shape[0]} voxels"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen = rng.choice(idx.shape[0], size=count, replace=False)
    return ContactSet(index_to_point(idx[chosen], gt.resolution), provenance=PROVENANCE_SAMPLED)


def farthest_point_sample(points: PointCloud, k: int, seed: int) -> PointCloud:
    """Greedy farthest point sampling.

    The start point is chosen by the seed; each following pick maximizes the
    minimum distance to the already-selected set, ties broken by lowest index.
    """
    m = len(points)
    if k > m:
        raise ValueError(f"cannot select {k} points from a cloud of {m}")
    if k < 1:
        raise ValueError("k must be positive")
    pts = points.points
    rng = np.random.Generator(np.random.PCG64(seed))
    selected = [int(rng.integers(m))]
    min_d2 = np.sum((pts - pts[selected[0]]) ** 2, axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(min_d2))  # argmax returns the lowest index on ties
        selected.append(nxt)
        min_d2 = np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return PointCloud(pts[selected])


def nearest_occupied(ref: BinaryGrid, point) -> tuple[int, int, int]:
    """Index of the occupied voxel whose center is closest to `point`.

    Ties are broken by lexicographic index order for reproducibility.
    """
    if ref.is_empty():
        raise ValueError("reference grid has no occupied voxels")
    p = np.asarray(point, dtype=np.float64)
    idx = np.argwhere(ref.data)  # argwhere yields lexicographic order
    centers = index_to_point(idx, ref.resolution)
    d2 = np.sum((centers - p) ** 2, axis=1)
    best = int(np.argmin(d2))  # argmin returns the lowest index on ties
    return tuple(int(v) for v in idx[best])
