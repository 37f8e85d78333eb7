"""Skeleton clouds and their temporal, spatial and person colorizations."""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .skeleton_data import SkeletonSequence


class IndexOutOfRange(ValueError):
    pass


class ColorScheme(str, enum.Enum):
    TEMPORAL = "temporal"
    SPATIAL = "spatial"
    PERSON = "person"

    @classmethod
    def parse(cls, value: "str | ColorScheme") -> "ColorScheme":
        if isinstance(value, cls):
            return value
        aliases = {"ts": "temporal", "ss": "spatial", "ps": "person"}
        value = str(value).lower()
        return cls(aliases.get(value, value))


@dataclass(frozen=True, eq=False)
class SkeletonCloud:
    """Raw skeleton cloud.

    ``provenance[i] = (t, j, n)`` with 1-based frame, joint and person slot.
    """

    positions: np.ndarray  # (N, 3)
    provenance: np.ndarray  # (N, 3) int
    n_frames: int
    n_joints: int
    n_persons: int

    def __len__(self):
        return self.positions.shape[0]

    def as_points6(self) -> np.ndarray:
        """Positions padded with a (0, 0, 0) color fill, for encoder input."""
        return np.concatenate([self.positions, np.zeros_like(self.positions)], axis=1)


@dataclass(frozen=True, eq=False)
class ColorizedCloud:
    positions: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3)
    provenance: np.ndarray
    scheme: ColorScheme
    colored: np.ndarray  # (N,) bool
    n_frames: int
    n_joints: int

    def __len__(self):
        return self.positions.shape[0]

    @property
    def points(self) -> np.ndarray:
        return np.concatenate([self.positions, self.colors], axis=1)


def build_cloud(seq: SkeletonSequence) -> SkeletonCloud:
    """Stack every joint of every frame into one point set, ordered t, then n, then j."""
    T, M, J, _ = seq.joints.shape
    positions = seq.joints.reshape(T * M * J, 3).copy()
    t, n, j = np.meshgrid(np.arange(1, T + 1), np.array(seq.person_ids), np.arange(1, J + 1), indexing="ij")
    provenance = np.stack([t.ravel(), j.ravel(), n.ravel()], axis=1).astype(np.int64)
    return SkeletonCloud(positions, provenance, T, J, M)


def _ramp(idx, total: int) -> np.ndarray:
    """Red -> green -> blue ramp over ``idx`` in [1, total], vectorized.

    The branch test ``idx <= total / 2`` is done as ``2 * idx <= total`` so
    it is exact for integer indices.
    """
    idx = np.asarray(idx)
    if np.any(idx < 1) or np.any(idx > total):
        raise IndexOutOfRange(f"index outside [1, {total}]")
    x = idx / total
    first = 2 * idx <= total
    r = np.where(first, -2.0 * x + 1.0, 0.0)
    g = np.where(first, 2.0 * x, -2.0 * x + 2.0)
    b = np.where(first, 0.0, 2.0 * x - 1.0)
    return np.stack([r, g, b], axis=-1)


def temporal_color(t: int, T: int) -> tuple[float, float, float]:
    r, g, b = _ramp(t, T)
    return float(r), float(g), float(b)


def spatial_color(j: int, J: int) -> tuple[float, float, float]:
    r, g, b = _ramp(j, J)
    return float(r), float(g), float(b)


_PERSON_COLORS = {1: (1.0, 0.0, 0.0), 2: (0.0, 0.0, 1.0)}


def person_color(n: int) -> tuple[float, float, float]:
    try:
        return _PERSON_COLORS[int(n)]
    except KeyError:
        raise IndexOutOfRange(f"person index must be 1 or 2, got {n}") from None


def scheme_colors(provenance: np.ndarray, scheme: ColorScheme, T: int, J: int) -> np.ndarray:
    scheme = ColorScheme.parse(scheme)
    if scheme is ColorScheme.TEMPORAL:
        return _ramp(provenance[:, 0], T)
    if scheme is ColorScheme.SPATIAL:
        return _ramp(provenance[:, 1], J)
    persons = provenance[:, 2]
    if np.any((persons != 1) & (persons != 2)):
        raise IndexOutOfRange("person index must be 1 or 2")
    return np.where((persons == 1)[:, None], np.array(_PERSON_COLORS[1]), np.array(_PERSON_COLORS[2]))


def colorize_cloud(cloud: SkeletonCloud, scheme: ColorScheme | str) -> ColorizedCloud:
    scheme = ColorScheme.parse(scheme)
    colors = scheme_colors(cloud.provenance, scheme, cloud.n_frames, cloud.n_joints)
    return ColorizedCloud(
        positions=cloud.positions,
        colors=colors,
        provenance=cloud.provenance,
        scheme=scheme,
        colored=np.ones(len(cloud), dtype=bool),
        n_frames=cloud.n_frames,
        n_joints=cloud.n_joints,
    )


def mask_indices(total: int, ratio: float) -> np.ndarray:
    """1-based indices in [1, total] that keep their color at ``ratio``.

    ``ceil(ratio * total)`` indices are chosen. Odd indices are filled first,
    spread with a uniform stride; once all odd indices are taken the even
    ones follow the same way. At ratio 0.5 this is exactly the odd indices.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    k = math.ceil(ratio * total - 1e-12)
    odd = np.arange(1, total + 1, 2)
    even = np.arange(2, total + 1, 2)

    def spread(pool, m):
        return pool[(np.arange(m) * len(pool)) // m] if m else pool[:0]

    if k <= len(odd):
        return spread(odd, k)
    return np.sort(np.concatenate([odd, spread(even, k - len(odd))]))


def apply_color_mask(cloud: ColorizedCloud, ratio: float = 0.5) -> ColorizedCloud:
    """Keep colors on a stride-uniform subset of frames (temporal, person) or joints (spatial)."""
    if cloud.scheme is ColorScheme.SPATIAL:
        keep_idx, axis = mask_indices(cloud.n_joints, ratio), 1
    else:
        keep_idx, axis = mask_indices(cloud.n_frames, ratio), 0
    keep = np.isin(cloud.provenance[:, axis], keep_idx) & cloud.colored
    colors = np.where(keep[:, None], cloud.colors, 0.0)
    return replace(cloud, colors=colors, colored=keep)


def export_ply(cloud: ColorizedCloud, path: str | os.PathLike) -> None:
    """Write an ASCII PLY with float xyz and 8-bit RGB per vertex."""
    rgb = np.rint(255.0 * np.clip(cloud.colors, 0.0, 1.0)).astype(np.int64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment scheme {cloud.scheme.value}",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for (x, y, z), (r, g, b) in zip(cloud.positions, rgb):
        lines.append(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Read back an ASCII PLY written by :func:`export_ply` as (xyz, rgb uint8)."""
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vertex = None
    end = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n_vertex = int(line.split()[2])
        if line == "end_header":
            end = i
            break
    if n_vertex is None or end is None:
        raise ValueError(f"{path}: incomplete PLY header")
    rows = [ln.split() for ln in lines[end + 1 : end + 1 + n_vertex]]
    if len(rows) != n_vertex:
        raise ValueError(f"{path}: expected {n_vertex} vertices, found {len(rows)}")
    xyz = np.array([[float(v) for v in r[:3]] for r in rows]).reshape(-1, 3)
    rgb = np.array([[int(v) for v in r[3:6]] for r in rows], dtype=np.uint8).reshape(-1, 3)
    return xyz, rgb
