"""Skeleton sequence I/O, validation, normalization and frame resampling.

Sequences are stored in a small line-oriented text format::

    SKEL v1 T=<frames> J=<joints> M=<persons>
    t n j x y z
    ...

with 1-based ``t``, ``n``, ``j`` and lines ordered t-major, then n, then j.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np


class SkeletonDataError(ValueError):
    pass


class MalformedFile(SkeletonDataError):
    pass


class NonFiniteJoint(SkeletonDataError):
    pass


class EmptySequence(SkeletonDataError):
    pass


@dataclass(frozen=True)
class SequenceMeta:
    label: int | None = None
    subject: int | None = None
    view: int | None = None
    dataset: str | None = None


@dataclass(frozen=True, eq=False)
class SkeletonSequence:
    """Joint positions of shape ``(frames, persons, joints, 3)``.

    ``person_ids`` holds the 1-based person slot of every entry along the
    person axis, so provenance survives dropping an empty slot.
    """

    joints: np.ndarray
    person_ids: tuple[int, ...] = (1,)
    meta: SequenceMeta = field(default_factory=SequenceMeta)

    def __post_init__(self):
        arr = np.array(self.joints, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise MalformedFile(f"joints must have shape (T, M, J, 3), got {arr.shape}")
        if arr.shape[0] == 0:
            raise EmptySequence("sequence has no frames")
        if arr.shape[1] < 1 or arr.shape[1] > 2:
            raise MalformedFile(f"person count must be 1 or 2, got {arr.shape[1]}")
        if arr.shape[2] < 1:
            raise MalformedFile("joint count must be >= 1")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteJoint("sequence contains NaN or Inf coordinates")
        ids = tuple(int(n) for n in self.person_ids)
        if len(ids) != arr.shape[1] or any(n not in (1, 2) for n in ids):
            raise MalformedFile(f"person_ids {ids} inconsistent with {arr.shape[1]} person slots")
        arr.setflags(write=False)
        object.__setattr__(self, "joints", arr)
        object.__setattr__(self, "person_ids", ids)

    @property
    def n_frames(self) -> int:
        return self.joints.shape[0]

    @property
    def n_persons(self) -> int:
        return self.joints.shape[1]

    @property
    def n_joints(self) -> int:
        return self.joints.shape[2]

    def __eq__(self, other):
        if not isinstance(other, SkeletonSequence):
            return NotImplemented
        return (
            self.person_ids == other.person_ids
            and self.meta == other.meta
            and self.joints.shape == other.joints.shape
            and bool(np.array_equal(self.joints, other.joints))
        )


def _parse_header(line: str) -> tuple[int, int, int]:
    parts = line.split()
    if len(parts) != 5 or parts[0] != "SKEL" or parts[1] != "v1":
        raise MalformedFile(f"bad header: {line!r}")
    values = {}
    for part in parts[2:]:
        key, sep, val = part.partition("=")
        if not sep or key not in ("T", "J", "M"):
            raise MalformedFile(f"bad header field: {part!r}")
        try:
            values[key] = int(val)
        except ValueError as exc:
            raise MalformedFile(f"bad header value: {part!r}") from exc
    if set(values) != {"T", "J", "M"}:
        raise MalformedFile(f"header must declare T, J and M: {line!r}")
    return values["T"], values["J"], values["M"]


def parse_sequence(path: str | os.PathLike, meta: SequenceMeta | None = None) -> SkeletonSequence:
    """Read a sequence file. Joint order is kept exactly as written."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFile(f"{path}: not UTF-8 text") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MalformedFile(f"{path}: empty file")
    T, J, M = _parse_header(lines[0])
    if T == 0:
        raise EmptySequence(f"{path}: sequence declares zero frames")
    if T < 0 or J < 1 or M not in (1, 2):
        raise MalformedFile(f"{path}: invalid dimensions T={T} J={J} M={M}")
    body = lines[1:]
    if len(body) != T * M * J:
        raise MalformedFile(f"{path}: expected {T * M * J} data lines, found {len(body)}")

    joints = np.empty((T, M, J, 3))
    it = 0
    for t in range(T):
        for n in range(M):
            for j in range(J):
                fields = body[it].split()
                it += 1
                if len(fields) != 6:
                    raise MalformedFile(f"{path}: bad data line {body[it - 1]!r}")
                try:
                    idx = tuple(int(f) for f in fields[:3])
                    xyz = [float(f) for f in fields[3:]]
                except ValueError as exc:
                    raise MalformedFile(f"{path}: bad data line {body[it - 1]!r}") from exc
                if idx != (t + 1, n + 1, j + 1):
                    raise MalformedFile(
                        f"{path}: line {it + 1} has indices {idx}, expected {(t + 1, n + 1, j + 1)}"
                    )
                joints[t, n, j] = xyz
    if not np.all(np.isfinite(joints)):
        raise NonFiniteJoint(f"{path}: NaN or Inf coordinate")
    return SkeletonSequence(joints, tuple(range(1, M + 1)), meta or SequenceMeta())


def write_sequence(seq: SkeletonSequence, path: str | os.PathLike) -> None:
    # repr() round-trips float64 exactly
    T, M, J, _ = seq.joints.shape
    out = [f"SKEL v1 T={T} J={J} M={M}"]
    for t in range(T):
        for n in range(M):
            for j in range(J):
                x, y, z = seq.joints[t, n, j]
                out.append(f"{t + 1} {n + 1} {j + 1} {float(x)!r} {float(y)!r} {float(z)!r}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def sample_indices(n_frames: int, T: int) -> np.ndarray:
    """Frame indices for uniform sampling of ``T`` frames out of ``n_frames``.

    Short sequences are first extended by cyclic repetition to length ``T``.
    """
    if n_frames < 1 or T < 1:
        raise ValueError("frame counts must be positive")
    if n_frames < T:
        return np.arange(T) % n_frames
    # round half up, in exact integer arithmetic
    idx = (2 * np.arange(T, dtype=np.int64) * n_frames + T) // (2 * T)
    return np.clip(idx, 0, n_frames - 1)


def sample_frames(seq: SkeletonSequence, T: int) -> SkeletonSequence:
    idx = sample_indices(seq.n_frames, T)
    return replace(seq, joints=seq.joints[idx])


def normalize_sequence(seq: SkeletonSequence, root_joint: int = 0) -> SkeletonSequence:
    """Drop all-zero person slots, then move the first frame's root joint to the origin."""
    keep = [n for n in range(seq.n_persons) if np.any(seq.joints[:, n] != 0.0)]
    if not keep:
        keep = [0]
    joints = seq.joints[:, keep]
    origin = joints[0, 0, root_joint]
    return replace(seq, joints=joints - origin, person_ids=tuple(seq.person_ids[n] for n in keep))


def strip_labels(seqs: Iterable[SkeletonSequence]) -> list[SkeletonSequence]:
    """Copies of ``seqs`` carrying positions only; metadata is never read."""
    return [SkeletonSequence(s.joints, s.person_ids) for s in seqs]


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: int
    subject: int
    view: int


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    n_classes: int
    n_joints: int
    max_persons: int

    def __post_init__(self):
        if self.max_persons not in (1, 2):
            raise SkeletonDataError("max_persons must be 1 or 2")
        for e in self.entries:
            if not 0 <= e.label < self.n_classes:
                raise SkeletonDataError(f"label {e.label} outside [0, {self.n_classes})")

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def subset(self, ids: Iterable[int]) -> "DatasetManifest":
        return replace(self, entries=tuple(self.entries[i] for i in ids))


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    base = path.parent.resolve()
    lines = [f"# C={manifest.n_classes} J={manifest.n_joints} M={manifest.max_persons}"]
    for e in manifest.entries:
        p = Path(e.path)
        try:
            p = p.resolve().relative_to(base)
        except ValueError:
            pass
        lines.append(f"{p}\t{e.label}\t{e.subject}\t{e.view}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    """Parse a tab-separated manifest; relative paths resolve against its directory.

    An optional ``# C=.. J=.. M=..`` comment line fixes the class count and
    skeleton shape; otherwise they are inferred from labels and the first file.
    """
    path = Path(path)
    header: dict[str, int] = {}
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                key, sep, val = tok.partition("=")
                if sep and key in ("C", "J", "M"):
                    header[key] = int(val)
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise MalformedFile(f"{path}:{lineno}: expected 4 tab-separated fields")
        try:
            label, subject, view = (int(f) for f in fields[1:])
        except ValueError as exc:
            raise MalformedFile(f"{path}:{lineno}: non-integer label/subject/view") from exc
        seq_path = Path(fields[0])
        if not seq_path.is_absolute():
            seq_path = path.parent / seq_path
        if check_files and not seq_path.exists():
            raise FileNotFoundError(f"{path}:{lineno}: missing sequence file {seq_path}")
        entries.append(ManifestEntry(seq_path, label, subject, view))

    if "J" not in header or "M" not in header:
        if not entries:
            raise MalformedFile(f"{path}: empty manifest without header")
        first = _parse_header(Path(entries[0].path).read_text(encoding="utf-8").split("\n", 1)[0])
        header.setdefault("J", first[1])
        header.setdefault("M", first[2])
    n_classes = header.get("C", max((e.label for e in entries), default=-1) + 1)
    return DatasetManifest(tuple(entries), n_classes, header["J"], header["M"])


def load_sequence(entry: ManifestEntry, T: int | None = None, root_joint: int = 0) -> SkeletonSequence:
    """Parse, normalize and (optionally) resample one manifest entry."""
    meta = SequenceMeta(label=entry.label, subject=entry.subject, view=entry.view)
    seq = normalize_sequence(parse_sequence(entry.path, meta), root_joint)
    if T is not None:
        seq = sample_frames(seq, T)
    return seq
