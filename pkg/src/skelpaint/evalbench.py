"""Synthetic skeleton-action datasets and classification metrics.

Each class is a motion family: a set of joints (plus everything hanging off
them on the kinematic chain) oscillating sinusoidally along one direction.
Some families share joints and direction and differ only in the order in
which positions are visited (raising versus lowering an arm), so the raw,
unordered cloud cannot tell them apart while a temporally ordered view can.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .colorize import SkeletonCloud, build_cloud
from .seeding import derive_rng
from .skeleton_data import (
    DatasetManifest,
    ManifestEntry,
    SequenceMeta,
    SkeletonSequence,
    load_sequence,
    write_manifest,
    write_sequence,
)

LIMB_LENGTH = 0.25

# limb name -> unit growth direction
_LIMBS = {
    "left_arm": np.array([-1.0, 0.0, 0.0]),
    "right_arm": np.array([1.0, 0.0, 0.0]),
    "left_leg": np.array([-0.3, -1.0, 0.0]) / math.hypot(0.3, 1.0),
    "right_leg": np.array([0.3, -1.0, 0.0]) / math.hypot(0.3, 1.0),
}


@dataclass(frozen=True)
class StickFigure:
    rest: np.ndarray  # (J, 3)
    parents: tuple[int, ...]  # -1 for root
    limbs: dict[str, tuple[int, ...]]

    def descendants(self, joint: int) -> list[int]:
        out, frontier = [], [joint]
        while frontier:
            j = frontier.pop()
            out.append(j)
            frontier += [c for c, p in enumerate(self.parents) if p == j]
        return sorted(out)


def stick_figure(n_joints: int) -> StickFigure:
    """Root (pelvis), spine and head, then the remaining joints dealt round-robin to arms and legs."""
    rest = [np.zeros(3)]
    parents = [-1]
    if n_joints >= 2:
        rest.append(np.array([0.0, 2 * LIMB_LENGTH, 0.0]))
        parents.append(0)
    if n_joints >= 3:
        rest.append(np.array([0.0, 3 * LIMB_LENGTH, 0.0]))
        parents.append(1)
    limbs: dict[str, list[int]] = {name: [] for name in _LIMBS}
    names = list(_LIMBS)
    for i in range(max(0, n_joints - 3)):
        name = names[i % len(names)]
        chain = limbs[name]
        parent = chain[-1] if chain else (1 if "arm" in name else 0)
        rest.append(rest[parent] + LIMB_LENGTH * _LIMBS[name])
        parents.append(parent)
        chain.append(len(rest) - 1)
    return StickFigure(np.array(rest), tuple(parents), {k: tuple(v) for k, v in limbs.items() if v})


@dataclass(frozen=True)
class MotionFamily:
    """Sinusoidal displacement ``amplitude * sin(2 pi frequency s + phase)`` along ``direction``.

    ``s`` runs over [0, 1) across the sequence; ``limb`` names the moving
    chain and ``start`` the first joint of it that moves.
    """

    limb: str
    frequency: float
    phase: float
    direction: tuple[float, float, float]
    amplitude: float = 0.15
    start: int = 0

    def key(self) -> tuple:
        return (self.limb, self.frequency, round(self.phase, 9), self.direction, self.amplitude, self.start)


_UP = (0.0, 1.0, 0.0)
_FORWARD = (0.0, 0.0, 1.0)


def default_families(n_classes: int) -> tuple[MotionFamily, ...]:
    """Class motion families: for each limb a raise, a lower, then a forward wave.

    Raise and lower visit the same positions in opposite order.
    """
    families = []
    for freq_scale in range(1, 1 + math.ceil(n_classes / 12) + 1):
        for limb in ("left_arm", "right_arm", "left_leg", "right_leg"):
            families += [
                MotionFamily(limb, 0.5 * freq_scale, -math.pi / 2, _UP),
                MotionFamily(limb, 0.5 * freq_scale, math.pi / 2, _UP),
                MotionFamily(limb, 2.0 * freq_scale, 0.0, _FORWARD),
            ]
    order = [0, 1, 3, 4, 2, 5, 6, 7, 9, 10, 8, 11]
    families = [families[12 * (i // 12) + order[i % 12]] for i in range(len(families))]
    return tuple(families[:n_classes])


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 5
    per_class: int = 40
    n_joints: int = 8
    n_frames: int = 32
    n_persons: int = 1
    noise: float = 0.01
    seed: int = 0
    families: tuple[MotionFamily, ...] | None = None
    amplitude_jitter: float = 0.2
    phase_jitter: float = 0.3

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.n_persons not in (1, 2):
            raise ValueError("n_persons must be 1 or 2")
        fams = self.resolved_families()
        if len(fams) != self.n_classes:
            raise ValueError("one motion family per class is required")
        if len({f.key() for f in fams}) != len(fams):
            raise ValueError("motion families must be distinct")
        figure = stick_figure(self.n_joints)
        for f in fams:
            if f.limb not in figure.limbs:
                raise ValueError(f"{self.n_joints}-joint figure has no {f.limb}")

    def resolved_families(self) -> tuple[MotionFamily, ...]:
        return self.families if self.families is not None else default_families(self.n_classes)


def synthesize_sequence(spec: SyntheticSpec, label: int, index: int, rng: np.random.Generator,
                        phase_offset: float | None = None, amplitude_scale: float | None = None) -> SkeletonSequence:
    figure = stick_figure(spec.n_joints)
    fam = spec.resolved_families()[label]
    if amplitude_scale is None:
        amplitude_scale = 1.0 + rng.uniform(-spec.amplitude_jitter, spec.amplitude_jitter)
    if phase_offset is None:
        phase_offset = rng.uniform(-spec.phase_jitter, spec.phase_jitter)
    s = np.arange(spec.n_frames) / spec.n_frames
    moving = figure.descendants(figure.limbs[fam.limb][fam.start])
    direction = np.asarray(fam.direction)

    persons = []
    for n in range(spec.n_persons):
        # second person stands opposite and moves in anti-phase
        phase = fam.phase + phase_offset + math.pi * n
        wave = fam.amplitude * amplitude_scale * np.sin(2 * math.pi * fam.frequency * s + phase)
        frames = np.repeat(figure.rest[None], spec.n_frames, axis=0)
        frames[:, moving] += wave[:, None, None] * direction
        frames = frames + np.array([1.0 * n, 0.0, 0.0])
        persons.append(frames)
    joints = np.stack(persons, axis=1)
    if spec.noise > 0:
        joints = joints + rng.normal(0.0, spec.noise, size=joints.shape)
    meta = SequenceMeta(label=label, subject=index % 10, view=0, dataset="synthetic")
    return SkeletonSequence(joints, tuple(range(1, spec.n_persons + 1)), meta)


def generate_sequences(spec: SyntheticSpec, seed: int | None = None) -> list[SkeletonSequence]:
    """All sequences, ordered class-major; sequence ``i`` draws from its own generator."""
    seed = spec.seed if seed is None else seed
    out = []
    for c in range(spec.n_classes):
        for k in range(spec.per_class):
            idx = c * spec.per_class + k
            out.append(synthesize_sequence(spec, c, idx, derive_rng(seed, "synthetic", idx)))
    return out


def generate_dataset(spec: SyntheticSpec, out_dir: str | os.PathLike, seed: int | None = None) -> DatasetManifest:
    """Write sequence files plus ``manifest.tsv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, seq in enumerate(generate_sequences(spec, seed)):
        path = out_dir / f"seq_{i:05d}.skl"
        write_sequence(seq, path)
        entries.append(ManifestEntry(path, seq.meta.label, seq.meta.subject, seq.meta.view))
    manifest = DatasetManifest(tuple(entries), spec.n_classes, spec.n_joints, spec.n_persons)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


def train_test_split(labels, test_fraction: float = 0.25, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split by sequence id; the two id sets are disjoint."""
    labels = np.asarray(labels.labels if hasattr(labels, "labels") else labels)
    train, test = [], []
    for c in np.unique(labels):
        ids = derive_rng(seed, "split", int(c)).permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_fraction * len(ids)))
        test += ids[:n_test].tolist()
        train += ids[n_test:].tolist()
    train, test = np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))
    assert not set(train.tolist()) & set(test.tolist())
    return train, test


@dataclass
class Benchmark:
    """Normalized, frame-sampled sequences split into train and test."""

    train_seqs: list[SkeletonSequence]
    test_seqs: list[SkeletonSequence]
    train_ids: np.ndarray
    test_ids: np.ndarray
    n_classes: int
    train_clouds: list[SkeletonCloud] = field(init=False)
    test_clouds: list[SkeletonCloud] = field(init=False)

    def __post_init__(self):
        self.train_clouds = [build_cloud(s) for s in self.train_seqs]
        self.test_clouds = [build_cloud(s) for s in self.test_seqs]

    @property
    def train_labels(self) -> np.ndarray:
        return np.array([s.meta.label for s in self.train_seqs], dtype=np.int64)

    @property
    def test_labels(self) -> np.ndarray:
        return np.array([s.meta.label for s in self.test_seqs], dtype=np.int64)


def load_benchmark(manifest: DatasetManifest, T: int, test_fraction: float = 0.25, seed: int = 0) -> Benchmark:
    seqs = [load_sequence(e, T) for e in manifest.entries]
    tr, te = train_test_split(manifest.labels, test_fraction, seed)
    return Benchmark([seqs[i] for i in tr], [seqs[i] for i in te], tr, te, manifest.n_classes)


# metrics ------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "support", "accuracy"])
        for c, acc in enumerate(self.per_class):
            w.writerow([c, int(self.confusion[c].sum()), f"{acc:.6f}"])
        w.writerow(["all", int(self.confusion.sum()), f"{self.accuracy:.6f}"])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"top-1 accuracy: {100 * self.accuracy:.2f}%", "class  support  accuracy"]
        for c, acc in enumerate(self.per_class):
            shown = "   n/a" if np.isnan(acc) else f"{100 * acc:6.2f}%"
            lines.append(f"{c:5d}  {int(self.confusion[c].sum()):7d}  {shown}")
        return "\n".join(lines)


def compute_metrics(pred, labels, n_classes: int | None = None) -> Metrics:
    pred, labels = np.asarray(pred, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    n_classes = n_classes or int(max(pred.max(initial=0), labels.max(initial=0)) + 1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    acc = float(np.mean(pred == labels)) if len(labels) else float("nan")
    return Metrics(acc, per_class, confusion)


def evaluate(classifier, models: Sequence, test_clouds: Sequence[SkeletonCloud], test_labels,
             n_classes: int | None = None, train_ids=None, test_ids=None) -> Metrics:
    """Deterministic forward pass, argmax prediction, aggregated metrics."""
    from .training import predict

    if train_ids is not None and test_ids is not None:
        overlap = set(np.asarray(train_ids).tolist()) & set(np.asarray(test_ids).tolist())
        if overlap:
            raise ValueError(f"train and test splits share ids {sorted(overlap)[:5]}")
    pred = predict(models, classifier, test_clouds)
    return compute_metrics(pred, test_labels, n_classes)


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y) -> float:
    """Separability oracle on flattened raw coordinates."""
    train_x = np.asarray(train_x).reshape(len(train_y), -1)
    test_x = np.asarray(test_x).reshape(len(test_y), -1)
    classes = np.unique(train_y)
    centroids = np.stack([train_x[np.asarray(train_y) == c].mean(axis=0) for c in classes])
    d = ((test_x[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float(np.mean(classes[np.argmin(d, axis=1)] == np.asarray(test_y)))


def write_metrics_csv(rows: Sequence[dict], path: str | os.PathLike) -> None:
    """Write ``epoch,split,loss,accuracy`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "split", "loss", "accuracy"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in w.fieldnames})
