"""Repaint pretraining and the linear-probe / fine-tune classification protocols."""

from __future__ import annotations

import configparser
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from .autodiff_net import NetConfig, RepaintModel, Tensor, chamfer_loss, encode, forward_repaint, init_model
from .autodiff_net import tensor as ad
from .colorize import ColorScheme, SkeletonCloud, apply_color_mask, build_cloud, colorize_cloud
from .seeding import derive_rng, derive_seed
from .skeleton_data import SkeletonSequence, strip_labels

log = logging.getLogger(__name__)

STREAM_ORDER = ("temporal", "spatial", "person")


class EmptyClass(ValueError):
    pass


# schedules and optimizers ----------------------------------------------------


def cosine_lr(step: float, total: float, lr_max: float, lr_min: float) -> float:
    if total <= 0:
        return lr_max
    if step == total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


def _check_shapes(params: dict, grads: dict) -> None:
    for k, p in params.items():
        g = grads.get(k)
        if g is not None and np.shape(g) != np.shape(p):
            raise ad.ShapeMismatch(f"gradient for {k} has shape {np.shape(g)}, expected {np.shape(p)}")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are untouched."""
    _check_shapes(params, grads)
    b1, b2 = betas
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


def nesterov_sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], velocity: dict,
                      lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
    """SGD with Nesterov momentum (``v = mu v + g; p -= lr (g + mu v)``)."""
    _check_shapes(params, grads)
    new_p, new_v = {}, {}
    for k, p in params.items():
        g = grads.get(k)
        g = np.zeros_like(p) if g is None else g
        if weight_decay:
            g = g + weight_decay * p
        v = momentum * velocity.get(k, 0.0) + g
        new_p[k] = p - lr * (g + momentum * v)
        new_v[k] = v
    return new_p, new_v


def _apply(tensors: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    for k, v in values.items():
        tensors[k].data = v


def _grads(tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    if not max_norm:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


# configs ------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    scheme: str = "temporal"
    epochs: int = 150
    batch_size: int = 24
    lr_max: float = 1e-5
    lr_min: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    input_mode: str = "raw"  # "raw" or "hint"
    hint_ratio: float = 0.5
    reduction: str = "max"  # "max" or "sum" (ablation)
    both_branches: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.input_mode not in ("raw", "hint"):
            raise ValueError(f"input_mode must be 'raw' or 'hint', got {self.input_mode!r}")
        ColorScheme.parse(self.scheme)


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 100
    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 0.0
    protocol: str = "unsupervised"  # unsupervised | semi | supervised
    fraction: float = 1.0
    fusion: str = "concat"  # concat | score
    standardize: bool = True  # z-score features with training statistics
    clip_norm: float = 1.0  # global gradient-norm cap when fine-tuning; 0 disables
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if self.protocol not in ("unsupervised", "semi", "supervised"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.fusion not in ("concat", "score"):
            raise ValueError(f"unknown fusion {self.fusion!r}")


def _coerce(value: str, target):
    if isinstance(target, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value.strip()


def read_config(path: str | os.PathLike) -> dict[str, str]:
    """Parse a ``key = value`` file (``#`` comments, optional ``[section]`` headers ignored)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    parser.read_string("[__root__]\n" + text)
    out: dict[str, str] = {}
    for section in parser.sections():
        out.update({k: v for k, v in parser.items(section)})
    return out


def config_from_mapping(cls, mapping: dict, **overrides):
    """Build a config dataclass from string key/values; unknown keys are ignored."""
    defaults = cls()
    kw = {}
    for f in fields(cls):
        if f.name in mapping and mapping[f.name] is not None:
            raw = mapping[f.name]
            kw[f.name] = _coerce(raw, getattr(defaults, f.name)) if isinstance(raw, str) else raw
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kw)


# cloud preparation ----------------------------------------------------------


def repaint_target(cloud: SkeletonCloud, scheme) -> np.ndarray:
    return colorize_cloud(cloud, scheme).points


def stream_input(cloud: SkeletonCloud, scheme, input_mode: str = "raw", hint_ratio: float = 0.5) -> np.ndarray:
    """Encoder input: the raw cloud with (0,0,0) color, or the masked colorized cloud."""
    if input_mode == "raw":
        return cloud.as_points6()
    return apply_color_mask(colorize_cloud(cloud, scheme), hint_ratio).points


def model_input(model: RepaintModel, cloud: SkeletonCloud) -> np.ndarray:
    return stream_input(cloud, model.scheme, model.input_mode, model.hint_ratio)


def clouds_from(seqs: Iterable[SkeletonSequence]) -> list[SkeletonCloud]:
    return [build_cloud(s) for s in seqs]


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _group_by_size(ids, arrays: Sequence[np.ndarray]):
    """Split a batch into runs of equal point count so each run stacks."""
    groups: dict[int, list[int]] = {}
    for i in ids:
        groups.setdefault(arrays[i].shape[0], []).append(int(i))
    return [groups[k] for k in sorted(groups)]


# pretraining --------------------------------------------------------------


@dataclass
class PretrainResult:
    model: RepaintModel
    losses: list[float]


def pretrain_stream(sequences: Sequence[SkeletonSequence], config: PretrainConfig,
                    net: NetConfig | None = None, model: RepaintModel | None = None) -> PretrainResult:
    """Train one encoder/decoder pair to repaint clouds into their ``config.scheme`` coloring.

    Labels are stripped before anything else happens; the training loop only
    ever sees joint positions.
    """
    scheme = ColorScheme.parse(config.scheme).value
    seqs = strip_labels(sequences)
    if not seqs:
        raise ValueError("pretraining needs at least one sequence")
    clouds = clouds_from(seqs)
    if net is None:
        net = NetConfig.for_points(len(clouds[0]))
    if model is None:
        model = init_model(net, derive_seed(config.seed, "init", scheme), scheme,
                           config.input_mode, config.hint_ratio)
    inputs = [model_input(model, c) for c in clouds]
    targets = [repaint_target(c, scheme) for c in clouds]
    rng = derive_rng(config.seed, "pretrain-order", scheme)
    params = model.params
    state = AdamState()
    losses: list[float] = []
    n = len(clouds)
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, max(config.epochs - 1, 1), config.lr_max, config.lr_min)
        total = 0.0
        for ids in _batches(n, config.batch_size, rng):
            model.zero_grad()
            batch_loss = 0.0
            for group in _group_by_size(ids, inputs):
                x = np.stack([inputs[i] for i in group])
                loss = chamfer_loss(forward_repaint(model, x), [targets[i] for i in group],
                                    config.reduction, config.both_branches)
                # weight by group share so the step uses the batch mean
                weighted = ad.mul(loss, len(group) / len(ids))
                weighted.backward()
                batch_loss += float(loss.data) * len(group)
            total += batch_loss
            new, state = adam_step({k: p.data for k, p in params.items()}, _grads(params), state, lr,
                                   (config.beta1, config.beta2), config.eps)
            _apply(params, new)
        losses.append(total / n)
        log.debug("pretrain %s epoch %d lr %.3g loss %.6f", scheme, epoch + 1, lr, losses[-1])
    model.zero_grad()
    return PretrainResult(model, losses)


# features and classifiers ----------------------------------------------------


def sort_streams(models: Sequence[RepaintModel]) -> list[RepaintModel]:
    """Order streams temporal, spatial, person (stable for repeats / baselines)."""
    def rank(m):
        return STREAM_ORDER.index(m.scheme) if m.scheme in STREAM_ORDER else len(STREAM_ORDER)
    return sorted(models, key=rank)


def fuse_features(features: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate per-stream features along the last axis, in the given (temporal, spatial, person) order."""
    if not features:
        raise ValueError("need at least one stream")
    return np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=-1)


def stream_features(model: RepaintModel, clouds: Sequence[SkeletonCloud], batch_size: int = 64) -> np.ndarray:
    inputs = [model_input(model, c) for c in clouds]
    out = np.empty((len(clouds), model.config.feat_dim))
    for ids in _batches(len(clouds), batch_size, None):
        for group in _group_by_size(ids, inputs):
            out[group] = encode(model, np.stack([inputs[i] for i in group])).data
    return out


def extract_features(models: Sequence[RepaintModel], clouds: Sequence[SkeletonCloud]) -> list[np.ndarray]:
    return [stream_features(m, clouds) for m in models]


@dataclass(eq=False)
class LinearClassifier:
    """Linear head over fused features.

    ``heads`` holds one (weight, bias) pair for concatenation fusion, or one
    per stream for score fusion (softmax scores averaged). Optional feature
    standardization is an affine map, so the classifier stays linear.
    """

    heads: list[tuple[Tensor, Tensor]]
    fusion: str = "concat"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.heads):
            out[f"cls{i}.w"], out[f"cls{i}.b"] = w, b
        return out

    def _inputs(self, per_stream: Sequence) -> list:
        if self.fusion == "concat":
            parts = [ad.concat([ad.as_tensor(f) for f in per_stream], axis=-1)] if len(per_stream) > 1 \
                else [ad.as_tensor(per_stream[0])]
        else:
            parts = [ad.as_tensor(f) for f in per_stream]
        if self.mean is not None:
            mus = np.split(self.mean, np.cumsum([p.shape[-1] for p in parts])[:-1])
            sds = np.split(self.std, np.cumsum([p.shape[-1] for p in parts])[:-1])
            parts = [ad.mul(ad.sub(p, mu), 1.0 / sd) for p, mu, sd in zip(parts, mus, sds)]
        return parts

    def logits(self, per_stream: Sequence) -> list[Tensor]:
        return [ad.linear(x, w, b) for x, (w, b) in zip(self._inputs(per_stream), self.heads)]

    def loss(self, per_stream: Sequence, labels) -> Tensor:
        losses = [ad.cross_entropy(lg, labels) for lg in self.logits(per_stream)]
        total = losses[0]
        for extra in losses[1:]:
            total = ad.add(total, extra)
        return ad.mul(total, 1.0 / len(losses))

    def scores(self, per_stream: Sequence) -> np.ndarray:
        probs = []
        for lg in self.logits(per_stream):
            z = lg.data - lg.data.max(axis=-1, keepdims=True)
            e = np.exp(z)
            probs.append(e / e.sum(axis=-1, keepdims=True))
        return np.mean(probs, axis=0)

    def predict(self, per_stream: Sequence) -> np.ndarray:
        return np.argmax(self.scores(per_stream), axis=-1)


def init_classifier(dims: Sequence[int], n_classes: int, fusion: str, seed: int) -> LinearClassifier:
    rng = np.random.default_rng(seed)
    head_dims = [sum(dims)] if fusion == "concat" else list(dims)
    heads = []
    for d in head_dims:
        bound = 1.0 / math.sqrt(d)
        heads.append((Tensor(rng.uniform(-bound, bound, (d, n_classes)), requires_grad=True),
                      Tensor(np.zeros(n_classes), requires_grad=True)))
    return LinearClassifier(heads, fusion)


PROBE_EPS = 1e-12
FINETUNE_EPS = 1e-5


def _standardizer(features: list[np.ndarray], eps: float = PROBE_EPS):
    fused = fuse_features(features)
    return fused.mean(axis=0), np.sqrt(fused.var(axis=0) + eps)


def encoder_digest(models: Sequence[RepaintModel]) -> str:
    h = hashlib.sha256()
    for m in models:
        for k in sorted(m.encoder_params()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(m.params[k].data).tobytes())
    return h.hexdigest()


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float(np.mean(pred == labels)) if len(labels) else float("nan")


@dataclass
class ProtocolResult:
    models: list[RepaintModel]
    classifier: LinearClassifier
    accuracy: float
    history: list[dict] = field(default_factory=list)


def _n_classes(*label_sets) -> int:
    return int(max(int(np.max(lb)) for lb in label_sets if len(lb)) + 1)


def linear_probe(models: Sequence[RepaintModel], train_clouds: Sequence[SkeletonCloud], train_labels,
                 test_clouds: Sequence[SkeletonCloud], test_labels, config: ClassifierConfig,
                 n_classes: int | None = None) -> ProtocolResult:
    """Train a linear classifier on frozen encoder features; report top-1 on the test split."""
    models = sort_streams(models)
    before = encoder_digest(models)
    y_train = np.asarray(train_labels, dtype=np.int64)
    y_test = np.asarray(test_labels, dtype=np.int64)
    n_classes = n_classes or _n_classes(y_train, y_test)
    f_train = extract_features(models, train_clouds)
    f_test = extract_features(models, test_clouds)

    clf = init_classifier([f.shape[1] for f in f_train], n_classes, config.fusion,
                          derive_seed(config.seed, "classifier"))
    if config.standardize:
        clf.mean, clf.std = _standardizer(f_train)
    rng = derive_rng(config.seed, "probe-order")
    velocity: dict = {}
    history = []
    params = clf.params
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, max(config.epochs - 1, 1), config.lr_max, config.lr_min)
        total = 0.0
        for ids in _batches(len(y_train), config.batch_size, rng):
            for p in params.values():
                p.grad = None
            loss = clf.loss([f[ids] for f in f_train], y_train[ids])
            loss.backward()
            total += float(loss.data) * len(ids)
            new, velocity = nesterov_sgd_step({k: p.data for k, p in params.items()}, _grads(params),
                                              velocity, lr, config.momentum, config.weight_decay)
            _apply(params, new)
        history.append({"epoch": epoch + 1, "split": "train", "loss": total / len(y_train),
                        "accuracy": accuracy(clf.predict(f_train), y_train)})

    if encoder_digest(models) != before:
        raise RuntimeError("encoder parameters changed during a linear probe")
    acc = accuracy(clf.predict(f_test), y_test)
    history.append({"epoch": config.epochs, "split": "test", "loss": float("nan"), "accuracy": acc})
    return ProtocolResult(list(models), clf, acc, history)


def finetune(models: Sequence[RepaintModel], train_clouds: Sequence[SkeletonCloud], train_labels,
             test_clouds: Sequence[SkeletonCloud], test_labels, config: ClassifierConfig,
             n_classes: int | None = None) -> ProtocolResult:
    """Jointly train encoders and a linear head with cross-entropy.

    With ``standardize`` the features are z-scored with batch statistics
    during training and with whole-training-set statistics afterwards.

    The input models are copied, never modified. For the semi-supervised
    protocol the labeled subset is drawn here with :func:`sample_labeled_subset`.
    """
    models = [m.copy() for m in sort_streams(models)]
    y_train = np.asarray(train_labels, dtype=np.int64)
    y_test = np.asarray(test_labels, dtype=np.int64)
    n_classes = n_classes or _n_classes(y_train, y_test)
    ids_all = np.arange(len(y_train))
    if config.protocol == "semi" and config.fraction < 1.0:
        ids_all = sample_labeled_subset(y_train, config.fraction, config.seed, n_classes).all_ids
    train_inputs = [[model_input(m, train_clouds[i]) for i in ids_all] for m in models]
    y_sub = y_train[ids_all]

    clf = init_classifier([m.config.feat_dim for m in models], n_classes, config.fusion,
                          derive_seed(config.seed, "classifier"))
    params: dict[str, Tensor] = dict(clf.params)
    for si, m in enumerate(models):
        for k, p in m.encoder_params().items():
            params[f"s{si}.{k}"] = p
    rng = derive_rng(config.seed, "finetune-order")
    velocity: dict = {}
    history = []
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, max(config.epochs - 1, 1), config.lr_max, config.lr_min)
        total = 0.0
        for ids in _batches(len(y_sub), config.batch_size, rng):
            for p in params.values():
                p.grad = None
            for group in _group_by_size(ids, train_inputs[0]):
                if config.standardize and len(group) < 2:
                    continue  # batch statistics need two samples
                feats = [encode(m, np.stack([train_inputs[si][i] for i in group])) for si, m in enumerate(models)]
                if config.standardize:
                    feats = [ad.batch_standardize(f, FINETUNE_EPS) for f in feats]
                loss = clf.loss(feats, y_sub[group])
                ad.mul(loss, len(group) / len(ids)).backward()
                total += float(loss.data) * len(group)
            grads = clip_grad_norm(_grads(params), config.clip_norm)
            new, velocity = nesterov_sgd_step({k: p.data for k, p in params.items()}, grads,
                                              velocity, lr, config.momentum, config.weight_decay)
            _apply(params, new)
        history.append({"epoch": epoch + 1, "split": "train", "loss": total / max(len(y_sub), 1),
                        "accuracy": float("nan")})
    for m in models:
        m.zero_grad()
    if config.standardize:
        # evaluation uses statistics of the whole labeled set under the final encoders
        clf.mean, clf.std = _standardizer(extract_features(models, [train_clouds[i] for i in ids_all]), FINETUNE_EPS)
    acc = accuracy(predict(models, clf, test_clouds), y_test)
    history.append({"epoch": config.epochs, "split": "test", "loss": float("nan"), "accuracy": acc})
    return ProtocolResult(models, clf, acc, history)


def predict(models: Sequence[RepaintModel], classifier: LinearClassifier,
            clouds: Sequence[SkeletonCloud]) -> np.ndarray:
    return classifier.predict(extract_features(sort_streams(models), clouds))


def baseline_model(net: NetConfig, seed: int, tag: str = "baseline") -> RepaintModel:
    """Randomly initialized, never pretrained encoder fed raw clouds."""
    return init_model(net, derive_seed(seed, "init", tag), tag, "raw")


# labeled subsets ------------------------------------------------------------


@dataclass(frozen=True)
class LabeledSubset:
    per_class: dict[int, np.ndarray]
    fraction: float
    seed: int

    @property
    def all_ids(self) -> np.ndarray:
        return np.sort(np.concatenate([v for v in self.per_class.values()]))

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in self.per_class.items()}


def labeled_count(fraction: float, pool: int) -> int:
    """floor(fraction * pool), at least one; tolerant to binary rounding of the product."""
    return max(1, math.floor(fraction * pool + 1e-9))


def sample_labeled_subset(labels, fraction: float, seed: int, n_classes: int | None = None) -> LabeledSubset:
    """Uniformly draw ``labeled_count(fraction, pool)`` ids per class without replacement.

    Each class pool is shuffled once with a class-specific generator and the
    prefix is taken, so subsets for growing fractions are nested.
    """
    if hasattr(labels, "labels"):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n_classes = n_classes if n_classes is not None else int(labels.max()) + 1
    per_class = {}
    for c in range(n_classes):
        pool = np.flatnonzero(labels == c)
        if len(pool) == 0:
            raise EmptyClass(f"class {c} has no samples")
        order = derive_rng(seed, "subset", c).permutation(pool)
        per_class[c] = np.sort(order[:labeled_count(fraction, len(pool))])
    return LabeledSubset(per_class, fraction, seed)


__all__ = [
    "AdamState",
    "ClassifierConfig",
    "EmptyClass",
    "LabeledSubset",
    "LinearClassifier",
    "PretrainConfig",
    "PretrainResult",
    "ProtocolResult",
    "adam_step",
    "baseline_model",
    "config_from_mapping",
    "cosine_lr",
    "extract_features",
    "finetune",
    "fuse_features",
    "linear_probe",
    "nesterov_sgd_step",
    "predict",
    "pretrain_stream",
    "read_config",
    "sample_labeled_subset",
]
