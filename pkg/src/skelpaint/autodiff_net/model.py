"""EdgeConv encoder and folding decoder for repainting skeleton clouds."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..chamfer import chamfer_grad, chamfer_max, sq_dist
from . import tensor as ad
from .tensor import Tensor


class TooFewPoints(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters shared by one encoder/decoder pair.

    The desk-scale defaults are a scaled-down DGCNN encoder (EdgeConv
    widths 64, 64, 128, k=20, F=1024) and FoldingNet decoder (hidden 512).
    """

    k: int = 6
    widths: tuple[int, ...] = (16, 16, 32)
    feat_dim: int = 128
    grid_size: int = 12
    decoder_hidden: int = 64
    in_channels: int = 6
    out_channels: int = 6
    slope: float = 0.2
    grid_extent: float = 0.3

    @classmethod
    def for_points(cls, n_points: int, **kw) -> "NetConfig":
        kw.setdefault("grid_size", math.ceil(math.sqrt(n_points)))
        return cls(**kw)

    @classmethod
    def full_scale(cls, n_points: int) -> "NetConfig":
        return cls.for_points(n_points, k=20, widths=(64, 64, 128), feat_dim=1024, decoder_hidden=512)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass(eq=False)
class RepaintModel:
    """Parameters for one colorization stream; streams never share tensors."""

    config: NetConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    scheme: str = "temporal"
    # what the encoder is fed: "raw" clouds, or "hint" clouds colored at hint_ratio
    input_mode: str = "raw"
    hint_ratio: float = 0.5

    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("enc.")}

    def decoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("dec.")}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k] = Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)

    def copy(self) -> "RepaintModel":
        m = RepaintModel(self.config, {}, self.scheme, self.input_mode, self.hint_ratio)
        m.load_state(self.state())
        return m


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _mlp_shapes(cfg: NetConfig):
    shapes = []
    c = cfg.in_channels
    for i, w in enumerate(cfg.widths):
        shapes.append((f"enc.edge{i}", 2 * c, w))
        c = w
    shapes.append(("enc.proj", sum(cfg.widths), cfg.feat_dim))
    h = cfg.decoder_hidden
    for fold, fin in (("fold1", 2 + cfg.feat_dim), ("fold2", cfg.out_channels + cfg.feat_dim)):
        shapes += [(f"dec.{fold}.0", fin, h), (f"dec.{fold}.1", h, h), (f"dec.{fold}.2", h, cfg.out_channels)]
    return shapes


def init_model(config: NetConfig, seed: int = 0, scheme: str = "temporal",
               input_mode: str = "raw", hint_ratio: float = 0.5) -> RepaintModel:
    """Weights and biases uniform in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, fan_in, fan_out in _mlp_shapes(config):
        params[f"{name}.w"] = Tensor(_uniform(rng, fan_in, (fan_in, fan_out)), requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(_uniform(rng, fan_in, (fan_out,)), requires_grad=True, name=f"{name}.b")
    return RepaintModel(config, params, scheme, input_mode, hint_ratio)


def knn_graph(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest other rows, per row; accepts (N, D) or (B, N, D).

    Ties are broken by lowest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    squeeze = pts.ndim == 2
    if squeeze:
        pts = pts[None]
    N = pts.shape[1]
    if not 1 <= k < N:
        raise TooFewPoints(f"need more than k={k} points, got {N}")
    d2 = sq_dist(pts[:, :, None, :], pts[:, None, :, :])
    d2[:, np.arange(N), np.arange(N)] = np.inf
    idx = np.argsort(d2, axis=-1, kind="stable")[..., :k]
    return idx[0] if squeeze else idx


def edge_conv(x: Tensor, graph: np.ndarray, w: Tensor, b: Tensor, slope: float = 0.2) -> Tensor:
    """Per edge: leaky(Linear(concat(f_i, f_j - f_i))); channelwise max over neighbors.

    ``x`` is (B, N, C) and ``graph`` (B, N, k).
    """
    if w.shape[0] != 2 * x.shape[-1]:
        raise ad.ShapeMismatch(f"edge weight {w.shape} does not fit {x.shape[-1]} channels")
    B, N, C = x.shape
    k = graph.shape[-1]
    nb = ad.gather_neighbors(x, graph)  # (B, N, k, C)
    center = ad.broadcast_to(ad.reshape(x, (B, N, 1, C)), (B, N, k, C))
    edge = ad.concat([center, nb - center], axis=-1)
    h = ad.leaky_relu(ad.linear(edge, w, b), slope)
    return ad.max(h, axis=2)


def _as_batch(cloud) -> tuple[np.ndarray, bool]:
    arr = cloud.data if isinstance(cloud, Tensor) else np.asarray(cloud, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    return arr, False


def encode(model: RepaintModel, cloud) -> Tensor:
    """Global feature of shape (F,) for one cloud, or (B, F) for a batch.

    The kNN graph is rebuilt in each block's input feature space.
    """
    cfg = model.config
    pts, single = _as_batch(cloud)
    if pts.shape[-1] != cfg.in_channels:
        raise ad.ShapeMismatch(f"encoder expects {cfg.in_channels} channels, got {pts.shape[-1]}")
    if pts.shape[1] < cfg.k + 1:
        raise TooFewPoints(f"encoder needs at least {cfg.k + 1} points, got {pts.shape[1]}")
    p = model.params
    x = ad.reshape(cloud, pts.shape) if isinstance(cloud, Tensor) else Tensor(pts)
    outs = []
    for i in range(len(cfg.widths)):
        graph = knn_graph(x.data, cfg.k)
        x = edge_conv(x, graph, p[f"enc.edge{i}.w"], p[f"enc.edge{i}.b"], cfg.slope)
        outs.append(x)
    h = ad.leaky_relu(ad.linear(ad.concat(outs, axis=-1), p["enc.proj.w"], p["enc.proj.b"]), cfg.slope)
    feat = ad.max(h, axis=1)
    return ad.reshape(feat, (cfg.feat_dim,)) if single else feat


def folding_grid(grid_size: int, extent: float = 0.3) -> np.ndarray:
    lin = np.linspace(-extent, extent, grid_size)
    gx, gy = np.meshgrid(lin, lin, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _fold(x: Tensor, p: dict, name: str) -> Tensor:
    x = ad.relu(ad.linear(x, p[f"dec.{name}.0.w"], p[f"dec.{name}.0.b"]))
    x = ad.relu(ad.linear(x, p[f"dec.{name}.1.w"], p[f"dec.{name}.1.b"]))
    return ad.linear(x, p[f"dec.{name}.2.w"], p[f"dec.{name}.2.b"])


def decode(model: RepaintModel, feature) -> Tensor:
    """Fold a fixed 2D grid, conditioned on ``feature``, into G*G 6D points."""
    cfg = model.config
    feature = ad.as_tensor(feature)
    single = feature.ndim == 1
    f = ad.reshape(feature, (1, cfg.feat_dim)) if single else feature
    B, M = f.shape[0], cfg.grid_size**2
    code = ad.broadcast_to(ad.reshape(f, (B, 1, cfg.feat_dim)), (B, M, cfg.feat_dim))
    grid = Tensor(np.broadcast_to(folding_grid(cfg.grid_size, cfg.grid_extent), (B, M, 2)))
    fold1 = _fold(ad.concat([grid, code], axis=-1), model.params, "fold1")
    fold2 = _fold(ad.concat([fold1, code], axis=-1), model.params, "fold2")
    return ad.reshape(fold2, (M, cfg.out_channels)) if single else fold2


def forward_repaint(model: RepaintModel, cloud) -> Tensor:
    return decode(model, encode(model, cloud))


def chamfer_loss(pred: Tensor, targets, reduction: str = "max", both_branches: bool = False) -> Tensor:
    """Mean Chamfer distance between each predicted set and its target.

    ``pred`` is (B, M, 6) or (M, 6); ``targets`` a matching array or a list
    of (N_b, 6) arrays. The gradient is the branch-selected subgradient.
    """
    single = pred.ndim == 2
    pdata = pred.data[None] if single else pred.data
    if single:
        targets = [np.asarray(targets)]
    B = pdata.shape[0]
    values, grads = [], []
    for b in range(B):
        res = chamfer_max(targets[b], pdata[b], reduction=reduction)
        values.append(res.value)
        grads.append(chamfer_grad(targets[b], pdata[b], res, reduction=reduction, both_branches=both_branches))
    grad = np.stack(grads) / B
    if single:
        grad = grad[0]

    return ad.custom((pred,), np.array(np.mean(values)), lambda g: (g * grad,), "chamfer")


__all__ = [
    "NetConfig",
    "RepaintModel",
    "TooFewPoints",
    "chamfer_loss",
    "decode",
    "edge_conv",
    "encode",
    "folding_grid",
    "forward_repaint",
    "init_model",
    "knn_graph",
]
