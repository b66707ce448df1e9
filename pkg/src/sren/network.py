"""SimBlocks, the classifier stack, and a small Adam training loop.

Every block estimates one geometry field from the channel mean of its input
and shares it across its layers.  A baseline model is the same stack with the
identity field forced everywhere, i.e. plain 3x3 convolutions with identical
parameter counts.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from sren.errors import InvalidArgument, InvalidParameter, NumericalFailure
from sren.fourier_argand import BasisConfig, BasisSet, build_basis
from sren.geometry import GeometryField, SearchGrid, build_search_grid, compute_geometry
from sren.io import read_srtn, write_srtn
from sren.simconv import SimConvLayer, backward_array, forward_array, sampling_operator, square_support
from sren.tensorcore import FeatureMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeometrySource:
    """Shared basis + search grid used by every block of a model.

    The margin threshold defaults to 0, so only the sigma floor sends a pixel
    to the identity fallback.  The fallback is not rotation equivariant, and a
    margin cut puts textured pixels on it.
    """

    basis: BasisSet
    grid: SearchGrid
    conf_threshold: float | None = 0.0

    @classmethod
    def create(cls, config: BasisConfig | None = None, n_lambda=9, n_gamma=16, lambda_range=(0.5, 2.0),
               conf_threshold=0.0) -> "GeometrySource":
        config = config or BasisConfig()
        return cls(build_basis(config), build_search_grid(config, n_lambda, n_gamma, lambda_range), conf_threshold)

    def field(self, data: np.ndarray) -> GeometryField:
        return compute_geometry(data, self.basis, self.grid, self.conf_threshold)

    def to_dict(self) -> dict:
        g = self.grid
        return {
            "basis": self.basis.config.to_dict(),
            "grid": {
                "n_lambda": len(g.lambdas),
                "n_gamma": len(g.gammas),
                "lambda_range": [float(g.lambdas[0]), float(g.lambdas[-1])],
                "conf_threshold": self.conf_threshold,
            },
        }


_IDENTITY_OPS: dict = {}


def _identity_operator(h: int, w: int, support: np.ndarray):
    key = (h, w, support.tobytes())
    if key not in _IDENTITY_OPS:
        _IDENTITY_OPS[key] = sampling_operator(GeometryField.identity(h, w), support)
    return _IDENTITY_OPS[key]


@dataclass
class SimBlock:
    layers: list
    geometry: GeometrySource | None = None  # None: identity field (plain convolution)

    def field(self, data: np.ndarray) -> GeometryField:
        if self.geometry is None:
            return GeometryField.identity(*data.shape[1:])
        return self.geometry.field(data)

    def operator(self, data: np.ndarray):
        support = self.layers[0].support
        if self.geometry is None:
            return _identity_operator(data.shape[1], data.shape[2], support)
        p = self.geometry.basis.config.patch
        if data.shape[1] < p or data.shape[2] < p:
            raise InvalidArgument(f"block input {data.shape[1:]} smaller than basis patch {p}")
        return sampling_operator(self.field(data), support)


def simblock_forward(f, block: SimBlock) -> FeatureMap:
    data = f.data if isinstance(f, FeatureMap) else np.asarray(f, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    x, _ = _block_forward(data, block)
    return FeatureMap(x, f.origin if isinstance(f, FeatureMap) else None)


def _block_forward(x: np.ndarray, block: SimBlock):
    S = block.operator(x)
    caches = []
    for layer in block.layers:
        if S.dtype != layer.weights.dtype:
            S = S.astype(layer.weights.dtype)
        out, cols = forward_array(x, layer, S)
        x = np.maximum(out, 0)
        caches.append((cols, out > 0))
    return x, (S, caches)


def avg_pool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    return x[:, : h // 2 * 2, : w // 2 * 2].reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def avg_unpool2(g: np.ndarray, shape) -> np.ndarray:
    c, h, w = shape
    out = np.zeros(shape, dtype=g.dtype)
    up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
    out[:, : up.shape[1], : up.shape[2]] = up
    return out


@dataclass
class SrenModel:
    blocks: list
    head_weights: np.ndarray  # (classes, channels)
    head_bias: np.ndarray
    pool_after: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.pool_after:
            # one 2x pool after the first block; a second would shrink 56 px maps below the basis patch
            self.pool_after = tuple(i == 0 and len(self.blocks) > 1 for i in range(len(self.blocks)))
        if len(self.pool_after) != len(self.blocks):
            raise InvalidArgument("pool_after needs one flag per block")
        last = self.blocks[-1].layers[-1].out_channels
        if self.head_weights.shape[1] != last or self.head_bias.shape != (self.head_weights.shape[0],):
            raise InvalidArgument("head does not match the last block's channels")

    @property
    def n_classes(self) -> int:
        return self.head_weights.shape[0]

    @property
    def is_baseline(self) -> bool:
        return all(b.geometry is None for b in self.blocks)

    def parameters(self) -> list[np.ndarray]:
        params = []
        for block in self.blocks:
            for layer in block.layers:
                params += [layer.weights, layer.bias]
        return params + [self.head_weights, self.head_bias]

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def astype(self, dtype) -> "SrenModel":
        for block in self.blocks:
            for layer in block.layers:
                layer.weights = layer.weights.astype(dtype)
                layer.bias = layer.bias.astype(dtype)
        self.head_weights = self.head_weights.astype(dtype)
        self.head_bias = self.head_bias.astype(dtype)
        return self


def build_model(geometry: GeometrySource | None, channels=(16, 32, 64), layers_per_block=2, support=3,
                in_channels=1, n_classes=10, pool_after=None, seed=0) -> SrenModel:
    """He-initialized stack; ``geometry=None`` builds the plain-conv baseline."""
    if not channels or layers_per_block < 1:
        raise InvalidParameter("need at least one block with one layer")
    rng = np.random.default_rng([seed, 0xB10C])
    blocks = []
    c_in = in_channels
    for c_out in channels:
        layers = []
        for _ in range(layers_per_block):
            layers.append(SimConvLayer.create(c_in, c_out, support, rng))
            c_in = c_out
        blocks.append(SimBlock(layers, geometry))
    limit = math.sqrt(6.0 / (c_in + n_classes))
    head = rng.uniform(-limit, limit, size=(n_classes, c_in))
    pool = tuple(pool_after) if pool_after is not None else ()
    meta = {"channels": list(channels), "layers_per_block": layers_per_block, "support": support,
            "in_channels": in_channels, "n_classes": n_classes, "seed": seed}
    return SrenModel(blocks, head, np.zeros(n_classes), pool, meta)


def _as_input(f, dtype) -> np.ndarray:
    data = f.data if isinstance(f, FeatureMap) else np.asarray(f)
    if data.ndim == 2:
        data = data[None]
    return data.astype(dtype, copy=False)


def features(model: SrenModel, f) -> np.ndarray:
    """Output of the last block (before the head)."""
    x = _as_input(f, model.head_weights.dtype)
    for block, pool in zip(model.blocks, model.pool_after):
        x, _ = _block_forward(x, block)
        if pool:
            x = avg_pool2(x)
    return x


def global_max(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = x.reshape(x.shape[0], -1)
    idx = np.argmax(flat, axis=1)
    return flat[np.arange(len(idx)), idx], idx


def forward(model: SrenModel, f) -> np.ndarray:
    """Logits: blocks -> spatial max per channel -> affine."""
    pooled, _ = global_max(features(model, f))
    return model.head_weights @ pooled + model.head_bias


def softmax_xent(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    loss = -float(z[label] - math.log(np.exp(z).sum()))
    p[label] -= 1.0
    return loss, p


def loss_and_grads(model: SrenModel, f, label: int):
    """Cross-entropy of one sample and gradients for ``model.parameters()`` (same order)."""
    x = _as_input(f, model.head_weights.dtype)
    caches = []
    for block, pool in zip(model.blocks, model.pool_after):
        x_in_shape = x.shape
        x, cache = _block_forward(x, block)
        pre_pool = x.shape
        if pool:
            x = avg_pool2(x)
        caches.append((cache, pool, pre_pool, x_in_shape))
    pooled, idx = global_max(x)
    logits = model.head_weights @ pooled + model.head_bias
    loss, d_logits = softmax_xent(logits, label)

    d_head_w = np.outer(d_logits, pooled)
    d_head_b = d_logits
    d_pooled = model.head_weights.T @ d_logits
    g = np.zeros(x.shape[0] * x.shape[1] * x.shape[2], dtype=x.dtype)
    g[np.arange(x.shape[0]) * (x.shape[1] * x.shape[2]) + idx] = d_pooled
    g = g.reshape(x.shape)

    grads = []
    n_blocks = len(model.blocks)
    for bi in range(n_blocks - 1, -1, -1):
        block = model.blocks[bi]
        (S, layer_caches), pool, pre_pool, _ = caches[bi]
        if pool:
            g = avg_unpool2(g, pre_pool)
        block_grads = []
        for li in range(len(block.layers) - 1, -1, -1):
            cols, mask = layer_caches[li]
            g = g * mask
            need_input = not (bi == 0 and li == 0)
            d_w, d_in, d_b = backward_array(cols, g, block.layers[li], S, need_input)
            block_grads = [d_w, d_b] + block_grads
            g = d_in
        grads = block_grads + grads
    return loss, logits, grads + [d_head_w, d_head_b]


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    learning_rate: float = 0.003
    weight_decay: float = 0.01
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidParameter("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate >= 0:
            raise InvalidParameter("learning rate must be non-negative")
        if self.precision not in ("f32", "f64"):
            raise InvalidParameter(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.wd:
                g = g + self.wd * p
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def train(model: SrenModel, dataset, config: TrainConfig, metrics_path=None, progress=None):
    """Minibatch Adam on softmax cross-entropy; returns (model, history rows)."""
    if len(dataset) == 0:
        raise InvalidArgument("empty training set")
    labels = np.asarray(dataset.labels)
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise InvalidArgument("labels out of range for the model head")
    model.astype(config.dtype)
    params = model.parameters()
    opt = Adam(params, config.learning_rate, weight_decay=config.weight_decay)
    history = []
    writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "acc"])
    try:
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))
            total, correct = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                acc_grads = None
                for i in batch:
                    loss, logits, grads = loss_and_grads(model, dataset.images[i], int(labels[i]))
                    if not math.isfinite(loss):
                        raise NumericalFailure(f"non-finite loss at epoch {epoch}, sample {int(i)}")
                    total += loss
                    correct += int(np.argmax(logits) == labels[i])
                    if acc_grads is None:
                        acc_grads = grads
                    else:
                        for a, g in zip(acc_grads, grads):
                            a += g
                scale = 1.0 / len(batch)
                acc_grads = [g * scale for g in acc_grads]
                if not all(np.all(np.isfinite(g)) for g in acc_grads):
                    raise NumericalFailure(f"non-finite gradient at epoch {epoch}")
                opt.step(acc_grads)
            row = {"epoch": epoch + 1, "loss": total / len(order), "acc": correct / len(order)}
            history.append(row)
            log.info("epoch %d loss %.4f acc %.4f", row["epoch"], row["loss"], row["acc"])
            if writer is not None:
                writer.writerow([row["epoch"], f"{row['loss']:.6f}", f"{row['acc']:.6f}"])
                fh.flush()
            if progress is not None:
                progress(row)
    finally:
        if writer is not None:
            fh.close()
    return model, history


def predict(model: SrenModel, images) -> np.ndarray:
    return np.array([int(np.argmax(forward(model, img))) for img in images], dtype=np.int64)


def evaluate(model: SrenModel, dataset) -> tuple[float, np.ndarray]:
    """Accuracy and per-class accuracy (NaN for classes absent from the set)."""
    pred = predict(model, dataset.images)
    labels = np.asarray(dataset.labels)
    per_class = np.full(model.n_classes, np.nan)
    for c in range(model.n_classes):
        sel = labels == c
        if sel.any():
            per_class[c] = float(np.mean(pred[sel] == c))
    return float(np.mean(pred == labels)) if len(labels) else float("nan"), per_class


def save_model(model: SrenModel, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geo = model.blocks[0].geometry
    manifest = {
        "schema": 1,
        "architecture": dict(model.meta, pool_after=list(model.pool_after), baseline=model.is_baseline,
                             quad_weight=model.blocks[0].layers[0].quad_weight),
        "geometry": geo.to_dict() if geo is not None else None,
        "dtype": str(model.head_weights.dtype),
        "tensors": [],
    }
    for bi, block in enumerate(model.blocks):
        for li, layer in enumerate(block.layers):
            for name, arr in (("weights", layer.weights), ("bias", layer.bias)):
                fname = f"block{bi}_layer{li}_{name}.srtn"
                write_srtn(out / fname, arr)
                manifest["tensors"].append(fname)
    write_srtn(out / "head_weights.srtn", model.head_weights)
    write_srtn(out / "head_bias.srtn", model.head_bias)
    manifest["tensors"] += ["head_weights.srtn", "head_bias.srtn"]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_model(in_dir) -> SrenModel:
    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    arch = manifest["architecture"]
    geo = None
    if manifest.get("geometry"):
        g = manifest["geometry"]
        grid = g["grid"]
        geo = GeometrySource.create(BasisConfig.from_dict(g["basis"]), grid["n_lambda"], grid["n_gamma"],
                                    tuple(grid["lambda_range"]), grid["conf_threshold"])
    support = square_support(arch["support"])
    blocks = []
    for bi in range(len(arch["channels"])):
        layers = []
        for li in range(arch["layers_per_block"]):
            w = read_srtn(d / f"block{bi}_layer{li}_weights.srtn")
            b = read_srtn(d / f"block{bi}_layer{li}_bias.srtn")
            layers.append(SimConvLayer(w, support, b, arch.get("quad_weight", 1.0)))
        blocks.append(SimBlock(layers, geo))
    meta = {k: arch[k] for k in ("channels", "layers_per_block", "support", "in_channels", "n_classes", "seed")}
    return SrenModel(blocks, read_srtn(d / "head_weights.srtn"), read_srtn(d / "head_bias.srtn"),
                     tuple(arch["pool_after"]), meta)
