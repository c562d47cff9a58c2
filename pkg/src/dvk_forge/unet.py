"""The 9x9x9 density-to-dose U-Net: construction, training, evaluation, checkpoints.

The graph lifts a density kernel onto a 27x27 plane, upsamples it, runs a
contracting and an expanding stack of valid 3x3 convolutions joined by one
concatenating skip edge, and folds the 27x27 sigmoid map back to 9x9x9.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .dosimetry import TISSUES, Dataset, split_tags
from .errors import DegenerateInputError, DvkError, FormatError, NumericalError, ShapeError
from .layers import (AvgPool, BatchNorm, CenterCrop, ConcatSkip, Conv2D, Dropout, LeakyReLU, Network, Reshape,
                     Sigmoid, Upsample)
from .losses import TRAINING_LOSSES, mae, mse, soft_iou
from .optim import Optimizer, RegSpec, apply_regularization, make_optimizer
from .tensor import NormalizationParams, decode_tensor, encode_tensor

# (conv index, filters) for the 3x3 stacks; C20 is the 1x1 head.
ENCODER = [(1, 8), (2, 8), (3, 16), (4, 16), (5, 32), (6, 32)]
BOTTLENECK = [(7, 32), (8, 32), (9, 64), (10, 64), (11, 32), (12, 32), (13, 32)]
DECODER = [(14, 32), (15, 16), (16, 16), (17, 8), (18, 8), (19, 4)]

# Reference table: (row, per-sample dims, printed parameter count).
TABLE_4_1 = [
    ("Eingang", (9, 9, 9), 0),
    ("Reshape", (27, 27, 1), 0),
    ("UpSampling-1", (54, 54, 1), 0),
    ("Conv2D-1", (52, 52, 8), 80),
    ("Conv2D-2", (50, 50, 8), 584),
    ("Conv2D-3", (48, 48, 16), 1168),
    ("Conv2D-4", (46, 46, 16), 2320),
    ("Conv2D-5", (44, 44, 32), 4640),
    ("Conv2D-6", (42, 42, 32), 9248),
    ("AVGPooling", (21, 21, 32), 0),
    ("Conv2D-7", (19, 19, 32), 9248),
    ("Conv2D-8", (17, 17, 32), 9248),
    ("Conv2D-9", (15, 15, 64), 18496),
    ("Conv2D-10", (13, 13, 64), 36928),
    ("Conv2D-11", (11, 11, 32), 18464),
    ("Conv2D-12", (9, 9, 32), 9248),
    ("Conv2D-13", (7, 7, 32), 9248),
    ("Dropout", None, 0),
    ("UpSampling-2", (42, 42, 32), 0),
    ("Concat", (39, 39, 32), 0),
    ("Conv2D-14", (37, 37, 32), 32800),
    ("Conv2D-15", (35, 35, 16), 4624),
    ("Conv2D-16", (33, 33, 16), 2320),
    ("Conv2D-17", (31, 31, 8), 1160),
    ("Conv2D-18", (29, 29, 8), 584),
    ("Conv2D-19", (27, 27, 4), 292),
    ("Conv2D-20", (27, 27, 1), 5),
    ("Reshape", (9, 9, 9), 0),
]
TABLE_TOTALS = {"total": 182017, "trainable": 180985, "nontrainable": 1032}


@dataclass(frozen=True)
class UNetSpec:
    width_divisor: int = 1
    alpha: float = 5.5
    drop_rate: float = 0.2
    init: str = "uniform"
    seed: int = 0
    l1: float = 0.005  # first convolution
    l2: float = 0.001  # every later convolution
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    def __post_init__(self):
        if self.width_divisor < 1:
            raise ValueError("width_divisor must be >= 1")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")
        if self.init not in ("uniform", "normal"):
            raise ValueError(f"unknown init {self.init!r}")

    def filters(self, n: int) -> int:
        return max(1, n // self.width_divisor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetSpec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _conv_block(spec: UNetSpec, idx: int, filters: int) -> list:
    reg = RegSpec("l1", spec.l1) if idx == 1 else RegSpec("l2", spec.l2)
    name = f"Conv2D-{idx}"
    return [
        Conv2D(spec.filters(filters), (3, 3), name=name, reg=reg, init=spec.init),
        LeakyReLU(spec.alpha, name=f"{name}/act"),
        BatchNorm(spec.bn_eps, spec.bn_momentum, name=f"{name}/bn"),
    ]


def build_unet(spec: UNetSpec | None = None) -> Network:
    spec = spec or UNetSpec()
    layers: list = [Reshape((27, 27, 1), name="Reshape"), Upsample((2, 2), name="UpSampling-1")]
    for idx, f in ENCODER:
        layers += _conv_block(spec, idx, f)
    skip_source = len(layers) - 1  # batch norm after C6
    layers.append(AvgPool((2, 2), (2, 2), name="AVGPooling"))
    for idx, f in BOTTLENECK:
        layers += _conv_block(spec, idx, f)
    layers += [
        Dropout(spec.drop_rate, name="Dropout"),
        Upsample((6, 6), name="UpSampling-2"),
        CenterCrop((39, 39), name="Crop"),
        ConcatSkip(skip_source, crop=True, name="Concat"),
    ]
    for idx, f in DECODER:
        layers += _conv_block(spec, idx, f)
    layers += [
        Conv2D(1, (1, 1), name="Conv2D-20", reg=RegSpec("l2", spec.l2), init=spec.init),
        Sigmoid(name="Conv2D-20/act"),
        Reshape((9, 9, 9), name="Reshape-out"),
    ]
    net = Network(layers, (9, 9, 9), seed=spec.seed)
    if net.output_shape != (9, 9, 9):
        raise ShapeError(f"reconstruction produced {net.output_shape}")
    net.spec = spec
    return net


def layer_shapes(net: Network) -> dict[str, tuple[int, ...]]:
    """Per-sample output shape of every named layer (block outputs under the conv name)."""
    return {layer.name: layer.out_shape for layer in net.layers}


@dataclass
class ParamCount:
    per_layer: list[tuple[str, int, int]]  # (name, trainable, non-trainable)
    trainable: int
    nontrainable: int
    table: dict = field(default_factory=lambda: dict(TABLE_TOTALS))

    @property
    def total(self) -> int:
        return self.trainable + self.nontrainable

    def conv(self) -> dict[str, int]:
        return {n: t for n, t, _ in self.per_layer if n.startswith("Conv2D-") and "/" not in n}


def count_params(net: Network) -> ParamCount:
    rows = [(l.name, l.n_trainable(), l.n_nontrainable()) for l in net.layers]
    return ParamCount(rows, sum(r[1] for r in rows), sum(r[2] for r in rows))


# -- configuration -----------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    optimizer: str = "nadam"
    beta1: float = 0.9
    beta2: float = 0.999
    nu: float = 0.999
    mu: float = 0.9
    epsilon: float = 1e-8
    mu_warmup: bool = False
    loss: str = "iou"
    patience: int = 15  # plateau halving
    min_delta: float = 1e-6
    lr_factor: float = 0.5
    stop_patience: int | None = None  # defaults to ``patience``
    stop_min_delta: float | None = None  # defaults to ``min_delta``
    max_epochs: int = 500
    seed: int = 0
    split: float = 0.7
    # architecture knobs, forwarded to UNetSpec by the CLI
    width_divisor: int = 1
    alpha: float = 5.5
    dropout: float = 0.2
    init: str = "uniform"
    bn_momentum: float = 0.99
    # after each epoch, replace BN running statistics by train-split statistics
    bn_recalibrate: bool = False
    recalibrate_samples: int = 512

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.patience < 1 or (self.stop_patience is not None and self.stop_patience < 1):
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.recalibrate_samples < 1:
            raise ValueError("recalibrate_samples must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 < self.split < 1:
            raise ValueError("split must lie in (0, 1)")
        if self.loss not in TRAINING_LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {sorted(TRAINING_LOSSES)}")

    @property
    def early_patience(self) -> int:
        return self.patience if self.stop_patience is None else self.stop_patience

    @property
    def early_min_delta(self) -> float:
        return self.min_delta if self.stop_min_delta is None else self.stop_min_delta

    def unet_spec(self) -> UNetSpec:
        return UNetSpec(width_divisor=self.width_divisor, alpha=self.alpha, drop_rate=self.dropout,
                        init=self.init, seed=self.seed, bn_momentum=self.bn_momentum)

    def make_optimizer(self) -> Optimizer:
        return make_optimizer(self.optimizer, self.lr, beta1=self.beta1, beta2=self.beta2, mu=self.mu,
                              nu=self.nu, eps=self.epsilon, mu_warmup=self.mu_warmup)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, raw: str, typ):
    if raw.lower() in ("none", "") and "None" in str(typ):
        return None
    if "bool" in str(typ):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if "int" in str(typ):
        v = float(raw)
        if v != int(v):
            raise ValueError(f"{name}: expected an integer, got {raw!r}")
        return int(v)
    if "float" in str(typ):
        return float(raw)
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are an error."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = (base or TrainConfig()).to_dict()
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {ln}: expected 'key = value'")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in types:
            raise FormatError(f"config line {ln}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, val, types[key])
        except ValueError as exc:
            raise FormatError(f"config line {ln}: {exc}") from None
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise FormatError(f"invalid config: {exc}") from None


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


# -- learning-rate schedule ----------------------------------------------------------


class PlateauSchedule:
    """One-time LR reduction on a plateau, then early stopping.

    An epoch counts as an improvement when the monitored loss drops by at
    least ``min_delta`` below the best value so far. After ``patience`` epochs
    without improvement the rate is multiplied by ``factor`` once; from then
    on, ``stop_patience`` further epochs without improvement end training.
    """

    def __init__(self, patience: int, min_delta: float, factor: float = 0.5,
                 stop_patience: int | None = None, stop_min_delta: float | None = None):
        self.patience, self.min_delta, self.factor = patience, min_delta, factor
        self.stop_patience = patience if stop_patience is None else stop_patience
        self.stop_min_delta = min_delta if stop_min_delta is None else stop_min_delta
        self.best = math.inf
        self.wait = 0
        self.reduced = False

    def update(self, loss: float) -> str:
        """Returns 'improved', 'wait', 'reduce' or 'stop'."""
        delta = self.stop_min_delta if self.reduced else self.min_delta
        if self.best - loss >= delta or self.best == math.inf:
            self.best = min(self.best, loss)
            self.wait = 0
            return "improved"
        self.wait += 1
        if not self.reduced and self.wait >= self.patience:
            self.reduced = True
            self.wait = 0
            return "reduce"
        if self.reduced and self.wait >= self.stop_patience:
            return "stop"
        return "wait"

    def state(self) -> dict:
        return {"best": self.best, "wait": self.wait, "reduced": self.reduced}


# -- checkpoints --------------------------------------------------------------------

CKPT_MAGIC = b"DVKC"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    spec: UNetSpec
    epoch: int
    best_val_loss: float
    tensors: dict[str, np.ndarray]  # params, buffers and optimizer slots, by block name
    bn_initialized: dict[str, bool]
    optimizer: dict = field(default_factory=dict)  # name + scalars
    metrics: dict = field(default_factory=dict)
    norm: dict = field(default_factory=dict)  # split -> field -> NormalizationParams dict
    config: dict = field(default_factory=dict)
    version: int = CKPT_VERSION


def capture(net: Network, spec: UNetSpec, epoch: int = 0, best_val_loss: float = math.inf,
            opt: Optimizer | None = None, metrics=None, norm=None, config=None) -> Checkpoint:
    tensors = {f"param/{k}": layer.params[p].copy() for k, layer, p in net.named_params()}
    tensors.update({f"buffer/{k}": layer.buffers[b].copy() for k, layer, b in net.named_buffers()})
    optinfo = {}
    if opt is not None:
        optinfo = {"name": opt.name, "scalars": opt.scalars()}
        for key, slots in opt.state.items():
            for slot, arr in slots.items():
                tensors[f"opt/{key}/{slot}"] = arr.copy()
    bn = {f"{i:02d}.{l.name}": l.initialized for i, l in enumerate(net.layers) if isinstance(l, BatchNorm)}
    norm_d = {s: {w: p.to_dict() for w, p in d.items()} for s, d in (norm or {}).items()}
    return Checkpoint(spec, epoch, best_val_loss, tensors, bn, optinfo, dict(metrics or {}), norm_d,
                      dict(config or {}))


def restore(net: Network, ckpt: Checkpoint, opt: Optimizer | None = None) -> Network:
    """Load parameters, running statistics and (optionally) optimizer state into ``net``."""
    for prefix, it, store in (("param", net.named_params(), "params"), ("buffer", net.named_buffers(), "buffers")):
        for key, layer, name in it:
            block = f"{prefix}/{key}"
            if block not in ckpt.tensors:
                raise FormatError(f"checkpoint is missing block {block!r}")
            arr = ckpt.tensors[block]
            cur = getattr(layer, store)[name]
            if arr.shape != cur.shape:
                raise FormatError(f"block {block!r} has shape {arr.shape}, network expects {cur.shape}")
            getattr(layer, store)[name] = arr.copy()
    for i, layer in enumerate(net.layers):
        if isinstance(layer, BatchNorm):
            layer.initialized = bool(ckpt.bn_initialized.get(f"{i:02d}.{layer.name}", False))
    if opt is not None and ckpt.optimizer:
        if ckpt.optimizer.get("name") != opt.name:
            raise FormatError(f"checkpoint optimizer {ckpt.optimizer.get('name')!r} != {opt.name!r}")
        opt.load_scalars(ckpt.optimizer["scalars"])
        opt.state = {}
        for block, arr in ckpt.tensors.items():
            if block.startswith("opt/"):
                key, slot = block[4:].rsplit("/", 1)
                opt.state.setdefault(key, {})[slot] = arr.copy()
    return net


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    return restore(build_unet(ckpt.spec), ckpt)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    header = {
        "spec": ckpt.spec.to_dict(),
        "epoch": ckpt.epoch,
        "best_val_loss": ckpt.best_val_loss,
        "bn_initialized": ckpt.bn_initialized,
        "optimizer": ckpt.optimizer,
        "metrics": ckpt.metrics,
        "norm": ckpt.norm,
        "config": ckpt.config,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(hdr)), hdr]
    for name, arr in ckpt.tensors.items():
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, encode_tensor(arr)]
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


def read_checkpoint_header(buf: bytes) -> tuple[int, dict, int]:
    """Returns (version, header dict, offset of the first tensor block)."""
    if len(buf) < 10 or buf[:4] != CKPT_MAGIC:
        raise FormatError("not a DVKC checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    end = 10 + hlen
    if end > len(buf):
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(buf[10:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    return version, header, end


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    version, h, off = read_checkpoint_header(buf)
    tensors = {}
    while off < len(buf):
        if off + 2 > len(buf):
            raise FormatError("truncated block name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        if off + nlen > len(buf):
            raise FormatError("truncated block name")
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        tensors[name], off = decode_tensor(buf, off)
    try:
        return Checkpoint(UNetSpec.from_dict(h["spec"]), int(h["epoch"]), float(h["best_val_loss"]), tensors,
                          {k: bool(v) for k, v in h["bn_initialized"].items()}, h.get("optimizer", {}),
                          h.get("metrics", {}), h.get("norm", {}), h.get("config", {}), version)
    except KeyError as exc:
        raise FormatError(f"checkpoint header lacks {exc}") from None


def checkpoint_norms(ckpt: Checkpoint) -> dict[str, dict[str, NormalizationParams]]:
    return {s: {w: NormalizationParams.from_dict(p) for w, p in d.items()} for s, d in ckpt.norm.items()}


# -- training ------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    train_iou: float
    val_iou: float
    train_mae: float
    val_mae: float
    train_mse: float
    val_mse: float

    COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "train_iou", "val_iou", "train_mae", "val_mae",
               "train_mse", "val_mse")

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, c))) for c in self.COLUMNS[1:]]


def batched_forward(net: Network, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Infer-mode forward in chunks."""
    if len(x) == 0:
        return np.zeros((0, *net.output_shape))
    return np.concatenate([net.predict(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def recalibrate_bn(net: Network, x: np.ndarray) -> None:
    """Overwrite every BN running mean/variance with the statistics that a
    train-mode pass over ``x`` produces (dropout off, parameters untouched)."""
    bns = [l for l in net.layers if isinstance(l, BatchNorm)]
    drops = [l for l in net.layers if isinstance(l, Dropout)]
    saved = [l.momentum for l in bns], [l.rate for l in drops], net.mode
    try:
        for l in bns:
            l.momentum = 0.0
        for l in drops:
            l.rate = 0.0
        net.train()
        net.forward(x)
    finally:
        for l, m in zip(bns, saved[0]):
            l.momentum = m
        for l, r in zip(drops, saved[1]):
            l.rate = r
        net.mode = saved[2]


def _scores(loss_fn, pred, target) -> tuple[float, float, float, float]:
    return (loss_fn(pred, target).value, soft_iou(pred, target).value, mae(pred, target).value,
            mse(pred, target).value)


def _ensure_split(dataset: Dataset, ratio: float, seed: int) -> Dataset:
    """Re-split when the dataset's train fraction disagrees with ``ratio``."""
    n = len(dataset)
    n_train = len(dataset.indices("train"))
    if n_train == int(round(ratio * n)) and dataset.norm:
        return dataset
    tags = split_tags(n, ratio, np.random.default_rng(seed))
    ds = Dataset(dataset.density, dataset.dose, list(dataset.labels), tags, dataset.seed)
    low = high = None
    for d in dataset.norm.values():
        low, high = d["density"].low, d["density"].high
    return ds.fit_norms(*((low, high) if low is not None else ()))


def train(net: Network, dataset: Dataset, config: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[Checkpoint, list[EpochRecord]]:
    """Fit ``net`` and return the best-validation checkpoint plus one record per epoch.

    Record 0 describes the untrained network; BN running statistics are seeded
    beforehand from one train-mode pass over the first batch (no update), or
    over up to ``recalibrate_samples`` train samples with ``bn_recalibrate``.
    """
    config.validate()
    spec = getattr(net, "spec", None) or config.unet_spec()
    dataset = _ensure_split(dataset, config.split, config.seed)
    xt, yt, _ = dataset.normalized("train")
    xv, yv, _ = dataset.normalized("val")
    if len(xt) == 0 or len(xv) == 0:
        raise DegenerateInputError("both train and val splits need at least one sample")
    if xt.shape[1:] != net.input_shape or yt.shape[1:] != net.output_shape:
        raise ShapeError(f"dataset samples {xt.shape[1:]} -> {yt.shape[1:]} do not fit the network "
                         f"{net.input_shape} -> {net.output_shape}")
    loss_fn = TRAINING_LOSSES[config.loss]
    opt = config.make_optimizer()
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng, drop_rng = np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])
    bs = config.batch_size

    calib = xt[:config.recalibrate_samples]
    if config.bn_recalibrate:
        recalibrate_bn(net, calib)
    else:
        net.train()
        net.forward(xt[:bs], drop_rng)

    def evaluate_epoch(epoch, lr, train_scores):
        pv = batched_forward(net, xv, bs)
        vs = [float(v) for v in _scores(loss_fn, pv, yv)]
        if not all(math.isfinite(v) for v in vs):
            raise NumericalError(f"epoch {epoch}: non-finite validation metrics {vs}")
        return EpochRecord(epoch, lr, train_scores[0], vs[0], train_scores[1], vs[1], train_scores[2], vs[2],
                           train_scores[3], vs[3])

    rec0 = evaluate_epoch(0, opt.lr, _scores(loss_fn, batched_forward(net, xt, bs), yt))
    records = [rec0]
    if on_epoch:
        on_epoch(rec0)
    sched = PlateauSchedule(config.patience, config.min_delta, config.lr_factor, config.early_patience,
                            config.early_min_delta)
    sched.update(rec0.val_loss)
    meta = {"norm": dataset.norm, "config": config.to_dict()}
    best = capture(net, spec, 0, rec0.val_loss, opt, metrics=asdict(rec0), **meta)

    for epoch in range(1, config.max_epochs + 1):
        net.train()
        order = shuffle_rng.permutation(len(xt))
        sums = np.zeros(4)
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            xb, yb = xt[idx], yt[idx]
            pred, trace = net.forward(xb, drop_rng)
            lv = loss_fn(pred, yb)
            if not math.isfinite(lv.value):
                raise NumericalError(f"epoch {epoch}, batch {start // bs}: loss is {lv.value}")
            net.backward(trace, lv.grad)
            apply_regularization(net)
            opt.step(net)
            sums += np.array(_scores(loss_fn, pred, yb)) * len(idx)
        if config.bn_recalibrate:
            recalibrate_bn(net, calib)
        rec = evaluate_epoch(epoch, opt.lr, [float(v) for v in sums / len(xt)])
        records.append(rec)
        if on_epoch:
            on_epoch(rec)
        if rec.val_loss < best.best_val_loss:
            best = capture(net, spec, epoch, rec.val_loss, opt, metrics=asdict(rec), **meta)
        action = sched.update(rec.val_loss)
        if action == "reduce":
            opt.lr *= config.lr_factor
        elif action == "stop":
            break
    return best, records


def fit_batch(net: Network, x: np.ndarray, y: np.ndarray, opt: Optimizer, steps: int, loss: str = "iou",
              seed: int = 0) -> list[float]:
    """Repeated optimisation on one fixed batch; returns the loss before each step."""
    loss_fn = TRAINING_LOSSES[loss]
    rng = np.random.default_rng(seed)
    net.train()
    out = []
    for _ in range(steps):
        pred, trace = net.forward(x, rng)
        lv = loss_fn(pred, y)
        if not math.isfinite(lv.value):
            raise NumericalError(f"loss is {lv.value}")
        out.append(lv.value)
        net.backward(trace, lv.grad)
        apply_regularization(net)
        opt.step(net)
    return out


def write_epoch_log(records, path) -> Path:
    path = Path(path)
    lines = [",".join(EpochRecord.COLUMNS)] + [",".join(r.row()) for r in records]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_epoch_log(path) -> list[EpochRecord]:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0].split(",") != list(EpochRecord.COLUMNS):
        raise FormatError(f"{path}: not an epoch log")
    out = []
    for r in rows[1:]:
        vals = r.split(",")
        out.append(EpochRecord(int(vals[0]), *(float(v) for v in vals[1:])))
    return out


# -- evaluation ---------------------------------------------------------------------

EVAL_CLASSES = ("bone", "lung", "kidney", "liver", "spleen")


@dataclass
class EvalReport:
    """metrics[split][row] = {"iou", "mae", "mse"}; rows are tissue classes plus "total"."""

    metrics: dict[str, dict[str, dict[str, float]]]
    counts: dict[str, dict[str, int]]

    def rows(self) -> list[str]:
        """The five tissue classes, any extra labels, then "total"."""
        seen = list(EVAL_CLASSES)
        for d in self.metrics.values():
            seen += [r for r in d if r not in seen]
        return [r for r in seen if r != "total"] + ["total"]

    def table(self) -> list[list[str]]:
        """Delimited grid: one row per class, columns split x metric."""
        splits = list(self.metrics)
        head = ["class"] + [f"{s}_{m}" for s in splits for m in ("iou", "mae", "mse")]
        body = []
        for row in self.rows():
            line = [row]
            for s in splits:
                cell = self.metrics[s].get(row)
                line += [repr(cell[m]) if cell else "" for m in ("iou", "mae", "mse")]
            body.append(line)
        return [head] + body


def _pooled(pred, target) -> dict[str, float]:
    return {"iou": soft_iou(pred, target).value, "mae": mae(pred, target).value, "mse": mse(pred, target).value}


def evaluate(model, dataset: Dataset, splits=("train", "val"), batch_size: int = 128) -> EvalReport:
    """Per-class and pooled IoU/MAE/MSE on each split's normalised data.

    ``model`` is a :class:`Network` or any callable mapping a density batch to
    a dose batch.
    """
    predict_fn = (lambda x: batched_forward(model, x, batch_size)) if isinstance(model, Network) else model
    metrics, counts = {}, {}
    for split in splits:
        x, y, labels = dataset.normalized(split)
        if len(x) == 0:
            continue
        for lab in labels:
            if lab not in TISSUES:
                raise DvkError(f"unknown tissue label {lab!r}")
        pred = np.asarray(predict_fn(x), dtype=np.float64)
        if pred.shape != y.shape:
            raise ShapeError(f"model output {pred.shape} does not match targets {y.shape}")
        lab_arr = np.array(labels)
        rows, cnt = {}, {}
        for cls in [c for c in EVAL_CLASSES if c in labels] + sorted(set(labels) - set(EVAL_CLASSES)):
            m = lab_arr == cls
            rows[cls] = _pooled(pred[m], y[m])
            cnt[cls] = int(m.sum())
        rows["total"] = _pooled(pred, y)
        cnt["total"] = len(labels)
        metrics[split], counts[split] = rows, cnt
    return EvalReport(metrics, counts)


def predict(net: Network, density, batch_size: int = 128) -> np.ndarray:
    """Infer-mode dose prediction for one (9,9,9) kernel or a batch of them."""
    x = np.asarray(density, dtype=np.float64)
    single = x.shape == net.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"expected kernels of shape {net.input_shape}, got {x.shape}")
    out = batched_forward(net, x, batch_size)
    return out[0] if single else out
