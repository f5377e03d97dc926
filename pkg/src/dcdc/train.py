"""Desk-scale training: synthetic oriented textures, SGD with momentum,
linear warmup followed by cosine annealing, softmax cross-entropy."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as A
from .network import ModelSpec, build_model
from .tensor import Rng, read_tensor, write_tensor

FAMILIES = ("parallel", "rings", "spiral")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: int = 1
    warmup_factor: float = 0.001
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs, warmup_epochs must be >= 0 and batch_size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 5000
    n_val: int = 1000
    classes: int = 3
    size: int = 32
    channels: int = 1
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.classes <= len(FAMILIES):
            raise ValueError(f"classes must be in 1..{len(FAMILIES)}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


class TrainingDiverged(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# schedule, optimizer, loss
# --------------------------------------------------------------------------


def lr_schedule(base_lr: float, step: int, total_steps: int, warmup_steps: int = 0,
                warmup_factor: float = 0.001) -> float:
    """Linear warmup from ``warmup_factor * base_lr`` to ``base_lr``, then cosine to 0."""
    if step < warmup_steps:
        return base_lr * (warmup_factor + (1.0 - warmup_factor) * step / warmup_steps)
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def sgd_step(weights: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4, no_decay=frozenset()):
    """One momentum step: v <- mu v + g + wd w; w <- w - lr v.

    Returns new ``(weights, velocity)`` dicts; inputs are not modified.  Names in
    ``no_decay`` (batch-norm affine parameters) skip weight decay.
    """
    if set(weights) != set(grads):
        missing = sorted(set(weights) ^ set(grads))
        raise KeyError(f"weights and grads keyed differently: {missing[:5]}")
    new_w, new_v = {}, {}
    for name, w in weights.items():
        g = grads[name]
        if name not in no_decay and weight_decay:
            g = g + weight_decay * w
        v = momentum * velocity[name] + g if name in velocity else g
        new_v[name] = v
        new_w[name] = w - lr * v
    return new_w, new_v


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean loss and its gradient (softmax - onehot) / B."""
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - log_norm
    loss = -float(logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


# --------------------------------------------------------------------------
# synthetic textures
# --------------------------------------------------------------------------


def texture(family: str, rng: Rng, size: int = 32, noise: float = 0.5) -> np.ndarray:
    """One stripe image whose local orientation follows the family's layout.

    parallel: straight stripes at a random angle.  rings: concentric circles
    around a random centre.  spiral: multi-arm spiral around a random centre.
    Period, phase, centre and contrast are random; Gaussian noise is added.
    """
    u = rng.uniform((8,))
    period = 4.0 + 4.0 * u[0]
    phase = 2 * math.pi * u[1]
    cy, cx = (size - 1) / 2 + (u[2] - 0.5) * size / 2, (size - 1) / 2 + (u[3] - 0.5) * size / 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if family == "parallel":
        theta = math.pi * u[4]
        phi = (dx * math.cos(theta) + dy * math.sin(theta)) / period
    elif family == "rings":
        phi = np.hypot(dx, dy) / period
    elif family == "spiral":
        arms = (3 + int(u[4] * 4)) * (1 if u[5] < 0.5 else -1)
        phi = np.hypot(dx, dy) / period + arms * np.arctan2(dy, dx) / (2 * math.pi)
    else:
        raise ValueError(f"unknown family {family!r}")
    contrast = 0.5 + u[6]
    img = contrast * np.cos(2 * math.pi * phi + phase)
    return img + noise * rng.normal((size, size))


@dataclass
class SyntheticTextureSet:
    images: np.ndarray    # [N, C, H, W]
    labels: np.ndarray    # [N] int64
    n_train: int
    classes: int

    @property
    def train(self):
        return self.images[:self.n_train], self.labels[:self.n_train]

    @property
    def val(self):
        return self.images[self.n_train:], self.labels[self.n_train:]

    def save(self, out_dir) -> None:
        """``images.dcdc`` (float32 tensor) plus ``labels.txt`` (index, label, family, split)."""
        os.makedirs(out_dir, exist_ok=True)
        write_tensor(os.path.join(out_dir, "images.dcdc"), self.images.astype(np.float32))
        with open(os.path.join(out_dir, "labels.txt"), "w", encoding="utf-8") as f:
            for i, y in enumerate(self.labels):
                split = "train" if i < self.n_train else "val"
                f.write(f"{i}\t{int(y)}\t{FAMILIES[int(y)]}\t{split}\n")

    @classmethod
    def load(cls, out_dir) -> "SyntheticTextureSet":
        images = read_tensor(os.path.join(out_dir, "images.dcdc"))
        labels, n_train = [], 0
        with open(os.path.join(out_dir, "labels.txt"), encoding="utf-8") as f:
            for line in f:
                _, y, _, split = line.rstrip("\n").split("\t")
                labels.append(int(y))
                n_train += split == "train"
        labels = np.asarray(labels, dtype=np.int64)
        return cls(images, labels, n_train, int(labels.max()) + 1 if len(labels) else 0)


def make_dataset(cfg: DataConfig = DataConfig()) -> SyntheticTextureSet:
    """Balanced classes (label = index mod K) in both splits; sample i uses its own RNG stream."""
    root = Rng(cfg.seed)
    n = cfg.n_train + cfg.n_val
    images = np.empty((n, cfg.channels, cfg.size, cfg.size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        local = i if i < cfg.n_train else i - cfg.n_train
        y = local % cfg.classes
        rng = root.spawn(i)
        img = texture(FAMILIES[y], rng, cfg.size, cfg.noise)
        images[i] = img[None]
        if cfg.channels == 3:
            images[i] = img[None] * (0.75 + 0.5 * rng.uniform((3, 1, 1)))
        labels[i] = y
    return SyntheticTextureSet(images, labels, cfg.n_train, cfg.classes)


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


METRIC_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_acc")


@dataclass
class TrainResult:
    graph: A.LayerGraph
    metrics: list[dict] = field(default_factory=list)


def _batches(n, size):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def evaluate(graph, x, y, batch_size=256, training=False):
    """(mean loss, accuracy); running statistics are never updated here."""
    total, correct = 0.0, 0
    for a, b in _batches(len(x), batch_size):
        logits, _ = A.forward(graph, x[a:b], training=training, update_stats=False)
        loss, _ = softmax_cross_entropy(logits.astype(np.float64), y[a:b])
        total += loss * (b - a)
        correct += int((logits.argmax(axis=1) == y[a:b]).sum())
    n = max(len(x), 1)
    return total / n, correct / n


def _check_loss(loss, graph, epoch, step, lr):
    if math.isfinite(loss):
        return
    params = graph.named_parameters()
    bad = [k for k, v in params.items() if not np.all(np.isfinite(v))]
    big = max(params, key=lambda k: float(np.abs(params[k]).max()))
    raise TrainingDiverged(
        f"non-finite loss at epoch {epoch} step {step} (lr={lr:.3g}); "
        f"non-finite params: {bad[:3] or 'none'}; largest |param| in {big} "
        f"({float(np.abs(params[big]).max()):.3g})")


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train(model: ModelSpec | A.LayerGraph, cfg: TrainConfig, data: SyntheticTextureSet,
          out_dir=None, log=None) -> TrainResult:
    """Train and return the graph plus per-epoch metrics.

    Row 0 evaluates the initial weights (train split in training mode without
    statistics updates).  With ``out_dir`` writes ``metrics.csv`` and
    ``checkpoint.dcdc`` (+ manifest) there.
    """
    dtype = np.dtype(cfg.dtype)
    graph = model if isinstance(model, A.LayerGraph) else build_model(model, Rng(cfg.seed), dtype)
    graph.astype(dtype)
    xtr, ytr = data.train
    xva, yva = data.val
    xtr, xva = xtr.astype(dtype), xva.astype(dtype)
    if xtr.shape[0] == 0:
        raise ValueError("empty training split")
    graph.shapes((1,) + xtr.shape[1:])

    steps_per_epoch = math.ceil(len(xtr) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    no_decay = graph.no_decay()
    velocity: dict = {}
    order_rng = Rng(cfg.seed).spawn(0xDA7A)

    loss0, acc0 = evaluate(graph, xtr, ytr, cfg.batch_size, training=True)
    _check_loss(loss0, graph, 0, 0, 0.0)
    rows = [{"epoch": 0, "lr": lr_schedule(cfg.lr, 0, total, warm, cfg.warmup_factor) if total else 0.0,
             "train_loss": loss0, "train_acc": acc0,
             "val_acc": evaluate(graph, xva, yva)[1] if len(xva) else float("nan")}]
    if log:
        log(rows[-1])
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.spawn(epoch).permutation(len(xtr))
        loss_sum, correct, lr = 0.0, 0, 0.0
        for a, b in _batches(len(xtr), cfg.batch_size):
            idx = perm[a:b]
            xb, yb = xtr[idx], ytr[idx]
            logits, tape = A.forward(graph, xb, training=True, update_stats=True)
            loss, dlogits = softmax_cross_entropy(logits.astype(np.float64), yb)
            lr = lr_schedule(cfg.lr, step, total, warm, cfg.warmup_factor)
            _check_loss(loss, graph, epoch, step, lr)
            grads, _ = A.backward(tape, dlogits.astype(dtype))
            params = graph.named_parameters()
            new_w, velocity = sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay, no_decay)
            for k, w in new_w.items():
                params[k][...] = w
            loss_sum += loss * (b - a)
            correct += int((logits.argmax(axis=1) == yb).sum())
            step += 1
        rows.append({"epoch": epoch, "lr": lr, "train_loss": loss_sum / len(xtr),
                     "train_acc": correct / len(xtr),
                     "val_acc": evaluate(graph, xva, yva)[1] if len(xva) else float("nan")})
        if log:
            log(rows[-1])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
        A.save_checkpoint(graph, os.path.join(out_dir, "checkpoint.dcdc"))
    return TrainResult(graph, rows)
