"""Desk-scale training: synthetic data, loss, optimizers, and the loop.

The dataset is deliberately synthetic. Classes are separated by spatial
layout, not by color statistics, so a model must attend to the right
region to solve them:

    quadrant-blobs     class k brightens quadrant k (mod 4) with a smooth
                       bump over a dim noisy background
    striped-textures   class k draws stripes at orientation k*45 degrees

Generation is a pure function of (seed, index): each sample gets its own
numpy Generator seeded by the pair, so files are byte-identical across
runs and machines and per-sample generation could be parallelized.

Dataset file layout (all integers little-endian): magic "STDS", u16
version=1, u32 n_samples, u16 height, u16 width, u8 channels,
u8 n_classes, then per sample one u8 label followed by raw u8 pixels,
row-major, channel-last.

The loop is single-threaded, clips gradients at global norm 5.0, holds
the learning rate constant for the first 75% of steps and then decays it
linearly to 10%; both facts are disclosed in the returned report.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stattn.blocks import Model
from stattn.checkpoint import save_checkpoint
from stattn.config import TrainSettings, write_sidecar
from stattn.errors import ConfigError, DataError, NonFiniteError
from stattn.tensor import Tensor, add, mul, no_grad, softmax_lastdim, sum_

DATASET_MAGIC = b"STDS"
DATASET_VERSION = 1
GENERATOR_KINDS = ("quadrant-blobs", "striped-textures")
CLIP_NORM = 5.0


# -- synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 2
    per_class: int = 256
    height: int = 32
    width: int = 32
    channels: int = 3
    seed: int = 0
    kind: str = "quadrant-blobs"

    def __post_init__(self):
        if not 2 <= self.n_classes <= 10:
            raise ConfigError(f"n_classes must be in 2..10, got {self.n_classes}")
        if self.kind not in GENERATOR_KINDS:
            raise ConfigError(f"kind must be one of {GENERATOR_KINDS}, got {self.kind!r}")
        if self.per_class < 1:
            raise ConfigError(f"per_class must be >= 1, got {self.per_class}")
        if min(self.height, self.width) < 8 or self.channels not in (1, 3):
            raise ConfigError(
                f"images must be >= 8x8 with 1 or 3 channels, got "
                f"{self.height}x{self.width}x{self.channels}"
            )


@dataclass
class Dataset:
    """images: u8 [n, h, w, ch] channel-last; labels: u8 [n]."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DataError(f"images must be u8 [n,h,w,ch], got {self.images.shape} {self.images.dtype}")
        if len(self.labels) != len(self.images):
            raise DataError("labels and images disagree on sample count")

    def __len__(self) -> int:
        return len(self.images)

    def inputs(self, idx=None) -> np.ndarray:
        """f32 [n, ch, h, w] scaled to [0, 1]."""
        sel = self.images if idx is None else self.images[idx]
        return np.ascontiguousarray(sel.transpose(0, 3, 1, 2), dtype=np.float32) / 255.0


def _sample_quadrant_blobs(rng, label: int, h: int, w: int, ch: int) -> np.ndarray:
    # dim noisy background, then one smooth bright bump centered in the
    # class's quadrant; quadrant mean separation >= 0.3 by construction
    img = rng.uniform(0.05, 0.25, size=(h, w, ch))
    qy, qx = divmod(label % 4, 2)
    cy = (h // 4) + qy * (h // 2) + rng.uniform(-h / 16, h / 16)
    cx = (w // 4) + qx * (w // 2) + rng.uniform(-w / 16, w / 16)
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    sigma = min(h, w) / 5.0
    bump = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma * sigma))
    img += (0.85 + rng.uniform(-0.05, 0.05)) * bump[:, :, None]
    return np.clip(img, 0.0, 1.0)


def _sample_striped_textures(rng, label: int, h: int, w: int, ch: int) -> np.ndarray:
    theta = label * np.pi / 4.0
    period = 4.0 + rng.uniform(0.0, 2.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    coord = np.cos(theta) * xs + np.sin(theta) * ys
    stripes = 0.5 + 0.45 * np.sin(2 * np.pi * coord / period + phase)
    img = stripes[:, :, None] + rng.uniform(-0.05, 0.05, size=(h, w, ch))
    return np.clip(img, 0.0, 1.0)


_GENERATORS = {
    "quadrant-blobs": _sample_quadrant_blobs,
    "striped-textures": _sample_striped_textures,
}


def gen_dataset(spec: DatasetSpec) -> Dataset:
    """Balanced dataset with classes interleaved (sample i has label
    i mod n_classes), so any class-multiple prefix or suffix is balanced."""
    n = spec.n_classes * spec.per_class
    images = np.empty((n, spec.height, spec.width, spec.channels), dtype=np.uint8)
    labels = np.empty(n, dtype=np.uint8)
    make = _GENERATORS[spec.kind]
    for i in range(n):
        label = i % spec.n_classes
        rng = np.random.default_rng([spec.seed, i])
        img = make(rng, label, spec.height, spec.width, spec.channels)
        images[i] = np.round(img * 255.0).astype(np.uint8)
        labels[i] = label
    return Dataset(images, labels, spec.n_classes)


def save_dataset(path: str | Path, ds: Dataset) -> None:
    n, h, w, ch = ds.images.shape
    head = struct.pack("<4sHIHHBB", DATASET_MAGIC, DATASET_VERSION, n, h, w, ch, ds.n_classes)
    body = bytearray()
    for i in range(n):
        body.append(int(ds.labels[i]))
        body.extend(ds.images[i].tobytes())
    try:
        Path(path).write_bytes(head + bytes(body))
    except OSError as e:
        raise DataError(f"cannot write dataset {path}: {e}") from e


def load_dataset(path: str | Path) -> Dataset:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    head_size = struct.calcsize("<4sHIHHBB")
    if len(buf) < head_size:
        raise DataError("truncated dataset header", len(buf))
    magic, version, n, h, w, ch, n_classes = struct.unpack("<4sHIHHBB", buf[:head_size])
    if magic != DATASET_MAGIC:
        raise DataError(f"bad magic {magic!r}, want {DATASET_MAGIC!r}", 0)
    if version != DATASET_VERSION:
        raise DataError(f"unsupported dataset version {version}", 4)
    if n_classes < 2:
        raise DataError(f"dataset declares {n_classes} classes, need >= 2", head_size - 1)
    rec = 1 + h * w * ch
    need = head_size + n * rec
    if len(buf) != need:
        raise DataError(
            f"dataset size mismatch: header implies {need} bytes, file has {len(buf)}",
            min(need, len(buf)),
        )
    raw = np.frombuffer(buf, dtype=np.uint8, count=n * rec, offset=head_size).reshape(n, rec)
    labels = raw[:, 0].copy()
    bad = np.nonzero(labels >= n_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise DataError(
            f"sample {i} has label {labels[i]} >= n_classes {n_classes}",
            head_size + i * rec,
        )
    images = raw[:, 1:].reshape(n, h, w, ch).copy()
    return Dataset(images, labels, int(n_classes))


def split_holdout(ds: Dataset, n_hold: int) -> tuple[Dataset, Dataset]:
    """Last n_hold samples become the held-out split; interleaved labels
    keep both sides balanced when n_hold is a class multiple."""
    if not 0 < n_hold < len(ds):
        raise ConfigError(f"n_hold must be in 1..{len(ds) - 1}, got {n_hold}")
    cut = len(ds) - n_hold
    return (
        Dataset(ds.images[:cut], ds.labels[:cut], ds.n_classes),
        Dataset(ds.images[cut:], ds.labels[cut:], ds.n_classes),
    )


# -- loss -----------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the batch; labels are ints."""
    if logits.ndim != 2:
        raise DataError(f"logits must be [batch, classes], got {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise DataError(f"labels must be [{b}], got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(
            f"label out of range: {labels.min()}..{labels.max()} vs {k} classes"
        )
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    p = softmax_lastdim(logits)
    # -mean(log p[label]); log of softmax, stabilized inside softmax itself
    from stattn.tensor import log  # local import keeps the top list short

    picked = sum_(mul(log(p), Tensor(onehot)), axis=1)
    return mul(sum_(picked), -1.0 / b)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


# -- optimizers -------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw-style"
    lr: float = 0.01
    wd: float = 0.05
    steps: int = 500
    batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adamw-style"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0 and self.lr != 0.0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.wd < 0 or self.steps < 1 or self.batch < 1:
            raise ConfigError("wd must be >= 0 and steps/batch >= 1")

    @classmethod
    def from_settings(cls, s: TrainSettings, kind: str = "adamw-style") -> "OptimizerConfig":
        return cls(kind=kind, lr=s.lr, wd=s.wd, steps=s.steps, batch=s.batch, seed=s.seed)


class SgdMomentum:
    """Classic momentum; weight decay folded into the gradient for
    decaying parameters (norm gains/biases and position tables excluded
    by the caller's decay flags)."""

    def __init__(self, groups: list[tuple[str, Tensor, bool]], lr: float, wd: float, momentum: float = 0.9):
        self.groups = groups
        self.lr = lr
        self.wd = wd
        self.momentum = momentum
        self.velocity = [np.zeros_like(t.data) for _, t, _ in groups]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for v, (_, t, decay) in zip(self.velocity, self.groups):
            if t.grad is None:
                continue
            g = t.grad
            if decay and self.wd:
                g = g + self.wd * t.data
            v *= self.momentum
            v += g
            t.data = t.data - lr * v


class AdamWStyle:
    """Adam moments with bias correction and decoupled weight decay."""

    def __init__(
        self,
        groups: list[tuple[str, Tensor, bool]],
        lr: float,
        wd: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.groups = groups
        self.lr = lr
        self.wd = wd
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for _, t, _ in groups]
        self.v = [np.zeros_like(t.data) for _, t, _ in groups]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for m, v, (_, t, decay) in zip(self.m, self.v, self.groups):
            if t.grad is None:
                continue
            g = t.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if decay and self.wd:
                upd = upd + self.wd * t.data
            t.data = t.data - lr * upd


def make_optimizer(model: Model, cfg: OptimizerConfig):
    groups = model.param_groups()
    if cfg.kind == "sgd-momentum":
        return SgdMomentum(groups, cfg.lr, cfg.wd)
    return AdamWStyle(groups, cfg.lr, cfg.wd)


def clip_global_norm(params: list[Tensor], max_norm: float = CLIP_NORM) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm;
    returns the pre-clip norm."""
    total = 0.0
    for t in params:
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for t in params:
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


# -- loop -------------------------------------------------------------------------


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    final_train_acc: float = 0.0
    final_holdout_acc: float = 0.0
    best_step: int = -1
    best_holdout_acc: float = 0.0
    steps: int = 0
    seconds: float = 0.0
    notes: str = (
        f"gradients clipped at global norm {CLIP_NORM}; "
        "lr constant for 75% of steps then linear decay to 10%"
    )


def lr_at(step: int, total: int, base: float) -> float:
    """Constant for the first 75% of steps, then linear decay to 0.1x."""
    knee = int(0.75 * total)
    if step < knee or total <= knee:
        return base
    frac = (step - knee) / max(1, total - knee)
    return base * (1.0 - 0.9 * frac)


def evaluate(model: Model, ds: Dataset, batch: int = 64) -> tuple[float, float]:
    """(accuracy, mean loss) over the whole dataset in inference mode."""
    inputs = ds.inputs()
    total_correct = 0
    total_loss = 0.0
    with no_grad():
        for at in range(0, len(ds), batch):
            xb = inputs[at : at + batch]
            yb = ds.labels[at : at + batch].astype(np.int64)
            logits = model.forward(xb, training=False)
            total_correct += int((logits.data.argmax(axis=1) == yb).sum())
            total_loss += cross_entropy(logits, yb).item() * len(yb)
    return total_correct / len(ds), total_loss / len(ds)


def train_loop(
    model: Model,
    train_ds: Dataset,
    opt_cfg: OptimizerConfig,
    holdout_ds: Dataset | None = None,
    out_dir: str | Path | None = None,
    eval_every: int = 50,
    log_lines: list[str] | None = None,
) -> TrainReport:
    """Run the optimizer, track the best held-out accuracy, optionally
    write model.stwt (+ .conf sidecar) and metrics.log under out_dir.

    Aborts with NonFiniteError naming the step and lr if the loss leaves
    the reals. Bit-reproducible for a fixed (model seed, opt seed).
    """
    if model.cfg.n_classes != train_ds.n_classes:
        raise ConfigError(
            f"model has {model.cfg.n_classes} classes, dataset {train_ds.n_classes}"
        )
    rng = np.random.default_rng(opt_cfg.seed)
    opt = make_optimizer(model, opt_cfg)
    params = model.parameters()
    inputs = train_ds.inputs()
    labels = train_ds.labels.astype(np.int64)
    report = TrainReport(steps=opt_cfg.steps)
    lines = log_lines if log_lines is not None else []
    best_state: dict[str, np.ndarray] | None = None
    t0 = time.monotonic()

    for step in range(opt_cfg.steps):
        lr = lr_at(step, opt_cfg.steps, opt_cfg.lr)
        idx = rng.integers(0, len(train_ds), size=opt_cfg.batch)
        xb, yb = inputs[idx], labels[idx]
        try:
            logits = model.forward(xb, training=True, rng=rng)
            loss = cross_entropy(logits, yb)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NonFiniteError("loss is not finite")
            model.zero_grad()
            loss.backward()
        except NonFiniteError as e:
            raise NonFiniteError(
                f"training aborted at step {step} (lr {lr:.4g}): {e}"
            ) from e
        gnorm = clip_global_norm(params)
        opt.step(lr)
        acc = accuracy(logits.data, yb)
        report.losses.append(loss_val)
        report.grad_norms.append(gnorm)
        lines.append(f"{step},{loss_val:.6f},{acc:.4f}")

        last = step == opt_cfg.steps - 1
        if holdout_ds is not None and (last or (step + 1) % eval_every == 0):
            hold_acc, hold_loss = evaluate(model, holdout_ds)
            lines.append(f"# eval step={step} holdout_acc={hold_acc:.4f} holdout_loss={hold_loss:.6f}")
            if hold_acc >= report.best_holdout_acc:
                report.best_holdout_acc = hold_acc
                report.best_step = step
                best_state = {k: v.copy() for k, v in model.state_dict().items()}

    if best_state is not None:
        model.load_state(best_state)
    report.final_train_acc, _ = evaluate(model, train_ds)
    if holdout_ds is not None:
        report.final_holdout_acc, _ = evaluate(model, holdout_ds)
    report.seconds = time.monotonic() - t0
    lines.append(
        f"# final train_acc={report.final_train_acc:.4f} "
        f"holdout_acc={report.final_holdout_acc:.4f} seconds={report.seconds:.1f}"
    )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.stwt", model.state_dict())
        write_sidecar(out / "model.stwt", model.cfg)
        (out / "metrics.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return report
