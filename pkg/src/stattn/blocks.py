"""Hierarchical vision backbone assembled around super-token attention.

Layout: a four-conv stem (stride 2,1,2,1; each conv followed by BN and GELU)
downsamples the image 4x, then four stages of transformer blocks separated by
stride-2 conv+BN patch mergers, then a 1x1 projection to a fixed width, BN,
swish, global average pooling, and a fully connected classifier.

Each block computes (pre-norm residuals):

    x = x + cpe(x)                 depthwise 3x3 positional conv
    y = x + sta(layer_norm(x))     super-token attention
    z = y + ffn(batch_norm(y))     1x1 expand -> depthwise 3x3 (+shortcut)
                                   -> GELU -> 1x1 reduce

Stages whose grid is 1x1 run plain global attention inside sta_forward.
Convolutions carry no bias anywhere in the backbone (a norm always follows
or the field list keeps them out); the classifier keeps its bias.

Position handling is a build option (pos_embed): "cpe" (default, the
depthwise conv above), "ape" (learned per-stage absolute tables added after
stem/merging, no cpe), "rpe" (learned relative bias added to attention
logits, no cpe), or "none".
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from stattn.errors import ConfigError, ShapeError
from stattn.sta import StaConfig, StaWeights, _trunc_normal, sta_forward
from stattn.tensor import (
    Tensor,
    add,
    as_tensor,
    batch_norm,
    conv2d,
    depthwise_conv3x3,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    reshape,
    swish,
    take_rows,
    transpose,
)

PRESET_NAMES = ("svit-s", "svit-b", "svit-l", "tiny")


@dataclass(frozen=True)
class ArchConfig:
    """Full architecture description; presets() cover the published layouts."""

    blocks: tuple[int, int, int, int]
    channels: tuple[int, int, int, int]
    heads: tuple[int, int, int, int]
    grids: tuple[int, int, int, int]
    res: int = 224
    n_classes: int = 1000
    in_channels: int = 3
    n_iter: int = 1
    phantom_mode: str = "literal"
    drop_path: float = 0.0
    pos_embed: str = "cpe"
    expansion: int = 4
    ffn_shortcut: bool = True
    proj_width: int = 1024

    def __post_init__(self):
        for name in ("blocks", "channels", "heads", "grids"):
            v = getattr(self, name)
            if len(v) != 4 or any(int(x) < 1 for x in v):
                raise ConfigError(f"{name} must be 4 positive ints, got {v}")
        if self.res % 4:
            raise ConfigError(f"res must be divisible by 4, got {self.res}")
        if self.pos_embed not in ("cpe", "ape", "rpe", "none"):
            raise ConfigError(f"unknown pos_embed {self.pos_embed!r}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError(f"drop_path must be in [0,1), got {self.drop_path}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        for s in range(4):
            if self.channels[s] % self.heads[s]:
                raise ConfigError(
                    f"stage {s}: channels {self.channels[s]} not divisible by heads {self.heads[s]}"
                )
            hs = self.stage_extent(s)
            if hs < 1:
                raise ConfigError(f"res {self.res} too small for stage {s}")
            if hs % self.grids[s]:
                raise ConfigError(
                    f"stage {s}: token map {hs}x{hs} not divisible by grid {self.grids[s]}"
                )

    def stage_extent(self, s: int) -> int:
        """Token map side length at stage s (stem /4, then /2 per merge)."""
        return self.res // 4 // (2**s)

    def sta_config(self, s: int) -> StaConfig:
        return StaConfig(
            grid_h=self.grids[s],
            grid_w=self.grids[s],
            heads=self.heads[s],
            n_iter=self.n_iter,
            phantom_mode=self.phantom_mode,
        )

    @property
    def stem_plan(self) -> tuple[int, int, int, int]:
        c1 = self.channels[0]
        return (c1 // 2, c1 // 2, c1, c1)


def preset(name: str, **overrides) -> ArchConfig:
    """Published layouts by name; keyword overrides replace fields."""
    table = {
        "svit-s": dict(
            blocks=(3, 5, 9, 3),
            channels=(64, 128, 320, 512),
            heads=(1, 2, 5, 8),
            grids=(8, 4, 1, 1),
            res=224,
        ),
        "svit-b": dict(
            blocks=(4, 6, 14, 6),
            channels=(96, 192, 384, 512),
            heads=(2, 3, 6, 8),
            grids=(8, 4, 1, 1),
            res=224,
        ),
        "svit-l": dict(
            blocks=(4, 7, 19, 8),
            channels=(96, 192, 448, 640),
            heads=(2, 3, 7, 10),
            grids=(8, 4, 1, 1),
            res=224,
        ),
        "tiny": dict(
            blocks=(1, 1, 2, 1),
            channels=(16, 32, 64, 128),
            heads=(1, 2, 4, 8),
            grids=(4, 2, 1, 1),
            res=32,
            n_classes=2,
        ),
    }
    if name not in table:
        raise ConfigError(f"unknown arch {name!r}; choose from {', '.join(PRESET_NAMES)}")
    kw = dict(table[name])
    kw.update(overrides)
    return ArchConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()})


# -- weight init ----------------------------------------------------------------


def _param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(data.astype(dtype), requires_grad=True)


def _init_pointwise(rng, shape, dtype) -> Tensor:
    """Truncated normal std 0.02: linear maps and 1x1 convs."""
    return _param(_trunc_normal(rng, shape, 0.02), dtype)


def _init_spatial(rng, shape, dtype) -> Tensor:
    """Fan-out-scaled normal for spatial convs: std = sqrt(2 / (kh*kw*cout))."""
    if len(shape) == 4:
        cout, _, kh, kw = shape
        fan_out = kh * kw * cout
    else:  # depthwise [c, 3, 3]: one output channel per group
        fan_out = shape[1] * shape[2]
    std = np.sqrt(2.0 / fan_out)
    return _param(rng.standard_normal(shape) * std, dtype)


class _Named:
    """Mixin: subclasses yield (name, tensor, kind) with kind param|buffer."""

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor, str]]:
        raise NotImplementedError


class BatchNorm(_Named):
    def __init__(self, c: int, dtype=np.float32):
        self.gain = _param(np.ones(c), dtype)
        self.bias = _param(np.zeros(c), dtype)
        self.running_mean = Tensor(np.zeros(c, dtype=dtype))
        self.running_var = Tensor(np.ones(c, dtype=dtype))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(
            x, self.gain, self.bias, self.running_mean, self.running_var, training
        )

    def named_tensors(self, prefix):
        yield f"{prefix}.gain", self.gain, "param"
        yield f"{prefix}.bias", self.bias, "param"
        yield f"{prefix}.mean", self.running_mean, "buffer"
        yield f"{prefix}.var", self.running_var, "buffer"


class ConvBN(_Named):
    """Bias-free conv followed by batch norm, optional GELU."""

    def __init__(self, cin, cout, k, stride, pad, rng, act: bool, dtype=np.float32):
        shape = (cout, cin, k, k)
        self.w = _init_pointwise(rng, shape, dtype) if k == 1 else _init_spatial(rng, shape, dtype)
        self.stride, self.pad, self.act = stride, pad, act
        self.bn = BatchNorm(cout, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = self.bn(conv2d(x, self.w, self.stride, self.pad), training)
        return gelu(out) if self.act else out

    def named_tensors(self, prefix):
        yield f"{prefix}.w", self.w, "param"
        yield from self.bn.named_tensors(f"{prefix}.bn")


class Stem(_Named):
    """Four 3x3 convs (stride 2,1,2,1), each conv + BN + GELU; maps /4."""

    def __init__(self, cin: int, plan: tuple[int, int, int, int], rng, dtype=np.float32):
        strides = (2, 1, 2, 1)
        self.convs = []
        prev = cin
        for c, s in zip(plan, strides):
            self.convs.append(ConvBN(prev, c, 3, s, 1, rng, act=True, dtype=dtype))
            prev = c

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for conv in self.convs:
            x = conv(x, training)
        return x

    def named_tensors(self, prefix):
        for i, conv in enumerate(self.convs):
            yield from conv.named_tensors(f"{prefix}.{i}")


class PatchMerging(_Named):
    """Stride-2 3x3 conv + BN: halves the map, changes width."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        self.conv = ConvBN(cin, cout, 3, 2, 1, rng, act=False, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.conv(x, training)

    def named_tensors(self, prefix):
        yield from self.conv.named_tensors(f"{prefix}")


def _rpe_index(p: int, q: int) -> np.ndarray:
    """[m*m] flat index into a (2p-1)*(2q-1) relative-offset table."""
    ys, xs = np.divmod(np.arange(p * q), q)
    dy = ys[:, None] - ys[None, :] + (p - 1)
    dx = xs[:, None] - xs[None, :] + (q - 1)
    return (dy * (2 * q - 1) + dx).reshape(-1)


class SttBlock(_Named):
    """One transformer block: CPE + STA + ConvFFN with pre-norm residuals."""

    def __init__(
        self,
        c: int,
        sta_cfg: StaConfig,
        extent: int,
        rng,
        expansion: int = 4,
        pos_embed: str = "cpe",
        ffn_shortcut: bool = True,
        dtype=np.float32,
    ):
        self.c = c
        self.sta_cfg = sta_cfg
        self.pos_embed = pos_embed
        self.ffn_shortcut = ffn_shortcut
        hidden = expansion * c
        self.cpe_w = _init_spatial(rng, (c, 3, 3), dtype) if pos_embed == "cpe" else None
        self.ln_gain = _param(np.ones(c), dtype)
        self.ln_bias = _param(np.zeros(c), dtype)
        self.attn = StaWeights.init(c, rng, dtype=dtype)
        self.bn = BatchNorm(c, dtype)
        self.ffn_expand = _init_pointwise(rng, (hidden, c, 1, 1), dtype)
        self.ffn_dw = _init_spatial(rng, (hidden, 3, 3), dtype)
        self.ffn_reduce = _init_pointwise(rng, (c, hidden, 1, 1), dtype)
        self.rpe_table = None
        self._rpe_idx = None
        if pos_embed == "rpe":
            if sta_cfg.grid_h == 1 and sta_cfg.grid_w == 1:
                p = q = extent
            else:
                p, q = extent // sta_cfg.grid_h, extent // sta_cfg.grid_w
            self.rpe_table = _param(
                _trunc_normal(rng, ((2 * p - 1) * (2 * q - 1), sta_cfg.heads), 0.02), dtype
            )
            self._rpe_idx = _rpe_index(p, q)
            self._rpe_m = p * q

    def _rel_bias(self):
        if self.rpe_table is None:
            return None
        m = self._rpe_m
        bias = take_rows(self.rpe_table, self._rpe_idx)  # [m*m, heads]
        return transpose(reshape(bias, (m, m, self.sta_cfg.heads)), (2, 0, 1))

    def conv_ffn(self, x: Tensor) -> Tensor:
        h = conv2d(x, self.ffn_expand)
        d = depthwise_conv3x3(h, self.ffn_dw)
        h = add(h, d) if self.ffn_shortcut else d
        return conv2d(gelu(h), self.ffn_reduce)

    def __call__(
        self, x: Tensor, training: bool, drop_rate: float = 0.0, rng=None
    ) -> Tensor:
        if self.cpe_w is not None:
            x = add(x, depthwise_conv3x3(x, self.cpe_w))
        attn = sta_forward(
            layer_norm(x, self.ln_gain, self.ln_bias),
            self.sta_cfg,
            self.attn,
            rel_bias=self._rel_bias(),
        )
        y = add(x, _drop_path(attn, drop_rate, training, rng))
        f = self.conv_ffn(self.bn(y, training))
        return add(y, _drop_path(f, drop_rate, training, rng))

    def named_tensors(self, prefix):
        if self.cpe_w is not None:
            yield f"{prefix}.cpe.w", self.cpe_w, "param"
        yield f"{prefix}.ln.gain", self.ln_gain, "param"
        yield f"{prefix}.ln.bias", self.ln_bias, "param"
        yield f"{prefix}.attn.wq", self.attn.w_q, "param"
        yield f"{prefix}.attn.wk", self.attn.w_k, "param"
        yield f"{prefix}.attn.wv", self.attn.w_v, "param"
        yield f"{prefix}.attn.wo", self.attn.w_o, "param"
        yield from self.bn.named_tensors(f"{prefix}.bn")
        yield f"{prefix}.ffn.expand.w", self.ffn_expand, "param"
        yield f"{prefix}.ffn.dw.w", self.ffn_dw, "param"
        yield f"{prefix}.ffn.reduce.w", self.ffn_reduce, "param"
        if self.rpe_table is not None:
            yield f"{prefix}.rpe.table", self.rpe_table, "param"


def _drop_path(t: Tensor, rate: float, training: bool, rng) -> Tensor:
    """Per-sample stochastic depth on a residual branch."""
    if not training or rate <= 0.0:
        return t
    if rng is None:
        raise ConfigError("drop_path > 0 needs an rng in training mode")
    b = t.shape[0]
    keep = (rng.random((b, 1, 1, 1)) >= rate).astype(t.dtype.type) / (1.0 - rate)
    return mul(t, Tensor(keep))


class Head(_Named):
    """1x1 projection + BN + swish, global average pool, FC classifier."""

    def __init__(self, cin, width, n_classes, rng, dtype=np.float32):
        self.proj = _init_pointwise(rng, (width, cin, 1, 1), dtype)
        self.bn = BatchNorm(width, dtype)
        self.fc_w = _init_pointwise(rng, (width, n_classes), dtype)
        self.fc_b = _param(np.zeros(n_classes), dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = swish(self.bn(conv2d(x, self.proj), training))
        pooled = mean(h, axis=(2, 3))  # [b, width]
        return add(matmul(pooled, self.fc_w), self.fc_b)

    def named_tensors(self, prefix):
        yield f"{prefix}.proj.w", self.proj, "param"
        yield from self.bn.named_tensors(f"{prefix}.bn")
        yield f"{prefix}.fc.w", self.fc_w, "param"
        yield f"{prefix}.fc.b", self.fc_b, "param"


class Model(_Named):
    """The assembled backbone plus classifier; construct via build_model."""

    def __init__(self, cfg: ArchConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dtype = dtype
        self.stem = Stem(cfg.in_channels, cfg.stem_plan, rng, dtype)
        self.stages: list[list[SttBlock]] = []
        self.mergers: list[PatchMerging] = []
        self.ape: list[Tensor] = []
        total_blocks = sum(cfg.blocks)
        rates = np.linspace(0.0, cfg.drop_path, total_blocks) if total_blocks > 1 else [0.0]
        self._drop_rates: list[list[float]] = []
        bi = 0
        for s in range(4):
            c = cfg.channels[s]
            extent = cfg.stage_extent(s)
            if s > 0:
                self.mergers.append(PatchMerging(cfg.channels[s - 1], c, rng, dtype))
            if cfg.pos_embed == "ape":
                self.ape.append(
                    _param(_trunc_normal(rng, (1, c, extent, extent), 0.02), dtype)
                )
            stage = []
            stage_rates = []
            for _ in range(cfg.blocks[s]):
                stage.append(
                    SttBlock(
                        c,
                        cfg.sta_config(s),
                        extent,
                        rng,
                        expansion=cfg.expansion,
                        pos_embed=cfg.pos_embed,
                        ffn_shortcut=cfg.ffn_shortcut,
                        dtype=dtype,
                    )
                )
                stage_rates.append(float(rates[bi]))
                bi += 1
            self.stages.append(stage)
            self._drop_rates.append(stage_rates)
        self.head = Head(cfg.channels[3], cfg.proj_width, cfg.n_classes, rng, dtype)

    # -- forward ---------------------------------------------------------

    def forward(self, x, training: bool = False, rng=None) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected [b,{self.cfg.in_channels},H,W], got {x.shape}")
        if x.shape[2] != self.cfg.res or x.shape[3] != self.cfg.res:
            raise ShapeError(f"expected {self.cfg.res}x{self.cfg.res} input, got {x.shape}")
        h = self.stem(x, training)
        for s in range(4):
            if s > 0:
                h = self.mergers[s - 1](h, training)
            if self.ape:
                h = add(h, self.ape[s])
            for blk, rate in zip(self.stages[s], self._drop_rates[s]):
                h = blk(h, training, rate, rng)
        return self.head(h, training)

    __call__ = forward

    def stage_input(self, x, stage: int, training: bool = False) -> Tensor:
        """Token map entering `stage` (0-based), after merging/APE."""
        x = as_tensor(x)
        h = self.stem(x, training)
        for s in range(stage + 1):
            if s > 0:
                h = self.mergers[s - 1](h, training)
            if self.ape:
                h = add(h, self.ape[s])
            if s == stage:
                return h
            for blk, rate in zip(self.stages[s], self._drop_rates[s]):
                h = blk(h, training, rate, None)
        raise ConfigError(f"stage must be 0..3, got {stage}")

    def sta_inspect(self, x, stage: int):
        """(tokens entering the first block's attention, cfg, weights, rel bias).

        Reproduces exactly what stage `stage`'s first block feeds to its
        attention: CPE residual (when present) then layer norm.
        """
        h = self.stage_input(x, stage)
        blk = self.stages[stage][0]
        if blk.cpe_w is not None:
            h = add(h, depthwise_conv3x3(h, blk.cpe_w))
        tokens = layer_norm(h, blk.ln_gain, blk.ln_bias)
        return tokens, blk.sta_cfg, blk.attn, blk._rel_bias()

    # -- parameter bookkeeping --------------------------------------------

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor, str]]:
        p = prefix or "model"
        yield from self.stem.named_tensors(f"{p}.stem")
        for s in range(4):
            if s > 0:
                yield from self.mergers[s - 1].named_tensors(f"{p}.merge.{s - 1}")
            if self.ape:
                yield f"{p}.ape.{s}", self.ape[s], "param"
            for i, blk in enumerate(self.stages[s]):
                yield from blk.named_tensors(f"{p}.stage.{s}.block.{i}")
        yield from self.head.named_tensors(f"{p}.head")

    def parameters(self) -> list[Tensor]:
        return [t for _, t, kind in self.named_tensors() if kind == "param"]

    def param_groups(self) -> list[tuple[str, Tensor, bool]]:
        """(name, tensor, decay): norm gains/biases and position tables
        are excluded from weight decay."""
        out = []
        for name, t, kind in self.named_tensors():
            if kind != "param":
                continue
            no_decay = (
                ".ln." in name
                or ".bn." in name
                or ".ape." in name
                or ".rpe." in name
            )
            out.append((name, t, not no_decay))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t, _ in self.named_tensors()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        mine = {name: t for name, t, _ in self.named_tensors()}
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise ConfigError(
                f"checkpoint does not match model: missing {missing[:3]}..., extra {extra[:3]}..."
                if len(missing) + len(extra) > 6
                else f"checkpoint does not match model: missing {missing}, extra {extra}"
            )
        for name, t in mine.items():
            arr = state[name]
            if tuple(arr.shape) != t.shape:
                raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(t.data.dtype)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def build_model(cfg: ArchConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Construct and initialize the full model deterministically from seed."""
    return Model(cfg, seed=seed, dtype=dtype)


def with_overrides(cfg: ArchConfig, **kw) -> ArchConfig:
    return replace(cfg, **kw)
