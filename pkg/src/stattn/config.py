"""Plain-text configuration: UTF-8 `key = value` lines, `#` starts a comment.

Recognized keys
    arch          preset name (svit-s, svit-b, svit-l, tiny)
    res           input side length in pixels
    grids         4 comma-separated cell sizes, one per stage
    blocks        4 comma-separated block counts
    channels      4 comma-separated widths
    heads         4 comma-separated head counts
    n_iter        sampling iterations per attention op
    phantom_mode  literal | masked
    drop_path     stochastic depth rate
    lr            learning rate
    wd            weight decay
    steps         optimizer steps
    batch         batch size
    seed          RNG seed
    n_classes     class count (normally taken from the dataset, not config)
    pos_embed     cpe | ape | rpe | none

Architecture keys may either start from `arch = <preset>` and override
fields, or spell out blocks/channels/heads/grids in full. Checkpoint
sidecar files reuse this syntax to record the exact model layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from stattn.blocks import ArchConfig, preset
from stattn.errors import ConfigError

_ARCH_KEYS = frozenset(
    {"arch", "res", "grids", "blocks", "channels", "heads", "n_iter",
     "phantom_mode", "drop_path", "n_classes", "pos_embed"}
)
_TRAIN_KEYS = frozenset({"lr", "wd", "steps", "batch", "seed"})
ALLOWED_KEYS = _ARCH_KEYS | _TRAIN_KEYS


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 0.003
    wd: float = 0.05
    steps: int = 500
    batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.wd < 0:
            raise ConfigError(f"wd must be non-negative, got {self.wd}")
        if self.steps < 1 or self.batch < 1:
            raise ConfigError(f"steps and batch must be >= 1, got {self.steps}, {self.batch}")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected `key = value`, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: empty key or value")
        if key not in ALLOWED_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path: str | Path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    except UnicodeDecodeError as e:
        raise ConfigError(f"config {p} is not valid UTF-8: {e}") from e
    return parse_config_text(text, source=str(p))


def _int(values: dict[str, str], key: str) -> int:
    try:
        return int(values[key])
    except ValueError as e:
        raise ConfigError(f"{key} must be an integer, got {values[key]!r}") from e


def _float(values: dict[str, str], key: str) -> float:
    try:
        return float(values[key])
    except ValueError as e:
        raise ConfigError(f"{key} must be a number, got {values[key]!r}") from e


def _int4(values: dict[str, str], key: str) -> tuple[int, int, int, int]:
    parts = [p.strip() for p in values[key].split(",")]
    if len(parts) != 4:
        raise ConfigError(f"{key} must be 4 comma-separated integers, got {values[key]!r}")
    try:
        a, b, c, d = (int(p) for p in parts)
    except ValueError as e:
        raise ConfigError(f"{key} must be 4 comma-separated integers, got {values[key]!r}") from e
    return (a, b, c, d)


def arch_from_values(values: dict[str, str], **forced) -> ArchConfig:
    """Assemble an ArchConfig from parsed keys; `forced` fields win last
    (used by train to impose the dataset's resolution and class count)."""
    unknown = set(values) - ALLOWED_KEYS
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    kw = {}
    if "res" in values:
        kw["res"] = _int(values, "res")
    for key in ("grids", "blocks", "channels", "heads"):
        if key in values:
            kw[key] = _int4(values, key)
    if "n_iter" in values:
        kw["n_iter"] = _int(values, "n_iter")
        if kw["n_iter"] < 0:
            raise ConfigError(f"n_iter must be >= 0, got {kw['n_iter']}")
    if "phantom_mode" in values:
        pm = values["phantom_mode"]
        if pm not in ("literal", "masked"):
            raise ConfigError(f"phantom_mode must be literal or masked, got {pm!r}")
        kw["phantom_mode"] = pm
    if "drop_path" in values:
        kw["drop_path"] = _float(values, "drop_path")
    if "n_classes" in values:
        kw["n_classes"] = _int(values, "n_classes")
    if "pos_embed" in values:
        kw["pos_embed"] = values["pos_embed"]
    kw.update(forced)
    if "arch" in values:
        return preset(values["arch"], **kw)
    missing = [k for k in ("blocks", "channels", "heads", "grids") if k not in kw]
    if missing:
        raise ConfigError(f"no arch preset given and missing {missing}")
    return ArchConfig(**kw)


def train_from_values(values: dict[str, str]) -> TrainSettings:
    kw = {}
    if "lr" in values:
        kw["lr"] = _float(values, "lr")
    if "wd" in values:
        kw["wd"] = _float(values, "wd")
    for key in ("steps", "batch", "seed"):
        if key in values:
            kw[key] = _int(values, key)
    return TrainSettings(**kw)


def format_arch_config(cfg: ArchConfig) -> str:
    """Config text that rebuilds `cfg` exactly (checkpoint sidecar)."""

    def csv(t):
        return ",".join(str(x) for x in t)

    lines = [
        "# model layout written alongside a checkpoint; edit at your own risk",
        f"blocks = {csv(cfg.blocks)}",
        f"channels = {csv(cfg.channels)}",
        f"heads = {csv(cfg.heads)}",
        f"grids = {csv(cfg.grids)}",
        f"res = {cfg.res}",
        f"n_classes = {cfg.n_classes}",
        f"n_iter = {cfg.n_iter}",
        f"phantom_mode = {cfg.phantom_mode}",
        f"pos_embed = {cfg.pos_embed}",
    ]
    return "\n".join(lines) + "\n"


def write_sidecar(ckpt_path: str | Path, cfg: ArchConfig) -> Path:
    p = Path(str(ckpt_path) + ".conf")
    p.write_text(format_arch_config(cfg), encoding="utf-8")
    return p


def read_sidecar(ckpt_path: str | Path) -> ArchConfig:
    p = Path(str(ckpt_path) + ".conf")
    if not p.exists():
        raise ConfigError(
            f"no sidecar config {p}; cannot rebuild the model for this checkpoint"
        )
    return arch_from_values(read_config(p))
