"""Analytic parameter and complexity accounting.

A "FLOP" here is one multiply-accumulate: an [N,K]x[K,M] matmul costs
N*K*M. This convention halves naive multiply+add counts; it is stated in
the report header. Softmax, normalization, activations, pooling, and
residual adds are excluded from the counts and listed in the report's
`unmodeled` note.

Attention cost model per stage (N tokens, width C, m super tokens):

    sampling (sparse, per iteration)   19*N*C
    attention over super tokens        2*m^2*C + 4*m*C^2
    upsampling                          9*N*C
    total                              2*m^2*C + 4*m*C^2 + 28*N*C

Stages with a 1x1 grid run global attention instead: 2*N^2*C + 4*N*C^2.
Parameter counts are exact integers derived from weight shapes and are
asserted elsewhere to match built models tensor for tensor.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

from stattn.blocks import ArchConfig
from stattn.errors import ConfigError

UNMODELED = (
    "softmax, layer/batch norm, GELU/swish, pooling, and residual adds are "
    "not counted; one FLOP = one multiply-accumulate"
)


def _check_nonneg(**kw: int) -> None:
    for name, v in kw.items():
        if int(v) != v or v < 0:
            raise ConfigError(f"{name} must be a non-negative integer, got {v!r}")


def flops_sts_dense(n: int, c: int, m: int, n_iter: int) -> int:
    """Dense association cost: every token against every super token,
    both directions, n_iter rounds: 2*n_iter*m*N*C."""
    _check_nonneg(n=n, c=c, m=m, n_iter=n_iter)
    return 2 * n_iter * m * int(n) * c


def flops_sts_sparse(n: int, c: int) -> int:
    """Sparse sampling cost: pooling NC, 9-neighbor association 9NC,
    update 9NC; total 19NC."""
    _check_nonneg(n=n, c=c)
    return 19 * int(n) * c


def flops_gsa(n: int, c: int) -> int:
    """Global self-attention: 2*N^2*C (logits + weighted sum) + 4*N*C^2
    (q, k, v, output projections)."""
    _check_nonneg(n=n, c=c)
    n = int(n)
    return 2 * n * n * c + 4 * n * c * c


def flops_sta(n: int, c: int, m: int) -> int:
    """Attention over m super tokens plus sparse sampling and upsampling:
    2*m^2*C + 4*m*C^2 + 28*N*C. The 28NC term is 19NC sampling + 9NC
    upsampling, so sampling is already included; do not add
    flops_sts_sparse on top."""
    _check_nonneg(n=n, c=c, m=m)
    n, m = int(n), int(m)
    return 2 * m * m * c + 4 * m * c * c + 28 * n * c


@dataclass(frozen=True)
class FlopsRow:
    component: str
    params: int
    macs: int
    formula: str


@dataclass
class FlopsReport:
    arch: str
    res: int
    rows: list[FlopsRow] = field(default_factory=list)
    buffer_total: int = 0

    @property
    def params_total(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs_total(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def state_total(self) -> int:
        """Learnable parameters plus norm running statistics: exactly the
        element count of a saved checkpoint."""
        return self.params_total + self.buffer_total

    def as_text(self) -> str:
        out = io.StringIO()
        out.write(f"arch {self.arch} @ {self.res}x{self.res}  (1 FLOP = 1 multiply-accumulate)\n")
        wide = max(len(r.component) for r in self.rows)
        header = f"{'component':<{wide}}  {'params':>12}  {'macs':>15}  formula"
        out.write(header + "\n")
        out.write("-" * len(header) + "\n")
        for r in self.rows:
            out.write(f"{r.component:<{wide}}  {r.params:>12,}  {r.macs:>15,}  {r.formula}\n")
        out.write("-" * len(header) + "\n")
        out.write(f"{'total':<{wide}}  {self.params_total:>12,}  {self.macs_total:>15,}\n")
        out.write(
            f"state total (params + norm running stats): {self.state_total:,}\n"
            f"unmodeled: {UNMODELED}\n"
        )
        return out.getvalue()

    def as_csv(self) -> str:
        lines = ["component,params,macs,formula"]
        for r in self.rows:
            lines.append(f"{r.component},{r.params},{r.macs},{r.formula}")
        lines.append(f"total,{self.params_total},{self.macs_total},")
        return "\n".join(lines) + "\n"


def _conv_macs(cin: int, cout: int, k: int, out_hw: int) -> int:
    return k * k * cin * cout * out_hw * out_hw


def count_model(
    cfg: ArchConfig, resolution: int | None = None, name: str | None = None
) -> FlopsReport:
    """Whole-model analytic count at the given input resolution.

    Parameters are counted from weight shapes (convs carry no bias; the
    classifier keeps its bias; norms contribute gain+bias). MACs cover
    convs, attention, and the classifier; see UNMODELED for exclusions.
    """
    res = cfg.res if resolution is None else int(resolution)
    if res % 4:
        raise ConfigError(f"resolution must be divisible by 4, got {res}")
    label = name or "blocks " + ",".join(str(b) for b in cfg.blocks) + " / channels " + ",".join(
        str(c) for c in cfg.channels
    )
    report = FlopsReport(arch=label, res=res, rows=[])
    buffers = 0

    # stem: four 3x3 convs, strides 2,1,2,1
    plan = cfg.stem_plan
    strides = (2, 1, 2, 1)
    hw = res
    p_stem = 0
    m_stem = 0
    prev = cfg.in_channels
    for c, s in zip(plan, strides):
        hw //= s
        p_stem += 9 * prev * c + 2 * c
        m_stem += _conv_macs(prev, c, 3, hw)
        buffers += 2 * c
        prev = c
    report.rows.append(FlopsRow("stem", p_stem, m_stem, "4x conv3x3 +bn"))

    for s in range(4):
        c = cfg.channels[s]
        extent = res // 4 // (2**s)
        if extent < 1 or extent % cfg.grids[s]:
            raise ConfigError(
                f"stage {s}: token map {extent}x{extent} incompatible with grid {cfg.grids[s]}"
            )
        n = extent * extent
        nb = cfg.blocks[s]
        if s > 0:
            cin = cfg.channels[s - 1]
            report.rows.append(
                FlopsRow(
                    f"merge.{s - 1}",
                    9 * cin * c + 2 * c,
                    _conv_macs(cin, c, 3, extent),
                    "conv3x3 s2 +bn",
                )
            )
            buffers += 2 * c

        if cfg.pos_embed == "cpe":
            report.rows.append(
                FlopsRow(f"stage.{s}.cpe", nb * 9 * c, nb * 9 * c * n, "dw3x3: 9NC")
            )
        elif cfg.pos_embed == "ape":
            report.rows.append(
                FlopsRow(f"stage.{s}.ape", c * n, 0, "learned table, add unmodeled")
            )
        elif cfg.pos_embed == "rpe":
            if cfg.grids[s] == 1:
                side = extent
            else:
                side = extent // cfg.grids[s]
            t = (2 * side - 1) ** 2 * cfg.heads[s]
            report.rows.append(
                FlopsRow(f"stage.{s}.rpe", nb * t, 0, "learned bias, add unmodeled")
            )

        attn_params = nb * (4 * c * c + 2 * c)  # q,k,v,o projections + layer norm
        if cfg.grids[s] == 1:
            attn_macs = nb * flops_gsa(n, c)
            formula = "2*N^2*C + 4*N*C^2"
        else:
            m = (extent // cfg.grids[s]) ** 2
            attn_macs = nb * flops_sta(n, c, m)
            formula = "2*m^2*C + 4*m*C^2 + 28*N*C"
        report.rows.append(FlopsRow(f"stage.{s}.sta", attn_params, attn_macs, formula))

        h = cfg.expansion * c
        ffn_params = nb * (c * h + 9 * h + h * c + 2 * c)  # expand, dw, reduce, bn
        ffn_macs = nb * (c * h * n + 9 * h * n + h * c * n)
        report.rows.append(
            FlopsRow(f"stage.{s}.ffn", ffn_params, ffn_macs, "2*r*N*C^2 + 9*r*N*C")
        )
        buffers += nb * 2 * c

    c4 = cfg.channels[3]
    n4 = (res // 32) ** 2
    w = cfg.proj_width
    head_params = c4 * w + 2 * w + w * cfg.n_classes + cfg.n_classes
    head_macs = c4 * w * n4 + w * cfg.n_classes
    buffers += 2 * w
    report.rows.append(FlopsRow("head", head_params, head_macs, "1x1 proj +bn, fc"))

    report.buffer_total = buffers
    return report
