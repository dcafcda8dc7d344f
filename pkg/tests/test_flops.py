"""Complexity accounting: closed-form formulas and whole-model tallies.

Reference points (N = 3136, C = 64, m = 49) were computed by hand from the
formulas and frozen; model totals are cross-checked structurally against the
actually-built parameter tensors so the analytic count can never drift from
the real model.
"""

import numpy as np
import pytest

from stattn.blocks import build_model, preset
from stattn.flops import (
    count_model,
    flops_gsa,
    flops_sta,
    flops_sts_dense,
    flops_sts_sparse,
)

N, C, M = 3136, 64, 49


def test_reference_values_frozen():
    assert flops_sts_dense(N, C, M, n_iter=1) == 19_668_992
    assert flops_sts_sparse(N, C) == 3_813_376
    assert flops_gsa(N, C) == 1_310_195_712
    assert flops_sta(N, C, M) == 6_729_856


def test_gsa_over_sta_ratio():
    ratio = flops_gsa(N, C) / flops_sta(N, C, M)
    assert abs(ratio - 194.684) < 0.001


def test_sparse_beats_dense_sampling():
    # the windowed association is 19NC regardless of m; dense assignment
    # scales with m and overtakes it immediately for real grids
    assert flops_sts_sparse(N, C) < flops_sts_dense(N, C, M, n_iter=1)
    assert flops_sts_dense(N, C, 9, n_iter=1) < flops_sts_dense(N, C, M, n_iter=1)


def test_sta_cheaper_than_gsa_on_preset_geometries():
    for name in ("svit-s", "svit-b", "svit-l", "tiny"):
        cfg = preset(name)
        for s in range(4):
            side = cfg.stage_extent(s)
            n = side * side
            g = cfg.grids[s]
            if g == 1:
                continue  # degenerate stage: the op is GSA itself
            m = (side // g) ** 2
            assert m < n
            c = cfg.channels[s]
            assert flops_sta(n, c, m) < flops_gsa(n, c), (name, s)


@pytest.mark.parametrize("name", ["svit-s", "svit-b", "svit-l", "tiny"])
def test_tally_matches_built_model(name):
    cfg = preset(name)
    report = count_model(cfg)
    model = build_model(cfg, seed=0)
    want_params = sum(t.size for t in model.parameters())
    want_state = sum(t.size for _, t, _ in model.named_tensors())
    assert report.params_total == want_params
    assert report.state_total == want_state


@pytest.mark.parametrize(
    "pos_embed", ["ape", "rpe", "none"]
)
def test_tally_tracks_pos_embed_variants(pos_embed):
    cfg = preset("tiny", pos_embed=pos_embed)
    report = count_model(cfg)
    model = build_model(cfg, seed=0)
    assert report.params_total == sum(t.size for t in model.parameters())


def test_preset_macs_frozen():
    # at 224x224: svit-s 4.341G, svit-b 9.826G, svit-l 15.543G (1 MAC = 1 FLOP);
    # digit strings derived by an independent closed-form sum over layers
    assert count_model(preset("svit-s")).macs_total == 4_341_467_520
    assert count_model(preset("svit-b")).macs_total == 9_826_237_440
    assert count_model(preset("svit-l")).macs_total == 15_542_920_832
    assert count_model(preset("tiny")).macs_total == 1_797_504


def test_resolution_override():
    rep_224 = count_model(preset("svit-s"))
    rep_448 = count_model(preset("svit-s"), resolution=448)
    assert rep_448.macs_total > rep_224.macs_total
    # params exclude ape, so they cannot change with resolution here
    assert rep_448.params_total == rep_224.params_total


def test_text_and_csv_output():
    rep = count_model(preset("tiny"), name="tiny")
    text = rep.as_text()
    assert "tiny" in text and "total" in text
    assert f"{rep.params_total:,}" in text
    csv = rep.as_csv()
    lines = csv.strip().splitlines()
    assert lines[0] == "component,params,macs,formula"
    assert lines[-1].startswith("total,")
    total_row = lines[-1].split(",")
    assert int(total_row[1]) == rep.params_total
    assert int(total_row[2]) == rep.macs_total
    # one row per component plus header and total
    assert len(lines) == len(rep.rows) + 2
