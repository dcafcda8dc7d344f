"""Backbone assembly: frozen parameter counts, shapes, state handling.

The per-preset totals below were derived analytically (layer-by-layer
closed-form sums) before the module was written and are asserted exactly.
"""

import numpy as np
import pytest

from stattn.blocks import ArchConfig, build_model, preset
from stattn.errors import ConfigError, ShapeError
from stattn.tensor import Tensor, no_grad

# name -> (params, params + running stats)
FROZEN_TOTALS = {
    "svit-s": (25_419_976, 25_434_824),
    "svit-b": (51_532_216, 51_556_984),
    "svit-l": (94_726_200, 94_762_104),
    "tiny": (561_898, 565_098),
}


def n_params(model):
    return sum(t.size for t in model.parameters())


def n_state(model):
    return sum(t.size for _, t, _ in model.named_tensors())


@pytest.mark.parametrize("name", sorted(FROZEN_TOTALS))
def test_param_totals_frozen(name):
    model = build_model(preset(name), seed=0)
    want_p, want_s = FROZEN_TOTALS[name]
    assert n_params(model) == want_p
    assert n_state(model) == want_s


def test_pos_embed_variant_totals():
    # frozen: tiny is 561_898 with cpe (9C per block); swapping the embedding
    # changes only those rows
    assert n_params(build_model(preset("tiny", pos_embed="ape"), seed=0)) == 561_082
    assert n_params(build_model(preset("tiny", pos_embed="rpe"), seed=0)) == 559_269
    assert n_params(build_model(preset("tiny", pos_embed="none"), seed=0)) == 559_162


def test_preset_validation():
    with pytest.raises(ConfigError):
        preset("svit-m")
    with pytest.raises(ConfigError):
        ArchConfig(
            blocks=(1, 1, 1, 1),
            channels=(16, 32, 64, 128),
            heads=(3, 2, 4, 8),  # 16 % 3 != 0
            grids=(4, 2, 1, 1),
            res=32,
        )
    with pytest.raises(ConfigError):
        ArchConfig(
            blocks=(1, 1, 1, 1),
            channels=(16, 32, 64, 128),
            heads=(1, 2, 4, 8),
            grids=(3, 2, 1, 1),  # stage extent 8 % 3 != 0
            res=32,
        )


def test_stage_extents():
    cfg = preset("svit-s")
    assert tuple(cfg.stage_extent(s) for s in range(4)) == (56, 28, 14, 7)
    tiny = preset("tiny")
    assert tuple(tiny.stage_extent(s) for s in range(4)) == (8, 4, 2, 1)


def test_forward_shape_and_determinism():
    cfg = preset("tiny")
    model = build_model(cfg, seed=3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
    with no_grad():
        a = model.forward(x, training=False).data
    assert a.shape == (2, 2)
    model2 = build_model(cfg, seed=3)
    with no_grad():
        b = model2.forward(x, training=False).data
    np.testing.assert_array_equal(a, b)  # same seed, same weights, same output


def test_forward_rejects_wrong_resolution():
    model = build_model(preset("tiny"), seed=0)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 3, 16, 16), dtype=np.float32), training=False)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 1, 32, 32), dtype=np.float32), training=False)


def test_backward_reaches_every_parameter():
    model = build_model(preset("tiny"), seed=1)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
    out = model.forward(x, training=True)
    out.mean().backward()
    for name, t, kind in model.named_tensors():
        if kind != "param":
            continue
        assert t.grad is not None, f"no gradient reached {name}"
        assert np.all(np.isfinite(t.grad)), f"non-finite gradient at {name}"


def test_state_dict_roundtrip():
    model = build_model(preset("tiny"), seed=2)
    state = model.state_dict()
    other = build_model(preset("tiny"), seed=99)
    other.load_state(state)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
    with no_grad():
        a = model.forward(x, training=False).data
        b = other.forward(x, training=False).data
    np.testing.assert_array_equal(a, b)


def test_load_state_rejects_mismatch():
    model = build_model(preset("tiny"), seed=0)
    state = model.state_dict()
    bad = dict(state)
    key = next(iter(bad))
    bad[key] = np.zeros((1, 2, 3), dtype=np.float32)
    with pytest.raises(ConfigError):
        model.load_state(bad)
    missing = dict(state)
    missing.pop(key)
    with pytest.raises(ConfigError):
        model.load_state(missing)


def test_drop_path_train_vs_eval():
    cfg = preset("tiny", drop_path=0.5)
    model = build_model(cfg, seed=4)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
    with no_grad():
        a = model.forward(x, training=False).data
        b = model.forward(x, training=False).data
    np.testing.assert_array_equal(a, b)  # eval path has no randomness
    r1 = np.random.default_rng(10)
    r2 = np.random.default_rng(11)
    t1 = model.forward(x, training=True, rng=r1).data
    t2 = model.forward(x, training=True, rng=r2).data
    assert np.max(np.abs(t1 - t2)) > 0  # training path samples per-block drops


def test_all_global_stages_work():
    # grid 1x1 everywhere: the whole net runs on plain global attention
    cfg = ArchConfig(
        blocks=(1, 1, 1, 1),
        channels=(16, 32, 64, 128),
        heads=(1, 2, 4, 8),
        grids=(1, 1, 1, 1),
        res=32,
        n_classes=2,
    )
    model = build_model(cfg, seed=5)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
    out = model.forward(x, training=True)
    out.mean().backward()
    assert out.shape == (2, 2)


def test_param_groups_decay_split():
    model = build_model(preset("tiny", pos_embed="rpe"), seed=0)
    groups = dict()
    for name, t, decay in model.param_groups():
        groups[name] = decay
    assert any(".rpe." in k and not v for k, v in groups.items())
    for name, decay in groups.items():
        if any(tag in name for tag in (".ln.", ".bn.", ".ape.", ".rpe.")):
            assert not decay, name
        else:
            assert decay, name


def test_block_reduces_to_identity_when_zeroed():
    # zeroing the three residual write-backs (cpe, attention out, ffn reduce)
    # leaves every block an exact identity
    cfg = preset("tiny")
    model = build_model(cfg, seed=6)
    for name, t, _ in model.named_tensors():
        if name.endswith(("cpe.w", "attn.wo", "ffn.reduce.w")):
            t.data[...] = 0.0
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
    h0 = model.stage_input(x, 0).data
    blk = model.stages[0][0]
    with no_grad():
        h1 = blk(Tensor(h0), False, 0.0, None).data
    np.testing.assert_array_equal(h0, h1)


def test_sta_inspect_matches_block_entry():
    model = build_model(preset("tiny"), seed=7)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
    with no_grad():
        tokens, cfg, w, rel_bias = model.sta_inspect(Tensor(x), 1)
    assert tokens.shape == (1, 32, 4, 4)
    assert (cfg.grid_h, cfg.grid_w) == (2, 2)
    assert rel_bias is None  # cpe preset has no table
