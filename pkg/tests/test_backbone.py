"""Backbone checks: causality, bidirectionality, kv-cache oracle, aligner,
ladder, checkpoint format."""

import numpy as np
import pytest

from fluidbench import tensor as T
from fluidbench.backbone import (Backbone, CheckpointError, ModelConfig, RasterCache,
                                 config_ladder, load_checkpoint, save_checkpoint)
from fluidbench.rng import stream


def tiny_cfg(order="raster", token="discrete", **kw):
    base = dict(order_mode=order, token_mode=token, blocks=2, channels=16,
                heads=2, aligner_blocks=1, vocab=16, token_dim=6,
                rows=2, cols=3, text_len=4, text_vocab=18)
    base.update(kw)
    return ModelConfig(**base)


def text_for(model, batch=1, seed=0):
    ids = stream(seed, "caps").integers(0, model.cfg.text_vocab,
                                        size=(batch, model.cfg.text_len))
    return model.apply_text_aligner(ids), ids


def test_config_ladder():
    cfg = config_ladder(0)
    assert (cfg.blocks, cfg.channels, cfg.heads) == (2, 64, 4)
    assert config_ladder("XL").channels == 192
    counts = [Backbone(config_ladder(i), seed=0).param_count() for i in range(4)]
    assert all(b > a for a, b in zip(counts, counts[1:]))
    with pytest.raises(ValueError, match="out of range"):
        config_ladder(4)
    with pytest.raises(ValueError, match="unknown scale"):
        config_ladder("XXL")


def test_raster_causality_bit_exact():
    model = Backbone(tiny_cfg(), seed=1)
    text, _ = text_for(model)
    toks = stream(1, "t").integers(0, 16, size=(1, 5))
    base = model.forward_raster(toks, text).data
    for j in range(5):
        mod = toks.copy()
        mod[0, j] = (mod[0, j] + 7) % 16
        out = model.forward_raster(mod, text).data
        # input slot of token j is j+1, so outputs 0..j are untouched
        assert np.array_equal(out[:, :j + 1, :], base[:, :j + 1, :])
        assert not np.array_equal(out[:, j + 1:, :], base[:, j + 1:, :])


def test_raster_empty_prefix_single_output():
    model = Backbone(tiny_cfg(), seed=2)
    text, _ = text_for(model)
    out = model.forward_raster(np.zeros((1, 0), dtype=np.int64), text)
    assert out.data.shape == (1, 1, model.cfg.channels)


def test_raster_prefix_too_long():
    model = Backbone(tiny_cfg(), seed=3)
    text, _ = text_for(model)
    with pytest.raises(ValueError, match="prefix"):
        model.forward_raster(np.zeros((1, 6), dtype=np.int64), text)


@pytest.mark.parametrize("token_mode", ["discrete", "continuous"])
def test_kv_cache_matches_full_forward(token_mode):
    model = Backbone(tiny_cfg(token=token_mode), seed=4)
    n = model.cfg.n
    text, _ = text_for(model)
    if token_mode == "discrete":
        toks = stream(4, "t").integers(0, 16, size=(1, n - 1))
    else:
        toks = stream(4, "t").normal(size=(1, n - 1, model.cfg.token_dim))
    full = model.forward_raster(toks, text).data

    cache = model.start_cache(1, text)
    outs = [cache.decode_step(None)]
    for i in range(n - 1):
        outs.append(cache.decode_step(toks[:, i]))
    inc = np.stack(outs, axis=1)
    rel = np.abs(inc - full) / np.maximum(np.abs(full), 1e-8)
    assert rel.max() < 1e-5


def test_kv_cache_overflow_raises():
    model = Backbone(tiny_cfg(), seed=5)
    text, _ = text_for(model)
    cache = model.start_cache(1, text)
    cache.decode_step(None)
    for i in range(model.cfg.n - 1):
        cache.decode_step(np.array([1]))
    with pytest.raises(ValueError, match="slots"):
        cache.decode_step(np.array([1]))


def test_masked_requires_a_mask():
    model = Backbone(tiny_cfg(order="random"), seed=6)
    text, _ = text_for(model)
    toks = np.zeros((1, model.cfg.n), dtype=np.int64)
    with pytest.raises(ValueError, match="at least one"):
        model.forward_masked(toks, np.zeros((1, model.cfg.n), dtype=bool), text)


def test_masked_output_shape_and_gather_order():
    model = Backbone(tiny_cfg(order="random"), seed=7)
    n = model.cfg.n
    text, _ = text_for(model, batch=2, seed=7)
    toks = stream(7, "t").integers(0, 16, size=(2, n))
    mask = np.zeros((2, n), dtype=bool)
    mask[0, [1, 4]] = True
    mask[1, [0]] = True
    out, hidden = model.forward_masked(toks, mask, text, return_hidden=True)
    assert out.data.shape == (3, model.cfg.channels)
    flat = hidden.data.reshape(2 * n, -1)
    assert np.array_equal(out.data, flat[np.flatnonzero(mask.ravel())])


def test_masked_bidirectional_witness():
    model = Backbone(tiny_cfg(order="random"), seed=8)
    n = model.cfg.n
    text, _ = text_for(model, seed=8)
    toks = stream(8, "t").integers(0, 16, size=(1, n))
    mask = np.zeros((1, n), dtype=bool)
    mask[0, 2] = True
    base = model.forward_masked(toks, mask, text).data
    for j in range(n):
        if j == 2:
            continue
        mod = toks.copy()
        mod[0, j] = (mod[0, j] + 5) % 16
        out = model.forward_masked(mod, mask, text).data
        assert not np.allclose(out, base), f"masked output blind to cell {j}"


def test_masked_position_sensitivity():
    model = Backbone(tiny_cfg(order="random"), seed=9)
    n = model.cfg.n
    text, _ = text_for(model, seed=9)
    toks = stream(9, "t").integers(0, 16, size=(1, n))
    toks[0, 0], toks[0, 1] = 3, 9
    mask = np.zeros((1, n), dtype=bool)
    mask[0, 5] = True
    base = model.forward_masked(toks, mask, text).data
    swapped = toks.copy()
    swapped[0, 0], swapped[0, 1] = 9, 3
    out = model.forward_masked(swapped, mask, text).data
    assert not np.allclose(out, base)


def test_all_masked_depends_only_on_text():
    model = Backbone(tiny_cfg(order="random"), seed=10)
    n = model.cfg.n
    text, _ = text_for(model, seed=10)
    mask = np.ones((1, n), dtype=bool)
    a = model.forward_masked(np.zeros((1, n), dtype=np.int64), mask, text).data
    b = model.forward_masked(np.full((1, n), 7, dtype=np.int64), mask, text).data
    assert np.array_equal(a, b)


def test_text_reaches_output_only_via_cross_attention():
    model = Backbone(tiny_cfg(order="random"), seed=11)
    n = model.cfg.n
    for i in range(model.cfg.blocks):
        model.params[f"blk{i}.ca_out_w"].data[:] = 0.0
        model.params[f"blk{i}.ca_out_b"].data[:] = 0.0
    toks = stream(11, "t").integers(0, 16, size=(1, n))
    mask = np.zeros((1, n), dtype=bool)
    mask[0, 3] = True
    t1, _ = text_for(model, seed=11)
    t2, _ = text_for(model, seed=12)
    assert not np.array_equal(t1.data, t2.data)
    a = model.forward_masked(toks, mask, t1).data
    b = model.forward_masked(toks, mask, t2).data
    assert np.array_equal(a, b)


def test_aligner_zero_blocks_is_projection_only():
    model = Backbone(tiny_cfg(aligner_blocks=0), seed=12)
    ids = np.array([[1, 2, 3, 0]])
    out = model.apply_text_aligner(ids).data
    p = model.params
    emb = p["text_embed"].data[ids] + p["text_pos"].data
    ref = emb @ p["text_proj_w"].data + p["text_proj_b"].data
    assert np.abs(out - ref).max() < 1e-12


def test_aligner_deterministic_and_length_preserving():
    model = Backbone(tiny_cfg(aligner_blocks=2), seed=13)
    ids = stream(13, "c").integers(0, 18, size=(3, 4))
    a = model.apply_text_aligner(ids).data
    b = model.apply_text_aligner(ids).data
    assert np.array_equal(a, b)
    assert a.shape == (3, 4, model.cfg.channels)


def test_param_count_text_table_flag():
    model = Backbone(tiny_cfg(), seed=14)
    diff = model.param_count(True) - model.param_count(False)
    assert diff == model.cfg.text_vocab * model.cfg.channels


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg(order="random", token="continuous")
    model = Backbone(cfg, seed=15)
    path = tmp_path / "ckpt.flbk"
    save_checkpoint(path, cfg, model.param_arrays(), step=42)
    cfg2, tensors, step = load_checkpoint(path)
    assert step == 42 and cfg2 == cfg
    assert set(tensors) == set(model.params)
    for k, v in tensors.items():
        assert np.abs(v - model.params[k].data).max() < 1e-6


def test_checkpoint_version_mismatch(tmp_path):
    import json
    import struct
    bad = {"format_version": 99, "step": 0, "config": {}, "tensors": []}
    head = json.dumps(bad).encode()
    p = tmp_path / "bad.flbk"
    p.write_bytes(struct.pack("<I", len(head)) + head)
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(p)


def test_mode_mismatch_errors():
    raster = Backbone(tiny_cfg(order="raster"), seed=16)
    rand = Backbone(tiny_cfg(order="random"), seed=16)
    text, _ = text_for(raster)
    with pytest.raises(ValueError):
        rand.forward_raster(np.zeros((1, 2), dtype=np.int64), text)
    with pytest.raises(ValueError):
        raster.forward_masked(np.zeros((1, 6), dtype=np.int64),
                              np.ones((1, 6), dtype=bool), text)
    with pytest.raises(ValueError, match="kv cache"):
        RasterCache(rand, 1, text)
