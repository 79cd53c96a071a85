"""Sampler tests: schedule telescoping, guidance algebra, determinism,
batching invariance, and independent single-image reference decodes."""

import numpy as np
import pytest

import fluidbench.dataset as D
import fluidbench.sampler as S
import fluidbench.tensor as T
from fluidbench.backbone import Backbone, ModelConfig
from fluidbench.heads import DiffusionHead, build_cosine_schedule, sample_batch
from fluidbench.rng import stream


def tiny_cfg(order_mode, token_mode):
    return ModelConfig(order_mode=order_mode, token_mode=token_mode,
                       blocks=1, channels=16, heads=2, aligner_blocks=1,
                       vocab=7, token_dim=12, rows=2, cols=3,
                       text_len=6, text_vocab=len(D.VOCAB))


def tiny_model(order_mode, token_mode, seed=5):
    return Backbone(tiny_cfg(order_mode, token_mode), seed=seed)


CAPTION = D.Caption(tuple(D.VOCAB.index(w) for w in ("a", "red", "circle")))
FAST_SCHED = build_cosine_schedule(200, 8)


# --- unmasking schedule ---------------------------------------------------------

@pytest.mark.parametrize("n", [16, 64, 256])
@pytest.mark.parametrize("steps", [1, 8, 64])
def test_schedule_telescopes(n, steps):
    reveals = S.build_unmasking_schedule(n, steps)
    assert reveals.sum() == n
    assert np.all(reveals >= 1)
    assert len(reveals) == min(steps, n)


def test_schedule_single_step_reveals_everything():
    assert list(S.build_unmasking_schedule(64, 1)) == [64]


def test_schedule_one_cell_per_step_when_steps_equal_n():
    assert list(S.build_unmasking_schedule(16, 16)) == [1] * 16


def test_schedule_cosine_checkpoint_value():
    # halfway through 64 steps on 256 cells: ceil(256*cos(pi/4)) cells remain
    reveals = S.build_unmasking_schedule(256, 64)
    assert 256 - reveals[:32].sum() == 182


def test_schedule_masked_counts_monotone():
    reveals = S.build_unmasking_schedule(64, 32)
    masked = 64 - np.cumsum(reveals)
    assert np.all(np.diff(masked) < 0)
    assert masked[-1] == 0


def test_schedule_rejects_bad_sizes():
    with pytest.raises(ValueError):
        S.build_unmasking_schedule(0, 4)
    with pytest.raises(ValueError):
        S.build_unmasking_schedule(16, 0)


def test_schedule_clamps_steps_above_n():
    reveals = S.build_unmasking_schedule(16, 64)
    assert len(reveals) == 16 and reveals.sum() == 16


# --- guidance and temperature ---------------------------------------------------

def test_cfg_logits_omega_zero_is_conditional():
    lc = np.random.default_rng(0).standard_normal((4, 9))
    lu = np.random.default_rng(1).standard_normal((4, 9))
    assert np.array_equal(S.cfg_combine_logits(lc, lu, 0.0), lc)


def test_cfg_logits_collinear():
    lc = np.random.default_rng(2).standard_normal(8)
    lu = np.random.default_rng(3).standard_normal(8)
    g1 = S.cfg_combine_logits(lc, lu, 1.0)
    g2 = S.cfg_combine_logits(lc, lu, 2.0)
    g3 = S.cfg_combine_logits(lc, lu, 3.0)
    assert np.max(np.abs((g3 - g2) - (g2 - g1))) < 1e-12


def test_cfg_logits_shape_mismatch():
    with pytest.raises(ValueError):
        S.cfg_combine_logits(np.zeros((2, 3)), np.zeros((2, 4)), 1.0)


def test_temperature_divides_and_validates():
    logits = np.array([2.0, -1.0, 0.5])
    assert np.allclose(S.apply_temperature_discrete(logits, 0.5), logits * 2.0)
    with pytest.raises(ValueError):
        S.apply_temperature_discrete(logits, 0.0)


def test_low_temperature_sampling_matches_argmax():
    rng = np.random.default_rng(7)
    hits = 0
    for _ in range(200):
        logits = rng.standard_normal(16)
        probs = S._softmax(S.apply_temperature_discrete(logits, 1e-4))
        got = S._sample_categorical(probs, float(rng.uniform()))
        hits += got == int(np.argmax(logits))
    assert hits == 200


def test_sample_categorical_inverse_cdf():
    probs = np.array([0.2, 0.5, 0.3])
    assert S._sample_categorical(probs, 0.1) == 0
    assert S._sample_categorical(probs, 0.3) == 1
    assert S._sample_categorical(probs, 0.95) == 2
    assert S._sample_categorical(np.array([0.0, 1.0, 0.0]), 0.5) == 1


def test_params_validation():
    with pytest.raises(ValueError):
        S.SamplerParams(omega=-0.1)
    with pytest.raises(ValueError):
        S.SamplerParams(tau=0.0)
    with pytest.raises(ValueError):
        S.SamplerParams(selection="greedy")
    with pytest.raises(ValueError):
        S.SamplerParams(steps=0)


def test_table_defaults_cover_all_variants():
    assert set(S.TABLE_DEFAULTS) == {(o, t) for o in ("raster", "random")
                                     for t in ("discrete", "continuous")}
    assert S.TABLE_DEFAULTS[("random", "continuous")] == (5.0, 0.975)
    assert S.TABLE_DEFAULTS[("raster", "discrete")] == (2.5, 0.95)


# --- raster generation ----------------------------------------------------------

def test_raster_discrete_matches_uncached_reference():
    model = tiny_model("raster", "discrete")
    params = S.SamplerParams(omega=1.5, tau=0.9, seed=11)
    grids = S.generate_raster(model, None, CAPTION, params, count=2)

    n = model.cfg.n
    emb = model.params["vis_embed"].data
    ids_c = D.caption_ids(CAPTION, model.cfg.text_len)[None, :]
    ids_u = D.caption_ids(D.NULL_CAPTION, model.cfg.text_len)[None, :]
    with T.checked(False):
        tc = model.apply_text_aligner(ids_c)
        tu = model.apply_text_aligner(ids_u)
    for b in range(2):
        ids = np.zeros((1, 0), dtype=np.int64)
        for pos in range(n):
            with T.checked(False):
                zc = model.forward_raster(ids, tc).data[0, -1]
                zu = model.forward_raster(ids, tu).data[0, -1]
            lg = S.cfg_combine_logits(zc @ emb.T, zu @ emb.T, params.omega)
            probs = S._softmax(lg / params.tau)
            u = float(stream(params.seed, "raster-cat", b, pos).uniform())
            tok = S._sample_categorical(probs, u)
            assert tok == grids[b].ids[pos]
            ids = np.concatenate([ids, [[tok]]], axis=1)


def test_raster_deterministic_and_batch_invariant():
    model = tiny_model("raster", "discrete")
    params = S.SamplerParams(omega=2.0, tau=1.0, seed=3)
    a = S.generate_raster(model, None, CAPTION, params, count=2)
    b = S.generate_raster(model, None, CAPTION, params, count=4)
    for i in range(2):
        assert np.array_equal(a[i].ids, b[i].ids)


def test_raster_continuous_generates_and_is_deterministic():
    model = tiny_model("raster", "continuous")
    head = DiffusionHead(model.cfg.token_dim, 16, seed=9)
    params = S.SamplerParams(omega=1.0, tau=0.975, seed=21)
    a = S.generate_raster(model, head, CAPTION, params, schedule=FAST_SCHED, count=2)
    b = S.generate_raster(model, head, CAPTION, params, schedule=FAST_SCHED, count=3)
    assert a[0].vectors.shape == (model.cfg.n, model.cfg.token_dim)
    assert np.all(np.isfinite(a[0].vectors))
    for i in range(2):
        assert np.array_equal(a[i].vectors, b[i].vectors)
    other = S.generate_raster(model, head, CAPTION,
                              S.SamplerParams(omega=1.0, tau=0.975, seed=22),
                              schedule=FAST_SCHED, count=1)
    assert not np.array_equal(a[0].vectors, other[0].vectors)


def test_raster_continuous_matches_single_token_reference():
    model = tiny_model("raster", "continuous")
    head = DiffusionHead(model.cfg.token_dim, 16, seed=9)
    params = S.SamplerParams(omega=0.5, tau=1.0, seed=4)
    grid = S.generate_raster(model, head, CAPTION, params, schedule=FAST_SCHED,
                             count=1)[0]

    ids_c = D.caption_ids(CAPTION, model.cfg.text_len)[None, :]
    ids_u = D.caption_ids(D.NULL_CAPTION, model.cfg.text_len)[None, :]
    with T.checked(False):
        tc = model.apply_text_aligner(ids_c)
        tu = model.apply_text_aligner(ids_u)
    cc, cu = model.start_cache(1, tc), model.start_cache(1, tu)
    prev = None
    for pos in range(model.cfg.n):
        zc, zu = cc.decode_step(prev), cu.decode_step(prev)
        noise = S._token_noise(params.seed, 0, pos, FAST_SCHED.t_infer,
                               model.cfg.token_dim)
        x = sample_batch(head, zc, zu, FAST_SCHED, params.omega, params.tau,
                         lambda k, shape: noise[FAST_SCHED.t_infer - k][None, :])
        assert np.allclose(x[0], grid.vectors[pos], atol=1e-12)
        prev = x


def test_raster_rejects_wrong_mode_or_missing_head():
    with pytest.raises(ValueError):
        S.generate_raster(tiny_model("random", "discrete"), None, CAPTION,
                          S.SamplerParams())
    with pytest.raises(ValueError):
        S.generate_raster(tiny_model("raster", "continuous"), None, CAPTION,
                          S.SamplerParams())


# --- random-order generation ----------------------------------------------------

def test_random_discrete_matches_single_image_reference():
    model = tiny_model("random", "discrete")
    params = S.SamplerParams(omega=1.6, tau=1.05, steps=4, seed=13)
    grids = S.generate_random_order(model, None, CAPTION, params, count=2)

    n = model.cfg.n
    emb = model.params["vis_embed"].data
    ids_c = D.caption_ids(CAPTION, model.cfg.text_len)[None, :]
    ids_u = D.caption_ids(D.NULL_CAPTION, model.cfg.text_len)[None, :]
    with T.checked(False):
        tc = model.apply_text_aligner(ids_c)
        tu = model.apply_text_aligner(ids_u)
    reveals = S.build_unmasking_schedule(n, params.steps)
    for b in range(2):
        order = stream(params.seed, "commit-order", b).permutation(n)
        ids = np.zeros((1, n), dtype=np.int64)
        mask = np.ones((1, n), dtype=bool)
        cursor = 0
        for step, reveal in enumerate(reveals):
            with T.checked(False):
                zc = model.forward_masked(ids, mask, tc).data
                zu = model.forward_masked(ids, mask, tu).data
            open_cells = np.flatnonzero(mask[0])
            chosen = order[cursor:cursor + reveal]
            cursor += reveal
            lg = S.cfg_combine_logits(zc @ emb.T, zu @ emb.T, params.omega)
            probs = S._softmax(lg / params.tau)
            for cell in chosen:
                j = int(np.searchsorted(open_cells, cell))
                u = float(stream(params.seed, "rand-cat", b, int(cell), step).uniform())
                ids[0, cell] = S._sample_categorical(probs[j], u)
            mask[0, chosen] = False
        assert not mask.any()
        assert np.array_equal(ids[0], grids[b].ids)


def test_random_selection_follows_replayed_permutation():
    # with confidence selection off, the commit order must be exactly the
    # permutation an independent replay of the stream produces; verify via
    # K = n single-cell steps where each step commits one specific cell
    model = tiny_model("random", "discrete")
    n = model.cfg.n
    params = S.SamplerParams(omega=0.0, tau=1.0, steps=n, seed=17)
    grids = S.generate_random_order(model, None, CAPTION, params, count=1)
    order = stream(params.seed, "commit-order", 0).permutation(n)
    # the token at cell order[k] was drawn at step k from its replayable stream
    ids_c = D.caption_ids(CAPTION, model.cfg.text_len)[None, :]
    with T.checked(False):
        tc = model.apply_text_aligner(ids_c)
    ids = np.zeros((1, n), dtype=np.int64)
    mask = np.ones((1, n), dtype=bool)
    emb = model.params["vis_embed"].data
    for step in range(n):
        cell = order[step]
        with T.checked(False):
            z = model.forward_masked(ids, mask, tc).data
        open_cells = np.flatnonzero(mask[0])
        j = int(np.searchsorted(open_cells, cell))
        probs = S._softmax(z[j] @ emb.T)
        u = float(stream(params.seed, "rand-cat", 0, int(cell), step).uniform())
        ids[0, cell] = S._sample_categorical(probs, u)
        mask[0, cell] = False
    assert np.array_equal(ids[0], grids[0].ids)


def test_random_discrete_confidence_selection_runs_and_differs():
    model = tiny_model("random", "discrete")
    base = S.generate_random_order(model, None, CAPTION,
                                   S.SamplerParams(omega=1.0, tau=1.0, steps=3,
                                                   seed=2), count=1)
    conf = S.generate_random_order(model, None, CAPTION,
                                   S.SamplerParams(omega=1.0, tau=1.0, steps=3,
                                                   seed=2,
                                                   selection="confidence"),
                                   count=1)
    assert conf[0].ids.shape == base[0].ids.shape
    assert conf[0].ids.dtype == np.int64


def test_random_continuous_deterministic_and_batch_invariant():
    model = tiny_model("random", "continuous")
    head = DiffusionHead(model.cfg.token_dim, 16, seed=1)
    params = S.SamplerParams(omega=2.0, tau=0.975, steps=3, seed=6)
    a = S.generate_random_order(model, head, CAPTION, params,
                                schedule=FAST_SCHED, count=1)
    b = S.generate_random_order(model, head, CAPTION, params,
                                schedule=FAST_SCHED, count=3)
    assert np.all(np.isfinite(a[0].vectors))
    assert np.array_equal(a[0].vectors, b[0].vectors)


def test_random_rejects_confidence_for_continuous():
    model = tiny_model("random", "continuous")
    head = DiffusionHead(model.cfg.token_dim, 16, seed=1)
    with pytest.raises(ValueError):
        S.generate_random_order(model, head, CAPTION,
                                S.SamplerParams(selection="confidence"))


def test_generate_dispatches_on_order_mode():
    model = tiny_model("raster", "discrete")
    params = S.SamplerParams(seed=8)
    a = S.generate(model, None, CAPTION, params, count=1)
    b = S.generate_raster(model, None, CAPTION, params, count=1)
    assert np.array_equal(a[0].ids, b[0].ids)


# --- ppm files ------------------------------------------------------------------

def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = np.round(rng.uniform(size=(8, 10, 3)) * 255.0) / 255.0
    path = tmp_path / "img.ppm"
    S.save_ppm(path, img, caption_text="a red circle")
    back = S.load_ppm(path)
    assert np.allclose(back, img, atol=1e-12)
    assert (tmp_path / "img.txt").read_text() == "a red circle\n"


def test_ppm_header_and_magic(tmp_path):
    path = tmp_path / "x.ppm"
    S.save_ppm(path, np.zeros((4, 6, 3)))
    raw = path.read_bytes()
    assert raw.startswith(b"P6\n6 4\n255\n")
    assert len(raw) == len(b"P6\n6 4\n255\n") + 4 * 6 * 3
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(ValueError):
        S.load_ppm(bad)


def test_ppm_clips_out_of_range(tmp_path):
    img = np.full((2, 2, 3), 1.7)
    path = tmp_path / "c.ppm"
    S.save_ppm(path, img)
    assert np.all(S.load_ppm(path) == 1.0)
