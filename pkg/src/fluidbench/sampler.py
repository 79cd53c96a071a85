"""Generation pipelines.

Raster: kv-cached sequential decoding with two cache sessions (caption and
NULL caption) combined by classifier-free guidance.  Random order: start
fully masked, reveal cells over K steps following a cosine unmasking
schedule, committing either uniformly at random or by sampled-token
confidence (discrete only).  All randomness is drawn from streams keyed by
(seed, image index, cell) so results are independent of batching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataset as D
from . import tensor as T
from .backbone import Backbone
from .heads import DiffusionHead, NoiseSchedule, build_cosine_schedule, \
    cfg_combine_eps, sample_batch
from .rng import stream
from .tokenizer import TokenGrid

__all__ = [
    "SamplerParams", "build_unmasking_schedule", "cfg_combine_logits",
    "apply_temperature_discrete", "generate_raster", "generate_random_order",
    "generate", "save_ppm", "load_ppm", "TABLE_DEFAULTS",
]

# reference operating points per variant: (order_mode, token_mode) -> (omega, tau)
TABLE_DEFAULTS = {
    ("random", "continuous"): (5.0, 0.975),
    ("raster", "continuous"): (4.5, 0.975),
    ("random", "discrete"): (1.6, 1.05),
    ("raster", "discrete"): (2.5, 0.95),
}


@dataclass
class SamplerParams:
    omega: float = 1.0
    tau: float = 1.0
    steps: int = 64                # random-order iterations K
    selection: str = "random"      # random | confidence (discrete only)
    seed: int = 0

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError(f"guidance omega must be >= 0, got {self.omega}")
        if self.tau <= 0:
            raise ValueError(f"temperature tau must be > 0, got {self.tau}")
        if self.selection not in ("random", "confidence"):
            raise ValueError(f"selection must be random|confidence, got {self.selection!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def build_unmasking_schedule(n: int, steps: int) -> np.ndarray:
    """Per-step reveal counts (positive, summing to n) from the cosine curve.

    masked(k) = ceil(n*cos(pi/2*k/K)) with masked(K) = 0, made strictly
    decreasing so every step reveals at least one cell.  steps > n is clamped
    to n (one cell per step is the finest possible schedule).
    """
    if n < 1 or steps < 1:
        raise ValueError(f"need n >= 1 and steps >= 1, got n={n}, steps={steps}")
    k_eff = min(steps, n)
    masked = [n]
    for k in range(1, k_eff + 1):
        if k == k_eff:
            masked.append(0)
        else:
            raw = int(np.ceil(n * np.cos(np.pi / 2.0 * k / k_eff)))
            masked.append(min(masked[-1] - 1, raw))
    reveals = -np.diff(np.array(masked))
    if reveals.sum() != n or np.any(reveals < 1):
        raise AssertionError(f"schedule failed to telescope: {reveals}")
    return reveals


def cfg_combine_logits(logits_c: np.ndarray, logits_u: np.ndarray,
                       omega: float) -> np.ndarray:
    """Guided logits: (1+omega)*l_c - omega*l_u."""
    logits_c = np.asarray(logits_c)
    logits_u = np.asarray(logits_u)
    if logits_c.shape != logits_u.shape:
        raise ValueError(f"shape mismatch {logits_c.shape} vs {logits_u.shape}")
    return (1.0 + omega) * logits_c - omega * logits_u


def apply_temperature_discrete(logits: np.ndarray, tau: float) -> np.ndarray:
    """Divide logits by the temperature."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    return np.asarray(logits) / tau


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sample_categorical(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw; deterministic given the uniform."""
    c = np.cumsum(probs)
    return int(np.searchsorted(c, u * c[-1]))


def _normalize_captions(captions, count):
    if isinstance(captions, D.Caption):
        return [captions] * (count if count is not None else 1)
    captions = list(captions)
    if count is not None and count != len(captions):
        raise ValueError(f"{len(captions)} captions but count={count}")
    return captions


def _aligned_text_pair(model: Backbone, captions: list):
    """Aligned embeddings for the captions and the tiled NULL caption."""
    ids = np.stack([D.caption_ids(c, model.cfg.text_len) for c in captions])
    null = D.caption_ids(D.NULL_CAPTION, model.cfg.text_len)[None, :]
    with T.checked(False):
        tc = model.apply_text_aligner(ids).data
        tu = model.apply_text_aligner(null).data
    return T.Tensor(tc), T.Tensor(np.repeat(tu, len(captions), axis=0))


def _token_noise(seed: int, img: int, cell: int, t_infer: int, d: int) -> np.ndarray:
    """All Gaussian draws one token's reverse walk needs: row 0 is x_T."""
    return stream(seed, "token-noise", img, cell).standard_normal((t_infer, d))


def _finish_grid(model: Backbone, tokens_row, mode: str) -> TokenGrid:
    cfg = model.cfg
    if mode == "discrete":
        return TokenGrid(cfg.rows, cfg.cols, "discrete", ids=tokens_row.astype(np.int64))
    return TokenGrid(cfg.rows, cfg.cols, "continuous", vectors=np.asarray(tokens_row))


def generate_raster(model: Backbone, head: DiffusionHead | None, captions,
                    params: SamplerParams, schedule: NoiseSchedule | None = None,
                    count: int | None = None, first_image: int = 0) -> list:
    """Sequential decode; returns one TokenGrid per image (continuous grids
    are in model space; map with tokenizer.from_model_space before
    unpatchify).

    ``captions`` is one Caption (tiled `count` times) or one per image.
    Image i's randomness is keyed by first_image + i, so results depend only
    on that index, never on how generation was batched.
    """
    cfg = model.cfg
    if cfg.order_mode != "raster":
        raise ValueError("generate_raster needs a raster-order model")
    if cfg.token_mode == "continuous":
        if head is None:
            raise ValueError("continuous generation needs the diffusion head")
        if params.selection == "confidence":
            raise ValueError("confidence selection is undefined for continuous tokens")
        schedule = schedule or build_cosine_schedule()
    captions = _normalize_captions(captions, count)
    n, B = cfg.n, len(captions)
    text_c, text_u = _aligned_text_pair(model, captions)
    cache_c = model.start_cache(B, text_c)
    cache_u = model.start_cache(B, text_u)

    emb = model.params["vis_embed"].data if cfg.token_mode == "discrete" else None
    ids = np.zeros((B, n), dtype=np.int64)
    vecs = np.zeros((B, n, cfg.token_dim))
    prev = None
    for pos in range(n):
        z_c = cache_c.decode_step(prev)
        z_u = cache_u.decode_step(prev)
        if cfg.token_mode == "discrete":
            lg = cfg_combine_logits(z_c @ emb.T, z_u @ emb.T, params.omega)
            probs = _softmax(apply_temperature_discrete(lg, params.tau))
            for b in range(B):
                u = float(stream(params.seed, "raster-cat", first_image + b,
                                 pos).uniform())
                ids[b, pos] = _sample_categorical(probs[b], u)
            prev = ids[:, pos]
        else:
            noise = np.stack([_token_noise(params.seed, first_image + b, pos,
                                           schedule.t_infer, cfg.token_dim)
                              for b in range(B)], axis=1)
            x = sample_batch(head, z_c, z_u, schedule, params.omega, params.tau,
                             lambda k, shape: noise[schedule.t_infer - k])
            vecs[:, pos] = x
            prev = vecs[:, pos]
    if cfg.token_mode == "discrete":
        return [_finish_grid(model, ids[b], "discrete") for b in range(B)]
    return [_finish_grid(model, vecs[b], "continuous") for b in range(B)]


def generate_random_order(model: Backbone, head: DiffusionHead | None,
                          captions, params: SamplerParams,
                          schedule: NoiseSchedule | None = None,
                          count: int | None = None, first_image: int = 0) -> list:
    """Iterative parallel decode over a cosine unmasking schedule.

    Caption handling and per-image stream keying as in generate_raster.
    """
    cfg = model.cfg
    if cfg.order_mode != "random":
        raise ValueError("generate_random_order needs a random-order model")
    if params.selection == "confidence" and cfg.token_mode == "continuous":
        raise ValueError("confidence selection is undefined for continuous tokens")
    if cfg.token_mode == "continuous":
        if head is None:
            raise ValueError("continuous generation needs the diffusion head")
        schedule = schedule or build_cosine_schedule()
    captions = _normalize_captions(captions, count)
    n, B = cfg.n, len(captions)
    reveals = build_unmasking_schedule(n, params.steps)
    text_c, text_u = _aligned_text_pair(model, captions)
    text_both = T.Tensor(np.concatenate([text_c.data, text_u.data], axis=0))

    ids = np.zeros((B, n), dtype=np.int64)
    vecs = np.zeros((B, n, cfg.token_dim))
    mask = np.ones((B, n), dtype=bool)
    committed = np.zeros((B, n), dtype=np.int64)  # how often each cell was revealed
    orders = [stream(params.seed, "commit-order", first_image + b).permutation(n)
              for b in range(B)]
    emb = model.params["vis_embed"].data if cfg.token_mode == "discrete" else None

    for step, reveal in enumerate(reveals):
        tokens = ids if cfg.token_mode == "discrete" else vecs
        doubled = np.concatenate([tokens, tokens], axis=0)
        dmask = np.concatenate([mask, mask], axis=0)
        with T.checked(False):
            out = model.forward_masked(doubled, dmask, text_both).data
        counts = mask.sum(axis=1)
        offsets = np.concatenate([[0], np.cumsum(np.concatenate([counts, counts]))])
        per_img = [out[offsets[i]:offsets[i + 1]] for i in range(2 * B)]

        for b in range(B):
            open_cells = np.flatnonzero(mask[b])
            z_c, z_u = per_img[b], per_img[B + b]
            # commit the next reveal cells of this image's fixed random order
            if params.selection == "random" or cfg.token_mode == "continuous":
                remaining = orders[b][np.isin(orders[b], open_cells)]
                chosen = remaining[:reveal]
            else:
                chosen = None  # picked below by confidence
            if cfg.token_mode == "discrete":
                lg = cfg_combine_logits(z_c @ emb.T, z_u @ emb.T, params.omega)
                probs = _softmax(apply_temperature_discrete(lg, params.tau))
                cand = np.empty(len(open_cells), dtype=np.int64)
                conf = np.empty(len(open_cells))
                for j, cell in enumerate(open_cells):
                    u = float(stream(params.seed, "rand-cat", first_image + b,
                                     int(cell), step).uniform())
                    cand[j] = _sample_categorical(probs[j], u)
                    conf[j] = probs[j, cand[j]]
                if chosen is None:
                    top = np.argsort(-conf, kind="stable")[:reveal]
                    chosen = open_cells[top]
                sel = np.isin(open_cells, chosen)
                ids[b, open_cells[sel]] = cand[sel]
            else:
                pick = np.searchsorted(open_cells, chosen)
                zc, zu = z_c[pick], z_u[pick]
                noise = np.stack([_token_noise(params.seed, first_image + b,
                                               int(cell), schedule.t_infer,
                                               cfg.token_dim)
                                  for cell in chosen], axis=1)
                x = sample_batch(head, zc, zu, schedule, params.omega, params.tau,
                                 lambda k, shape: noise[schedule.t_infer - k])
                vecs[b, chosen] = x
            mask[b, chosen] = False
            committed[b, chosen] += 1

    if mask.any() or not np.all(committed == 1):
        raise AssertionError("random-order decode failed to commit each cell exactly once")
    mode = cfg.token_mode
    rows = ids if mode == "discrete" else vecs
    return [_finish_grid(model, rows[b], mode) for b in range(B)]


def generate(model: Backbone, head, captions, params: SamplerParams,
             schedule: NoiseSchedule | None = None, count: int | None = None,
             first_image: int = 0) -> list:
    if model.cfg.order_mode == "raster":
        return generate_raster(model, head, captions, params, schedule, count,
                               first_image)
    return generate_random_order(model, head, captions, params, schedule, count,
                                 first_image)


def grid_to_image(grid: TokenGrid, codebook=None, patch: int = 4) -> np.ndarray:
    """Decode a generated grid to an image in [0, 1].

    Discrete ids go through the codebook; continuous grids come out of the
    sampler in model space and are mapped back to pixel space first.
    """
    from .tokenizer import dequantize, from_model_space, unpatchify
    if grid.mode == "discrete":
        if codebook is None:
            raise ValueError("discrete grids need the codebook to decode")
        cont = dequantize(grid, codebook)
    else:
        cont = TokenGrid(grid.rows, grid.cols, "continuous",
                         vectors=from_model_space(grid.vectors))
    return unpatchify(cont, patch)


# --- image files ---------------------------------------------------------------

def save_ppm(path, image: np.ndarray, caption_text: str | None = None):
    """Binary P6 PPM at 8 bits; optional caption sidecar next to it."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    h, w, _ = img.shape
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())
    if caption_text is not None:
        sidecar = str(path) + ".txt" if not str(path).endswith(".ppm") \
            else str(path)[:-4] + ".txt"
        with open(sidecar, "w") as f:
            f.write(caption_text + "\n")


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"not a binary PPM: {magic!r}")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = map(int, line.split())
        maxval = int(f.readline())
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval
