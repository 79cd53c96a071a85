"""Quantitative lenses: validation loss, Frechet feature distance over a
frozen random extractor ("dFID (desk)" in reports), programmatic caption
alignment, plus power-law fits, Pearson correlation, and compute accounting.

Absolute Frechet values are tied to the desk extractor and are only
comparable to each other, never to published numbers.
"""

from __future__ import annotations

import fcntl
import os
from dataclasses import dataclass, fields as dc_fields

import numpy as np
from scipy import ndimage

from . import dataset as D
from . import tensor as T
from .backbone import Backbone, ModelConfig
from .heads import DiffusionHead, NoiseSchedule, categorical_logits, \
    categorical_loss, diffusion_loss
from .rng import stream
from .tokenizer import Codebook, patchify, quantize, to_model_space
from .trainer import mask_count, sample_mask_ratio

__all__ = [
    "validation_loss", "feature_extract", "frechet_distance",
    "AlignmentScores", "alignment_score", "summarize_alignment",
    "detect_objects", "PowerLawFit", "fit_power_law", "pearson",
    "estimate_forward_flops", "training_compute",
    "RunRecord", "append_record", "read_records",
]


# --- validation loss ------------------------------------------------------------

def _scene_tokens(scenes, cfg: ModelConfig, codebook: Codebook | None):
    patch = int(round((cfg.token_dim // 3) ** 0.5))
    grids = [patchify(D.render(s), patch) for _, s in scenes]
    if cfg.token_mode == "discrete":
        if codebook is None:
            raise ValueError("discrete validation needs the codebook")
        return np.stack([quantize(g, codebook).ids for g in grids])
    return to_model_space(np.stack([g.vectors for g in grids]))


def _val_t_grid(t_train: int, draws: int) -> np.ndarray:
    """Fixed timestep grid: midpoints of `draws` equal slices of [1, T]."""
    return np.clip(np.round((np.arange(draws) + 0.5) / draws * t_train),
                   1, t_train).astype(np.int64)


def validation_loss(model: Backbone, head: DiffusionHead | None, scenes,
                    seed: int = 0, codebook: Codebook | None = None,
                    schedule: NoiseSchedule | None = None, draws: int = 4,
                    batch: int = 64) -> float:
    """Mean held-out loss under the training-time position regime.

    Deterministic: timesteps come from a fixed grid, noise and masks from
    streams keyed by (seed, draw, scene index), so repeated calls agree
    bitwise and batch size only moves the result at rounding level.  Pass
    EMA weights for reporting.
    """
    if len(scenes) == 0:
        raise ValueError("empty validation set")
    cfg = model.cfg
    if cfg.token_mode == "continuous":
        if head is None or schedule is None:
            raise ValueError("continuous validation needs head and schedule")
        t_grid = _val_t_grid(schedule.t_train, draws)
    d = cfg.token_dim
    total, weight = 0.0, 0
    for lo in range(0, len(scenes), batch):
        chunk = scenes[lo:lo + batch]
        idxs = [int(i) for i, _ in chunk]
        B = len(chunk)
        tokens = _scene_tokens(chunk, cfg, codebook)
        caps = np.stack([D.caption_ids(D.caption_of(s), cfg.text_len)
                         for _, s in chunk])
        with T.checked(False):
            text = model.apply_text_aligner(caps)
            if cfg.order_mode == "raster":
                out = model.forward_raster(tokens[:, :-1], text)
                if cfg.token_mode == "discrete":
                    logits = categorical_logits(out, model.params["vis_embed"])
                    loss = categorical_loss(logits, tokens).data
                    total += float(loss) * B * cfg.n
                    weight += B * cfg.n
                else:
                    x0 = tokens.reshape(B * cfg.n, d)
                    z = T.reshape(out, (B * cfg.n, cfg.channels))
                    for j, t in enumerate(t_grid):
                        eps = np.stack([stream(seed, "val-eps", j, i)
                                        .standard_normal((cfg.n, d))
                                        for i in idxs]).reshape(B * cfg.n, d)
                        t_idx = np.full(B * cfg.n, t, dtype=np.int64)
                        loss = diffusion_loss(head, x0, z, schedule, rng=None,
                                              t_idx=t_idx, eps=eps).data
                        total += float(loss) * B * cfg.n
                        weight += B * cfg.n
            else:
                for j in range(draws):
                    mask = np.zeros((B, cfg.n), dtype=bool)
                    for r, i in enumerate(idxs):
                        u = float(stream(seed, "val-mask-u", j, i).uniform())
                        m = mask_count(sample_mask_ratio(u), cfg.n)
                        order = np.argsort(
                            stream(seed, "val-mask-pos", j, i).uniform(size=cfg.n))
                        mask[r, order[:m]] = True
                    out = model.forward_masked(tokens, mask, text)
                    m_total = int(mask.sum())
                    if cfg.token_mode == "discrete":
                        logits = categorical_logits(out, model.params["vis_embed"])
                        target = tokens[mask]
                        loss = categorical_loss(logits, target).data
                    else:
                        x0 = tokens[mask]
                        t = t_grid[j % len(t_grid)]
                        eps = np.concatenate(
                            [stream(seed, "val-eps", j, i)
                             .standard_normal((cfg.n, d))[mask[r]]
                             for r, i in enumerate(idxs)])
                        t_idx = np.full(m_total, t, dtype=np.int64)
                        loss = diffusion_loss(head, x0, out, schedule, rng=None,
                                              t_idx=t_idx, eps=eps).data
                    total += float(loss) * m_total
                    weight += m_total
    return total / weight


# --- frozen feature extractor ---------------------------------------------------

FEATURE_SEED = 1815          # repo-wide constant; never change once results exist
FEATURE_DIM = 64
_FEATURE_CACHE = {}


def _feature_weights():
    # gain 1.5 keeps the tanh units usefully nonlinear without saturating;
    # together with quadrant pooling it keeps the covariance well-conditioned
    if "w" not in _FEATURE_CACHE:
        r = stream(FEATURE_SEED, "feature-extractor")
        w1 = 1.5 * r.standard_normal((5 * 5 * 3, 24)) / np.sqrt(5 * 5 * 3)
        b1 = 0.3 * r.standard_normal(24)
        w2 = 1.5 * r.standard_normal((3 * 3 * 24, 16)) / np.sqrt(3 * 3 * 24)
        b2 = 0.3 * r.standard_normal(16)
        _FEATURE_CACHE["w"] = (w1, b1, w2, b2)
    return _FEATURE_CACHE["w"]


def _conv(x, w, b, k, stride):
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]                       # (B, H', W', C, k, k)
    B, H, W = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B, H, W, -1)
    return np.tanh(cols @ w + b)


def feature_extract(images: np.ndarray) -> np.ndarray:
    """64-d summary from a frozen random two-layer conv net; deterministic.

    16 channels mean-pooled over the four spatial quadrants of the final
    map = 64 dims; quadrant pooling keeps location information.
    """
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1:] != (D.IMAGE_SIZE, D.IMAGE_SIZE, 3):
        raise ValueError(f"expected (*, {D.IMAGE_SIZE}, {D.IMAGE_SIZE}, 3), got {x.shape}")
    w1, b1, w2, b2 = _feature_weights()
    h = _conv(x, w1, b1, k=5, stride=2)                    # (B, 14, 14, 24)
    h = _conv(h, w2, b2, k=3, stride=2)                    # (B, 6, 6, 16)
    B = h.shape[0]
    feats = h.reshape(B, 2, 3, 2, 3, 16).mean(axis=(2, 4)).reshape(B, FEATURE_DIM)
    return feats[0] if single else feats


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """d^2 between Gaussian moment summaries of two feature sets.

    Covariance square roots use symmetric eigendecomposition; eigenvalues in
    [-1e-8, 0) are numerical noise and clamp to 0.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"need (N, d) feature sets, got {a.shape} and {b.shape}")
    if a.shape[0] <= a.shape[1] or b.shape[0] <= b.shape[1]:
        raise ValueError("need more samples than feature dimensions")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.cov(a, rowvar=False, ddof=1)
    cb = np.cov(b, rowvar=False, ddof=1)
    ca, cb = np.atleast_2d(ca), np.atleast_2d(cb)
    wa, va = np.linalg.eigh(ca)
    root_a = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    wm = np.linalg.eigvalsh(root_a @ cb @ root_a)
    trace_sqrt = float(np.sqrt(np.clip(wm, 0.0, None)).sum())
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb)
               - 2.0 * trace_sqrt)
    return max(d2, 0.0)


# --- caption alignment ----------------------------------------------------------

_PALETTE = [(name, np.array(rgb)) for name, rgb in D.COLORS.items()]
_ANCHORS = np.array([rgb for _, rgb in _PALETTE]
                    + [[g, g, g] for g in D.GRAYS])
MIN_BLOB_AREA = 8            # smallest rendered object covers 41 pixels
_SQUARE_FILL = 0.88          # squares fill their bounding box exactly
_CIRCLE_FILL = 0.56          # discrete circles ~0.61-0.67; triangles ~0.44-0.51


@dataclass(frozen=True)
class DetectedObject:
    color: str
    shape: str
    cell: tuple              # (row, col) in the 2x2 layout
    area: int


def detect_objects(image: np.ndarray) -> list:
    """Palette-nearest classification + connected components per color."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (D.IMAGE_SIZE, D.IMAGE_SIZE, 3):
        raise ValueError(f"expected ({D.IMAGE_SIZE}, {D.IMAGE_SIZE}, 3), got {img.shape}")
    dist = ((img[:, :, None, :] - _ANCHORS[None, None]) ** 2).sum(axis=-1)
    nearest = dist.argmin(axis=-1)
    found = []
    half = D.IMAGE_SIZE // 2
    for ci, (name, _) in enumerate(_PALETTE):
        labels, count = ndimage.label(nearest == ci)
        for blob in range(1, count + 1):
            ys, xs = np.nonzero(labels == blob)
            area = len(ys)
            if area < MIN_BLOB_AREA:
                continue
            h = ys.max() - ys.min() + 1
            w = xs.max() - xs.min() + 1
            fill = area / (h * w)
            if fill >= _SQUARE_FILL:
                shape = "square"
            elif fill >= _CIRCLE_FILL:
                shape = "circle"
            else:
                shape = "triangle"
            cell = (int(ys.mean()) // half, int(xs.mean()) // half)
            found.append(DetectedObject(name, shape, cell, area))
    found.sort(key=lambda o: o.cell)
    return found


@dataclass(frozen=True)
class AlignmentScores:
    """Per-category exact-match indicators; None marks a non-applicable
    category for this scene.  overall = mean of the applicable ones."""
    single_object: float | None
    two_objects: float | None
    counting: float | None
    colors: float | None
    position: float | None
    color_attribution: float | None
    overall: float


def alignment_score(image: np.ndarray, scene: D.Scene) -> AlignmentScores:
    detected = detect_objects(image)
    truth = [(o.color, o.shape, o.cell) for o in scene.objects]
    facts = D.parse_caption(D.caption_of(scene))
    det_pairs = sorted((o.color, o.shape) for o in detected)
    true_pairs = sorted((c, s) for c, s, _ in truth)
    pairs_match = float(det_pairs == true_pairs)

    single = pairs_match if len(truth) == 1 else None
    two = pairs_match if len(truth) == 2 else None
    counting = float(len(detected) == len(truth)) if facts.counted else None
    colors = float(sorted(o.color for o in detected)
                   == sorted(c for c, _, _ in truth))
    attribution = pairs_match if len(truth) >= 2 else None

    position = None
    if facts.relation is not None:
        position = 0.0
        first = [o for o in detected if (o.color, o.shape) == facts.items[0]]
        second = [o for o in detected if (o.color, o.shape) == facts.items[1]]
        if len(first) == 1 and len(second) == 1:
            a, b = first[0].cell, second[0].cell
            if facts.relation == "left_of":
                position = float(a[0] == b[0] and a[1] < b[1])
            else:
                position = float(a[1] == b[1] and a[0] < b[0])

    parts = [v for v in (single, two, counting, colors, position, attribution)
             if v is not None]
    overall = float(np.mean(parts)) if parts else 0.0
    return AlignmentScores(single, two, counting, colors, position,
                           attribution, overall)


def summarize_alignment(scores) -> dict:
    """Category means over the scenes where each category applies."""
    scores = list(scores)
    if not scores:
        raise ValueError("no alignment scores to summarize")
    out = {}
    for f in dc_fields(AlignmentScores):
        vals = [getattr(s, f.name) for s in scores]
        vals = [v for v in vals if v is not None]
        out[f.name] = float(np.mean(vals)) if vals else 0.0
    return out


# --- scaling analyses -----------------------------------------------------------

@dataclass(frozen=True)
class PowerLawFit:
    intercept: float         # a in log y = a + b log x
    exponent: float
    r_squared: float

    def predict(self, x):
        return np.exp(self.intercept) * np.asarray(x, dtype=np.float64) ** self.exponent


def fit_power_law(xs, ys) -> PowerLawFit:
    """Least squares on (log x, log y); exact on noiseless power-law data."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ValueError("need at least 3 paired points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit needs positive values")
    if len(np.unique(x)) != len(x):
        raise ValueError("x values must be distinct")
    lx, ly = np.log(x), np.log(y)
    dx = lx - lx.mean()
    dy = ly - ly.mean()
    b = float(dx @ dy / (dx @ dx))
    a = float(ly.mean() - b * lx.mean())
    resid = ly - (a + b * lx)
    ss_res = float(resid @ resid)
    ss_tot = float(dy @ dy)
    r2 = 1.0 if ss_tot < 1e-300 else max(0.0, 1.0 - ss_res / ss_tot)
    return PowerLawFit(a, b, r2)


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need at least 2 paired points")
    dx, dy = x - x.mean(), y - y.mean()
    vx, vy = float(dx @ dx), float(dy @ dy)
    if vx == 0.0 or vy == 0.0:
        raise ValueError("zero variance")
    return float(np.clip(dx @ dy / np.sqrt(vx * vy), -1.0, 1.0))


def estimate_forward_flops(cfg: ModelConfig, head_blocks: int = 6) -> float:
    """Matmul + attention FLOPs for one image's training forward.

    2 * weight_params * positions for every projection, keyed to the
    sequence each one actually runs over (grid n vs caption length L), plus
    4 * positions^2 * channels per attention.  Lookups, biases, and norms
    are free, matching what the instrumented counter measures.
    """
    c, n, L = cfg.channels, cfg.n, cfg.text_len
    d = cfg.token_dim
    per_pos_block = 14 * c * c            # qkv + attn_out + ca_q + ca_out + mlp
    per_text_block = 2 * c * c            # ca_kv reads the caption
    per_pos_aligner = 12 * c * c          # qkv + attn_out + mlp
    mm = cfg.blocks * (per_pos_block * n + per_text_block * L)
    mm += cfg.aligner_blocks * per_pos_aligner * L + c * c * L
    if cfg.token_mode == "continuous":
        mm += d * c * n                                    # input projection
        mm += (2 * d * c + (2 + 2 * head_blocks) * c * c) * n
    else:
        mm += c * cfg.vocab * n                            # tied output logits
    attn = 4 * n * n * c * cfg.blocks + 4 * n * L * c * cfg.blocks \
        + 4 * L * L * c * cfg.aligner_blocks
    return float(2 * mm + attn)


def training_compute(forward_flops: float, batch: int, steps: int) -> float:
    """Total training FLOPs: forward * batch * steps * 3 (backward factor)."""
    if forward_flops <= 0 or batch <= 0 or steps <= 0:
        raise ValueError("all inputs must be positive")
    return 3.0 * forward_flops * batch * steps


# --- run records ----------------------------------------------------------------

RECORD_FIELDS = [
    "name", "order_mode", "token_mode", "scale", "params", "compute",
    "val_loss", "frechet", "align_overall", "align_single", "align_two",
    "align_counting", "align_colors", "align_position", "align_attribution",
]


@dataclass(frozen=True)
class RunRecord:
    name: str
    order_mode: str
    token_mode: str
    scale: str
    params: int
    compute: float
    val_loss: float
    frechet: float
    align_overall: float
    align_single: float
    align_two: float
    align_counting: float
    align_colors: float
    align_position: float
    align_attribution: float

    def __post_init__(self):
        for f in RECORD_FIELDS[4:]:
            v = float(getattr(self, f))
            if not np.isfinite(v):
                raise ValueError(f"{f} must be finite, got {v}")
        for f in RECORD_FIELDS[8:]:
            v = float(getattr(self, f))
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{f} must be in [0,1], got {v}")

    def row(self) -> str:
        cells = [self.name, self.order_mode, self.token_mode, self.scale,
                 str(self.params)] + [repr(float(getattr(self, f)))
                                      for f in RECORD_FIELDS[5:]]
        return ",".join(cells)


def append_record(path, record: RunRecord):
    """Append one CSV row under an exclusive lock; header on first write."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        fcntl.flock(f.fileno(), fcntl.LOCK_EX)
        try:
            if new:
                f.write(",".join(RECORD_FIELDS) + "\r\n")
            f.write(record.row() + "\r\n")
            f.flush()
        finally:
            fcntl.flock(f.fileno(), fcntl.LOCK_UN)


def read_records(path) -> list:
    with open(path, newline="") as f:
        lines = [ln for ln in f.read().split("\r\n") if ln]
    if not lines or lines[0] != ",".join(RECORD_FIELDS):
        raise ValueError(f"{path}: not a run-record file")
    out = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(RECORD_FIELDS):
            raise ValueError(f"{path}: malformed row {ln!r}")
        out.append(RunRecord(cells[0], cells[1], cells[2], cells[3],
                             int(cells[4]), *map(float, cells[5:])))
    return out


SWEEP_FIELDS = ["name", "omega", "tau", "frechet", "align_overall"]


@dataclass(frozen=True)
class SweepRecord:
    """One sampler grid point's metrics for a trained run."""
    name: str
    omega: float
    tau: float
    frechet: float
    align_overall: float


def append_sweep(path, row: SweepRecord):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        fcntl.flock(f.fileno(), fcntl.LOCK_EX)
        try:
            if new:
                f.write(",".join(SWEEP_FIELDS) + "\r\n")
            f.write(",".join([row.name] + [repr(float(getattr(row, k)))
                                           for k in SWEEP_FIELDS[1:]]) + "\r\n")
            f.flush()
        finally:
            fcntl.flock(f.fileno(), fcntl.LOCK_UN)


def read_sweep(path) -> list:
    with open(path, newline="") as f:
        lines = [ln for ln in f.read().split("\r\n") if ln]
    if not lines or lines[0] != ",".join(SWEEP_FIELDS):
        raise ValueError(f"{path}: not a sweep file")
    out = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(SWEEP_FIELDS):
            raise ValueError(f"{path}: malformed row {ln!r}")
        out.append(SweepRecord(cells[0], *map(float, cells[1:])))
    return out
