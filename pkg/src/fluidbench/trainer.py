"""Training recipe: AdamW with decoupled weight decay, linear warmup into a
constant or cosine learning-rate schedule, EMA shadow weights, cosine-shaped
masking-ratio sampling for random order, and 10% caption dropout for CFG.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import dataset as D
from . import tensor as T
from . import tokenizer as tk
from .backbone import Backbone, save_checkpoint
from .heads import DiffusionHead, NoiseSchedule, build_cosine_schedule, \
    categorical_logits, categorical_loss, diffusion_loss
from .rng import stream

__all__ = [
    "TrainConfig", "sample_mask_ratio", "mask_count", "lr_at",
    "adamw_step", "init_moments", "ema_update", "Trainer",
]


@dataclass
class TrainConfig:
    batch_size: int = 64
    total_steps: int = 2000
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.02
    lr_peak: float = 1e-4
    warmup_steps: int = 500
    lr_schedule: str = "constant"   # constant (continuous) | cosine (discrete)
    ema_decay: float = 0.9999
    cfg_dropout: float = 0.10
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0       # 0 = final checkpoint only
    val_t_draws: int = 4            # continuous validation t grid size
    dtype: str = "float64"          # float32 is the desk-speed training path

    def __post_init__(self):
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ValueError(f"cfg_dropout {self.cfg_dropout} outside [0,1]")
        if self.warmup_steps > self.total_steps:
            raise ValueError(f"warmup {self.warmup_steps} exceeds total {self.total_steps}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant|cosine, got {self.lr_schedule!r}")


def sample_mask_ratio(u: float) -> float:
    """Masking ratio for a uniform draw: cos(pi*u/2), from all to nearly none."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u={u} outside [0,1]")
    return float(np.cos(np.pi * u / 2.0))


def mask_count(ratio: float, n: int) -> int:
    """Tokens to mask: ceil with a floor of 1 so every step has a target."""
    return int(min(max(np.ceil(ratio * n), 1), n))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over warmup, then constant or cosine decay to 0."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if cfg.lr_schedule == "constant":
        return cfg.lr_peak
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    u = (step - cfg.warmup_steps) / span
    return cfg.lr_peak * 0.5 * (1.0 + np.cos(np.pi * u))


def init_moments(params: dict) -> dict:
    return {"m": {k: np.zeros_like(p.data) for k, p in params.items()},
            "v": {k: np.zeros_like(p.data) for k, p in params.items()}}


def adamw_step(params: dict, grads: dict, moments: dict, step: int,
               cfg: TrainConfig, lr: float | None = None, eps: float = 1e-8):
    """In-place decoupled-weight-decay AdamW with bias correction; step >= 1."""
    if step < 1:
        raise ValueError("adamw step index starts at 1")
    if lr is None:
        lr = cfg.lr_peak
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param {p.data.shape} for {name}")
        if T.is_checked() and not np.all(np.isfinite(g)):
            raise T.NumericsError(f"non-finite gradient for {name}")
        m = moments["m"][name]
        v = moments["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= lr * (update + cfg.weight_decay * p.data)
    return params, moments


def ema_update(ema: dict, params: dict, decay: float) -> dict:
    """ema' = decay*ema + (1-decay)*params, in place."""
    for name, p in params.items():
        e = ema[name]
        if e.shape != p.data.shape:
            raise ValueError(f"EMA shape {e.shape} != param {p.data.shape} for {name}")
        e *= decay
        e += (1.0 - decay) * p.data
    return ema


class Trainer:
    """Owns one model+head and drives the full recipe over the shapes dataset."""

    def __init__(self, model: Backbone, head: DiffusionHead | None,
                 cfg: TrainConfig, codebook: tk.Codebook | None = None,
                 schedule: NoiseSchedule | None = None):
        mc = model.cfg
        if mc.token_mode == "discrete" and codebook is None:
            raise ValueError("discrete training needs a codebook")
        if mc.token_mode == "continuous" and head is None:
            raise ValueError("continuous training needs a diffusion head")
        self.model = model
        self.head = head
        self.cfg = cfg
        self.codebook = codebook
        self.schedule = schedule or build_cosine_schedule()
        self.step = 0
        self.params: dict[str, T.Tensor] = dict(model.params)
        if head is not None:
            for k, v in head.params.items():
                self.params[f"head.{k}"] = v
        self.moments = init_moments(self.params)
        self.ema = {k: p.data.copy() for k, p in self.params.items()}
        self._data = D.train_scene_stream(cfg.seed)
        self._null_ids = D.caption_ids(D.NULL_CAPTION, mc.text_len)
        self.loss_history: list[float] = []
        self._fused_cache = None

    # --- batches -------------------------------------------------------------

    def next_batch(self):
        """(tokens, caption id rows) for one step; tokens per the model's token mode."""
        mc = self.model.cfg
        B = self.cfg.batch_size
        scenes = [next(self._data)[1] for _ in range(B)]
        imgs = np.stack([D.render(s) for s in scenes])
        patch = int(np.sqrt(mc.token_dim // 3))
        # batched patchify: same cell/pixel order as tokenizer.patchify
        vecs = (imgs.reshape(B, mc.rows, patch, mc.cols, patch, 3)
                    .transpose(0, 1, 3, 2, 4, 5)
                    .reshape(B, mc.n, mc.token_dim))
        caps = np.stack([D.caption_ids(D.caption_of(s), mc.text_len) for s in scenes])
        if mc.token_mode == "discrete":
            flat = vecs.reshape(-1, vecs.shape[-1])
            ids = tk.quantize(tk.TokenGrid(1, flat.shape[0], "continuous", vectors=flat),
                              self.codebook).ids
            return ids.reshape(B, -1), caps
        return tk.to_model_space(vecs), caps

    def _dropped_captions(self, caps: np.ndarray) -> np.ndarray:
        """Replace each caption with the NULL caption with probability cfg_dropout."""
        if self.cfg.cfg_dropout <= 0.0:
            return caps
        r = stream(self.cfg.seed, "cfg-dropout", self.step)
        drop = r.uniform(size=caps.shape[0]) < self.cfg.cfg_dropout
        out = caps.copy()
        out[drop] = self._null_ids
        return out

    # --- one step --------------------------------------------------------------

    def train_step(self, batch=None) -> float:
        """Forward, backward, clip, AdamW, EMA; returns the scalar loss."""
        self.step += 1
        if batch is None:
            batch = self.next_batch()
        tokens, caps = batch
        if len(caps) == 0:
            raise ValueError("empty batch")
        mc = self.model.cfg
        caps = self._dropped_captions(np.asarray(caps))
        dt = self.model.dtype
        if mc.token_mode == "continuous":
            tokens = np.asarray(tokens, dtype=dt)

        with T.checked(False), T.Graph() as g:
            text = self.model.apply_text_aligner(caps)
            if mc.order_mode == "raster":
                hidden = self.model.forward_raster(
                    tokens[:, :-1] if mc.token_mode == "discrete" else tokens[:, :-1, :], text)
                if mc.token_mode == "discrete":
                    logits = categorical_logits(hidden, self.model.params["vis_embed"])
                    loss = categorical_loss(logits, tokens)
                else:
                    B, n = tokens.shape[0], tokens.shape[1]
                    z = T.reshape(hidden, (B * n, mc.channels))
                    r = stream(self.cfg.seed, "diffusion", self.step)
                    loss = diffusion_loss(self.head, tokens.reshape(B * n, -1), z,
                                          self.schedule, r)
            else:
                mask = self._draw_masks(len(caps), mc.n)
                out = self.model.forward_masked(tokens, mask, text)
                sel = mask.reshape(-1)
                if mc.token_mode == "discrete":
                    logits = categorical_logits(out, self.model.params["vis_embed"])
                    loss = categorical_loss(logits, tokens.reshape(-1)[sel])
                else:
                    x0 = tokens.reshape(-1, mc.token_dim)[sel]
                    r = stream(self.cfg.seed, "diffusion", self.step)
                    loss = diffusion_loss(self.head, x0, out, self.schedule, r)

            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise T.NumericsError(f"non-finite training loss at step {self.step}")
            grads_map = g.backward(loss)

        grads = {name: grads_map[p] for name, p in self.params.items() if p in grads_map}
        lr = lr_at(self.step, self.cfg)
        if not self._fused_update(grads, lr):
            self._clip_grads(grads)
            adamw_step(self.params, grads, self.moments, self.step, self.cfg, lr=lr)
            ema_update(self.ema, self.params, self.cfg.ema_decay)
        for p in self.params.values():
            p.grad = None
        self.loss_history.append(loss_val)
        return loss_val

    def _draw_masks(self, batch: int, n: int) -> np.ndarray:
        ru = stream(self.cfg.seed, "mask-ratio", self.step)
        rp = stream(self.cfg.seed, "mask-pos", self.step)
        us = ru.uniform(size=batch)
        order = np.argsort(rp.uniform(size=(batch, n)), axis=1)
        mask = np.zeros((batch, n), dtype=bool)
        for b in range(batch):
            k = mask_count(sample_mask_ratio(us[b]), n)
            mask[b, order[b, :k]] = True
        return mask

    def _clip_grads(self, grads: dict):
        if self.cfg.grad_clip <= 0:
            return
        total = 0.0
        for name in sorted(grads):
            g = grads[name]
            total += float(np.vdot(g, g).real)
        norm = np.sqrt(total)
        if norm > self.cfg.grad_clip:
            scale = self.cfg.grad_clip / (norm + 1e-12)
            for g in grads.values():
                g *= scale

    def _fused_state(self, grads: dict):
        """Cached pointer arrays for the fused update; rebuilt if the gradient
        key set changes.  None when any buffer does not fit the C kernel."""
        names = sorted(grads)
        cached = self._fused_cache
        if cached is not None and cached[0] == names:
            return cached
        dt = None
        for name in names:
            p = self.params[name].data
            if not p.flags.c_contiguous or p.dtype not in (np.float32, np.float64):
                return None
            if dt is None:
                dt = p.dtype
            elif p.dtype != dt:
                return None
        sizes = np.array([self.params[n].data.size for n in names], dtype=np.intp)
        col = lambda arrs: np.array([a.ctypes.data for a in arrs], dtype=np.uintp)
        pptrs = col([self.params[n].data for n in names])
        mptrs = col([self.moments["m"][n] for n in names])
        vptrs = col([self.moments["v"][n] for n in names])
        eptrs = col([self.ema[n] for n in names])
        rest = [n for n in self.params if n not in grads]
        self._fused_cache = (names, dt, sizes, pptrs, mptrs, vptrs, eptrs, rest)
        return self._fused_cache

    def _fused_update(self, grads: dict, lr: float) -> bool:
        """Two-pass clip + AdamW + EMA through the compiled batch kernels.

        Same update rule as _clip_grads/adamw_step/ema_update to rounding;
        returns False when the kernel backend is unavailable so the caller
        runs the numpy path instead.
        """
        if not K.HAVE_C:
            return False
        state = self._fused_state(grads)
        if state is None:
            return False
        names, dt, sizes, pptrs, mptrs, vptrs, eptrs, rest = state
        for name in names:
            g = grads[name]
            if g.shape != self.params[name].data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != param {self.params[name].data.shape} for {name}")
            if g.dtype != dt or not g.flags.c_contiguous:
                return False
        gptrs = np.array([grads[n].ctypes.data for n in names], dtype=np.uintp)
        sq = K.sqsum_multi(gptrs, sizes, dt)
        if sq is None:
            return False
        if T.is_checked() and not np.all(np.isfinite(sq)):
            for name in names:
                if not np.all(np.isfinite(grads[name])):
                    raise T.NumericsError(f"non-finite gradient for {name}")
        norm = np.sqrt(float(sq.sum()))
        gscale = 1.0
        if 0 < self.cfg.grad_clip < norm:
            gscale = self.cfg.grad_clip / (norm + 1e-12)
        b1, b2 = self.cfg.betas
        ib1 = 1.0 / (1.0 - b1 ** self.step)
        ib2 = 1.0 / (1.0 - b2 ** self.step)
        decay = self.cfg.ema_decay
        K.adamw_ema_multi(pptrs, gptrs, mptrs, vptrs, eptrs, sizes, dt,
                          gscale, lr, b1, b2, 1e-8, self.cfg.weight_decay,
                          ib1, ib2, decay)
        for name in rest:
            e = self.ema[name]
            e *= decay
            e += (1.0 - decay) * self.params[name].data
        return True

    # --- full run ----------------------------------------------------------------

    def ema_model(self):
        """Backbone + head views over the EMA weights (no gradients)."""
        mc = self.model.cfg
        m_arrays = {k: v for k, v in self.ema.items() if not k.startswith("head.")}
        model = Backbone(mc, dtype=self.model.dtype, params=m_arrays)
        head = None
        if self.head is not None:
            h_arrays = {k[len("head."):]: v for k, v in self.ema.items()
                        if k.startswith("head.")}
            head = DiffusionHead(self.head.token_dim, self.head.channels,
                                 dtype=self.model.dtype, params=h_arrays)
        for p in model.params.values():
            p.requires_grad = False
        if head is not None:
            for p in head.params.values():
                p.requires_grad = False
        return model, head

    def checkpoint_tensors(self) -> dict:
        out = {}
        for k, p in self.params.items():
            key = f"head/{k[5:]}" if k.startswith("head.") else f"model/{k}"
            out[key] = p.data
        for k, v in self.ema.items():
            key = f"ema/head/{k[5:]}" if k.startswith("head.") else f"ema/model/{k}"
            out[key] = v
        return out

    def run(self, log_path=None, checkpoint_path=None, progress_every: int = 0) -> list:
        """Train cfg.total_steps steps; returns the loss history."""
        log = open(log_path, "a") if log_path else None
        if log and log.tell() == 0:
            log.write("step,lr,train_loss,wall_ms\r\n")
        try:
            while self.step < self.cfg.total_steps:
                t0 = time.perf_counter()
                loss = self.train_step()
                ms = (time.perf_counter() - t0) * 1e3
                if log:
                    log.write(f"{self.step},{lr_at(self.step, self.cfg):.10g},"
                              f"{loss:.10g},{ms:.3f}\r\n")
                if progress_every and self.step % progress_every == 0:
                    print(f"step {self.step}/{self.cfg.total_steps} loss {loss:.5f}",
                          flush=True)
                if (checkpoint_path and self.cfg.checkpoint_every
                        and self.step % self.cfg.checkpoint_every == 0):
                    save_checkpoint(checkpoint_path, self.model.cfg,
                                    self.checkpoint_tensors(), step=self.step)
            if checkpoint_path:
                save_checkpoint(checkpoint_path, self.model.cfg,
                                self.checkpoint_tensors(), step=self.step)
        finally:
            if log:
                log.close()
        return self.loss_history
