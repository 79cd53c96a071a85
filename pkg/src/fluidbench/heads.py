"""Output heads: per-token diffusion (continuous) and weight-tied categorical
(discrete).

The diffusion head is a six-block residual MLP predicting the noise added to
a token; the schedule is a cosine with an offset, built at T_train steps and
resampled to T_infer for ancestral sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import stream

__all__ = [
    "NoiseSchedule", "build_cosine_schedule", "DiffusionHead",
    "diffusion_loss", "diffusion_sample", "sample_batch", "cfg_combine_eps",
    "categorical_logits", "categorical_loss",
]


@dataclass
class NoiseSchedule:
    t_train: int
    t_infer: int
    alpha_bar: np.ndarray       # (t_train+1,), alpha_bar[0] = 1, strictly decreasing
    infer_to_train: np.ndarray  # (t_infer+1,) ints, strictly increasing, endpoints pinned

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.t_train + 1,):
            raise ValueError(f"alpha_bar length {ab.shape} != t_train+1 = {self.t_train + 1}")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0.0 or np.any(ab > 1.0):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        m = np.asarray(self.infer_to_train)
        if m.shape != (self.t_infer + 1,) or m[0] != 0 or m[-1] != self.t_train:
            raise ValueError("infer_to_train must map endpoints to endpoints")
        if np.any(np.diff(m) <= 0):
            raise ValueError("infer_to_train must be strictly increasing")
        self.alpha_bar = ab
        self.infer_to_train = m.astype(np.int64)


def build_cosine_schedule(t_train: int = 1000, t_infer: int = 100,
                          s: float = 0.008) -> NoiseSchedule:
    """Cosine alpha_bar with offset; betas clipped at 0.999 then re-accumulated."""
    if t_train < 1 or t_infer < 1 or t_infer > t_train:
        raise ValueError(f"need 1 <= t_infer <= t_train, got {t_infer}/{t_train}")
    t = np.arange(t_train + 1, dtype=np.float64)
    f = np.cos(((t / t_train + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    raw = f / f[0]
    betas = 1.0 - raw[1:] / raw[:-1]
    betas = np.clip(betas, 1e-8, 0.999)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    idx = np.round(np.arange(t_infer + 1) * (t_train / t_infer)).astype(np.int64)
    return NoiseSchedule(t_train, t_infer, alpha_bar, idx)


def _timestep_embedding_raw(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


_TEMB_TABLES: dict[int, np.ndarray] = {}


def _timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, (N, dim).

    Integer steps are served from a lazily grown lookup table; each row is
    the same elementwise sin/cos product as the direct computation.
    """
    t = np.asarray(t)
    if t.ndim == 1 and t.dtype.kind in "iu" and t.size and int(t.min()) >= 0:
        hi = int(t.max())
        table = _TEMB_TABLES.get(dim)
        if table is None or table.shape[0] <= hi:
            size = max(hi + 1, 1024)
            table = _timestep_embedding_raw(np.arange(size), dim)
            _TEMB_TABLES[dim] = table
        return table[t]
    return _timestep_embedding_raw(t, dim)


class DiffusionHead:
    """Six residual MLP blocks mapping (x_t, t, z) -> predicted noise."""

    BLOCKS = 6

    def __init__(self, token_dim: int, channels: int, seed: int = 0,
                 dtype=np.float64, params=None):
        self.token_dim = token_dim
        self.channels = channels
        self.params: dict[str, T.Tensor] = {}
        if params is not None:
            for name, arr in params.items():
                self.params[name] = T.Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)
            return
        r = stream(seed, "diffusion-head-init")
        scale = 1.0 / np.sqrt(2.0 * self.BLOCKS)

        def tn(*shape, sc=1.0):
            x = r.normal(size=shape) * (0.02 * sc)
            return np.clip(x, -0.04 * sc, 0.04 * sc)

        def param(name, arr):
            self.params[name] = T.Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

        c, d = channels, token_dim
        param("in_w", tn(d, c))
        param("in_b", np.zeros(c))
        param("t_w1", tn(c, c))
        param("t_b1", np.zeros(c))
        param("t_w2", tn(c, c))
        param("t_b2", np.zeros(c))
        for i in range(self.BLOCKS):
            p = f"mlp{i}"
            param(f"{p}.ln_g", np.ones(c))
            param(f"{p}.ln_b", np.zeros(c))
            param(f"{p}.fc1_w", tn(c, c))
            param(f"{p}.fc1_b", np.zeros(c))
            param(f"{p}.fc2_w", tn(c, c, sc=scale))
            param(f"{p}.fc2_b", np.zeros(c))
        param("out_ln_g", np.ones(c))
        param("out_ln_b", np.zeros(c))
        param("out_w", np.zeros((c, d)))  # zero-init output: untrained head predicts 0
        param("out_b", np.zeros(d))

    @property
    def dtype(self):
        return self.params["in_w"].data.dtype

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def param_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def forward(self, x_t, t_idx: np.ndarray, z) -> T.Tensor:
        """Predict noise for (N, d) noisy tokens at integer steps with (N, c) conditioning."""
        p = self.params
        xt = x_t if isinstance(x_t, T.Tensor) else T.Tensor(np.asarray(x_t, dtype=self.dtype))
        if xt.data.shape[-1] != self.token_dim:
            raise ValueError(f"token dim {xt.data.shape[-1]} != {self.token_dim}")
        temb = T.Tensor(_timestep_embedding(t_idx, self.channels).astype(self.dtype))
        tcond = T.linear(T.gelu(T.linear(temb, p["t_w1"], p["t_b1"])), p["t_w2"], p["t_b2"])
        h = T.add(T.linear(xt, p["in_w"], p["in_b"]), T.add(tcond, z))
        for i in range(self.BLOCKS):
            pre = f"mlp{i}"
            u = T.layer_norm(h, p[f"{pre}.ln_g"], p[f"{pre}.ln_b"])
            u = T.gelu(T.linear(u, p[f"{pre}.fc1_w"], p[f"{pre}.fc1_b"]))
            u = T.linear(u, p[f"{pre}.fc2_w"], p[f"{pre}.fc2_b"])
            h = T.add(h, u)
        h = T.layer_norm(h, p["out_ln_g"], p["out_ln_b"])
        return T.linear(h, p["out_w"], p["out_b"])


def diffusion_loss(head: DiffusionHead, x0, z, schedule: NoiseSchedule, rng,
                   t_idx: np.ndarray | None = None,
                   eps: np.ndarray | None = None) -> T.Tensor:
    """One-draw denoising loss: corrupt x0 at a uniform step, regress the noise.

    Explicit (t_idx, eps) override the rng draws so validation can fix them.
    """
    x0 = np.asarray(x0.data if isinstance(x0, T.Tensor) else x0)
    single = x0.ndim == 1
    if single:
        x0 = x0[None, :]
    n = x0.shape[0]
    if t_idx is None:
        t_idx = rng.integers(1, schedule.t_train + 1, size=n)
    if eps is None:
        eps = rng.standard_normal(size=x0.shape)
    t_idx = np.asarray(t_idx)
    eps = np.asarray(eps, dtype=x0.dtype)
    ab = schedule.alpha_bar[t_idx][:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    pred = head.forward(x_t.astype(head.dtype), t_idx, z)
    return T.mse_loss(pred, T.Tensor(eps.astype(head.dtype)))


def cfg_combine_eps(eps_c: np.ndarray, eps_u: np.ndarray, omega: float) -> np.ndarray:
    """Guided noise: eps_u + omega * (eps_c - eps_u)."""
    eps_c = np.asarray(eps_c)
    eps_u = np.asarray(eps_u)
    if eps_c.shape != eps_u.shape:
        raise ValueError(f"shape mismatch {eps_c.shape} vs {eps_u.shape}")
    return eps_u + omega * (eps_c - eps_u)


def sample_batch(head: DiffusionHead, z_c: np.ndarray, z_u: np.ndarray | None,
                 schedule: NoiseSchedule, omega: float, tau: float,
                 noise_fn) -> np.ndarray:
    """Ancestral sampling for (N, d) tokens over the resampled schedule.

    ``noise_fn(k, shape)`` supplies the Gaussian draws: k = t_infer for the
    initial x_T, then the per-step injected noise keyed by step index.  The
    final step emits the posterior mean.  Runs gradient-free.  tau=0 makes
    the walk deterministic given the x_T draw.
    """
    if omega < 0 or tau < 0:
        raise ValueError(f"need omega >= 0 and tau >= 0, got {omega}/{tau}")
    z_c = np.asarray(z_c)
    n = z_c.shape[0]
    d = head.token_dim
    guided = z_u is not None
    zz = np.concatenate([z_c, np.asarray(z_u)], axis=0) if guided else z_c
    ab = schedule.alpha_bar
    m = schedule.infer_to_train
    x = noise_fn(schedule.t_infer, (n, d))
    with T.checked(False):
        for k in range(schedule.t_infer, 0, -1):
            t, t_prev = int(m[k]), int(m[k - 1])
            abt, abp = ab[t], ab[t_prev]
            alpha = abt / abp
            beta = 1.0 - alpha
            tvec = np.full(2 * n if guided else n, t, dtype=np.int64)
            xx = np.concatenate([x, x], axis=0) if guided else x
            eps = head.forward(xx.astype(head.dtype), tvec, T.Tensor(zz.astype(head.dtype))).data
            eps_hat = cfg_combine_eps(eps[:n], eps[n:], omega) if guided else eps[:n]
            mean = (x - beta / np.sqrt(1.0 - abt) * eps_hat) / np.sqrt(alpha)
            if k > 1:
                sigma = np.sqrt((1.0 - abp) / (1.0 - abt) * beta)
                x = mean + tau * sigma * noise_fn(k - 1, (n, d))
            else:
                x = mean
    return x


def diffusion_sample(head: DiffusionHead, z_c, z_u, schedule: NoiseSchedule,
                     omega: float, tau: float, rng) -> np.ndarray:
    """Sample one token (d,) given conditional/unconditional conditioning vectors."""
    z_c = np.asarray(z_c).reshape(1, -1)
    z_u = None if z_u is None else np.asarray(z_u).reshape(1, -1)

    def noise_fn(_k, shape):
        return rng.standard_normal(size=shape)

    return sample_batch(head, z_c, z_u, schedule, omega, tau, noise_fn)[0]


def categorical_logits(hidden, embed_table) -> T.Tensor:
    """Weight-tied logits: hidden @ transpose(input embedding)."""
    table = embed_table if isinstance(embed_table, T.Tensor) else T.Tensor(embed_table)
    h = hidden if isinstance(hidden, T.Tensor) else T.Tensor(hidden)
    if h.data.shape[-1] != table.data.shape[1]:
        raise ValueError(
            f"hidden width {h.data.shape[-1]} != embedding width {table.data.shape[1]}")
    return T.matmul(h, T.transpose(table, (1, 0)))


def categorical_loss(logits, target_ids) -> T.Tensor:
    """Mean cross-entropy over the predicted positions."""
    lg = logits if isinstance(logits, T.Tensor) else T.Tensor(logits)
    if lg.data.ndim == 3:
        b, n, v = lg.data.shape
        lg = T.reshape(lg, (b * n, v))
        target_ids = np.asarray(target_ids).reshape(-1)
    return T.cross_entropy(lg, np.asarray(target_ids))
