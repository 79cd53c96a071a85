"""Decoder-only transformer backbone with two attention regimes.

Raster mode uses causal self-attention and supports kv-cached incremental
decoding; random mode uses bidirectional self-attention with a learnable
mask embedding.  Both share cross-attention into a trainable text aligner.
Block layout is pre-norm self-attention -> cross-attention -> MLP (ratio 4).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .dataset import VOCAB, MAX_CAPTION_LEN
from .rng import stream

__all__ = [
    "ModelConfig", "Backbone", "RasterCache", "config_ladder", "SCALE_NAMES",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]

SCALE_NAMES = ("S", "M", "L", "XL")
_LADDER = ((2, 64, 4), (4, 96, 6), (6, 128, 8), (8, 192, 12))
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    order_mode: str = "random"        # raster | random
    token_mode: str = "continuous"    # discrete | continuous
    blocks: int = 2
    channels: int = 64
    heads: int = 4
    aligner_blocks: int = 2
    vocab: int = 512                  # discrete codebook size
    token_dim: int = 48               # continuous token dimension
    rows: int = 8
    cols: int = 8
    text_len: int = MAX_CAPTION_LEN
    text_vocab: int = len(VOCAB)

    def __post_init__(self):
        if self.order_mode not in ("raster", "random"):
            raise ValueError(f"order_mode must be raster|random, got {self.order_mode!r}")
        if self.token_mode not in ("discrete", "continuous"):
            raise ValueError(f"token_mode must be discrete|continuous, got {self.token_mode!r}")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")

    @property
    def n(self) -> int:
        return self.rows * self.cols


def config_ladder(scale, order_mode: str = "random", token_mode: str = "continuous",
                  **overrides) -> ModelConfig:
    """Desk ladder S/M/L/XL = (blocks, channels, heads) per rung."""
    if isinstance(scale, str):
        if scale not in SCALE_NAMES:
            raise ValueError(f"unknown scale {scale!r}, expected one of {SCALE_NAMES}")
        scale = SCALE_NAMES.index(scale)
    if not 0 <= scale < len(_LADDER):
        raise ValueError(f"scale index {scale} out of range [0, {len(_LADDER)})")
    b, c, h = _LADDER[scale]
    return ModelConfig(order_mode=order_mode, token_mode=token_mode,
                       blocks=b, channels=c, heads=h, **overrides)


class Backbone:
    """Transformer over token grids; owns all backbone parameters."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64, params=None):
        self.cfg = cfg
        self.params: dict[str, T.Tensor] = {}
        if params is not None:
            for name, arr in params.items():
                self.params[name] = T.Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)
        else:
            self._init_params(seed, dtype)
        self._row_ids = np.arange(cfg.n) // cfg.cols
        self._col_ids = np.arange(cfg.n) % cfg.cols

    def _init_params(self, seed: int, dtype):
        cfg = self.cfg
        c = cfg.channels
        r = stream(seed, "backbone-init")
        resid_scale = 1.0 / np.sqrt(2.0 * max(cfg.blocks, 1))

        def tn(*shape, scale=1.0):
            x = r.normal(size=shape) * (0.02 * scale)
            return np.clip(x, -0.04 * scale, 0.04 * scale)

        def param(name, arr):
            self.params[name] = T.Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

        if cfg.token_mode == "discrete":
            param("vis_embed", tn(cfg.vocab, c))
        else:
            param("vis_in_w", tn(cfg.token_dim, c))
            param("vis_in_b", np.zeros(c))
        if cfg.order_mode == "raster":
            param("bos", tn(c))
        else:
            param("mask_tok", tn(c))
        param("pos_row", tn(cfg.rows, c))
        param("pos_col", tn(cfg.cols, c))

        param("text_embed", tn(cfg.text_vocab, c))
        param("text_pos", tn(cfg.text_len, c))
        param("text_proj_w", tn(c, c))
        param("text_proj_b", np.zeros(c))
        for i in range(cfg.aligner_blocks):
            p = f"al{i}"
            param(f"{p}.ln1_g", np.ones(c))
            param(f"{p}.ln1_b", np.zeros(c))
            param(f"{p}.qkv_w", tn(c, 3 * c))
            param(f"{p}.qkv_b", np.zeros(3 * c))
            param(f"{p}.attn_out_w", tn(c, c, scale=resid_scale))
            param(f"{p}.attn_out_b", np.zeros(c))
            param(f"{p}.ln2_g", np.ones(c))
            param(f"{p}.ln2_b", np.zeros(c))
            param(f"{p}.mlp_fc_w", tn(c, 4 * c))
            param(f"{p}.mlp_fc_b", np.zeros(4 * c))
            param(f"{p}.mlp_out_w", tn(4 * c, c, scale=resid_scale))
            param(f"{p}.mlp_out_b", np.zeros(c))

        for i in range(cfg.blocks):
            p = f"blk{i}"
            param(f"{p}.ln1_g", np.ones(c))
            param(f"{p}.ln1_b", np.zeros(c))
            param(f"{p}.qkv_w", tn(c, 3 * c))
            param(f"{p}.qkv_b", np.zeros(3 * c))
            param(f"{p}.attn_out_w", tn(c, c, scale=resid_scale))
            param(f"{p}.attn_out_b", np.zeros(c))
            param(f"{p}.ln_ca_g", np.ones(c))
            param(f"{p}.ln_ca_b", np.zeros(c))
            param(f"{p}.ca_q_w", tn(c, c))
            param(f"{p}.ca_q_b", np.zeros(c))
            param(f"{p}.ca_kv_w", tn(c, 2 * c))
            param(f"{p}.ca_kv_b", np.zeros(2 * c))
            param(f"{p}.ca_out_w", tn(c, c, scale=resid_scale))
            param(f"{p}.ca_out_b", np.zeros(c))
            param(f"{p}.ln2_g", np.ones(c))
            param(f"{p}.ln2_b", np.zeros(c))
            param(f"{p}.mlp_fc_w", tn(c, 4 * c))
            param(f"{p}.mlp_fc_b", np.zeros(4 * c))
            param(f"{p}.mlp_out_w", tn(4 * c, c, scale=resid_scale))
            param(f"{p}.mlp_out_b", np.zeros(c))
        param("final_ln_g", np.ones(c))
        param("final_ln_b", np.zeros(c))

    # --- bookkeeping ---------------------------------------------------------

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def param_count(self, include_text_table: bool = True) -> int:
        total = 0
        for name, p in self.params.items():
            if not include_text_table and name == "text_embed":
                continue
            total += p.data.size
        return total

    def param_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    # --- shared pieces ---------------------------------------------------------

    def _self_attn(self, x, prefix, causal):
        p = self.params
        h = T.layer_norm(x, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
        qkv = T.linear(h, p[f"{prefix}.qkv_w"], p[f"{prefix}.qkv_b"])
        a = T.attention_packed(qkv, self.cfg.heads, causal=causal)
        return T.add(x, T.linear(a, p[f"{prefix}.attn_out_w"], p[f"{prefix}.attn_out_b"]))

    def _cross_attn(self, x, text, prefix):
        p = self.params
        h = T.layer_norm(x, p[f"{prefix}.ln_ca_g"], p[f"{prefix}.ln_ca_b"])
        q = T.linear(h, p[f"{prefix}.ca_q_w"], p[f"{prefix}.ca_q_b"])
        kv = T.linear(text, p[f"{prefix}.ca_kv_w"], p[f"{prefix}.ca_kv_b"])
        a = T.attention_kv_packed(q, kv, self.cfg.heads)
        return T.add(x, T.linear(a, p[f"{prefix}.ca_out_w"], p[f"{prefix}.ca_out_b"]))

    def _mlp(self, x, prefix):
        p = self.params
        h = T.layer_norm(x, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])
        h = T.gelu(T.linear(h, p[f"{prefix}.mlp_fc_w"], p[f"{prefix}.mlp_fc_b"]))
        return T.add(x, T.linear(h, p[f"{prefix}.mlp_out_w"], p[f"{prefix}.mlp_out_b"]))

    def _blocks(self, x, text, causal):
        for i in range(self.cfg.blocks):
            prefix = f"blk{i}"
            x = self._self_attn(x, prefix, causal)
            x = self._cross_attn(x, text, prefix)
            x = self._mlp(x, prefix)
        return T.layer_norm(x, self.params["final_ln_g"], self.params["final_ln_b"])

    # --- text path -------------------------------------------------------------

    def apply_text_aligner(self, caption_ids: np.ndarray) -> T.Tensor:
        """Embed caption ids (B, L) and run the aligner blocks; returns (B, L, c)."""
        p = self.params
        ids = np.asarray(caption_ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] != self.cfg.text_len:
            raise ValueError(f"caption length {ids.shape[1]} != text_len {self.cfg.text_len}")
        x = T.add(T.embedding(ids, p["text_embed"]), p["text_pos"])
        x = T.linear(x, p["text_proj_w"], p["text_proj_b"])
        for i in range(self.cfg.aligner_blocks):
            x = self._self_attn(x, f"al{i}", causal=False)
            x = self._mlp(x, f"al{i}")
        return x

    # --- visual embeddings ------------------------------------------------------

    def embed_tokens(self, tokens) -> T.Tensor:
        """Token content embedding: ids (B, k) or vectors (B, k, d) -> (B, k, c)."""
        p = self.params
        if self.cfg.token_mode == "discrete":
            ids = np.asarray(tokens)
            return T.embedding(ids, p["vis_embed"])
        vec = tokens if isinstance(tokens, T.Tensor) else T.Tensor(np.asarray(tokens, dtype=self.dtype))
        return T.linear(vec, p["vis_in_w"], p["vis_in_b"])

    def position_embedding(self, positions=None) -> T.Tensor:
        """Additive 2-D positional embedding for the given flat cell indices."""
        p = self.params
        if positions is None:
            rows, cols = self._row_ids, self._col_ids
        else:
            positions = np.asarray(positions)
            rows, cols = positions // self.cfg.cols, positions % self.cfg.cols
        return T.add(T.embedding(rows, p["pos_row"]), T.embedding(cols, p["pos_col"]))

    # --- forward passes -----------------------------------------------------------

    def forward_raster(self, tokens, text: T.Tensor) -> T.Tensor:
        """Teacher-forced causal forward.

        ``tokens`` holds the first k grid tokens (k <= n-1); input slot 0 is the
        learned begin vector and slot i is token i-1, each at the positional
        embedding of its target cell.  Returns k+1 output vectors; output i is
        the context for predicting token i.
        """
        if self.cfg.order_mode != "raster":
            raise ValueError("forward_raster on a random-order model")
        tok = np.asarray(tokens.data if isinstance(tokens, T.Tensor) else tokens)
        B = tok.shape[0]
        k = tok.shape[1]
        if k > self.cfg.n - 1:
            raise ValueError(f"prefix of {k} tokens leaves no cell to predict (n={self.cfg.n})")
        c = self.cfg.channels
        bos = T.reshape(self.params["bos"], (1, 1, c))
        bos = T.add(T.Tensor(np.zeros((B, 1, c), dtype=self.dtype)), bos)
        if k:
            x = T.concat([bos, self.embed_tokens(tokens)], axis=1)
        else:
            x = bos
        x = T.add(x, self.position_embedding(np.arange(k + 1)))
        return self._blocks(x, text, causal=True)

    def forward_masked(self, tokens, mask: np.ndarray, text: T.Tensor,
                       return_hidden: bool = False):
        """Bidirectional forward; returns outputs at masked positions (M, c).

        ``tokens`` covers the full grid; masked cells are replaced by the
        learnable mask embedding before attention.  Gather order is sample-major
        then cell-major.
        """
        if self.cfg.order_mode != "random":
            raise ValueError("forward_masked on a raster model")
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[None, :]
        B, n = mask.shape
        if n != self.cfg.n:
            raise ValueError(f"mask covers {n} cells, model expects {self.cfg.n}")
        if not mask.any():
            raise ValueError("forward_masked requires at least one masked position")
        c = self.cfg.channels
        emb = self.embed_tokens(tokens)
        keep = (~mask)[:, :, None].astype(self.dtype)
        m = mask[:, :, None].astype(self.dtype)
        mix = T.add(T.mul(emb, T.Tensor(keep)),
                    T.mul(T.reshape(self.params["mask_tok"], (1, 1, c)), T.Tensor(m)))
        x = T.add(mix, self.position_embedding())
        hidden = self._blocks(x, text, causal=False)
        flat = T.reshape(hidden, (B * n, c))
        out = T.take_rows(flat, np.flatnonzero(mask.reshape(-1)))
        if return_hidden:
            return out, hidden
        return out

    def start_cache(self, batch: int, text: T.Tensor) -> "RasterCache":
        return RasterCache(self, batch, text)


class RasterCache:
    """Incremental kv-cached decode session for one raster generation run."""

    def __init__(self, model: Backbone, batch: int, text: T.Tensor):
        if model.cfg.order_mode != "raster":
            raise ValueError("kv cache only applies to raster mode")
        self.model = model
        self.batch = batch
        cfg = model.cfg
        self.filled = 0
        dt = model.dtype
        self.k = [np.empty((batch, cfg.n, cfg.channels), dtype=dt) for _ in range(cfg.blocks)]
        self.v = [np.empty((batch, cfg.n, cfg.channels), dtype=dt) for _ in range(cfg.blocks)]
        # text keys/values are static for the session: precompute per block
        self.text_kv = []
        c = cfg.channels
        with T.checked(False):
            for i in range(cfg.blocks):
                p = model.params
                kv = T.add(T.matmul(text, p[f"blk{i}.ca_kv_w"]), p[f"blk{i}.ca_kv_b"]).data
                self.text_kv.append((kv[..., :c], kv[..., c:]))

    def decode_step(self, token) -> np.ndarray:
        """Feed one slot (None = begin token) and return its output vector (B, c).

        The slot index is the current fill count; its positional embedding is the
        cell the output will predict.
        """
        model, cfg = self.model, self.model.cfg
        if self.filled >= cfg.n:
            raise ValueError(f"cache already holds {cfg.n} slots")
        B, c = self.batch, cfg.channels
        p = model.params
        slot = self.filled
        with T.checked(False):
            if token is None:
                if slot != 0:
                    raise ValueError("begin token only valid at slot 0")
                x = np.broadcast_to(p["bos"].data, (B, 1, c)).copy()
            else:
                emb = model.embed_tokens(np.asarray(token).reshape(B, 1, -1)
                                         if cfg.token_mode == "continuous"
                                         else np.asarray(token).reshape(B, 1))
                x = emb.data.copy()
            x += model.position_embedding(np.array([slot])).data
            for i in range(cfg.blocks):
                x = self._block_step(x, i)
            g, b = p["final_ln_g"].data, p["final_ln_b"].data
            mu = x.mean(axis=-1, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=-1, keepdims=True)
            x = xc / np.sqrt(var + 1e-10) * g + b
        self.filled += 1
        return x[:, 0, :]

    def _block_step(self, x, i):
        model, cfg = self.model, self.model.cfg
        p = model.params
        B, c, nh = self.batch, cfg.channels, cfg.heads
        dh = c // nh
        pre = f"blk{i}"

        def ln(v, g, b):
            mu = v.mean(axis=-1, keepdims=True)
            vc = v - mu
            var = (vc * vc).mean(axis=-1, keepdims=True)
            return vc / np.sqrt(var + 1e-10) * g + b

        h = ln(x, p[f"{pre}.ln1_g"].data, p[f"{pre}.ln1_b"].data)
        qkv = h @ p[f"{pre}.qkv_w"].data + p[f"{pre}.qkv_b"].data
        q, k, v = qkv[..., :c], qkv[..., c:2 * c], qkv[..., 2 * c:]
        self.k[i][:, self.filled] = k[:, 0]
        self.v[i][:, self.filled] = v[:, 0]
        nk = self.filled + 1
        qh = q.reshape(B, 1, nh, dh).transpose(0, 2, 1, 3)
        kh = self.k[i][:, :nk].reshape(B, nk, nh, dh).transpose(0, 2, 1, 3)
        vh = self.v[i][:, :nk].reshape(B, nk, nh, dh).transpose(0, 2, 1, 3)
        scores = np.matmul(qh, np.swapaxes(kh, -1, -2)) / np.sqrt(dh)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        a = np.matmul(attn, vh).transpose(0, 2, 1, 3).reshape(B, 1, c)
        x = x + a @ p[f"{pre}.attn_out_w"].data + p[f"{pre}.attn_out_b"].data

        h = ln(x, p[f"{pre}.ln_ca_g"].data, p[f"{pre}.ln_ca_b"].data)
        q = h @ p[f"{pre}.ca_q_w"].data + p[f"{pre}.ca_q_b"].data
        tk, tv = self.text_kv[i]
        L = tk.shape[1]
        qh = q.reshape(B, 1, nh, dh).transpose(0, 2, 1, 3)
        kh = tk.reshape(B, L, nh, dh).transpose(0, 2, 1, 3)
        vh = tv.reshape(B, L, nh, dh).transpose(0, 2, 1, 3)
        scores = np.matmul(qh, np.swapaxes(kh, -1, -2)) / np.sqrt(dh)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        a = np.matmul(attn, vh).transpose(0, 2, 1, 3).reshape(B, 1, c)
        x = x + a @ p[f"{pre}.ca_out_w"].data + p[f"{pre}.ca_out_b"].data

        h = ln(x, p[f"{pre}.ln2_g"].data, p[f"{pre}.ln2_b"].data)
        h = h @ p[f"{pre}.mlp_fc_w"].data + p[f"{pre}.mlp_fc_b"].data
        h = T.gelu_array(h)  # same helper the tape op uses: cached decode stays bitwise
        return x + h @ p[f"{pre}.mlp_out_w"].data + p[f"{pre}.mlp_out_b"].data


# --- checkpoint io -----------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, cfg: ModelConfig, tensors: dict, step: int = 0):
    """Manifest (JSON: config, names, shapes, offsets) + packed little-endian f32."""
    names = sorted(tensors)
    manifest = {"format_version": CHECKPOINT_VERSION, "step": int(step),
                "config": asdict(cfg), "tensors": []}
    offset = 0
    blobs = []
    for name in names:
        arr = np.asarray(tensors[name], dtype="<f4")
        manifest["tensors"].append(
            {"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    head = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns (ModelConfig, {name: float64 array}, step)."""
    with open(path, "rb") as f:
        raw = f.read(4)
        if len(raw) < 4:
            raise CheckpointError("truncated checkpoint header")
        (hlen,) = struct.unpack("<I", raw)
        try:
            manifest = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unreadable checkpoint manifest: {e}")
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint format_version {manifest.get('format_version')} "
                f"!= supported {CHECKPOINT_VERSION}")
        data = f.read()
    tensors = {}
    for ent in manifest["tensors"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        if arr.size != count:
            raise CheckpointError(f"tensor {ent['name']} truncated")
        tensors[ent["name"]] = arr.astype(np.float64).reshape(shape)
    cfg = ModelConfig(**manifest["config"])
    return cfg, tensors, manifest.get("step", 0)
