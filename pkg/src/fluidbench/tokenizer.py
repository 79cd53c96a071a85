"""Image <-> token-grid conversion.

Continuous tokens are lossless flattened patches.  Discrete tokens come from
a k-means codebook fit on training patches; quantization is nearest-neighbor
in L2 with ties broken toward the lowest index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

__all__ = [
    "TokenGrid", "Codebook", "patchify", "unpatchify", "fit_codebook",
    "quantize", "dequantize", "reconstruction_psnr",
    "save_codebook", "load_codebook", "to_model_space", "from_model_space",
]

_MAGIC = b"FLB1"


@dataclass
class TokenGrid:
    rows: int
    cols: int
    mode: str  # "discrete" | "continuous"
    ids: np.ndarray | None = None        # (rows*cols,) ints when discrete
    vectors: np.ndarray | None = None    # (rows*cols, d) floats when continuous
    mask: np.ndarray = field(default=None)  # (rows*cols,) bool

    def __post_init__(self):
        n = self.rows * self.cols
        if self.mode == "discrete":
            if self.ids is None or self.vectors is not None:
                raise ValueError("discrete grid must populate ids and only ids")
            self.ids = np.asarray(self.ids)
            if self.ids.shape != (n,):
                raise ValueError(f"ids shape {self.ids.shape} != ({n},)")
        elif self.mode == "continuous":
            if self.vectors is None or self.ids is not None:
                raise ValueError("continuous grid must populate vectors and only vectors")
            self.vectors = np.asarray(self.vectors)
            if self.vectors.ndim != 2 or self.vectors.shape[0] != n:
                raise ValueError(f"vectors shape {self.vectors.shape} incompatible with {n} cells")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mask is None:
            self.mask = np.zeros(n, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (n,):
                raise ValueError(f"mask shape {self.mask.shape} != ({n},)")

    @property
    def n(self) -> int:
        return self.rows * self.cols


@dataclass
class Codebook:
    entries: np.ndarray  # (V, d)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2:
            raise ValueError("codebook entries must be (V, d)")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")
        if len(np.unique(self.entries, axis=0)) != self.entries.shape[0]:
            raise ValueError("codebook contains duplicate entries")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def patchify(image: np.ndarray, patch: int = 4) -> TokenGrid:
    """Cut an (H, W, 3) image into flattened patch vectors, row-major."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    rows, cols = h // patch, w // patch
    vecs = (image.reshape(rows, patch, cols, patch, 3)
                 .transpose(0, 2, 1, 3, 4)
                 .reshape(rows * cols, patch * patch * 3))
    return TokenGrid(rows, cols, "continuous", vectors=vecs.copy())


def unpatchify(grid: TokenGrid, patch: int = 4) -> np.ndarray:
    """Inverse of patchify; clamps to [0,1] so generated vectors stay an image."""
    if grid.mode != "continuous":
        raise ValueError("unpatchify needs a continuous grid")
    d = grid.vectors.shape[1]
    if d != patch * patch * 3:
        raise ValueError(f"vector dim {d} != patch*patch*3 = {patch * patch * 3}")
    img = (grid.vectors.reshape(grid.rows, grid.cols, patch, patch, 3)
                       .transpose(0, 2, 1, 3, 4)
                       .reshape(grid.rows * patch, grid.cols * patch, 3))
    return np.clip(img, 0.0, 1.0)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared L2 distances (N, V) via the GEMM expansion."""
    x2 = (x * x).sum(axis=1)[:, None]
    c2 = (centers * centers).sum(axis=1)[None, :]
    d = x2 - 2.0 * (x @ centers.T) + c2
    return np.maximum(d, 0.0)


def fit_codebook(patches: np.ndarray, size: int, seed: int,
                 max_iters: int = 50, rel_tol: float = 1e-6) -> Codebook:
    """k-means with k-means++ init; deterministic given seed."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise ValueError("patches must be (N, d)")
    uniq = np.unique(patches, axis=0)
    if uniq.shape[0] < size:
        raise ValueError(f"need at least {size} distinct patches, got {uniq.shape[0]}")

    rng = stream(seed, "codebook-init")
    n = patches.shape[0]
    centers = np.empty((size, patches.shape[1]))
    first = int(rng.integers(n))
    centers[0] = patches[first]
    dmin = _sq_dists(patches, centers[0:1])[:, 0]
    for i in range(1, size):
        total = dmin.sum()
        if total <= 0.0:  # only possible with massive duplication; pick unused uniques
            centers[i] = uniq[i]
            continue
        pick = int(np.searchsorted(np.cumsum(dmin), rng.uniform() * total))
        pick = min(pick, n - 1)
        centers[i] = patches[pick]
        dmin = np.minimum(dmin, _sq_dists(patches, centers[i:i + 1])[:, 0])

    prev_inertia = np.inf
    for _ in range(max_iters):
        dists = _sq_dists(patches, centers)
        assign = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), assign].sum())
        counts = np.bincount(assign, minlength=size)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, patches)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # reseed empty clusters at the points farthest from their centers
            far = np.argsort(dists[np.arange(n), assign])[::-1]
            for j, e in enumerate(empty):
                centers[e] = patches[far[j]]
                counts[e] = 1
                sums[e] = patches[far[j]]
        nz = counts > 0
        centers[nz] = sums[nz] / counts[nz, None]
        if prev_inertia - inertia < rel_tol * max(prev_inertia, 1e-12):
            break
        prev_inertia = inertia

    # nudge any exact duplicates apart so the codebook invariant holds
    _, first_idx = np.unique(centers, axis=0, return_index=True)
    dup = np.setdiff1d(np.arange(size), first_idx)
    for j, e in enumerate(dup):
        centers[e] = uniq[j % uniq.shape[0]] + 1e-9 * (j + 1)
    return Codebook(centers)


def quantize(grid: TokenGrid, codebook: Codebook) -> TokenGrid:
    """Map each cell vector to its nearest codeword index (ties: lowest index)."""
    if grid.mode != "continuous":
        raise ValueError("quantize needs a continuous grid")
    if grid.vectors.shape[1] != codebook.dim:
        raise ValueError(f"vector dim {grid.vectors.shape[1]} != codebook dim {codebook.dim}")
    ids = _sq_dists(grid.vectors.astype(np.float64), codebook.entries).argmin(axis=1)
    return TokenGrid(grid.rows, grid.cols, "discrete",
                     ids=ids.astype(np.int64), mask=grid.mask.copy())


def dequantize(grid: TokenGrid, codebook: Codebook) -> TokenGrid:
    """Replace each id with its codeword vector."""
    if grid.mode != "discrete":
        raise ValueError("dequantize needs a discrete grid")
    if grid.ids.min(initial=0) < 0 or grid.ids.max(initial=-1) >= codebook.size:
        raise ValueError(f"token id out of range [0, {codebook.size})")
    return TokenGrid(grid.rows, grid.cols, "continuous",
                     vectors=codebook.entries[grid.ids], mask=grid.mask.copy())


def to_model_space(vectors: np.ndarray) -> np.ndarray:
    """Map raw [0,1] patch vectors to the centered [-1,1] range the model sees."""
    return 2.0 * np.asarray(vectors) - 1.0


def from_model_space(x: np.ndarray) -> np.ndarray:
    """Inverse of to_model_space (no clamping; unpatchify clamps)."""
    return (np.asarray(x) + 1.0) / 2.0


def reconstruction_psnr(original: np.ndarray, reconstructed: np.ndarray) -> float:
    """10*log10(1/MSE) with peak 1.0; exact match reports +inf."""
    original = np.asarray(original)
    reconstructed = np.asarray(reconstructed)
    if original.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch {original.shape} vs {reconstructed.shape}")
    mse = float(np.mean((original - reconstructed) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def save_codebook(path, codebook: Codebook):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", codebook.size, codebook.dim))
        f.write(codebook.entries.astype("<f4").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad codebook magic {magic!r}")
        v, d = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(v * d * 4), dtype="<f4")
        if data.size != v * d:
            raise ValueError("truncated codebook file")
    return Codebook(data.astype(np.float64).reshape(v, d))
