"""Vector-quantized image tokenizer: encoder, codebook, decoder.

The encoder is three 2x2/stride-2 convolutions (space-to-depth followed by a
dense map), so one token covers an 8x8 pixel patch. The decoder mirrors it
with depth-to-space upsampling, after residual 3x3 convolutions over the
token grid that let each patch see its neighbours.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import TokenizerConfig
from .errors import DimensionError, TrainingError
from .ndcore import Adam, Conv2d, Linear, Module, Tensor, no_grad, ops, parameter
from .toyworld import STYLES, apply_style

log = logging.getLogger(__name__)


@dataclass
class TokenGrid:
    indices: np.ndarray  # (k, k) ints in [0, M)

    @property
    def k(self) -> int:
        return self.indices.shape[0]

    def flat(self) -> np.ndarray:
        return self.indices.reshape(-1)


class TokenizerModel(Module):
    def __init__(self, cfg: TokenizerConfig, rng: np.random.Generator):
        if cfg.patch != 8 or len(cfg.widths) != 3:
            raise DimensionError("tokenizer: three 2x stages (patch 8) are required")
        w1, w2, w3 = cfg.widths
        self.down = [Linear(4 * 3, w1, rng), Linear(4 * w1, w2, rng), Linear(4 * w2, w3, rng)]
        self.to_code = Linear(w3, cfg.code_dim, rng)
        self.codebook = parameter(rng.normal(0.0, 0.1, size=(cfg.codebook_size, cfg.code_dim)))
        self.from_code = Linear(cfg.code_dim, w3, rng)
        self.context = [Conv2d(w3, w3, 3, rng, scale=0.5) for _ in range(cfg.context_blocks)]
        self.up = [Linear(w3, 4 * w2, rng), Linear(w2, 4 * w1, rng), Linear(w1, 4 * 3, rng)]
        self._cfg = cfg

    @property
    def codebook_size(self) -> int:
        return self.codebook.shape[0]

    @property
    def patch(self) -> int:
        return self._cfg.patch

    def encode(self, images: Tensor) -> Tensor:
        """(B, H, W, 3) -> (B, H/8, W/8, D) continuous features."""
        if images.ndim != 4 or images.shape[-1] != 3:
            raise DimensionError(f"tokenize: expected (B, H, W, 3) images, got {images.shape}")
        h, w = images.shape[1:3]
        if h % self.patch or w % self.patch:
            raise DimensionError(f"tokenize: image {h}x{w} not divisible by patch {self.patch}")
        x = ops.sub(images, 0.5)
        for layer in self.down:
            x = layer(ops.space_to_depth(x, 2))
            x = ops.gelu(x)
        return self.to_code(x)

    def decode(self, codes: Tensor) -> Tensor:
        """(B, k, k, D) code vectors -> (B, 8k, 8k, 3) unclamped images."""
        x = self.from_code(codes)
        for conv in self.context:
            x = ops.add(x, conv(ops.gelu(x)))
        for layer in self.up:
            x = ops.depth_to_space(layer(ops.gelu(x)), 2)
        return ops.add(x, 0.5)

    def nearest_codes(self, z: np.ndarray) -> np.ndarray:
        """Index of the closest codebook row for each feature; ties go to the lowest index."""
        e = self.codebook.data.astype(np.float64)
        flat = z.reshape(-1, z.shape[-1]).astype(np.float64)
        d = (flat * flat).sum(1, keepdims=True) - 2.0 * flat @ e.T + (e * e).sum(1)
        return np.argmin(d, axis=1).reshape(z.shape[:-1])

    def lookup(self, indices: np.ndarray) -> Tensor:
        if indices.size and (indices.min() < 0 or indices.max() >= self.codebook_size):
            raise IndexError(f"detokenize: token outside [0, {self.codebook_size})")
        return ops.embedding_lookup(self.codebook, indices)


def _as_batch(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float32)
    return arr[None] if arr.ndim == 3 else arr


def tokenize_batch(model: TokenizerModel, images) -> np.ndarray:
    """(B, H, W, 3) images -> (B, k, k) token indices."""
    with no_grad():
        z = model.encode(Tensor(_as_batch(images)))
    return model.nearest_codes(z.data)


def tokenize(model: TokenizerModel, image: np.ndarray) -> TokenGrid:
    if np.ndim(image) != 3:
        raise DimensionError(f"tokenize: expected one (H, W, 3) image, got {np.shape(image)}")
    return TokenGrid(tokenize_batch(model, image)[0])


def detokenize_batch(model: TokenizerModel, indices: np.ndarray) -> np.ndarray:
    indices = np.asarray(indices)
    with no_grad():
        out = model.decode(model.lookup(indices))
    return np.clip(out.data, 0.0, 1.0)


def detokenize(model: TokenizerModel, grid: TokenGrid | np.ndarray) -> np.ndarray:
    indices = grid.indices if isinstance(grid, TokenGrid) else np.asarray(grid)
    return detokenize_batch(model, indices[None])[0]


def downsample(image: np.ndarray, factor: int = 2) -> np.ndarray:
    """Area-average pooling over factor x factor blocks; accepts (H, W, C) or (B, H, W, C)."""
    img = np.asarray(image)
    h, w = img.shape[-3:-1]
    if h % factor or w % factor:
        raise DimensionError(f"downsample: {h}x{w} not divisible by {factor}")
    lead = img.shape[:-3]
    c = img.shape[-1]
    blocks = img.reshape(*lead, h // factor, factor, w // factor, factor, c)
    return blocks.mean(axis=(-4, -2)).astype(img.dtype)


# -- training ---------------------------------------------------------------

def mix_styles(images: np.ndarray, rng: np.random.Generator, fraction: float) -> np.ndarray:
    """Copy of ``images`` with a random share passed through a random style."""
    out = np.array(images, dtype=np.float32, copy=True)
    for i in range(len(out)):
        if rng.random() < fraction:
            out[i] = apply_style(out[i], STYLES[int(rng.integers(len(STYLES)))])
    return out


def vq_loss(model: TokenizerModel, images: np.ndarray, beta: float, quantize: bool = True):
    """Reconstruction + codebook + beta * commitment, with straight-through gradients.

    Returns (loss tensor, reconstruction MSE, code indices or None).
    """
    x = Tensor(images)
    z = model.encode(x)
    if not quantize:
        recon = model.decode(z)
        rec = ops.mean(ops.square(ops.sub(recon, x)))
        return rec, float(rec.data), None
    idx = model.nearest_codes(z.data)
    q = model.lookup(idx)
    # forward value q, gradient copied straight to z
    q_st = ops.add(z, Tensor(q.data - z.data, dtype=z.dtype))
    recon = model.decode(q_st)
    rec = ops.mean(ops.square(ops.sub(recon, x)))
    codebook_term = ops.mean(ops.square(ops.sub(q, ops.stop_gradient(z))))
    commit_term = ops.mean(ops.square(ops.sub(z, ops.stop_gradient(q))))
    loss = ops.add(ops.add(rec, codebook_term), ops.mul(commit_term, beta))
    return loss, float(rec.data), idx


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 15) -> np.ndarray:
    """Lloyd iterations from k-means++ seeds."""
    points = points.astype(np.float64)
    sq = (points * points).sum(1)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(len(points))]
    closest = ((points - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        pick = rng.choice(len(points), p=closest / total) if total > 0 else rng.integers(len(points))
        centers[j] = points[pick]
        closest = np.minimum(closest, ((points - centers[j]) ** 2).sum(1))
    for _ in range(iters):
        d = sq[:, None] - 2 * points @ centers.T + (centers ** 2).sum(1)
        assign = d.argmin(1)
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, points)
        empty = counts == 0
        centers[~empty] = sums[~empty] / counts[~empty, None]
        if empty.any():
            centers[empty] = points[rng.choice(len(points), size=int(empty.sum()), replace=False)]
    return centers


def train_tokenizer(images: np.ndarray, cfg: TokenizerConfig, seed: int = 0,
                    min_images: int = 2000, on_epoch=None):
    """Train from scratch; returns (model, per-epoch mean loss list)."""
    images = np.asarray(images, dtype=np.float32)
    if len(images) < min_images:
        raise ValueError(f"train_tokenizer needs at least {min_images} images, got {len(images)}")
    rng = np.random.default_rng(seed)
    model = TokenizerModel(cfg, rng)
    opt = Adam(model.parameters(), lr=cfg.lr)
    half = downsample(images)
    halfres_every = cfg.halfres_every
    usage = np.zeros(cfg.codebook_size, dtype=np.int64)
    history = []
    step = 0
    steps_per_epoch = math.ceil(len(images) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    for epoch in range(cfg.epochs):
        quantize = epoch >= cfg.warmup_epochs
        if epoch == cfg.warmup_epochs:
            sample = images[rng.choice(len(images), size=min(len(images), 500), replace=False)]
            with no_grad():
                feats = model.encode(Tensor(sample)).data.reshape(-1, cfg.code_dim)
            model.codebook.data = kmeans(feats, cfg.codebook_size, rng).astype(np.float32)
            opt = Adam(model.parameters(), lr=cfg.lr)
        order = rng.permutation(len(images))
        losses = []
        for b in range(steps_per_epoch):
            sel = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = half[sel] if halfres_every and b % halfres_every == halfres_every - 1 else images[sel]
            opt.lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total))
            opt.zero_grad()
            loss, rec, idx = vq_loss(model, batch, cfg.beta, quantize)
            if not np.isfinite(loss.data):
                raise TrainingError(f"tokenizer loss diverged at epoch {epoch} step {b}: "
                                    f"loss={float(loss.data)} rec={rec} lr={opt.lr:.2e}")
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            step += 1
            if idx is not None:
                usage += np.bincount(idx.reshape(-1), minlength=cfg.codebook_size)
                if step % cfg.restart_every == 0:
                    dead = np.flatnonzero(usage == 0)
                    if len(dead):
                        with no_grad():
                            z = model.encode(Tensor(batch)).data.reshape(-1, cfg.code_dim)
                        model.codebook.data[dead] = z[rng.choice(len(z), size=len(dead))]
                    usage[:] = 0
        history.append(float(np.mean(losses)))
        log.info("tokenizer epoch %d loss %.5f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1], model)
    return model, history


def reconstruction_mse(model: TokenizerModel, images: np.ndarray, batch: int = 64) -> float:
    errs = []
    for i in range(0, len(images), batch):
        chunk = np.asarray(images[i:i + batch], dtype=np.float32)
        recon = detokenize_batch(model, tokenize_batch(model, chunk))
        errs.append(((recon - chunk) ** 2).reshape(len(chunk), -1).mean(1))
    return float(np.concatenate(errs).mean())


def codebook_usage(model: TokenizerModel, images: np.ndarray, batch: int = 64) -> float:
    seen = np.zeros(model.codebook_size, dtype=bool)
    for i in range(0, len(images), batch):
        seen[np.unique(tokenize_batch(model, images[i:i + batch]))] = True
    return float(seen.mean())
