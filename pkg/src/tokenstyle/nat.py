"""Non-autoregressive token translator.

The encoder reads the k x k token grid of a half-resolution image. The
decoder reads the same tokens replicated onto the 2k x 2k output grid, so
position (2i+a, 2j+b) starts from source token (i, j), and emits one
distribution over the codebook per output position, all in a single pass.
Decoder self-attention hides each position from itself, which keeps the
copy-the-input shortcut closed; no causal mask is used anywhere.

With ``scaling`` off the encoder reads the full-resolution grid and the
decoder input is that grid unchanged (N' = N).
"""

from __future__ import annotations

import math

import numpy as np

from .config import NatConfig
from .errors import DimensionError, NumericError
from .ndcore import LayerNorm, Linear, Module, Tensor, no_grad, ops, parameter

ENCODER_PREFIXES = ("in_proj.", "enc_pos", "encoder.", "enc_norm.")
DECODER_PREFIXES = ("dec_pos", "decoder.", "dec_norm.", "out_proj.")


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise DimensionError(f"model dim {dim} not divisible by {heads} heads")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng, scale=0.5)
        self._heads = heads
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, ctx: Tensor, mask: np.ndarray | None = None,
                 record: bool = False) -> Tensor:
        b, t, d = x.shape
        s = ctx.shape[1]
        h = self._heads
        dh = d // h
        q = ops.transpose(ops.reshape(self.q(x), (b, t, h, dh)), (0, 2, 1, 3))
        k = ops.transpose(ops.reshape(self.k(ctx), (b, s, h, dh)), (0, 2, 3, 1))
        v = ops.transpose(ops.reshape(self.v(ctx), (b, s, h, dh)), (0, 2, 1, 3))
        scores = ops.mul(ops.matmul(q, k), 1.0 / math.sqrt(dh))
        weights = ops.softmax(scores, axis=-1, mask=mask)
        self.last_weights = weights.data.copy() if record else None
        out = ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3))
        return self.o(ops.reshape(out, (b, t, d)))


class Block(Module):
    """Pre-norm block: self-attention, optional cross-attention, MLP; all residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator,
                 cross: bool):
        self.norm1 = LayerNorm(dim)
        self.self_attn = Attention(dim, heads, rng)
        if cross:
            self.norm2 = LayerNorm(dim)
            self.cross_attn = Attention(dim, heads, rng)
        self.norm3 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng, scale=0.5)

    def __call__(self, x: Tensor, enc: Tensor | None = None, mask=None,
                 record: bool = False) -> Tensor:
        y = self.norm1(x)
        x = ops.add(x, self.self_attn(y, y, mask, record))
        if enc is not None:
            x = ops.add(x, self.cross_attn(self.norm2(x), enc))
        return ops.add(x, self.fc2(ops.gelu(self.fc1(self.norm3(x)))))


def replicate_grid(grid: np.ndarray, factor: int = 2) -> np.ndarray:
    """Each source cell (i, j) fills the factor x factor block it maps to."""
    grid = np.asarray(grid)
    return np.repeat(np.repeat(grid, factor, axis=-2), factor, axis=-1)


class NatModel(Module):
    """Translator for k x k source grids (2k x 2k output grid).

    ``codebook`` is the tokenizer's (M, D) embedding table; it is held frozen
    and projected to the model width by ``in_proj``.
    """

    def __init__(self, cfg: NatConfig, k: int, codebook: np.ndarray, rng: np.random.Generator):
        codebook = np.asarray(codebook, dtype=np.float32)
        if codebook.ndim != 2:
            raise DimensionError(f"codebook must be (M, D), got {codebook.shape}")
        m, code_dim = codebook.shape
        d = cfg.dim
        self._cfg = cfg
        self._k = k
        self._codebook = codebook
        self.in_proj = Linear(code_dim, d, rng)
        self.enc_pos = parameter(rng.normal(0.0, 0.02, size=(self.source_side ** 2, d)))
        self.encoder = [Block(d, cfg.heads, cfg.mlp_ratio, rng, cross=False)
                        for _ in range(cfg.enc_layers)]
        self.enc_norm = LayerNorm(d)
        self.dec_pos = parameter(rng.normal(0.0, 0.02, size=(self.target_side ** 2, d)))
        self.decoder = [Block(d, cfg.heads, cfg.mlp_ratio, rng, cross=True)
                        for _ in range(cfg.dec_layers)]
        self.dec_norm = LayerNorm(d)
        self.out_proj = Linear(d, m, rng, scale=0.5)
        self.forward_calls = 0
        self.record_attention = False
        self.pretrained = False  # set once upscaling pretraining has run

    # -- geometry ------------------------------------------------------------

    @property
    def scaling(self) -> bool:
        return self._cfg.scaling

    @property
    def k(self) -> int:
        return self._k

    @property
    def source_side(self) -> int:
        return self._k if self.scaling else 2 * self._k

    @property
    def target_side(self) -> int:
        return 2 * self._k

    @property
    def n_source(self) -> int:
        return self.source_side ** 2

    @property
    def n_target(self) -> int:
        return self.target_side ** 2

    @property
    def vocab_size(self) -> int:
        return self._codebook.shape[0]

    @property
    def codebook(self) -> np.ndarray:
        return self._codebook

    def decoder_parameter_names(self) -> list[str]:
        """Parameters updated by style fine-tuning: decoder blocks and norm, decoder positions, output head."""
        return [n for n in self.named_parameters() if n.startswith(DECODER_PREFIXES)]

    def encoder_parameter_names(self) -> list[str]:
        """Input projection, encoder positions, encoder blocks and norm; frozen during fine-tuning."""
        return [n for n in self.named_parameters() if n.startswith(ENCODER_PREFIXES)]

    # -- inputs --------------------------------------------------------------

    def _embed(self, indices: np.ndarray) -> Tensor:
        if indices.size and (indices.min() < 0 or indices.max() >= self.vocab_size):
            raise IndexError(f"token outside [0, {self.vocab_size})")
        vectors = self._codebook[indices].astype(self.in_proj.weight.dtype)
        return self.in_proj(Tensor(vectors))

    def _as_grids(self, grids) -> np.ndarray:
        grids = np.asarray(getattr(grids, "indices", grids))
        if grids.ndim == 2:
            grids = grids[None]
        side = self.source_side
        if grids.ndim != 3 or grids.shape[1:] != (side, side):
            raise DimensionError(f"expected {side}x{side} source grids, got {grids.shape}")
        return grids

    def encoder_input(self, grids) -> Tensor:
        """Row-major flattened source tokens, embedded, plus encoder positions: (B, N', d)."""
        grids = self._as_grids(grids)
        flat = grids.reshape(len(grids), -1)
        return ops.add(self._embed(flat), self.enc_pos)

    def decoder_tokens(self, grids) -> np.ndarray:
        """Token indices the decoder starts from, as (B, 2k, 2k) grids."""
        grids = self._as_grids(grids)
        return replicate_grid(grids) if self.scaling else grids

    def decoder_input(self, grids) -> Tensor:
        tokens = self.decoder_tokens(grids)
        flat = tokens.reshape(len(tokens), -1)
        return ops.add(self._embed(flat), self.dec_pos)

    # -- forward -------------------------------------------------------------

    def forward(self, v_src: Tensor, v_dec: Tensor) -> Tensor:
        """Logits (B, N, M) for all output positions in one pass."""
        if v_src.shape[1] != self.n_source or v_dec.shape[1] != self.n_target:
            raise DimensionError(f"sequence lengths {v_src.shape[1]}, {v_dec.shape[1]}; "
                                 f"expected {self.n_source}, {self.n_target}")
        self.forward_calls += 1
        x = v_src
        for block in self.encoder:
            x = block(x)
        enc = self.enc_norm(x)
        diag = np.eye(self.n_target, dtype=bool)
        y = v_dec
        for block in self.decoder:
            y = block(y, enc, mask=diag, record=self.record_attention)
        logits = self.out_proj(self.dec_norm(y))
        if not np.all(np.isfinite(logits.data)):
            raise NumericError("translator produced non-finite logits")
        return logits

    def logits(self, grids) -> Tensor:
        return self.forward(self.encoder_input(grids), self.decoder_input(grids))

    def attention_maps(self) -> list[np.ndarray]:
        """Decoder self-attention weights (B, heads, N, N) per layer from the last recorded forward."""
        return [block.self_attn.last_weights for block in self.decoder]

    def distributions(self, grids) -> np.ndarray:
        with no_grad():
            return probabilities(self.logits(grids).data)

    def translate(self, grids, rng: np.random.Generator | None = None) -> np.ndarray:
        """Output grids (B, 2k, 2k); argmax unless an RNG is given for sampling."""
        p = self.distributions(grids)
        tokens = decode_argmax(p) if rng is None else sample(p, rng)
        side = self.target_side
        return tokens.reshape(len(tokens), side, side)


def probabilities(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One independent draw per row of ``p`` (inverse CDF, one uniform per position)."""
    p = np.asarray(p)
    u = rng.random(p.shape[:-1])
    cdf = np.cumsum(p, axis=-1)
    idx = (cdf < u[..., None] * cdf[..., -1:]).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def decode_argmax(p: np.ndarray) -> np.ndarray:
    """Per-row argmax; ties go to the lowest index."""
    return np.argmax(np.asarray(p), axis=-1)


def autoregressive_decode(nat: NatModel, grids) -> np.ndarray:
    """Token-by-token baseline: N forward passes, committing one argmax per pass.

    Pass n reads the tokens committed so far as decoder input and fixes
    position n. Used only to compare invocation counts and wall-clock time
    against the single-pass decode.
    """
    grids = nat._as_grids(grids)
    current = nat.decoder_tokens(grids).reshape(len(grids), -1).copy()
    v_src = nat.encoder_input(grids)
    with no_grad():
        for n in range(nat.n_target):
            v_dec = ops.add(nat._embed(current), nat.dec_pos)
            logits = nat.forward(v_src, v_dec).data
            current[:, n] = np.argmax(logits[:, n], axis=-1)
    side = nat.target_side
    return current.reshape(len(grids), side, side)
