"""Image-text dual encoder used as the stylization reward, plus prompt building.

Prompts follow ``"a {style} of {caption}"`` or just ``"{style}"`` when no
caption is used. Unstyled renders are described with the style word
``photo`` during training so the scorer also learns what "not stylized"
looks like.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import ScorerConfig
from .errors import NumericError, TrainingError, VocabularyError
from .nat import Block
from .ndcore import Adam, Linear, Module, Tensor, no_grad, ops, parameter
from .toyworld import STYLES, apply_style, caption, caption_vocabulary, render, sample_scene

log = logging.getLogger(__name__)

PLAIN_STYLE = "photo"
TEMPLATE_WORDS = ("a", "of")


def default_vocabulary() -> list[str]:
    words = set(caption_vocabulary()) | set(STYLES) | {PLAIN_STYLE, *TEMPLATE_WORDS}
    return sorted(words)


@dataclass(frozen=True)
class Prompt:
    style: str
    caption: str | None
    text: str

    @property
    def words(self) -> list[str]:
        return self.text.split()


def build_prompt(style: str, caption_text: str | None = None,
                 vocabulary=None) -> Prompt:
    """Render the prompt; with a vocabulary, every word must be in it."""
    style = style.strip().lower()
    if not style:
        raise ValueError("style text must be nonempty")
    cap = caption_text.strip().lower() if caption_text else None
    text = f"a {style} of {cap}" if cap else style
    if vocabulary is not None:
        known = set(vocabulary)
        unknown = [w for w in text.split() if w not in known]
        if unknown:
            raise VocabularyError(unknown)
    return Prompt(style, cap, text)


class ScorerModel(Module):
    def __init__(self, cfg: ScorerConfig, rng: np.random.Generator, vocabulary=None,
                 max_words: int = 12):
        self._vocab = list(vocabulary or default_vocabulary())
        self._index = {w: i for i, w in enumerate(self._vocab)}
        self._max_words = max_words
        w1, w2, w3 = cfg.widths
        e = cfg.embed_dim
        # image side: three 2x space-to-depth stages then pooled statistics
        self.img_down = [Linear(4 * 3, w1, rng), Linear(4 * w1, w2, rng), Linear(4 * w2, w3, rng)]
        self.img_head1 = Linear(2 * w3, 2 * e, rng)
        self.img_head2 = Linear(2 * e, e, rng)
        # text side: word + position embeddings, one attention block, mean pool
        self.word_emb = parameter(rng.normal(0.0, 0.5, size=(len(self._vocab), 2 * e)))
        self.pos_emb = parameter(rng.normal(0.0, 0.1, size=(max_words, 2 * e)))
        self.txt_block = Block(2 * e, 4, 2, rng, cross=False)
        self.txt_head = Linear(2 * e, e, rng)
        self.log_scale = parameter(np.array(math.log(1.0 / cfg.temperature)))

    @property
    def vocabulary(self) -> list[str]:
        return list(self._vocab)

    def encode_words(self, prompts) -> tuple[np.ndarray, np.ndarray]:
        """Index matrix (B, L) and validity mask for a list of prompts or strings."""
        texts = [p.text if isinstance(p, Prompt) else str(p) for p in prompts]
        rows = []
        for text in texts:
            words = text.lower().split()
            unknown = [w for w in words if w not in self._index]
            if unknown:
                raise VocabularyError(unknown)
            if not words or len(words) > self._max_words:
                raise ValueError(f"prompt length {len(words)} outside [1, {self._max_words}]")
            rows.append([self._index[w] for w in words])
        length = max(len(r) for r in rows)
        ids = np.zeros((len(rows), length), dtype=np.int64)
        valid = np.zeros((len(rows), length), dtype=bool)
        for i, r in enumerate(rows):
            ids[i, :len(r)] = r
            valid[i, :len(r)] = True
        return ids, valid

    def embed_images(self, images) -> Tensor:
        """(B, H, W, 3) -> (B, E) raw (unnormalized) embeddings."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        if x.ndim == 3:
            x = ops.reshape(x, (1,) + x.shape)
        x = ops.sub(x, 0.5)
        for layer in self.img_down:
            x = ops.gelu(layer(ops.space_to_depth(x, 2)))
        b, h, w, c = x.shape
        flat = ops.reshape(x, (b, h * w, c))
        mean = ops.mean(flat, axis=1)
        spread = ops.mean(ops.square(ops.sub(flat, ops.reshape(mean, (b, 1, c)))), axis=1)
        pooled = ops.concat([mean, spread], axis=-1)
        return self.img_head2(ops.gelu(self.img_head1(pooled)))

    def embed_texts(self, prompts) -> Tensor:
        ids, valid = self.encode_words(prompts)
        b, length = ids.shape
        x = ops.add(ops.embedding_lookup(self.word_emb, ids), ops.take_rows(self.pos_emb, np.arange(length)))
        key_mask = ~valid[:, None, None, :]
        x = self.txt_block(x, mask=key_mask)
        weights = valid / valid.sum(axis=1, keepdims=True)
        pooled = ops.sum(ops.mul(x, Tensor(weights[..., None].astype(x.dtype))), axis=1)
        return self.txt_head(pooled)

    def image_features(self, images) -> Tensor:
        return ops.l2_normalize(self.embed_images(images))

    def text_features(self, prompts) -> Tensor:
        return ops.l2_normalize(self.embed_texts(prompts))


def cosine(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Row-wise cosine similarity of raw embedding vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na < eps) or np.any(nb < eps):
        raise NumericError("cosine of a zero-norm embedding")
    return np.clip((a * b).sum(-1) / (na * nb), -1.0, 1.0)


def similarity_tensor(model: ScorerModel, images, prompts) -> Tensor:
    """Differentiable per-pair cosine similarity, shape (B,)."""
    img = model.image_features(images)
    txt = model.text_features(prompts)
    return ops.sum(ops.mul(img, txt), axis=-1)


def similarity(model: ScorerModel, image, prompt) -> float:
    with no_grad():
        s = similarity_tensor(model, image, [prompt])
    return float(np.clip(s.data[0], -1.0, 1.0))


def similarities(model: ScorerModel, images, prompts, batch: int = 128) -> np.ndarray:
    """Per-pair similarity for equally long image and prompt lists."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            s = similarity_tensor(model, images[i:i + batch], prompts[i:i + batch])
            out.append(s.data.astype(np.float64))
    return np.clip(np.concatenate(out), -1.0, 1.0)


def similarity_matrix(model: ScorerModel, images, prompts) -> np.ndarray:
    with no_grad():
        img = model.image_features(images).data.astype(np.float64)
        txt = model.text_features(prompts).data.astype(np.float64)
    return img @ txt.T


# -- data -------------------------------------------------------------------

@dataclass
class PairSet:
    images: np.ndarray  # (n, 64, 64, 3) float32
    prompts: list
    captions: list
    styles: list  # style word per pair, PLAIN_STYLE for unstyled renders


def make_pairs(n: int, rng: np.random.Generator, caption_free_fraction: float) -> PairSet:
    choices = (PLAIN_STYLE,) + STYLES
    images = np.empty((n, 64, 64, 3), dtype=np.float32)
    prompts, captions, styles = [], [], []
    for i in range(n):
        scene = sample_scene(rng)
        style = choices[int(rng.integers(len(choices)))]
        img = render(scene)
        images[i] = img if style == PLAIN_STYLE else apply_style(img, style)
        cap = caption(scene)
        use_caption = rng.random() >= caption_free_fraction
        prompts.append(build_prompt(style, cap if use_caption else None))
        captions.append(cap)
        styles.append(style)
    return PairSet(images, prompts, captions, styles)


def contrastive_loss(model: ScorerModel, images, prompts) -> Tensor:
    """Symmetric InfoNCE; pairs sharing the same prompt text all count as positives."""
    img = model.image_features(images)
    txt = model.text_features(prompts)
    logits = ops.mul(ops.matmul(img, ops.transpose(txt, (1, 0))), ops.exp(model.log_scale))
    texts = [p.text if isinstance(p, Prompt) else str(p) for p in prompts]
    same = np.array([[a == b for b in texts] for a in texts], dtype=np.float64)
    target = Tensor((same / same.sum(axis=1, keepdims=True)).astype(logits.dtype))
    b = len(texts)
    i2t = ops.sum(ops.mul(ops.log_softmax(logits, axis=1), target))
    t2i = ops.sum(ops.mul(ops.log_softmax(logits, axis=0), ops.transpose(target, (1, 0))))
    return ops.mul(ops.add(i2t, t2i), -0.5 / b)


def train_contrastive(pairs: PairSet, cfg: ScorerConfig, seed: int = 0, on_epoch=None):
    """Returns (model, per-epoch mean loss list)."""
    if cfg.batch_size < 32:
        raise ValueError(f"contrastive batch size must be >= 32, got {cfg.batch_size}")
    rng = np.random.default_rng(seed)
    model = ScorerModel(cfg, rng)
    opt = Adam(model.parameters(), lr=cfg.lr)
    n = len(pairs.prompts)
    steps = n // cfg.batch_size
    total = max(1, cfg.epochs * steps)
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(steps):
            sel = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            opt.lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total))
            opt.zero_grad()
            loss = contrastive_loss(model, pairs.images[sel], [pairs.prompts[i] for i in sel])
            if not np.isfinite(loss.data):
                raise TrainingError(f"scorer loss diverged at epoch {epoch} step {b}")
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            step += 1
        history.append(float(np.mean(losses)))
        log.info("scorer epoch %d loss %.4f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1], model)
    return model, history


# -- retrieval metrics ------------------------------------------------------

def prompt_retrieval(model: ScorerModel, pairs: PairSet, rng: np.random.Generator,
                     candidates: int = 16) -> float:
    """Top-1 rate of the true prompt among itself plus distinct distractor prompts."""
    texts = [p.text for p in pairs.prompts]
    pool = sorted(set(texts))
    hits = 0
    img = None
    with no_grad():
        img = model.image_features(pairs.images).data
    for i, truth in enumerate(texts):
        others = [t for t in pool if t != truth]
        picks = rng.choice(len(others), size=candidates - 1, replace=False)
        cand = [truth] + [others[j] for j in picks]
        with no_grad():
            txt = model.text_features(cand).data
        scores = txt @ img[i]
        hits += int(np.argmax(scores) == 0)
    return hits / len(texts)


def style_retrieval(model: ScorerModel, pairs: PairSet) -> float:
    """For styled pairs: does the true style word beat the other styles, caption held fixed?"""
    hits = total = 0
    for i, style in enumerate(pairs.styles):
        if style not in STYLES:
            continue
        cand = [build_prompt(s, pairs.captions[i]) for s in STYLES]
        sims = similarity_matrix(model, pairs.images[i:i + 1], cand)[0]
        hits += int(STYLES[int(np.argmax(sims))] == style)
        total += 1
    return hits / max(total, 1)
