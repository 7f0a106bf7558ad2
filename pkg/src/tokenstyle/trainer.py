"""Upscaling pretraining and REINFORCE style fine-tuning of the translator.

Pretraining maximizes sum_n log P_n[y_n] where y is the full-resolution token
grid of the image whose half-resolution grid is the input. Fine-tuning draws
one token sequence per image from P, decodes it, scores it against the prompt
with the dual encoder, and ascends r * sum_n log P_n[y_n] over the sampled
tokens. Only decoder-side parameters move during fine-tuning.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, TrainerConfig
from .errors import (ArtifactIOError, ConfigError, DimensionError, PreconditionError,
                     TrainingError)
from .imageio import read_dataset
from .nat import NatModel, probabilities, sample
from .ndcore import Adam, Tensor, no_grad, ops
from .scorer import ScorerModel, build_prompt, similarities, similarity
from .vqtok import TokenizerModel, detokenize_batch, downsample, mix_styles, tokenize_batch

log = logging.getLogger(__name__)

MAX_ENUMERATION = 10_000


# -- data preparation ---------------------------------------------------------

def check_compatible(nat: NatModel, tokenizer: TokenizerModel, image_side: int = 64) -> None:
    full_side = image_side // tokenizer.patch
    if nat.target_side != full_side:
        raise DimensionError(f"translator emits {nat.target_side}x{nat.target_side} grids but the "
                             f"tokenizer produces {full_side}x{full_side} for {image_side}px images")
    if nat.vocab_size != tokenizer.codebook_size:
        raise ConfigError(f"translator vocabulary {nat.vocab_size} != codebook size "
                          f"{tokenizer.codebook_size}")


def source_grids(tokenizer: TokenizerModel, images, scaling: bool = True,
                 batch: int = 64) -> np.ndarray:
    """Translator input grids: half-resolution tokens, or full-resolution without scaling."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    for i in range(0, len(images), batch):
        chunk = images[i:i + batch]
        out.append(tokenize_batch(tokenizer, downsample(chunk) if scaling else chunk))
    return np.concatenate(out)


def target_grids(tokenizer: TokenizerModel, images, batch: int = 64) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    return np.concatenate([tokenize_batch(tokenizer, images[i:i + batch])
                           for i in range(0, len(images), batch)])


# -- pretraining --------------------------------------------------------------

def pretrain_loss(nat: NatModel, src: np.ndarray, tgt: np.ndarray) -> Tensor:
    """Mean per-token negative log-likelihood of the full-resolution grid."""
    tgt = np.asarray(tgt).reshape(len(tgt), -1)
    if tgt.shape[1] != nat.n_target:
        raise DimensionError(f"target has {tgt.shape[1]} tokens, translator emits {nat.n_target}")
    logits = nat.logits(src)
    return ops.mul(ops.cross_entropy(logits, tgt), 1.0 / tgt.size)


def pretrain_step(nat: NatModel, images, tokenizer: TokenizerModel, opt: Adam) -> float:
    """One Adam step on all translator parameters from a batch of images."""
    check_compatible(nat, tokenizer, np.shape(images)[1])
    src = source_grids(tokenizer, images, nat.scaling)
    tgt = target_grids(tokenizer, images)
    return pretrain_grids_step(nat, src, tgt, opt)


def pretrain_grids_step(nat: NatModel, src, tgt, opt: Adam) -> float:
    opt.zero_grad()
    loss = pretrain_loss(nat, src, tgt)
    if not np.isfinite(loss.data):
        raise TrainingError(f"pretraining loss is {float(loss.data)}")
    loss.backward()
    opt.step()
    return float(loss.data)


def pretrain(nat: NatModel, src: np.ndarray, tgt: np.ndarray, cfg: TrainerConfig,
             rng: np.random.Generator, on_step=None) -> list[float]:
    """Epochs of shuffled minibatches over pre-tokenized (source, target) grids."""
    if cfg.pretrain_epochs <= 0 or cfg.pretrain_lr <= 0 or cfg.pretrain_batch <= 0:
        raise ConfigError("pretraining needs positive epochs, learning rate and batch size")
    opt = Adam(nat.parameters(), lr=cfg.pretrain_lr)
    n = len(src)
    steps = math.ceil(n / cfg.pretrain_batch)
    total = cfg.pretrain_epochs * steps
    losses = []
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(n)
        for b in range(steps):
            sel = order[b * cfg.pretrain_batch:(b + 1) * cfg.pretrain_batch]
            opt.lr = cfg.pretrain_lr * 0.5 * (1 + math.cos(math.pi * len(losses) / total))
            losses.append(pretrain_grids_step(nat, src[sel], tgt[sel], opt))
            if on_step is not None:
                on_step(len(losses), losses[-1])
        log.info("pretrain epoch %d loss %.4f", epoch, float(np.mean(losses[-steps:])))
    nat.pretrained = True
    return losses


def token_metrics(nat: NatModel, src: np.ndarray, tgt: np.ndarray, batch: int = 64):
    """(mean per-token loss, argmax top-1 accuracy) on held-out grids."""
    tgt = np.asarray(tgt).reshape(len(tgt), -1)
    nll = hits = 0.0
    with no_grad():
        for i in range(0, len(src), batch):
            p = probabilities(nat.logits(src[i:i + batch]).data)
            t = tgt[i:i + batch]
            chosen = np.take_along_axis(p, t[..., None], axis=-1)[..., 0]
            nll += float(-np.log(chosen).sum())
            hits += float((p.argmax(-1) == t).sum())
    return nll / tgt.size, hits / tgt.size


# -- fine-tuning --------------------------------------------------------------

def freeze_for_finetune(nat: NatModel, finetune_all: bool = False) -> list[Tensor]:
    """Mark trainable parameters; returns the ones the optimizer should own."""
    decoder = set(nat.decoder_parameter_names())
    trainable = []
    for name, p in nat.named_parameters().items():
        p.requires_grad = finetune_all or name in decoder
        if p.requires_grad:
            trainable.append(p)
    return trainable


@dataclass
class StepResult:
    mean_reward: float
    surrogate: float
    rewards: np.ndarray
    prompts: list
    tokens: np.ndarray
    images: np.ndarray = field(repr=False)


class Baseline:
    """Reward offset subtracted before weighting; 'none' keeps raw rewards."""

    def __init__(self, mode: str = "none", decay: float = 0.9):
        if mode not in ("none", "moving-average"):
            raise ConfigError(f"unknown baseline mode {mode!r}")
        self.mode = mode
        self.decay = decay
        self.value: float | None = None

    def advantage(self, rewards: np.ndarray) -> np.ndarray:
        if self.mode == "none":
            return rewards
        offset = 0.0 if self.value is None else self.value
        mean = float(rewards.mean())
        self.value = mean if self.value is None else self.decay * self.value + (1 - self.decay) * mean
        return rewards - offset


def finetune_step(nat: NatModel, src: np.ndarray, captions, tokenizer: TokenizerModel,
                  scorer: ScorerModel, style: str, cfg: TrainerConfig, opt: Adam,
                  rng: np.random.Generator, baseline: Baseline | None = None) -> StepResult:
    """Sample, decode, score, and take one ascent step on r * sum_n log P_n[sampled_n]."""
    if not nat.pretrained:
        raise PreconditionError("translator has not been pretrained; run the pretrain stage first")
    reps = max(1, cfg.samples_per_image)
    src = np.repeat(np.asarray(src), reps, axis=0)
    captions = [c for c in captions for _ in range(reps)]
    prompts = [build_prompt(style, c if cfg.use_captions else None, scorer.vocabulary)
               for c in captions]
    if cfg.sample_temperature <= 0:
        raise ConfigError("sample temperature must be positive")
    opt.zero_grad()
    logits = nat.logits(src)
    if cfg.sample_temperature != 1.0:
        logits = ops.mul(logits, 1.0 / cfg.sample_temperature)
    tokens = sample(probabilities(logits.data), rng)
    side = nat.target_side
    images = detokenize_batch(tokenizer, tokens.reshape(len(tokens), side, side))
    rewards = similarities(scorer, images, prompts)
    weights = (baseline or Baseline()).advantage(rewards)
    logp = ops.sum(ops.pick(ops.log_softmax(logits), tokens), axis=1)
    weighted = ops.sum(ops.mul(logp, Tensor(weights.astype(logp.dtype))))
    surrogate = ops.mul(weighted, 1.0 / len(tokens))
    loss = ops.mul(surrogate, -1.0)
    loss.backward()
    opt.step()
    return StepResult(float(rewards.mean()), float(surrogate.data), rewards, prompts,
                      tokens, images)


def finetune(nat: NatModel, src: np.ndarray, captions, tokenizer: TokenizerModel,
             scorer: ScorerModel, style: str, cfg: TrainerConfig, rng: np.random.Generator,
             on_step=None) -> list[tuple[float, float]]:
    """Run ``cfg.finetune_steps`` steps on random minibatches; returns (surrogate, reward) per step."""
    if cfg.finetune_steps <= 0 or cfg.finetune_lr <= 0 or cfg.finetune_batch <= 0:
        raise ConfigError("fine-tuning needs positive steps, learning rate and batch size")
    params = freeze_for_finetune(nat, cfg.finetune_all)
    opt = Adam(params, lr=cfg.finetune_lr)
    baseline = Baseline(cfg.baseline, cfg.baseline_decay)
    history = []
    try:
        for step in range(cfg.finetune_steps):
            sel = rng.choice(len(src), size=min(cfg.finetune_batch, len(src)), replace=False)
            result = finetune_step(nat, src[sel], [captions[i] for i in sel], tokenizer, scorer,
                                   style, cfg, opt, rng, baseline)
            history.append((result.surrogate, result.mean_reward))
            if on_step is not None:
                on_step(step + 1, result)
    finally:
        for p in nat.parameters():
            p.requires_grad = True
    return history


# -- estimator oracle ---------------------------------------------------------

def _outcomes(n: int, m: int) -> np.ndarray:
    if m ** n > MAX_ENUMERATION:
        raise ConfigError(f"{m}^{n} outcomes exceed the enumeration limit {MAX_ENUMERATION}")
    return np.array(list(itertools.product(range(m), repeat=n)), dtype=np.int64).reshape(-1, n)


def _sequence_logprob(logits: Tensor, outcomes: np.ndarray) -> Tensor:
    """log Pr(Y) = sum_n log P_n[Y_n] for every row Y of ``outcomes``."""
    logp = ops.log_softmax(logits)
    k = len(outcomes)
    tiled = ops.add(ops.reshape(logp, (1,) + logp.shape),
                    Tensor(np.zeros((k,) + logp.shape, dtype=logp.dtype)))
    return ops.sum(ops.pick(tiled, outcomes), axis=1)


def _grads(params, objective: Tensor) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    objective.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def _rewards_for(reward, outcomes: np.ndarray) -> np.ndarray:
    if callable(reward):
        return np.array([float(reward(y)) for y in outcomes], dtype=np.float64)
    table = np.asarray(reward, dtype=np.float64)
    return table[tuple(outcomes.T)]


def reinforce_enumeration_oracle(logits_fn, params, reward):
    """Exact gradient of E[r] and the enumerated expectation of the REINFORCE gradient.

    ``logits_fn()`` builds (N, M) logits from ``params``; ``reward`` is either a
    function of a token sequence or an array indexed by the sequence.
    Returns two lists of per-parameter gradients (exact, REINFORCE).
    """
    logits = logits_fn()
    n, m = logits.shape
    outcomes = _outcomes(n, m)
    r = _rewards_for(reward, outcomes)
    r_t = Tensor(r.astype(logits.dtype))
    # exact: differentiate sum_Y Pr(Y) r(Y) through the probabilities
    expected = ops.sum(ops.mul(ops.exp(_sequence_logprob(logits, outcomes)), r_t))
    exact = _grads(params, expected)
    # REINFORCE: sum_Y Pr(Y) r(Y) grad log Pr(Y), with Pr(Y) r(Y) held constant
    logits = logits_fn()
    seq_logp = _sequence_logprob(logits, outcomes)
    weights = Tensor(np.exp(seq_logp.data) * r)
    reinforce = _grads(params, ops.sum(ops.mul(seq_logp, weights)))
    return exact, reinforce


def reinforce_monte_carlo(logits_fn, params, reward, draws: int, rng: np.random.Generator):
    """Sample-mean REINFORCE gradient over ``draws`` independent sequences."""
    logits = logits_fn()
    with no_grad():
        p = probabilities(logits.data)
    outcomes = sample(np.broadcast_to(p, (draws,) + p.shape), rng)
    r = _rewards_for(reward, outcomes)
    seq_logp = _sequence_logprob(logits, outcomes)
    return _grads(params, ops.mul(ops.sum(ops.mul(seq_logp, Tensor(r.astype(seq_logp.dtype)))),
                                  1.0 / draws))


# -- stage runners ------------------------------------------------------------

def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent, reproducible RNG stream per pipeline stage."""
    return np.random.default_rng([seed, zlib.crc32(stage.encode("utf-8"))])


def write_metrics(path, rows, header=("step", "loss", "reward")) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join("" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))
                               for v in row))
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from None


def _load_images(directory, limit: int | None = None):
    samples, images = read_dataset(directory, limit)
    return samples, np.stack(images).astype(np.float32)


def run_pretrain(cfg: RunConfig, workspace, scaling: bool | None = None) -> dict:
    """Pretrain a translator on the workspace training images; returns held-out metrics."""
    from .artifacts import Workspace, load_tokenizer, require, save_translator

    ws = workspace if isinstance(workspace, Workspace) else Workspace(workspace)
    scaling = cfg.nat.scaling if scaling is None else scaling
    tokenizer = load_tokenizer(require(ws.tokenizer, "train-tokenizer"))
    require(ws.train_dir / "manifest.tsv", "gen-data")
    _, train = _load_images(ws.train_dir)
    _, heldout = _load_images(ws.heldout_dir)
    train = mix_styles(train, stage_rng(cfg.seed, "pretrain-styles"),
                       cfg.trainer.pretrain_styled_fraction)
    k = train.shape[1] // tokenizer.patch // 2
    nat_cfg = dataclasses.replace(cfg.nat, scaling=scaling)
    rng = stage_rng(cfg.seed, "pretrain" if scaling else "pretrain-no-scaling")
    nat = NatModel(nat_cfg, k, tokenizer.codebook.data, rng)
    check_compatible(nat, tokenizer, train.shape[1])
    src, tgt = source_grids(tokenizer, train, scaling), target_grids(tokenizer, train)
    rows = []
    pretrain(nat, src, tgt, cfg.trainer, rng, on_step=lambda s, loss: rows.append((s, loss, None)))
    loss, acc = token_metrics(nat, source_grids(tokenizer, heldout, scaling),
                              target_grids(tokenizer, heldout))
    variant = "" if scaling else "no-scaling"
    save_translator(nat, cfg, ws.translator_variant(variant), stage="pretrain",
                    heldout_loss=f"{loss:.6f}", heldout_accuracy=f"{acc:.6f}")
    write_metrics(ws.metrics("pretrain" + (f"-{variant}" if variant else "")), rows)
    return {"heldout_loss": loss, "heldout_accuracy": acc, "steps": len(rows)}


def verify_reward(scorer: ScorerModel, result: StepResult, style: str, captions,
                  use_captions: bool) -> bool:
    """Recompute each reward of a step one image at a time from its definition."""
    for img, r, cap in zip(result.images, result.rewards, captions):
        prompt = build_prompt(style, cap if use_captions else None)
        if abs(similarity(scorer, img, prompt) - float(r)) > 1e-5:
            return False
    return True


def run_finetune(cfg: RunConfig, workspace, style: str, use_captions: bool | None = None,
                 scaling: bool = True, variant: str | None = None,
                 instrument: bool = False) -> dict:
    """Fine-tune a copy of the pretrained translator toward ``style``.

    The RNG stream depends on the style only, so ablation variants share seeds.
    With ``instrument`` every step's rewards are recomputed from the declared
    prompt definition and the summary records whether they all matched.
    """
    from .artifacts import (Workspace, load_scorer, load_tokenizer, load_translator, require,
                            require_pretrained, save_translator)

    ws = workspace if isinstance(workspace, Workspace) else Workspace(workspace)
    tcfg = dataclasses.replace(cfg.trainer)
    if use_captions is not None:
        tcfg.use_captions = use_captions
    if variant is None:
        variant = "" if scaling and tcfg.use_captions else ("no-scaling" if not scaling
                                                             else "no-captions")
    base = ws.translator_variant("" if scaling else "no-scaling")
    require(base, "pretrain" + ("" if scaling else " --no-scaling"))
    tokenizer = load_tokenizer(require(ws.tokenizer, "train-tokenizer"))
    scorer = load_scorer(require(ws.scorer, "train-scorer"))
    nat, _ = load_translator(base)
    require_pretrained(nat, base)
    build_prompt(style, None, scorer.vocabulary)
    samples, train = _load_images(ws.train_dir)
    captions = [s.caption for s in samples]
    src = source_grids(tokenizer, train, nat.scaling)
    rng = stage_rng(cfg.seed, f"finetune-{style}")
    encoder_before = {n: nat.named_parameters()[n].data.copy() for n in nat.encoder_parameter_names()}
    rows, prompts_seen = [], set()
    verified = [] if instrument else None

    def on_step(step, result):
        rows.append((step, -result.surrogate, result.mean_reward))
        prompts_seen.update(p.text for p in result.prompts)
        if verified is not None:
            caps = [p.caption for p in result.prompts] if tcfg.use_captions else [None] * len(result.prompts)
            verified.append(verify_reward(scorer, result, style, caps, tcfg.use_captions))

    finetune(nat, src, captions, tokenizer, scorer, style, tcfg, rng, on_step=on_step)
    if not tcfg.finetune_all:
        params = nat.named_parameters()
        changed = [n for n, v in encoder_before.items() if not np.array_equal(params[n].data, v)]
        if changed:
            raise TrainingError(f"frozen encoder parameters changed: {changed[:3]}")
    reward_prompt = "a {style} of {caption}" if tcfg.use_captions else "{style}"
    save_translator(nat, cfg, ws.styled(style, variant), stage="finetune", style=style,
                    variant=variant or "full", reward_prompt=reward_prompt)
    write_metrics(ws.metrics(f"finetune-{style}" + (f"-{variant}" if variant else "")), rows)
    rewards = [r[2] for r in rows]
    return {"style": style, "variant": variant or "full", "steps": len(rows),
            "reward_start": rewards[0], "reward_end": rewards[-1],
            "prompts": sorted(prompts_seen),
            "reward_verified": None if verified is None else all(verified)}
