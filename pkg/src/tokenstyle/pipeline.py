"""Pipeline stages beyond the translator: data, tokenizer, scorer, eval, bench, ablate.

Each ``run_*`` function reads its prerequisites from a :class:`Workspace`,
writes its artifacts back, and returns a small summary dict. Given the same
configuration and seed every artifact is byte-identical across reruns
(bench timings excepted).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .artifacts import (Workspace, load_scorer, load_tokenizer, load_translator, require,
                        save_scorer, save_tokenizer)
from .config import RunConfig
from .errors import ArtifactIOError, UsageError
from .imageio import Sample, write_dataset
from .nat import NatModel, autoregressive_decode
from .scorer import (PairSet, build_prompt, make_pairs, prompt_retrieval, similarities,
                     style_retrieval, train_contrastive)
from .toyworld import (ORACLE_STYLES, STYLES, caption, content_oracle, render, sample_scene,
                       style_oracle)
from .trainer import (_load_images, run_finetune, run_pretrain, source_grids, stage_rng,
                      write_metrics)
from .vqtok import (codebook_usage, detokenize_batch, mix_styles, reconstruction_mse,
                    train_tokenizer)

log = logging.getLogger(__name__)


def _workspace(ws) -> Workspace:
    return ws if isinstance(ws, Workspace) else Workspace(ws)


def _fmt(value) -> str:
    if isinstance(value, float):
        return "-" if np.isnan(value) else f"{value:.6f}"
    return str(value)


def write_report(path, header, rows) -> str:
    text = "\t".join(header) + "\n" + "".join("\t".join(_fmt(v) for v in row) + "\n" for row in rows)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from None
    return text


# -- data ---------------------------------------------------------------------

def _scene_set(n: int, rng: np.random.Generator):
    scenes = [sample_scene(rng) for _ in range(n)]
    samples = [Sample(f"{i:06d}.ppm", caption(s), s) for i, s in enumerate(scenes)]
    return samples, [render(s) for s in scenes]


def run_gen_data(cfg: RunConfig, workspace) -> dict:
    ws = _workspace(workspace)
    for directory, n, stage in ((ws.train_dir, cfg.data.train_scenes, "gen-train"),
                                (ws.heldout_dir, cfg.data.heldout_scenes, "gen-heldout")):
        samples, images = _scene_set(n, stage_rng(cfg.seed, stage))
        write_dataset(directory, samples, images)
    return {"train": cfg.data.train_scenes, "heldout": cfg.data.heldout_scenes}


# -- tokenizer ----------------------------------------------------------------

def run_train_tokenizer(cfg: RunConfig, workspace) -> dict:
    ws = _workspace(workspace)
    require(ws.train_dir / "manifest.tsv", "gen-data")
    _, plain = _load_images(ws.train_dir)
    _, heldout = _load_images(ws.heldout_dir)
    rng = stage_rng(cfg.seed, "tokenizer")
    images = mix_styles(plain, rng, cfg.tokenizer.styled_fraction)
    rows = []
    model, _ = train_tokenizer(images, cfg.tokenizer, seed=int(rng.integers(2 ** 31)),
                               on_epoch=lambda e, loss, m: rows.append((e + 1, loss, None)))
    mse = reconstruction_mse(model, heldout)
    usage = codebook_usage(model, heldout)
    save_tokenizer(model, cfg, ws.tokenizer)
    write_metrics(ws.metrics("tokenizer"), rows)
    return {"heldout_mse": mse, "codebook_usage": usage}


# -- scorer -------------------------------------------------------------------

def scorer_pairs(cfg: RunConfig) -> tuple[PairSet, PairSet]:
    sc = cfg.scorer
    train = make_pairs(sc.train_pairs, stage_rng(cfg.seed, "scorer-train"), sc.caption_free_fraction)
    heldout = make_pairs(sc.heldout_pairs, stage_rng(cfg.seed, "scorer-heldout"),
                         sc.caption_free_fraction)
    return train, heldout


def run_train_scorer(cfg: RunConfig, workspace) -> dict:
    ws = _workspace(workspace)
    train, heldout = scorer_pairs(cfg)
    rows = []
    model, _ = train_contrastive(train, cfg.scorer, seed=int(stage_rng(cfg.seed, "scorer").integers(2 ** 31)),
                                 on_epoch=lambda e, loss, m: rows.append((e + 1, loss, None)))
    retrieval = prompt_retrieval(model, heldout, stage_rng(cfg.seed, "scorer-eval"))
    style_acc = style_retrieval(model, heldout)
    save_scorer(model, cfg, ws.scorer)
    write_metrics(ws.metrics("scorer"), rows)
    return {"retrieval16": retrieval, "style_retrieval": style_acc}


# -- evaluation ---------------------------------------------------------------

def stylize_images(nat: NatModel, tokenizer, images, rng: np.random.Generator | None = None):
    src = source_grids(tokenizer, images, nat.scaling)
    return detokenize_batch(tokenizer, nat.translate(src, rng))


@dataclass
class ImageScores:
    similarity: float
    style: float
    content: float


def score_images(scorer, images, scenes, style: str) -> ImageScores:
    if len(images) == 0:
        raise UsageError("evaluation set is empty")
    prompt = build_prompt(style, None, scorer.vocabulary)
    sims = similarities(scorer, images, [prompt] * len(images))
    if style in ORACLE_STYLES:
        style_score = float(np.mean([style_oracle(img, style) for img in images]))
    else:
        style_score = float("nan")
    content = float(np.mean([content_oracle(img, s) for img, s in zip(images, scenes)]))
    return ImageScores(float(sims.mean()), style_score, content)


EVAL_HEADER = ("style", "images", "sim_pre", "sim_post", "sim_post_sampled",
               "style_oracle_pre", "style_oracle_post", "content_pre", "content_post")


def evaluate_style(pre: NatModel, post: NatModel, tokenizer, scorer, images, scenes,
                   style: str, rng: np.random.Generator) -> tuple:
    before = score_images(scorer, stylize_images(pre, tokenizer, images), scenes, style)
    after = score_images(scorer, stylize_images(post, tokenizer, images), scenes, style)
    sampled = score_images(scorer, stylize_images(post, tokenizer, images, rng), scenes, style)
    return (style, len(images), before.similarity, after.similarity, sampled.similarity,
            before.style, after.style, before.content, after.content)


def _eval_set(cfg: RunConfig, ws: Workspace):
    require(ws.heldout_dir / "manifest.tsv", "gen-data")
    samples, images = _load_images(ws.heldout_dir, cfg.data.eval_scenes)
    if len(images) == 0:
        raise UsageError("evaluation set is empty")
    return [s.scene for s in samples], images


def run_eval(cfg: RunConfig, workspace, styles=None) -> list[tuple]:
    ws = _workspace(workspace)
    styles = list(styles or STYLES)
    tokenizer = load_tokenizer(require(ws.tokenizer, "train-tokenizer"))
    scorer = load_scorer(require(ws.scorer, "train-scorer"))
    pre, _ = load_translator(require(ws.translator, "pretrain"))
    scenes, images = _eval_set(cfg, ws)
    rows = []
    for style in styles:
        post, _ = load_translator(require(ws.styled(style), f"finetune --style {style}"), "finetune")
        rows.append(evaluate_style(pre, post, tokenizer, scorer, images, scenes, style,
                                   stage_rng(cfg.seed, f"eval-{style}")))
    write_report(ws.report("eval"), EVAL_HEADER, rows)
    return rows


# -- benchmark ----------------------------------------------------------------

BENCH_HEADER = ("decoder", "images", "forward_calls_per_image", "seconds_per_image")


def run_bench(cfg: RunConfig, workspace, checkpoint=None, n_images: int = 8,
              autoregressive: bool = True, batched: bool = False) -> list[tuple]:
    """Time the full stylize path per image, single image at a time unless ``batched``."""
    ws = _workspace(workspace)
    tokenizer = load_tokenizer(require(ws.tokenizer, "train-tokenizer"))
    path = Path(checkpoint) if checkpoint else ws.translator
    nat, _ = load_translator(require(path, "pretrain"), "finetune")
    _, images = _eval_set(cfg, ws)
    images = images[:n_images]
    n = len(images)

    def timed(decode):
        nat.forward_calls = 0
        start = time.perf_counter()
        batches = [images] if batched else [images[i:i + 1] for i in range(n)]
        for batch in batches:
            src = source_grids(tokenizer, batch, nat.scaling)
            detokenize_batch(tokenizer, decode(src))
        elapsed = time.perf_counter() - start
        calls = nat.forward_calls / len(batches)
        return calls, elapsed / n

    rows = []
    calls, per_image = timed(nat.translate)
    rows.append(("parallel" + ("-batched" if batched else ""), n, calls, per_image))
    if autoregressive:
        calls, per_image = timed(lambda src: autoregressive_decode(nat, src))
        rows.append(("autoregressive" + ("-batched" if batched else ""), n, calls, per_image))
    write_report(ws.report("bench"), BENCH_HEADER, rows)
    return rows


# -- ablation -----------------------------------------------------------------

ABLATION_MODES = {
    "full": {"use_captions": True, "scaling": True},
    "no-captions": {"use_captions": False, "scaling": True},
    "no-scaling": {"use_captions": True, "scaling": False},
}
ABLATE_HEADER = ("mode", "style", "reward_prompt", "reward_verified", "sim_pre", "sim_post",
                 "style_oracle_pre", "style_oracle_post", "content_pre", "content_post")


def run_ablate(cfg: RunConfig, workspace, style: str = "pixelate") -> list[tuple]:
    ws = _workspace(workspace)
    tokenizer = load_tokenizer(require(ws.tokenizer, "train-tokenizer"))
    scorer = load_scorer(require(ws.scorer, "train-scorer"))
    require(ws.translator, "pretrain")
    if not ws.translator_variant("no-scaling").exists():
        run_pretrain(cfg, ws, scaling=False)
    scenes, images = _eval_set(cfg, ws)
    rows = []
    for mode, opts in ABLATION_MODES.items():
        variant = "" if mode == "full" else mode
        summary = run_finetune(cfg, ws, style, use_captions=opts["use_captions"],
                               scaling=opts["scaling"], variant=variant, instrument=True)
        pre, _ = load_translator(ws.translator_variant("" if opts["scaling"] else "no-scaling"))
        post, meta = load_translator(ws.styled(style, variant), "finetune")
        before = score_images(scorer, stylize_images(pre, tokenizer, images), scenes, style)
        after = score_images(scorer, stylize_images(post, tokenizer, images), scenes, style)
        rows.append((mode, style, meta["reward_prompt"], summary["reward_verified"],
                     before.similarity, after.similarity, before.style, after.style,
                     before.content, after.content))
    write_report(ws.report("ablate"), ABLATE_HEADER, rows)
    return rows
