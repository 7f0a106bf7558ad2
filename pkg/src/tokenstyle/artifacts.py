"""Workspace layout and model <-> checkpoint conversion.

Every checkpoint carries the resolved run configuration in its metadata
(``cfg.*`` keys), so a model can be rebuilt from its file alone.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint
from .config import RunConfig, _format, parse_config
from .errors import ArtifactIOError, DependencyError, PreconditionError
from .nat import NatModel
from .scorer import ScorerModel
from .vqtok import TokenizerModel


class Workspace:
    """Directory holding every artifact of one pipeline run."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def train_dir(self) -> Path:
        return self.root / "data" / "train"

    @property
    def heldout_dir(self) -> Path:
        return self.root / "data" / "heldout"

    @property
    def tokenizer(self) -> Path:
        return self.root / "tokenizer.ckpt"

    @property
    def translator(self) -> Path:
        return self.root / "translator.ckpt"

    @property
    def scorer(self) -> Path:
        return self.root / "scorer.ckpt"

    def translator_variant(self, variant: str) -> Path:
        """Pretrained translator for an ablation variant ('' is the default model)."""
        return self.translator if not variant else self.root / f"translator-{variant}.ckpt"

    def styled(self, style: str, variant: str = "") -> Path:
        name = f"{style}-{variant}" if variant else style
        return self.root / "styles" / f"{name}.ckpt"

    def metrics(self, stage: str) -> Path:
        return self.root / "metrics" / f"{stage}.tsv"

    def report(self, name: str) -> Path:
        return self.root / "reports" / f"{name}.tsv"


# -- metadata helpers ---------------------------------------------------------

def base_metadata(stage: str, cfg: RunConfig) -> dict[str, str]:
    meta = {"stage": stage, "config_hash": cfg.hash(), "seed": str(cfg.seed),
            "created_by": f"tokenstyle {__version__}"}
    meta.update({f"cfg.{k}": _format(v) for k, v in cfg.items()})
    return meta


def config_from_metadata(meta: dict[str, str]) -> RunConfig:
    lines = [f"{k[4:]} = {v}" for k, v in meta.items() if k.startswith("cfg.")]
    return parse_config("\n".join(lines))


def _expect_stage(ckpt: Checkpoint, path, *stages: str) -> None:
    stage = ckpt.metadata.get("stage")
    if stage not in stages:
        raise ArtifactIOError(f"{path}: expected a {'/'.join(stages)} checkpoint, found {stage!r}")


def _prefixed(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in state.items()}


# -- tokenizer ----------------------------------------------------------------

def save_tokenizer(model: TokenizerModel, cfg: RunConfig, path) -> None:
    Checkpoint(base_metadata("tokenizer", cfg), _prefixed("tok.", model.state_dict())).save(path)


def load_tokenizer(path) -> TokenizerModel:
    ckpt = Checkpoint.load(path, stage="train-tokenizer")
    _expect_stage(ckpt, path, "tokenizer")
    cfg = config_from_metadata(ckpt.metadata)
    model = TokenizerModel(cfg.tokenizer, np.random.default_rng(0))
    model.load_state_dict(ckpt.subset("tok."))
    return model


# -- translator ---------------------------------------------------------------

def save_translator(model: NatModel, cfg: RunConfig, path, stage: str = "pretrain",
                    **extra: str) -> None:
    meta = base_metadata(stage, cfg)
    meta.update({"k": str(model.k), "scaling": _format(model.scaling),
                 "pretrained": _format(model.pretrained)})
    meta.update({k: str(v) for k, v in extra.items()})
    tensors = _prefixed("nat.", model.state_dict())
    tensors["codebook"] = model.codebook
    Checkpoint(meta, tensors).save(path)


def load_translator(path, stage: str = "pretrain") -> tuple[NatModel, dict[str, str]]:
    ckpt = Checkpoint.load(path, stage=stage)
    _expect_stage(ckpt, path, "pretrain", "finetune")
    meta = ckpt.metadata
    cfg = config_from_metadata(meta)
    nat_cfg = dataclasses.replace(cfg.nat, scaling=meta.get("scaling", "true") == "true")
    model = NatModel(nat_cfg, int(meta["k"]), ckpt.tensors["codebook"], np.random.default_rng(0))
    model.load_state_dict(ckpt.subset("nat."))
    model.pretrained = meta.get("pretrained") == "true"
    return model, meta


def require_pretrained(model: NatModel, path) -> None:
    if not model.pretrained:
        raise PreconditionError(f"{path} holds an un-pretrained translator; run pretrain first")


# -- scorer -------------------------------------------------------------------

def save_scorer(model: ScorerModel, cfg: RunConfig, path) -> None:
    meta = base_metadata("scorer", cfg)
    meta["vocabulary"] = " ".join(model.vocabulary)
    Checkpoint(meta, _prefixed("scorer.", model.state_dict())).save(path)


def load_scorer(path) -> ScorerModel:
    ckpt = Checkpoint.load(path, stage="train-scorer")
    _expect_stage(ckpt, path, "scorer")
    cfg = config_from_metadata(ckpt.metadata)
    vocab = ckpt.metadata["vocabulary"].split()
    model = ScorerModel(cfg.scorer, np.random.default_rng(0), vocabulary=vocab)
    model.load_state_dict(ckpt.subset("scorer."))
    return model


def require(path: Path, stage: str) -> Path:
    if not Path(path).exists():
        raise DependencyError(f"missing {path}; run the {stage} stage first")
    return Path(path)
