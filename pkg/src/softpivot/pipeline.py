"""Five-step training pipeline with resumable on-disk artifacts.

Run directory layout::

    config.json                     effective PipelineConfig
    vocab/{src,piv,tgt}.txt
    corpora/{sp,pt,st,dev,test}.{src,tgt}
    corpora/{st,dev}_tri.{src,piv,tgt}        pseudo-pivot triples
    checkpoints/{sp,pt}.ckpt                  pretrained halves
    checkpoints/cascade_{sp,pt}.ckpt          connected, then fine-tuned
    reports/*.json                            curves and metrics

Each step is skipped when its outputs already exist, so an interrupted run
picks up where it stopped.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .cascade import (
    CascadeModel,
    FinetuneConfig,
    LossWeights,
    TrainConfig,
    finetune,
    generate_pseudo_pivot,
    make_examples,
    make_tri_examples,
    pretrain,
)
from .data import ParallelCorpus, SyntheticTaskSpec, Vocab, build_vocab, generate_synthetic, read_corpus, write_corpus
from .optim import OptimConfig
from .softbridge import BridgeConfig
from .transformer import TransformerConfig, init_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STEPS = ("data", "pretrain", "pseudo-pivot", "connect", "finetune")


class MissingArtifact(RuntimeError):
    pass


@dataclass
class DecodeConfig:
    beam: int = 5
    n_pivot: int = 1
    m_target: int = 1
    length_penalty: float = 1.0
    rule: str = "combined"


@dataclass
class PipelineConfig:
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    model: TransformerConfig = field(default_factory=TransformerConfig)  # vocab sizes are filled in from data
    # desk-scale budgets: about 20 minutes per seed on one CPU core
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        max_steps=1600, max_epochs=10, valid_every=400, optim=OptimConfig(peak_lr=1e-3, warmup_steps=200)))
    direct: TrainConfig = field(default_factory=lambda: TrainConfig(
        max_steps=1600, max_epochs=400, valid_every=200, optim=OptimConfig(peak_lr=1e-3, warmup_steps=200)))
    # dropout off while fine-tuning: on this near-deterministic task it costs several dev BLEU
    finetune: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(
        max_steps=800, max_epochs=100, valid_every=100, optim=OptimConfig(peak_lr=1e-4, warmup_steps=100),
        sp_dropout=False, pt_dropout=False))
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    pseudo_beam: int = 5
    holdout: int = 200  # pairs held out of sp/pt for pretraining validation
    seed: int = 0

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _from_dict(cls, d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _from_dict(cls, d: dict):
    if not isinstance(d, dict):
        raise TypeError(f"{cls.__name__}: expected an object, got {d!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            v = _from_dict(t, v)
        kwargs[k] = v
    return cls(**kwargs)


def merge_overrides(cfg: PipelineConfig, overrides: dict[str, Any]) -> PipelineConfig:
    """Apply dotted-key overrides (``{"loss.beta": 0.0}``) to a copy of ``cfg``."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        node = d
        *path, last = key.split(".")
        for p in path:
            node = node[p]
        if last not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[last] = value
    return PipelineConfig.from_dict(d)


def component_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for one named component of a run."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


# ----------------------------------------------------------------------
# run directory


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def corpus(self, name: str) -> Path:
        return self.path("corpora", name)

    def ckpt(self, name: str) -> Path:
        return self.path("checkpoints", f"{name}.ckpt")

    def report(self, name: str) -> Path:
        return self.path("reports", f"{name}.json")

    def vocab_path(self, name: str) -> Path:
        return self.path("vocab", f"{name}.txt")

    def vocabs(self) -> tuple[Vocab, Vocab, Vocab]:
        self.require("vocabularies", "data", *(self.vocab_path(n) for n in ("src", "piv", "tgt")))
        return tuple(Vocab.load(self.vocab_path(n)) for n in ("src", "piv", "tgt"))

    def read(self, name: str):
        prefix = self.corpus(name)
        self.require(f"corpus {name}", _corpus_producer(name), prefix.with_name(name + ".src"))
        return read_corpus(prefix)

    def write_report(self, name: str, obj) -> None:
        self.path("reports").mkdir(parents=True, exist_ok=True)
        self.report(name).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")

    def read_report(self, name: str):
        return json.loads(self.report(name).read_text(encoding="utf-8"))

    def load_model(self, name: str):
        self.require(f"checkpoint {name}", _ckpt_producer(name), self.ckpt(name))
        return load_checkpoint(self.ckpt(name))

    def require(self, what: str, step: str, *paths: Path) -> None:
        for p in paths:
            if not p.exists():
                raise MissingArtifact(f"{what} missing ({p}); run step '{step}' first")


def _corpus_producer(name: str) -> str:
    return "pseudo-pivot" if name.endswith("_tri") else "data"


def _ckpt_producer(name: str) -> str:
    if name.startswith("cascade_"):
        return "connect"
    return "direct" if name == "direct" else "pretrain"


def _done(*paths: Path) -> bool:
    return all(p.exists() for p in paths)


def model_config(cfg: PipelineConfig, src: Vocab, tgt: Vocab) -> TransformerConfig:
    return dataclasses.replace(cfg.model, src_vocab_size=len(src), tgt_vocab_size=len(tgt))


# ----------------------------------------------------------------------
# steps


def step_data(cfg: PipelineConfig, run: RunDir) -> None:
    outs = [run.corpus(n).with_name(n + ".src") for n in ("sp", "pt", "st", "dev", "test")]
    outs += [run.vocab_path(n) for n in ("src", "piv", "tgt")]
    if _done(*outs):
        log.info("data: up to date")
        return
    cfg.task.check_model_len(cfg.model.max_len)
    task = generate_synthetic(cfg.task)
    for name, corpus in task.corpora.items():
        write_corpus(run.corpus(name), corpus)
    run.path("vocab").mkdir(parents=True, exist_ok=True)
    build_vocab([task.sp.src, task.st.src]).save(run.vocab_path("src"))
    build_vocab([task.sp.tgt, task.pt.src]).save(run.vocab_path("piv"))
    build_vocab([task.pt.tgt, task.st.tgt]).save(run.vocab_path("tgt"))
    log.info("data: wrote %s", {k: len(v) for k, v in task.corpora.items()})


def _split(corpus: ParallelCorpus, holdout: int) -> tuple[ParallelCorpus, ParallelCorpus]:
    n = len(corpus) - holdout
    if n <= 0:
        raise ValueError(f"holdout {holdout} leaves no training pairs out of {len(corpus)}")
    return ParallelCorpus(corpus.src[:n], corpus.tgt[:n]), ParallelCorpus(corpus.src[n:], corpus.tgt[n:])


def train_half(cfg: PipelineConfig, run: RunDir, name: str, corpus: ParallelCorpus, vocabs, train_cfg: TrainConfig,
               valid: Optional[ParallelCorpus] = None):
    """Pretrain one seq2seq model and save ``checkpoints/<name>.ckpt``."""
    src_v, tgt_v = vocabs
    if valid is None:
        corpus, valid = _split(corpus, cfg.holdout)
    model = init_model(model_config(cfg, src_v, tgt_v), component_seed(cfg.seed, f"init.{name}"))
    tc = dataclasses.replace(train_cfg, seed=component_seed(cfg.seed, f"batches.{name}"))
    res = pretrain(model, make_examples(corpus, src_v, tgt_v), tc, make_examples(valid, src_v, tgt_v))
    run.path("checkpoints").mkdir(parents=True, exist_ok=True)
    save_checkpoint(run.ckpt(name), model)
    run.write_report(f"pretrain_{name}", {"curve": res.curve, "valid": res.valid, "best_step": res.best_step,
                                          "seconds": res.seconds})
    log.info("%s: %d steps in %.0fs, best step %d", name, len(res.curve), res.seconds, res.best_step)
    return model


def step_pretrain(cfg: PipelineConfig, run: RunDir) -> None:
    sv, pv, tv = run.vocabs()
    for name, corpus, vocabs in (("sp", "sp", (sv, pv)), ("pt", "pt", (pv, tv))):
        if _done(run.ckpt(name)):
            log.info("pretrain %s: up to date", name)
            continue
        train_half(cfg, run, name, run.read(corpus), vocabs, cfg.pretrain)


def step_pseudo_pivot(cfg: PipelineConfig, run: RunDir) -> None:
    names = ("st", "dev")
    if _done(*(run.corpus(f"{n}_tri").with_name(f"{n}_tri.piv") for n in names)):
        log.info("pseudo-pivot: up to date")
        return
    sv, pv, _ = run.vocabs()
    sp = run.load_model("sp")
    for n in names:
        tri = generate_pseudo_pivot(sp, run.read(n), sv, pv, beam=cfg.pseudo_beam)
        write_corpus(run.corpus(f"{n}_tri"), tri)


def step_connect(cfg: PipelineConfig, run: RunDir) -> None:
    """Series connection: copy the pretrained halves into the cascade slots."""
    if _done(run.ckpt("cascade_sp"), run.ckpt("cascade_pt")):
        log.info("connect: up to date")
        return
    sp, pt = run.load_model("sp"), run.load_model("pt")
    CascadeModel(sp, pt, cfg.bridge)  # vocabulary check
    save_checkpoint(run.ckpt("cascade_sp"), sp)
    save_checkpoint(run.ckpt("cascade_pt"), pt)


def finetune_cascade(cfg: PipelineConfig, run: RunDir, out: Optional[RunDir] = None) -> CascadeModel:
    """Fine-tune the connected cascade of ``run``; results go to ``out`` (default ``run``)."""
    out = out or run
    vocabs = run.vocabs()
    # the base run starts from its connected halves; variants from the pretrained ones (same weights)
    names = ("cascade_sp", "cascade_pt") if out.root == run.root else ("sp", "pt")
    cm = CascadeModel(run.load_model(names[0]), run.load_model(names[1]), cfg.bridge)
    cm.sp.rng = np.random.default_rng(component_seed(cfg.seed, "dropout.finetune.sp"))
    cm.pt.rng = np.random.default_rng(component_seed(cfg.seed, "dropout.finetune.pt"))
    train = make_tri_examples(run.read("st_tri"), vocabs)
    dev_tri = run.read("dev_tri")
    valid = (ParallelCorpus(dev_tri.src, dev_tri.tgt), vocabs, make_tri_examples(dev_tri, vocabs))
    fc = dataclasses.replace(cfg.finetune, seed=component_seed(cfg.seed, "batches.finetune"))
    res = finetune(cm, train, cfg.loss, fc, valid)
    out.path("checkpoints").mkdir(parents=True, exist_ok=True)
    save_checkpoint(out.ckpt("cascade_sp.tmp"), cm.sp)
    save_checkpoint(out.ckpt("cascade_pt.tmp"), cm.pt)
    out.write_report("finetune", {"curve": res.curve, "valid_bleu": res.valid, "best_step": res.best_step,
                                  "seconds": res.seconds, "config_hash": cfg.hash()})
    out.ckpt("cascade_sp.tmp").replace(out.ckpt("cascade_sp"))
    out.ckpt("cascade_pt.tmp").replace(out.ckpt("cascade_pt"))
    log.info("finetune: %d steps in %.0fs, best step %d", len(res.curve), res.seconds, res.best_step)
    return cm


def step_finetune(cfg: PipelineConfig, run: RunDir) -> None:
    if _done(run.report("finetune")):
        log.info("finetune: up to date")
        return
    run.require("connected cascade", "connect", run.ckpt("cascade_sp"), run.ckpt("cascade_pt"))
    finetune_cascade(cfg, run)


STEP_FUNCS = {
    "data": step_data,
    "pretrain": step_pretrain,
    "pseudo-pivot": step_pseudo_pivot,
    "connect": step_connect,
    "finetune": step_finetune,
}


def run_pipeline(cfg: PipelineConfig, root, steps=STEPS) -> RunDir:
    """Run the requested steps in order; finished steps are skipped."""
    run = RunDir(root)
    run.root.mkdir(parents=True, exist_ok=True)
    saved = run.path("config.json")
    if saved.exists() and PipelineConfig.load(saved).hash() != cfg.hash():
        log.warning("%s was produced with a different config; existing artifacts are reused", run.root)
    cfg.save(saved)
    log.info("run %s config %s seed %d", run.root, cfg.hash(), cfg.seed)
    unknown = [s for s in steps if s not in STEP_FUNCS]
    if unknown:
        raise ValueError(f"unknown steps {unknown}; valid: {list(STEPS)}")
    for s in STEPS:
        if s in steps:
            STEP_FUNCS[s](cfg, run)
    return run


def fast_config(**kw) -> PipelineConfig:
    """A minutes-scale configuration for smoke runs and tests."""
    cfg = PipelineConfig(
        task=SyntheticTaskSpec(latent_vocab_size=8, min_len=2, max_len=5, size_sp=1200, size_pt=1200,
                               size_st=60, size_dev=20, size_test=30),
        model=TransformerConfig(num_layers=1, d_model=16, num_heads=2, d_ff=32, max_len=8),
        pretrain=TrainConfig(max_tokens=256, max_steps=40, valid_every=20, optim=OptimConfig(peak_lr=3e-3, warmup_steps=10)),
        direct=TrainConfig(max_tokens=256, max_steps=20, valid_every=10, optim=OptimConfig(peak_lr=3e-3, warmup_steps=10)),
        finetune=FinetuneConfig(max_tokens=256, max_steps=6, valid_every=3, optim=OptimConfig(peak_lr=3e-4, warmup_steps=2)),
        decode=DecodeConfig(beam=2),
        pseudo_beam=2,
        holdout=50,
    )
    return merge_overrides(cfg, kw) if kw else cfg
