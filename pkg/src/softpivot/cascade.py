"""Source -> pivot -> target cascade: pretraining, pseudo-pivot data, joint loss
and end-to-end fine-tuning through the soft bridge."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bleu import bleu
from .data import EOS, PAD, ParallelCorpus, TrilingualCorpus, Vocab, batch_iter, pad_batch
from .decoding import BeamConfig, beam_search_batch, cascade_decode_batch, greedy_decode_batch
from .optim import Adam, OptimConfig
from .softbridge import BridgeConfig, ProbDistSeq, bridge_weights
from .transformer import TransformerModel, decode_teacher_forced, encode_hard, encode_soft

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossWeights:
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0 or (self.beta == 0 and self.gamma == 0):
            raise ValueError(f"need beta, gamma >= 0 and not both zero, got {self.beta}, {self.gamma}")


@dataclass
class CascadeModel:
    sp: TransformerModel
    pt: TransformerModel
    bridge: BridgeConfig = field(default_factory=BridgeConfig)

    def __post_init__(self):
        if self.sp.config.tgt_vocab_size != self.pt.config.src_vocab_size:
            raise ValueError(
                f"pivot vocabularies differ: sp emits {self.sp.config.tgt_vocab_size}, "
                f"pt reads {self.pt.config.src_vocab_size}"
            )

    def parameters(self) -> list[Tensor]:
        return self.sp.parameters() + self.pt.parameters()

    def train(self, mode: bool = True) -> "CascadeModel":
        self.sp.train(mode)
        self.pt.train(mode)
        return self

    def eval(self) -> "CascadeModel":
        return self.train(False)


@dataclass
class TrilingualExample:
    src: list[int]
    piv: list[int]
    tgt: list[int]

    def check(self, max_len: int) -> None:
        for name in ("src", "piv", "tgt"):
            seq = getattr(self, name)
            if not seq:
                raise ValueError(f"empty {name} sequence")
            if len(seq) + 1 > max_len:
                raise ValueError(f"{name} length {len(seq)} + EOS exceeds max_len={max_len}")


def seq2seq_fields(src: Sequence[int], tgt: Sequence[int]) -> tuple[list[int], list[int], list[int]]:
    """(encoder input, decoder input, decoder output) = (src+EOS, BOS+tgt, tgt+EOS)."""
    return list(src) + [EOS], [1] + list(tgt), list(tgt) + [EOS]


def _content(ids: list[int]) -> list[int]:
    return [i for i in ids if i != EOS]


def make_examples(corpus: ParallelCorpus, src_vocab: Vocab, tgt_vocab: Vocab) -> list[tuple]:
    return [
        seq2seq_fields(_content(src_vocab.encode(s)), _content(tgt_vocab.encode(t)))
        for s, t in zip(corpus.src, corpus.tgt)
    ]


def make_tri_examples(data: TrilingualCorpus, vocabs: Sequence[Vocab]) -> list[tuple]:
    """Fields: src+EOS, BOS+piv, piv+EOS, BOS+tgt, tgt+EOS."""
    sv, pv, tv = vocabs
    out = []
    for s, p, t in zip(data.src, data.piv, data.tgt):
        src, piv_in, piv_out = seq2seq_fields(_content(sv.encode(s)), _content(pv.encode(p)))
        _, tgt_in, tgt_out = seq2seq_fields([], _content(tv.encode(t)))
        out.append((src, piv_in, piv_out, tgt_in, tgt_out))
    return out


# ----------------------------------------------------------------------
# losses


def seq2seq_loss(m: TransformerModel, src_in, tgt_in, tgt_out, label_smoothing: Optional[float] = None) -> Tensor:
    ls = m.config.label_smoothing if label_smoothing is None else label_smoothing
    logits = decode_teacher_forced(m, encode_hard(m, src_in), tgt_in)
    return ad.cross_entropy(logits, tgt_out, ls, PAD)


def target_loss_from_rows(
    pt: TransformerModel, rows, mask, tgt_in, tgt_out, label_smoothing: Optional[float] = None
) -> Tensor:
    """Pivot-target loss with the encoder fed weight rows instead of ids."""
    ls = pt.config.label_smoothing if label_smoothing is None else label_smoothing
    logits = decode_teacher_forced(pt, encode_soft(pt, rows, mask), tgt_in)
    return ad.cross_entropy(logits, tgt_out, ls, PAD)


def cascade_losses(
    cm: CascadeModel,
    src_in,
    piv_in,
    piv_out,
    tgt_in,
    tgt_out,
    lw: LossWeights,
    label_smoothing: Optional[float] = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Batched ``(L_pivot, L_target, beta*L_pivot + gamma*L_target)``.

    The source-pivot decoder is teacher-forced on the pseudo-pivot; its
    softmax rows (one per pivot token, EOS included) go through the training
    bridge into the pivot-target encoder.
    """
    sp, pt = cm.sp, cm.pt
    piv_out = np.atleast_2d(piv_out)
    ls_sp = sp.config.label_smoothing if label_smoothing is None else label_smoothing
    logits = decode_teacher_forced(sp, encode_hard(sp, src_in), piv_in)
    l_pivot = ad.cross_entropy(logits, piv_out, ls_sp, PAD)
    rows = bridge_weights(ad.softmax(logits, axis=-1), cm.bridge, "train")
    l_target = target_loss_from_rows(pt, rows, piv_out != PAD, tgt_in, tgt_out, label_smoothing)
    return l_pivot, l_target, l_pivot * lw.beta + l_target * lw.gamma


def teacher_forced_pivot(cm: CascadeModel, ex: TrilingualExample) -> ProbDistSeq:
    """The sp rows fed to the bridge: row t predicts ``(piv + EOS)[t]``."""
    src, piv_in, piv_out = seq2seq_fields(ex.src, ex.piv)
    with ad.no_grad():
        logits = decode_teacher_forced(cm.sp, encode_hard(cm.sp, src), piv_in)
    return ProbDistSeq(piv_out, ad._softmax_np(logits.data[0], -1))


def cascade_forward(
    cm: CascadeModel, ex: TrilingualExample, lw: LossWeights, label_smoothing: Optional[float] = None
) -> tuple[Tensor, Tensor, Tensor]:
    ex.check(min(cm.sp.config.max_len, cm.pt.config.max_len))
    src, piv_in, piv_out = seq2seq_fields(ex.src, ex.piv)
    _, tgt_in, tgt_out = seq2seq_fields([], ex.tgt)
    return cascade_losses(cm, [src], [piv_in], [piv_out], [tgt_in], [tgt_out], lw, label_smoothing)


# ----------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    max_tokens: int = 1024
    max_epochs: int = 10
    max_steps: Optional[int] = None
    valid_every: Optional[int] = None  # steps; default once per epoch
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    log_every: int = 100


@dataclass
class TrainResult:
    model: object
    curve: list[float]  # per-step training loss per token
    valid: list[tuple[int, float]]  # (step, validation metric)
    best_step: int
    seconds: float


def _check_finite(loss: float, step: int, norm: float, lr: float) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"step {step}: loss={loss} grad_norm={norm} lr={lr}")


def evaluate_loss(m: TransformerModel, examples: Sequence[tuple], max_tokens: int = 2048) -> float:
    """Teacher-forced loss per token (no smoothing), dropout off."""
    was = m.training
    m.eval()
    total = tokens = 0.0
    with ad.no_grad():
        for batch in batch_iter(examples, max_tokens, seed=0):
            src, tin, tout = batch.fields
            total += seq2seq_loss(m, src, tin, tout, 0.0).item()
            tokens += ad.nonpad_count(tout)
    m.train(was)
    return total / max(tokens, 1)


def pretrain(
    model: TransformerModel,
    examples: Sequence[tuple],
    cfg: TrainConfig,
    valid: Optional[Sequence[tuple]] = None,
) -> TrainResult:
    """Teacher-forced training on ``(src+EOS, BOS+tgt, tgt+EOS)`` examples.

    Keeps the parameters with the lowest validation loss (last state when no
    validation set is given).
    """
    t0 = time.time()
    opt = Adam(model.parameters(), cfg.optim)
    curve: list[float] = []
    history: list[tuple[int, float]] = []
    best, best_step, best_state = math.inf, 0, model.state_dict()
    step = 0

    def validate():
        nonlocal best, best_step, best_state
        score = evaluate_loss(model, valid)
        history.append((step, score))
        log.info("step %d valid loss %.4f", step, score)
        if score < best:
            best, best_step, best_state = score, step, model.state_dict()

    done = False
    for epoch in range(cfg.max_epochs):
        for batch in batch_iter(examples, cfg.max_tokens, cfg.seed, epoch):
            model.train()
            opt.zero_grad()
            src, tin, tout = batch.fields
            loss = seq2seq_loss(model, src, tin, tout)
            ntok = ad.nonpad_count(tout)
            (loss * (1.0 / ntok)).backward()
            norm = opt.step()
            step += 1
            curve.append(loss.item() / ntok)
            _check_finite(curve[-1], step, norm, opt.lr)
            if step % cfg.log_every == 0:
                log.info("epoch %d step %d loss %.4f lr %.2e", epoch, step, curve[-1], opt.lr)
            if valid is not None and cfg.valid_every and step % cfg.valid_every == 0:
                validate()
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if valid is not None and not cfg.valid_every:
            validate()
        if done:
            break
    if valid is not None and (not history or history[-1][0] != step):
        validate()
    if valid is not None:
        model.load_state_dict(best_state)
    else:
        best_step = step
    model.eval()
    return TrainResult(model, curve, history, best_step, time.time() - t0)


def generate_pseudo_pivot(
    sp: TransformerModel,
    corpus: ParallelCorpus,
    src_vocab: Vocab,
    piv_vocab: Vocab,
    beam: int = 5,
    max_len: Optional[int] = None,
    chunk: int = 256,
) -> TrilingualCorpus:
    """Translate each source sentence to pivot (beam top-1) to form triples."""
    sp.eval()
    cfg = BeamConfig(beam, 1, max_len or sp.config.max_len - 1)
    pivots: list[str] = []
    srcs = [_content(src_vocab.encode(s)) + [EOS] for s in corpus.src]
    for lo in range(0, len(srcs), chunk):
        for i, hyps in enumerate(beam_search_batch(sp, srcs[lo : lo + chunk], cfg), lo):
            text = piv_vocab.decode(hyps[0].tokens)
            if not text:
                log.warning("empty pivot for sentence %d (%r); using a lone EOS", i, corpus.src[i])
                text = piv_vocab.itos[EOS]
            pivots.append(text)
    return TrilingualCorpus(list(corpus.src), pivots, list(corpus.tgt))


@dataclass
class FinetuneConfig:
    max_tokens: int = 1024
    max_epochs: int = 20
    max_steps: Optional[int] = None
    valid_every: Optional[int] = None
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(peak_lr=3e-5, warmup_steps=100))
    sp_dropout: bool = True
    pt_dropout: bool = True
    seed: int = 0
    log_every: int = 50


def cascade_valid_bleu(
    cm: CascadeModel, corpus: ParallelCorpus, vocabs: Sequence[Vocab], beam: int = 1, chunk: int = 256
) -> float:
    """Target BLEU of the soft cascade on (source, target) pairs."""
    sv, pv, tv = vocabs
    cm.eval()
    srcs = [_content(sv.encode(s)) + [EOS] for s in corpus.src]
    hyps = []
    bcfg = BeamConfig(beam, 1, cm.sp.config.max_len - 1)
    tcfg = BeamConfig(beam, 1, cm.pt.config.max_len - 1)
    for lo in range(0, len(srcs), chunk):
        for r in cascade_decode_batch(cm, srcs[lo : lo + chunk], bcfg, 1, tcfg, 1):
            hyps.append(tv.decode(r.best.target.tokens))
    return bleu(hyps, corpus.tgt).score


def _cascade_eval_loss(cm: CascadeModel, examples, lw: LossWeights, max_tokens: int) -> float:
    cm.eval()
    total = tokens = 0.0
    with ad.no_grad():
        for batch in batch_iter(examples, max_tokens, seed=0):
            total += cascade_losses(cm, *batch.fields, lw, 0.0)[2].item()
            tokens += ad.nonpad_count(batch.fields[4])
    return total / max(tokens, 1)


def finetune(
    cm: CascadeModel,
    examples: Sequence[tuple],
    lw: LossWeights,
    cfg: FinetuneConfig,
    valid: Optional[tuple] = None,
) -> TrainResult:
    """End-to-end training of both halves on trilingual examples.

    ``valid`` is ``(valid_corpus, vocabs, valid_examples)``; model selection
    maximises cascade BLEU with ties broken by lower validation loss.
    """
    t0 = time.time()
    opt = Adam(cm.parameters(), cfg.optim)
    curve: list[float] = []
    history: list[tuple[int, float]] = []
    best_key = (-math.inf, -math.inf)
    best_step = 0
    best_state = (cm.sp.state_dict(), cm.pt.state_dict())
    step = 0

    def validate():
        nonlocal best_key, best_step, best_state
        corpus, vocabs, vexamples = valid
        score = cascade_valid_bleu(cm, corpus, vocabs)
        loss = _cascade_eval_loss(cm, vexamples, lw, cfg.max_tokens) if vexamples else 0.0
        history.append((step, score))
        log.info("step %d valid bleu %.2f loss %.4f", step, score, loss)
        if (score, -loss) > best_key:
            best_key, best_step = (score, -loss), step
            best_state = (cm.sp.state_dict(), cm.pt.state_dict())

    done = False
    for epoch in range(cfg.max_epochs):
        for batch in batch_iter(examples, cfg.max_tokens, cfg.seed, epoch):
            cm.sp.train(cfg.sp_dropout)
            cm.pt.train(cfg.pt_dropout)
            opt.zero_grad()
            l_pivot, l_target, loss = cascade_losses(cm, *batch.fields, lw)
            ntok = ad.nonpad_count(batch.fields[4])
            (loss * (1.0 / ntok)).backward()
            norm = opt.step()
            step += 1
            curve.append(loss.item() / ntok)
            _check_finite(curve[-1], step, norm, opt.lr)
            if step % cfg.log_every == 0:
                log.info(
                    "finetune epoch %d step %d L %.4f (pivot %.1f target %.1f)",
                    epoch, step, curve[-1], l_pivot.item(), l_target.item(),
                )
            if valid is not None and cfg.valid_every and step % cfg.valid_every == 0:
                validate()
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if valid is not None and not cfg.valid_every:
            validate()
        if done:
            break
    if valid is not None and (not history or history[-1][0] != step):
        validate()  # the final weights are always a candidate
    if valid is not None:
        cm.sp.load_state_dict(best_state[0])
        cm.pt.load_state_dict(best_state[1])
    else:
        best_step = step
    cm.eval()
    return TrainResult(cm, curve, history, best_step, time.time() - t0)


def param_delta(before: dict[str, np.ndarray], model: TransformerModel) -> float:
    return float(sum(np.abs(model.params[k].data - v).sum() for k, v in before.items()))
