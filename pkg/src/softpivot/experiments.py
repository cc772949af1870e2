"""System comparison, ablation grids and run reports.

Systems:

* ``direct`` a source-target model trained only on the small (source, target) corpus;
* ``pivot``  the pretrained halves chained on hard pivot tokens;
* ``ours``   the fine-tuned cascade decoded through the soft bridge.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .bleu import bleu
from .cascade import CascadeModel, _content
from .data import EOS
from .decoding import BeamConfig, beam_search_batch, cascade_decode_batch, hard_cascade_decode_batch
from .pipeline import (
    DecodeConfig,
    PipelineConfig,
    RunDir,
    finetune_cascade,
    merge_overrides,
    run_pipeline,
    train_half,
)
from .softbridge import BridgeConfig, ProbDistSeq, detect_inconsistencies

log = logging.getLogger(__name__)

SYSTEMS = ("direct", "pivot", "ours")

# grid axis -> (config key, needs its own fine-tuning run)
AXES: dict[str, tuple[Optional[str], bool]] = {
    "system": (None, False),
    "correction": ("bridge.correction", False),
    "alpha_decode": ("bridge.alpha_decode", False),
    "n_pivot": ("decode.n_pivot", False),
    "m_target": ("decode.m_target", False),
    "beam": ("decode.beam", False),
    "alpha_train": ("bridge.alpha_train", True),
    "beta": ("loss.beta", True),
    "gamma": ("loss.gamma", True),
}


def inconsistency_rate(seqs: Sequence[ProbDistSeq]) -> float:
    """Fraction of decoded positions whose token is not its row's argmax."""
    total = sum(len(s) for s in seqs)
    flagged = sum(len(detect_inconsistencies(s)) for s in seqs)
    return flagged / total if total else 0.0


def _chunks(xs: list, n: int):
    for lo in range(0, len(xs), n):
        yield xs[lo : lo + n]


def ensure_direct(cfg: PipelineConfig, run: RunDir):
    if run.ckpt("direct").exists():
        return run.load_model("direct")
    sv, _, tv = run.vocabs()
    return train_half(cfg, run, "direct", run.read("st"), (sv, tv), cfg.direct, valid=run.read("dev"))


def variant_dir(cfg: PipelineConfig, run: RunDir) -> RunDir:
    """Where the cascade fine-tuned under ``cfg``'s training settings lives.

    The base run holds the cascade for its own config; other (alpha_train,
    beta, gamma) settings get a sub-directory keyed by their values.
    """
    base = PipelineConfig.load(run.path("config.json"))
    key = _training_key(cfg)
    if key == _training_key(base):
        return run
    tag = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:10]
    return RunDir(run.path("variants", tag))


def _training_key(cfg: PipelineConfig) -> dict:
    d = cfg.to_dict()
    return {"alpha_train": d["bridge"]["alpha_train"], "loss": d["loss"], "finetune": d["finetune"]}


def ensure_cascade(cfg: PipelineConfig, run: RunDir) -> CascadeModel:
    out = variant_dir(cfg, run)
    if not out.report("finetune").exists():
        if out is run:
            run.require("fine-tuned cascade", "finetune", run.report("finetune"))
        log.info("fine-tuning variant %s", out.root)
        out.root.mkdir(parents=True, exist_ok=True)
        cfg.save(out.path("config.json"))
        finetune_cascade(cfg, run, out)
    return CascadeModel(out.load_model("cascade_sp"), out.load_model("cascade_pt"), cfg.bridge)


def decode_system(
    cfg: PipelineConfig,
    run: RunDir,
    system: str,
    sources: Sequence[str],
    chunk: int = 100,
) -> tuple[list[str], float]:
    """Translate ``sources``; returns detokenised hypotheses and the pivot inconsistency rate."""
    sv, pv, tv = run.vocabs()
    d: DecodeConfig = cfg.decode
    srcs = [_content(sv.encode(s)) + [EOS] for s in sources]
    max_len = cfg.model.max_len - 1
    beam = BeamConfig(d.beam, d.beam, max_len, d.length_penalty)
    hyps: list[str] = []
    pivots: list[ProbDistSeq] = []
    if system == "direct":
        model = ensure_direct(cfg, run).eval()
        for part in _chunks(srcs, chunk):
            hyps += [tv.decode(h[0].tokens) for h in beam_search_batch(model, part, BeamConfig(d.beam, 1, max_len, d.length_penalty))]
        return hyps, 0.0
    if system == "pivot":
        sp, pt = run.load_model("sp").eval(), run.load_model("pt").eval()

        def decode(part):
            return hard_cascade_decode_batch(sp, pt, part, beam, d.n_pivot, beam, d.m_target, d.rule)
    elif system == "ours":
        cm = ensure_cascade(cfg, run).eval()

        def decode(part):
            return cascade_decode_batch(cm, part, beam, d.n_pivot, beam, d.m_target, cfg.bridge, d.rule)
    else:
        raise ValueError(f"unknown system {system!r}; choose from {SYSTEMS}")
    for part in _chunks(srcs, chunk):
        for r in decode(part):
            hyps.append(tv.decode(r.best.target.tokens))
            seen = {id(c.pivot): c.pivot for c in r.candidates}
            pivots += [p.dist_seq for p in seen.values()]
    return hyps, inconsistency_rate(pivots)


def evaluate(cfg: PipelineConfig, run: RunDir, systems: Sequence[str] = SYSTEMS, split: str = "test") -> dict:
    """Corpus BLEU of each system on ``split``; also written to ``reports/eval_<split>.json``."""
    corpus = run.read(split)
    out: dict[str, Any] = {"config_hash": cfg.hash(), "seed": cfg.seed, "split": split, "systems": {}}
    for system in systems:
        hyps, rate = decode_system(cfg, run, system, corpus.src)
        rep = bleu(hyps, corpus.tgt)
        exact = float(np.mean([h == r for h, r in zip(hyps, corpus.tgt)]))
        out["systems"][system] = {"bleu": rep.score, "exact": exact, "inconsistency_rate": rate, "detail": str(rep)}
        log.info("%s %s: %s, exact %.3f, inconsistency %.4f", split, system, rep, exact, rate)
    run.write_report(f"eval_{split}", out)
    return out


# ----------------------------------------------------------------------
# ablation grids


@dataclass
class ExperimentSpec:
    name: str
    grid: dict[str, list]
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs/ablation"
    config: dict = field(default_factory=dict)  # PipelineConfig as a dict (defaults when empty)
    overrides: dict = field(default_factory=dict)  # dotted-key overrides on top of ``config``
    split: str = "test"
    workers: int = 1
    train: bool = False  # run missing pipeline steps instead of failing

    def __post_init__(self):
        if not self.grid or any(not v for v in self.grid.values()):
            raise ValueError("grid must name at least one axis, each with at least one value")
        bad = [a for a in self.grid if a not in AXES]
        if bad:
            raise ValueError(f"unknown grid axes {bad}; valid: {sorted(AXES)}")
        if not self.seeds:
            raise ValueError("need at least one seed")

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        """Read a spec; a string ``config`` names a pipeline config file relative to the spec."""
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        if isinstance(raw.get("config"), str):
            raw["config"] = json.loads((path.parent / raw["config"]).read_text(encoding="utf-8"))
        return cls(**raw)

    def base_config(self, seed: int) -> PipelineConfig:
        cfg = PipelineConfig.from_dict(self.config) if self.config else PipelineConfig()
        return merge_overrides(cfg, {**self.overrides, "seed": seed})

    def points(self) -> list[dict]:
        axes = list(self.grid)
        combos = [[]]
        for a in axes:
            combos = [c + [v] for c in combos for v in self.grid[a]]
        return [dict(zip(axes, c)) for c in combos]


def point_config(base: PipelineConfig, point: dict) -> PipelineConfig:
    overrides = {AXES[a][0]: v for a, v in point.items() if AXES[a][0]}
    return merge_overrides(base, overrides) if overrides else base


def _point_key(point: dict, split: str) -> str:
    return hashlib.sha256(json.dumps([point, split], sort_keys=True).encode()).hexdigest()[:12]


def run_seed(spec: ExperimentSpec, seed: int) -> list[dict]:
    """Every grid point for one seed (results cached under ``<out>/seed<k>/evals``)."""
    base = spec.base_config(seed)
    root = Path(spec.out) / f"seed{seed}"
    run = RunDir(root)
    if spec.train:
        run_pipeline(base, root)
    else:
        run.require("fine-tuned cascade", "finetune", run.report("finetune"))
    results = []
    for point in spec.points():
        cache = run.path("evals", _point_key(point, spec.split) + ".json")
        if cache.exists():
            results.append(json.loads(cache.read_text()))
            continue
        cfg = point_config(base, point)
        system = point.get("system", "ours")
        corpus = run.read(spec.split)
        hyps, rate = decode_system(cfg, run, system, corpus.src)
        rec = {"point": point, "seed": seed, "bleu": bleu(hyps, corpus.tgt).score, "inconsistency_rate": rate}
        cache.parent.mkdir(parents=True, exist_ok=True)
        cache.write_text(json.dumps(rec) + "\n")
        log.info("seed %d %s: BLEU %.2f inconsistency %.4f", seed, point, rec["bleu"], rate)
        results.append(rec)
    return results


@dataclass
class AblationRow:
    point: dict
    bleus: list[float]
    rates: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.bleus))

    @property
    def std(self) -> float:
        return float(np.std(self.bleus, ddof=1)) if len(self.bleus) > 1 else 0.0

    @property
    def rate(self) -> float:
        return float(np.mean(self.rates))


def ablate(spec: ExperimentSpec) -> list[AblationRow]:
    """Evaluate every grid point over all seeds; writes ``<name>.txt`` and ``<name>.tsv``."""
    if spec.workers > 1 and len(spec.seeds) > 1:
        with ProcessPoolExecutor(min(spec.workers, len(spec.seeds), os.cpu_count() or 1)) as pool:
            per_seed = list(pool.map(run_seed, [spec] * len(spec.seeds), spec.seeds))
    else:
        per_seed = [run_seed(spec, s) for s in spec.seeds]
    rows = []
    for i, point in enumerate(spec.points()):
        recs = [results[i] for results in per_seed]
        rows.append(AblationRow(point, [r["bleu"] for r in recs], [r["inconsistency_rate"] for r in recs]))
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{spec.name}.txt").write_text(format_table(rows, spec), encoding="utf-8")
    (out / f"{spec.name}.tsv").write_text(format_tsv(rows, spec), encoding="utf-8")
    return rows


def _header(spec: ExperimentSpec) -> list[str]:
    return list(spec.grid) + ["bleu_mean", "bleu_std", "inconsistency"] + [f"seed{s}" for s in spec.seeds]


def _cells(row: AblationRow, spec: ExperimentSpec) -> list[str]:
    return (
        [str(row.point[a]) for a in spec.grid]
        + [f"{row.mean:.2f}", f"{row.std:.2f}", f"{row.rate:.4f}"]
        + [f"{b:.2f}" for b in row.bleus]
    )


def format_table(rows: Sequence[AblationRow], spec: ExperimentSpec) -> str:
    table = [_header(spec)] + [_cells(r, spec) for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(table[0]))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(line, widths)) for line in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_tsv(rows: Sequence[AblationRow], spec: ExperimentSpec) -> str:
    return "".join("\t".join(line) + "\n" for line in [_header(spec)] + [_cells(r, spec) for r in rows])


def read_tsv(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, line.split("\t"))) for line in lines[1:]]


# ----------------------------------------------------------------------
# report


def _smooth(xs: Sequence[float], k: int = 25) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    if len(xs) < k:
        return xs
    return np.convolve(xs, np.ones(k) / k, mode="valid")


def _plot_curves(curves: dict[str, Sequence[float]], path: Path, ylabel: str) -> bool:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib unavailable; skipping %s", path.name)
        return False
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, ys in curves.items():
        if len(ys) and isinstance(ys[0], (list, tuple)):
            ax.plot([p[0] for p in ys], [p[1] for p in ys], marker="o", label=name)
        else:
            ax.plot(_smooth(ys), label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return True


def report(root) -> Path:
    """Collate curves, BLEU tables and inconsistency rates under ``root`` into ``report.md``."""
    root = Path(root)
    fig_dir = root / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# Run report: {root.name}", ""]
    runs = sorted({p.parent.parent for p in root.rglob("reports/*.json")})
    for run_root in runs:
        run = RunDir(run_root)
        rel = run_root.relative_to(root) if run_root != root else Path(".")
        lines += [f"## {rel}", ""]
        cfg_path = run.path("config.json")
        if cfg_path.exists():
            cfg = PipelineConfig.load(cfg_path)
            lines += [f"config `{cfg.hash()}`, seed {cfg.seed}", ""]
        curves = {}
        for name in ("sp", "pt", "direct"):
            if run.report(f"pretrain_{name}").exists():
                curves[name] = run.read_report(f"pretrain_{name}")["curve"]
        if run.report("finetune").exists():
            ft = run.read_report("finetune")
            curves["cascade"] = ft["curve"]
            tag = str(rel).replace("/", "_")
            if ft["valid_bleu"] and _plot_curves({"dev BLEU": ft["valid_bleu"]}, fig_dir / f"{tag}_valid.png", "BLEU"):
                lines += [f"![validation BLEU](figures/{tag}_valid.png)", ""]
        if curves:
            tag = str(rel).replace("/", "_")
            if _plot_curves(curves, fig_dir / f"{tag}_loss.png", "loss per token"):
                lines += [f"![training loss](figures/{tag}_loss.png)", ""]
            lines += ["| model | steps | final loss (smoothed) |", "|---|---|---|"]
            lines += [f"| {k} | {len(v)} | {_smooth(v)[-1]:.4f} |" for k, v in curves.items() if len(v)]
            lines.append("")
        for ev in sorted(run.path("reports").glob("eval_*.json")):
            data = json.loads(ev.read_text())
            lines += [f"### {ev.stem}", "", "| system | BLEU | exact match | pivot inconsistency rate |", "|---|---|---|---|"]
            for sys_name, r in data["systems"].items():
                lines.append(f"| {sys_name} | {r['bleu']:.2f} | {r['exact']:.3f} | {r['inconsistency_rate']:.4f} |")
            lines.append("")
    tables = sorted(root.glob("*.tsv"))
    for tsv in tables:
        rows = read_tsv(tsv)
        if not rows:
            continue
        head = list(rows[0])
        lines += [f"## Ablation `{tsv.stem}`", "", "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        lines += ["| " + " | ".join(r[h] for h in head) + " |" for r in rows]
        lines.append("")
    path = root / "report.md"
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


def summarize(values: Sequence[float]) -> str:
    values = list(values)
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return f"{np.mean(values):.2f} ± {std:.2f}" if values and not any(map(math.isnan, values)) else "n/a"
