import json
import shutil

import pytest

from softpivot import experiments as ex
from softpivot.cli import main
from softpivot.pipeline import (
    STEPS,
    MissingArtifact,
    PipelineConfig,
    RunDir,
    component_seed,
    fast_config,
    merge_overrides,
    run_pipeline,
)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    run_pipeline(fast_config(), root)
    return root


def test_config_round_trip(tmp_path):
    cfg = fast_config(**{"loss.beta": 0.5, "bridge.correction": "add05"})
    cfg.save(tmp_path / "c.json")
    back = PipelineConfig.load(tmp_path / "c.json")
    assert back == cfg
    assert back.hash() == cfg.hash()
    assert back.loss.beta == 0.5


def test_hash_tracks_content():
    assert fast_config().hash() == fast_config().hash()
    assert fast_config().hash() != fast_config(seed=1).hash()


def test_unknown_keys_rejected():
    d = fast_config().to_dict()
    d["loss"]["delta"] = 1.0
    with pytest.raises(ValueError, match="delta"):
        PipelineConfig.from_dict(d)
    with pytest.raises(ValueError, match="nope"):
        merge_overrides(fast_config(), {"decode.nope": 1})


def test_component_seeds_differ_by_name_and_seed():
    seeds = {component_seed(s, n) for s in (0, 1) for n in ("init.sp", "init.pt", "batches.sp")}
    assert len(seeds) == 6
    assert component_seed(3, "x") == component_seed(3, "x")


def test_missing_prerequisite_names_step(tmp_path):
    with pytest.raises(MissingArtifact, match="'data'"):
        run_pipeline(fast_config(), tmp_path, ("pretrain",))


def test_unknown_step_rejected(tmp_path):
    with pytest.raises(ValueError, match="unknown steps"):
        run_pipeline(fast_config(), tmp_path, ("warmup",))


def test_pipeline_writes_every_artifact(trained_run):
    run = RunDir(trained_run)
    for name in ("sp", "pt", "cascade_sp", "cascade_pt"):
        assert run.ckpt(name).exists()
    for name in ("st_tri", "dev_tri"):
        assert len(run.read(name)) == len(run.read(name[:-4]))
    rep = run.read_report("finetune")
    assert rep["config_hash"] == fast_config().hash()
    assert len(rep["curve"]) == fast_config().finetune.max_steps


def test_finished_steps_are_skipped(trained_run, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(trained_run, root)
    before = {p: p.stat().st_mtime_ns for p in root.rglob("*") if p.is_file() and p.name != "config.json"}
    run_pipeline(fast_config(), root)
    after = {p: p.stat().st_mtime_ns for p in before}
    assert before == after


def test_resume_after_interruption(trained_run, tmp_path):
    """Deleting the fine-tuning outputs reruns only that step, reproducibly."""
    root = tmp_path / "copy"
    shutil.copytree(trained_run, root)
    run = RunDir(root)
    run.report("finetune").unlink()
    for n in ("cascade_sp", "cascade_pt"):
        run.ckpt(n).unlink()
    sp_mtime = run.ckpt("sp").stat().st_mtime_ns
    run_pipeline(fast_config(), root)
    assert run.ckpt("sp").stat().st_mtime_ns == sp_mtime
    assert run.read_report("finetune")["curve"] == RunDir(trained_run).read_report("finetune")["curve"]
    assert run.ckpt("cascade_pt").read_bytes() == RunDir(trained_run).ckpt("cascade_pt").read_bytes()


def test_greedy_pivot_is_consistent(trained_run):
    cfg = fast_config(**{"decode.beam": 1})
    run = RunDir(trained_run)
    _, rate = ex.decode_system(cfg, run, "ours", run.read("test").src)
    assert rate == 0.0


def test_evaluate_reports_every_system(trained_run, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(trained_run, root)
    res = ex.evaluate(fast_config(), RunDir(root), split="dev")
    assert set(res["systems"]) == set(ex.SYSTEMS)
    for r in res["systems"].values():
        assert 0.0 <= r["bleu"] <= 100.0
        assert 0.0 <= r["inconsistency_rate"] <= 1.0
    assert RunDir(root).report("eval_dev").exists()


def test_evaluate_rejects_unknown_system(trained_run):
    with pytest.raises(ValueError, match="unknown system"):
        ex.decode_system(fast_config(), RunDir(trained_run), "oracle", ["s4"])


def _spec(root, **kw):
    return ex.ExperimentSpec(
        name="corr", grid={"correction": ["none", "exc"]}, seeds=[0], out=str(root),
        config=fast_config().to_dict(), **kw,
    )


def test_ablate_tables_and_determinism(trained_run, tmp_path):
    root = tmp_path / "abl"
    root.mkdir()
    shutil.copytree(trained_run, root / "seed0")
    rows = ex.ablate(_spec(root))
    assert [r.point["correction"] for r in rows] == ["none", "exc"]
    tsv = ex.read_tsv(root / "corr.tsv")
    assert [t["correction"] for t in tsv] == ["none", "exc"]
    assert float(tsv[0]["bleu_mean"]) == pytest.approx(rows[0].mean, abs=5e-3)
    assert "bleu_mean" in (root / "corr.txt").read_text().splitlines()[0]
    # second call hits the cache; a fresh decode gives identical scores
    shutil.rmtree(root / "seed0" / "evals")
    again = ex.ablate(_spec(root))
    assert [r.bleus for r in again] == [r.bleus for r in rows]


def test_ablate_requires_trained_base(tmp_path):
    with pytest.raises(MissingArtifact, match="finetune"):
        ex.ablate(_spec(tmp_path))


def test_spec_validation():
    with pytest.raises(ValueError, match="unknown grid axes"):
        ex.ExperimentSpec(name="x", grid={"dropout": [0.1]})
    with pytest.raises(ValueError):
        ex.ExperimentSpec(name="x", grid={"beta": []})
    spec = ex.ExperimentSpec(name="x", grid={"beta": [0, 1], "correction": ["none", "eq1"]})
    assert len(spec.points()) == 4


def test_training_axis_gets_variant_dir(trained_run):
    run = RunDir(trained_run)
    same = ex.variant_dir(fast_config(**{"bridge.correction": "exc"}), run)
    other = ex.variant_dir(fast_config(**{"loss.beta": 0.0}), run)
    assert same.root == run.root
    assert other.root.parent == run.path("variants")


def test_ablation_row_statistics():
    row = ex.AblationRow({"beta": 1}, [10.0, 12.0, 14.0], [0.0, 0.1, 0.2])
    assert row.mean == 12.0
    assert row.std == pytest.approx(2.0)
    assert row.rate == pytest.approx(0.1)
    assert ex.summarize([10.0, 12.0, 14.0]) == "12.00 ± 2.00"


def test_report_collates_run(trained_run, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(trained_run, root)
    ex.evaluate(fast_config(), RunDir(root), systems=("pivot",), split="dev")
    text = ex.report(root).read_text()
    assert "eval_dev" in text
    assert "| pivot |" in text
    assert "| sp |" in text


# ----------------------------------------------------------------------
# command line


def test_cli_full_run(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    fast_config().save(cfg)
    out = str(tmp_path / "run")
    for cmd in ("gen-data", "pretrain", "pseudo-pivot", "finetune"):
        assert main([cmd, "--config", str(cfg), "--out", out]) == 0
    assert main(["evaluate", "--out", out, "--split", "dev", "--systems", "pivot,ours"]) == 0
    printed = capsys.readouterr().out
    assert "pivot" in printed and "ours" in printed
    src = tmp_path / "in.txt"
    src.write_text("s4 s5\ns6\n")
    assert main(["decode", "--out", out, "--input", str(src), "--output", str(tmp_path / "o.jsonl"),
                 "--n-pivot", "2", "--candidates"]) == 0
    lines = [json.loads(x) for x in (tmp_path / "o.jsonl").read_text().splitlines()]
    assert len(lines) == 2
    assert main(["report", "--out", out]) == 0


def test_cli_missing_prerequisite_exits_1(tmp_path, caplog):
    assert main(["pretrain", "--out", str(tmp_path)]) == 1
    assert "'data'" in caplog.text


def test_cli_usage_error_lists_flags(tmp_path, capsys):
    assert main(["decode", "--out", str(tmp_path), "--frobnicate"]) == 2
    err = capsys.readouterr().err
    for flag in ("--correction", "--n-pivot", "--beta", "--input"):
        assert flag in err
    assert main(["translate"]) == 2
    assert main(["decode", "--correction", "maybe"]) == 2


def test_cli_overrides_reach_config(tmp_path):
    from softpivot.cli import build_parser, resolve_config

    args = build_parser().parse_args(["decode", "--out", str(tmp_path), "--beta", "0", "--correction", "exc",
                                      "--n-pivot", "3"])
    cfg, _ = resolve_config(args)
    assert (cfg.loss.beta, cfg.bridge.correction, cfg.decode.n_pivot) == (0.0, "exc", 3)


def test_step_names():
    assert STEPS == ("data", "pretrain", "pseudo-pivot", "connect", "finetune")
