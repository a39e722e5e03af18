import csv
import hashlib
import json
import math
import subprocess
import sys
from pathlib import Path

import pytest

from lensdistill import cli

SNAPSHOTS = Path(__file__).parent / "snapshots"
SUBCOMMANDS = ["gen-data", "train-teacher", "distill", "eval", "lens-profile", "landscape",
               "exposure", "compare"]

TINY_DATA = ["--vocab-size", "16", "--n-hidden-states", "4", "--min-len", "8", "--max-len", "12",
             "--n-train", "64", "--n-val", "8", "--n-test", "12"]
TINY_TEACHER = ["--n-layers", "2", "--d-model", "16", "--n-heads", "2", "--max-seq-len", "32",
                "--steps", "6", "--batch-size", "8"]
TINY_STUDENT = ["--n-layers", "2", "--d-model", "8", "--n-heads", "2", "--max-seq-len", "32",
                "--steps", "5", "--batch-size", "8", "--n-inter-layers", "1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", root / "data", *TINY_DATA) == 0
    assert run("train-teacher", "--data", root / "data", "--out", root / "teacher", *TINY_TEACHER) == 0
    return root


def render_help(args, monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    parser = cli.build_parser()
    if not args:
        return parser.format_help()
    sub = next(a for a in parser._actions if isinstance(a, cli.argparse._SubParsersAction))
    return sub.choices[args[0]].format_help()


class TestHelp:
    @pytest.mark.parametrize("name", [None, *SUBCOMMANDS])
    def test_snapshot(self, name, monkeypatch):
        text = render_help([name] if name else [], monkeypatch)
        snap = SNAPSHOTS / f"help_{name or 'main'}.txt"
        assert text == snap.read_text(encoding="utf-8")

    @pytest.mark.parametrize("name", SUBCOMMANDS)
    def test_every_flag_documented(self, name, monkeypatch):
        parser = cli.build_parser()
        sub = next(a for a in parser._actions if isinstance(a, cli.argparse._SubParsersAction))
        p = sub.choices[name]
        text = render_help([name], monkeypatch)
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text
            if action.option_strings and action.dest != "help":
                assert action.help

    def test_output_columns_documented(self, monkeypatch):
        assert all(c in render_help(["exposure"], monkeypatch) for c in cli.EXPOSURE_COLUMNS)
        assert all(c in render_help(["lens-profile"], monkeypatch) for c in cli.PROFILE_COLUMNS)
        assert all(c in render_help(["eval"], monkeypatch) for c in cli.EVAL_SUMMARY_COLUMNS)
        assert all(c in render_help(["compare"], monkeypatch) for c in cli.COMPARE_COLUMNS)


class TestGenData:
    def test_outputs_and_repeatability(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path / "a", *TINY_DATA, "--seed", "7") == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["train"]["examples"] == 64
        assert run("gen-data", "--out", tmp_path / "b", *TINY_DATA, "--seed", "7") == 0
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"):
            a = hashlib.sha256((tmp_path / "a" / name).read_bytes()).hexdigest()
            assert a == hashlib.sha256((tmp_path / "b" / name).read_bytes()).hexdigest()

    def test_invalid_vocab(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "x", "--vocab-size", "2") == cli.EXIT_CONFIG

    def test_collision_policy(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "a", *TINY_DATA) == 0
        assert run("gen-data", "--out", tmp_path / "a", *TINY_DATA) == cli.EXIT_IO
        assert run("gen-data", "--out", tmp_path / "a", *TINY_DATA, "--force") == 0

    def test_config_file_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("vocab_size: 16\nn_train: 10\nn_val: 2\nn_test: 2\nmin_len: 6\nmax_len: 8\n")
        assert run("gen-data", "--config", cfg, "--out", tmp_path / "d", "--n-train", "5") == 0
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert manifest["spec"]["n_train"] == 5 and manifest["spec"]["vocab_size"] == 16

    def test_unknown_key_suggests_nearest(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("vocab_sise: 16\n")
        assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == cli.EXIT_CONFIG
        assert "vocab_size" in capsys.readouterr().err


class TestTraining:
    def test_teacher_run_dir(self, workspace):
        d = workspace / "teacher"
        assert (d / "final.ckpt").exists() and (d / "config.json").exists()
        assert len((d / "metrics.jsonl").read_text().splitlines()) == 6

    def test_distill_logs_inter_and_default_lambda(self, workspace):
        out = workspace / "student"
        assert run("distill", "--data", workspace / "data", "--teacher", workspace / "teacher/final.ckpt",
                   "--out", out, *TINY_STUDENT, "--force") == 0
        rows = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
        assert all(r["l_inter"] > 0 for r in rows)
        assert json.loads((out / "config.json").read_text())["lam"] == 1.0

    def test_lambda_zero_matches_baseline(self, workspace):
        common = ["--data", workspace / "data", "--teacher", workspace / "teacher/final.ckpt", *TINY_STUDENT,
                  "--force"]
        assert run("distill", "--out", workspace / "base", *common, "--n-inter-layers", "0") == 0
        assert run("distill", "--out", workspace / "lam0", *common, "--lam", "0") == 0
        strip = lambda p: [(r["step"], r["l_task"], r["lr"]) for r in
                           map(json.loads, (p / "metrics.jsonl").read_text().splitlines())]
        assert strip(workspace / "base") == strip(workspace / "lam0")
        assert (workspace / "base/final.ckpt").read_bytes() == (workspace / "lam0/final.ckpt").read_bytes()

    def test_missing_teacher(self, workspace):
        assert run("distill", "--data", workspace / "data", "--teacher", workspace / "nope.ckpt",
                   "--out", workspace / "s2", *TINY_STUDENT) == cli.EXIT_IO

    def test_vocab_mismatch(self, workspace, tmp_path):
        assert run("gen-data", "--out", tmp_path / "d20", *TINY_DATA[2:], "--vocab-size", "20") == 0
        assert run("distill", "--data", tmp_path / "d20", "--teacher", workspace / "teacher/final.ckpt",
                   "--out", tmp_path / "s", *TINY_STUDENT) == cli.EXIT_CONFIG

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_exit_code(self, workspace, tmp_path):
        code = run("train-teacher", "--data", workspace / "data", "--out", tmp_path / "t",
                   *TINY_TEACHER, "--lr-init", "1e300", "--grad-clip", "0")
        assert code == cli.EXIT_NUMERIC


class TestEvaluation:
    def test_teacher_against_own_greedy_is_100(self, workspace, tmp_path, capsys):
        ckpt = workspace / "teacher/final.ckpt"
        assert run("eval", "--data", workspace / "data", "--student", ckpt, "--teacher", ckpt,
                   "--reference", "teacher", "--seeds", "10,20", "--out", tmp_path / "e") == 0
        with open(tmp_path / "e/summary.csv") as fh:
            summary = list(csv.DictReader(fh))
        greedy = next(r for r in summary if r["decoding"] == "greedy")
        assert float(greedy["rouge_l"]) == 100.0
        assert [r["seed"] for r in summary if r["decoding"] == "sampled"] == ["10", "20"]
        assert math.isfinite(float(greedy["held_out_ce"]))

    def test_default_five_seeds(self, workspace, tmp_path):
        ckpt = workspace / "teacher/final.ckpt"
        assert run("eval", "--data", workspace / "data", "--student", ckpt, "--limit", "2",
                   "--out", tmp_path / "e") == 0
        rows = [json.loads(x) for x in (tmp_path / "e/report.jsonl").read_text().splitlines()]
        assert [r["seed"] for r in rows if r["decoding"] == "sampled"] == [10, 20, 30, 40, 50]
        assert rows[-1]["decoding"] == "sampled_mean"

    def test_empty_split_rejected(self, workspace, tmp_path):
        data = tmp_path / "data"
        data.mkdir()
        for name in ("manifest.json", "train.jsonl", "val.jsonl"):
            (data / name).write_bytes((workspace / "data" / name).read_bytes())
        (data / "test.jsonl").write_text("")
        assert run("eval", "--data", data, "--student", workspace / "teacher/final.ckpt",
                   "--out", tmp_path / "e") == cli.EXIT_CONFIG

    def test_lens_profile_and_exposure(self, workspace, tmp_path):
        ckpt = workspace / "teacher/final.ckpt"
        assert run("lens-profile", "--data", workspace / "data", "--teacher", ckpt, "--student", ckpt,
                   "--mapping", "1:1", "--out", tmp_path / "p.csv") == 0
        with open(tmp_path / "p.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["value"]) for r in rows] == [0.0, 0.0]
        assert (tmp_path / "p.jsonl").exists()
        assert run("exposure", "--data", workspace / "data", "--teacher", ckpt, "--student", ckpt,
                   "--horizons", "2,4", "--samples", "3", "--prompts", "2", "--out", tmp_path / "x.csv") == 0
        with open(tmp_path / "x.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["exaccerr_pct"]) for r in rows] == [0.0, 0.0]


class TestLandscape:
    def test_rows(self, tmp_path):
        out = tmp_path / "l.csv"
        assert run("landscape", "--cmin", "1e-8", "--cmax", "1e6", "--points", "15", "--out", out) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        one = next(r for r in rows if float(r["c"]) == 1.0)
        assert float(one["g_jsd"]) == 0.0 and float(one["g_jd"]) == 0.0
        first = rows[0]
        assert abs(float(first["g_jsd"]) - math.log(2)) < 1e-6 and float(first["g_jd"]) > 18

    def test_bad_range(self):
        assert run("landscape", "--cmin", "2", "--cmax", "1") == cli.EXIT_CONFIG

    def test_console_script_stdout(self):
        proc = subprocess.run([sys.executable, "-m", "lensdistill.cli", "landscape", "--kind", "jsd",
                               "--points", "3"], capture_output=True, text=True, check=True)
        assert proc.stdout.splitlines()[0] == "c,g_jsd"
        assert len(proc.stdout.splitlines()) == 4


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("DLENS_THREADS", "0")
    assert run("landscape", "--points", "3") == cli.EXIT_CONFIG
