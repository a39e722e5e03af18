"""Command-line entry point: ``lensdistill <subcommand> [options]``.

Every option can also be given in a YAML file passed with ``--config``; keys
are the option names with dashes replaced by underscores. An option given on
the command line wins over the file. Unknown keys are rejected.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import json
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import __version__
from .autodiff import NumericError
from .checkpoint import CheckpointError, load_checkpoint
from .data import BOS_ID, EOS_ID, CorpusSpec, generate_corpus, read_corpus, write_corpus
from .distill import (INTER_LOSSES, TASK_LOSSES, DistillConfig, LayerMapping, TeacherConfig,
                      distill, select_student_layers, train_teacher, uniform_map)
from .divergence import DivergenceKind, landscape_curve
from .experiment import ExperimentConfig, exposure_prompts, run_experiment, save_result
from .lens import LensConfig
from .metrics import exposure_reports, held_out_ce, layer_kl_profile, rouge_l
from .model import ModelConfig, generate
from .runtime import thread_limit, tune_allocator
from .seeding import derive_seed

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
EVAL_SEEDS = (10, 20, 30, 40, 50)


class ConfigError(ValueError):
    pass


class OutputExists(OSError):
    pass


# -- option tables -------------------------------------------------------------
# name -> (type, default, help). ``bool`` options become --flag / --no-flag.

CORPUS_OPTS = {
    "vocab_size": (int, 64, "vocabulary size including PAD/BOS/EOS"),
    "n_hidden_states": (int, 8, "hidden states of the generating automaton"),
    "transition_temperature": (float, 0.3, "temperature of the random transition table"),
    "emission_temperature": (float, 0.2, "temperature of the random emission table"),
    "min_len": (int, 28, "minimum content tokens per sequence"),
    "max_len": (int, 36, "maximum content tokens per sequence"),
    "n_train": (int, 4000, "training sequences"),
    "n_val": (int, 400, "validation sequences"),
    "n_test": (int, 400, "test sequences"),
    "seed": (int, 0, "corpus seed"),
}

TEACHER_MODEL_OPTS = {
    "n_layers": (int, 6, "decoder blocks"),
    "d_model": (int, 64, "residual width"),
    "n_heads": (int, 4, "attention heads"),
    "max_seq_len": (int, 64, "maximum sequence length"),
    "tie_unembedding": (bool, False, "share the token embedding as unembedding"),
}

STUDENT_MODEL_OPTS = {
    "n_layers": (int, 3, "decoder blocks"),
    "d_model": (int, 32, "residual width"),
    "n_heads": (int, 2, "attention heads"),
    "max_seq_len": (int, 64, "maximum sequence length"),
    "tie_unembedding": (bool, False, "share the token embedding as unembedding"),
}

OPTIM_OPTS = {
    "steps": (int, 2000, "optimizer steps"),
    "batch_size": (int, 32, "sequences per step"),
    "lr_init": (float, 3e-3, "initial learning rate"),
    "lr_final": (float, 1e-7, "final learning rate of the cosine schedule"),
    "weight_decay": (float, 0.01, "decoupled weight decay on weight matrices"),
    "grad_clip": (float, 1.0, "global gradient-norm clip (0 disables)"),
    "seed": (int, 0, "run seed"),
    "response_only": (bool, False, "score only response tokens"),
}

DISTILL_OPTS = {
    "task_loss": (str, "rkl", "output-layer loss: " + "|".join(TASK_LOSSES)),
    "inter_loss": (str, "jsd", "intermediate loss: " + "|".join(INTER_LOSSES)),
    "lam": (float, 1.0, "weight of the intermediate loss"),
    "n_inter_layers": (int, 2, "number of mapped intermediate student layers (0 disables)"),
    "mapping": (str, "auto", "layer mapping: auto or explicit pairs like 1:2,2:4"),
    "lens_final_norm": (bool, False, "apply the final layernorm before the lens"),
    "lens_temperature": (float, 1.0, "lens softmax temperature"),
}


def _add_options(p: argparse.ArgumentParser, table: dict, group: str | None = None) -> None:
    target = p.add_argument_group(group) if group else p
    for name, (typ, default, text) in table.items():
        flag = "--" + name.replace("_", "-")
        if typ is bool:
            target.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None,
                                help=f"{text} (default: {'on' if default else 'off'})")
        else:
            target.add_argument(flag, dest=name, type=typ, default=None, metavar=name.upper(),
                                help=f"{text} (default: {default})")


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", type=Path, help="YAML file of option values")
    p.add_argument("--out", type=Path, required=False, help=out_help)
    p.add_argument("--force", action="store_true", help="overwrite an existing --out")


def _resolve(args: argparse.Namespace, tables: list[dict], extra: dict | None = None) -> dict:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    for table in tables:
        values.update({k: v[1] for k, v in table.items()})
    values.update(extra or {})
    if getattr(args, "config", None) is not None:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config} must hold a mapping of option names to values")
        known = set(values) | {"out", "force"}
        for key, val in loaded.items():
            if key not in known:
                near = difflib.get_close_matches(str(key), sorted(known), n=1)
                hint = f"; did you mean {near[0]!r}?" if near else ""
                raise ConfigError(f"unknown config key {key!r}{hint}")
            if key == "out" and args.out is None:
                args.out = Path(val)
            elif key == "force":
                args.force = args.force or bool(val)
            else:
                values[key] = val
    for key in list(values):
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            values[key] = flag_val
    return values


def _prepare_out(path: Path | None, force: bool, is_dir: bool) -> Path:
    if path is None:
        raise ConfigError("--out is required")
    if path.exists():
        if not force:
            raise OutputExists(f"{path} exists; pass --force to overwrite")
        if path.is_dir() and is_dir:
            shutil.rmtree(path)
        elif path.is_dir() != is_dir:
            raise OutputExists(f"{path} exists with the wrong type")
    if is_dir:
        path.mkdir(parents=True, exist_ok=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _model_config(v: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(n_layers=v["n_layers"], d_model=v["d_model"], n_heads=v["n_heads"],
                       vocab_size=vocab_size, max_seq_len=v["max_seq_len"],
                       tie_unembedding=bool(v["tie_unembedding"]))


def _optim_kwargs(v: dict) -> dict:
    return {k: v[k] for k in OPTIM_OPTS}


def parse_mapping(text) -> tuple[tuple[int, int], ...] | None:
    if text is None or str(text).strip() == "auto":
        return None
    if isinstance(text, (list, tuple)):
        return tuple((int(a), int(b)) for a, b in text)
    pairs = []
    for item in str(text).split(","):
        try:
            s, t = item.split(":")
            pairs.append((int(s), int(t)))
        except ValueError:
            raise ConfigError(f"bad mapping entry {item!r}; expected student:teacher") from None
    return tuple(pairs)


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in columns})


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    v = _resolve(args, [CORPUS_OPTS])
    spec = CorpusSpec(**v)
    out = _prepare_out(args.out, args.force, is_dir=True)
    manifest = write_corpus(generate_corpus(spec), out)
    print(json.dumps(manifest["stats"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    v = _resolve(args, [TEACHER_MODEL_OPTS, OPTIM_OPTS])
    corpus = read_corpus(args.data)
    cfg = TeacherConfig(model=_model_config(v, corpus.spec.vocab_size), **_optim_kwargs(v))
    corpus.spec.validate(cfg.model.max_seq_len)
    out = _prepare_out(args.out, args.force, is_dir=True)
    run = train_teacher(cfg, corpus.train, run_dir=out)
    last = run.records[-1]
    _say(f"teacher done: {len(run.records)} steps, final loss {last.l_total:.4f}, "
         f"val CE {held_out_ce(run.model, corpus.val):.4f}")
    print(run.checkpoint_path)
    return EXIT_OK


def _distill_config(v: dict, vocab_size: int, teacher_path) -> DistillConfig:
    return DistillConfig(
        student=_model_config(v, vocab_size),
        teacher_ckpt=str(teacher_path),
        task_loss=v["task_loss"],
        inter_loss=v["inter_loss"],
        lam=float(v["lam"]),
        n_inter_layers=int(v["n_inter_layers"]),
        mapping=parse_mapping(v["mapping"]),
        lens=LensConfig(bool(v["lens_final_norm"]), float(v["lens_temperature"])),
        **_optim_kwargs(v),
    )


def cmd_distill(args) -> int:
    v = _resolve(args, [STUDENT_MODEL_OPTS, OPTIM_OPTS, DISTILL_OPTS])
    corpus = read_corpus(args.data)
    teacher = load_checkpoint(args.teacher)
    cfg = _distill_config(v, corpus.spec.vocab_size, args.teacher)
    if teacher.config.vocab_size != cfg.student.vocab_size:
        raise ConfigError(f"vocab mismatch: teacher {teacher.config.vocab_size} "
                          f"vs corpus {cfg.student.vocab_size}")
    out = _prepare_out(args.out, args.force, is_dir=True)
    run = distill(cfg, corpus.train, teacher=teacher, run_dir=out)
    last = run.records[-1]
    _say(f"student done: {len(run.records)} steps, l_task {last.l_task:.4f}, l_inter {last.l_inter:.4f}")
    print(run.checkpoint_path)
    return EXIT_OK


EVAL_EXAMPLE_COLUMNS = ["example", "decoding", "seed", "precision", "recall", "f_measure"]
EVAL_SUMMARY_COLUMNS = ["decoding", "seed", "rouge_l", "n_examples", "held_out_ce"]


def cmd_eval(args) -> int:
    v = _resolve(args, [], {"split": "test", "seeds": ",".join(map(str, EVAL_SEEDS)), "limit": 0,
                            "reference": "data"})
    corpus = read_corpus(args.data)
    examples = corpus.split(v["split"])
    if v["limit"]:
        examples = examples[: int(v["limit"])]
    if not examples:
        raise ConfigError(f"split {v['split']!r} is empty")
    student = load_checkpoint(args.student)
    if v["reference"] not in ("data", "teacher"):
        raise ConfigError("--reference must be data or teacher")
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    if v["reference"] == "teacher" and teacher is None:
        raise ConfigError("--reference teacher needs --teacher")
    seeds = _int_list(v["seeds"])
    out = _prepare_out(args.out, args.force, is_dir=True)

    def decode(model, ex, greedy, seed):
        prompt = [BOS_ID] + ex.prompt_ids
        toks = generate(model, prompt, len(ex.response_ids) + 1, greedy=greedy, seed=seed, eos_id=EOS_ID)
        return toks[:-1] if toks and toks[-1] == EOS_ID else toks

    refs = [decode(teacher, ex, True, 0) if v["reference"] == "teacher" else ex.response_ids
            for ex in examples]
    rows, summary = [], []
    ce = held_out_ce(student, examples)
    runs = [("greedy", None)] + [("sampled", s) for s in seeds]
    for mode, seed in runs:
        scores = []
        for i, (ex, ref) in enumerate(zip(examples, refs)):
            s = derive_seed(seed, f"eval.{i}") if seed is not None else 0
            sc = rouge_l(decode(student, ex, mode == "greedy", s), ref).scaled()
            scores.append(sc.f_measure)
            rows.append({"example": i, "decoding": mode, "seed": seed, **asdict(sc)})
        summary.append({"decoding": mode, "seed": seed, "rouge_l": float(np.mean(scores)),
                        "n_examples": len(examples), "held_out_ce": ce})
    sampled = [r["rouge_l"] for r in summary if r["decoding"] == "sampled"]
    if sampled:
        summary.append({"decoding": "sampled_mean", "seed": None, "rouge_l": float(np.mean(sampled)),
                        "rouge_l_std": float(np.std(sampled, ddof=1)) if len(sampled) > 1 else 0.0,
                        "n_examples": len(examples), "held_out_ce": ce})
    _write_csv(out / "rouge_examples.csv", rows, EVAL_EXAMPLE_COLUMNS)
    _write_csv(out / "summary.csv", summary, EVAL_SUMMARY_COLUMNS)
    _write_jsonl(out / "report.jsonl", summary)
    for r in summary:
        print(f"{r['decoding']:>12} seed={r['seed']!s:>4} rouge_l={r['rouge_l']:.2f}")
    print(f"held_out_ce={ce:.4f}")
    return EXIT_OK


PROFILE_COLUMNS = ["student_layer", "teacher_layer", "value", "kind", "final"]


def cmd_lens_profile(args) -> int:
    v = _resolve(args, [], {"split": "test", "mapping": "auto", "kind": "fkl", "n_inter_layers": 2,
                            "lens_final_norm": False, "limit": 0})
    corpus = read_corpus(args.data)
    examples = corpus.split(v["split"])
    if v["limit"]:
        examples = examples[: int(v["limit"])]
    teacher, student = load_checkpoint(args.teacher), load_checkpoint(args.student)
    pairs = parse_mapping(v["mapping"])
    L_S, L_T = student.config.n_layers, teacher.config.n_layers
    if pairs is None:
        mapping = uniform_map(select_student_layers(L_S, int(v["n_inter_layers"])), L_S, L_T)
    else:
        mapping = LayerMapping(pairs).validate(L_S, L_T)
    prof = layer_kl_profile(teacher, student, examples, mapping, DivergenceKind(v["kind"]),
                            LensConfig(apply_final_norm=bool(v["lens_final_norm"])))
    out = _prepare_out(args.out, args.force, is_dir=False)
    _write_csv(out, prof.rows(), PROFILE_COLUMNS)
    _write_jsonl(out.with_suffix(".jsonl"), prof.rows())
    for r in prof.records:
        tag = "final" if r.final else "mapped"
        print(f"{tag:>6} student={r.student_layer} teacher={r.teacher_layer} {r.kind}={r.value:.6f}")
    return EXIT_OK


def cmd_landscape(args) -> int:
    v = _resolve(args, [], {"kind": "both", "cmin": 1e-8, "cmax": 1e6, "points": 200})
    if v["kind"] not in ("jsd", "jd", "both"):
        raise ConfigError("--kind must be jsd, jd or both")
    curve = landscape_curve(float(v["cmin"]), float(v["cmax"]), int(v["points"]))
    cols = {"jsd": ["c", "g_jsd"], "jd": ["c", "g_jd"], "both": ["c", "g_jsd", "g_jd"]}[v["kind"]]
    rows = [{"c": c, "g_jsd": gj, "g_jd": gd} for c, gj, gd in curve.tolist()]
    if args.out is None:
        w = csv.DictWriter(sys.stdout, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    else:
        _write_csv(_prepare_out(args.out, args.force, is_dir=False), rows, cols)
    return EXIT_OK


EXPOSURE_COLUMNS = ["l", "R_l", "eps_l", "exaccerr_pct", "R_se", "eps_se", "exaccerr_se",
                    "n_prompts", "n_samples"]


def cmd_exposure(args) -> int:
    v = _resolve(args, [], {"split": "test", "horizons": "8,16,24", "samples": 16, "prompts": 32,
                            "prompt_len": 4, "seed": 0})
    corpus = read_corpus(args.data)
    prompts = exposure_prompts(corpus, int(v["prompts"]), int(v["prompt_len"]), v["split"])
    if not prompts:
        raise ConfigError(f"split {v['split']!r} is empty")
    teacher, student = load_checkpoint(args.teacher), load_checkpoint(args.student)
    reports = exposure_reports(teacher, student, prompts, _int_list(v["horizons"]), int(v["samples"]),
                               int(v["seed"]))
    out = _prepare_out(args.out, args.force, is_dir=False)
    rows = [r.to_dict() for r in reports]
    _write_csv(out, rows, EXPOSURE_COLUMNS)
    _write_jsonl(out.with_suffix(".jsonl"), rows)
    for r in reports:
        print(f"l={r.l:>3} R={r.R_l:.5f} eps={r.eps_l:.5f} exaccerr={r.exaccerr_pct:.2f}% "
              f"(se {r.exaccerr_se:.2f})")
    return EXIT_OK


COMPARE_COLUMNS = ["arm", "seed", "mean_inter_jsd", "mean_inter_kl", "final_kl", "held_out_ce",
                   "exaccerr_8", "exaccerr_16", "exaccerr_24", "final_train_loss"]


def cmd_compare(args) -> int:
    v = _resolve(args, [], {"seeds": "0,1,2", "teacher_steps": 1500, "steps": 2000, "workers": 0})
    cfg = ExperimentConfig()
    cfg.seeds = tuple(_int_list(v["seeds"]))
    cfg.teacher.steps = int(v["teacher_steps"])
    cfg.student.steps = int(v["steps"])
    out = _prepare_out(args.out, args.force, is_dir=True)
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    result = run_experiment(cfg, workers=int(v["workers"]) or None, teacher=teacher, log=_say)
    save_result(result, out / "result.json")
    rows = []
    for a in result.arms:
        row = {k: getattr(a, k) for k in ("arm", "seed", "mean_inter_jsd", "mean_inter_kl", "final_kl",
                                           "held_out_ce", "final_train_loss")}
        for e in a.exposure:
            row[f"exaccerr_{e['l']}"] = e["exaccerr_pct"]
        rows.append(row)
    _write_csv(out / "summary.csv", rows, COMPARE_COLUMNS)
    for r in rows:
        print(" ".join(f"{k}={r.get(k)}" for k in COMPARE_COLUMNS))
    print(f"wall_s={result.wall_s:.1f}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _columns_epilog(*groups: tuple[str, list[str]]) -> str:
    lines = ["output columns:"]
    for name, cols in groups:
        lines.append(f"  {name}: {', '.join(cols)}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(
        prog="lensdistill",
        description="Lens-aligned distillation of small decoder-only language models.",
        epilog="environment: DLENS_THREADS bounds worker processes and BLAS threads.\n"
               "exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.",
        formatter_class=fmt,
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="generate the synthetic corpus", formatter_class=fmt,
                       description="Sample train/val/test splits from a seeded hidden-state automaton.",
                       epilog="outputs: train.jsonl, val.jsonl, test.jsonl (one {prompt, response} "
                              "object per line) and manifest.json (spec, stats, sha256).")
    _common(g, "output directory")
    _add_options(g, CORPUS_OPTS, "corpus")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="train the teacher with next-token cross-entropy",
                       formatter_class=fmt, description="Train a fresh model on the corpus.",
                       epilog="outputs: config.json, metrics.jsonl, final.ckpt\n"
                              + _columns_epilog(("metrics.jsonl", ["step", "l_task", "l_inter", "l_total",
                                                                   "lr", "wall_ms"])))
    _common(t, "run directory")
    t.add_argument("--data", type=Path, required=True, help="corpus directory")
    _add_options(t, TEACHER_MODEL_OPTS, "model")
    _add_options(t, OPTIM_OPTS, "optimization")
    t.set_defaults(func=cmd_train_teacher)

    d = sub.add_parser("distill", help="distill a student from a frozen teacher", formatter_class=fmt,
                       description="Train a student on L_task + lam * L_inter with lensed "
                                   "intermediate distributions.",
                       epilog="outputs: config.json, metrics.jsonl, final.ckpt\n"
                              + _columns_epilog(("metrics.jsonl", ["step", "l_task", "l_inter", "l_total",
                                                                   "lr", "wall_ms"])))
    _common(d, "run directory")
    d.add_argument("--data", type=Path, required=True, help="corpus directory")
    d.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    _add_options(d, STUDENT_MODEL_OPTS, "student model")
    _add_options(d, OPTIM_OPTS, "optimization")
    _add_options(d, DISTILL_OPTS, "distillation")
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", help="Rouge-L and held-out cross-entropy", formatter_class=fmt,
                       description="Greedy and sampled (T=1, top-p=1) decoding of every prompt, "
                                   "scored by token-level Rouge-L x100.",
                       epilog="outputs: rouge_examples.csv, summary.csv, report.jsonl\n"
                              + _columns_epilog(("rouge_examples.csv", EVAL_EXAMPLE_COLUMNS),
                                                ("summary.csv", EVAL_SUMMARY_COLUMNS),
                                                ("report.jsonl", EVAL_SUMMARY_COLUMNS + ["rouge_l_std"])))
    _common(e, "output directory")
    e.add_argument("--data", type=Path, required=True, help="corpus directory")
    e.add_argument("--student", type=Path, required=True, help="checkpoint to evaluate")
    e.add_argument("--teacher", type=Path, help="teacher checkpoint (for --reference teacher)")
    e.add_argument("--split", help="split to evaluate (default: test)")
    e.add_argument("--seeds", help="sampling seeds (default: 10,20,30,40,50)")
    e.add_argument("--limit", type=int, help="evaluate only the first N examples (default: all)")
    e.add_argument("--reference", help="data: corpus responses; teacher: teacher greedy output "
                                       "(default: data)")
    e.set_defaults(func=cmd_eval)

    lp = sub.add_parser("lens-profile", help="per-layer divergence between lensed distributions",
                        formatter_class=fmt,
                        description="Token-averaged divergence at every mapped layer pair and at the output.",
                        epilog="outputs: CSV at --out and JSONL beside it\n"
                               + _columns_epilog(("csv", PROFILE_COLUMNS)))
    _common(lp, "CSV path")
    lp.add_argument("--data", type=Path, required=True, help="corpus directory")
    lp.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    lp.add_argument("--student", type=Path, required=True, help="student checkpoint")
    lp.add_argument("--split", help="split to profile (default: test)")
    lp.add_argument("--mapping", help="auto or explicit pairs like 1:2,2:4 (default: auto)")
    lp.add_argument("--n-inter-layers", type=int, help="layers chosen by auto mapping (default: 2)")
    lp.add_argument("--kind", choices=[k.value for k in DivergenceKind], help="divergence (default: fkl)")
    lp.add_argument("--lens-final-norm", action=argparse.BooleanOptionalAction, default=None,
                    help="apply the final layernorm before the lens (default: off)")
    lp.add_argument("--limit", type=int, help="profile only the first N examples (default: all)")
    lp.set_defaults(func=cmd_lens_profile)

    ls = sub.add_parser("landscape", help="per-class loss landscapes g(c)", formatter_class=fmt,
                        description="Evaluate g_jsd(c) = c ln c - (1+c) ln((1+c)/2) and "
                                    "g_jd(c) = (c-1) ln c on a log-spaced grid.",
                        epilog="outputs: CSV at --out, or stdout when --out is omitted\n"
                               + _columns_epilog(("csv", ["c", "g_jsd", "g_jd"])))
    _common(ls, "CSV path (default: stdout)")
    ls.add_argument("--kind", help="jsd, jd or both (default: both)")
    ls.add_argument("--cmin", type=float, help="smallest confidence ratio (default: 1e-08)")
    ls.add_argument("--cmax", type=float, help="largest confidence ratio (default: 1e+06)")
    ls.add_argument("--points", type=int, help="grid points (default: 200)")
    ls.set_defaults(func=cmd_landscape)

    x = sub.add_parser("exposure", help="excess accumulated error at several horizons",
                       formatter_class=fmt,
                       description="Per-step KL(teacher || student) accumulated along student-sampled "
                                   "prefixes, relative to teacher-sampled prefixes.",
                       epilog="outputs: CSV at --out and JSONL beside it\n"
                              + _columns_epilog(("csv", EXPOSURE_COLUMNS)))
    _common(x, "CSV path")
    x.add_argument("--data", type=Path, required=True, help="corpus directory")
    x.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    x.add_argument("--student", type=Path, required=True, help="student checkpoint")
    x.add_argument("--split", help="split supplying prompts (default: test)")
    x.add_argument("--horizons", help="comma-separated horizons (default: 8,16,24)")
    x.add_argument("--samples", type=int, help="sampled prefixes per prompt (default: 16)")
    x.add_argument("--prompts", type=int, help="number of prompts (default: 32)")
    x.add_argument("--prompt-len", type=int, help="content tokens per prompt after BOS (default: 4)")
    x.add_argument("--seed", type=int, help="sampling seed (default: 0)")
    x.set_defaults(func=cmd_exposure)

    c = sub.add_parser("compare", help="paired RKL-only vs lens-aligned students over several seeds",
                       formatter_class=fmt,
                       description="Train the default teacher (unless --teacher is given), distill both "
                                   "arms per seed, and report profiles, CE and exposure bias.",
                       epilog="outputs: result.json, summary.csv\n"
                              + _columns_epilog(("summary.csv", COMPARE_COLUMNS)))
    _common(c, "output directory")
    c.add_argument("--teacher", type=Path, help="reuse this teacher checkpoint")
    c.add_argument("--seeds", help="student seeds (default: 0,1,2)")
    c.add_argument("--teacher-steps", type=int, help="teacher steps (default: 1500)")
    c.add_argument("--steps", type=int, help="student steps (default: 2000)")
    c.add_argument("--workers", type=int, help="worker processes (default: DLENS_THREADS or cores)")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    tune_allocator()
    try:
        limit = thread_limit()
    except ValueError as exc:
        _say(f"error: {exc}")
        return EXIT_CONFIG
    try:
        with threadpool_limits(limit):
            return args.func(args)
    except (CheckpointError, OutputExists, OSError) as exc:
        _say(f"error: {exc}")
        return EXIT_IO
    except NumericError as exc:
        _say(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        _say(f"config error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
