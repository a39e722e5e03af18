"""Paired desk-scale comparison: RKL-only students against lens-aligned students.

One teacher is trained on the synthetic corpus. For every seed, two students
are distilled from it with identical settings except for the intermediate
term (K=0 versus the default K=2, lambda=1). Both are then profiled through
the lens, scored for held-out cross-entropy, and measured for exposure bias.
"""

from __future__ import annotations

import json
import multiprocessing as mp
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import BOS_ID, Corpus, CorpusSpec, generate_corpus
from .distill import DistillConfig, TeacherConfig, distill, train_teacher
from .metrics import exposure_reports, held_out_ce, layer_kl_profile
from .model import ModelCheckpoint
from .runtime import thread_limit, tune_allocator

ARMS = ("rkl", "distilllens")


@dataclass
class ExperimentConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    teacher: TeacherConfig = field(default_factory=lambda: TeacherConfig(steps=1500))
    student: DistillConfig = field(default_factory=DistillConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    horizons: tuple[int, ...] = (8, 16, 24)
    n_prefix_samples: int = 16
    n_exposure_prompts: int = 32
    exposure_prompt_len: int = 4
    profile_split: str = "test"

    def arm_config(self, arm: str, seed: int) -> DistillConfig:
        if arm == "rkl":
            return replace(self.student, seed=seed, n_inter_layers=0, mapping=None)
        if arm == "distilllens":
            return replace(self.student, seed=seed)
        raise ValueError(f"unknown arm {arm!r}")


@dataclass
class ArmResult:
    arm: str
    seed: int
    profile_jsd: list[dict]
    profile_kl: list[dict]
    mean_inter_jsd: float
    mean_inter_kl: float
    final_kl: float
    held_out_ce: float
    exposure: list[dict]
    final_train_loss: float


@dataclass
class ExperimentResult:
    config: dict
    teacher_ce: float
    mapping: list[list[int]]
    arms: list[ArmResult]
    wall_s: float
    workers: int

    def arm(self, name: str, seed: int) -> ArmResult:
        return next(a for a in self.arms if a.arm == name and a.seed == seed)

    def metrics(self) -> dict:
        """Every reported number except timing, for bitwise rerun comparison."""
        return {"teacher_ce": self.teacher_ce, "arms": [asdict(a) for a in self.arms]}

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)


def exposure_prompts(corpus: Corpus, n: int, prompt_len: int, split: str = "test") -> list[list[int]]:
    examples = corpus.split(split)[:n]
    return [[BOS_ID] + list(ex.prompt_ids[:prompt_len]) for ex in examples]


_SHARED: dict = {}


def _init_worker(teacher, corpus, cfg):
    tune_allocator()
    _SHARED.update(teacher=teacher, corpus=corpus, cfg=cfg)


def _run_arm(arm: str, seed: int) -> ArmResult:
    teacher: ModelCheckpoint = _SHARED["teacher"]
    corpus: Corpus = _SHARED["corpus"]
    cfg: ExperimentConfig = _SHARED["cfg"]
    with threadpool_limits(1):
        dcfg = cfg.arm_config(arm, seed)
        run = distill(dcfg, corpus.train, teacher=teacher)
        mapping = cfg.student.layer_mapping(teacher.config.n_layers)
        evalset = corpus.split(cfg.profile_split)
        prof_jsd = layer_kl_profile(teacher, run.model, evalset, mapping, "jsd", cfg.student.lens)
        prof_kl = layer_kl_profile(teacher, run.model, evalset, mapping, "fkl", cfg.student.lens)
        ce = held_out_ce(run.model, evalset)
        prompts = exposure_prompts(corpus, cfg.n_exposure_prompts, cfg.exposure_prompt_len,
                                   cfg.profile_split)
        exp = exposure_reports(teacher, run.model, prompts, cfg.horizons, cfg.n_prefix_samples, seed)
    tail = run.records[-max(1, len(run.records) // 10):]
    return ArmResult(
        arm=arm,
        seed=seed,
        profile_jsd=prof_jsd.rows(),
        profile_kl=prof_kl.rows(),
        mean_inter_jsd=prof_jsd.mean_intermediate,
        mean_inter_kl=prof_kl.mean_intermediate,
        final_kl=prof_kl.final_value,
        held_out_ce=ce,
        exposure=[r.to_dict() for r in exp],
        final_train_loss=float(np.mean([r.l_total for r in tail])),
    )


def run_experiment(cfg: ExperimentConfig = ExperimentConfig(), workers: int | None = None,
                   teacher: ModelCheckpoint | None = None, corpus: Corpus | None = None,
                   log=None) -> ExperimentResult:
    """Train (or reuse) the teacher, then run both arms for every seed."""
    tune_allocator()
    t0 = time.perf_counter()
    say = log or (lambda msg: None)
    if corpus is None:
        corpus = generate_corpus(cfg.corpus)
    if teacher is None:
        say(f"training teacher for {cfg.teacher.steps} steps")
        with threadpool_limits(1):
            teacher = train_teacher(cfg.teacher, corpus.train).model
    teacher_ce = held_out_ce(teacher, corpus.split(cfg.profile_split))
    say(f"teacher held-out CE {teacher_ce:.4f}")
    jobs = [(arm, seed) for seed in cfg.seeds for arm in ARMS]
    if workers is None:
        workers = thread_limit() or os.cpu_count() or 1
    workers = max(1, min(workers, len(jobs)))
    if workers == 1:
        _init_worker(teacher, corpus, cfg)
        results = []
        for arm, seed in jobs:
            say(f"distilling arm={arm} seed={seed}")
            results.append(_run_arm(arm, seed))
    else:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker,
                                 initargs=(teacher, corpus, cfg)) as pool:
            futures = [pool.submit(_run_arm, arm, seed) for arm, seed in jobs]
            results = [f.result() for f in futures]
    mapping = cfg.student.layer_mapping(teacher.config.n_layers)
    return ExperimentResult(
        config=_config_dict(cfg),
        teacher_ce=teacher_ce,
        mapping=[list(p) for p in mapping.pairs] if mapping else [],
        arms=results,
        wall_s=time.perf_counter() - t0,
        workers=workers,
    )


def _config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    if d["student"].get("mapping") is not None:
        d["student"]["mapping"] = [list(p) for p in d["student"]["mapping"]]
    return d


def save_result(result: ExperimentResult, path) -> Path:
    path = Path(path)
    path.write_text(result.to_json() + "\n", encoding="utf-8")
    return path
