"""Training loops: teacher language modelling and lens-aligned distillation.

A distillation step runs the frozen teacher and the student on the same
batch, scores the student's output distribution against the teacher's with
the task loss, scores lensed intermediate distributions of every mapped
(student layer, teacher layer) pair with the intermediate loss, and descends
``l_task + lam * l_inter``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import divergence as dv
from .autodiff import NumericError, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Batch, Example, make_batch
from .lens import LensConfig, model_lens
from .model import ModelCheckpoint, ModelConfig, forward_with_states, init_model
from .optim import AdamW, clip_grad_norm, cosine_lr
from .seeding import component_rng

TASK_LOSSES = ("fkl", "rkl", "jsd", "jeffreys", "sft")
INTER_LOSSES = ("fkl", "rkl", "jsd", "jeffreys", "mse")


class TrainingDiverged(NumericError):
    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = components
        parts = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {parts}")


# -- layer mapping -------------------------------------------------------------

def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def select_student_layers(n_student_layers: int, k: int) -> list[int]:
    """K evenly spaced student layers, excluding the final one."""
    if not 1 <= k <= n_student_layers - 1:
        raise ValueError(f"K={k} must lie in [1, {n_student_layers - 1}]")
    return [round_half_up(Fraction(i * n_student_layers, k + 1)) for i in range(1, k + 1)]


@dataclass(frozen=True)
class LayerMapping:
    pairs: tuple[tuple[int, int], ...]

    def validate(self, n_student_layers: int, n_teacher_layers: int) -> "LayerMapping":
        prev_s = prev_t = 0
        for s, t in self.pairs:
            if not 1 <= s <= n_student_layers:
                raise ValueError(f"student layer {s} outside [1, {n_student_layers}]")
            if not 1 <= t <= n_teacher_layers:
                raise ValueError(f"teacher layer {t} outside [1, {n_teacher_layers}]")
            if s <= prev_s or t <= prev_t:
                raise ValueError("layer mapping must be strictly increasing in both coordinates")
            prev_s, prev_t = s, t
        return self

    @property
    def student_layers(self) -> list[int]:
        return [s for s, _ in self.pairs]

    @property
    def teacher_layers(self) -> list[int]:
        return [t for _, t in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs)


def uniform_map(student_layers, n_student_layers: int, n_teacher_layers: int) -> LayerMapping:
    """Pair each student layer l with teacher layer round(l * L_T / L_S)."""
    layers = list(student_layers)
    if not layers:
        raise ValueError("uniform_map needs at least one student layer")
    if n_teacher_layers < n_student_layers:
        raise ValueError("teacher must have at least as many layers as the student")
    pairs = []
    for l in layers:
        t = round_half_up(Fraction(l * n_teacher_layers, n_student_layers))
        pairs.append((int(l), min(max(t, 1), n_teacher_layers)))
    return LayerMapping(tuple(pairs)).validate(n_student_layers, n_teacher_layers)


# -- losses ------------------------------------------------------------------

def total_loss(task, inter, lam: float):
    return task + lam * inter


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def intermediate_loss(teacher_dists, student_dists, kind="jsd", mask=None) -> Tensor:
    """Mean over mapped pairs of the token-averaged divergence between lensed distributions."""
    if len(teacher_dists) != len(student_dists) or not teacher_dists:
        raise ValueError("need one teacher and one student distribution per mapped pair")
    terms = []
    for p, q in zip(teacher_dists, student_dists):
        if p.shape[-1] != q.shape[-1]:
            raise ValueError(f"vocab mismatch: teacher {p.shape[-1]} vs student {q.shape[-1]}")
        terms.append(dv.divergence(kind, p, q, mask))
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def trace_intermediate_loss(teacher: ModelCheckpoint, student: ModelCheckpoint, token_ids,
                            mapping: LayerMapping, kind="jsd",
                            lens_cfg: LensConfig = LensConfig(), mask=None) -> Tensor:
    """Intermediate loss computed from scratch on one token batch."""
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError("teacher and student vocab sizes differ")
    with ad.no_grad():
        t_trace = forward_with_states(teacher, token_ids)
        p = [Tensor(d.data) for d in model_lens(teacher, t_trace, mapping.teacher_layers, lens_cfg)]
    s_trace = forward_with_states(student, token_ids)
    q = model_lens(student, s_trace, mapping.student_layers, lens_cfg)
    return intermediate_loss(p, q, kind, mask)


# -- configs and run records -------------------------------------------------

@dataclass
class OptimSettings:
    steps: int = 2000
    batch_size: int = 32
    lr_init: float = 3e-3
    lr_final: float = 1e-7
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    response_only: bool = False


@dataclass
class TeacherConfig(OptimSettings):
    model: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class DistillConfig(OptimSettings):
    student: ModelConfig = field(
        default_factory=lambda: ModelConfig(n_layers=3, d_model=32, n_heads=2)
    )
    teacher_ckpt: str | None = None
    task_loss: str = "rkl"
    inter_loss: str = "jsd"
    lam: float = 1.0
    n_inter_layers: int = 2
    mapping: tuple[tuple[int, int], ...] | None = None
    lens: LensConfig = field(default_factory=LensConfig)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.task_loss not in TASK_LOSSES:
            raise ValueError(f"task_loss must be one of {TASK_LOSSES}")
        if self.inter_loss not in INTER_LOSSES:
            raise ValueError(f"inter_loss must be one of {INTER_LOSSES}")
        if not 0 <= self.n_inter_layers <= self.student.n_layers - 1:
            raise ValueError(f"n_inter_layers must lie in [0, {self.student.n_layers - 1}]")

    def layer_mapping(self, n_teacher_layers: int) -> LayerMapping | None:
        if self.mapping is not None:
            pairs = tuple(tuple(int(x) for x in p) for p in self.mapping)
            return LayerMapping(pairs).validate(self.student.n_layers, n_teacher_layers) if pairs else None
        if self.n_inter_layers == 0:
            return None
        layers = select_student_layers(self.student.n_layers, self.n_inter_layers)
        return uniform_map(layers, self.student.n_layers, n_teacher_layers)


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    if d.get("mapping") is not None:
        d["mapping"] = [list(p) for p in d["mapping"]]
    return d


@dataclass
class StepRecord:
    step: int
    l_task: float
    l_inter: float
    l_total: float
    lr: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


@dataclass
class TrainRun:
    config: dict
    records: list[StepRecord]
    model: ModelCheckpoint
    checkpoint_path: str | None = None

    def metric_stream(self) -> list[tuple]:
        """Everything but wall-clock time, for reproducibility comparisons."""
        return [(r.step, r.l_task, r.l_inter, r.l_total, r.lr) for r in self.records]


class _RunWriter:
    def __init__(self, run_dir, config: dict):
        self.dir = Path(run_dir) if run_dir is not None else None
        self.fh = None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            (self.dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
            self.fh = open(self.dir / "metrics.jsonl", "w", encoding="utf-8")

    def write(self, rec: StepRecord) -> None:
        if self.fh is not None:
            self.fh.write(rec.to_json() + "\n")

    def finish(self, ckpt: ModelCheckpoint) -> str | None:
        if self.fh is not None:
            self.fh.close()
            return str(save_checkpoint(ckpt, self.dir / "final.ckpt"))
        return None

    def abort(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Epoch-wise shuffled index batches; epochs are reshuffled independently."""
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm = rng.permutation(n)
            pos = 0
        idx = perm[pos:pos + batch_size]
        pos += batch_size
        yield np.sort(idx)


def _check_finite(step: int, **components) -> None:
    if not all(math.isfinite(v) for v in components.values()):
        raise TrainingDiverged(step, components)


# -- teacher -----------------------------------------------------------------

def train_teacher(cfg: TeacherConfig, examples: list[Example], run_dir=None) -> TrainRun:
    """Next-token cross-entropy training of a fresh model."""
    if not examples:
        raise ValueError("training set is empty")
    model = init_model(cfg.model, component_rng(cfg.seed, "teacher.init")).requires_grad_()
    return _fit(cfg, model, examples, run_dir, "teacher", _ce_step)


def _ce_step(model, batch: Batch, step: int, idx):
    trace = forward_with_states(model, batch.inputs)
    loss = ad.cross_entropy(trace.logits, batch.targets, batch.mask)
    return loss, float(loss), 0.0


def _fit(cfg: OptimSettings, model: ModelCheckpoint, examples, run_dir, role, step_fn,
         extra_params=()) -> TrainRun:
    snapshot = {"role": role, **config_to_dict(cfg)}
    writer = _RunWriter(run_dir, snapshot)
    params = model.parameters() + list(extra_params)
    opt = AdamW(params, lr=cfg.lr_init, weight_decay=cfg.weight_decay)
    batch_rng = component_rng(cfg.seed, f"{role}.batches")
    batch_size = min(cfg.batch_size, len(examples))
    records = []
    try:
        for step, idx in enumerate(_batches(len(examples), batch_size, cfg.steps, batch_rng)):
            t0 = time.perf_counter()
            lr = cosine_lr(step, cfg.steps, cfg.lr_init, cfg.lr_final)
            opt.lr = lr
            batch = make_batch([examples[i] for i in idx], cfg.response_only)
            opt.zero_grad()
            loss, l_task, l_inter = step_fn(model, batch, step, idx)
            l_total = float(loss)
            _check_finite(step, l_task=l_task, l_inter=l_inter, l_total=l_total)
            ad.backward(loss)
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            rec = StepRecord(step, l_task, l_inter, l_total, lr,
                             round((time.perf_counter() - t0) * 1000.0, 3))
            records.append(rec)
            writer.write(rec)
    except BaseException:
        writer.abort()
        raise
    model.requires_grad_(False)
    path = writer.finish(model)
    return TrainRun(snapshot, records, model, path)


# -- distillation -------------------------------------------------------------

class TeacherCache:
    """Frozen-teacher output and lensed distributions for a fixed example list.

    The teacher never changes during distillation, so its distributions are
    computed once, in fixed-size chunks, and sliced per batch.
    """

    def __init__(self, teacher: ModelCheckpoint, examples: list[Example], teacher_layers,
                 lens_cfg: LensConfig, response_only: bool = False, chunk: int = 64):
        self.layers = list(teacher_layers)
        self.final: list[np.ndarray] = []
        self.inter: list[list[np.ndarray]] = []
        self.hidden: list[list[np.ndarray]] = []
        with ad.no_grad():
            for start in range(0, len(examples), chunk):
                part = examples[start:start + chunk]
                batch = make_batch(part, response_only)
                trace = forward_with_states(teacher, batch.inputs)
                final = softmax_np(trace.logits.data)
                lensed = [d.data for d in model_lens(teacher, trace, self.layers, lens_cfg)]
                for i, ex in enumerate(part):
                    n = len(ex.sequence()) - 1
                    self.final.append(final[i, :n])
                    self.inter.append([d[i, :n] for d in lensed])
                    self.hidden.append([trace.hidden_states[l].data[i, :n] for l in self.layers])

    @staticmethod
    def _pad(rows: list[np.ndarray], T: int, fill: float) -> np.ndarray:
        out = np.full((len(rows), T, rows[0].shape[-1]), fill)
        for i, r in enumerate(rows):
            out[i, :len(r)] = r
        return out

    def final_probs(self, idx, T: int) -> np.ndarray:
        V = self.final[0].shape[-1]
        return self._pad([self.final[i] for i in idx], T, 1.0 / V)

    def layer_probs(self, idx, T: int) -> list[np.ndarray]:
        V = self.final[0].shape[-1]
        return [self._pad([self.inter[i][k] for i in idx], T, 1.0 / V) for k in range(len(self.layers))]

    def layer_hidden(self, idx, T: int) -> list[np.ndarray]:
        return [self._pad([self.hidden[i][k] for i in idx], T, 0.0) for k in range(len(self.layers))]


def _task_loss(kind: str, p_final: np.ndarray, student_logits: Tensor, batch: Batch) -> Tensor:
    if kind == "sft":
        return ad.cross_entropy(student_logits, batch.targets, batch.mask)
    q = ad.softmax(student_logits, axis=-1)
    return dv.divergence(kind, Tensor(p_final), q, batch.mask)


def distill(cfg: DistillConfig, examples: list[Example], teacher: ModelCheckpoint | None = None,
            run_dir=None) -> TrainRun:
    """Train a fresh student against a frozen teacher."""
    if not examples:
        raise ValueError("training set is empty")
    if teacher is None:
        if cfg.teacher_ckpt is None:
            raise ValueError("no teacher given")
        teacher = load_checkpoint(cfg.teacher_ckpt)
    if teacher.config.vocab_size != cfg.student.vocab_size:
        raise ValueError(
            f"vocab mismatch: teacher {teacher.config.vocab_size} vs student {cfg.student.vocab_size}"
        )
    mapping = cfg.layer_mapping(teacher.config.n_layers)
    cache = TeacherCache(teacher, examples, mapping.teacher_layers if mapping else [],
                         cfg.lens, cfg.response_only)
    student = init_model(cfg.student, component_rng(cfg.seed, "student.init")).requires_grad_()

    projections: list[Tensor] = []
    if mapping is not None and cfg.inter_loss == "mse":
        rng = component_rng(cfg.seed, "student.mse_proj")
        projections = [
            Tensor(rng.normal(0.0, 0.02, (cfg.student.d_model, teacher.config.d_model)), requires_grad=True)
            for _ in mapping.pairs
        ]

    def step_fn(model, batch: Batch, step: int, idx):
        T = batch.inputs.shape[1]
        trace = forward_with_states(model, batch.inputs)
        l_task_t = _task_loss(cfg.task_loss, cache.final_probs(idx, T), trace.logits, batch)
        if mapping is None:
            return l_task_t, float(l_task_t), 0.0
        if cfg.lam == 0:
            with ad.no_grad():
                l_inter = float(_inter(model, trace, idx, T, batch))
            return l_task_t, float(l_task_t), l_inter
        l_inter_t = _inter(model, trace, idx, T, batch)
        loss = total_loss(l_task_t, l_inter_t, cfg.lam)
        return loss, float(l_task_t), float(l_inter_t)

    def _inter(model, trace, idx, T, batch):
        if cfg.inter_loss == "mse":
            terms = [
                _masked_mse(Tensor(h), trace.hidden_states[s], W, batch.mask)
                for h, s, W in zip(cache.layer_hidden(idx, T), mapping.student_layers, projections)
            ]
            acc = terms[0]
            for t in terms[1:]:
                acc = acc + t
            return acc * (1.0 / len(terms))
        p = [Tensor(d) for d in cache.layer_probs(idx, T)]
        q = model_lens(model, trace, mapping.student_layers, cfg.lens)
        return intermediate_loss(p, q, cfg.inter_loss, batch.mask)

    run = _fit(cfg, student, examples, run_dir, "student", step_fn, extra_params=projections)
    run.config["mapping_used"] = [list(p) for p in mapping.pairs] if mapping else []
    if run_dir is not None:
        (Path(run_dir) / "config.json").write_text(json.dumps(run.config, indent=2, sort_keys=True) + "\n")
    return run


def _masked_mse(h_p: Tensor, h_q: Tensor, W_s: Tensor, mask: np.ndarray) -> Tensor:
    diff = ad.matmul(h_p, W_s.transpose(1, 0)) - h_q
    rows = ad.tsum(ad.square(diff), axis=-1)
    return dv.reduce_rows(rows, mask)
