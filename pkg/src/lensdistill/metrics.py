"""Evaluation metrics: Rouge-L, lens divergence profiles, exposure bias, held-out CE."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import divergence as dv
from .data import Example, make_batch
from .lens import LensConfig, model_lens
from .model import ModelCheckpoint, forward_with_states
from .seeding import component_rng

GUARD = 1e-9


# -- Rouge-L -----------------------------------------------------------------

def lcs_length(a, b) -> int:
    """Longest common subsequence length, two-row dynamic program."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            if x == y:
                cur.append(prev[j] + 1)
            else:
                cur.append(max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class RougeLScore:
    precision: float
    recall: float
    f_measure: float

    def scaled(self) -> "RougeLScore":
        return RougeLScore(self.precision * 100, self.recall * 100, self.f_measure * 100)


def rouge_l(candidate, reference) -> RougeLScore:
    candidate, reference = list(candidate), list(reference)
    if not candidate or not reference:
        return RougeLScore(0.0, 0.0, 0.0)
    lcs = lcs_length(candidate, reference)
    p = lcs / len(candidate)
    r = lcs / len(reference)
    # 2PR/(P+R) from integer counts, so F never rounds above max(P, R)
    f = 2 * lcs / (len(candidate) + len(reference))
    return RougeLScore(p, r, f)


# -- held-out cross-entropy --------------------------------------------------

def held_out_ce(model: ModelCheckpoint, examples: list[Example], response_only: bool = False,
                chunk: int = 64) -> float:
    """Per-token next-token cross-entropy in nats, averaged over all scored tokens."""
    if not examples:
        raise ValueError("no examples to score")
    total, count = 0.0, 0.0
    with ad.no_grad():
        for start in range(0, len(examples), chunk):
            batch = make_batch(examples[start:start + chunk], response_only)
            logits = forward_with_states(model, batch.inputs).logits.data
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            picked = np.take_along_axis(logp, batch.targets[..., None], axis=-1)[..., 0]
            total += float(-(picked * batch.mask).sum())
            count += float(batch.mask.sum())
    return total / count


# -- layer-wise divergence profile ---------------------------------------------

@dataclass(frozen=True)
class LayerRecord:
    student_layer: int
    teacher_layer: int
    value: float
    kind: str
    final: bool = False


@dataclass
class LayerDivergenceProfile:
    records: list[LayerRecord]

    @property
    def intermediate(self) -> list[LayerRecord]:
        return [r for r in self.records if not r.final]

    @property
    def final_value(self) -> float:
        return next(r.value for r in self.records if r.final)

    @property
    def mean_intermediate(self) -> float:
        vals = [r.value for r in self.intermediate]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self) -> list[dict]:
        return [asdict(r) for r in self.records]


def layer_kl_profile(teacher: ModelCheckpoint, student: ModelCheckpoint, examples: list[Example],
                     mapping, kind="fkl", lens_cfg: LensConfig = LensConfig(),
                     chunk: int = 64) -> LayerDivergenceProfile:
    """Token-averaged divergence per mapped pair and at the output layer."""
    if not examples:
        raise ValueError("no examples to profile")
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError(
            f"vocab mismatch: teacher {teacher.config.vocab_size} vs student {student.config.vocab_size}"
        )
    kind = dv.DivergenceKind(kind)
    pairs = list(mapping.pairs) if mapping is not None else []
    s_layers = [s for s, _ in pairs]
    t_layers = [t for _, t in pairs]
    sums = np.zeros(len(pairs) + 1)
    count = 0.0
    with ad.no_grad():
        for start in range(0, len(examples), chunk):
            batch = make_batch(examples[start:start + chunk])
            t_trace = forward_with_states(teacher, batch.inputs)
            s_trace = forward_with_states(student, batch.inputs)
            p = model_lens(teacher, t_trace, t_layers, lens_cfg) if pairs else []
            q = model_lens(student, s_trace, s_layers, lens_cfg) if pairs else []
            p.append(ad.softmax(t_trace.logits))
            q.append(ad.softmax(s_trace.logits))
            m = batch.mask
            for i, (pi, qi) in enumerate(zip(p, q)):
                sums[i] += float((dv.divergence_rows(kind, pi, qi).data * m).sum())
            count += float(m.sum())
    vals = sums / count
    records = [LayerRecord(s, t, float(v), kind.value) for (s, t), v in zip(pairs, vals[:-1])]
    records.append(LayerRecord(student.config.n_layers, teacher.config.n_layers, float(vals[-1]),
                               kind.value, final=True))
    return LayerDivergenceProfile(records)


# -- exposure bias --------------------------------------------------------------

def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def per_step_kl(teacher: ModelCheckpoint, student: ModelCheckpoint, prompt, horizon: int,
                n_samples: int, sampler: str, rng: np.random.Generator) -> np.ndarray:
    """Exact per-step KL(p || q) along prefixes grown by ``sampler``; shape [n_samples, horizon].

    Column t holds sum_y p(y | prefix) ln(p / q) for prefixes of length t
    sampled from the teacher (``sampler='teacher'``) or student. Prefixes are
    extended one sampled token at a time, so every horizon up to ``horizon``
    is read off one run.
    """
    if sampler not in ("teacher", "student"):
        raise ValueError("sampler must be 'teacher' or 'student'")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError("teacher and student vocab sizes differ")
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("empty prompt")
    limit = min(teacher.config.max_seq_len, student.config.max_seq_len)
    if len(prompt) + horizon - 1 > limit:
        raise ValueError(f"prompt length {len(prompt)} + horizon {horizon} exceeds max_seq_len {limit}")
    seqs = np.tile(np.asarray(prompt, dtype=np.int64), (n_samples, 1))
    out = np.zeros((n_samples, horizon))
    with ad.no_grad():
        for t in range(horizon):
            # the first step has no generated prefix, so one row stands in for all
            rows = seqs[:1] if t == 0 else seqs
            p = _softmax_rows(forward_with_states(teacher, rows).logits.data[:, -1])
            q = _softmax_rows(forward_with_states(student, rows).logits.data[:, -1])
            kl = dv.kl_rows(p, q).data
            out[:, t] = kl
            if t == horizon - 1:
                break
            src = p if sampler == "teacher" else q
            if t == 0:
                src = np.repeat(src, n_samples, axis=0)
            cdf = np.cumsum(src, axis=-1)
            u = rng.random(n_samples) * cdf[:, -1]
            nxt = np.minimum((cdf <= u[:, None]).sum(axis=-1), src.shape[-1] - 1)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return np.maximum(out, 0.0)


def _prompt_rng(seed: int, sampler: str, index: int) -> np.random.Generator:
    return component_rng(seed, f"exposure.{sampler}.{index}")


def accumulated_regret(teacher, student, prompt, l: int, n_prefix_samples: int = 16, seed: int = 0,
                       prompt_index: int = 0) -> float:
    """Sum over steps of the expected per-step KL under student-sampled prefixes."""
    kl = per_step_kl(teacher, student, prompt, l, n_prefix_samples, "student",
                     _prompt_rng(seed, "student", prompt_index))
    return float(kl.sum(axis=1).mean())


def oracle_error_rate(teacher, student, prompt, l: int, n_prefix_samples: int = 16, seed: int = 0,
                      prompt_index: int = 0) -> float:
    """Average over steps of the expected per-step KL under teacher-sampled prefixes."""
    kl = per_step_kl(teacher, student, prompt, l, n_prefix_samples, "teacher",
                     _prompt_rng(seed, "teacher", prompt_index))
    return float(kl.sum(axis=1).mean() / l)


@dataclass(frozen=True)
class ExposureBiasReport:
    l: int
    R_l: float
    eps_l: float
    exaccerr_pct: float
    R_se: float = 0.0
    eps_se: float = 0.0
    exaccerr_se: float = 0.0
    n_prompts: int = 0
    n_samples: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def exaccerr_value(R: float, l: int, eps: float) -> float:
    denom = l * eps
    num = R - denom
    if abs(num) < GUARD and denom < GUARD:
        return 0.0
    if denom < GUARD:
        warnings.warn(f"oracle error l*eps={denom:.3g} below guard at l={l}; reporting +inf",
                      RuntimeWarning, stacklevel=2)
        return math.inf
    return num / denom * 100.0


def exposure_reports(teacher, student, prompts, horizons, n_prefix_samples: int = 16,
                     seed: int = 0) -> list[ExposureBiasReport]:
    """One report per horizon, all read off a single run at the largest horizon."""
    prompts = [list(p) for p in prompts]
    if not prompts:
        raise ValueError("need at least one prompt")
    horizons = sorted({int(h) for h in horizons})
    if not horizons or horizons[0] < 1:
        raise ValueError("horizons must be >= 1")
    H = horizons[-1]
    reg, orc = [], []
    for i, prompt in enumerate(prompts):
        for sampler, acc in (("student", reg), ("teacher", orc)):
            kl = per_step_kl(teacher, student, prompt, H, n_prefix_samples, sampler,
                             _prompt_rng(seed, sampler, i))
            acc.append(np.cumsum(kl, axis=1))
    reg = np.concatenate(reg)  # [n_prompts * n, H]
    orc = np.concatenate(orc)
    n = reg.shape[0]
    reports = []
    for l in horizons:
        r_vals = reg[:, l - 1]
        e_vals = orc[:, l - 1] / l
        R, eps = float(r_vals.mean()), float(e_vals.mean())
        r_se = float(r_vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        e_se = float(e_vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        value = exaccerr_value(R, l, eps)
        if math.isfinite(value) and l * eps >= GUARD:
            d_r = 100.0 / (l * eps)
            d_e = -100.0 * R / (l * eps * eps)
            se = math.hypot(d_r * r_se, d_e * e_se)
        else:
            se = 0.0 if value == 0.0 else math.nan
        reports.append(ExposureBiasReport(l, R, eps, value, r_se, e_se, se, len(prompts), n_prefix_samples))
    return reports


def exaccerr(teacher, student, prompts, l: int, n_prefix_samples: int = 16,
             seed: int = 0) -> ExposureBiasReport:
    return exposure_reports(teacher, student, prompts, [l], n_prefix_samples, seed)[0]
