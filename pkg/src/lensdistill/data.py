"""Seeded synthetic corpus from a hidden-state automaton, plus a fixed tokenizer."""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .seeding import component_rng

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
N_SPECIAL = 3
_BASE_ALPHABET = string.digits + string.ascii_lowercase + string.ascii_uppercase


def alphabet(vocab_size: int) -> list[str]:
    """One printable character per non-special token id."""
    n = vocab_size - N_SPECIAL
    chars = list(_BASE_ALPHABET[:n])
    chars += [chr(0x100 + i) for i in range(max(0, n - len(_BASE_ALPHABET)))]
    return chars


class Tokenizer:
    def __init__(self, vocab_size: int):
        if vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        self.vocab_size = vocab_size
        self.symbols = alphabet(vocab_size)
        self._ids = {s: i + N_SPECIAL for i, s in enumerate(self.symbols)}

    def encode(self, text: str) -> list[int]:
        try:
            return [self._ids[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"unknown symbol {exc.args[0]!r}") from None

    def decode(self, ids, skip_special: bool = False) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i < N_SPECIAL:
                if skip_special:
                    continue
                raise ValueError(f"special token id {i} has no symbol")
            if i >= self.vocab_size:
                raise ValueError(f"token id {i} outside vocabulary")
            out.append(self.symbols[i - N_SPECIAL])
        return "".join(out)


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 64
    n_hidden_states: int = 8
    transition_temperature: float = 0.3
    emission_temperature: float = 0.2
    min_len: int = 28
    max_len: int = 36
    n_train: int = 4000
    n_val: int = 400
    n_test: int = 400
    seed: int = 0

    def validate(self, max_seq_len: int | None = None) -> None:
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        if self.n_hidden_states < 1:
            raise ValueError("n_hidden_states must be >= 1")
        if self.transition_temperature <= 0 or self.emission_temperature <= 0:
            raise ValueError("temperatures must be > 0")
        if not 2 <= self.min_len <= self.max_len:
            raise ValueError("length bounds must satisfy 2 <= min_len <= max_len")
        if max_seq_len is not None and self.max_len + 1 > max_seq_len:
            raise ValueError(f"max_len {self.max_len} + BOS exceeds model max_seq_len {max_seq_len}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one example")


@dataclass
class Example:
    prompt_ids: list[int]
    response_ids: list[int]

    def __post_init__(self):
        if not self.prompt_ids or not self.response_ids:
            raise ValueError("prompt and response must be non-empty")

    def sequence(self) -> list[int]:
        return [BOS_ID, *self.prompt_ids, *self.response_ids, EOS_ID]


@dataclass
class Automaton:
    """Hidden-state generator: ``transition[s, s']`` and ``emission[s, token]``."""

    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray  # over content tokens only

    @classmethod
    def from_spec(cls, spec: CorpusSpec) -> "Automaton":
        rng = component_rng(spec.seed, "corpus.tables")
        S, n = spec.n_hidden_states, spec.vocab_size - N_SPECIAL
        trans = _softmax(rng.standard_normal((S, S)) / spec.transition_temperature)
        emis = _softmax(rng.standard_normal((S, n)) / spec.emission_temperature)
        return cls(stationary(trans), trans, emis)

    def stationary_emission(self) -> np.ndarray:
        return self.initial @ self.emission

    def sample(self, length: int, rng: np.random.Generator) -> list[int]:
        out = []
        s = _draw(self.initial, rng)
        for t in range(length):
            if t:
                s = _draw(self.transition[s], rng)
            out.append(_draw(self.emission[s], rng) + N_SPECIAL)
        return out

    def log_likelihood(self, tokens) -> float:
        """Exact log P(tokens) by the scaled forward recursion."""
        alpha = self.initial.copy()
        total = 0.0
        for t, tok in enumerate(tokens):
            if t:
                alpha = alpha @ self.transition
            alpha = alpha * self.emission[:, int(tok) - N_SPECIAL]
            z = alpha.sum()
            total += np.log(z)
            alpha /= z
        return float(total)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))


def stationary(trans: np.ndarray) -> np.ndarray:
    """Left eigenvector of ``trans`` for eigenvalue 1, normalized."""
    w, v = np.linalg.eig(trans.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    pi = np.abs(pi)
    return pi / pi.sum()


@dataclass
class Corpus:
    spec: CorpusSpec
    train: list[Example] = field(default_factory=list)
    val: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)

    def split(self, name: str) -> list[Example]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Sample disjoint train/val/test splits; each sequence is cut at a random midpoint."""
    spec.validate()
    auto = Automaton.from_spec(spec)
    rng = component_rng(spec.seed, "corpus.sample")
    seen: set[tuple[int, ...]] = set()
    splits = {}
    for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        out = []
        while len(out) < n:
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            seq = auto.sample(length, rng)
            key = tuple(seq)
            if key in seen:
                continue
            seen.add(key)
            cut = int(rng.integers(max(1, length // 3), max(2, (2 * length) // 3) + 1))
            cut = min(max(cut, 1), length - 1)
            out.append(Example(seq[:cut], seq[cut:]))
        splits[name] = out
    return Corpus(spec, **splits)


# -- files -------------------------------------------------------------------

def _jsonl(examples: list[Example]) -> bytes:
    lines = [
        json.dumps({"prompt": ex.prompt_ids, "response": ex.response_ids}, separators=(",", ":"))
        for ex in examples
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


def corpus_stats(corpus: Corpus) -> dict:
    stats = {}
    for name in ("train", "val", "test"):
        exs = corpus.split(name)
        lens = [len(e.prompt_ids) + len(e.response_ids) for e in exs]
        stats[name] = {
            "examples": len(exs),
            "tokens": int(sum(lens)),
            "min_len": int(min(lens)),
            "max_len": int(max(lens)),
        }
    return stats


def write_corpus(corpus: Corpus, out_dir) -> dict:
    """Write ``{train,val,test}.jsonl`` and ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name in ("train", "val", "test"):
        raw = _jsonl(corpus.split(name))
        (out / f"{name}.jsonl").write_bytes(raw)
        digests[name] = hashlib.sha256(raw).hexdigest()
    manifest = {"spec": asdict(corpus.spec), "stats": corpus_stats(corpus), "sha256": digests}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_split(path) -> list[Example]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                examples.append(Example(list(obj["prompt"]), list(obj["response"])))
    return examples


def read_corpus(corpus_dir) -> Corpus:
    d = Path(corpus_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    spec = CorpusSpec(**manifest["spec"])
    return Corpus(spec, *(read_split(d / f"{n}.jsonl") for n in ("train", "val", "test")))


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    inputs: np.ndarray   # [B, T] int
    targets: np.ndarray  # [B, T] int
    mask: np.ndarray     # [B, T] float, 1 where the target is scored


def make_batch(examples: list[Example], response_only: bool = False) -> Batch:
    """Right-padded next-token batch. Scores EOS and, unless ``response_only``, prompt tokens too."""
    seqs = [ex.sequence() for ex in examples]
    T = max(len(s) for s in seqs) - 1
    inputs = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    targets = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), T))
    for i, (ex, s) in enumerate(zip(examples, seqs)):
        n = len(s) - 1
        inputs[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        start = len(ex.prompt_ids) if response_only else 0
        mask[i, start:n] = 1.0
    return Batch(inputs, targets, mask)
