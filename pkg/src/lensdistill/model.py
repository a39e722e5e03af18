"""Tiny pre-norm GPT-style decoder that exposes every residual-stream state."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FORMAT_VERSION = 1
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 64
    tie_unembedding: bool = False

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered manifest of parameter names and shapes implied by ``cfg``."""
    d, V = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (V, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.qkv.w": (d, 3 * d), p + "attn.qkv.b": (3 * d,),
            p + "attn.proj.w": (d, d), p + "attn.proj.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.fc.w": (d, 4 * d), p + "mlp.fc.b": (4 * d,),
            p + "mlp.proj.w": (4 * d, d), p + "mlp.proj.b": (d,),
        })
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    if not cfg.tie_unembedding:
        shapes["unembed"] = (V, d)
    return shapes


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict[str, Tensor]
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.params) != list(expected):
            missing = set(expected) ^ set(self.params)
            raise ValueError(f"parameter manifest mismatch: {sorted(missing) or 'order differs'}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(
                    f"parameter manifest mismatch: {name} has shape "
                    f"{self.params[name].shape}, expected {shape}"
                )

    @property
    def unembedding(self) -> Tensor:
        """W_U with shape [V, d]."""
        key = "tok_emb" if self.config.tie_unembedding else "unembed"
        return self.params[key]

    @property
    def final_norm(self) -> tuple[Tensor, Tensor]:
        return self.params["ln_f.g"], self.params["ln_f.b"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool = True) -> "ModelCheckpoint":
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
            self.format_version,
        )


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> ModelCheckpoint:
    """Normal(0, 0.02) weights, zero biases, unit layernorm gains."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(arr)
    return ModelCheckpoint(cfg, params)


@dataclass
class ForwardTrace:
    logits: Tensor
    hidden_states: list[Tensor] = field(default_factory=list)


def _causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def _attention(x: Tensor, P: dict, prefix: str, n_heads: int) -> Tensor:
    B, T, d = x.shape
    dh = d // n_heads
    qkv = ad.matmul(x, P[prefix + "qkv.w"]) + P[prefix + "qkv.b"]
    qkv = qkv.reshape(B, T, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q = _take(qkv, 0)
    k = _take(qkv, 1)
    v = _take(qkv, 2)
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    att = ad.softmax(scores, axis=-1, mask=_causal_mask(T))
    y = ad.matmul(att, v)  # [B, H, T, dh]
    y = y.transpose(0, 2, 1, 3).reshape(B, T, d)
    return ad.matmul(y, P[prefix + "proj.w"]) + P[prefix + "proj.b"]


def _take(x: Tensor, i: int) -> Tensor:
    """x[i] along the leading axis, differentiable."""

    def bw(g):
        out = np.zeros(x.shape)
        out[i] = g
        return (out,)

    return ad._make(x.data[i], (x,), bw, "take")


def forward_with_states(ckpt: ModelCheckpoint, token_ids) -> ForwardTrace:
    """Run the decoder with causal attention and return all hidden states.

    ``hidden_states[0]`` is the embedding output and ``hidden_states[l]`` the
    residual stream after block ``l``, before any later normalization.
    """
    cfg = ckpt.config
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ValueError("token_ids must be a non-empty [batch, seq] array")
    B, T = ids.shape
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    P = ckpt.params
    x = ad.embedding(P["tok_emb"], ids) + ad.embedding(P["pos_emb"], np.arange(T))
    hidden = [x]
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        h = ad.layernorm(x, P[p + "ln1.g"], P[p + "ln1.b"], LN_EPS)
        x = x + _attention(h, P, p + "attn.", cfg.n_heads)
        h = ad.layernorm(x, P[p + "ln2.g"], P[p + "ln2.b"], LN_EPS)
        h = ad.gelu(ad.matmul(h, P[p + "mlp.fc.w"]) + P[p + "mlp.fc.b"])
        x = x + ad.matmul(h, P[p + "mlp.proj.w"]) + P[p + "mlp.proj.b"]
        hidden.append(x)
    xf = ad.layernorm(x, P["ln_f.g"], P["ln_f.b"], LN_EPS)
    logits = ad.matmul(xf, ckpt.unembedding.transpose(1, 0))
    return ForwardTrace(logits=logits, hidden_states=hidden)


def next_token_probs(ckpt: ModelCheckpoint, token_ids) -> np.ndarray:
    """Output distribution at the last position of each row, [batch, V]."""
    with ad.no_grad():
        logits = forward_with_states(ckpt, token_ids).logits.data[:, -1, :]
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _top_p_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    if top_p >= 1.0:
        return probs
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    keep_n = int(np.searchsorted(cum, top_p) + 1)
    out = np.zeros_like(probs)
    out[order[:keep_n]] = probs[order[:keep_n]]
    return out / out.sum()


def sample_from(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw of one index from ``probs``."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


def generate(
    ckpt: ModelCheckpoint,
    prompt_ids,
    max_new: int,
    temperature: float = 1.0,
    top_p: float = 1.0,
    seed: int = 0,
    greedy: bool = False,
    eos_id: int | None = None,
) -> list[int]:
    """Autoregressively extend ``prompt_ids``; returns only the new tokens."""
    prompt = [int(t) for t in prompt_ids]
    if not prompt:
        raise ValueError("generate needs a non-empty prompt")
    if not greedy and temperature <= 0:
        raise ValueError("temperature must be > 0 (use greedy=True for argmax decoding)")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    seq = list(prompt)
    out: list[int] = []
    limit = min(max_new, ckpt.config.max_seq_len - len(seq))
    for _ in range(max(limit, 0)):
        with ad.no_grad():
            logits = forward_with_states(ckpt, np.asarray(seq)[None, :]).logits.data[0, -1]
        if greedy:
            tok = int(np.argmax(logits))
        else:
            z = logits / temperature
            z = z - z.max()
            probs = np.exp(z)
            probs /= probs.sum()
            tok = sample_from(_top_p_filter(probs, top_p), rng)
        out.append(tok)
        seq.append(tok)
        if eos_id is not None and tok == eos_id:
            break
    return out
