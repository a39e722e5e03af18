"""Logit lens: read intermediate hidden states as vocabulary distributions."""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .model import LN_EPS, ForwardTrace


@dataclass(frozen=True)
class LensConfig:
    # False applies W_U to the raw residual stream; True runs the model's
    # final layernorm first.
    apply_final_norm: bool = False
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("lens temperature must be > 0")


def lens_logits(h, W_U, cfg: LensConfig = LensConfig(), norm=None) -> Tensor:
    h, W_U = ad.as_tensor(h), ad.as_tensor(W_U)
    if h.shape[-1] != W_U.shape[-1]:
        raise ValueError(f"lens: hidden width {h.shape[-1]} != unembedding width {W_U.shape[-1]}")
    if cfg.apply_final_norm:
        if norm is None:
            raise ValueError("apply_final_norm needs the final norm (gain, bias)")
        h = ad.layernorm(h, norm[0], norm[1], LN_EPS)
    z = ad.matmul(h, W_U.transpose(1, 0))
    if cfg.temperature != 1.0:
        z = z * (1.0 / cfg.temperature)
    return z


def logit_lens(h, W_U, cfg: LensConfig = LensConfig(), norm=None) -> Tensor:
    """softmax(W_U h / T) over the last axis; ``norm`` is (gain, bias) of the final layernorm."""
    return ad.softmax(lens_logits(h, W_U, cfg, norm), axis=-1)


def lens_all_layers(
    trace: ForwardTrace, W_U, layer_ids, cfg: LensConfig = LensConfig(), norm=None
) -> list[Tensor]:
    """One lensed distribution per requested layer (1-based, order preserved)."""
    L = len(trace.hidden_states) - 1
    for l in layer_ids:
        if not 1 <= l <= L:
            raise ValueError(f"layer id {l} outside [1, {L}]")
    return [logit_lens(trace.hidden_states[l], W_U, cfg, norm) for l in layer_ids]


def model_lens(ckpt, trace: ForwardTrace, layer_ids, cfg: LensConfig = LensConfig()) -> list[Tensor]:
    """Lens every requested layer through ``ckpt``'s own unembedding."""
    return lens_all_layers(trace, ckpt.unembedding, layer_ids, cfg, ckpt.final_norm)
