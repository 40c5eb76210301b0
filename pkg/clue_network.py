"""
Clue network: turns an enrollment recording and/or a style description
into the single conditioning vector the extractor is steered by.

audio -> conv encoder -> attention pooling -> projection --\
                                                           gate -> c
text  -> frozen text encoder ---------------> projection --/
"""

from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from audio_dsp import Waveform
from config import ClueConfig, SepConfig
from errors import DimensionError, InputError
from numerics import (
    ParameterSet, Tensor, affine, concat, constant, conv1d, layer_norm, matmul, mean, mul, relu,
    reshape, sigmoid, softmax, stack, sub, swap_last,
)
from text_encoder import TextEncoder


@dataclass
class ClueBundle:
    """The clues supplied for one extraction; either side may be missing."""

    audio: Optional[Waveform] = None
    text: Optional[str] = None

    @property
    def condition(self) -> str:
        if self.audio is not None and self.text:
            return "text_audio"
        if self.text:
            return "text_only"
        if self.audio is not None:
            return "audio_only"
        return "none"


def resolve_missing_modality(bundle: ClueBundle, pseudo_text: str) -> Tuple[Optional[Waveform], str]:
    """Fill in the text side with the pseudo-text when only audio is given.

    A missing audio side stays None; the network substitutes a zero vector
    for its projected embedding before the gate.
    """
    if bundle.audio is None and not bundle.text:
        raise InputError("A clue needs audio, text, or both")
    return bundle.audio, bundle.text if bundle.text else pseudo_text


def encode_audio_clue(audio: Tensor, kernel: Tensor, stride: int, use_relu: bool = True) -> Tensor:
    """Conv encoder for the enrollment audio: [..., 1, L] -> [..., F, T_a]."""
    kernel_size = kernel.shape[-1]
    if audio.shape[-1] < kernel_size:
        raise InputError(f"Audio clue of {audio.shape[-1]} samples is shorter than the {kernel_size}-sample kernel")
    h = conv1d(audio, kernel, stride)
    return relu(h) if use_relu else h


def attention_pool(A: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """Softmax-weighted sum of the columns of A [..., F, T]; returns [..., F]."""
    if A.shape[-1] < 1:
        raise DimensionError("attention_pool needs at least one frame")
    dim = A.shape[-2]
    scores = affine(swap_last(A), reshape(u, (1, dim)), b)       # [..., T, 1]
    weights = softmax(scores, axis=-2)
    pooled = matmul(A, weights)                                  # [..., F, 1]
    return reshape(pooled, A.shape[:-1])


def average_pool(A: Tensor) -> Tensor:
    return mean(A, axis=-1)


def project_clue(v: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """affine -> ReLU -> layer norm."""
    return layer_norm(relu(affine(v, weight, bias)), axis=-1)


def encode_text(text: str, encoder: TextEncoder) -> Tensor:
    """Frozen text embedding as a constant tensor (no gradient path)."""
    if not text or not text.strip():
        raise InputError("Empty text clue")
    return constant(encoder.generate_embedding(text))


def gated_fuse(c_A: Tensor, c_T: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """g = sigmoid(W [c_A ; c_T] + b); fused = g * c_A + (1 - g) * c_T."""
    g = sigmoid(affine(concat([c_A, c_T], axis=-1), weight, bias))
    return mul(g, c_A) + mul(sub(1.0, g), c_T)


def fuse_alternative(mode: str, c_A: Tensor, c_T: Tensor, audio_present: Optional[np.ndarray] = None) -> Tensor:
    """Ablation fusions.

    "average" gives (c_A + c_T) / 2, or c_T alone for items whose audio is
    the zero placeholder. "concat" stacks both along the feature axis.
    """
    if mode == "concat":
        return concat([c_A, c_T], axis=-1)
    if mode == "average":
        if audio_present is None:
            audio_present = np.ones(c_A.shape[:-1], dtype=bool)
        present = np.asarray(audio_present, dtype=np.float64).reshape(c_A.shape[:-1] + (1,))
        averaged = mul(c_A + c_T, 0.5)
        return mul(averaged, constant(present)) + mul(c_T, constant(1.0 - present))
    raise InputError(f"Unknown fusion mode '{mode}'")


class ClueNetwork:
    """Parameters and forward pass of the clue path.

    Parameters are registered in the shared ParameterSet under ``prefix``;
    reusing a name already taken by the mixture encoder is a ConfigError.
    """

    def __init__(self, params: ParameterSet, sep_cfg: SepConfig, clue_cfg: ClueConfig,
                 text_encoder: TextEncoder, prefix: str = "clue"):
        self.sep_cfg = sep_cfg
        self.cfg = clue_cfg
        self.text_encoder = text_encoder
        self.prefix = prefix
        F, K, D = sep_cfg.n_channels, sep_cfg.kernel_size, clue_cfg.embed_dim

        self.encoder_kernel = params.create(f"{prefix}.encoder.kernel", (F, 1, K), fan_in=K)
        if clue_cfg.pooling == "attention":
            self.pool_u = params.create(f"{prefix}.pool.u", (F,), fan_in=F)
            # softmax over time is shift-invariant, so this never receives gradient
            self.pool_b = params.create(f"{prefix}.pool.b", (1,), init="zeros")
        self.audio_proj_w = params.create(f"{prefix}.audio_proj.weight", (D, F), fan_in=F)
        self.audio_proj_b = params.create(f"{prefix}.audio_proj.bias", (D,), fan_in=F)
        self.text_proj_w = params.create(f"{prefix}.text_proj.weight", (D, clue_cfg.text_dim), fan_in=clue_cfg.text_dim)
        self.text_proj_b = params.create(f"{prefix}.text_proj.bias", (D,), fan_in=clue_cfg.text_dim)
        if clue_cfg.fusion == "gated":
            self.gate_w = params.create(f"{prefix}.gate.weight", (D, 2 * D), fan_in=2 * D)
            self.gate_b = params.create(f"{prefix}.gate.bias", (D,), fan_in=2 * D)

    @property
    def output_dim(self) -> int:
        return self.cfg.fused_dim

    def pooled_audio(self, wave: Waveform) -> Tensor:
        A = encode_audio_clue(constant(wave.samples.reshape(1, -1)), self.encoder_kernel,
                              self.sep_cfg.stride, self.sep_cfg.encoder_relu)
        if self.cfg.pooling == "attention":
            return attention_pool(A, self.pool_u, self.pool_b)
        return average_pool(A)

    def resolve_missing_modality(self, bundles: Sequence[ClueBundle]) -> Tuple[Tensor, Tensor, np.ndarray]:
        """Projected (c_A, c_T) for a batch plus the audio-present mask.

        Missing audio becomes a zero c_A; missing text uses the pseudo-text.
        """
        resolved = [resolve_missing_modality(b, self.cfg.pseudo_text) for b in bundles]
        present = np.array([audio is not None for audio, _ in resolved])

        texts = [text for _, text in resolved]
        raw_text = constant(self.text_encoder.generate_batch_embeddings(texts))
        c_T = project_clue(raw_text, self.text_proj_w, self.text_proj_b)

        if present.any():
            pooled = stack([self.pooled_audio(audio) for audio, _ in resolved if audio is not None], axis=0)
            projected = project_clue(pooled, self.audio_proj_w, self.audio_proj_b)
        rows = []
        j = 0
        zeros = constant(np.zeros(self.cfg.embed_dim))
        for has_audio in present:
            if has_audio:
                rows.append(projected[j])
                j += 1
            else:
                rows.append(zeros)
        c_A = stack(rows, axis=0)
        return c_A, c_T, present

    def forward(self, bundles: Sequence[ClueBundle]) -> Tensor:
        """Fused clue batch [B, output_dim]."""
        c_A, c_T, present = self.resolve_missing_modality(bundles)
        if self.cfg.fusion == "gated":
            return gated_fuse(c_A, c_T, self.gate_w, self.gate_b)
        return fuse_alternative(self.cfg.fusion, c_A, c_T, present)
