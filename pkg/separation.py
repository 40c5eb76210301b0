"""
Clue-conditioned dual-path transformer extractor.

Encoder (conv1d) -> layer norm + linear -> chunking -> 2 x [clue injection,
intra-chunk transformer, inter-chunk transformer] -> single-source mask head
-> overlap-add -> ReLU mask -> mask * encoding -> transposed-conv decoder.

Internally chunked data is kept as [B, N_C, C, F] (features last) so
affine maps and attention run over the trailing axes; ``ChunkedRep`` holds
the [B, F, C, N_C] view.
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Mapping, Optional

import numpy as np

from audio_dsp import Waveform
from config import SepConfig
from errors import DimensionError
from numerics import (
    ParameterSet, Tensor, affine, as_tensor, constant, conv1d, conv_transpose1d, div, frame, getitem,
    layer_norm, mul, multi_head_attention, overlap_add, pad_last, relu, reshape, transpose,
)


@dataclass
class ChunkedRep:
    data: Tensor          # [B, F, C, N_C]
    original_T: int
    hop: int


def n_chunks(T: int, C: int, hop: int) -> int:
    if T <= C:
        return 1
    return int(math.ceil((T - C) / hop)) + 1


def chunk(h: Tensor, C: int, hop: int) -> ChunkedRep:
    """Cut [..., F, T] into overlapping frames of size C; the tail is zero-padded."""
    T = h.shape[-1]
    count = n_chunks(T, C, hop)
    padded = (count - 1) * hop + C
    if padded > T:
        h = pad_last(h, 0, padded - T)
    return ChunkedRep(frame(h, C, hop, count), T, hop)


@lru_cache(maxsize=64)
def _overlap_counts(C: int, hop: int, count: int) -> np.ndarray:
    padded = (count - 1) * hop + C
    counts = np.zeros(padded)
    for i in range(count):
        counts[i * hop:i * hop + C] += 1.0
    return counts


def unchunk_overlap_add(rep: ChunkedRep) -> Tensor:
    """Overlap-add back to [..., F, original_T], dividing by the overlap count."""
    C, count = rep.data.shape[-2], rep.data.shape[-1]
    padded = (count - 1) * rep.hop + C
    summed = overlap_add(rep.data, rep.hop, padded)
    normalized = div(summed, constant(_overlap_counts(C, rep.hop, count)))
    return getitem(normalized, (Ellipsis, slice(0, rep.original_T)))


@lru_cache(maxsize=64)
def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding [length, dim]."""
    position = np.arange(length)[:, None]
    div_term = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(position * div_term)
    pe[:, 1::2] = np.cos(position * div_term[:dim // 2])
    return pe


def transformer_layer(x: Tensor, params: Mapping[str, Tensor], heads: int) -> Tensor:
    """Pre-norm encoder layer over axis -2 of [..., S, F]."""
    y = layer_norm(x, axis=-1)
    x = x + multi_head_attention(y, y, y, heads, {k[len("attn."):]: v for k, v in params.items()
                                                   if k.startswith("attn.")})
    y = layer_norm(x, axis=-1)
    ff = affine(relu(affine(y, params["ff1.weight"], params["ff1.bias"])), params["ff2.weight"], params["ff2.bias"])
    return x + ff


def sequence_model(x: Tensor, layers, heads: int, use_pe: bool) -> Tensor:
    """Transformer stack with residual + norm around it: LN(T(x + PE)) + x."""
    y = x
    if use_pe:
        y = y + constant(positional_encoding(x.shape[-2], x.shape[-1]))
    for layer in layers:
        y = transformer_layer(y, layer, heads)
    return layer_norm(y, axis=-1) + x


class SeparationNetwork:
    """Parameters and forward pass of the extractor."""

    def __init__(self, params: ParameterSet, cfg: SepConfig, clue_dim: int, prefix: str = "sep"):
        self.cfg = cfg
        self.clue_dim = clue_dim
        self.prefix = prefix
        F, K = cfg.n_channels, cfg.kernel_size

        self.encoder_kernel = params.create(f"{prefix}.encoder.kernel", (F, 1, K), fan_in=K)
        self.decoder_kernel = params.create(f"{prefix}.decoder.kernel", (F, 1, K), fan_in=F)
        self.in_w = params.create(f"{prefix}.masker.in.weight", (F, F), fan_in=F)
        self.in_b = params.create(f"{prefix}.masker.in.bias", (F,), fan_in=F)
        self.head_w = params.create(f"{prefix}.masker.head.weight", (F, F), fan_in=F)
        self.head_b = params.create(f"{prefix}.masker.head.bias", (F,), fan_in=F)

        self.blocks = []
        for r in range(cfg.n_repeats):
            block = {
                "inject.weight": params.create(f"{prefix}.block{r}.inject.weight", (F, clue_dim), fan_in=clue_dim),
                "inject.bias": params.create(f"{prefix}.block{r}.inject.bias", (F,), fan_in=clue_dim),
                "intra": [self._layer_params(params, f"{prefix}.block{r}.intra.layer{i}") for i in range(cfg.n_layers)],
                "inter": [self._layer_params(params, f"{prefix}.block{r}.inter.layer{i}") for i in range(cfg.n_layers)],
            }
            self.blocks.append(block)

    def _layer_params(self, params: ParameterSet, name: str) -> Dict[str, Tensor]:
        F, H = self.cfg.n_channels, self.cfg.ff_dim
        for proj in ("q", "k", "v", "out"):
            params.create(f"{name}.attn.{proj}.weight", (F, F), fan_in=F)
            params.create(f"{name}.attn.{proj}.bias", (F,), fan_in=F)
        params.create(f"{name}.ff1.weight", (H, F), fan_in=F)
        params.create(f"{name}.ff1.bias", (H,), fan_in=F)
        params.create(f"{name}.ff2.weight", (F, H), fan_in=H)
        params.create(f"{name}.ff2.bias", (F,), fan_in=H)
        return params.group(name)

    # stages

    def padded_length(self, L: int) -> int:
        K, stride = self.cfg.kernel_size, self.cfg.stride
        if L < K:
            raise DimensionError(f"Mixture of {L} samples is shorter than the {K}-sample kernel")
        return L + (-(L - K)) % stride

    def encode_mixture(self, x: Tensor) -> Tensor:
        """[B, L] (L already padded) -> [B, F, T]."""
        B, L = x.shape
        h = conv1d(reshape(x, (B, 1, L)), self.encoder_kernel, self.cfg.stride)
        return relu(h) if self.cfg.encoder_relu else h

    def inject_clue(self, z: Tensor, clue: Tensor, block: Mapping) -> Tensor:
        """Add the per-repeat affine image of the clue to every (chunk, frame) position."""
        B = clue.shape[0]
        expanded = affine(clue, block["inject.weight"], block["inject.bias"])
        return z + reshape(expanded, (B, 1, 1, self.cfg.n_channels))

    def intra(self, z: Tensor, block: Mapping) -> Tensor:
        """Attend within chunks: z is [B, N_C, C, F]."""
        return sequence_model(z, block["intra"], self.cfg.heads, self.cfg.positional_encoding)

    def inter(self, z: Tensor, block: Mapping) -> Tensor:
        """Attend across chunks."""
        swapped = transpose(z, (0, 2, 1, 3))
        out = sequence_model(swapped, block["inter"], self.cfg.heads, self.cfg.positional_encoding)
        return transpose(out, (0, 2, 1, 3))

    def dual_path_block(self, z: Tensor, clue: Tensor, block: Mapping) -> Tensor:
        z = self.inject_clue(z, clue, block)
        return self.inter(self.intra(z, block), block)

    def make_mask(self, z: Tensor, T: int, trace: Optional[Dict] = None) -> Tensor:
        """Single-source head, overlap-add and ReLU: [B, N_C, C, F] -> [B, F, T]."""
        B, count, C, F = z.shape
        head = affine(z, self.head_w, self.head_b)                       # [B, N_C, C, F * 1]
        head = reshape(transpose(head, (0, 3, 2, 1)), (B, 1, F, C, count))
        if trace is not None:
            trace["mask_head"] = head
        rep = ChunkedRep(reshape(head, (B, F, C, count)), T, self.cfg.hop)
        return relu(unchunk_overlap_add(rep))

    def masker(self, h: Tensor, clue: Tensor, trace: Optional[Dict] = None) -> Tensor:
        B, F, T = h.shape
        z = affine(layer_norm(transpose(h, (0, 2, 1)), axis=-1), self.in_w, self.in_b)   # [B, T, F]
        rep = chunk(transpose(z, (0, 2, 1)), self.cfg.chunk_size, self.cfg.hop)            # [B, F, C, N_C]
        z = transpose(rep.data, (0, 3, 2, 1))                                              # [B, N_C, C, F]
        for block in self.blocks:
            z = self.dual_path_block(z, clue, block)
        return self.make_mask(z, T, trace)

    def decode(self, masked: Tensor) -> Tensor:
        """[B, F, T] -> [B, L']."""
        out = conv_transpose1d(masked, self.decoder_kernel, self.cfg.stride,
                               paired_kernel_size=self.encoder_kernel.shape[-1], paired_stride=self.cfg.stride)
        return reshape(out, (out.shape[0], out.shape[-1]))

    def forward(self, x: Tensor, clue: Tensor, trace: Optional[Dict] = None,
                mask_override: Optional[np.ndarray] = None) -> Tensor:
        """Estimate the clued source for a batch of equal-length mixtures [B, L]."""
        x = as_tensor(x)
        B, L = x.shape
        if clue.shape != (B, self.clue_dim):
            raise DimensionError(f"Clue batch has shape {clue.shape}, expected ({B}, {self.clue_dim})")
        padded = self.padded_length(L)
        if padded > L:
            x = pad_last(x, 0, padded - L)

        h = self.encode_mixture(x)
        mask = constant(mask_override) if mask_override is not None else self.masker(h, clue, trace)
        if trace is not None:
            trace["encoding"] = h
            trace["mask"] = mask
        estimate = self.decode(mul(mask, h))
        return getitem(estimate, (slice(None), slice(0, L)))


def extract(x: Waveform, bundle, model) -> Waveform:
    """Run one mixture through a loaded model with the given clue bundle."""
    estimate = model.forward(x.samples.reshape(1, -1), [bundle])
    return Waveform(estimate.data[0].copy(), x.sample_rate, {"clue_condition": bundle.condition})
