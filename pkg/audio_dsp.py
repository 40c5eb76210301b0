"""
Waveform I/O, integrated loudness, loudness-targeted rescaling and mixing.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
import soundfile as sf
from scipy.signal import lfilter

from config import SAMPLE_RATE
from errors import FormatError, InputError, NoGatedBlocks

# Gating constants
BLOCK_S = 0.400
BLOCK_OVERLAP = 0.75
ABSOLUTE_GATE = -70.0
RELATIVE_GATE = -10.0
LOUDNESS_OFFSET = -0.691

# Analog K-weighting prototype (pre-filter shelf + RLB high-pass)
SHELF_F0 = 1681.974450955533
SHELF_Q = 0.7071752369554196
SHELF_GAIN_DB = 3.999843853973347
SHELF_VB_EXP = 0.4996667741545416
HIGHPASS_F0 = 38.13547087602444
HIGHPASS_Q = 0.5003270373238773
# bilinear transform is prewarped here so the reference tone keeps its gain at any rate
PREWARP_HZ = 997.0

PCM16_SCALE = 32768.0

_k48 = math.tan(math.pi * HIGHPASS_F0 / 48000.0)
_HIGHPASS_TABLE_GAIN = 1.0 + _k48 / HIGHPASS_Q + _k48 * _k48


@dataclass
class Waveform:
    """Mono fp64 audio at the working rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise FormatError(f"sample_rate is {self.sample_rate}, expected {SAMPLE_RATE}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def scaled(self, gain: float, **metadata) -> "Waveform":
        meta = dict(self.metadata)
        meta.update(metadata)
        return Waveform(self.samples * gain, self.sample_rate, meta)


def read_wav(path: str) -> Waveform:
    """Read a PCM16 mono 8 kHz WAV file.

    Raises:
        FormatError: naming the offending field (format, subtype, channels, sample_rate).
    """
    try:
        info = sf.info(path)
    except RuntimeError as e:
        raise FormatError(f"{path}: unreadable audio file ({e})") from e

    if info.format != "WAV":
        raise FormatError(f"{path}: format is {info.format}, expected WAV")
    if info.subtype != "PCM_16":
        raise FormatError(f"{path}: subtype is {info.subtype}, expected PCM_16")
    if info.channels != 1:
        raise FormatError(f"{path}: channels is {info.channels}, expected 1")
    if info.samplerate != SAMPLE_RATE:
        raise FormatError(f"{path}: sample_rate is {info.samplerate}, expected {SAMPLE_RATE}")

    data, _ = sf.read(path, dtype="int16", always_2d=False)
    return Waveform(data.astype(np.float64) / PCM16_SCALE, SAMPLE_RATE, {"path": path})


def write_wav(path: str, wave: Waveform):
    """Write PCM16 mono; samples outside [-1, 1) are clipped."""
    if wave.sample_rate != SAMPLE_RATE:
        raise FormatError(f"sample_rate is {wave.sample_rate}, expected {SAMPLE_RATE}")
    ints = np.clip(np.round(wave.samples * PCM16_SCALE), -32768, 32767).astype(np.int16)
    sf.write(path, ints, SAMPLE_RATE, format="WAV", subtype="PCM_16")


def _k_weighting(rate: float) -> Tuple[Tuple[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]:
    """Biquad coefficients (b, a) for the shelf and high-pass stages at ``rate``."""
    warp = math.tan(math.pi * PREWARP_HZ / rate) / PREWARP_HZ

    k = SHELF_F0 * warp
    vh = 10.0 ** (SHELF_GAIN_DB / 20.0)
    vb = vh ** SHELF_VB_EXP
    a0 = 1.0 + k / SHELF_Q + k * k
    shelf_b = np.array([vh + vb * k / SHELF_Q + k * k, 2.0 * (k * k - vh), vh - vb * k / SHELF_Q + k * k]) / a0
    shelf_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / SHELF_Q + k * k) / a0])

    k = HIGHPASS_F0 * warp
    a0 = 1.0 + k / HIGHPASS_Q + k * k
    # keep the passband gain of the tabulated 48 kHz stage, which the offset is calibrated against
    hp_b = np.array([1.0, -2.0, 1.0]) * _HIGHPASS_TABLE_GAIN / a0
    hp_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / HIGHPASS_Q + k * k) / a0])
    return (shelf_b, shelf_a), (hp_b, hp_a)


def block_loudness(samples: np.ndarray, rate: float) -> np.ndarray:
    """Mean-square power of each K-weighted 400 ms block (75% overlap)."""
    samples = np.asarray(samples, dtype=np.float64)
    block = int(round(BLOCK_S * rate))
    hop = int(round(BLOCK_S * (1.0 - BLOCK_OVERLAP) * rate))
    if len(samples) < block:
        raise InputError(f"Loudness needs at least {BLOCK_S * 1000:.0f} ms of audio, got {len(samples) / rate * 1000:.0f} ms")

    (shelf_b, shelf_a), (hp_b, hp_a) = _k_weighting(rate)
    weighted = lfilter(hp_b, hp_a, lfilter(shelf_b, shelf_a, samples))

    n_blocks = (len(weighted) - block) // hop + 1
    squared = weighted ** 2
    cumulative = np.concatenate([[0.0], np.cumsum(squared)])
    starts = np.arange(n_blocks) * hop
    return (cumulative[starts + block] - cumulative[starts]) / block


def integrated_loudness(samples: np.ndarray, rate: float) -> float:
    """Gated integrated loudness in LUFS for mono audio at any rate."""
    z = block_loudness(samples, rate)
    with np.errstate(divide="ignore"):
        levels = LOUDNESS_OFFSET + 10.0 * np.log10(z)

    above_abs = levels >= ABSOLUTE_GATE
    if not np.any(above_abs):
        raise NoGatedBlocks("Every loudness block falls below the absolute gate")

    relative = LOUDNESS_OFFSET + 10.0 * np.log10(z[above_abs].mean()) + RELATIVE_GATE
    gated = above_abs & (levels > relative)
    if not np.any(gated):
        raise NoGatedBlocks("Every loudness block falls below the relative gate")
    return float(LOUDNESS_OFFSET + 10.0 * np.log10(z[gated].mean()))


def measure_lufs(wave: Waveform) -> float:
    return integrated_loudness(wave.samples, wave.sample_rate)


def rescale_to_lufs(wave: Waveform, target: float, current: Optional[float] = None) -> Waveform:
    """Apply one gain so the integrated loudness lands on ``target``.

    The gain is stored as ``metadata["lufs_gain"]``.
    """
    if current is None:
        current = measure_lufs(wave)
    gain = 10.0 ** ((target - current) / 20.0)
    return wave.scaled(gain, lufs_gain=gain, lufs_source=current, lufs_target=target)


@dataclass
class MixResult:
    mixture: Waveform
    target: Waveform
    interference: Waveform
    clipping_gain: float = 1.0
    clipped: bool = False


def mix_at_onset(target: Waveform, interference: Waveform, onset: int) -> MixResult:
    """Sum the sources with the interference delayed by ``onset`` samples.

    If the mixture peak exceeds 1.0 the mixture and both aligned references
    are scaled by the same factor.
    """
    if onset < 0:
        raise InputError(f"onset must be >= 0, got {onset}")
    length = max(len(target), onset + len(interference))

    target_ref = np.zeros(length)
    target_ref[:len(target)] = target.samples
    interference_ref = np.zeros(length)
    interference_ref[onset:onset + len(interference)] = interference.samples
    mixture = target_ref + interference_ref

    peak = float(np.max(np.abs(mixture))) if length else 0.0
    gain = 1.0
    if peak > 1.0:
        gain = 1.0 / peak
        mixture, target_ref, interference_ref = mixture * gain, target_ref * gain, interference_ref * gain

    return MixResult(
        mixture=Waveform(mixture, SAMPLE_RATE, {"onset": onset, "clipping_gain": gain}),
        target=Waveform(target_ref, SAMPLE_RATE),
        interference=Waveform(interference_ref, SAMPLE_RATE),
        clipping_gain=gain,
        clipped=peak > 1.0,
    )


def snr_lu(target_lufs: float, interference_lufs: float) -> float:
    """Loudness-based SNR used for dataset statistics."""
    return target_lufs - interference_lufs


def energy_snr_db(target: Waveform, interference: Waveform) -> float:
    """Energy-ratio SNR of two aligned references."""
    num = float(np.sum(target.samples ** 2))
    den = float(np.sum(interference.samples ** 2))
    if num == 0.0 or den == 0.0:
        raise InputError("Energy SNR is undefined for a silent source")
    return 10.0 * math.log10(num / den)
