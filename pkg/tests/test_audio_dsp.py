import numpy as np
import pyloudnorm as pyln
import pytest

from audio_dsp import (
    Waveform, energy_snr_db, integrated_loudness, measure_lufs, mix_at_onset, read_wav, rescale_to_lufs, snr_lu,
    write_wav,
)
from errors import FormatError, InputError, NoGatedBlocks


def _sine(freq, seconds, rate=8000, amplitude=1.0):
    t = np.arange(int(seconds * rate)) / rate
    return amplitude * np.sin(2 * np.pi * freq * t)


def test_wav_roundtrip_quantization_bound(tmp_path):
    wave = Waveform(_sine(440, 1.0, amplitude=0.8))
    path = str(tmp_path / "tone.wav")
    write_wav(path, wave)
    back = read_wav(path)
    assert len(back) == len(wave)
    assert np.max(np.abs(back.samples - wave.samples)) <= 1 / 32768


def test_read_wav_rejects_wrong_rate(tmp_path):
    import soundfile as sf

    path = str(tmp_path / "fast.wav")
    sf.write(path, np.zeros(1600, dtype=np.int16), 16000, subtype="PCM_16")
    with pytest.raises(FormatError, match="sample_rate"):
        read_wav(path)


def test_read_wav_rejects_stereo(tmp_path):
    import soundfile as sf

    path = str(tmp_path / "stereo.wav")
    sf.write(path, np.zeros((800, 2), dtype=np.int16), 8000, subtype="PCM_16")
    with pytest.raises(FormatError, match="channels"):
        read_wav(path)


def test_full_scale_reference_tone():
    assert measure_lufs(Waveform(_sine(997, 5.0))) == pytest.approx(-3.01, abs=0.10)


def test_loudness_is_scale_covariant():
    loud = measure_lufs(Waveform(_sine(997, 5.0)))
    quiet = measure_lufs(Waveform(_sine(997, 5.0, amplitude=0.5)))
    assert loud - quiet == pytest.approx(6.02, abs=0.05)


@pytest.mark.parametrize("seed", [0, 1])
def test_matches_reference_meter_at_48k(seed):
    rng = np.random.default_rng(seed)
    audio = rng.normal(0, 0.1, size=48000 * 4)
    audio[48000:72000] *= 0.05
    expected = pyln.Meter(48000).integrated_loudness(audio)
    assert integrated_loudness(audio, 48000) == pytest.approx(expected, abs=0.05)


def test_silence_has_no_gated_blocks():
    with pytest.raises(NoGatedBlocks):
        measure_lufs(Waveform(np.zeros(8000)))


def test_short_signal_rejected():
    with pytest.raises(InputError):
        measure_lufs(Waveform(_sine(997, 0.2)))


def test_rescale_lands_on_target():
    wave = Waveform(_sine(997, 4.0))
    current = measure_lufs(wave)
    out = rescale_to_lufs(wave, -25.0)
    assert out.metadata["lufs_gain"] == pytest.approx(10 ** ((-25.0 - current) / 20))
    assert measure_lufs(out) == pytest.approx(-25.0, abs=1e-6)


def test_mix_aligns_references():
    target = Waveform(np.full(100, 0.1))
    interference = Waveform(np.full(60, 0.2))
    mixed = mix_at_onset(target, interference, onset=50)
    assert len(mixed.mixture) == 110
    np.testing.assert_allclose(mixed.mixture.samples, mixed.target.samples + mixed.interference.samples)
    assert mixed.interference.samples[49] == 0.0
    assert not mixed.clipped


def test_mix_clipping_scales_jointly():
    target = Waveform(np.full(10, 0.8))
    interference = Waveform(np.full(10, 0.7))
    mixed = mix_at_onset(target, interference, onset=0)
    assert mixed.clipped
    assert np.max(np.abs(mixed.mixture.samples)) == pytest.approx(1.0)
    assert mixed.target.samples[0] / mixed.interference.samples[0] == pytest.approx(0.8 / 0.7)


def test_snr_measures():
    assert snr_lu(-26.0, -30.0) == 4.0
    target = Waveform(np.ones(10))
    interference = Waveform(np.full(10, 0.1))
    assert energy_snr_db(target, interference) == pytest.approx(20.0)
    with pytest.raises(InputError):
        energy_snr_db(target, Waveform(np.zeros(10)))


@pytest.mark.parametrize("amplitude", [0.3, 0.9])
def test_mix_at_zero_onset_is_symmetric(amplitude):
    a = Waveform(_sine(220, 0.5, amplitude=amplitude))
    b = Waveform(_sine(330, 0.3, amplitude=amplitude))
    ab = mix_at_onset(a, b, onset=0)
    ba = mix_at_onset(b, a, onset=0)
    np.testing.assert_allclose(ab.mixture.samples, ba.mixture.samples)
    np.testing.assert_allclose(ab.target.samples, ba.interference.samples)
    np.testing.assert_allclose(ab.interference.samples, ba.target.samples)
