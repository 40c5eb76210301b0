import numpy as np
import pytest

from audio_dsp import Waveform
from clue_network import ClueBundle
from config import SepConfig
from model import ModelBundle
from errors import ConfigError, DimensionError
from numerics import ParameterSet, constant, conv_transpose1d
from separation import SeparationNetwork, chunk, extract, n_chunks, positional_encoding, unchunk_overlap_add


@pytest.mark.parametrize("T,C", [(10, 4), (11, 4), (50, 50), (37, 10), (3, 8), (101, 20)])
def test_chunk_unchunk_identity(T, C, rng):
    hop = C // 2
    h = constant(rng.normal(size=(2, 3, T)))
    rep = chunk(h, C, hop)
    assert rep.data.shape == (2, 3, C, n_chunks(T, C, hop))
    np.testing.assert_allclose(unchunk_overlap_add(rep).data, h.data, atol=1e-12)


def test_single_chunk_for_short_input():
    assert n_chunks(30, 50, 25) == 1


def test_forward_preserves_length(tiny_sep, rng):
    net = SeparationNetwork(ParameterSet(0), tiny_sep, clue_dim=5)
    x = rng.normal(size=(2, 67)) * 0.1
    clue = constant(rng.normal(size=(2, 5)))
    trace = {}
    out = net.forward(constant(x), clue, trace=trace)
    assert out.shape == (2, 67)
    assert np.all(trace["mask"].data >= 0)
    assert trace["mask_head"].shape[1] == 1


def test_unit_mask_reconstructs_through_decoder(rng):
    cfg = SepConfig(n_channels=8, kernel_size=4, stride=2, chunk_size=6, n_repeats=1, heads=2, ff_dim=8,
                    encoder_relu=False)
    params = ParameterSet(0)
    net = SeparationNetwork(params, cfg, clue_dim=3)
    x = rng.normal(size=(1, 40))
    clue = constant(np.zeros((1, 3)))
    h = net.encode_mixture(constant(x))
    out = net.forward(constant(x), clue, mask_override=np.ones(h.shape))
    expected = conv_transpose1d(h, net.decoder_kernel, cfg.stride).data[:, 0, :40]
    np.testing.assert_allclose(out.data, expected)


def test_clue_changes_output(tiny_sep, rng):
    net = SeparationNetwork(ParameterSet(0), tiny_sep, clue_dim=4)
    x = constant(rng.normal(size=(1, 64)) * 0.1)
    a = net.forward(x, constant(np.ones((1, 4)))).data
    b = net.forward(x, constant(-np.ones((1, 4)))).data
    assert not np.allclose(a, b)


def test_input_shorter_than_kernel(tiny_sep):
    net = SeparationNetwork(ParameterSet(0), tiny_sep, clue_dim=2)
    with pytest.raises(DimensionError):
        net.forward(constant(np.zeros((1, 3))), constant(np.zeros((1, 2))))


def test_clue_batch_mismatch(tiny_sep):
    net = SeparationNetwork(ParameterSet(0), tiny_sep, clue_dim=2)
    with pytest.raises(DimensionError):
        net.forward(constant(np.zeros((2, 32))), constant(np.zeros((1, 2))))


def test_decoder_pairing_checked(tiny_sep, rng):
    net = SeparationNetwork(ParameterSet(0), tiny_sep, clue_dim=2)
    net.decoder_kernel.data = np.zeros((8, 1, 6))
    with pytest.raises(ConfigError):
        net.decode(constant(np.zeros((1, 8, 5))))


def test_positional_encoding_shape():
    pe = positional_encoding(7, 6)
    assert pe.shape == (7, 6)
    np.testing.assert_allclose(pe[0, 1::2], 1.0)


def test_intra_stage_is_chunk_local(tiny_sep, rng):
    net = SeparationNetwork(ParameterSet(0), tiny_sep, clue_dim=2)
    block = net.blocks[0]
    z = constant(rng.normal(size=(2, 5, tiny_sep.chunk_size, tiny_sep.n_channels)))
    perm = rng.permutation(5)
    permuted_first = net.intra(constant(z.data[:, perm]), block).data
    np.testing.assert_allclose(permuted_first, net.intra(z, block).data[:, perm], atol=1e-12)


def test_intra_stage_without_positions_is_frame_equivariant(rng):
    cfg = SepConfig(n_channels=8, kernel_size=4, stride=2, chunk_size=6, n_repeats=1, heads=2, ff_dim=8,
                    positional_encoding=False)
    net = SeparationNetwork(ParameterSet(0), cfg, clue_dim=2)
    block = net.blocks[0]
    z = constant(rng.normal(size=(1, 3, 6, 8)))
    perm = rng.permutation(6)
    permuted_first = net.intra(constant(z.data[:, :, perm]), block).data
    np.testing.assert_allclose(permuted_first, net.intra(z, block).data[:, :, perm], atol=1e-12)


@pytest.mark.parametrize("length", [8000, 12000, 24000])
def test_extract_keeps_mixture_length(length, eval_sep, tiny_clue, rng):
    model = ModelBundle(eval_sep, tiny_clue)
    mixture = Waveform(rng.normal(size=length) * 0.05)
    estimate = extract(mixture, ClueBundle(text="The lady sounds happy."), model)
    assert len(estimate) == length
    assert estimate.metadata["clue_condition"] == "text_only"
