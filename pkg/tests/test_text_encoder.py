import json

import numpy as np
import pytest

import text_encoder
from config import ClueConfig
from errors import ConfigError, InputError
from text_encoder import HashTextEncoder, PrecomputedTextEncoder, build_text_encoder, get_tokenizer, tokenize


def test_tokens_are_lower_cased_bpe_ids():
    tokens = tokenize("The Lady, sounds shocked!")
    assert all(isinstance(t, int) for t in tokens)
    assert get_tokenizer().decode(tokens) == "the lady, sounds shocked!"
    assert tokenize("THE LADY") == tokenize("the lady")


def test_unknown_tokenizer_encoding():
    with pytest.raises(ConfigError):
        HashTextEncoder(vocab_size=64, dim=8, seed=0, encoding="no_such_encoding")


def test_hash_encoder_is_deterministic_and_frozen():
    first = HashTextEncoder(vocab_size=128, dim=16, seed=3)
    second = HashTextEncoder(vocab_size=128, dim=16, seed=3)
    a = first.generate_embedding("A low-pitched voice")
    np.testing.assert_array_equal(a, second.generate_embedding("A low-pitched voice"))
    assert a.shape == (16,)
    assert not a.flags.writeable
    assert first.digest() == second.digest()


def test_hash_encoder_separates_descriptions():
    encoder = HashTextEncoder(vocab_size=512, dim=32, seed=0)
    a = encoder.generate_embedding("The happy one.")
    b = encoder.generate_embedding("The sad one.")
    assert not np.allclose(a, b)


def test_truncation_warns(monkeypatch):
    warnings = []
    monkeypatch.setattr(text_encoder, "print_warning", warnings.append)
    encoder = HashTextEncoder(vocab_size=64, dim=8, seed=0, max_tokens=20)
    long_text = " ".join(["word"] * 30)
    tokens = encoder.truncate(long_text)
    assert tokens == tokenize(long_text)[:20]
    assert len(warnings) == 1


def test_empty_text_rejected():
    with pytest.raises(InputError):
        HashTextEncoder(vocab_size=64, dim=8, seed=0).generate_embedding("   ")


def test_precomputed_lookup(tmp_path):
    path = tmp_path / "vectors.jsonl"
    path.write_text(json.dumps({"text": "The man.", "vector": [1.0, 2.0, 3.0]}) + "\n")
    encoder = PrecomputedTextEncoder(str(path), dim=3)
    np.testing.assert_array_equal(encoder.generate_embedding("The man."), [1.0, 2.0, 3.0])
    with pytest.raises(InputError, match="The lady."):
        encoder.generate_embedding("The lady.")


def test_precomputed_needs_a_path(monkeypatch):
    monkeypatch.delenv("STYLETSE_TEXT_EMBEDDINGS", raising=False)
    with pytest.raises(ConfigError):
        build_text_encoder(ClueConfig(text_encoder="precomputed"))
