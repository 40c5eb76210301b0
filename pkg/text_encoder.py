"""
Frozen text encoders for style-description clues.

Two interchangeable implementations of the same port:

- ``HashTextEncoder``: BPE token ids hashed into a fixed random table,
  mean-pooled. Self-contained apart from the tokenizer vocabulary.
- ``PrecomputedTextEncoder``: looks vectors up in a JSONL sidecar produced
  by any external sentence encoder.

Both count and cap tokens with the same tiktoken encoding. Neither exposes
parameters to the optimizer.
"""

import hashlib
import json
import os
from functools import lru_cache
from typing import Dict, List, Optional

import numpy as np
import tiktoken
from dotenv import load_dotenv

from errors import ConfigError, FormatError, InputError
from utils import print_info, print_warning

# Load environment variables
load_dotenv()

DEFAULT_ENCODING = os.getenv("STYLETSE_TOKENIZER", "cl100k_base")


@lru_cache(maxsize=4)
def get_tokenizer(encoding: str = DEFAULT_ENCODING) -> tiktoken.Encoding:
    try:
        return tiktoken.get_encoding(encoding)
    except ValueError as e:
        raise ConfigError(f"Unknown tokenizer encoding '{encoding}'") from e


def tokenize(text: str, encoding: str = DEFAULT_ENCODING) -> List[int]:
    """BPE token ids of the lower-cased text."""
    return get_tokenizer(encoding).encode(text.lower())


class TextEncoder:
    """Base class: text string in, fixed-size frozen vector out."""

    dim: int = 768

    def __init__(self, max_tokens: int = 20, encoding: Optional[str] = None):
        self.max_tokens = max_tokens
        self.encoding = encoding or DEFAULT_ENCODING
        get_tokenizer(self.encoding)
        self._cache: Dict[str, np.ndarray] = {}

    def truncate(self, text: str) -> List[int]:
        """Token ids of ``text``, cut to ``max_tokens`` with a warning."""
        tokens = tokenize(text, self.encoding)
        if len(tokens) > self.max_tokens:
            print_warning(f"Text clue truncated from {len(tokens)} to {self.max_tokens} tokens: '{text[:40]}...'")
            tokens = tokens[:self.max_tokens]
        return tokens

    def generate_embedding(self, text: str) -> np.ndarray:
        """Generate an embedding for a single text.

        Args:
            text: The clue text.

        Returns:
            A read-only vector of length ``dim``.
        """
        if not text or not text.strip():
            raise InputError("Cannot encode an empty text clue; use the pseudo-text fallback instead")
        if text not in self._cache:
            vector = np.array(self._encode(text), dtype=np.float64)
            vector.setflags(write=False)
            self._cache[text] = vector
        return self._cache[text]

    def generate_batch_embeddings(self, texts: List[str]) -> np.ndarray:
        """Generate embeddings for a batch of texts, stacked [B, dim]."""
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self.generate_embedding(t) for t in texts])

    def _encode(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def digest(self) -> str:
        """Fingerprint of the encoder's frozen state."""
        return hashlib.sha256(type(self).__name__.encode()).hexdigest()


class HashTextEncoder(TextEncoder):
    """Hash BPE token ids into a seeded random table and average the rows."""

    def __init__(self, vocab_size: Optional[int] = None, dim: int = 768, seed: Optional[int] = None,
                 max_tokens: int = 20, encoding: Optional[str] = None):
        """Initialize the hash encoder.

        Args:
            vocab_size: Number of hash buckets. Defaults to STYLETSE_HASH_VOCAB or 2048.
            dim: Embedding width.
            seed: Table seed. Defaults to STYLETSE_HASH_SEED or 1770.
            max_tokens: Token cap before truncation.
            encoding: tiktoken encoding name. Defaults to STYLETSE_TOKENIZER or cl100k_base.
        """
        super().__init__(max_tokens=max_tokens, encoding=encoding)
        self.vocab_size = vocab_size or int(os.getenv("STYLETSE_HASH_VOCAB", "2048"))
        self.seed = seed if seed is not None else int(os.getenv("STYLETSE_HASH_SEED", "1770"))
        self.dim = dim
        rng = np.random.default_rng(self.seed)
        self.table = rng.standard_normal((self.vocab_size, dim)) / np.sqrt(dim)
        self.table.setflags(write=False)
        print_info(f"Using hash text encoder ({self.vocab_size} buckets, dim {dim}, {self.encoding} tokens)")

    def bucket(self, token: int, position: Optional[int] = None) -> int:
        """Table row for a token id, optionally tied to its position."""
        key = f"{token}" if position is None else f"{position}:{token}"
        digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.vocab_size

    def _encode(self, text: str) -> np.ndarray:
        tokens = self.truncate(text)
        ids = [self.bucket(t) for t in tokens]
        # position-aware second half keeps word order visible
        positional = [self.bucket(t, i) for i, t in enumerate(tokens)]
        return 0.5 * (self.table[ids].mean(axis=0) + self.table[positional].mean(axis=0))

    def digest(self) -> str:
        h = hashlib.sha256(self.encoding.encode("utf-8"))
        h.update(self.table.tobytes())
        return h.hexdigest()


class PrecomputedTextEncoder(TextEncoder):
    """Vectors from a JSONL sidecar of {"text": ..., "vector": [...]}."""

    def __init__(self, path: Optional[str] = None, dim: int = 768, max_tokens: int = 20,
                 encoding: Optional[str] = None):
        super().__init__(max_tokens=max_tokens, encoding=encoding)
        self.dim = dim
        self.path = path or os.getenv("STYLETSE_TEXT_EMBEDDINGS")
        if not self.path:
            raise ConfigError("Precomputed text encoder needs clue.text_embeddings_path")
        if not os.path.isfile(self.path):
            raise FormatError(f"Text embedding file not found: {self.path}")

        self.vectors: Dict[str, np.ndarray] = {}
        with open(self.path, "r") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                row = json.loads(line)
                vector = np.asarray(row["vector"], dtype=np.float64)
                if vector.shape != (self.dim,):
                    raise FormatError(f"{self.path}:{line_no}: vector has shape {vector.shape}, expected ({self.dim},)")
                self.vectors[row["text"]] = vector
        print_info(f"Loaded {len(self.vectors)} precomputed text embeddings from {self.path}")

    def _encode(self, text: str) -> np.ndarray:
        # the sidecar was produced from the full string; truncation only warns here
        self.truncate(text)
        if text in self.vectors:
            return self.vectors[text]
        raise InputError(f"No precomputed embedding for text clue '{text}'")

    def digest(self) -> str:
        h = hashlib.sha256()
        for text in sorted(self.vectors):
            h.update(text.encode("utf-8"))
            h.update(self.vectors[text].tobytes())
        return h.hexdigest()


def build_text_encoder(clue_cfg) -> TextEncoder:
    """Build the encoder named by ``ClueConfig.text_encoder``."""
    if clue_cfg.text_encoder == "hash":
        return HashTextEncoder(vocab_size=clue_cfg.hash_vocab_size, dim=clue_cfg.text_dim,
                               seed=clue_cfg.hash_seed, max_tokens=clue_cfg.max_text_tokens,
                               encoding=clue_cfg.tokenizer)
    if clue_cfg.text_encoder == "precomputed":
        return PrecomputedTextEncoder(clue_cfg.text_embeddings_path, dim=clue_cfg.text_dim,
                                      max_tokens=clue_cfg.max_text_tokens, encoding=clue_cfg.tokenizer)
    raise ConfigError(f"Unknown text encoder '{clue_cfg.text_encoder}'")
