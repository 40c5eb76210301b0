"""
The full extractor: clue network + separation network over one ParameterSet,
plus checkpoint save/load.
"""

from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from clue_network import ClueBundle, ClueNetwork
from config import ClueConfig, SepConfig
from errors import ConfigError
from numerics import ParameterSet, Tensor, as_tensor, load_checkpoint, save_checkpoint
from separation import SeparationNetwork
from text_encoder import TextEncoder, build_text_encoder
from utils import print_info

OPTIMIZER_PREFIX = "__adam__"


class ModelBundle:
    """Everything needed to run extraction.

    Parameter initial values depend only on (seed, parameter name), so two
    bundles built with the same seed but different fusion or pooling agree
    on every parameter they share.
    """

    def __init__(self, sep_cfg: SepConfig, clue_cfg: ClueConfig, seed: int = 0,
                 text_encoder: Optional[TextEncoder] = None):
        """Build parameters for the given configuration.

        Args:
            sep_cfg: Separation network settings.
            clue_cfg: Clue network settings.
            seed: Initialization seed.
            text_encoder: Frozen encoder to use. Defaults to the one named in clue_cfg.
        """
        self.sep_cfg = sep_cfg
        self.clue_cfg = clue_cfg
        self.seed = seed
        self.params = ParameterSet(seed)
        self.text_encoder = text_encoder or build_text_encoder(clue_cfg)
        self.separator = SeparationNetwork(self.params, sep_cfg, clue_cfg.fused_dim)
        self.clue_net = ClueNetwork(self.params, sep_cfg, clue_cfg, self.text_encoder)
        print_info(f"Model has {len(self.params)} parameter tensors, {self.params.num_elements()} values")

    def forward(self, mixtures, bundles: Sequence[ClueBundle], trace: Optional[Dict] = None) -> Tensor:
        """Estimates [B, L] for equal-length mixtures [B, L] and one clue bundle per item."""
        mixtures = as_tensor(mixtures)
        if len(bundles) != mixtures.shape[0]:
            raise ConfigError(f"{len(bundles)} clue bundles for a batch of {mixtures.shape[0]} mixtures")
        clue = self.clue_net.forward(bundles)
        if trace is not None:
            trace["clue"] = clue
        return self.separator.forward(mixtures, clue, trace=trace)

    def header(self) -> Dict[str, Any]:
        return {
            "sep": self.sep_cfg.model_dump(mode="json"),
            "clue": self.clue_cfg.model_dump(mode="json"),
            "seed": self.seed,
            "text_encoder_digest": self.text_encoder.digest(),
        }

    def save(self, path: str, optimizer=None, extra: Optional[Dict[str, Any]] = None):
        """Write parameters, optimizer moments and any training cursor to ``path``."""
        tensors = dict(self.params.state_dict())
        header = self.header()
        if optimizer is not None:
            moments, opt_header = optimizer.state_dict()
            tensors.update({f"{OPTIMIZER_PREFIX}.{k}": v for k, v in moments.items()})
            header["optimizer"] = opt_header
        header["extra"] = extra or {}
        save_checkpoint(path, tensors, header)

    @classmethod
    def load(cls, path: str, text_encoder: Optional[TextEncoder] = None) -> Tuple["ModelBundle", Dict[str, Any], Dict[str, np.ndarray]]:
        """Rebuild a bundle from a checkpoint.

        Returns:
            The model, the checkpoint header and the optimizer moment tables.
        """
        tensors, header = load_checkpoint(path)
        model = cls(SepConfig.model_validate(header["sep"]), ClueConfig.model_validate(header["clue"]),
                    seed=header.get("seed", 0), text_encoder=text_encoder)
        if model.text_encoder.digest() != header.get("text_encoder_digest"):
            raise ConfigError(f"{path}: text encoder differs from the one the checkpoint was trained with")

        params = {k: v for k, v in tensors.items() if not k.startswith(OPTIMIZER_PREFIX + ".")}
        moments = {k[len(OPTIMIZER_PREFIX) + 1:]: v for k, v in tensors.items() if k.startswith(OPTIMIZER_PREFIX + ".")}
        model.params.load_state_dict(params)
        return model, header, moments
