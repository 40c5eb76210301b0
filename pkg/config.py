"""
Run configuration: pydantic schemas, YAML profiles and override handling.
"""

import glob
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from errors import ConfigError
from utils import console, print_info, print_warning

# Load environment variables
load_dotenv()

SAMPLE_RATE = 8000
ATTRIBUTES = ("speaker_id", "emotion", "pitch", "gender", "accent", "tempo")
CLUE_CONDITIONS = ("text_audio", "text_only", "audio_only")


class PathsConfig(BaseModel):
    corpus_dir: str = "data/corpus"
    manifest: Optional[str] = None
    mixtures_dir: str = "data/mixtures"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "runs"

    @property
    def manifest_path(self) -> str:
        return self.manifest or os.path.join(self.corpus_dir, "manifest.jsonl")

    @property
    def mixtures_metadata_path(self) -> str:
        return os.path.join(self.mixtures_dir, "mixtures.jsonl")


class SepConfig(BaseModel):
    """Separation network hyperparameters (toy-scale defaults)."""

    n_channels: int = Field(64, ge=1)           # F
    kernel_size: int = Field(16, ge=1)          # K
    stride: int = Field(8, ge=1)
    chunk_size: int = Field(50, ge=2)           # C
    chunk_overlap: float = 0.5
    n_repeats: int = Field(2, ge=1)
    n_layers: int = Field(1, ge=1)              # transformer layers per intra/inter stage
    heads: int = Field(4, ge=1)
    ff_dim: int = Field(256, ge=1)
    encoder_relu: bool = True
    positional_encoding: bool = True

    @model_validator(mode="after")
    def _check(self):
        if not 0.0 < self.chunk_overlap < 1.0:
            raise ValueError("chunk_overlap must be in (0, 1)")
        if self.stride > self.kernel_size:
            raise ValueError("stride must not exceed kernel_size")
        if self.n_channels % self.heads:
            raise ValueError("n_channels must be divisible by heads")
        hop = self.chunk_size * (1.0 - self.chunk_overlap)
        if abs(hop - round(hop)) > 1e-9 or round(hop) < 1:
            raise ValueError("chunk_size * (1 - chunk_overlap) must be a positive integer")
        return self

    @property
    def hop(self) -> int:
        return int(round(self.chunk_size * (1.0 - self.chunk_overlap)))


class ClueConfig(BaseModel):
    embed_dim: int = Field(256, ge=1)           # F'
    text_dim: int = Field(768, ge=1)
    fusion: Literal["gated", "average", "concat"] = "gated"
    pooling: Literal["attention", "average"] = "attention"
    pseudo_text: str = "Extract the same speaker."
    max_text_tokens: int = Field(20, ge=1)
    text_encoder: Literal["hash", "precomputed"] = "hash"
    text_embeddings_path: Optional[str] = None
    tokenizer: Optional[str] = None             # tiktoken encoding; None: STYLETSE_TOKENIZER or cl100k_base
    hash_vocab_size: int = Field(2048, ge=16)
    hash_seed: int = 1770

    @property
    def fused_dim(self) -> int:
        return 2 * self.embed_dim if self.fusion == "concat" else self.embed_dim


class TrainConfig(BaseModel):
    stage: Literal[1, 2] = 1
    lr_stage1: float = 2e-4
    lr_stage2: float = 1.5e-4
    lr_floor: float = 1e-6
    plateau_patience: int = 2
    plateau_start_epoch: int = 70
    plateau_threshold: float = 1e-4
    batch_size: int = Field(56, ge=1)
    max_signal_s: float = 3.0
    min_signal_s: float = 0.5
    max_text_tokens: int = 20
    clue_ratio: Tuple[int, int, int] = (2, 2, 1)
    dm_enabled: bool = True
    seed: int = 0
    grad_clip: float = 5.0
    stage1_steps: int = 100_000
    stage2_epochs: int = 200
    stage1_checkpoint: Optional[str] = None
    save_every_steps: int = Field(0, ge=0)      # 0: checkpoint at epoch ends only
    max_train_mixtures: Optional[int] = None
    max_val_mixtures: Optional[int] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    @field_validator("clue_ratio")
    @classmethod
    def _ratio_positive(cls, value):
        if any(v < 0 for v in value) or sum(value) == 0:
            raise ValueError("clue_ratio needs nonnegative weights with a positive sum")
        return value

    @property
    def effective_dm(self) -> bool:
        # stage one never remixes
        return self.dm_enabled and self.stage == 2


class DatasetConfig(BaseModel):
    sample_rate: int = SAMPLE_RATE
    lufs_min: float = -33.0
    lufs_max: float = -25.0
    min_duration_s: float = 3.0
    max_duration_s: float = 15.0
    type_ii_ratio: float = Field(0.5, ge=0.0, le=1.0)
    both_clue_types: bool = True
    split_ratio: Tuple[int, int, int] = (8, 1, 1)
    split_seed: int = 0
    mix_seed: int = 0
    mixtures_per_target: int = Field(1, ge=1)
    onset_max_fraction: float = Field(0.5, ge=0.0)
    templates_path: str = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                                       "templates", "clue_templates.yaml")
    # synthetic corpus
    n_speakers: int = Field(4, ge=2)
    utts_per_speaker: int = Field(20, ge=1)
    styles_per_speaker: int = Field(2, ge=1)
    corpus_seed: int = 0
    min_utt_s: float = 3.5
    max_utt_s: float = 6.0

    @model_validator(mode="after")
    def _check(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}")
        if self.lufs_min > self.lufs_max:
            raise ValueError("lufs_min must not exceed lufs_max")
        if self.min_duration_s > self.max_duration_s:
            raise ValueError("min_duration_s must not exceed max_duration_s")
        return self


class EvalConfig(BaseModel):
    split: Literal["train", "dev", "test"] = "test"
    conditions: List[Literal["text_audio", "text_only", "audio_only"]] = list(CLUE_CONDITIONS)
    max_eval_mixtures: Optional[int] = None
    discrimination_pairs: int = 200
    ablation_arms: List[Literal["gated", "average", "concat", "gated_no_attnpool"]] = [
        "gated", "average", "concat", "gated_no_attnpool"
    ]
    ablation_stage1_steps: int = 200
    ablation_stage2_epochs: int = 2


class RunConfig(BaseModel):
    name: str = "default"
    description: str = ""
    # float32 halves memory; gradient checks need float64
    precision: Literal["float64", "float32"] = "float64"
    paths: PathsConfig = PathsConfig()
    sep: SepConfig = SepConfig()
    clue: ClueConfig = ClueConfig()
    train: TrainConfig = TrainConfig()
    data: DatasetConfig = DatasetConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _check(self):
        if self.train.max_text_tokens != self.clue.max_text_tokens:
            raise ValueError("train.max_text_tokens and clue.max_text_tokens must agree")
        return self


# Built-in profile, used when the profiles directory is missing
DEFAULT_PROFILES = {
    "default": {
        "name": "default",
        "description": "Published constants with toy-scale network sizes",
    }
}


def load_profiles_from_directory(profiles_dir: str = "profiles") -> Dict[str, Dict[str, Any]]:
    """Load run profiles from YAML files in the profiles directory.

    Args:
        profiles_dir: Directory containing profile YAML files.

    Returns:
        Dictionary of profile name to raw profile data.
    """
    profiles = {}

    # First, load the default profiles as fallback
    profiles.update(DEFAULT_PROFILES)

    if not os.path.exists(profiles_dir):
        print_warning(f"Profiles directory '{profiles_dir}' not found. Using default profiles.")
        return profiles

    profile_files = glob.glob(os.path.join(profiles_dir, "*.yaml"))
    profile_files.extend(glob.glob(os.path.join(profiles_dir, "*.yml")))

    for profile_file in sorted(profile_files):
        try:
            with open(profile_file, "r") as f:
                profile_data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Error loading profile from '{profile_file}': {e}") from e

        if not profile_data.get("name"):
            print_warning(f"Profile file '{profile_file}' missing 'name' field. Skipping.")
            continue

        profiles[profile_data["name"]] = profile_data

    print_info(f"Loaded {len(profiles)} profiles from {profiles_dir}")
    return profiles


def parse_override(text: str) -> Tuple[List[str], Any]:
    """Parse a ``section.key=value`` flag; the value is read as YAML."""
    if "=" not in text:
        raise ConfigError(f"Override '{text}' is not of the form section.key=value")
    key, raw = text.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"Override '{text}' has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"Override '{text}' has an unparsable value: {e}") from e
    return path, value


def _set_path(data: Dict[str, Any], path: List[str], value: Any):
    node = data
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Cannot set '{'.'.join(path)}': '{part}' is not a section")
    node[path[-1]] = value


def _flatten(data: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def resolve_config(profile: Optional[str] = None, profiles_dir: Optional[str] = None,
                   overrides: Optional[List[str]] = None) -> Tuple[RunConfig, Dict[str, Any]]:
    """Build the run configuration from profile, environment and flags.

    Precedence (lowest first): model defaults, profile YAML, environment
    variables, ``--set`` flags.

    Args:
        profile: Profile name. Defaults to STYLETSE_PROFILE or "default".
        profiles_dir: Profiles directory. Defaults to STYLETSE_PROFILES_DIR or "profiles".
        overrides: ``section.key=value`` strings.

    Returns:
        The validated RunConfig and a record of every override and its source.
    """
    profile = profile or os.getenv("STYLETSE_PROFILE", "default")
    profiles_dir = profiles_dir or os.getenv("STYLETSE_PROFILES_DIR", "profiles")

    profiles = load_profiles_from_directory(profiles_dir)
    if profile not in profiles:
        raise ConfigError(f"Unknown profile '{profile}'. Available: {', '.join(sorted(profiles))}")

    data = {k: v for k, v in profiles[profile].items()}
    record: Dict[str, Any] = {
        f"{key}": {"value": value, "source": f"profile:{profile}"}
        for key, value in _flatten(data).items()
        if key not in ("name", "description")
    }

    env_map = {
        "STYLETSE_SEED": ["train", "seed"],
        "STYLETSE_OUTPUT_DIR": ["paths", "output_dir"],
    }
    for env_name, path in env_map.items():
        raw = os.getenv(env_name)
        if raw:
            value = yaml.safe_load(raw)
            _set_path(data, path, value)
            record[".".join(path)] = {"value": value, "source": f"env:{env_name}"}

    for text in overrides or []:
        path, value = parse_override(text)
        _set_path(data, path, value)
        record[".".join(path)] = {"value": value, "source": "flag"}

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration for profile '{profile}': {e}") from e

    if record:
        print_info(f"Applied {len(record)} configuration overrides")
    return config, record


def describe_config(config: RunConfig):
    """Print the resolved configuration as YAML."""
    console.print(yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False))
