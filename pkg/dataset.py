"""
Style-attributed utterance records and mixture recipes.

Covers manifest ingest, interference pairing under the attribute
constraints, reference selection, text clue rendering, splits, dynamic
re-pairing, mixture synthesis and the dataset statistics report.
"""

import json
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ValidationError as PydanticValidationError, model_validator
from scipy import stats

from audio_dsp import Waveform, energy_snr_db, measure_lufs, mix_at_onset, read_wav, rescale_to_lufs, snr_lu
from config import ATTRIBUTES, SAMPLE_RATE, DatasetConfig
from errors import DataError, FormatError, InputError, PairingExhausted, StyleTSEError, ValidationError
from utils import print_info, print_warning, read_jsonl, write_jsonl

EMOTIONS = ("neutral", "happy", "sad", "angry", "surprised")
PITCHES = ("high", "neutral", "low")
GENDERS = ("male", "female")
ACCENTS = ("american", "british", "indian", "australian")
TEMPOS = ("fast", "neutral", "slow")
LENGTH_CLASSES = ("long", "mid", "short")
SPLITS = ("train", "dev", "test")

Emotion = Literal["neutral", "happy", "sad", "angry", "surprised"]
Pitch = Literal["high", "neutral", "low"]
Gender = Literal["male", "female"]
Accent = Literal["american", "british", "indian", "australian"]
Tempo = Literal["fast", "neutral", "slow"]


class StyleAttributes(BaseModel):
    speaker_id: str
    emotion: Emotion
    pitch: Pitch
    gender: Gender
    accent: Accent
    tempo: Tempo

    def get(self, attribute: str) -> str:
        if attribute not in ATTRIBUTES:
            raise InputError(f"Unknown attribute '{attribute}'")
        return getattr(self, attribute)

    def as_tuple(self) -> Tuple[str, ...]:
        return tuple(getattr(self, a) for a in ATTRIBUTES)

    def differing(self, other: "StyleAttributes") -> List[str]:
        """Attributes whose values differ, in canonical order."""
        return [a for a in ATTRIBUTES if getattr(self, a) != getattr(other, a)]


class UtteranceRecord(BaseModel):
    id: str
    path: str
    duration_s: float
    attributes: StyleAttributes
    transcript: Optional[str] = None

    @classmethod
    def from_row(cls, row: Dict[str, Any], base_dir: str = "") -> "UtteranceRecord":
        """Build a record from a flat manifest row; relative paths resolve against ``base_dir``."""
        attrs = {a: row.get(a) for a in ATTRIBUTES if a in row}
        path = row.get("path")
        if isinstance(path, str) and base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return cls(id=row.get("id"), path=path, duration_s=row.get("duration_s"),
                   attributes=attrs, transcript=row.get("transcript"))

    def to_row(self, base_dir: str = "") -> Dict[str, Any]:
        path = os.path.relpath(self.path, base_dir) if base_dir else self.path
        row = {"id": self.id, "path": path, "duration_s": self.duration_s, "transcript": self.transcript}
        row.update(self.attributes.model_dump())
        return row

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * SAMPLE_RATE))


class ClueSpec(BaseModel):
    kind: Literal["type_i", "type_ii"]
    text: str
    length_class: Optional[Literal["long", "mid", "short"]] = None
    reference_id: Optional[str] = None
    highlighted_attribute: Optional[str] = None

    @model_validator(mode="after")
    def _check_kind(self):
        if self.kind == "type_ii":
            if not self.reference_id or not self.highlighted_attribute:
                raise ValueError("type_ii clues need reference_id and highlighted_attribute")
            if self.highlighted_attribute not in ATTRIBUTES:
                raise ValueError(f"unknown highlighted_attribute '{self.highlighted_attribute}'")
        else:
            if self.reference_id or self.highlighted_attribute:
                raise ValueError("type_i clues carry no reference_id or highlighted_attribute")
            if self.length_class is None:
                raise ValueError("type_i clues need a length_class")
        return self


class MixtureSpec(BaseModel):
    mixture_id: str
    target_id: str
    interference_id: str
    target_lufs: float
    interference_lufs: float
    onset: int
    clue: ClueSpec
    alt_clue: Optional[ClueSpec] = None
    split: Optional[Literal["train", "dev", "test"]] = None
    clipping_gain: float = 1.0
    snr_lu: Optional[float] = None
    energy_snr_db: Optional[float] = None
    dm_source: Optional[str] = None

    def clue_of(self, kind: str) -> Optional[ClueSpec]:
        """The clue of the given kind, whether primary or alternate."""
        for clue in (self.clue, self.alt_clue):
            if clue is not None and clue.kind == kind:
                return clue
        return None


# manifest

def ingest_manifest(path: str, min_duration_s: float = 3.0, max_duration_s: float = 15.0,
                    rejections: Optional[List[Dict[str, str]]] = None) -> List[UtteranceRecord]:
    """Read and validate a JSONL manifest.

    Invalid lines and out-of-range durations are skipped with a warning; the
    reasons are appended to ``rejections`` when given.

    Args:
        path: Manifest path.
        min_duration_s: Shortest accepted duration.
        max_duration_s: Longest accepted duration.
        rejections: Optional list collecting {"id", "reason"} entries.

    Returns:
        The accepted records in file order.
    """
    if not os.path.isfile(path):
        raise FormatError(f"Manifest not found: {path}")
    base_dir = os.path.dirname(os.path.abspath(path))
    records = []
    rejected = rejections if rejections is not None else []

    def reject(record_id: str, reason: str):
        rejected.append({"id": record_id, "reason": reason})
        print_warning(f"Rejected manifest record {record_id}: {reason}")

    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                reject(f"line {line_no}", f"invalid JSON ({e.msg})")
                continue
            record_id = str(row.get("id", f"line {line_no}"))
            try:
                record = UtteranceRecord.from_row(row, base_dir)
            except PydanticValidationError as e:
                fields = sorted({".".join(str(p) for p in err["loc"]) for err in e.errors()})
                reject(record_id, f"validation error in {', '.join(fields)}")
                continue
            if record.duration_s < min_duration_s:
                reject(record_id, f"duration<{min_duration_s:g}s")
                continue
            if record.duration_s > max_duration_s:
                reject(record_id, f"duration>{max_duration_s:g}s")
                continue
            records.append(record)

    print_info(f"Ingested {len(records)} records from {path} ({len(rejected)} rejected)")
    return records


def write_manifest(path: str, records: Iterable[UtteranceRecord]):
    base_dir = os.path.dirname(os.path.abspath(path))
    write_jsonl(path, (r.to_row(base_dir) for r in records))


# pairing and references

def pair_interference(target: UtteranceRecord, pool: Sequence[UtteranceRecord],
                      rng: np.random.Generator) -> UtteranceRecord:
    """Pick an interference differing from the target in at least one attribute.

    Same-speaker pairs are allowed when another attribute differs.
    """
    candidates = [r for r in pool if r.id != target.id and target.attributes.differing(r.attributes)]
    if not candidates:
        raise PairingExhausted(f"No interference candidate for {target.id}")
    return candidates[int(rng.integers(len(candidates)))]


def select_reference(target: UtteranceRecord, interference: UtteranceRecord,
                     pool: Sequence[UtteranceRecord], attribute: str,
                     rng: np.random.Generator) -> UtteranceRecord:
    """Pick a reference sharing ``attribute`` with the target but not with the interference."""
    if attribute not in ATTRIBUTES:
        raise InputError(f"Unknown attribute '{attribute}'")
    wanted = target.attributes.get(attribute)
    if interference.attributes.get(attribute) == wanted:
        raise PairingExhausted(f"Target and interference share {attribute}={wanted}")
    candidates = [
        r for r in pool
        if r.id not in (target.id, interference.id) and r.attributes.get(attribute) == wanted
    ]
    if not candidates:
        raise PairingExhausted(f"No reference with {attribute}={wanted} for {target.id}")
    return candidates[int(rng.integers(len(candidates)))]


# text clues

class ClueTemplates:
    """Template table for Type I descriptions and the Type II prompt."""

    def __init__(self, data: Dict[str, Any]):
        self.surface = data.get("surface", {})
        self.type_i = data["type_i"]
        self.type_ii = data["type_ii"]
        for length in LENGTH_CLASSES:
            if not self.type_i.get(length):
                raise FormatError(f"Clue templates have no '{length}' entries")

    @classmethod
    def load(cls, path: str) -> "ClueTemplates":
        if not os.path.isfile(path):
            raise FormatError(f"Clue template file not found: {path}")
        with open(path, "r") as f:
            return cls(yaml.safe_load(f))

    def _fields(self, attrs: StyleAttributes) -> Dict[str, str]:
        fields = {}
        for attribute in ATTRIBUTES[1:]:
            value = getattr(attrs, attribute)
            word = self.surface.get(attribute, {}).get(value, value)
            fields[attribute] = word
            fields[attribute.capitalize()] = word.capitalize()
        fields["gender_noun"] = self.surface.get("gender_noun", {}).get(attrs.gender, attrs.gender)
        return fields

    def render_type_i(self, attrs: StyleAttributes, length: str, rng: Optional[np.random.Generator] = None,
                      prefer: Optional[Sequence[str]] = None) -> str:
        if length not in LENGTH_CLASSES:
            raise InputError(f"Unknown length class '{length}'")
        options = self.type_i[length]
        if prefer:
            preferred = [t for t in options if set(t["attributes"]) & set(prefer)]
            options = preferred or options
        template = options[0] if rng is None else options[int(rng.integers(len(options)))]
        return template["text"].format(**self._fields(attrs))

    def render_type_ii(self, attribute: str) -> str:
        if attribute not in ATTRIBUTES:
            raise InputError(f"Unknown attribute '{attribute}'")
        name = self.type_ii["attribute_names"].get(attribute, attribute)
        return self.type_ii["text"].format(attribute_name=name)


@lru_cache(maxsize=8)
def load_templates(path: str) -> ClueTemplates:
    return ClueTemplates.load(path)


def render_text_clue(target: StyleAttributes, length: Optional[str] = None,
                     type_ii_attribute: Optional[str] = None,
                     templates: Optional[ClueTemplates] = None,
                     rng: Optional[np.random.Generator] = None,
                     prefer: Optional[Sequence[str]] = None) -> str:
    """Render a Type I description (by length) or the Type II prompt (by attribute).

    Without ``rng`` the first matching template is used.
    """
    templates = templates or load_templates(DatasetConfig().templates_path)
    if type_ii_attribute is not None:
        return templates.render_type_ii(type_ii_attribute)
    if length is None:
        raise InputError("A Type I clue needs a length class")
    return templates.render_type_i(target, length, rng=rng, prefer=prefer)


# recipes

def generate_mixture_specs(records: Sequence[UtteranceRecord], cfg: DatasetConfig,
                           rng: np.random.Generator,
                           templates: Optional[ClueTemplates] = None) -> Tuple[List[MixtureSpec], int]:
    """Pair, draw loudness and onset, and attach clues for every target.

    Returns:
        The mixture specs (unsplit) and the number of unpairable draws.
    """
    templates = templates or load_templates(cfg.templates_path)
    records = sorted(records, key=lambda r: r.id)
    specs: List[MixtureSpec] = []
    unpairable = 0

    for target in records:
        for _ in range(cfg.mixtures_per_target):
            try:
                interference = pair_interference(target, records, rng)
            except PairingExhausted:
                unpairable += 1
                continue

            target_lufs, interference_lufs = (float(v) for v in rng.uniform(cfg.lufs_min, cfg.lufs_max, size=2))
            max_onset = int(math.floor(cfg.onset_max_fraction * target.n_samples))
            onset = int(rng.integers(0, max_onset + 1))
            differing = target.attributes.differing(interference.attributes)

            length = LENGTH_CLASSES[int(rng.integers(len(LENGTH_CLASSES)))]
            type_i = ClueSpec(kind="type_i", length_class=length,
                              text=templates.render_type_i(target.attributes, length, rng=rng, prefer=differing))

            type_ii = None
            for attribute in rng.permutation(differing):
                try:
                    reference = select_reference(target, interference, records, str(attribute), rng)
                except PairingExhausted:
                    continue
                type_ii = ClueSpec(kind="type_ii", text=templates.render_type_ii(str(attribute)),
                                   reference_id=reference.id, highlighted_attribute=str(attribute))
                break

            if type_ii is not None and rng.random() < cfg.type_ii_ratio:
                clue, alt = type_ii, type_i
            else:
                clue, alt = type_i, type_ii
            if not cfg.both_clue_types:
                alt = None

            specs.append(MixtureSpec(
                mixture_id=f"mix{len(specs):06d}",
                target_id=target.id,
                interference_id=interference.id,
                target_lufs=target_lufs,
                interference_lufs=interference_lufs,
                onset=onset,
                clue=clue,
                alt_clue=alt,
                snr_lu=snr_lu(target_lufs, interference_lufs),
            ))

    if not specs and records:
        raise PairingExhausted(f"No target could be paired ({unpairable} unpairable draws)")
    if unpairable:
        print_warning(f"{unpairable} targets had no valid interference")
    return specs, unpairable


def make_splits(mixtures: Sequence[MixtureSpec], ratio: Tuple[int, int, int] = (8, 1, 1),
                seed: int = 0) -> List[MixtureSpec]:
    """Assign train/dev/test at mixture level; order of the input is preserved."""
    n = len(mixtures)
    if n < 10:
        raise InputError(f"Splitting needs at least 10 mixtures, got {n}")
    total = sum(ratio)
    n_train = int(round(n * ratio[0] / total))
    n_dev = int(round(n * ratio[1] / total))
    order = np.random.default_rng(seed).permutation(n)

    labels = [""] * n
    for rank, index in enumerate(order):
        labels[index] = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"
    return [m.model_copy(update={"split": label}) for m, label in zip(mixtures, labels)]


def dm_alternatives(spec: MixtureSpec, records_by_id: Dict[str, UtteranceRecord]) -> List[UtteranceRecord]:
    """Utterances that could replace the interference without changing its attribute tuple."""
    original = records_by_id[spec.interference_id]
    wanted = original.attributes.as_tuple()
    excluded = {spec.interference_id, spec.target_id}
    reference = spec.clue_of("type_ii")
    if reference is not None:
        excluded.add(reference.reference_id)
    return [r for r in records_by_id.values() if r.id not in excluded and r.attributes.as_tuple() == wanted]


def dynamic_remix(spec: MixtureSpec, records_by_id: Dict[str, UtteranceRecord], rng: np.random.Generator,
                  onset_max_fraction: float = 0.5) -> MixtureSpec:
    """Swap the interference for another utterance with the identical attribute tuple.

    The target, loudness draws and clues are kept; the onset is redrawn.
    Without an alternative the original spec is returned unchanged.
    """
    if spec.split != "train":
        raise InputError(f"Dynamic mixing applies to the training split only ({spec.mixture_id} is {spec.split})")
    alternatives = dm_alternatives(spec, records_by_id)
    if not alternatives:
        print_info(f"No dynamic-mixing alternative for {spec.mixture_id}; keeping original interference")
        return spec

    chosen = alternatives[int(rng.integers(len(alternatives)))]
    target = records_by_id[spec.target_id]
    max_onset = int(math.floor(onset_max_fraction * target.n_samples))
    onset = int(rng.integers(0, max_onset + 1))
    return spec.model_copy(update={"interference_id": chosen.id, "onset": onset,
                                   "dm_source": spec.interference_id})


def count_dm_alternatives(specs: Sequence[MixtureSpec], records_by_id: Dict[str, UtteranceRecord]) -> float:
    """Mean number of dynamic-mixing alternatives per training mixture."""
    train = [s for s in specs if s.split in (None, "train")]
    if not train:
        return 0.0
    return float(np.mean([len(dm_alternatives(s, records_by_id)) for s in train]))


# validation

def validate_mixture_spec(spec: MixtureSpec, records_by_id: Dict[str, UtteranceRecord],
                          cfg: Optional[DatasetConfig] = None) -> List[str]:
    """Return every constraint the spec violates (empty when valid)."""
    cfg = cfg or DatasetConfig()
    violations = []
    target = records_by_id.get(spec.target_id)
    interference = records_by_id.get(spec.interference_id)
    if target is None or interference is None:
        return [f"unknown utterance id in {spec.mixture_id}"]

    if not target.attributes.differing(interference.attributes):
        violations.append("target and interference share all attributes")
    for name, value in (("target_lufs", spec.target_lufs), ("interference_lufs", spec.interference_lufs)):
        if not cfg.lufs_min <= value <= cfg.lufs_max:
            violations.append(f"{name}={value:.2f} outside [{cfg.lufs_min}, {cfg.lufs_max}]")
    if spec.onset < 0 or spec.onset > cfg.onset_max_fraction * target.n_samples:
        violations.append(f"onset {spec.onset} outside [0, {cfg.onset_max_fraction:g} x target length]")

    for clue in (spec.clue, spec.alt_clue):
        if clue is None or clue.kind != "type_ii":
            continue
        reference = records_by_id.get(clue.reference_id)
        attribute = clue.highlighted_attribute
        if reference is None:
            violations.append(f"unknown reference {clue.reference_id}")
            continue
        if reference.id == target.id:
            violations.append("reference is the target utterance")
        if reference.attributes.get(attribute) != target.attributes.get(attribute):
            violations.append(f"reference {attribute} differs from target")
        if interference.attributes.get(attribute) == target.attributes.get(attribute):
            violations.append(f"interference shares highlighted {attribute}")
    return violations


@dataclass
class AuditResult:
    n: int
    n_failed: int
    violations: Dict[str, List[str]]

    @property
    def pass_rate(self) -> float:
        return 1.0 if self.n == 0 else (self.n - self.n_failed) / self.n


def audit_mixture_specs(specs: Sequence[MixtureSpec], records_by_id: Dict[str, UtteranceRecord],
                        cfg: Optional[DatasetConfig] = None) -> AuditResult:
    violations = {}
    for spec in specs:
        found = validate_mixture_spec(spec, records_by_id, cfg)
        if found:
            violations[spec.mixture_id] = found
    return AuditResult(n=len(specs), n_failed=len(violations), violations=violations)


# synthesis

@lru_cache(maxsize=4096)
def _cached_wave(path: str) -> Waveform:
    return read_wav(path)


@lru_cache(maxsize=4096)
def _cached_lufs(path: str) -> float:
    return measure_lufs(_cached_wave(path))


@dataclass
class SynthesizedMixture:
    spec: MixtureSpec
    mixture: Waveform
    target_ref: Waveform
    interference_ref: Waveform
    clue_audio: Optional[Waveform]
    clipping_gain: float
    snr_lu: float
    energy_snr_db: float


def load_clue_audio(spec: MixtureSpec, records_by_id: Dict[str, UtteranceRecord]) -> Optional[Waveform]:
    clue = spec.clue_of("type_ii")
    if clue is None:
        return None
    return _cached_wave(records_by_id[clue.reference_id].path)


def synthesize_mixture(spec: MixtureSpec, records_by_id: Dict[str, UtteranceRecord]) -> SynthesizedMixture:
    """Rescale both sources to their loudness draws, mix at the onset, guard clipping."""
    try:
        target_rec = records_by_id[spec.target_id]
        interference_rec = records_by_id[spec.interference_id]
        target = rescale_to_lufs(_cached_wave(target_rec.path), spec.target_lufs,
                                 current=_cached_lufs(target_rec.path))
        interference = rescale_to_lufs(_cached_wave(interference_rec.path), spec.interference_lufs,
                                       current=_cached_lufs(interference_rec.path))
        mixed = mix_at_onset(target, interference, spec.onset)
        clue_audio = load_clue_audio(spec, records_by_id)
        energy = energy_snr_db(mixed.target, mixed.interference)
    except KeyError as e:
        raise DataError(f"{spec.mixture_id}: unknown utterance {e}") from e
    except StyleTSEError as e:
        raise type(e)(f"{spec.mixture_id}: {e}") from e

    return SynthesizedMixture(
        spec=spec,
        mixture=mixed.mixture,
        target_ref=mixed.target,
        interference_ref=mixed.interference,
        clue_audio=clue_audio,
        clipping_gain=mixed.clipping_gain,
        snr_lu=snr_lu(spec.target_lufs, spec.interference_lufs),
        energy_snr_db=energy,
    )


def write_mixture_metadata(path: str, specs: Iterable[MixtureSpec]):
    write_jsonl(path, (s.model_dump(mode="json") for s in specs))


def read_mixture_metadata(path: str) -> List[MixtureSpec]:
    if not os.path.isfile(path):
        raise FormatError(f"Mixture metadata not found: {path}")
    specs = []
    for row in read_jsonl(path):
        try:
            specs.append(MixtureSpec.model_validate(row))
        except PydanticValidationError as e:
            raise ValidationError(f"Invalid mixture record {row.get('mixture_id')}: {e}") from e
    return specs


# statistics

def mixture_statistics(specs: Sequence[MixtureSpec], records_by_id: Optional[Dict[str, UtteranceRecord]] = None,
                       cfg: Optional[DatasetConfig] = None) -> Dict[str, Any]:
    """Summary numbers for the dataset report."""
    cfg = cfg or DatasetConfig()
    if not specs:
        return {"n_mixtures": 0}
    snr = np.array([snr_lu(s.target_lufs, s.interference_lufs) for s in specs])
    lufs = np.array([v for s in specs for v in (s.target_lufs, s.interference_lufs)])
    ks = stats.kstest(lufs, "uniform", args=(cfg.lufs_min, cfg.lufs_max - cfg.lufs_min))
    counts, edges = np.histogram(snr, bins=np.arange(-8.0, 9.0, 1.0))

    report: Dict[str, Any] = {
        "n_mixtures": len(specs),
        "snr_lu_mean": float(snr.mean()),
        "snr_lu_std": float(snr.std()),
        "snr_lu_histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
        "lufs_ks_statistic": float(ks.statistic),
        "clue_kinds": _count(s.clue.kind for s in specs),
        "type_ii_available": sum(1 for s in specs if s.clue_of("type_ii") is not None),
        "length_classes": _count(c.length_class for s in specs for c in (s.clue, s.alt_clue)
                                 if c is not None and c.kind == "type_i"),
        "highlighted_attributes": _count(c.highlighted_attribute for s in specs for c in (s.clue, s.alt_clue)
                                         if c is not None and c.kind == "type_ii"),
        "splits": _count(s.split or "unsplit" for s in specs),
        "clipped": sum(1 for s in specs if s.clipping_gain < 1.0),
    }
    energy = [s.energy_snr_db for s in specs if s.energy_snr_db is not None]
    if energy:
        report["energy_snr_db_mean"] = float(np.mean(energy))
        report["energy_snr_db_std"] = float(np.std(energy))
    if records_by_id is not None:
        report["dm_alternatives_per_target"] = count_dm_alternatives(specs, records_by_id)
    return report


def _count(values: Iterable[Any]) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for value in values:
        counts[str(value)] = counts.get(str(value), 0) + 1
    return dict(sorted(counts.items()))
