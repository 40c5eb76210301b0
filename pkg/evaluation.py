"""
Evaluation: SI-SDRi, stratified reports, the fusion ablation harness and the
clue-discrimination diagnostic.
"""

import json
import os
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, model_validator

from audio_dsp import read_wav
from clue_network import ClueBundle
from config import ATTRIBUTES, CLUE_CONDITIONS, RunConfig
from dataset import (
    LENGTH_CLASSES, ClueTemplates, MixtureSpec, UtteranceRecord, load_templates, select_reference,
    synthesize_mixture,
)
from errors import ConfigError, PairingExhausted
from model import ModelBundle
from separation import extract
from training import clue_bundle_for, run_training, si_sdr
from utils import (
    get_rich_progress, print_header, print_info, print_report_table, print_success, print_warning, write_jsonl,
)

AUDIO_ONLY_FOOTER = (
    "Audio-only clues act as speaker enrollment, so audio-only results are "
    "reported as a single unstratified average."
)

# Published full-scale SI-SDRi (dB), carried in reports as metadata only
PUBLISHED_CLUE_RESULTS = {
    "text_only": {"long": 16.50, "mid": 16.32, "short": 16.41, "avg": 16.41},
    "text_audio": {"speaker_id": 15.76, "emotion": 15.95, "accent": 19.66, "pitch": 18.83, "gender": 18.25},
}
PUBLISHED_FUSION_RESULTS = {
    "gated": {"text_audio": 16.84, "text_only": 16.41, "audio_only": 15.72},
    "average": {"text_audio": 15.89, "text_only": 15.48, "audio_only": 14.78},
    "concat": {"text_audio": 15.84, "text_only": 15.46, "audio_only": 14.61},
    "gated_no_attnpool": {"text_audio": 14.86, "text_only": 14.95, "audio_only": 13.73},
}

ABLATION_ARMS = {
    "gated": {"fusion": "gated", "pooling": "attention"},
    "average": {"fusion": "average", "pooling": "attention"},
    "concat": {"fusion": "concat", "pooling": "attention"},
    "gated_no_attnpool": {"fusion": "gated", "pooling": "average"},
}


def si_sdri(mixture, estimate, reference) -> float:
    """SI-SDR of the estimate minus SI-SDR of the unprocessed mixture."""
    return si_sdr(estimate, reference) - si_sdr(mixture, reference)


# metric plug-ins

MetricFn = Callable[[np.ndarray, np.ndarray, np.ndarray], float]
METRICS: Dict[str, MetricFn] = {}


def register_metric(name: str):
    """Decorator adding ``fn(mixture, estimate, reference) -> float`` to the report."""
    def wrap(fn: MetricFn) -> MetricFn:
        METRICS[name] = fn
        return fn
    return wrap


@register_metric("si_sdr_est")
def _si_sdr_est(mixture, estimate, reference) -> float:
    return si_sdr(estimate, reference)


# records

class EvalRecord(BaseModel):
    mixture_id: str
    condition: str
    length_class: Optional[str] = None
    attribute: Optional[str] = None
    si_sdr_mix: float
    si_sdr_est: float
    si_sdri: float
    metrics: Dict[str, float] = {}

    @model_validator(mode="after")
    def _check_improvement(self):
        if self.si_sdri != self.si_sdr_est - self.si_sdr_mix:
            raise ValueError("si_sdri must equal si_sdr_est - si_sdr_mix")
        return self

    @classmethod
    def measure(cls, mixture_id: str, condition: str, mixture: np.ndarray, estimate: np.ndarray,
                reference: np.ndarray, length_class: Optional[str] = None,
                attribute: Optional[str] = None) -> "EvalRecord":
        sdr_mix = si_sdr(mixture, reference)
        sdr_est = si_sdr(estimate, reference)
        extra = {name: float(fn(mixture, estimate, reference)) for name, fn in METRICS.items()}
        return cls(mixture_id=mixture_id, condition=condition, length_class=length_class, attribute=attribute,
                   si_sdr_mix=sdr_mix, si_sdr_est=sdr_est, si_sdri=sdr_est - sdr_mix, metrics=extra)


def strata_for(condition: str) -> Tuple[Optional[str], Tuple[str, ...]]:
    """Record field and stratum labels used for a clue condition."""
    if condition == "text_only":
        return "length_class", LENGTH_CLASSES
    if condition == "text_audio":
        return "attribute", ATTRIBUTES
    return None, ()


def summarize(records: Sequence[EvalRecord]) -> Dict[str, Any]:
    """Mean SI-SDRi per condition and stratum; empty strata report n=0.

    The average of a condition is the item-weighted mean over all of its
    records. Records are sorted by mixture id first so the result does not
    depend on input order.
    """
    rows = [r.model_dump() for r in sorted(records, key=lambda r: (r.condition, r.mixture_id))]
    frame = pd.DataFrame(rows, columns=["mixture_id", "condition", "length_class", "attribute",
                                        "si_sdr_mix", "si_sdr_est", "si_sdri"])
    summary: Dict[str, Any] = {}
    for condition in CLUE_CONDITIONS:
        subset = frame[frame["condition"] == condition]
        field, labels = strata_for(condition)
        strata = {}
        if field is not None:
            grouped = subset.groupby(field)["si_sdri"].agg(["mean", "count"])
            for label in labels:
                if label in grouped.index:
                    strata[label] = {"mean": float(grouped.loc[label, "mean"]), "n": int(grouped.loc[label, "count"])}
                else:
                    strata[label] = {"mean": None, "n": 0}
        summary[condition] = {
            "strata": strata,
            "avg": {"mean": float(subset["si_sdri"].mean()) if len(subset) else None, "n": int(len(subset))},
        }
    return summary


def _cell(entry: Dict[str, Any]) -> str:
    if not entry["n"]:
        return "n=0"
    return f"{entry['mean']:.2f} (n={entry['n']})"


def format_report(summary: Dict[str, Any]) -> str:
    """Plain-text tables shaped like the published result tables."""
    parts = []
    for condition in CLUE_CONDITIONS:
        block = summary.get(condition)
        if block is None:
            continue
        row = {label: _cell(entry) for label, entry in block["strata"].items()}
        row["avg"] = _cell(block["avg"])
        frame = pd.DataFrame([row], index=[condition])
        parts.append(frame.to_string())
        if condition == "audio_only":
            parts.append(AUDIO_ONLY_FOOTER)
    return "\n\n".join(parts) + "\n"


@dataclass
class EvalResult:
    records: List[EvalRecord]
    summary: Dict[str, Any]
    skipped: Dict[str, int]
    text: str

    def report(self) -> Dict[str, Any]:
        metric_means = {
            name: float(np.mean([r.metrics[name] for r in self.records])) if self.records else None
            for name in METRICS
        }
        return {
            "summary": self.summary,
            "skipped": self.skipped,
            "metrics": metric_means,
            "footer": AUDIO_ONLY_FOOTER,
            "reference_full_scale": PUBLISHED_CLUE_RESULTS,
        }


def evaluate(model: ModelBundle, specs: Sequence[MixtureSpec], records_by_id: Dict[str, UtteranceRecord],
             conditions: Optional[Sequence[str]] = None, max_mixtures: Optional[int] = None,
             output_dir: Optional[str] = None, split: str = "test") -> EvalResult:
    """Extract every test mixture under each clue condition and report SI-SDRi.

    Args:
        model: Trained model.
        specs: Mixture specs; only ``split`` is used.
        records_by_id: Corpus records.
        conditions: Clue conditions to run. Defaults to all three.
        max_mixtures: Cap on test mixtures (taken in mixture-id order).
        output_dir: When given, writes eval_report.json, eval_report.txt and eval_records.jsonl.
        split: Split to evaluate.

    Returns:
        Per-item records, the stratified summary and the rendered text table.
    """
    conditions = list(conditions or CLUE_CONDITIONS)
    test = sorted((s for s in specs if s.split == split), key=lambda s: s.mixture_id)[:max_mixtures]
    if not test:
        print_warning(f"No {split} mixtures to evaluate")

    records: List[EvalRecord] = []
    skipped = {c: 0 for c in conditions}
    print_header(f"Evaluating {len(test)} mixtures under {', '.join(conditions)}")
    with get_rich_progress() as progress:
        eval_task = progress.add_task("Extracting...", total=len(test))
        for spec in test:
            synth = synthesize_mixture(spec, records_by_id)
            for condition in conditions:
                bundle, realized = clue_bundle_for(spec, synth.clue_audio, condition, stage=2)
                if realized != condition:
                    skipped[condition] += 1
                    continue
                estimate = extract(synth.mixture, bundle, model)
                type_i = spec.clue_of("type_i")
                type_ii = spec.clue_of("type_ii")
                records.append(EvalRecord.measure(
                    spec.mixture_id, condition, synth.mixture.samples, estimate.samples, synth.target_ref.samples,
                    length_class=type_i.length_class if condition == "text_only" and type_i is not None else None,
                    attribute=type_ii.highlighted_attribute if condition == "text_audio" else None,
                ))
            progress.update(eval_task, advance=1)

    summary = summarize(records)
    result = EvalResult(records, summary, skipped, format_report(summary))
    for condition, count in skipped.items():
        if count:
            print_info(f"{count} mixtures have no reference clue and were skipped for {condition}")

    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        write_jsonl(os.path.join(output_dir, "eval_records.jsonl"), (r.model_dump() for r in records))
        with open(os.path.join(output_dir, "eval_report.txt"), "w") as f:
            f.write(result.text)
        with open(os.path.join(output_dir, "eval_report.json"), "w") as f:
            json.dump(result.report(), f, indent=2, sort_keys=True)
    return result


# ablation

def arm_config(base: RunConfig, arm: str, arm_dir: str) -> RunConfig:
    """Copy of ``base`` that differs only in fusion/pooling flags, budgets and output paths."""
    if arm not in ABLATION_ARMS:
        raise ConfigError(f"Unknown ablation arm '{arm}'")
    paths = base.paths.model_copy(update={"checkpoint_dir": os.path.join(arm_dir, "checkpoints"),
                                          "output_dir": arm_dir})
    train = base.train.model_copy(update={"stage1_steps": base.eval.ablation_stage1_steps,
                                          "stage2_epochs": base.eval.ablation_stage2_epochs,
                                          "stage1_checkpoint": None})
    clue = base.clue.model_copy(update=ABLATION_ARMS[arm])
    return base.model_copy(update={"paths": paths, "train": train, "clue": clue})


def config_diff(a: RunConfig, b: RunConfig) -> Dict[str, Tuple[Any, Any]]:
    """Fields that differ between two configs, ignoring paths."""
    flat_a = pd.json_normalize(a.model_dump(mode="json", exclude={"paths"}), sep=".").iloc[0].to_dict()
    flat_b = pd.json_normalize(b.model_dump(mode="json", exclude={"paths"}), sep=".").iloc[0].to_dict()
    return {k: (flat_a.get(k), flat_b.get(k)) for k in sorted(set(flat_a) | set(flat_b))
            if flat_a.get(k) != flat_b.get(k)}


def ablation_harness(config: RunConfig, specs: Sequence[MixtureSpec], records_by_id: Dict[str, UtteranceRecord],
                     output_dir: str, arms: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    """Train and evaluate one toy model per fusion arm with a shared seed and budget.

    Returns:
        {"table": {arm: {condition: mean SI-SDRi}}, "config_diffs": ..., "reference_full_scale": ...}
    """
    arms = list(arms or config.eval.ablation_arms)
    table: Dict[str, Dict[str, Optional[float]]] = {}
    diffs = {}
    first_cfg = None
    for arm in arms:
        arm_dir = os.path.join(output_dir, f"ablation_{arm}")
        cfg = arm_config(config, arm, arm_dir)
        first_cfg = first_cfg or cfg
        diffs[arm] = {k: list(v) for k, v in config_diff(first_cfg, cfg).items()}
        print_header(f"Ablation arm: {arm}")

        stage1 = run_training(cfg.model_copy(update={"train": cfg.train.model_copy(update={"stage": 1})}),
                              specs, records_by_id)
        stage2_train = cfg.train.model_copy(update={"stage": 2, "stage1_checkpoint": stage1.last_checkpoint})
        stage2 = run_training(cfg.model_copy(update={"train": stage2_train}), specs, records_by_id)

        model, _, _ = ModelBundle.load(stage2.best_checkpoint or stage2.last_checkpoint)
        result = evaluate(model, specs, records_by_id, CLUE_CONDITIONS, config.eval.max_eval_mixtures,
                          output_dir=arm_dir, split=config.eval.split)
        table[arm] = {c: result.summary[c]["avg"]["mean"] for c in CLUE_CONDITIONS}

    rows = [[arm] + [table[arm][c] for c in CLUE_CONDITIONS] for arm in arms]
    print_report_table("Fusion ablation (SI-SDRi, dB)", ["arm"] + list(CLUE_CONDITIONS), rows)
    print_success(f"Ablation finished for {len(arms)} arms")
    return {"table": table, "config_diffs": diffs, "reference_full_scale": PUBLISHED_FUSION_RESULTS}


# clue discrimination

@dataclass
class DiscriminationPair:
    spec: MixtureSpec
    attribute: str
    target_clue: ClueBundle
    interference_clue: ClueBundle


def _side_clue(side: UtteranceRecord, other: UtteranceRecord, attribute: str, pool: Sequence[UtteranceRecord],
               templates: ClueTemplates, rng: np.random.Generator) -> Optional[ClueBundle]:
    """Reference audio plus prompt for ``attribute``; a short description when no reference exists."""
    try:
        reference = select_reference(side, other, pool, attribute, rng)
        return ClueBundle(audio=read_wav(reference.path), text=templates.render_type_ii(attribute))
    except PairingExhausted:
        pass
    if attribute == "speaker_id":
        return None
    return ClueBundle(text=templates.render_type_i(side.attributes, "short", prefer=[attribute]))


def build_discrimination_pairs(specs: Sequence[MixtureSpec], records_by_id: Dict[str, UtteranceRecord],
                               n_pairs: int, seed: int = 0, templates: Optional[ClueTemplates] = None,
                               max_differing: int = 1) -> List[DiscriminationPair]:
    """Test mixtures whose sources differ in at most ``max_differing`` attributes, with a clue for each side."""
    templates = templates or load_templates(RunConfig().data.templates_path)
    rng = np.random.default_rng(seed)
    pool = list(records_by_id.values())
    pairs = []
    for spec in sorted((s for s in specs if s.split == "test"), key=lambda s: s.mixture_id):
        if len(pairs) >= n_pairs:
            break
        target = records_by_id[spec.target_id]
        interference = records_by_id[spec.interference_id]
        differing = target.attributes.differing(interference.attributes)
        if not differing or len(differing) > max_differing:
            continue
        attribute = next((a for a in differing if a != "speaker_id"), differing[0])
        target_clue = _side_clue(target, interference, attribute, pool, templates, rng)
        interference_clue = _side_clue(interference, target, attribute, pool, templates, rng)
        if target_clue is None or interference_clue is None:
            continue
        pairs.append(DiscriminationPair(spec, attribute, target_clue, interference_clue))
    if len(pairs) < n_pairs:
        print_warning(f"Only {len(pairs)} discrimination pairs available (wanted {n_pairs})")
    return pairs


def _score(closer_to_clued: float, closer_to_other: float) -> float:
    if closer_to_clued > closer_to_other:
        return 1.0
    if closer_to_clued == closer_to_other:
        return 0.5
    return 0.0


def clue_discrimination(model: ModelBundle, pairs: Sequence[DiscriminationPair],
                        records_by_id: Dict[str, UtteranceRecord]) -> Optional[float]:
    """Fraction of extractions that land closer to the source their clue names.

    Each mixture is extracted twice, once per side's clue; a run is correct
    when its SI-SDR against the clued source beats that against the other.
    Ties count half.
    """
    if not pairs:
        return None
    total = 0.0
    for pair in pairs:
        synth = synthesize_mixture(pair.spec, records_by_id)
        target, interference = synth.target_ref.samples, synth.interference_ref.samples
        for bundle, clued, other in ((pair.target_clue, target, interference),
                                     (pair.interference_clue, interference, target)):
            estimate = extract(synth.mixture, bundle, model).samples
            total += _score(si_sdr(estimate, clued), si_sdr(estimate, other))
    accuracy = total / (2 * len(pairs))
    print_info(f"Clue discrimination accuracy {accuracy:.3f} over {len(pairs)} mixtures")
    return accuracy
