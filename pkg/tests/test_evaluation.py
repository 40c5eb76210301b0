import json
import os

import numpy as np
import pytest
from pydantic import ValidationError

import evaluation
from config import DatasetConfig, RunConfig
from dataset import generate_mixture_specs, make_splits
from errors import ConfigError
from evaluation import (
    AUDIO_ONLY_FOOTER, DiscriminationPair, EvalRecord, _score, arm_config, build_discrimination_pairs,
    clue_discrimination, config_diff, evaluate, format_report, register_metric, si_sdri, summarize,
)
from model import ModelBundle


@pytest.fixture
def split_specs(toy_records):
    specs, _ = generate_mixture_specs(toy_records, DatasetConfig(mixtures_per_target=2), np.random.default_rng(0))
    return make_splits(specs, seed=0)


def _record(mixture_id, condition, value, **strata):
    return EvalRecord(mixture_id=mixture_id, condition=condition, si_sdr_mix=0.0, si_sdr_est=value,
                      si_sdri=value, **strata)


def test_si_sdri_of_unprocessed_mixture_is_zero(rng):
    mixture = rng.normal(size=300)
    reference = mixture + rng.normal(size=300)
    assert si_sdri(mixture, mixture, reference) == 0.0
    assert si_sdri(mixture, reference, reference) > 20.0


def test_record_improvement_must_be_consistent():
    with pytest.raises(ValidationError):
        EvalRecord(mixture_id="m", condition="text_only", si_sdr_mix=1.0, si_sdr_est=3.0, si_sdri=1.5)


def test_summary_reports_empty_strata():
    records = [
        _record("a", "text_only", 10.0, length_class="long"),
        _record("b", "text_only", 14.0, length_class="long"),
        _record("c", "text_only", 6.0, length_class="short"),
        _record("d", "text_audio", 8.0, attribute="emotion"),
    ]
    summary = summarize(records)
    assert summary["text_only"]["strata"]["long"] == {"mean": 12.0, "n": 2}
    assert summary["text_only"]["strata"]["mid"] == {"mean": None, "n": 0}
    assert summary["text_only"]["avg"] == {"mean": 10.0, "n": 3}
    assert summary["text_audio"]["strata"]["accent"]["n"] == 0
    assert summary["audio_only"] == {"strata": {}, "avg": {"mean": None, "n": 0}}


def test_summary_ignores_record_order(rng):
    records = [_record(f"m{i}", "text_only", float(v), length_class=["long", "mid", "short"][i % 3])
               for i, v in enumerate(rng.normal(size=30))]
    shuffled = [records[i] for i in rng.permutation(len(records))]
    assert summarize(shuffled) == summarize(records)


def test_report_has_audio_only_footer():
    text = format_report(summarize([_record("a", "audio_only", 4.0)]))
    assert "4.00 (n=1)" in text
    assert "n=0" in text
    assert text.rstrip().endswith(AUDIO_ONLY_FOOTER)


def test_registered_metric_appears_in_records(monkeypatch, rng):
    monkeypatch.setattr(evaluation, "METRICS", dict(evaluation.METRICS))

    @register_metric("peak")
    def peak(mixture, estimate, reference):
        return float(np.max(np.abs(estimate)))

    reference = rng.normal(size=100)
    record = EvalRecord.measure("m", "audio_only", reference + 1.0, reference * 2.0, reference)
    assert record.metrics["peak"] == pytest.approx(np.max(np.abs(reference * 2.0)))
    assert record.metrics["si_sdr_est"] == record.si_sdr_est


def test_arms_differ_only_in_fusion_and_pooling(tmp_path):
    base = RunConfig()
    gated = arm_config(base, "gated", str(tmp_path / "g"))
    no_pool = arm_config(base, "gated_no_attnpool", str(tmp_path / "n"))
    average = arm_config(base, "average", str(tmp_path / "a"))

    assert config_diff(gated, no_pool) == {"clue.pooling": ("attention", "average")}
    assert config_diff(gated, average) == {"clue.fusion": ("gated", "average")}
    assert gated.train.stage1_steps == base.eval.ablation_stage1_steps
    assert gated.paths.checkpoint_dir == os.path.join(str(tmp_path / "g"), "checkpoints")
    with pytest.raises(ConfigError):
        arm_config(base, "film", str(tmp_path))


def test_tie_scores_half():
    assert _score(3.0, 3.0) == 0.5
    assert _score(3.0, 1.0) == 1.0
    assert _score(1.0, 3.0) == 0.0


def test_evaluate_writes_reports(tmp_path, eval_sep, tiny_clue, toy_records, split_specs):
    model = ModelBundle(eval_sep, tiny_clue)
    by_id = {r.id: r for r in toy_records}
    out = str(tmp_path / "eval")
    result = evaluate(model, split_specs, by_id, conditions=["text_only", "audio_only"], max_mixtures=2,
                      output_dir=out)

    text_only = [r for r in result.records if r.condition == "text_only"]
    assert len(text_only) == 2
    assert all(r.length_class in ("long", "mid", "short") for r in text_only)
    assert len(result.records) + result.skipped["audio_only"] == 4
    assert AUDIO_ONLY_FOOTER in open(os.path.join(out, "eval_report.txt")).read()
    with open(os.path.join(out, "eval_report.json")) as f:
        report = json.load(f)
    assert report["summary"]["text_only"]["avg"]["n"] == 2
    assert len(open(os.path.join(out, "eval_records.jsonl")).read().splitlines()) == len(result.records)


def test_identical_clues_discriminate_at_chance(eval_sep, tiny_clue, toy_records, split_specs):
    by_id = {r.id: r for r in toy_records}
    pairs = build_discrimination_pairs(split_specs, by_id, n_pairs=2, max_differing=6)
    assert pairs
    for pair in pairs:
        assert pair.spec.split == "test"
        assert pair.attribute != "speaker_id" or pair.target_clue.audio is not None

    same = [DiscriminationPair(p.spec, p.attribute, p.target_clue, p.target_clue) for p in pairs]
    model = ModelBundle(eval_sep, tiny_clue)
    assert clue_discrimination(model, same, by_id) == pytest.approx(0.5)
    assert clue_discrimination(model, [], by_id) is None
