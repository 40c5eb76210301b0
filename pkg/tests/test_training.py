import json

import numpy as np
import pytest

import training
from config import ClueConfig, DatasetConfig, PathsConfig, RunConfig, TrainConfig
from dataset import ClueSpec, MixtureSpec, generate_mixture_specs, make_splits, synthesize_mixture
from errors import ConfigError, InputError
from model import ModelBundle
from numerics import Parameter, ParameterSet, constant, grad_check
from training import (
    Adam, build_batch, clue_bundle_for, item_rng, lr_schedule, sample_clue_condition, si_sdr, si_sdr_loss,
    si_sdr_tensor,
)


# SI-SDR

def test_si_sdr_known_values():
    assert si_sdr(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(0.0, abs=1e-9)
    assert si_sdr(np.array([1.0, 2.0, 3.0]), np.array([1.0, 1.0, 1.0])) == pytest.approx(7.7815, abs=1e-4)


def test_si_sdr_scale_invariance(rng):
    ref = rng.normal(size=500)
    est = ref + 0.3 * rng.normal(size=500)
    assert si_sdr(5.0 * est, ref) == pytest.approx(si_sdr(est, ref), abs=1e-9)


def test_si_sdr_with_orthogonal_noise_at_ten_db(rng):
    ref = np.sin(np.linspace(0, 40 * np.pi, 4000))
    noise = rng.normal(size=4000)
    noise -= noise @ ref / (ref @ ref) * ref
    noise *= np.sqrt((ref @ ref) / 10.0 / (noise @ noise))
    assert si_sdr(ref + noise, ref) == pytest.approx(10.0, abs=1e-6)


def test_si_sdr_rejects_zero_reference_and_mismatch():
    with pytest.raises(InputError):
        si_sdr(np.ones(4), np.zeros(4))
    with pytest.raises(InputError):
        si_sdr(np.ones(4), np.ones(5))


def test_tensor_si_sdr_matches_numpy(rng):
    refs = rng.normal(size=(3, 50))
    ests = refs + 0.5 * rng.normal(size=(3, 50))
    per_item = si_sdr_tensor(constant(ests), refs).data
    np.testing.assert_allclose(per_item, [si_sdr(e, r) for e, r in zip(ests, refs)])
    assert si_sdr_loss(constant(ests), refs).item() == pytest.approx(-per_item.mean())


def test_si_sdr_loss_gradient(rng):
    refs = rng.normal(size=(2, 12))
    est = Parameter(refs + rng.normal(size=(2, 12)), "est")
    assert grad_check(lambda: si_sdr_loss(est, refs), [est]) < 1e-4


# optimizer

def test_adam_first_step_and_zero_gradient():
    params = ParameterSet()
    w = params.create("w", (1,), init="zeros")
    optimizer = Adam(params)
    w.grad = np.ones(1)
    optimizer.step(0.1)
    assert w.data[0] == pytest.approx(-0.1, abs=1e-7)

    params = ParameterSet()
    z = params.create("z", (3,))
    before = z.data.copy()
    Adam(params).step(0.1)
    np.testing.assert_array_equal(z.data, before)


def test_adam_state_requires_every_parameter():
    params = ParameterSet()
    params.create("w", (2,))
    optimizer = Adam(params)
    with pytest.raises(ConfigError):
        optimizer.load_state_dict({}, {"step": 3})


# schedule

def _stalled(n, best_at):
    history = [1.0 - 0.01 * i for i in range(best_at)]
    return history + [history[-1]] * (n - best_at)


def test_schedule_waits_for_plateau_start():
    decision = lr_schedule(50, _stalled(50, 10), 1.5e-4, TrainConfig())
    assert (decision.lr, decision.halved) == (1.5e-4, False)


def test_schedule_halves_after_two_flat_epochs():
    decision = lr_schedule(72, _stalled(72, 70), 1.5e-4, TrainConfig())
    assert decision.halved and not decision.stop
    assert decision.lr == pytest.approx(7.5e-5)


def test_schedule_keeps_rate_while_improving():
    history = [1.0 - 0.01 * i for i in range(72)]
    assert not lr_schedule(72, history, 1.5e-4, TrainConfig()).halved


def test_schedule_waits_patience_after_a_change():
    assert not lr_schedule(73, _stalled(73, 70), 7.5e-5, TrainConfig(), last_change_epoch=72).halved


def test_schedule_stops_at_floor():
    decision = lr_schedule(90, _stalled(90, 70), 1.2e-6, TrainConfig())
    assert decision.lr == 1e-6
    assert decision.stop


# clue conditions

def test_condition_sampler_ratio():
    cfg = TrainConfig(stage=2)
    rng = np.random.default_rng(0)
    draws = [sample_clue_condition(rng, cfg) for _ in range(50000)]
    for condition, share in (("text_audio", 0.4), ("text_only", 0.4), ("audio_only", 0.2)):
        assert abs(draws.count(condition) / len(draws) - share) < 0.01


def test_stage_one_always_uses_both_clues():
    rng = np.random.default_rng(0)
    assert {sample_clue_condition(rng, TrainConfig(stage=1)) for _ in range(100)} == {"text_audio"}


def _spec(with_reference=True):
    type_i = ClueSpec(kind="type_i", text="The man sounds sad.", length_class="mid")
    type_ii = ClueSpec(kind="type_ii", text="Extract the speaker with the same emotion as the reference.",
                       reference_id="r", highlighted_attribute="emotion")
    return MixtureSpec(mixture_id="m", target_id="t", interference_id="i", target_lufs=-28.0,
                       interference_lufs=-30.0, onset=0, clue=type_i,
                       alt_clue=type_ii if with_reference else None)


def test_audio_conditions_fall_back_to_text():
    from audio_dsp import Waveform
    audio = Waveform(np.ones(100))

    bundle, realized = clue_bundle_for(_spec(), audio, "text_audio")
    assert realized == "text_audio"
    assert bundle.text.startswith("Extract the speaker with the same emotion")

    bundle, realized = clue_bundle_for(_spec(with_reference=False), None, "audio_only")
    assert realized == "text_only"
    assert bundle.text == "The man sounds sad."

    assert clue_bundle_for(_spec(with_reference=False), None, "text_audio", stage=1) == (None, "none")


# batches

def _split_specs(records, per_target=3):
    specs, _ = generate_mixture_specs(records, DatasetConfig(mixtures_per_target=per_target),
                                      np.random.default_rng(0))
    return make_splits(specs, seed=0)


def test_batch_crops_mixture_and_target_together(toy_records):
    by_id = {r.id: r for r in toy_records}
    specs = [s for s in _split_specs(toy_records) if s.split == "dev"][:3]
    cfg = TrainConfig(stage=2, max_signal_s=0.25, min_signal_s=0.1)
    batch = build_batch(specs, by_id, cfg, epoch=1, conditions=["text_audio", "text_only", "audio_only"])

    assert batch.mixtures.shape == (3, 2000)
    assert batch.targets.shape == (3, 2000)
    assert batch.dm_swaps == 0
    for spec, mixture, target, bundle in zip(specs, batch.mixtures, batch.targets, batch.bundles):
        synth = synthesize_mixture(spec, by_id)
        offset = int(item_rng(cfg.seed, spec.mixture_id, 1).integers(0, len(synth.mixture) - 2000 + 1))
        np.testing.assert_array_equal(mixture, synth.mixture.samples[offset:offset + 2000])
        np.testing.assert_array_equal(target, synth.target_ref.samples[offset:offset + 2000])
        if bundle.audio is not None:
            assert len(bundle.audio) <= 2000


def test_batch_skips_short_items(toy_records, monkeypatch):
    warnings = []
    monkeypatch.setattr(training, "print_warning", warnings.append)
    by_id = {r.id: r for r in toy_records}
    specs = _split_specs(toy_records)[:2]
    batch = build_batch(specs, by_id, TrainConfig(stage=2, min_signal_s=60.0), epoch=1, dm=False)
    assert len(batch) == 0
    assert batch.skipped == [s.mixture_id for s in specs]
    assert len(warnings) == 2


# training loop

def _run_config(tmp_path, tiny_sep, tiny_clue, **train):
    values = dict(batch_size=2, max_signal_s=0.25, min_signal_s=0.1, stage1_steps=2, max_train_mixtures=4,
                  max_val_mixtures=2)
    values.update(train)
    return RunConfig(paths=PathsConfig(checkpoint_dir=str(tmp_path / "ckpt"), output_dir=str(tmp_path / "runs")),
                     sep=tiny_sep, clue=tiny_clue, train=TrainConfig(**values))


def _referenced_specs(records):
    return [s for s in _split_specs(records) if s.split != "train" or s.clue_of("type_ii") is not None]


def test_stage_two_needs_stage_one_checkpoint(tmp_path, tiny_sep, tiny_clue, toy_records):
    config = _run_config(tmp_path, tiny_sep, tiny_clue, stage=2)
    with pytest.raises(ConfigError):
        training.run_training(config, _split_specs(toy_records), {r.id: r for r in toy_records})


def test_empty_training_split(tmp_path, tiny_sep, tiny_clue, toy_records):
    specs = [s for s in _split_specs(toy_records) if s.split != "train"]
    with pytest.raises(ConfigError):
        training.run_training(_run_config(tmp_path, tiny_sep, tiny_clue), specs, {r.id: r for r in toy_records})


def test_resumed_run_matches_uninterrupted_run(tmp_path, tiny_sep, tiny_clue, toy_records):
    by_id = {r.id: r for r in toy_records}
    specs = _referenced_specs(toy_records)

    straight = training.run_training(_run_config(tmp_path / "a", tiny_sep, tiny_clue, stage1_steps=4), specs, by_id)
    assert len(straight.step_losses) == 4
    assert all(np.isfinite(straight.step_losses))
    assert [row["epoch"] for row in straight.metrics] == [1, 2]
    assert straight.metrics[0]["clue_condition_counts"]["text_audio"] == 4

    first = training.run_training(_run_config(tmp_path / "b", tiny_sep, tiny_clue, stage1_steps=2), specs, by_id)
    resumed = training.run_training(_run_config(tmp_path / "b", tiny_sep, tiny_clue, stage1_steps=4), specs, by_id,
                                    resume=first.last_checkpoint)
    assert resumed.step_losses == straight.step_losses[2:]

    a, _, _ = ModelBundle.load(straight.last_checkpoint)
    b, _, _ = ModelBundle.load(resumed.last_checkpoint)
    for name in a.params.names():
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_stage_two_continues_from_stage_one(tmp_path, tiny_sep, tiny_clue, toy_records):
    by_id = {r.id: r for r in toy_records}
    specs = _referenced_specs(toy_records)
    training.run_training(_run_config(tmp_path, tiny_sep, tiny_clue), specs, by_id)

    result = training.run_training(_run_config(tmp_path, tiny_sep, tiny_clue, stage=2, stage2_epochs=1),
                                   specs, by_id)
    assert result.stop_reason == "budget"
    assert result.metrics[0]["stage"] == 2
    assert result.best_checkpoint is not None
    assert sum(result.metrics[0]["clue_condition_counts"].values()) == 4


def test_mismatched_resume_stage(tmp_path, tiny_sep, tiny_clue, toy_records):
    by_id = {r.id: r for r in toy_records}
    specs = _referenced_specs(toy_records)
    first = training.run_training(_run_config(tmp_path, tiny_sep, tiny_clue), specs, by_id)
    with pytest.raises(ConfigError):
        training.run_training(_run_config(tmp_path, tiny_sep, tiny_clue, stage=2), specs, by_id,
                              resume=first.last_checkpoint)


def test_gradcheck_suite_passes():
    report = training.gradcheck_suite(max_entries=3)
    assert "extractor" in report
    assert max(report.values()) < 1e-4


def test_adam_runs_are_deterministic():
    def run():
        params = ParameterSet(seed=2)
        w = params.create("w", (4,))
        optimizer = Adam(params)
        for step in range(3):
            w.grad = np.sin(w.data + step)
            training.adam_step(optimizer, 0.01)
        return w.data.tobytes(), optimizer.step_count

    assert run() == run()
    assert run()[1] == 3


def test_resume_inside_an_epoch(tmp_path, tiny_sep, tiny_clue, toy_records):
    by_id = {r.id: r for r in toy_records}
    specs = _referenced_specs(toy_records)

    straight = training.run_training(_run_config(tmp_path / "a", tiny_sep, tiny_clue, stage1_steps=4), specs, by_id)
    first = training.run_training(_run_config(tmp_path / "b", tiny_sep, tiny_clue, stage1_steps=3), specs, by_id)
    assert first.metrics[-1]["epoch"] == 2
    assert first.metrics[-1]["complete"] is False
    _, header, _ = ModelBundle.load(first.last_checkpoint)
    assert header["extra"]["batch_start"] == 2
    assert header["extra"]["partial_epoch"]["losses"] == first.step_losses[2:]

    resumed = training.run_training(_run_config(tmp_path / "b", tiny_sep, tiny_clue, stage1_steps=4), specs, by_id,
                                    resume=first.last_checkpoint)
    assert resumed.step_losses == straight.step_losses[3:]
    assert [row["epoch"] for row in resumed.metrics] == [2]
    assert resumed.metrics[0]["train_loss"] == straight.metrics[1]["train_loss"]
    assert resumed.metrics[0]["clue_condition_counts"] == straight.metrics[1]["clue_condition_counts"]

    a, _, _ = ModelBundle.load(straight.last_checkpoint)
    b, _, _ = ModelBundle.load(resumed.last_checkpoint)
    for name in a.params.names():
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_step_checkpoints_record_the_batch_cursor(tmp_path, tiny_sep, tiny_clue, toy_records, monkeypatch):
    saved = []
    original = ModelBundle.save

    def recording_save(self, path, optimizer=None, extra=None):
        saved.append(json.loads(json.dumps(extra)))
        original(self, path, optimizer, extra)

    monkeypatch.setattr(ModelBundle, "save", recording_save)
    by_id = {r.id: r for r in toy_records}
    config = _run_config(tmp_path, tiny_sep, tiny_clue, stage1_steps=2, save_every_steps=1)
    result = training.run_training(config, _referenced_specs(toy_records), by_id)

    assert saved[0]["step"] == 1
    assert saved[0]["batch_start"] == 2
    assert saved[0]["partial_epoch"]["losses"] == result.step_losses[:1]
    assert saved[-1]["batch_start"] is None


def test_loss_decreases_on_a_fixed_batch(eval_sep, tiny_clue, toy_records):
    by_id = {r.id: r for r in toy_records}
    specs = [s for s in _referenced_specs(toy_records) if s.split == "train"][:2]
    batch = build_batch(specs, by_id, TrainConfig(max_signal_s=0.5, min_signal_s=0.1), epoch=1)
    assert len(batch) == 2

    model = ModelBundle(eval_sep, tiny_clue, seed=0)
    optimizer = Adam(model.params)
    losses = [training.train_step(model, optimizer, batch, 1e-3, 5.0) for _ in range(50)]
    assert np.all(np.isfinite(losses))
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_every_parameter_is_trained():
    assert training.dead_parameter_audit() == []

    shift_invariant = training.dead_parameter_audit(exempt=())
    assert "clue.pool.b" in shift_invariant
    assert all(name.endswith(training.SHIFT_INVARIANT_SUFFIXES) for name in shift_invariant)
