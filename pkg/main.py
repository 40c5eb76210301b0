import os
import sys
import argparse
import json

import numpy as np
from dotenv import load_dotenv

from audio_dsp import write_wav
from config import RunConfig, describe_config, resolve_config
from dataset import (
    audit_mixture_specs, generate_mixture_specs, ingest_manifest, make_splits, mixture_statistics,
    read_mixture_metadata, synthesize_mixture, write_mixture_metadata,
)
from errors import ConfigError, StyleTSEError
from numerics import set_precision
from utils import (
    print_error, print_header, print_info, print_panel, print_report_table, print_stats_table, print_success,
    print_warning, set_verbose, write_run_metadata,
)

# Load environment variables
load_dotenv()

GRADCHECK_TOLERANCE = 1e-4


def load_run_config(args) -> tuple:
    """Resolve the profile, environment and --set overrides for a command."""
    if args.verbose:
        set_verbose(True)
    config, overrides = resolve_config(args.profile, args.profiles_dir, args.set)
    set_precision(config.precision)
    if args.verbose:
        describe_config(config)
    return config, overrides


def load_records(config: RunConfig) -> dict:
    records = ingest_manifest(config.paths.manifest_path, config.data.min_duration_s, config.data.max_duration_s)
    return {r.id: r for r in records}


def record_run(config: RunConfig, overrides: dict, command: str, inputs, extra=None) -> str:
    path = write_run_metadata(config.paths.output_dir, command, config.model_dump(mode="json"),
                              overrides, inputs, extra)
    print_info(f"Run metadata written to {path}")
    return path


def synth_corpus_command(args):
    """Handle the synth-corpus command."""
    from toy_corpus import synth_toy_corpus

    config, overrides = load_run_config(args)
    out_dir = args.out_dir or config.paths.corpus_dir
    data = config.data
    print_header(f"Synthesizing toy corpus in {out_dir}")
    manifest_path, records = synth_toy_corpus(out_dir, data.n_speakers, data.utts_per_speaker,
                                              data.corpus_seed, data)

    # the freshly written manifest must pass its own validator
    rejections = []
    ingest_manifest(manifest_path, data.min_duration_s, data.max_duration_s, rejections)
    if rejections:
        print_warning(f"{len(rejections)} generated utterances failed validation")
    record_run(config, overrides, "synth_corpus", [manifest_path],
               {"n_records": len(records), "rejections": rejections})


def mixgen_command(args):
    """Handle the mixgen command."""
    config, overrides = load_run_config(args)
    data = config.data
    if args.manifest:
        config.paths.manifest = args.manifest
    out_dir = args.out_dir or config.paths.mixtures_dir
    config.paths.mixtures_dir = out_dir

    print_header(f"Generating mixtures from {config.paths.manifest_path}")
    records_by_id = load_records(config)
    specs, unpairable = generate_mixture_specs(list(records_by_id.values()), data,
                                               np.random.default_rng(data.mix_seed))
    specs = make_splits(specs, data.split_ratio, data.split_seed)

    synthesized = []
    for spec in specs:
        synth = synthesize_mixture(spec, records_by_id)
        synthesized.append(spec.model_copy(update={"clipping_gain": synth.clipping_gain,
                                                    "energy_snr_db": synth.energy_snr_db}))
        if args.write_wavs:
            split_dir = os.path.join(out_dir, spec.split)
            os.makedirs(split_dir, exist_ok=True)
            write_wav(os.path.join(split_dir, f"{spec.mixture_id}_mix.wav"), synth.mixture)
            write_wav(os.path.join(split_dir, f"{spec.mixture_id}_target.wav"), synth.target_ref)

    write_mixture_metadata(config.paths.mixtures_metadata_path, synthesized)
    audit = audit_mixture_specs(synthesized, records_by_id, data)
    stats = mixture_statistics(synthesized, records_by_id, data)
    stats["unpairable"] = unpairable
    stats["audit_pass_rate"] = audit.pass_rate

    with open(os.path.join(out_dir, "mixgen_stats.json"), "w") as f:
        json.dump({"stats": stats, "violations": audit.violations}, f, indent=2, sort_keys=True)
    print_stats_table("Mixture statistics", {k: v for k, v in stats.items() if not isinstance(v, dict)})
    if audit.n_failed:
        print_warning(f"{audit.n_failed} mixtures violate a constraint")
    print_success(f"Wrote {len(synthesized)} mixtures to {config.paths.mixtures_metadata_path}")
    record_run(config, overrides, "mixgen", [config.paths.manifest_path], {"stats": stats})


def train_command(args):
    """Handle the train command."""
    from training import run_training

    config, overrides = load_run_config(args)
    if args.stage:
        config.train.stage = args.stage
    if args.stage1_checkpoint:
        config.train.stage1_checkpoint = args.stage1_checkpoint

    records_by_id = load_records(config)
    specs = read_mixture_metadata(config.paths.mixtures_metadata_path)
    result = run_training(config, specs, records_by_id, resume=args.resume)
    lrs = [row["lr"] for row in result.metrics]
    record_run(config, overrides, f"train_stage{config.train.stage}",
               [config.paths.manifest_path, config.paths.mixtures_metadata_path],
               {"last_checkpoint": result.last_checkpoint, "best_checkpoint": result.best_checkpoint,
                "stop_reason": result.stop_reason, "lr_trajectory": lrs})


def extract_command(args):
    """Handle the extract command."""
    from audio_dsp import read_wav
    from clue_network import ClueBundle
    from model import ModelBundle
    from separation import extract

    config, overrides = load_run_config(args)
    model, _, _ = ModelBundle.load(args.model)
    mixture = read_wav(args.mixture)
    bundle = ClueBundle(audio=read_wav(args.clue_audio) if args.clue_audio else None, text=args.text)

    print_header(f"Extracting from {args.mixture} ({bundle.condition})")
    estimate = extract(mixture, bundle, model)
    write_wav(args.output, estimate)
    print_success(f"Estimate written to {args.output}")
    inputs = [args.mixture, args.model] + ([args.clue_audio] if args.clue_audio else [])
    record_run(config, overrides, "extract", inputs, {"text": args.text, "condition": bundle.condition})


def eval_command(args):
    """Handle the eval command."""
    from evaluation import build_discrimination_pairs, clue_discrimination, evaluate
    from model import ModelBundle

    config, overrides = load_run_config(args)
    records_by_id = load_records(config)
    specs = read_mixture_metadata(config.paths.mixtures_metadata_path)
    model, _, _ = ModelBundle.load(args.model)
    out_dir = args.out_dir or config.paths.output_dir

    result = evaluate(model, specs, records_by_id, config.eval.conditions, config.eval.max_eval_mixtures,
                      output_dir=out_dir, split=config.eval.split)
    print_panel(result.text.rstrip(), title="SI-SDRi (dB)")

    accuracy = None
    if config.eval.discrimination_pairs:
        pairs = build_discrimination_pairs(specs, records_by_id, config.eval.discrimination_pairs,
                                           seed=config.train.seed)
        accuracy = clue_discrimination(model, pairs, records_by_id)
    if accuracy is not None:
        print_success(f"Clue discrimination accuracy: {accuracy:.3f}")
    record_run(config, overrides, "eval", [args.model, config.paths.mixtures_metadata_path],
               {"summary": result.summary, "clue_discrimination": accuracy})


def ablate_command(args):
    """Handle the ablate command."""
    from evaluation import ablation_harness

    config, overrides = load_run_config(args)
    records_by_id = load_records(config)
    specs = read_mixture_metadata(config.paths.mixtures_metadata_path)
    out_dir = args.out_dir or config.paths.output_dir
    os.makedirs(out_dir, exist_ok=True)
    result = ablation_harness(config, specs, records_by_id, out_dir, args.arms)
    with open(os.path.join(out_dir, "ablation_report.json"), "w") as f:
        json.dump(result, f, indent=2, sort_keys=True)
    record_run(config, overrides, "ablate", [config.paths.mixtures_metadata_path], result)


def gradcheck_command(args):
    """Handle the gradcheck command. Returns the process exit code."""
    from training import dead_parameter_audit, gradcheck_suite

    config, overrides = load_run_config(args)
    if config.precision != "float64":
        raise ConfigError("gradcheck needs precision float64")
    report = gradcheck_suite(seed=config.train.seed, max_entries=args.entries)
    rows = [[name, err, "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"] for name, err in report.items()]
    print_report_table("Gradient check (relative error)", ["check", "error", "status"], rows)
    dead = dead_parameter_audit(seed=config.train.seed)
    record_run(config, overrides, "gradcheck", [],
               {"report": report, "tolerance": GRADCHECK_TOLERANCE, "dead_parameters": dead})

    failed = [name for name, err in report.items() if err > GRADCHECK_TOLERANCE]
    if failed:
        print_error(f"Gradient check failed for: {', '.join(failed)}")
    if dead:
        print_error(f"Parameters with no gradient: {', '.join(dead)}")
    if failed or dead:
        return 4
    print_success("All gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Style-aware target speech extraction with audio and text clues")
    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    # Options every command accepts
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", help="Run profile name (default: STYLETSE_PROFILE or 'default')")
    common.add_argument("--profiles-dir", help="Profiles directory")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one configuration field (repeatable)")
    common.add_argument("--verbose", action="store_true", help="Show info-level output")

    # Synth-corpus command
    synth_parser = subparsers.add_parser("synth-corpus", parents=[common], help="Write a synthetic labelled corpus")
    synth_parser.add_argument("--out-dir", help="Corpus directory (default: paths.corpus_dir)")

    # Mixgen command
    mixgen_parser = subparsers.add_parser("mixgen", parents=[common], help="Generate mixtures, splits and statistics")
    mixgen_parser.add_argument("--manifest", help="Manifest JSONL (default: paths.manifest_path)")
    mixgen_parser.add_argument("--out-dir", help="Mixture directory (default: paths.mixtures_dir)")
    mixgen_parser.add_argument("--write-wavs", action="store_true", help="Also write mixture and target WAVs")

    # Train command
    train_parser = subparsers.add_parser("train", parents=[common], help="Run one training stage")
    train_parser.add_argument("--stage", type=int, choices=[1, 2], help="Training stage")
    train_parser.add_argument("--stage1-checkpoint", help="Stage-1 checkpoint to start stage 2 from")
    train_parser.add_argument("--resume", help="Checkpoint of the same stage to resume")

    # Extract command
    extract_parser = subparsers.add_parser("extract", parents=[common], help="Extract one speaker from a mixture")
    extract_parser.add_argument("--mixture", required=True, help="Mixture WAV (8 kHz, 16-bit PCM)")
    extract_parser.add_argument("--text", help="Text clue")
    extract_parser.add_argument("--clue-audio", help="Reference audio clue WAV")
    extract_parser.add_argument("--model", required=True, help="Model checkpoint")
    extract_parser.add_argument("--output", default="estimate.wav", help="Output WAV")

    # Eval command
    eval_parser = subparsers.add_parser("eval", parents=[common], help="Stratified SI-SDRi report on the test split")
    eval_parser.add_argument("--model", required=True, help="Model checkpoint")
    eval_parser.add_argument("--out-dir", help="Report directory (default: paths.output_dir)")

    # Ablate command
    ablate_parser = subparsers.add_parser("ablate", parents=[common], help="Fusion ablation harness")
    ablate_parser.add_argument("--arms", nargs="+", help="Arms to run (default: eval.ablation_arms)")
    ablate_parser.add_argument("--out-dir", help="Output directory (default: paths.output_dir)")

    # Gradcheck command
    gradcheck_parser = subparsers.add_parser("gradcheck", parents=[common], help="Verify gradients against finite differences")
    gradcheck_parser.add_argument("--entries", type=int, default=6, help="Entries checked per input")

    return parser


def main(argv=None) -> int:
    """Main entry point for the script."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "extract" and not args.text and not args.clue_audio:
        parser.error("extract needs --text, --clue-audio, or both")

    try:
        if args.command == "synth-corpus":
            synth_corpus_command(args)
        elif args.command == "mixgen":
            mixgen_command(args)
        elif args.command == "train":
            train_command(args)
        elif args.command == "extract":
            extract_command(args)
        elif args.command == "eval":
            eval_command(args)
        elif args.command == "ablate":
            ablate_command(args)
        elif args.command == "gradcheck":
            return gradcheck_command(args)
        else:
            parser.print_help()
    except StyleTSEError as e:
        print_error(str(e))
        return e.exit_code
    except OSError as e:
        print_error(f"{e.strerror}: {e.filename}")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
