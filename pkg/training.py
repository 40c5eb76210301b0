"""
Training: SI-SDR objective, Adam, learning-rate schedule, batch assembly and
the two-stage regimen.

Stage 1 trains with both clue modalities (reference audio plus the Type II
prompt) at a fixed learning rate for a step budget. Stage 2 starts from the
stage-1 weights, samples the clue condition per item, enables dynamic
mixing and runs the plateau schedule for an epoch budget.
"""

import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from audio_dsp import Waveform
from clue_network import ClueBundle
from config import CLUE_CONDITIONS, SAMPLE_RATE, RunConfig, TrainConfig
from dataset import MixtureSpec, UtteranceRecord, dynamic_remix, synthesize_mixture
from errors import ConfigError, DataError, InputError, NumericError
from model import ModelBundle
from numerics import (
    ParameterSet, Tensor, constant, div, log, mean, mul, stable_key, sub, tsum,
)
from utils import append_jsonl, print_header, print_info, print_success, print_warning

# guards both terms of the SI-SDR ratio; caps a perfect estimate near 120 dB
SI_SDR_EPS = 1e-12
_DB = 10.0 / math.log(10.0)


# objective

def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB of one estimate against its reference."""
    est = np.asarray(estimate.samples if isinstance(estimate, Waveform) else estimate, dtype=np.float64)
    ref = np.asarray(reference.samples if isinstance(reference, Waveform) else reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise InputError(f"SI-SDR needs equal lengths, got {est.shape} and {ref.shape}")
    energy = float(np.dot(ref, ref))
    if energy <= SI_SDR_EPS:
        raise InputError("SI-SDR is undefined for a zero-energy reference")
    alpha = float(np.dot(est, ref)) / energy
    projection = alpha * ref
    noise = projection - est
    return 10.0 * math.log10((np.dot(projection, projection) + SI_SDR_EPS) / (np.dot(noise, noise) + SI_SDR_EPS))


def si_sdr_tensor(estimates: Tensor, references: np.ndarray) -> Tensor:
    """Differentiable per-item SI-SDR for [B, L] estimates against constant references."""
    references = np.asarray(references, dtype=np.float64)
    if estimates.shape != references.shape:
        raise InputError(f"SI-SDR needs equal shapes, got {estimates.shape} and {references.shape}")
    energy = (references ** 2).sum(axis=-1, keepdims=True)
    if np.any(energy <= SI_SDR_EPS):
        raise InputError("SI-SDR is undefined for a zero-energy reference")

    s = constant(references)
    alpha = div(tsum(mul(estimates, s), axis=-1, keepdims=True), constant(energy))
    projection = mul(alpha, s)
    noise = sub(projection, estimates)
    num = tsum(mul(projection, projection), axis=-1) + SI_SDR_EPS
    den = tsum(mul(noise, noise), axis=-1) + SI_SDR_EPS
    return mul(sub(log(num), log(den)), _DB)


def si_sdr_loss(estimates: Tensor, references: np.ndarray) -> Tensor:
    """Mean negative SI-SDR over the batch."""
    return mul(mean(si_sdr_tensor(estimates, references)), -1.0)


# optimizer

class Adam:
    """Bias-corrected Adam over a ParameterSet."""

    def __init__(self, params: ParameterSet, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def state_dict(self) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
        tables = {f"m.{k}": v for k, v in self.m.items()}
        tables.update({f"v.{k}": v for k, v in self.v.items()})
        header = {"step": self.step_count, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
        return tables, header

    def load_state_dict(self, tables: Dict[str, np.ndarray], header: Dict[str, Any]):
        for name, p in self.params.items():
            for prefix, store in (("m", self.m), ("v", self.v)):
                value = tables.get(f"{prefix}.{name}")
                if value is None or value.shape != p.shape:
                    raise ConfigError(f"Optimizer state for '{name}' is missing or mis-shaped")
                store[name] = np.array(value)
        self.step_count = int(header["step"])


def adam_step(optimizer: Adam, lr: float):
    optimizer.step(lr)


def clip_grad_norm(params: ParameterSet, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
    if not math.isfinite(total):
        raise NumericError("Non-finite gradient norm")
    if max_norm and total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


# schedule

@dataclass
class LRDecision:
    lr: float
    halved: bool = False
    stop: bool = False


def lr_schedule(epoch: int, val_history: Sequence[float], current_lr: float, cfg: TrainConfig,
                last_change_epoch: Optional[int] = None) -> LRDecision:
    """Halve the rate when validation loss stalls for ``plateau_patience`` epochs.

    Only epochs after ``plateau_start_epoch`` count toward a stall. A stall
    means none of the last ``plateau_patience`` values improves on the best
    earlier value by more than ``plateau_threshold``. The rate never drops
    below ``lr_floor``; reaching it raises the stop flag.

    Args:
        epoch: The epoch just finished (1-based); ``val_history[-1]`` belongs to it.
        val_history: Validation losses in epoch order.
        current_lr: Rate used for the finished epoch.
        cfg: Training settings.
        last_change_epoch: Epoch of the last halving, if any.
    """
    patience = cfg.plateau_patience
    if epoch - patience + 1 <= cfg.plateau_start_epoch:
        return LRDecision(current_lr)
    if last_change_epoch is not None and epoch - last_change_epoch < patience:
        return LRDecision(current_lr)
    if len(val_history) <= patience:
        return LRDecision(current_lr)

    best_prior = min(val_history[:-patience])
    recent = val_history[-patience:]
    if any(v < best_prior - cfg.plateau_threshold for v in recent):
        return LRDecision(current_lr)

    new_lr = current_lr / 2.0
    if new_lr < cfg.lr_floor:
        return LRDecision(cfg.lr_floor, halved=True, stop=True)
    return LRDecision(new_lr, halved=True)


# clue conditions and batches

def sample_clue_condition(rng: np.random.Generator, cfg: TrainConfig) -> str:
    """text_audio : text_only : audio_only drawn by ``clue_ratio`` (stage 2 only)."""
    if cfg.stage == 1:
        return "text_audio"
    weights = np.asarray(cfg.clue_ratio, dtype=np.float64)
    return CLUE_CONDITIONS[int(rng.choice(len(CLUE_CONDITIONS), p=weights / weights.sum()))]


def item_rng(seed: int, mixture_id: str, epoch: int) -> np.random.Generator:
    """Per-item stream so results do not depend on batch composition or order."""
    return np.random.default_rng([seed, stable_key(mixture_id), epoch])


def clue_bundle_for(spec: MixtureSpec, clue_audio: Optional[Waveform], condition: str,
                    stage: int = 2) -> Tuple[Optional[ClueBundle], str]:
    """Clue bundle for a condition, with the condition actually realized.

    Audio conditions need a Type II clue; without one they fall back to the
    Type I text. Stage 1 uses the reference audio with its Type II prompt and
    has no fallback (None is returned).
    """
    type_i = spec.clue_of("type_i")
    type_ii = spec.clue_of("type_ii")
    has_reference = type_ii is not None and clue_audio is not None

    if stage == 1:
        if not has_reference:
            return None, "none"
        return ClueBundle(audio=clue_audio, text=type_ii.text), "text_audio"

    if condition in ("text_audio", "audio_only") and has_reference:
        if condition == "text_audio":
            return ClueBundle(audio=clue_audio, text=type_ii.text), "text_audio"
        return ClueBundle(audio=clue_audio), "audio_only"
    text = type_i.text if type_i is not None else type_ii.text
    return ClueBundle(text=text), "text_only"


def _crop(samples: np.ndarray, length: int, offset: int) -> np.ndarray:
    return samples[offset:offset + length]


@dataclass
class Batch:
    mixture_ids: List[str]
    mixtures: np.ndarray
    targets: np.ndarray
    bundles: List[ClueBundle]
    conditions: List[str]
    skipped: List[str] = field(default_factory=list)
    dm_swaps: int = 0

    def __len__(self) -> int:
        return len(self.mixture_ids)


def build_batch(specs: Sequence[MixtureSpec], records_by_id: Dict[str, UtteranceRecord], cfg: TrainConfig,
                epoch: int, conditions: Optional[Sequence[str]] = None, dm: Optional[bool] = None,
                onset_max_fraction: float = 0.5) -> Batch:
    """Synthesize, remix, crop and attach clues for one batch.

    Every signal is cut to a common length: the shortest item, capped at
    ``max_signal_s``. Mixture and target share one random offset per item.
    Items shorter than ``min_signal_s`` are skipped.
    """
    dm = cfg.effective_dm if dm is None else dm
    max_len = int(round(cfg.max_signal_s * SAMPLE_RATE))
    min_len = int(round(cfg.min_signal_s * SAMPLE_RATE))

    items = []
    skipped = []
    dm_swaps = 0
    for i, spec in enumerate(specs):
        rng = item_rng(cfg.seed, spec.mixture_id, epoch)
        if dm and spec.split == "train":
            remixed = dynamic_remix(spec, records_by_id, rng, onset_max_fraction)
            dm_swaps += remixed is not spec
            spec = remixed
        condition = conditions[i] if conditions is not None else sample_clue_condition(rng, cfg)

        synth = synthesize_mixture(spec, records_by_id)
        if len(synth.mixture) < min_len:
            print_warning(f"Skipping {spec.mixture_id}: {len(synth.mixture) / SAMPLE_RATE:.2f}s is shorter than {cfg.min_signal_s}s")
            skipped.append(spec.mixture_id)
            continue
        bundle, realized = clue_bundle_for(spec, synth.clue_audio, condition, cfg.stage)
        if bundle is None:
            print_info(f"Skipping {spec.mixture_id}: no reference clue for stage-1 training")
            skipped.append(spec.mixture_id)
            continue
        items.append((spec, synth, bundle, realized, rng))

    if not items:
        return Batch([], np.zeros((0, 0)), np.zeros((0, 0)), [], [], skipped, dm_swaps)

    length = min(min(len(s.mixture), max_len) for _, s, _, _, _ in items)
    mixtures, targets, bundles, realized_conditions = [], [], [], []
    for spec, synth, bundle, realized, rng in items:
        offset = int(rng.integers(0, len(synth.mixture) - length + 1))
        mixtures.append(_crop(synth.mixture.samples, length, offset))
        targets.append(_crop(synth.target_ref.samples, length, offset))
        if bundle.audio is not None and len(bundle.audio) > max_len:
            clue_offset = int(rng.integers(0, len(bundle.audio) - max_len + 1))
            bundle = ClueBundle(audio=Waveform(_crop(bundle.audio.samples, max_len, clue_offset)), text=bundle.text)
        bundles.append(bundle)
        realized_conditions.append(realized)

    return Batch(
        mixture_ids=[spec.mixture_id for spec, _, _, _, _ in items],
        mixtures=np.stack(mixtures),
        targets=np.stack(targets),
        bundles=bundles,
        conditions=realized_conditions,
        skipped=skipped,
        dm_swaps=dm_swaps,
    )


# loop

@dataclass
class TrainResult:
    last_checkpoint: str
    best_checkpoint: Optional[str]
    metrics: List[Dict[str, Any]]
    step_losses: List[float]
    stop_reason: str


def checkpoint_path(checkpoint_dir: str, stage: int, kind: str) -> str:
    return os.path.join(checkpoint_dir, f"stage{stage}_{kind}.ckpt")


def train_step(model: ModelBundle, optimizer: Adam, batch: Batch, lr: float, grad_clip: float) -> float:
    model.params.zero_grad()
    loss = si_sdr_loss(model.forward(batch.mixtures, batch.bundles), batch.targets)
    loss.backward()
    clip_grad_norm(model.params, grad_clip)
    adam_step(optimizer, lr)
    return loss.item()


def validation_loss(model: ModelBundle, specs: Sequence[MixtureSpec], records_by_id: Dict[str, UtteranceRecord],
                    cfg: TrainConfig) -> Optional[float]:
    """Mean loss over the validation specs with fixed (epoch 0) crops and conditions."""
    losses = []
    for start in range(0, len(specs), cfg.batch_size):
        batch = build_batch(specs[start:start + cfg.batch_size], records_by_id, cfg, epoch=0, dm=False)
        if len(batch):
            loss = si_sdr_loss(model.forward(batch.mixtures, batch.bundles), batch.targets)
            losses.append((loss.item(), len(batch)))
    if not losses:
        return None
    return sum(l * n for l, n in losses) / sum(n for _, n in losses)


def run_training(config: RunConfig, specs: Sequence[MixtureSpec], records_by_id: Dict[str, UtteranceRecord],
                 model: Optional[ModelBundle] = None, resume: Optional[str] = None,
                 metrics_path: Optional[str] = None) -> TrainResult:
    """Run one training stage.

    Args:
        config: Resolved run configuration; ``config.train.stage`` selects the stage.
        specs: Mixture specs with splits assigned.
        records_by_id: Corpus records.
        model: Model to train. Stage 1 builds one from the config when None;
            stage 2 loads the stage-1 checkpoint.
        resume: Checkpoint of this stage to continue from.
        metrics_path: JSONL metrics log. Defaults under ``paths.output_dir``.

    Returns:
        Checkpoint paths, per-epoch metrics and per-step losses.
    """
    cfg = config.train
    stage = cfg.stage
    ckpt_dir = config.paths.checkpoint_dir
    metrics_path = metrics_path or os.path.join(config.paths.output_dir, f"train_stage{stage}_metrics.jsonl")

    optimizer_tables, optimizer_header, cursor = None, None, {}
    if resume:
        model, header, optimizer_tables = ModelBundle.load(resume)
        optimizer_header = header.get("optimizer")
        cursor = header.get("extra", {})
        if cursor.get("stage") != stage:
            raise ConfigError(f"{resume} is a stage-{cursor.get('stage')} checkpoint, not stage {stage}")
        print_info(f"Resuming stage {stage} from step {cursor.get('step')}")
    elif stage == 2:
        stage1 = cfg.stage1_checkpoint or checkpoint_path(ckpt_dir, 1, "last")
        if not os.path.isfile(stage1):
            raise ConfigError(f"Stage 2 needs a stage-1 checkpoint; none at {stage1}")
        model, _, _ = ModelBundle.load(stage1)
    elif model is None:
        model = ModelBundle(config.sep, config.clue, seed=cfg.seed)

    optimizer = Adam(model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    if optimizer_header is not None:
        optimizer.load_state_dict(optimizer_tables, optimizer_header)

    train_specs = [s for s in specs if s.split == "train"][:cfg.max_train_mixtures]
    val_specs = [s for s in specs if s.split == "dev"][:cfg.max_val_mixtures]
    if not train_specs:
        raise ConfigError("No training mixtures (split 'train' is empty)")

    lr = cursor.get("lr", cfg.lr_stage1 if stage == 1 else cfg.lr_stage2)
    epoch = cursor.get("epoch", 0)
    step = cursor.get("step", 0)
    val_history: List[float] = list(cursor.get("val_history", []))
    last_change = cursor.get("last_change_epoch")
    best_val = cursor.get("best_val")
    # set when the checkpoint was written part-way through an epoch
    resume_at = cursor.get("batch_start")
    partial = cursor.get("partial_epoch") or {}
    metrics: List[Dict[str, Any]] = []
    step_losses: List[float] = []
    stop_reason = "budget"
    last_ckpt = checkpoint_path(ckpt_dir, stage, "last")
    best_ckpt = None

    def make_cursor(batch_start=None, epoch_state=None) -> Dict[str, Any]:
        return {"stage": stage, "epoch": epoch, "step": step, "lr": lr, "val_history": val_history,
                "last_change_epoch": last_change, "best_val": best_val,
                "batch_start": batch_start, "partial_epoch": epoch_state}

    print_header(f"Training stage {stage}: {len(train_specs)} train / {len(val_specs)} dev mixtures")
    if resume_at is not None:
        print_info(f"Continuing epoch {epoch} at batch offset {resume_at}")
    while True:
        if resume_at is None:
            if stage == 1 and step >= cfg.stage1_steps:
                break
            if stage == 2 and epoch >= cfg.stage2_epochs:
                break
            epoch += 1
            first_batch = 0
            counts = {c: 0 for c in CLUE_CONDITIONS}
            epoch_losses = []
            dm_swaps = 0
        else:
            first_batch = resume_at
            counts = {c: int(partial.get("counts", {}).get(c, 0)) for c in CLUE_CONDITIONS}
            epoch_losses = list(partial.get("losses", []))
            dm_swaps = int(partial.get("dm_swaps", 0))
            resume_at = None
        order = np.random.default_rng([cfg.seed, stage, epoch]).permutation(len(train_specs))

        stopped_at = None
        for start in tqdm(range(first_batch, len(order), cfg.batch_size), desc=f"Stage {stage} epoch {epoch}",
                          leave=False):
            if stage == 1 and step >= cfg.stage1_steps:
                stopped_at = start
                break
            batch_specs = [train_specs[i] for i in order[start:start + cfg.batch_size]]
            batch = build_batch(batch_specs, records_by_id, cfg, epoch)
            if not len(batch):
                continue
            loss = train_step(model, optimizer, batch, lr, cfg.grad_clip)
            step += 1
            step_losses.append(loss)
            epoch_losses.append(loss)
            dm_swaps += batch.dm_swaps
            for condition in batch.conditions:
                counts[condition] += 1
            if cfg.save_every_steps and step % cfg.save_every_steps == 0:
                model.save(last_ckpt, optimizer, make_cursor(
                    start + cfg.batch_size, {"losses": epoch_losses, "counts": counts, "dm_swaps": dm_swaps}))

        if not epoch_losses:
            raise DataError(f"Stage {stage} epoch {epoch} had no usable training batch")
        complete = stopped_at is None
        val_loss = validation_loss(model, val_specs, records_by_id, cfg) if val_specs else None
        train_loss = float(np.mean(epoch_losses))
        if val_loss is not None and complete:
            val_history.append(val_loss)

        row = {"epoch": epoch, "stage": stage, "lr": lr, "steps": step, "train_loss": train_loss,
               "val_loss": val_loss, "clue_condition_counts": counts, "dm_swaps": dm_swaps, "complete": complete}
        metrics.append(row)
        append_jsonl(metrics_path, row)
        print_info(f"epoch {epoch}: train {train_loss} / val {val_loss} / lr {lr:.2e}")

        stop = False
        if stage == 2 and val_loss is not None and complete:
            decision = lr_schedule(epoch, val_history, lr, cfg, last_change)
            if decision.halved:
                last_change = epoch
                print_info(f"Validation loss stalled; learning rate {lr:.2e} -> {decision.lr:.2e}")
            lr = decision.lr
            stop = decision.stop

        if val_loss is not None and (best_val is None or val_loss < best_val):
            best_val = val_loss
            best_ckpt = checkpoint_path(ckpt_dir, stage, "best")
            model.save(best_ckpt, optimizer, make_cursor())
        if complete:
            model.save(last_ckpt, optimizer, make_cursor())
        else:
            model.save(last_ckpt, optimizer, make_cursor(
                stopped_at, {"losses": epoch_losses, "counts": counts, "dm_swaps": dm_swaps}))
            break

        if stop:
            stop_reason = "lr_floor"
            break

    print_success(f"Stage {stage} finished after {epoch} epochs / {step} steps ({stop_reason})")
    return TrainResult(last_ckpt, best_ckpt, metrics, step_losses, stop_reason)


# gradient verification

# Parameters added uniformly to every softmax input (attention key biases,
# the attention-pool score bias) get an identically zero gradient.
SHIFT_INVARIANT_SUFFIXES = (".k.bias", ".pool.b")
DEAD_GRAD_ATOL = 1e-10


def _tiny_extractor(seed: int):
    """A small model and a two-item batch (one audio+text clue, one text-only).

    Sizes keep central differences fast while giving the inter-chunk stage
    more than one chunk to attend over.
    """
    from config import ClueConfig, SepConfig

    rng = np.random.default_rng(seed)
    sep = SepConfig(n_channels=8, kernel_size=4, stride=2, chunk_size=6, n_repeats=1, heads=2, ff_dim=8)
    clue = ClueConfig(embed_dim=8, text_dim=16, hash_vocab_size=64)
    model = ModelBundle(sep, clue, seed=seed)
    mixtures = rng.standard_normal((2, 64)) * 0.1
    targets = rng.standard_normal((2, 64)) * 0.1
    bundles = [ClueBundle(audio=Waveform(rng.standard_normal(40) * 0.1), text="The happy one."),
               ClueBundle(text="Low-pitched speaker.")]
    return model, mixtures, targets, bundles


def dead_parameter_audit(seed: int = 0, exempt: Sequence[str] = SHIFT_INVARIANT_SUFFIXES) -> List[str]:
    """Names of parameters whose gradient is zero on a generic batch.

    Args:
        seed: Model and batch seed.
        exempt: Name suffixes whose gradient is zero by construction.

    Returns:
        Sorted parameter names, empty when every parameter is trained.
    """
    model, mixtures, targets, bundles = _tiny_extractor(seed)
    model.params.zero_grad()
    si_sdr_loss(model.forward(mixtures, bundles), targets).backward()
    return sorted(name for name in model.params.names()
                  if not name.endswith(tuple(exempt))
                  and float(np.max(np.abs(model.params[name].grad))) <= DEAD_GRAD_ATOL)


def gradcheck_suite(seed: int = 0, max_entries: int = 6) -> Dict[str, float]:
    """Relative gradient errors for the differentiable ops and the full extractor loss."""
    from numerics import (
        Parameter, affine, conv1d, conv_transpose1d, frame, grad_check, layer_norm, matmul,
        multi_head_attention, overlap_add, relu, sigmoid, softmax, swap_last,
    )

    rng = np.random.default_rng(seed)

    def p(name, *shape, low=-1.0, high=1.0):
        return Parameter(rng.uniform(low, high, size=shape), name)

    a, b = p("a", 3, 4), p("b", 3, 4)
    pos = p("pos", 3, 4, low=0.5, high=2.0)
    w, bias = p("w", 5, 4), p("bias", 5)
    x_conv, k_conv = p("x", 2, 3, 20), p("k", 4, 3, 6)
    y_conv, k_t = p("y", 2, 4, 7), p("kt", 4, 3, 6)
    seq = p("seq", 2, 5, 4)
    attn = {f"{proj}.{kind}": p(f"{proj}.{kind}", *((4, 4) if kind == "weight" else (4,)))
            for proj in ("q", "k", "v", "out") for kind in ("weight", "bias")}
    est = p("est", 2, 32)
    ref = rng.standard_normal((2, 32))

    checks = {
        "add": (lambda: a + b, [a, b]),
        "mul": (lambda: mul(a, b), [a, b]),
        "div": (lambda: div(a, pos), [a, pos]),
        "log": (lambda: log(pos), [pos]),
        "matmul": (lambda: matmul(a, swap_last(b)), [a, b]),
        "affine": (lambda: affine(a, w, bias), [a, w, bias]),
        "relu": (lambda: relu(pos - 0.25), [pos]),
        "sigmoid": (lambda: sigmoid(a), [a]),
        "softmax": (lambda: mul(softmax(a, axis=-1), b), [a]),
        "layer_norm": (lambda: mul(layer_norm(a, axis=-1), b), [a]),
        "conv1d": (lambda: conv1d(x_conv, k_conv, 2), [x_conv, k_conv]),
        "conv_transpose1d": (lambda: mul(conv_transpose1d(y_conv, k_t, 2), 1.0), [y_conv, k_t]),
        "frame_overlap_add": (lambda: mul(overlap_add(frame(x_conv, 6, 3, 5), 3, 18), 1.0), [x_conv]),
        "multi_head_attention": (lambda: mul(multi_head_attention(seq, seq, seq, 2, attn), 1.0),
                                 [seq] + list(attn.values())),
        "si_sdr_loss": (lambda: si_sdr_loss(est, ref), [est]),
    }

    report = {}
    for label, (fn, inputs) in checks.items():
        report[label] = grad_check(fn, inputs, max_entries=max_entries, seed=seed)

    model, mixtures, targets, bundles = _tiny_extractor(seed)
    checked = [model.params[name] for name in model.params.names()
               if name.endswith(("encoder.kernel", "decoder.kernel", "gate.weight", "pool.u", "inject.weight"))]
    report["extractor"] = grad_check(lambda: si_sdr_loss(model.forward(mixtures, bundles), targets), checked,
                                     max_entries=max_entries, seed=seed)
    return report
