"""Optimizers, loss interpolation, the multi-stage training drivers, and
evaluation.

The training protocol follows a two-phase schedule: a fixed-step phase, then
a phase whose step size decays by a constant factor after every epoch,
restarted from the best dev-PER model of the fixed phase.  Early stopping
returns the best dev-PER epoch overall.  Minibatch size is one utterance; an
optional thread pool accumulates gradients for groups of utterances at fixed
parameters with a deterministic merge order.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .losses import UnrepresentableSupervisionError, edit_distance
from .model import LossBundle, Model, compute_loss, decode_utterance

logger = logging.getLogger(__name__)

STAGES = ("enc-pretrain", "dec-frozen", "finetune", "end2end", "multitask")


@dataclass
class OptimizerState:
    kind: str = "sgd"                 # "sgd" or "rmsprop"
    step_size: float = 0.1
    clip: float = 5.0
    rms_decay: float = 0.9
    eps: float = 1e-8
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.step_size <= 0 or self.clip <= 0:
            raise ValueError("step size and clip threshold must be positive")


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_and_step(params: dict[str, np.ndarray],
                  grads: dict[str, np.ndarray],
                  opt: OptimizerState) -> dict:
    """Scale the global gradient 2-norm to the clip threshold, then update.

    Non-finite gradients skip the update and report it.  Returns a small info
    dict (grad norm, applied scale, skipped flag).
    """
    norm = global_grad_norm(grads)
    if not np.isfinite(norm):
        logger.warning("skipping update: non-finite gradient norm")
        return {"norm": norm, "scale": 0.0, "skipped": True}
    scale = 1.0 if norm <= opt.clip else opt.clip / norm
    for name, p in params.items():
        if name not in grads:
            continue
        g = grads[name] * scale
        if opt.kind == "sgd":
            p -= opt.step_size * g
        else:
            v = opt.second_moment.get(name)
            if v is None:
                v = opt.second_moment[name] = np.zeros_like(p)
            v *= opt.rms_decay
            v += (1.0 - opt.rms_decay) * g * g
            p -= opt.step_size * g / np.sqrt(v + opt.eps)
    return {"norm": norm, "scale": scale, "skipped": False}


def multitask_loss(lam: float, seg: LossBundle,
                   enc: LossBundle) -> LossBundle:
    """Convex combination lam * seg + (1 - lam) * enc of values and of every
    named gradient, assembled exactly from the two bundles."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"interpolation weight {lam} outside [0, 1]")
    grads: dict[str, np.ndarray] = {}
    for name, g in seg.grads.items():
        grads[name] = lam * g
    for name, g in enc.grads.items():
        if name in grads:
            grads[name] = grads[name] + (1.0 - lam) * g
        else:
            grads[name] = (1.0 - lam) * g
    return LossBundle(value=lam * seg.value + (1.0 - lam) * enc.value,
                      grads=grads)


@dataclass
class TrainConfig:
    stage: str = "end2end"
    seg_loss: str = "mll"             # hinge | log | mll
    enc_loss: str = "ctc"             # ce | ctc
    lam: float = 1.0
    epochs_fixed: int = 5
    epochs_decay: int = 5
    step_size: float = 0.1
    decay: float = 0.75
    optimizer: str = "sgd"
    rms_step: float = 1e-4
    clip: float = 5.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda {self.lam} outside [0, 1]")
        if self.epochs_fixed < 0 or self.epochs_decay < 0:
            raise ValueError("epoch counts must be non-negative")


# the full-scale protocol, kept as a named profile; desk runs default to
# the shorter schedule in TrainConfig
FULL_PROFILE = {"epochs_fixed": 20, "epochs_decay": 20, "step_size": 0.1,
                "decay": 0.75, "clip": 5.0}


def _stage_losses(config: TrainConfig) -> tuple[str | None, str | None, float]:
    if config.stage == "enc-pretrain":
        return None, config.enc_loss, 0.0
    if config.stage == "multitask":
        return config.seg_loss, config.enc_loss, config.lam
    return config.seg_loss, None, 1.0


def _stage_trainable(config: TrainConfig) -> tuple[str, ...]:
    if config.stage == "enc-pretrain":
        return ("enc",)
    if config.stage == "dec-frozen":
        return ("dec",)
    return ("enc", "dec")


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.param_items()}


def _restore(model: Model, snapshot: dict[str, np.ndarray]) -> None:
    for name, arr in model.param_items():
        arr[...] = snapshot[name]


def _mean_loss(model: Model, dataset: Dataset, seg_loss, enc_loss, lam):
    total, count = 0.0, 0
    for utt in dataset.utterances:
        try:
            bundle = compute_loss(model, utt, seg_loss=seg_loss,
                                  enc_loss=enc_loss, lam=lam,
                                  need_grads=False)
        except UnrepresentableSupervisionError:
            continue
        total += bundle.value
        count += 1
    return total / max(count, 1)


def evaluate(model: Model, dataset: Dataset,
             collapse: np.ndarray | None = None,
             threads: int = 1) -> tuple[float, dict[str, list[int]]]:
    """Phone error rate and per-utterance decodes over a dataset.

    PER is total edit distance over total reference length, both computed on
    the evaluation-mapped alphabet when a collapse map is given.
    """
    def one(utt):
        return utt.utt_id, decode_utterance(model, utt.features)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            decoded = list(pool.map(one, dataset.utterances))
    else:
        decoded = [one(utt) for utt in dataset.utterances]

    def mapped(seq):
        if collapse is None:
            return list(seq)
        return [int(collapse[lab]) for lab in seq]

    total_edit, total_ref = 0, 0
    decodes = {}
    for (utt_id, hyp), utt in zip(decoded, dataset.utterances):
        decodes[utt_id] = hyp
        total_edit += edit_distance(mapped(hyp), mapped(utt.labels))
        total_ref += len(utt.labels)
    per = total_edit / max(total_ref, 1)
    return per, decodes


def run_stage(model: Model, config: TrainConfig, train_set: Dataset,
              dev_set: Dataset, metrics_path=None,
              collapse: np.ndarray | None = None,
              state_out: dict | None = None) -> list[dict]:
    """Train one stage in place and return the per-epoch metrics log.

    The model is left at the best dev-PER epoch (early stopping).  Parameters
    outside the stage's trainable partition are never touched.  When
    ``state_out`` is given, the final optimizer accumulators and RNG state
    are placed in it for checkpointing.
    """
    seg_loss, enc_loss, lam = _stage_losses(config)
    trainable = _stage_trainable(config)
    params = {name: arr for name, arr in model.param_items()
              if name.split(".", 1)[0] in trainable}
    step0 = config.step_size if config.optimizer == "sgd" else config.rms_step
    opt = OptimizerState(kind=config.optimizer, step_size=step0,
                         clip=config.clip)
    rng = np.random.default_rng(config.seed)

    best_per = np.inf
    best_snapshot = _snapshot(model)
    rows: list[dict] = []
    total_epochs = config.epochs_fixed + config.epochs_decay

    for epoch in range(total_epochs):
        if epoch == config.epochs_fixed and config.epochs_fixed > 0:
            # decay phase restarts from the best model seen so far
            _restore(model, best_snapshot)
        if epoch >= config.epochs_fixed:
            opt.step_size *= config.decay

        started = time.perf_counter()
        order = rng.permutation(len(train_set.utterances))
        train_loss, used, skipped = 0.0, 0, 0

        def one_grad(idx):
            utt = train_set.utterances[idx]
            drop_rng = np.random.default_rng(rng.integers(2 ** 63))
            return compute_loss(model, utt, seg_loss=seg_loss,
                                enc_loss=enc_loss, lam=lam, train=True,
                                rng=drop_rng, trainable=trainable)

        group = max(1, config.threads)
        for base in range(0, len(order), group):
            chunk = [int(i) for i in order[base:base + group]]
            bundles = []
            if config.threads > 1:
                # dropout streams must be drawn in utterance order first so
                # the result does not depend on thread scheduling
                seeds = [np.random.default_rng(rng.integers(2 ** 63))
                         for _ in chunk]

                def one_seeded(args):
                    idx, drop_rng = args
                    return compute_loss(
                        model, train_set.utterances[idx], seg_loss=seg_loss,
                        enc_loss=enc_loss, lam=lam, train=True, rng=drop_rng,
                        trainable=trainable)

                with ThreadPoolExecutor(max_workers=config.threads) as pool:
                    results = pool.map(_guarded(one_seeded),
                                       list(zip(chunk, seeds)))
                bundles = list(results)
            else:
                for idx in chunk:
                    try:
                        bundles.append(one_grad(idx))
                    except UnrepresentableSupervisionError as err:
                        logger.warning("skipping %s", err)
                        bundles.append(None)
            merged: dict[str, np.ndarray] = {}
            for bundle in bundles:           # fixed, in-order merge
                if bundle is None:
                    skipped += 1
                    continue
                train_loss += bundle.value
                used += 1
                for name, g in bundle.grads.items():
                    if name in merged:
                        merged[name] = merged[name] + g
                    else:
                        merged[name] = g
            if merged:
                clip_and_step(params, merged, opt)

        dev_loss = _mean_loss(model, dev_set, seg_loss, enc_loss, lam)
        dev_per, _ = evaluate(model, dev_set, collapse=collapse,
                              threads=config.threads)
        row = {
            "epoch": epoch,
            "stage": config.stage,
            "train_loss": train_loss / max(used, 1),
            "dev_loss": dev_loss,
            "dev_per": dev_per,
            "wall_time": time.perf_counter() - started,
            "step_size": opt.step_size,
            "skipped": skipped,
        }
        rows.append(row)
        if metrics_path is not None:
            with open(metrics_path, "a") as f:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        logger.info("epoch %d: train %.4f dev %.4f dev PER %.3f",
                    epoch, row["train_loss"], dev_loss, dev_per)
        if dev_per < best_per:
            best_per = dev_per
            best_snapshot = _snapshot(model)

    _restore(model, best_snapshot)
    if state_out is not None:
        state_out["optimizer"] = opt
        state_out["rng_state"] = rng.bit_generator.state
    return rows


def _guarded(fn):
    def wrapper(arg):
        try:
            return fn(arg)
        except UnrepresentableSupervisionError as err:
            logger.warning("skipping %s", err)
            return None
    return wrapper
