"""Finite-difference verification suites for the analytic gradients.

Each suite draws random configurations, compares analytic gradients against
central finite differences on a sample of coordinates, and reports the worst
relative error.  The relative error uses a floored denominator
|a - f| / max(|a|, |f|, 1e-3), so near-zero gradient components are held to
an absolute standard where finite differences bottom out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dp import EdgeWeightTable, Path, edge_posteriors, forward_backward
from .encoder import (
    EncoderConfig,
    encode,
    encoded_length,
    encoder_backward,
    encoder_output_dim,
    init_encoder_params,
)
from .lattice import build_label_chain, build_segmental_space
from .losses import CostFunction, hinge_loss, log_loss, marginal_log_loss
from .model import ModelConfig, compute_loss, init_model
from .weights import (
    EncoderOutputs,
    backprop_edges,
    init_fc_params,
    init_srnn_params,
    score_all_edges,
)

COMPONENTS = ("dp", "losses", "weights", "encoder", "e2e")
DEFAULT_TOLERANCE = 1e-5
REL_ERR_FLOOR = 1e-3


@dataclass
class GradCheckResult:
    component: str
    max_rel_err: float
    trials: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def central_difference(fn, arr: np.ndarray, indices, step: float) -> np.ndarray:
    flat = arr.reshape(-1)
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        out[k] = (up - down) / (2.0 * step)
    return out


def max_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)),
                       REL_ERR_FLOOR)
    return float(np.max(np.abs(analytic - fd) / denom)) if len(fd) else 0.0


def _rel_err_vec(analytic, fd):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)),
                       REL_ERR_FLOOR)
    return np.abs(analytic - fd) / denom


def _compare(fn, arr, analytic, rng, max_coords, step):
    """Worst relative error over a coordinate sample.

    Coordinates that look bad at the base step are re-measured at smaller
    steps: a ReLU or argmax kink inside the difference window moves out of it
    as the step shrinks, while a genuinely wrong gradient stays wrong.
    """
    idx = rng.choice(arr.size, size=min(arr.size, max_coords), replace=False)
    ana = analytic.reshape(-1)[idx]
    err = _rel_err_vec(ana, central_difference(fn, arr, idx, step))
    for refined in (step / 10.0, step / 100.0, step / 1000.0):
        bad = np.nonzero(err > 1e-6)[0]
        if len(bad) == 0:
            break
        fd = central_difference(fn, arr, idx[bad], refined)
        err[bad] = np.minimum(err[bad], _rel_err_vec(ana[bad], fd))
    return float(err.max()) if len(err) else 0.0


def _random_space(rng, max_frames=6, max_labels=3, max_dur=3):
    t = int(rng.integers(2, max_frames + 1))
    labs = int(rng.integers(1, max_labels + 1))
    dur = int(rng.integers(1, max_dur + 1))
    return build_segmental_space(t, labs, dur)


def _random_path(space, rng, distinct_adjacent: bool = False) -> Path:
    edges = []
    v = space.initial
    prev_label = -1
    while v != space.final:
        options = space.out_edges[v]
        if distinct_adjacent:
            options = options[space.edge_label[options] != prev_label]
        e = int(rng.choice(options))
        edges.append(e)
        prev_label = int(space.edge_label[e])
        v = int(space.edge_head[e])
    return Path.from_edges(space, edges)


def check_dp(trials: int = 50, seed: int = 0,
             tolerance: float = DEFAULT_TOLERANCE) -> GradCheckResult:
    """Edge posteriors against finite differences of the log partition."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        space = _random_space(rng)
        table = EdgeWeightTable.from_values(
            rng.normal(size=space.num_edges))
        gamma = edge_posteriors(space, table, forward_backward(space, table))
        err = _compare(
            lambda: forward_backward(space, table).log_partition,
            table.values, gamma, rng, max_coords=20, step=1e-4)
        worst = max(worst, err)
    return GradCheckResult("dp", worst, trials, tolerance)


def check_losses(trials: int = 50, seed: int = 0,
                 tolerance: float = DEFAULT_TOLERANCE) -> GradCheckResult:
    """Hinge, log, and marginal log loss gradients w.r.t. edge weights."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        space = _random_space(rng)
        table = EdgeWeightTable.from_values(
            rng.normal(size=space.num_edges))
        truth = _random_path(space, rng)
        cost = CostFunction.from_path(truth, space.num_frames)
        chain = build_label_chain(truth.labels, space.num_labels)

        res = hinge_loss(space, table, truth, cost)
        worst = max(worst, _compare(
            lambda: hinge_loss(space, table, truth, cost).value,
            table.values, res.grads, rng, max_coords=15, step=1e-5))
        res = log_loss(space, table, truth)
        worst = max(worst, _compare(
            lambda: log_loss(space, table, truth).value,
            table.values, res.grads, rng, max_coords=15, step=1e-4))
        res = marginal_log_loss(space, table, chain)
        worst = max(worst, _compare(
            lambda: marginal_log_loss(space, table, chain).value,
            table.values, res.grads, rng, max_coords=15, step=1e-4))
    return GradCheckResult("losses", worst, trials, tolerance)


def check_weights(trials: int = 50, seed: int = 0,
                  tolerance: float = DEFAULT_TOLERANCE) -> GradCheckResult:
    """FC/SRNN backward passes: decoder params and encoder-output grads."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    enc_dim = 5
    for trial in range(trials):
        space = _random_space(rng, max_frames=6, max_labels=3, max_dur=3)
        enc = EncoderOutputs(h=rng.normal(size=(space.num_frames, enc_dim)))
        if trial % 2 == 0:
            params = init_fc_params(rng, space.num_labels, enc_dim,
                                    space.num_frames)
        else:
            params = init_srnn_params(rng, space.num_labels, enc_dim,
                                      space.num_frames, label_dim=4,
                                      dur_dim=3, hidden1=6, hidden2=6)
        g = rng.normal(size=space.num_edges)

        def objective():
            return float(score_all_edges(space, enc, params).values @ g)

        grads, dh = backprop_edges(space, enc, params, g)
        named = dict(grads.tensors())
        for name, arr in params.tensors():
            worst = max(worst, _compare(objective, arr, named[name], rng,
                                        max_coords=6, step=1e-4))
        worst = max(worst, _compare(objective, enc.h, dh, rng,
                                    max_coords=10, step=1e-4))
    return GradCheckResult("weights", worst, trials, tolerance)


def check_encoder(trials: int = 50, seed: int = 0,
                  tolerance: float = DEFAULT_TOLERANCE) -> GradCheckResult:
    """BPTT gradients for random small encoders (dropout off)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(trials):
        config = EncoderConfig(
            input_dim=3, hidden_dim=4,
            num_layers=int(rng.integers(1, 3)),
            pyramid=bool(rng.integers(0, 2)),
            subsample_mode="concat" if trial % 5 == 4 else "even")
        params = init_encoder_params(rng, config)
        t = int(rng.integers(2, 6))
        x = rng.normal(size=(t, 3))
        g = rng.normal(size=(encoded_length(t, config),
                             encoder_output_dim(config)))

        def objective():
            enc, _ = encode(x, params, config)
            return float((enc.h * g).sum())

        enc, cache = encode(x, params, config)
        grads, dx = encoder_backward(params, cache, g)
        named = dict(grads.tensors())
        for name, arr in params.tensors():
            worst = max(worst, _compare(objective, arr, named[name], rng,
                                        max_coords=5, step=1e-4))
        worst = max(worst, _compare(objective, x, dx, rng, max_coords=6,
                                    step=1e-4))
    return GradCheckResult("encoder", worst, trials, tolerance)


def check_end_to_end(trials: int = 50, seed: int = 0,
                     tolerance: float = DEFAULT_TOLERANCE,
                     weightfn: str = "srnn",
                     seg_loss: str | None = None) -> GradCheckResult:
    """Full-pipeline gradients: features -> encoder -> weight function ->
    lattice loss, checked for every parameter tensor (dropout off)."""
    from .data import Utterance

    rng = np.random.default_rng(seed)
    losses = ("hinge", "log", "mll") if seg_loss is None else (seg_loss,)
    worst = 0.0
    for trial in range(trials):
        config = ModelConfig(
            num_labels=int(rng.integers(2, 4)), input_dim=3,
            weightfn=weightfn, max_duration=3, hidden_dim=4,
            num_layers=int(rng.integers(1, 3)),
            label_dim=4, dur_dim=3, srnn_hidden=5)
        model = init_model(config, seed=int(rng.integers(2 ** 31)))
        # jitter every tensor: the zero-bias init point is non-generic (dead
        # ReLU units give exactly-zero segment scores, tying the hinge
        # argmax structurally); at a generic point ties have measure zero
        for _, arr in model.param_items():
            arr += 0.3 * rng.normal(size=arr.shape)
        t = int(rng.integers(4, 7))
        space = build_segmental_space(t, config.num_labels,
                                      config.max_duration)
        truth = _random_path(space, rng, distinct_adjacent=True)
        utt = Utterance(
            utt_id=f"g{trial}",
            features=rng.normal(size=(t, 3)),
            labels=truth.labels,
            segments=[(lab, s, e) for lab, (s, e)
                      in zip(truth.labels, truth.segments)],
        )
        loss_kind = losses[trial % len(losses)]

        def objective():
            return compute_loss(model, utt, seg_loss=loss_kind,
                                need_grads=False).value

        bundle = compute_loss(model, utt, seg_loss=loss_kind)
        named = dict(model.param_items())
        step = 1e-5 if loss_kind == "hinge" else 1e-4
        for name, grad in bundle.grads.items():
            worst = max(worst, _compare(objective, named[name], grad, rng,
                                        max_coords=4, step=step))
    return GradCheckResult("e2e", worst, trials, tolerance)


def run_component(component: str, trials: int = 50, seed: int = 0,
                  tolerance: float = DEFAULT_TOLERANCE) -> list[GradCheckResult]:
    if component == "all":
        results = []
        for name in COMPONENTS:
            results.extend(run_component(name, trials, seed, tolerance))
        return results
    if component == "dp":
        return [check_dp(trials, seed, tolerance)]
    if component == "losses":
        return [check_losses(trials, seed, tolerance)]
    if component == "weights":
        return [check_weights(trials, seed, tolerance)]
    if component == "encoder":
        return [check_encoder(trials, seed, tolerance)]
    if component == "e2e":
        return [check_end_to_end(trials, seed, tolerance, weightfn="fc"),
                check_end_to_end(trials, seed + 1, tolerance,
                                 weightfn="srnn")]
    raise ValueError(f"unknown component {component!r}")
