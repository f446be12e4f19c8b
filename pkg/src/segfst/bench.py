"""Wall-time measurement of the per-utterance gradient computation for each
loss, weight function, and encoder resolution.

The timed unit is the loss-gradient path from encoder outputs: scoring every
edge, evaluating the loss, and backpropagating edge gradients to the decoder
parameters and encoder outputs.  Encoder forward/backward time is reported
separately as a reference, mirroring how real-time factors are usually
quoted.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, encode, encoder_backward, init_encoder_params
from .gradcheck import _random_path
from .lattice import build_label_chain, build_segmental_space
from .losses import CostFunction, hinge_loss, log_loss, marginal_log_loss
from .weights import backprop_edges, init_fc_params, init_srnn_params, score_all_edges

LOSSES = ("hinge", "log", "mll")


@dataclass
class BenchRow:
    weightfn: str
    pyramid: bool
    loss: str
    seconds: float


def _median_time(fn, repeats: int) -> float:
    fn()                      # warmup
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def run_benchmark(num_frames: int = 96, input_dim: int = 8,
                  num_labels: int = 5, hidden_dim: int = 16,
                  repeats: int = 5, seed: int = 0
                  ) -> tuple[list[BenchRow], dict]:
    """Measure gradient wall time for every (weight fn, pyramid, loss) cell.

    The same input features are used throughout; the pyramid encoder reduces
    the lattice it feeds (and its duration cap) fourfold.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(num_frames, input_dim))
    rows: list[BenchRow] = []
    encoder_ref = {}

    for pyramid in (False, True):
        config = EncoderConfig(input_dim=input_dim, hidden_dim=hidden_dim,
                               num_layers=3, pyramid=pyramid)
        params = init_encoder_params(rng, config)
        enc_out, cache = encode(x, params, config)
        g_out = rng.normal(size=enc_out.h.shape)
        encoder_ref[pyramid] = _median_time(
            lambda: encoder_backward(
                params, encode(x, params, config)[1], g_out),
            repeats)

        max_duration = 4 if pyramid else 16
        space = build_segmental_space(enc_out.num_frames, num_labels,
                                      max_duration)
        truth = _random_path(space, rng, distinct_adjacent=True)
        cost = CostFunction.from_path(truth, space.num_frames)
        chain = build_label_chain(truth.labels, num_labels)
        enc_dim = enc_out.h.shape[1]
        weightfns = {
            "fc": init_fc_params(rng, num_labels, enc_dim, max_duration),
            "srnn": init_srnn_params(rng, num_labels, enc_dim, max_duration),
        }

        def gradient_pass(wparams, loss):
            table = score_all_edges(space, enc_out, wparams)
            if loss == "hinge":
                res = hinge_loss(space, table, truth, cost)
            elif loss == "log":
                res = log_loss(space, table, truth)
            else:
                res = marginal_log_loss(space, table, chain)
            backprop_edges(space, enc_out, wparams, res.grads)

        for name, wparams in weightfns.items():
            for loss in LOSSES:
                seconds = _median_time(
                    lambda: gradient_pass(wparams, loss), repeats)
                rows.append(BenchRow(weightfn=name, pyramid=pyramid,
                                     loss=loss, seconds=seconds))

    meta = {
        "num_frames": num_frames,
        "num_labels": num_labels,
        "encoder_backward_seconds": {
            "regular": encoder_ref[False],
            "pyramid": encoder_ref[True],
        },
    }
    return rows, meta


def bench_cell(rows: list[BenchRow], weightfn: str, pyramid: bool,
               loss: str) -> float:
    for row in rows:
        if (row.weightfn, row.pyramid, row.loss) == (weightfn, pyramid, loss):
            return row.seconds
    raise KeyError((weightfn, pyramid, loss))


def trend_report(rows: list[BenchRow]) -> list[tuple[str, bool]]:
    """The comparative findings the timing table is expected to support."""
    checks = []
    for fn in ("fc", "srnn"):
        for pyr in (False, True):
            h, l, m = (bench_cell(rows, fn, pyr, loss) for loss in LOSSES)
            tag = f"{fn}/{'pyramid' if pyr else 'regular'}"
            checks.append((f"{tag}: hinge < log loss", h < l))
            checks.append((f"{tag}: log loss < marginal log loss", l < m))
    for fn in ("fc", "srnn"):
        for loss in LOSSES:
            checks.append((
                f"{fn}/{loss}: pyramid < regular",
                bench_cell(rows, fn, True, loss)
                < bench_cell(rows, fn, False, loss)))
    for pyr in (False, True):
        for loss in LOSSES:
            checks.append((
                f"{'pyramid' if pyr else 'regular'}/{loss}: fc < srnn",
                bench_cell(rows, "fc", pyr, loss)
                < bench_cell(rows, "srnn", pyr, loss)))
    return checks
