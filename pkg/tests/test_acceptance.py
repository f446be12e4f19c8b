"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines
as they complete.  The toy-learning criterion trains three models and takes
a few minutes; everything else finishes in seconds.
"""

import time

import numpy as np
import pytest

from segfst.data import SynthConfig, load_dataset, synth_dataset
from segfst.dp import EdgeWeightTable, forward_backward, max_path
from segfst.gradcheck import (
    check_encoder,
    check_end_to_end,
    check_losses,
    _random_path,
)
from segfst.lattice import build_ctc_space, build_segmental_space
from segfst.losses import (
    CostFunction,
    UnrepresentableSupervisionError,
    ctc_loss,
    hinge_loss,
)
from segfst.bench import run_benchmark, trend_report
from segfst.model import (
    ModelConfig,
    Model,
    compute_loss,
    init_model,
    save_model,
    warm_start_encoder,
)
from segfst.training import TrainConfig, evaluate, run_stage

from oracles import (
    brute_log_partition,
    brute_max_path,
    ctc_forward_log_loss,
)


def report(criterion: int, description: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    line = f"[{status}] criterion {criterion}: {description}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


def random_log_softmax(rng, shape):
    logits = rng.normal(size=shape)
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


class TestCriterion1OracleEquivalence:
    def test_inference_matches_enumeration(self):
        rng = np.random.default_rng(2024)
        started = time.perf_counter()
        worst_logz = 0.0
        for _ in range(500):
            t = int(rng.integers(1, 7))
            labs = int(rng.integers(1, 4))
            dur = int(rng.integers(1, 4))
            space = build_segmental_space(t, labs, dur)
            table = EdgeWeightTable.from_values(
                rng.normal(size=space.num_edges))
            path, score = max_path(space, table)
            bpath, bscore = brute_max_path(space, table.values)
            assert path.edges == bpath
            assert abs(score - bscore) <= 1e-12
            log_z = forward_backward(space, table).log_partition
            worst_logz = max(worst_logz,
                             abs(log_z - brute_log_partition(space,
                                                             table.values)))
        elapsed = time.perf_counter() - started
        report(1, "max path and log partition match exhaustive enumeration "
                  "on 500 random lattices",
               worst_logz <= 1e-10 and elapsed < 10.0,
               f"max |dlogZ| {worst_logz:.2e}, {elapsed:.1f}s")


class TestCriterion2GradientSuite:
    def test_all_gradient_suites(self):
        started = time.perf_counter()
        results = [
            check_losses(trials=50, seed=11, tolerance=1e-5),
            check_encoder(trials=50, seed=12, tolerance=1e-5),
            check_end_to_end(trials=50, seed=13, tolerance=1e-5,
                             weightfn="fc"),
            check_end_to_end(trials=50, seed=14, tolerance=1e-5,
                             weightfn="srnn"),
        ]
        elapsed = time.perf_counter() - started
        worst = max(r.max_rel_err for r in results)
        report(2, "hinge/log/mll edge gradients and end-to-end FC/SRNN + "
                  "encoder gradients match finite differences",
               all(r.passed for r in results) and elapsed < 120.0,
               f"max rel err {worst:.2e}, {elapsed:.1f}s")


class TestCriterion3CtcNormalization:
    def test_log_partition_is_zero(self):
        rng = np.random.default_rng(33)
        worst = 0.0
        for _ in range(100):
            t = int(rng.integers(1, 21))
            symbols = int(rng.integers(2, 7))
            space = build_ctc_space(t, symbols)
            log_probs = random_log_softmax(rng, (t, symbols))
            log_z = forward_backward(
                space, EdgeWeightTable.from_values(log_probs.ravel())
            ).log_partition
            worst = max(worst, abs(log_z))
        report(3, "locally normalized CTC spaces have log Z = 0",
               worst <= 1e-9, f"max |log Z| {worst:.2e}")


class TestCriterion4CtcEquivalence:
    def test_matches_textbook_recursion(self):
        rng = np.random.default_rng(44)
        worst = 0.0
        cases = 0
        while cases < 100:
            t = int(rng.integers(1, 21))
            labs = int(rng.integers(1, 6))
            k = int(rng.integers(1, min(t, 6) + 1))
            y = [int(rng.integers(labs))]
            attempts = 0
            while len(y) < k and attempts < 50:
                nxt = int(rng.integers(labs))
                attempts += 1
                if nxt != y[-1]:
                    y.append(nxt)
            log_probs = random_log_softmax(rng, (t, labs + 1))
            value = ctc_loss(log_probs, y, blank=labs).value
            oracle = ctc_forward_log_loss(log_probs, y, blank=labs)
            worst = max(worst, abs(value - oracle))
            cases += 1
        # repeated adjacent labels need the strict topology to match the
        # textbook recursion; the default follows the looser construction
        strict_cases = 0
        while strict_cases < 25:
            t = int(rng.integers(3, 21))
            labs = int(rng.integers(1, 6))
            k = int(rng.integers(2, 6))
            y = [int(rng.integers(labs)) for _ in range(k)]
            if all(a != b for a, b in zip(y, y[1:])):
                continue
            log_probs = random_log_softmax(rng, (t, labs + 1))
            try:
                value = ctc_loss(log_probs, y, blank=labs,
                                 strict_repeats=True).value
            except UnrepresentableSupervisionError:
                continue
            oracle = ctc_forward_log_loss(log_probs, y, blank=labs)
            worst = max(worst, abs(value - oracle))
            strict_cases += 1
        report(4, "marginal log loss on the CTC space equals the textbook "
                  "CTC recursion", worst <= 1e-8, f"max |d| {worst:.2e}")


class TestCriterion5HingeUpperBound:
    def test_decode_cost_bounded(self):
        rng = np.random.default_rng(55)
        ok = True
        for _ in range(200):
            t = int(rng.integers(1, 7))
            labs = int(rng.integers(1, 4))
            dur = int(rng.integers(1, 4))
            space = build_segmental_space(t, labs, dur)
            table = EdgeWeightTable.from_values(
                rng.normal(size=space.num_edges))
            truth = _random_path(space, rng)
            cost = CostFunction.from_path(truth, space.num_frames)
            decoded, _ = max_path(space, table)
            decode_cost = sum(
                cost.edge_cost(int(space.edge_label[e]),
                               int(space.edge_start[e]),
                               int(space.edge_end[e]))
                for e in decoded.edges)
            value = hinge_loss(space, table, truth, cost).value
            ok = ok and decode_cost <= value + 1e-9
        report(5, "decode cost is bounded by the hinge loss on 200 random "
                  "lattices", ok)


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    """Synthesize the toy corpus and train the three end-to-end models.

    All runs follow the shared protocol (SGD step 0.1, clip 5, decay 0.75,
    dropout 0.2); the CTC encoder uses the pyramid, the segmental runs keep
    full resolution.
    """
    root = tmp_path_factory.mktemp("toy")
    config = SynthConfig(num_train=200, num_dev=50, alphabet_size=5,
                         feature_dim=8, min_segments=3, max_segments=6,
                         min_duration=3, max_duration=6, noise_std=0.2,
                         seed=123)
    meta = synth_dataset(config, root)
    assert meta["bayes_frame_error"] <= 0.01
    train = load_dataset(root, "train")
    dev = load_dataset(root, "dev")
    started = time.perf_counter()

    mll_model = init_model(ModelConfig(num_labels=5, input_dim=8,
                                       kind="segmental", weightfn="srnn",
                                       max_duration=8, hidden_dim=32,
                                       num_layers=2, dropout=0.2), seed=1)
    run_stage(mll_model, TrainConfig(stage="end2end", seg_loss="mll",
                                     epochs_fixed=6, epochs_decay=8, seed=1),
              train, dev)
    mll_per, _ = evaluate(mll_model, dev)

    ctc_model = init_model(ModelConfig(num_labels=5, input_dim=8, kind="ctc",
                                       hidden_dim=32, num_layers=2,
                                       pyramid=True, dropout=0.2), seed=2)
    run_stage(ctc_model, TrainConfig(stage="enc-pretrain", enc_loss="ctc",
                                     epochs_fixed=6, epochs_decay=8, seed=2),
              train, dev)
    ctc_per, _ = evaluate(ctc_model, dev)

    mt_model = init_model(ModelConfig(num_labels=5, input_dim=8,
                                      kind="segmental", weightfn="srnn",
                                      head="ctc", max_duration=8,
                                      hidden_dim=32, num_layers=2,
                                      dropout=0.2), seed=3)
    run_stage(mt_model, TrainConfig(stage="multitask", seg_loss="mll",
                                    enc_loss="ctc", lam=0.67, epochs_fixed=6,
                                    epochs_decay=8, seed=3), train, dev)
    mt_per, _ = evaluate(mt_model, dev)

    elapsed = time.perf_counter() - started
    return {"train": train, "dev": dev, "mll_per": mll_per,
            "ctc_per": ctc_per, "mt_per": mt_per, "elapsed": elapsed,
            "bayes": meta["bayes_frame_error"]}


class TestCriterion6ToyLearning:
    def test_segmental_mll(self, toy_runs):
        report(6, "(a) end-to-end SRNN + marginal log loss reaches dev PER "
                  "<= 5%", toy_runs["mll_per"] <= 0.05,
               f"dev PER {100 * toy_runs['mll_per']:.2f}%")

    def test_ctc(self, toy_runs):
        report(6, "(b) CTC reaches dev PER <= 5%",
               toy_runs["ctc_per"] <= 0.05,
               f"dev PER {100 * toy_runs['ctc_per']:.2f}%")

    def test_multitask(self, toy_runs):
        best_single = min(toy_runs["mll_per"], toy_runs["ctc_per"])
        ok = toy_runs["mt_per"] <= best_single + 0.01
        report(6, "(c) multitask lambda=0.67 within 1% absolute of the best "
                  "single task", ok,
               f"multitask {100 * toy_runs['mt_per']:.2f}% vs best single "
               f"{100 * best_single:.2f}%")

    def test_runtime(self, toy_runs):
        report(6, "(runtime) three toy trainings fit the budget",
               toy_runs["elapsed"] < 1800.0,
               f"{toy_runs['elapsed']:.0f}s")


class TestCriterion7RuntimeTrend:
    def test_gradient_time_ordering(self):
        rows, _ = run_benchmark(repeats=5, seed=7)
        checks = trend_report(rows)
        bad = [name for name, ok in checks if not ok]
        report(7, "gradient time: hinge < log < marginal log loss, pyramid "
                  "< regular, for both weight functions",
               not bad, "; ".join(bad) if bad else f"{len(checks)} orderings")


class TestCriterion8MultiStage:
    def test_frozen_stage_and_finetune(self, toy_runs, tmp_path):
        train, dev = toy_runs["train"], toy_runs["dev"]

        enc_model = init_model(ModelConfig(num_labels=5, input_dim=8,
                                           kind="ctc", hidden_dim=24,
                                           num_layers=2), seed=8)
        run_stage(enc_model, TrainConfig(stage="enc-pretrain", enc_loss="ctc",
                                         epochs_fixed=3, epochs_decay=0,
                                         seed=8), train, dev)
        ckpt = tmp_path / "enc.segc"
        save_model(ckpt, enc_model)

        seg = init_model(ModelConfig(num_labels=5, input_dim=8,
                                     kind="segmental", weightfn="srnn",
                                     head="ctc", max_duration=8,
                                     hidden_dim=24, num_layers=2), seed=9)
        warm_start_encoder(seg, ckpt)
        enc_before = {name: arr.copy() for name, arr in seg.enc.tensors()}
        run_stage(seg, TrainConfig(stage="dec-frozen", seg_loss="log",
                                   epochs_fixed=3, epochs_decay=0, seed=9),
                  train, dev)
        frozen_ok = all(np.array_equal(arr, enc_before[name])
                        for name, arr in seg.enc.tensors())
        report(8, "(frozen) stage-2 training leaves encoder parameters "
                  "bit-identical", frozen_ok)

        def mean_train_loss(model: Model) -> float:
            total, count = 0.0, 0
            for utt in train.utterances:
                try:
                    total += compute_loss(model, utt, seg_loss="log",
                                          need_grads=False).value
                    count += 1
                except UnrepresentableSupervisionError:
                    continue
            return total / count

        before = mean_train_loss(seg)
        run_stage(seg, TrainConfig(stage="finetune", seg_loss="log",
                                   epochs_fixed=3, epochs_decay=0, seed=10),
                  train, dev)
        after = mean_train_loss(seg)
        report(8, "(finetune) three fine-tuning epochs strictly reduce the "
                  "training loss", after < before,
               f"{before:.4f} -> {after:.4f}")
