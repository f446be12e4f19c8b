import math

import numpy as np
import pytest

from segfst.dp import EdgeWeightTable, Path, edge_posteriors, forward_backward, max_path
from segfst.lattice import (
    build_ctc_space,
    build_label_chain,
    build_segmental_space,
    intersect,
)
from segfst.losses import (
    CostFunction,
    UnrepresentableSupervisionError,
    ctc_loss,
    edit_distance,
    frame_cross_entropy,
    hinge_loss,
    log_loss,
    marginal_log_loss,
    overlap_cost,
)

from oracles import (
    brute_log_partition,
    ctc_forward_log_loss,
    enumerate_paths,
    frame_string,
    path_labels,
    path_weight,
    quadratic_edit_distance,
)


def random_table(space, rng, scale=1.0):
    return EdgeWeightTable.from_values(
        rng.normal(0.0, scale, size=space.num_edges))


def random_truth(space, rng):
    paths = enumerate_paths(space)
    return Path.from_edges(space, paths[rng.integers(len(paths))])


def log_softmax_rows(rng, shape):
    logits = rng.normal(size=shape)
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def fd_check(value_fn, weights_array, analytic, indices=None,
             step=1e-4, tol=1e-6):
    from oracles import finite_difference
    fd = finite_difference(value_fn, weights_array, indices=indices, step=step)
    idx = list(range(weights_array.size)) if indices is None else list(indices)
    ana = analytic.reshape(-1)[idx]
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(fd)), 1e-3)
    assert np.max(np.abs(ana - fd) / denom) <= tol


class TestHingeLoss:
    def test_unique_path_zero(self):
        space = build_segmental_space(1, 1, 1)
        table = EdgeWeightTable.from_values([1.7])
        truth = Path.from_edges(space, [0])
        res = hinge_loss(space, table, truth)
        assert res.value == 0.0
        np.testing.assert_array_equal(res.grads, np.zeros(1))

    def test_truth_wins_gives_zero_subgradient(self):
        space = build_segmental_space(3, 2, 2)
        truth = Path.from_edges(space, enumerate_paths(space)[0])
        # make the truth path overwhelmingly good
        values = np.full(space.num_edges, -50.0)
        values[truth.edges] = 50.0
        res = hinge_loss(space, EdgeWeightTable.from_values(values), truth)
        np.testing.assert_array_equal(res.grads, np.zeros(space.num_edges))
        assert res.value == 0.0

    def test_matches_enumeration(self):
        rng = np.random.default_rng(31)
        space = build_segmental_space(3, 2, 2)
        for _ in range(25):
            table = random_table(space, rng)
            truth = random_truth(space, rng)
            cost = CostFunction.from_path(truth, space.num_frames)
            res = hinge_loss(space, table, truth, cost)
            best = max(
                path_weight(table.values, p)
                + sum(cost.edge_cost(int(space.edge_label[e]),
                                     int(space.edge_start[e]),
                                     int(space.edge_end[e])) for e in p)
                for p in enumerate_paths(space))
            assert res.value == pytest.approx(
                best - truth.weight(table), abs=1e-10)

    def test_upper_bounds_decode_cost(self):
        rng = np.random.default_rng(37)
        for _ in range(200):
            t = int(rng.integers(1, 6))
            labs = int(rng.integers(1, 4))
            dur = int(rng.integers(1, 4))
            space = build_segmental_space(t, labs, dur)
            table = random_table(space, rng)
            truth = random_truth(space, rng)
            cost = CostFunction.from_path(truth, space.num_frames)
            decoded, _ = max_path(space, table)
            decode_cost = sum(
                cost.edge_cost(int(space.edge_label[e]),
                               int(space.edge_start[e]),
                               int(space.edge_end[e]))
                for e in decoded.edges)
            res = hinge_loss(space, table, truth, cost)
            assert decode_cost <= res.value + 1e-9

    def test_invalid_truth(self):
        space = build_segmental_space(3, 2, 2)
        bogus = Path(edges=[0, 1], labels=[0, 1], segments=[(0, 1), (0, 1)])
        with pytest.raises(ValueError):
            hinge_loss(space, EdgeWeightTable.zeros(space), bogus)


class TestLogLoss:
    def test_unique_path_zero(self):
        space = build_segmental_space(1, 1, 1)
        res = log_loss(space, EdgeWeightTable.from_values([0.4]),
                       Path.from_edges(space, [0]))
        assert res.value == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(res.grads, np.zeros(1), atol=1e-12)

    def test_uniform_weights_log_path_count(self):
        space = build_segmental_space(3, 2, 2)
        truth = Path.from_edges(space, enumerate_paths(space)[0])
        res = log_loss(space, EdgeWeightTable.zeros(space), truth)
        assert res.value == pytest.approx(math.log(16.0), abs=1e-12)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(41)
        space = build_segmental_space(4, 2, 2)
        table = random_table(space, rng)
        truth = random_truth(space, rng)
        res = log_loss(space, table, truth)
        fd_check(lambda: log_loss(space, table, truth).value,
                 table.values, res.grads)

    def test_nonnegative(self):
        rng = np.random.default_rng(43)
        for _ in range(30):
            space = build_segmental_space(int(rng.integers(1, 5)), 2, 2)
            table = random_table(space, rng)
            res = log_loss(space, table, random_truth(space, rng))
            assert res.value >= -1e-12


class TestMarginalLogLoss:
    def test_single_path_zero(self):
        space = build_segmental_space(2, 1, 1)
        table = EdgeWeightTable.from_values([0.3, -0.7])
        res = marginal_log_loss(space, table, build_label_chain([0, 0], 1))
        assert res.value == pytest.approx(0.0, abs=1e-12)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(47)
        space = build_segmental_space(3, 2, 2)
        table = random_table(space, rng)
        chain = build_label_chain([0, 1], 2)
        res = marginal_log_loss(space, table, chain)
        matching = [path_weight(table.values, p)
                    for p in enumerate_paths(space)
                    if path_labels(space, p) == [0, 1]]
        assert len(matching) == 2
        m = max(matching)
        log_zy = m + math.log(sum(math.exp(w - m) for w in matching))
        expected = brute_log_partition(space, table.values) - log_zy
        assert res.value == pytest.approx(expected, abs=1e-10)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(53)
        space = build_segmental_space(4, 2, 3)
        table = random_table(space, rng)
        chain = build_label_chain([1, 0], 2)
        res = marginal_log_loss(space, table, chain)
        fd_check(lambda: marginal_log_loss(space, table, chain).value,
                 table.values, res.grads)

    def test_at_most_log_loss(self):
        rng = np.random.default_rng(59)
        for _ in range(30):
            space = build_segmental_space(int(rng.integers(2, 5)), 2, 2)
            table = random_table(space, rng)
            truth = random_truth(space, rng)
            chain = build_label_chain(truth.labels, 2)
            mll = marginal_log_loss(space, table, chain)
            ll = log_loss(space, table, truth)
            assert mll.value <= ll.value + 1e-10

    def test_unrepresentable(self):
        space = build_segmental_space(2, 2, 2)
        with pytest.raises(UnrepresentableSupervisionError):
            marginal_log_loss(space, EdgeWeightTable.zeros(space),
                              build_label_chain([0, 1, 0], 2))

    def test_posterior_cuts_on_intersection(self):
        rng = np.random.default_rng(61)
        space = build_segmental_space(5, 2, 3)
        table = random_table(space, rng)
        inter = intersect(space, build_label_chain([0, 1], 2))
        iw = EdgeWeightTable.from_values(table.values[inter.edge_origin])
        gamma = edge_posteriors(inter, iw, forward_backward(inter, iw))
        for t in range(space.num_frames):
            crossing = (inter.edge_start <= t) & (inter.edge_end > t)
            assert gamma[crossing].sum() == pytest.approx(1.0, abs=1e-9)


class TestOverlapCost:
    def test_zero_on_truth_edges(self):
        space = build_segmental_space(4, 2, 2)
        truth = Path.from_edges(
            space, [space.find_edge(0, 0, 2), space.find_edge(1, 2, 4)])
        cost = CostFunction.from_path(truth, 4)
        for e in truth.edges:
            assert cost.edge_cost(int(space.edge_label[e]),
                                  int(space.edge_start[e]),
                                  int(space.edge_end[e])) == 0.0

    def test_mislabeled_span(self):
        space = build_segmental_space(3, 2, 3)
        truth = Path.from_edges(space, [space.find_edge(0, 0, 3)])
        edge = space.edge(space.find_edge(1, 0, 2))
        assert overlap_cost(edge, truth, 3) == 2.0

    def test_decomposes_to_frame_hamming(self):
        rng = np.random.default_rng(67)
        space = build_segmental_space(5, 3, 3)
        truth = random_truth(space, rng)
        cost = CostFunction.from_path(truth, 5)
        truth_frames = frame_string(space, truth.edges, 5)
        for p in enumerate_paths(space)[:200]:
            total = sum(cost.edge_cost(int(space.edge_label[e]),
                                       int(space.edge_start[e]),
                                       int(space.edge_end[e])) for e in p)
            hamming = sum(a != b for a, b in
                          zip(frame_string(space, p, 5), truth_frames))
            assert total == hamming

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(71)
        space = build_segmental_space(6, 3, 4)
        truth = random_truth(space, rng)
        cost = CostFunction.from_path(truth, 6, scale=0.5)
        dense = cost.edge_costs(space)
        for e in range(space.num_edges):
            assert dense[e] == cost.edge_cost(int(space.edge_label[e]),
                                              int(space.edge_start[e]),
                                              int(space.edge_end[e]))


class TestFrameCrossEntropy:
    def test_uniform(self):
        log_probs = np.full((1, 4), -math.log(4.0))
        res = frame_cross_entropy(log_probs, [2])
        assert res.value == pytest.approx(math.log(4.0))

    def test_confident_prediction(self):
        logits = np.array([[30.0, 0.0, 0.0]])
        log_probs = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        res = frame_cross_entropy(log_probs, [0])
        assert res.value == pytest.approx(0.0, abs=1e-10)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(73)
        logits = rng.normal(size=(4, 5))
        labels = rng.integers(0, 5, size=4)

        def value():
            lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
            return frame_cross_entropy(lp, labels).value

        lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        res = frame_cross_entropy(lp, labels)
        fd_check(value, logits, res.grads)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            frame_cross_entropy(np.zeros((2, 3)), [0, 3])


class TestCtcLoss:
    def test_single_frame(self):
        rng = np.random.default_rng(79)
        log_probs = log_softmax_rows(rng, (1, 3))
        res = ctc_loss(log_probs, [1], blank=2)
        assert res.value == pytest.approx(-log_probs[0, 1])

    def test_two_frames_uniform(self):
        log_probs = np.full((2, 2), math.log(0.5))
        res = ctc_loss(log_probs, [0], blank=1)
        assert res.value == pytest.approx(-math.log(3.0 / 4.0), abs=1e-12)

    def test_matches_textbook_recursion(self):
        rng = np.random.default_rng(83)
        for _ in range(40):
            t = int(rng.integers(1, 12))
            labs = int(rng.integers(1, 4))
            k = 1 if labs == 1 else int(rng.integers(1, min(t, 4) + 1))
            y = [int(rng.integers(0, labs))]
            while len(y) < k:
                nxt = int(rng.integers(0, labs))
                if nxt != y[-1]:     # regex topology == textbook on these
                    y.append(nxt)
            log_probs = log_softmax_rows(rng, (t, labs + 1))
            res = ctc_loss(log_probs, y, blank=labs)
            oracle = ctc_forward_log_loss(log_probs, y, blank=labs)
            assert res.value == pytest.approx(oracle, abs=1e-8)

    def test_strict_repeats_matches_textbook(self):
        rng = np.random.default_rng(89)
        for _ in range(25):
            t = int(rng.integers(3, 12))
            labs = int(rng.integers(1, 4))
            k = int(rng.integers(2, 5))
            y = [int(rng.integers(0, labs)) for _ in range(k)]
            log_probs = log_softmax_rows(rng, (t, labs + 1))
            try:
                res = ctc_loss(log_probs, y, blank=labs, strict_repeats=True)
            except UnrepresentableSupervisionError:
                # textbook recursion needs T >= len(extended) constraints too
                min_frames = k + sum(a == b for a, b in zip(y, y[1:]))
                assert t < min_frames
                continue
            oracle = ctc_forward_log_loss(log_probs, y, blank=labs)
            assert res.value == pytest.approx(oracle, abs=1e-8)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(97)
        logits = rng.normal(size=(5, 3))
        y = [0, 1]

        def value():
            lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
            return ctc_loss(lp, y, blank=2).value

        lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        res = ctc_loss(lp, y, blank=2)
        fd_check(value, logits, res.grads)

    def test_too_many_labels(self):
        lp = np.full((1, 3), -math.log(3.0))
        with pytest.raises(UnrepresentableSupervisionError):
            ctc_loss(lp, [0, 1], blank=2)

    def test_log_loss_shift_invariance_on_ctc_space(self):
        # all CTC paths have the same length, so a constant added to every
        # edge cancels between log Z and the path weight
        rng = np.random.default_rng(101)
        space = build_ctc_space(4, 3)
        table = random_table(space, rng)
        truth = Path.from_edges(space, [1, 3 + 2, 6 + 0, 9 + 1])
        base = log_loss(space, table, truth)
        shifted = log_loss(
            space, EdgeWeightTable.from_values(table.values + 1.3), truth)
        assert shifted.value == pytest.approx(base.value, abs=1e-9)


class TestEditDistance:
    def test_identical(self):
        assert edit_distance(["k", "ae", "t"], ["k", "ae", "t"]) == 0

    def test_single_deletion(self):
        assert edit_distance(["k", "t"], ["k", "ae", "t"]) == 1

    def test_empty(self):
        assert edit_distance([], [1, 2]) == 2
        assert edit_distance([1, 2], []) == 2

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(103)
        for _ in range(100):
            a = list(rng.integers(0, 4, size=rng.integers(0, 9)))
            b = list(rng.integers(0, 4, size=rng.integers(0, 9)))
            assert edit_distance(a, b) == quadratic_edit_distance(a, b)


class TestLatticeLossGradients:
    """All three lattice losses against central finite differences."""

    def test_random_lattices(self):
        rng = np.random.default_rng(107)
        for _ in range(10):
            t = int(rng.integers(2, 7))
            labs = int(rng.integers(1, 3))
            dur = int(rng.integers(1, 4))
            space = build_segmental_space(t, labs, dur)
            table = random_table(space, rng)
            truth = random_truth(space, rng)
            chain = build_label_chain(truth.labels, labs)
            ll = log_loss(space, table, truth)
            fd_check(lambda: log_loss(space, table, truth).value,
                     table.values, ll.grads)
            mll = marginal_log_loss(space, table, chain)
            fd_check(lambda: marginal_log_loss(space, table, chain).value,
                     table.values, mll.grads)
            cost = CostFunction.from_path(truth, space.num_frames)
            h = hinge_loss(space, table, truth, cost)
            fd_check(lambda: hinge_loss(space, table, truth, cost).value,
                     table.values, h.grads)
