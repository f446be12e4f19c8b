"""Training losses over lattices (hinge, log, marginal log) and over frames
(cross entropy, CTC), together with the decomposable overlap cost and edit
distance.

Lattice losses return gradients with respect to the edge weights only;
chaining those into weight-function and encoder parameters is handled by
:mod:`segfst.weights` and :mod:`segfst.encoder`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dp import EdgeWeightTable, Path, edge_posteriors, forward_backward, max_path
from .lattice import (
    ConstraintFst,
    Edge,
    EmptyIntersectionError,
    SearchSpace,
    build_ctc_constraint,
    build_ctc_space,
    intersect,
)


class UnrepresentableSupervisionError(Exception):
    """The supervision admits no path in the search space.

    Training treats this as a skippable condition (the utterance is counted
    and reported) rather than a hard failure.
    """


@dataclass
class LossResult:
    """Scalar loss plus its gradient buffer.

    ``grads`` is per-edge for lattice losses and per-frame-per-label (with
    respect to pre-softmax logits) for frame losses.
    """

    value: float
    grads: np.ndarray


@dataclass
class CostFunction:
    """Frame-overlap cost against a ground-truth path.

    cost(e, p) = scale * number of frames under e whose ground-truth frame
    label differs from e's label.  It is non-negative, zero on edges of the
    truth path, and decomposes over edges by construction.
    """

    frame_labels: np.ndarray
    scale: float = 1.0

    @classmethod
    def from_path(cls, truth: Path, num_frames: int,
                  scale: float = 1.0) -> "CostFunction":
        frame_labels = np.full(num_frames, -1, dtype=np.int64)
        for lab, (s, t) in zip(truth.labels, truth.segments):
            frame_labels[s:t] = lab
        if np.any(frame_labels < 0):
            raise ValueError("truth path does not span the full utterance")
        return cls(frame_labels=frame_labels, scale=scale)

    def edge_cost(self, label: int, start: int, end: int) -> float:
        return self.scale * float(
            np.sum(self.frame_labels[start:end] != label))

    def edge_costs(self, space: SearchSpace) -> np.ndarray:
        # prefix-count of mismatches per label: cost = M[l, t] - M[l, s]
        num_labels = space.num_labels
        t_max = len(self.frame_labels)
        mism = np.ones((num_labels, t_max))
        mism[self.frame_labels[None, :] ==
             np.arange(num_labels)[:, None]] = 0.0
        prefix = np.zeros((num_labels, t_max + 1))
        np.cumsum(mism, axis=1, out=prefix[:, 1:])
        costs = prefix[space.edge_label, space.edge_end] \
            - prefix[space.edge_label, space.edge_start]
        return self.scale * costs


def overlap_cost(edge: Edge, truth: Path, num_frames: int,
                 scale: float = 1.0) -> float:
    """Frames in [edge.start, edge.end) whose truth label differs from edge's."""
    cost = CostFunction.from_path(truth, num_frames, scale=scale)
    return cost.edge_cost(edge.label, edge.start, edge.end)


def _check_truth(space: SearchSpace, truth: Path) -> None:
    v = space.initial
    for e in truth.edges:
        if not 0 <= e < space.num_edges or int(space.edge_tail[e]) != v:
            raise ValueError("truth path is not a path in this search space")
        v = int(space.edge_head[e])
    if v != space.final:
        raise ValueError("truth path does not reach the final vertex")


def hinge_loss(space: SearchSpace, weights: EdgeWeightTable, truth: Path,
               cost: CostFunction | None = None) -> LossResult:
    """Structured hinge: max over paths of (cost + weight) minus truth weight.

    The max is solved by running the best-path decode with the per-edge cost
    added to the weights.  The subgradient is +1 on edges of the
    cost-augmented argmax and -1 on edges of the truth path.
    """
    _check_truth(space, truth)
    if cost is None:
        cost = CostFunction.from_path(truth, space.num_frames)
    augmented = EdgeWeightTable.from_values(
        weights.values + cost.edge_costs(space))
    rival, aug_score = max_path(space, augmented)
    value = aug_score - truth.weight(weights)
    grads = np.zeros(space.num_edges)
    np.add.at(grads, rival.edges, 1.0)
    np.add.at(grads, truth.edges, -1.0)
    return LossResult(value=float(value), grads=grads)


def log_loss(space: SearchSpace, weights: EdgeWeightTable,
             truth: Path) -> LossResult:
    """Negative log probability of the truth path: log Z - w(truth)."""
    _check_truth(space, truth)
    marginals = forward_backward(space, weights)
    value = marginals.log_partition - truth.weight(weights)
    grads = edge_posteriors(space, weights, marginals)
    np.add.at(grads, truth.edges, -1.0)
    return LossResult(value=float(value), grads=grads)


def marginal_log_loss(space: SearchSpace, weights: EdgeWeightTable,
                      constraint: ConstraintFst) -> LossResult:
    """Negative log of the total probability of all paths matching the
    constraint: log Z - log Z(constrained).

    The constrained term runs the same forward/backward pass on the
    intersection; its posteriors are scattered back through edge_origin.
    """
    try:
        inter = intersect(space, constraint)
    except EmptyIntersectionError as err:
        raise UnrepresentableSupervisionError(str(err)) from err
    inter_weights = EdgeWeightTable.from_values(
        weights.values[inter.edge_origin])
    num = forward_backward(inter, inter_weights)
    den = forward_backward(space, weights)
    value = den.log_partition - num.log_partition
    grads = edge_posteriors(space, weights, den)
    gamma_num = edge_posteriors(inter, inter_weights, num)
    np.add.at(grads, inter.edge_origin, -gamma_num)
    return LossResult(value=float(value), grads=grads)


def frame_cross_entropy(log_probs: np.ndarray,
                        frame_labels: np.ndarray) -> LossResult:
    """Mean per-frame negative log probability of the reference labels.

    ``log_probs`` rows must be log-softmax normalized; the gradient is taken
    with respect to the pre-softmax logits: (softmax - onehot) / T.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    frame_labels = np.asarray(frame_labels, dtype=np.int64)
    t_max, num_classes = log_probs.shape
    if len(frame_labels) != t_max:
        raise ValueError(f"{len(frame_labels)} labels for {t_max} frames")
    if np.any(frame_labels < 0) or np.any(frame_labels >= num_classes):
        raise ValueError("frame label id out of range")
    value = -float(log_probs[np.arange(t_max), frame_labels].mean())
    grads = np.exp(log_probs)
    grads[np.arange(t_max), frame_labels] -= 1.0
    grads /= t_max
    return LossResult(value=value, grads=grads)


def ctc_loss(log_probs: np.ndarray, labels, blank: int | None = None,
             strict_repeats: bool = False) -> LossResult:
    """CTC loss as the marginal log loss of the frame-synchronous space.

    ``log_probs`` is T x (|L|+1) with log-softmax rows (blank defaults to the
    last column).  Gradients are mapped back through the locally normalized
    layer, i.e. they are with respect to the pre-softmax logits.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    t_max, num_symbols = log_probs.shape
    if blank is None:
        blank = num_symbols - 1
    space = build_ctc_space(t_max, num_symbols)
    constraint = build_ctc_constraint(labels, num_symbols, blank,
                                      strict_repeats=strict_repeats)
    weights = EdgeWeightTable.from_values(log_probs.ravel())
    res = marginal_log_loss(space, weights, constraint)
    d_logp = res.grads.reshape(t_max, num_symbols)
    d_logits = d_logp - np.exp(log_probs) * d_logp.sum(axis=1, keepdims=True)
    return LossResult(value=res.value, grads=d_logits)


def edit_distance(hyp, ref) -> int:
    """Levenshtein distance with unit insertion/deletion/substitution."""
    hyp, ref = list(hyp), list(ref)
    if not ref:
        return len(hyp)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp):
        curr = [i + 1]
        for j, r in enumerate(ref):
            curr.append(min(prev[j + 1] + 1, curr[j] + 1,
                            prev[j] + (h != r)))
        prev = curr
    return prev[-1]
