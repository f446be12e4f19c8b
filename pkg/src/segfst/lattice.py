"""Search-space FSTs over time-indexed vertices, label-constraint FSTs, and
their intersection.

A search space has one vertex per frame boundary (times 0..T) and one edge per
candidate segment ``(label, start, end)``.  Vertex ids are assigned in time
order, so vertex id order is always a valid topological order, which is what
the dynamic programs in :mod:`segfst.dp` rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EmptyIntersectionError(ValueError):
    """Raised when a constrained search space accepts no path at all.

    This is reported distinctly from ordinary argument errors so callers can
    recognize supervision that is not representable in the search space
    (e.g. more labels than frames).
    """


@dataclass(frozen=True)
class Edge:
    """One candidate segment: ``label`` spanning frames ``[start, end)``.

    Input and output symbols coincide with ``label`` (acceptor-style space).
    """

    id: int
    tail: int
    head: int
    label: int
    start: int
    end: int

    @property
    def duration(self) -> int:
        return self.end - self.start

    @property
    def input_symbol(self) -> int:
        return self.label

    @property
    def output_symbol(self) -> int:
        return self.label


@dataclass
class SearchSpace:
    """Flat-array FST representation of a search space.

    Vertices and edges are stored in dense arrays indexed by integer id;
    adjacency is kept as per-vertex arrays of edge ids in ascending order.
    Instances are immutable after construction and safe for concurrent reads.
    """

    num_frames: int
    num_labels: int
    vertex_time: np.ndarray       # int64 [V]
    edge_tail: np.ndarray         # int64 [E]
    edge_head: np.ndarray         # int64 [E]
    edge_label: np.ndarray        # int64 [E]
    edge_start: np.ndarray        # int64 [E]
    edge_end: np.ndarray          # int64 [E]
    initial: int
    final: int
    in_edges: list[np.ndarray] = field(repr=False)
    out_edges: list[np.ndarray] = field(repr=False)
    _edge_index: dict[tuple[int, int, int], int] = field(
        default_factory=dict, repr=False)

    @property
    def num_vertices(self) -> int:
        return len(self.vertex_time)

    @property
    def num_edges(self) -> int:
        return len(self.edge_tail)

    def edge(self, edge_id: int) -> Edge:
        return Edge(
            id=edge_id,
            tail=int(self.edge_tail[edge_id]),
            head=int(self.edge_head[edge_id]),
            label=int(self.edge_label[edge_id]),
            start=int(self.edge_start[edge_id]),
            end=int(self.edge_end[edge_id]),
        )

    def find_edge(self, label: int, start: int, end: int) -> int:
        """Return the edge id for segment (label, start, end), or -1."""
        if not self._edge_index:
            for i in range(self.num_edges):
                key = (int(self.edge_label[i]), int(self.edge_start[i]),
                       int(self.edge_end[i]))
                # keep the smallest id on duplicates (intersections may alias)
                self._edge_index.setdefault(key, i)
        return self._edge_index.get((label, start, end), -1)


@dataclass
class IntersectedSpace(SearchSpace):
    """Product of a search space with a constraint FST.

    ``edge_origin[i]`` is the id of the originating edge in the unconstrained
    space; weights are inherited from it.  ``vertex_pair[v]`` records the
    (time vertex, constraint state) pair; the merged final vertex carries
    constraint state -1.
    """

    edge_origin: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    vertex_pair: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))


@dataclass
class ConstraintFst:
    """Deterministic unweighted acceptor over the label alphabet.

    ``step[q, label]`` is the successor state or -1.  Determinism (at most one
    successor per (state, label)) is what makes the intersection count every
    accepted path exactly once.
    """

    num_labels: int
    start: int
    accept: np.ndarray            # bool [Q]
    step: np.ndarray              # int64 [Q, num_labels]

    @property
    def num_states(self) -> int:
        return len(self.accept)

    def accepts(self, labels) -> bool:
        q = self.start
        for lab in labels:
            q = int(self.step[q, lab])
            if q < 0:
                return False
        return bool(self.accept[q])


def _build_adjacency(num_vertices: int, tails: np.ndarray,
                     heads: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    in_edges: list[list[int]] = [[] for _ in range(num_vertices)]
    out_edges: list[list[int]] = [[] for _ in range(num_vertices)]
    for i in range(len(tails)):
        out_edges[tails[i]].append(i)
        in_edges[heads[i]].append(i)
    return ([np.asarray(e, dtype=np.int64) for e in in_edges],
            [np.asarray(e, dtype=np.int64) for e in out_edges])


def build_segmental_space(num_frames: int, num_labels: int,
                          max_duration: int) -> SearchSpace:
    """Build the segmental search space over ``num_frames`` frames.

    One vertex per time 0..T, and one edge per segment (label, s, t) with
    0 <= s < t <= T and t - s <= max_duration.  Edges are enumerated by end
    time, then start time, then label, so the in-edges of each vertex form a
    contiguous id range.
    """
    if num_frames < 1:
        raise ValueError(f"need at least one frame, got {num_frames}")
    if num_labels < 1:
        raise ValueError(f"need a non-empty alphabet, got {num_labels} labels")
    if max_duration < 1:
        raise ValueError(f"max duration must be positive, got {max_duration}")

    tails, heads, labels, starts, ends = [], [], [], [], []
    for t in range(1, num_frames + 1):
        for s in range(max(0, t - max_duration), t):
            for lab in range(num_labels):
                tails.append(s)
                heads.append(t)
                labels.append(lab)
                starts.append(s)
                ends.append(t)

    vertex_time = np.arange(num_frames + 1, dtype=np.int64)
    edge_tail = np.asarray(tails, dtype=np.int64)
    edge_head = np.asarray(heads, dtype=np.int64)
    in_edges, out_edges = _build_adjacency(num_frames + 1, edge_tail, edge_head)
    return SearchSpace(
        num_frames=num_frames,
        num_labels=num_labels,
        vertex_time=vertex_time,
        edge_tail=edge_tail,
        edge_head=edge_head,
        edge_label=np.asarray(labels, dtype=np.int64),
        edge_start=np.asarray(starts, dtype=np.int64),
        edge_end=np.asarray(ends, dtype=np.int64),
        initial=0,
        final=num_frames,
        in_edges=in_edges,
        out_edges=out_edges,
    )


def build_ctc_space(num_frames: int, num_symbols: int) -> SearchSpace:
    """Build the frame-synchronous (CTC) search space.

    ``num_symbols`` counts the blank: there is one duration-1 edge per symbol
    per frame, giving T * num_symbols edges.  Edge ids are frame-major so the
    weight of edge (t, label) sits at flat index (t-1) * num_symbols + label.
    """
    if num_frames < 1:
        raise ValueError(f"need at least one frame, got {num_frames}")
    if num_symbols < 1:
        raise ValueError(f"need a non-empty alphabet, got {num_symbols} symbols")

    frames = np.repeat(np.arange(1, num_frames + 1, dtype=np.int64), num_symbols)
    labels = np.tile(np.arange(num_symbols, dtype=np.int64), num_frames)
    in_edges, out_edges = _build_adjacency(num_frames + 1, frames - 1, frames)
    return SearchSpace(
        num_frames=num_frames,
        num_labels=num_symbols,
        vertex_time=np.arange(num_frames + 1, dtype=np.int64),
        edge_tail=frames - 1,
        edge_head=frames,
        edge_label=labels,
        edge_start=frames - 1,
        edge_end=frames,
        initial=0,
        final=num_frames,
        in_edges=in_edges,
        out_edges=out_edges,
    )


def build_label_chain(labels, num_labels: int) -> ConstraintFst:
    """Chain acceptor for exactly the label sequence ``labels``.

    State k has a single out-arc on labels[k]; state len(labels) accepts.
    """
    labels = list(labels)
    if not labels:
        raise ValueError("label sequence must be non-empty")
    n = len(labels)
    step = np.full((n + 1, num_labels), -1, dtype=np.int64)
    for k, lab in enumerate(labels):
        if not 0 <= lab < num_labels:
            raise ValueError(f"label {lab} outside alphabet of size {num_labels}")
        step[k, lab] = k + 1
    accept = np.zeros(n + 1, dtype=bool)
    accept[n] = True
    return ConstraintFst(num_labels=num_labels, start=0, accept=accept, step=step)


def _determinize(num_labels: int, start: int, accept_states: set[int],
                 arcs: dict[tuple[int, int], set[int]]) -> ConstraintFst:
    """Subset construction; subsets discovered in BFS order for determinism."""
    start_set = frozenset([start])
    index: dict[frozenset, int] = {start_set: 0}
    queue = [start_set]
    table: list[dict[int, int]] = [{}]
    while queue:
        subset = queue.pop(0)
        qid = index[subset]
        for lab in range(num_labels):
            nxt = set()
            for q in subset:
                nxt |= arcs.get((q, lab), set())
            if not nxt:
                continue
            key = frozenset(nxt)
            if key not in index:
                index[key] = len(index)
                table.append({})
                queue.append(key)
            table[qid][lab] = index[key]
    step = np.full((len(index), num_labels), -1, dtype=np.int64)
    accept = np.zeros(len(index), dtype=bool)
    for subset, qid in index.items():
        accept[qid] = bool(subset & accept_states)
        for lab, tgt in table[qid].items():
            step[qid, lab] = tgt
    return ConstraintFst(num_labels=num_labels, start=0, accept=accept, step=step)


def build_ctc_constraint(labels, num_symbols: int, blank: int,
                         strict_repeats: bool = False) -> ConstraintFst:
    """Acceptor for blank-interleaved frame strings of ``labels``.

    The accepted language is blank* y1+ blank* y2+ ... blank* yK+ blank*.
    With ``strict_repeats`` a blank is mandatory between equal adjacent
    labels, which makes every frame string collapse (merge repeats, drop
    blanks) to exactly ``labels`` -- the standard CTC topology.  The default
    keeps the direct transition even between equal labels.
    """
    y = list(labels)
    if not y:
        raise ValueError("label sequence must be non-empty")
    for lab in y:
        if not 0 <= lab < num_symbols or lab == blank:
            raise ValueError(f"label {lab} invalid for alphabet {num_symbols} "
                             f"with blank {blank}")
    k = len(y)
    # States: b_i = blank run before label i+1 (b_k = trailing run),
    # l_i = inside the run of label i.  May be nondeterministic when
    # adjacent labels repeat; determinized below.
    b = lambda i: i            # 0..k
    l = lambda i: k + 1 + i    # 0..k-1 for labels y[i]
    arcs: dict[tuple[int, int], set[int]] = {}

    def add(src: int, lab: int, dst: int) -> None:
        arcs.setdefault((src, lab), set()).add(dst)

    for i in range(k + 1):
        add(b(i), blank, b(i))
        if i < k:
            add(b(i), y[i], l(i))
    for i in range(k):
        add(l(i), y[i], l(i))
        add(l(i), blank, b(i + 1))
        if i + 1 < k and not (strict_repeats and y[i + 1] == y[i]):
            add(l(i), y[i + 1], l(i + 1))
    accept_states = {l(k - 1), b(k)}
    return _determinize(num_symbols, b(0), accept_states, arcs)


def intersect(space: SearchSpace, constraint: ConstraintFst) -> IntersectedSpace:
    """Product construction of a search space with a deterministic constraint.

    Keeps only product states reachable from (v0, start) and co-reachable to
    an accepting state at the final vertex; all accepting pairs at the final
    time are merged into one final vertex so |I| = |F| = 1 holds.  Raises
    :class:`EmptyIntersectionError` when no accepted path exists.
    """
    if constraint.num_labels < space.num_labels:
        raise ValueError("constraint alphabet smaller than space alphabet")
    nv = space.num_vertices
    reach: list[set[int]] = [set() for _ in range(nv)]
    reach[space.initial] = {constraint.start}
    step = constraint.step
    for v in range(nv):
        if not reach[v]:
            continue
        for e in space.out_edges[v]:
            lab = space.edge_label[e]
            head = space.edge_head[e]
            for q in reach[v]:
                nq = step[q, lab]
                if nq >= 0:
                    reach[head].add(int(nq))

    coreach: list[set[int]] = [set() for _ in range(nv)]
    coreach[space.final] = {q for q in reach[space.final]
                            if constraint.accept[q]}
    for v in range(nv - 1, -1, -1):
        for e in space.in_edges[v]:
            lab = space.edge_label[e]
            tail = space.edge_tail[e]
            for q in reach[tail]:
                nq = step[q, lab]
                if nq >= 0 and nq in coreach[v]:
                    coreach[tail].add(q)

    if constraint.start not in coreach[space.initial]:
        raise EmptyIntersectionError(
            "constraint accepts no path in this search space")

    pair_id: dict[tuple[int, int], int] = {}
    pairs: list[tuple[int, int]] = []
    for v in range(nv):
        if v == space.final:
            continue
        for q in sorted(reach[v] & coreach[v]):
            pair_id[(v, q)] = len(pairs)
            pairs.append((v, q))
    final_id = len(pairs)
    pairs.append((space.final, -1))

    def lookup(v: int, q: int) -> int:
        if v == space.final:
            return final_id
        return pair_id[(v, q)]

    tails, heads, labels, starts, ends, origin = [], [], [], [], [], []
    for e in range(space.num_edges):
        tv = int(space.edge_tail[e])
        hv = int(space.edge_head[e])
        lab = int(space.edge_label[e])
        live_tail = reach[tv] & coreach[tv]
        for q in sorted(live_tail):
            nq = int(step[q, lab])
            if nq < 0 or nq not in coreach[hv] or nq not in reach[hv]:
                continue
            tails.append(lookup(tv, q))
            heads.append(lookup(hv, nq))
            labels.append(lab)
            starts.append(int(space.edge_start[e]))
            ends.append(int(space.edge_end[e]))
            origin.append(e)

    vertex_time = np.asarray([space.vertex_time[v] for v, _ in pairs],
                             dtype=np.int64)
    edge_tail = np.asarray(tails, dtype=np.int64)
    edge_head = np.asarray(heads, dtype=np.int64)
    in_edges, out_edges = _build_adjacency(len(pairs), edge_tail, edge_head)
    return IntersectedSpace(
        num_frames=space.num_frames,
        num_labels=space.num_labels,
        vertex_time=vertex_time,
        edge_tail=edge_tail,
        edge_head=edge_head,
        edge_label=np.asarray(labels, dtype=np.int64),
        edge_start=np.asarray(starts, dtype=np.int64),
        edge_end=np.asarray(ends, dtype=np.int64),
        initial=lookup(space.initial, constraint.start),
        final=final_id,
        in_edges=in_edges,
        out_edges=out_edges,
        edge_origin=np.asarray(origin, dtype=np.int64),
        vertex_pair=np.asarray(pairs, dtype=np.int64),
    )
