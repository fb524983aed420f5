"""Multi-relational graph storage, ingestion, hop queries, splits, negatives.

Graphs are immutable after construction.  Every base edge (u, r, v) gets an
inverse edge (v, r + R, u), and every node gets a self-loop with relation id
2R, so the augmented relation universe has size 2R + 1.  Hop distances are
computed on the undirected skeleton of the base edges, ignoring self-loops.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    """Raised for malformed graph inputs (bad ids, bad files, bad scopes)."""


class SplitError(ValueError):
    """Raised when a requested split cannot be constructed."""


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int

    def as_tuple(self):
        return (self.head, self.relation, self.tail)


def load_triples(path, num_nodes=None, num_relations=None):
    """Read tab-separated (head, relation, tail) integer triples.

    Returns (triples, num_nodes, num_base_relations).  Bounds default to
    1 + max observed id unless overridden.
    """
    triples = []
    max_node = -1
    max_rel = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphError(f"{path}:{lineno}: expected 3 tab-separated fields, "
                                 f"got {line!r}")
            try:
                h, r, t = (int(p) for p in parts)
            except ValueError:
                raise GraphError(f"{path}:{lineno}: non-integer field in {line!r}")
            if h < 0 or r < 0 or t < 0:
                raise GraphError(f"{path}:{lineno}: negative id in {line!r}")
            triples.append(Triple(h, r, t))
            max_node = max(max_node, h, t)
            max_rel = max(max_rel, r)
    if not triples:
        raise GraphError(f"{path}: no triples found")
    n = num_nodes if num_nodes is not None else max_node + 1
    r = num_relations if num_relations is not None else max_rel + 1
    return triples, n, r


def save_triples(path, triples):
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(f"{t.head}\t{t.relation}\t{t.tail}\n")


class RelGraph:
    """Immutable multi-relational adjacency with inverse/self-loop augmentation."""

    def __init__(self, triples, num_nodes, num_base_relations):
        for t in triples:
            if not (0 <= t.head < num_nodes and 0 <= t.tail < num_nodes):
                raise GraphError(f"node id out of bounds in {t}")
            if not (0 <= t.relation < num_base_relations):
                raise GraphError(f"relation id out of bounds in {t}")
        self.num_nodes = num_nodes
        self.num_base_relations = num_base_relations
        base = sorted({t.as_tuple() for t in triples})
        self.base_triples = tuple(Triple(*t) for t in base)

        R = num_base_relations
        src, rel, dst = [], [], []
        for h, r, t in base:
            src.append(h); rel.append(r); dst.append(t)
        for h, r, t in base:
            src.append(t); rel.append(r + R); dst.append(h)
        for u in range(num_nodes):
            src.append(u); rel.append(2 * R); dst.append(u)
        self.edge_src = np.asarray(src, dtype=np.int64)
        self.edge_rel = np.asarray(rel, dtype=np.int64)
        self.edge_dst = np.asarray(dst, dtype=np.int64)

        # undirected skeleton for hop queries (self-loops excluded)
        nbrs = [set() for _ in range(num_nodes)]
        for h, _, t in base:
            if h != t:
                nbrs[h].add(t)
                nbrs[t].add(h)
        self._neighbors = [np.fromiter(sorted(s), dtype=np.int64) for s in nbrs]

    @property
    def num_relations_augmented(self):
        return 2 * self.num_base_relations + 1

    @property
    def self_loop_relation(self):
        return 2 * self.num_base_relations

    def edge_arrays(self):
        return self.edge_src, self.edge_rel, self.edge_dst

    def khop(self, u, k):
        """Nodes at undirected distance <= k from u, including u."""
        if not (0 <= u < self.num_nodes):
            raise GraphError(f"node {u} out of bounds")
        if k < 0:
            raise GraphError("k must be nonnegative")
        seen = {u}
        frontier = deque([(u, 0)])
        while frontier:
            node, dist = frontier.popleft()
            if dist == k:
                continue
            for w in self._neighbors[node]:
                if w not in seen:
                    seen.add(int(w))
                    frontier.append((int(w), dist + 1))
        return seen

    def ego_union(self, u, i, v, j, eta=None):
        """Union of the i-hop ego-network of u and the j-hop ego-network of v."""
        if i < 1 or j < 1 or (eta is not None and (i > eta or j > eta)):
            raise GraphError(f"scope ({i}, {j}) outside [1, {eta}]")
        return self.khop(u, i) | self.khop(v, j)

    def induced_subgraph(self, nodes):
        """Subgraph on a node subset; returns (graph, old_to_new id mapping)."""
        keep = sorted(nodes)
        mapping = {old: new for new, old in enumerate(keep)}
        sub = [Triple(mapping[t.head], t.relation, mapping[t.tail])
               for t in self.base_triples
               if t.head in mapping and t.tail in mapping]
        return RelGraph(sub, len(keep), self.num_base_relations), mapping

    def exclusion_mask(self, triples):
        """Boolean mask over augmented edges keeping everything except the
        given base triples and their inverses (self-loops always kept)."""
        R = self.num_base_relations
        n = self.num_nodes
        codes = set()
        for t in triples:
            codes.add((t.head * self.num_relations_augmented + t.relation) * n + t.tail)
            codes.add((t.tail * self.num_relations_augmented + t.relation + R) * n + t.head)
        edge_codes = (self.edge_src * self.num_relations_augmented
                      + self.edge_rel) * n + self.edge_dst
        drop = np.isin(edge_codes, np.fromiter(codes, dtype=np.int64, count=len(codes)))
        return ~drop


@dataclass
class SplitBundle:
    train: list
    valid: list
    test: list
    mode: str
    seed: int
    emerging_nodes: frozenset = field(default_factory=frozenset)

    def all_triples(self):
        return list(self.train) + list(self.valid) + list(self.test)


def make_splits(triples, mode, ratios=(0.7, 0.1, 0.2), seed=0, emerging_fraction=0.1):
    """Deterministic train/valid/test split in S0 or S1 mode.

    S0 guarantees every valid/test node appears in train.  S1 holds out an
    emerging node set: every test triple touches an emerging node and no
    train triple does.
    """
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be positive and sum to 1, got {ratios}")
    if mode not in ("S0", "S1"):
        raise SplitError(f"unknown split mode {mode!r}")
    rng = np.random.default_rng(seed)
    triples = list(triples)
    order = rng.permutation(len(triples))
    shuffled = [triples[i] for i in order]

    if mode == "S0":
        n = len(shuffled)
        n_train = int(round(ratios[0] * n))
        n_valid = int(round(ratios[1] * n))
        # seed train with one covering triple per node so S0 holds
        covered = set()
        train_idx = []
        rest_idx = []
        for i, t in enumerate(shuffled):
            if t.head not in covered or t.tail not in covered:
                train_idx.append(i)
                covered.add(t.head)
                covered.add(t.tail)
            else:
                rest_idx.append(i)
        if len(train_idx) > n_train:
            raise SplitError("train ratio too small to cover every node")
        need = n_train - len(train_idx)
        train_idx += rest_idx[:need]
        rest_idx = rest_idx[need:]
        train = [shuffled[i] for i in sorted(train_idx)]
        valid = [shuffled[i] for i in sorted(rest_idx[:n_valid])]
        test = [shuffled[i] for i in sorted(rest_idx[n_valid:])]
        return SplitBundle(train, valid, test, "S0", seed)

    # S1: sample emerging nodes, route their triples to test
    nodes = sorted({t.head for t in triples} | {t.tail for t in triples})
    n_emerging = max(1, int(round(emerging_fraction * len(nodes))))
    emerging = frozenset(int(x) for x in rng.choice(nodes, size=n_emerging,
                                                    replace=False))
    test = [t for t in shuffled if t.head in emerging or t.tail in emerging]
    remainder = [t for t in shuffled if t.head not in emerging and t.tail not in emerging]
    if not remainder or not test:
        raise SplitError("S1 infeasible: emerging set leaves no usable remainder")
    n_valid = int(round(ratios[1] / (ratios[0] + ratios[1]) * len(remainder)))
    valid = remainder[:n_valid]
    train = remainder[n_valid:]
    train_nodes = {t.head for t in train} | {t.tail for t in train}
    if not train_nodes:
        raise SplitError("S1 infeasible: empty train remainder")
    return SplitBundle(train, valid, test, "S1", seed, emerging)


def sample_negatives(bundle, graph, per_positive, seed=0, max_tries=200,
                     subset=None, with_anchors=False):
    """Corrupt each positive triple per_positive times, avoiding all positives.

    Corruptions avoid every positive anywhere in the bundle.  subset limits
    which positives get corrupted (default: all of them).  Returns
    (negatives, skipped) where skipped counts positives for which no valid
    corruption was found.
    """
    if per_positive < 1:
        raise ValueError("per_positive must be >= 1")
    rng = np.random.default_rng(seed)
    positives = {t.as_tuple() for t in bundle.all_triples()}
    n = graph.num_nodes
    negatives = []
    anchors = []
    skipped = 0
    for t in (bundle.all_triples() if subset is None else subset):
        for _ in range(per_positive):
            found = None
            for _ in range(max_tries):
                corrupt_head = bool(rng.integers(2))
                cand = int(rng.integers(n))
                if corrupt_head:
                    trial = (cand, t.relation, t.tail)
                else:
                    trial = (t.head, t.relation, cand)
                if trial not in positives and trial[0] != trial[2]:
                    found = trial
                    break
            if found is None:
                skipped += 1
            else:
                negatives.append(Triple(*found))
                anchors.append(t)
    if with_anchors:
        return negatives, skipped, anchors
    return negatives, skipped
