"""Deterministic synthetic multi-relational graphs with planted structure.

The generator plants two kinds of ground truth: relation symmetry (symmetric
relations are emitted in both directions, asymmetric ones in a single
direction) and composition rules (r1, r2) => r3, whose derived triples are
recoverable from 2-hop evidence.  A configurable fraction of the derived
triples gets its relation corrupted, bounding how much of the label set any
rule-based oracle can recover.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .graph import Triple


@dataclass(frozen=True)
class SynthSpec:
    num_nodes: int = 200
    num_relations: int = 8
    symmetric_relations: tuple = (0, 1, 2, 3)
    asymmetric_relations: tuple = (4, 5, 6, 7)
    rules: tuple = ((0, 0, 2), (1, 1, 3), (0, 1, 4), (1, 0, 5),
                    (1, 2, 6), (2, 1, 7))
    num_edges: int = 3000
    noise: float = 0.05
    seed: int = 0
    evidence_fraction: float = 0.6

    def __post_init__(self):
        sym, asym = set(self.symmetric_relations), set(self.asymmetric_relations)
        if sym & asym:
            raise ValueError("symmetric and asymmetric relation sets overlap")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise fraction must be in [0, 1)")
        for r in sym | asym:
            if not 0 <= r < self.num_relations:
                raise ValueError(f"relation id {r} out of range")
        for r1, r2, r3 in self.rules:
            for r in (r1, r2, r3):
                if not 0 <= r < self.num_relations:
                    raise ValueError(f"rule relation {r} out of range")
        capacity = self.num_relations * self.num_nodes * (self.num_nodes - 1)
        if self.num_edges > capacity:
            raise ValueError(f"edge count {self.num_edges} exceeds capacity {capacity}")


def generate(spec: SynthSpec):
    """Build the planted graph; returns (triples, meta).

    meta records the rules and every derived label query with a flag saying
    whether a <=2-hop rule application still explains it after noise.  The
    sidecar is for oracle tests only and is never fed to the model.
    """
    rng = np.random.default_rng(spec.seed)
    sym = set(spec.symmetric_relations)
    premise_rels = {r for rule in spec.rules for r in rule[:2]}
    conclusion_rels = {rule[2] for rule in spec.rules}
    evidence_rels = sorted(premise_rels - conclusion_rels)
    if not evidence_rels:
        evidence_rels = sorted(sym | set(spec.asymmetric_relations))
    triples = set()

    # evidence edges
    budget = int(spec.num_edges * spec.evidence_fraction)
    guard = 0
    while len(triples) < budget and guard < 50 * spec.num_edges:
        guard += 1
        r = evidence_rels[int(rng.integers(len(evidence_rels)))]
        u = int(rng.integers(spec.num_nodes))
        v = int(rng.integers(spec.num_nodes))
        if u == v:
            continue
        triples.add((u, r, v))
        if r in sym:
            triples.add((v, r, u))

    # derive triples rule by rule so earlier conclusions can feed later
    # premises; every derived triple keeps its 2-hop witness in the graph
    derived = []
    seen = set()
    for rule_idx, (r1, r2, r3) in enumerate(spec.rules):
        out_by_rel = {}
        for u, r, v in triples:
            if r in (r1, r2):
                out_by_rel.setdefault(r, {}).setdefault(u, []).append(v)
        candidates = []
        step1 = out_by_rel.get(r1, {})
        step2 = out_by_rel.get(r2, {})
        for u in sorted(step1):
            for w in sorted(step1[u]):
                for v in step2.get(w, ()):
                    if u != v and (u, r3, v) not in triples \
                            and (u, r3, v) not in seen:
                        seen.add((u, r3, v))
                        candidates.append((u, r3, v))
        candidates.sort()
        room = max(0, spec.num_edges - len(triples))
        share = room // max(1, len(spec.rules) - rule_idx)
        order = rng.permutation(len(candidates))
        taken = 0
        for i in order:
            if taken >= share:
                break
            u, r, v = candidates[int(i)]
            if (u, r, v) in triples:  # reverse of an earlier symmetric pick
                continue
            derived.append((u, r, v))
            triples.add((u, r, v))
            if r in sym:
                triples.add((v, r, u))
            taken += 1

    # corrupt a noise fraction of the derived labels; only conclusions that
    # never serve as a premise are eligible, so no witness path disappears
    corruptible = [idx for idx, (_, r, _) in enumerate(derived)
                   if r not in premise_rels]
    n_noise = min(int(round(spec.noise * len(derived))), len(corruptible))
    noise_idx = set(
        int(corruptible[i])
        for i in rng.choice(len(corruptible), size=n_noise, replace=False)
    ) if n_noise else set()
    queries = []
    for idx, (u, r, v) in enumerate(derived):
        if idx in noise_idx:
            others = [x for x in range(spec.num_relations) if x != r]
            r_out = others[int(rng.integers(len(others)))]
            queries.append({"head": u, "relation": r_out, "tail": v,
                            "solvable": False})
            triples.discard((u, r, v))
            if r in sym:
                triples.discard((v, r, u))
            triples.add((u, r_out, v))
            if r_out in sym:
                triples.add((v, r_out, u))
        else:
            queries.append({"head": u, "relation": r, "tail": v, "solvable": True})

    meta = {
        "spec": asdict(spec),
        "rules": [list(r) for r in spec.rules],
        "queries": queries,
    }
    return [Triple(*t) for t in sorted(triples)], meta


def rule_oracle(triples, rules, query: Triple, max_hops=2) -> bool:
    """Exhaustive check: is the query derivable by one rule application?"""
    edge_set = {t.as_tuple() for t in triples}
    out_by_rel = {}
    for h, r, t in edge_set:
        out_by_rel.setdefault((h, r), set()).add(t)
    for r1, r2, r3 in rules:
        if r3 != query.relation:
            continue
        for w in out_by_rel.get((query.head, r1), ()):
            if query.tail in out_by_rel.get((w, r2), ()):
                return True
    return False
