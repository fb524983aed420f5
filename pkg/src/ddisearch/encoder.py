"""Weight-sharing supernet encoder over a relational graph.

Each layer applies a selectable message operator (SUB, MULT, CORR, ROTATE),
a selectable aggregation (SUM, MAX, MEAN) over incoming augmented edges, a
selectable combination of the node state with the aggregated message (MLP or
CONCAT, both 2d -> d linear maps with their own weights), and a selectable
activation (RELU, TANH, IDENTITY).  The final interaction predictor maps a
2d pair representation to one logit per base relation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tape as T

MES_OPS = ("SUB", "MULT", "CORR", "ROTATE")
AGG_OPS = ("SUM", "MAX", "MEAN")
COM_OPS = ("MLP", "CONCAT")
ACT_OPS = ("RELU", "TANH", "IDENTITY")

SLOT_CHOICES = {"mes": MES_OPS, "agg": AGG_OPS, "com": COM_OPS, "act": ACT_OPS}
SLOT_NAMES = ("mes", "agg", "com", "act")


@dataclass(frozen=True)
class LayerChoice:
    mes: str
    agg: str
    com: str
    act: str

    def __post_init__(self):
        for slot in SLOT_NAMES:
            value = getattr(self, slot)
            if value not in SLOT_CHOICES[slot]:
                raise ValueError(f"invalid {slot} operator {value!r}")


class Genotype(tuple):
    """One concrete encoding function: a LayerChoice per layer."""

    def __new__(cls, layers):
        layers = tuple(layers)
        if not layers:
            raise ValueError("genotype needs at least one layer")
        if not all(isinstance(l, LayerChoice) for l in layers):
            raise TypeError("genotype entries must be LayerChoice")
        return super().__new__(cls, layers)

    def to_json(self) -> str:
        return json.dumps([{"mes": l.mes, "agg": l.agg, "com": l.com, "act": l.act}
                           for l in self])

    @classmethod
    def from_json(cls, text):
        return cls(LayerChoice(**obj) for obj in json.loads(text))


def sample_path(rng, num_layers, constraints=None) -> Genotype:
    """Sample a genotype uniformly per slot; constraints pin (layer, slot) -> op.

    Layers in constraints are 0-based.  Contradictory constraints (an op not
    in the slot's operator set) are rejected.
    """
    constraints = dict(constraints or {})
    for (layer, slot), op in constraints.items():
        if not (0 <= layer < num_layers) or slot not in SLOT_CHOICES:
            raise ValueError(f"invalid constraint target ({layer}, {slot})")
        if op not in SLOT_CHOICES[slot]:
            raise ValueError(f"constraint op {op!r} not valid for slot {slot!r}")
    layers = []
    for l in range(num_layers):
        picks = {}
        for slot in SLOT_NAMES:
            if (l, slot) in constraints:
                picks[slot] = constraints[(l, slot)]
            else:
                ops = SLOT_CHOICES[slot]
                picks[slot] = ops[int(rng.integers(len(ops)))]
        layers.append(LayerChoice(**picks))
    return Genotype(layers)


class SupernetParams:
    """Shared weights for every operator branch plus embeddings and scorer.

    Stored as a flat name -> float64 ndarray dict so the optimizer and the
    tape can treat all parameters uniformly.
    """

    def __init__(self, arrays, num_layers, dim):
        self.arrays = arrays
        self.num_layers = num_layers
        self.dim = dim

    @classmethod
    def init(cls, rng, num_nodes, num_base_relations, dim, num_layers):
        if dim % 2 != 0:
            raise ValueError("embedding dim must be even (rotation pairs)")
        n_rel = 2 * num_base_relations + 1

        def uniform(*shape):
            bound = 1.0 / np.sqrt(shape[0])
            return rng.uniform(-bound, bound, size=shape)

        arrays = {"node_emb": uniform(num_nodes, dim)}
        for l in range(num_layers):
            arrays[f"rel_emb_{l}"] = uniform(n_rel, dim)
            arrays[f"phase_{l}"] = rng.uniform(0.0, 2.0 * np.pi, size=(n_rel, dim // 2))
            arrays[f"w_mlp_{l}"] = uniform(2 * dim, dim)
            arrays[f"w_concat_{l}"] = uniform(2 * dim, dim)
        arrays["w_pred"] = uniform(2 * dim, num_base_relations)
        arrays["scorer_w1"] = uniform(2 * dim, dim)
        arrays["scorer_b1"] = np.zeros(dim)
        arrays["scorer_w2"] = uniform(dim, 1)
        arrays["scorer_b2"] = np.zeros(1)
        return cls(arrays, num_layers, dim)

    def copy(self):
        return SupernetParams({k: v.copy() for k, v in self.arrays.items()},
                              self.num_layers, self.dim)

    def on_tape(self, tp):
        """Register every array on a tape; returns name -> Tensor."""
        return {k: tp.param(v) for k, v in sorted(self.arrays.items())}

    def save(self, path, meta=None):
        """Deterministic binary dump: one JSON header line + raw C-order data."""
        header = {
            "num_layers": self.num_layers,
            "dim": self.dim,
            "meta": meta or {},
            "arrays": [[k, list(v.shape)] for k, v in sorted(self.arrays.items())],
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for k, _ in header["arrays"]:
                fh.write(np.ascontiguousarray(self.arrays[k]).tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            arrays = {}
            for name, shape in header["arrays"]:
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(count * 8)
                arrays[name] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
        obj = cls(arrays, header["num_layers"], header["dim"])
        return obj, header.get("meta", {})


def encode(graph, genotype, tensors, exclude=None):
    """Run the message-passing stack; returns [H0, H1, ..., HL] tensors.

    tensors is a SupernetParams.on_tape dict.  exclude is an optional list of
    base triples whose edges (and inverses) are hidden from propagation.
    """
    src, rel, dst = graph.edge_arrays()
    if exclude:
        keep = graph.exclusion_mask(exclude)
        src, rel, dst = src[keep], rel[keep], dst[keep]
    layers = [tensors["node_emb"]]
    for l, choice in enumerate(genotype):
        h = layers[-1]
        h_src = T.gather_rows(h, src)
        if choice.mes == "ROTATE":
            phases = T.gather_rows(tensors[f"phase_{l}"], rel)
            msg = T.complex_rotate(h_src, phases)
        else:
            h_rel = T.gather_rows(tensors[f"rel_emb_{l}"], rel)
            if choice.mes == "SUB":
                msg = T.sub(h_src, h_rel)
            elif choice.mes == "MULT":
                msg = T.mul(h_src, h_rel)
            else:
                msg = T.circ_corr(h_src, h_rel)
        m = T.segment_aggregate(msg, dst, graph.num_nodes, choice.agg)
        cat = T.concat([h, m])
        weight_key = f"w_mlp_{l}" if choice.com == "MLP" else f"w_concat_{l}"
        out = T.matmul(cat, tensors[weight_key])
        if choice.act == "RELU":
            out = T.relu(out)
        elif choice.act == "TANH":
            out = T.tanh(out)
        layers.append(out)
    return layers


def predict(z, tensors):
    """Map pair representations (n, 2d) to relation logits (n, |R|)."""
    return T.matmul(z, tensors["w_pred"])


def task_loss(logits, targets, task, labels=None):
    """Classification loss for either task type.

    multi_class: targets are true relation ids per row of logits.
    multi_label: targets are the scored relation ids and labels the 0/1
    ground truth (positives plus sampled negatives).
    """
    if task == "multi_class":
        return T.softmax_cross_entropy(logits, targets)
    if task == "multi_label":
        if labels is None:
            raise ValueError("multi_label loss requires labels")
        scores = T.take_per_row(logits, targets)
        return T.binary_cross_entropy(scores, np.asarray(labels, dtype=np.float64))
    raise ValueError(f"unknown task {task!r}")
