"""Search pipeline: supernet training, message-aware partition, natural-
gradient encoding search, per-query scope selection, and fine-tuning.

The pipeline is a pure function of (config, data, master seed).  Stage RNGs
are derived from the master seed with fixed spawn keys (see STAGE_IDS), so
re-running any stage with identical inputs reproduces its outputs bitwise.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import encoder as enc
from . import metrics as M
from . import scope as sc
from . import tape as T
from .graph import RelGraph, SplitBundle, make_splits, sample_negatives


class NumericalError(RuntimeError):
    """Raised when training or evaluation produces NaN/Inf."""


class StageError(RuntimeError):
    """Raised when a pipeline stage fails; carries the stage name."""

    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


STAGE_IDS = {
    "split": 0,
    "negatives": 1,
    "supernet": 2,
    "subtrain_0": 3,
    "subtrain_1": 4,
    "subtrain_2": 5,
    "subtrain_3": 6,
    "search": 7,
    "scopes": 8,
    "finetune": 9,
    "init": 10,
}


def stage_rng(master_seed, stage):
    """RNG for one stage: SeedSequence(master_seed, spawn_key=(stage id,))."""
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(STAGE_IDS[stage],)))


@dataclass
class SearchConfig:
    task: str = "multi_class"
    num_layers: int = 3
    eta: int = 3
    dim: int = 64
    tau: float = 0.05
    supernet_epochs: int = 50
    subsupernet_epochs: int = 50
    batch_size: int = 512
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    search_steps: int = 100
    sample_size: int = 8
    step_size: float = 0.1
    hyper_steps: int = 10
    finetune_epochs: int = 50
    lr_range: tuple = (10 ** -3.1, 10 ** -2.9)
    wd_range: tuple = (1e-5, 1e-3)
    plateau_patience: int = 5
    neg_per_positive: int = 1
    split_mode: str = "S0"
    split_ratios: tuple = (0.7, 0.1, 0.2)
    emerging_fraction: float = 0.1
    variant: str = "full"  # full | fixed_scope | fixed_function
    num_partitions: int = 4

    def __post_init__(self):
        if self.eta > self.num_layers:
            raise ValueError(f"eta={self.eta} must not exceed {self.num_layers} layers")
        if self.num_partitions != len(enc.MES_OPS):
            raise ValueError("partition count must equal the message-operator count")
        if self.task not in ("multi_class", "multi_label"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.variant not in ("full", "fixed_scope", "fixed_function"):
            raise ValueError(f"unknown variant {self.variant!r}")
        for lo, hi in (self.lr_range, self.wd_range):
            if not 0 < lo <= hi:
                raise ValueError("hyperparameter ranges must be well-ordered")

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


FIXED_FUNCTION_GENOTYPE = ("MULT", "SUM", "CONCAT", "TANH")


def fixed_function_genotype(num_layers):
    mes, agg, com, act = FIXED_FUNCTION_GENOTYPE
    return enc.Genotype([enc.LayerChoice(mes, agg, com, act)] * num_layers)


def full_pin(genotype):
    """Constraint dict pinning every slot to the given genotype."""
    pins = {}
    for l, layer in enumerate(genotype):
        for slot in enc.SLOT_NAMES:
            pins[(l, slot)] = getattr(layer, slot)
    return pins


# ---------------------------------------------------------------------------
# supernet / fine-tune training

def _onehot_scopes(queries, scopes, eta):
    p = np.zeros((len(queries), eta * eta))
    for row, q in enumerate(queries):
        i, j = scopes[q.as_tuple()]
        p[row, (i - 1) * eta + (j - 1)] = 1.0
    return p


def _training_batch(graph, batch, config, rng):
    """Targets, labels, scope-anchor keys, and exclusions for one mini-batch.

    For multi_label, each positive is paired with fresh corrupted negatives;
    a negative inherits its anchor positive's scope key.
    """
    if config.task == "multi_class":
        us = [t.head for t in batch]
        vs = [t.tail for t in batch]
        rels = np.asarray([t.relation for t in batch])
        keys = [t.as_tuple() for t in batch]
        return batch, us, vs, rels, None, keys
    positives = {t.as_tuple() for t in batch}
    rows, labels, keys = [], [], []
    for t in batch:
        rows.append(t)
        labels.append(1.0)
        keys.append(t.as_tuple())
        for _ in range(config.neg_per_positive):
            for _ in range(50):
                cand = int(rng.integers(graph.num_nodes))
                if bool(rng.integers(2)):
                    trial = (cand, t.relation, t.tail)
                else:
                    trial = (t.head, t.relation, cand)
                if trial not in positives and trial[0] != trial[2]:
                    rows.append(type(t)(*trial))
                    labels.append(0.0)
                    keys.append(t.as_tuple())
                    break
    us = [t.head for t in rows]
    vs = [t.tail for t in rows]
    rels = np.asarray([t.relation for t in rows])
    return batch, us, vs, rels, np.asarray(labels), keys


def train_supernet(graph, train_triples, config, params, rng, epochs=None,
                   pin=None, fixed_scope=None, scopes=None, opt_state=None):
    """Single-path one-shot training; returns per-epoch mean loss trace.

    pin constrains sampled genotypes; fixed_scope forces one (i, j) for every
    query; scopes forces a per-query (i, j) map.  Without either, training
    uses the Gumbel-Softmax scope mixture with fresh noise per batch.
    """
    epochs = config.supernet_epochs if epochs is None else epochs
    if opt_state is None:
        opt_state = T.OptimState(params.arrays, lr=config.learning_rate,
                                 weight_decay=config.weight_decay)
    trace = []
    n = len(train_triples)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = [train_triples[i] for i in order[start:start + config.batch_size]]
            genotype = enc.sample_path(rng, config.num_layers, constraints=pin)
            exclude, us, vs, rels, labels, keys = _training_batch(
                graph, batch, config, rng)
            tp = T.Tape()
            tensors = {k: tp.param(v) for k, v in sorted(params.arrays.items())}
            layers = enc.encode(graph, genotype, tensors, exclude=exclude)
            if fixed_scope is not None:
                reprs = sc.pair_reprs_batch(layers, us, vs, config.eta)
                p = np.zeros((len(us), config.eta ** 2))
                p[:, (fixed_scope[0] - 1) * config.eta + (fixed_scope[1] - 1)] = 1.0
            elif scopes is not None:
                reprs = sc.pair_reprs_batch(layers, us, vs, config.eta)
                p = np.stack([_onehot_row(scopes[k], config.eta) for k in keys])
            else:
                beta, reprs = sc.score_scope_table(layers, us, vs, config.eta, tensors)
                p = sc.gumbel_probs(beta, config.tau, rng)
            z = sc.mixture(p, reprs)
            logits = enc.predict(z, tensors)
            loss = enc.task_loss(logits, rels, config.task, labels)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}, "
                    f"genotype {genotype.to_json()}")
            tp.backward(loss)
            grads = {k: tp.grad(t) for k, t in tensors.items()}
            T.adam_step(params.arrays, grads, opt_state)
            losses.append(value)
        trace.append(float(np.mean(losses)) if losses else float("nan"))
    return trace, opt_state


# ---------------------------------------------------------------------------
# evaluation with frozen weights

def _eval_rows(bundle, split, negatives, config):
    """Queries plus (for multi_label) their fixed evaluation negatives.

    negatives[split] is a (triples, anchors) pair; anchors supply scope keys
    for the corrupted rows.
    """
    positives = list(getattr(bundle, split))
    if config.task == "multi_class":
        us = [t.head for t in positives]
        vs = [t.tail for t in positives]
        rels = np.asarray([t.relation for t in positives])
        keys = [t.as_tuple() for t in positives]
        return us, vs, rels, None, keys
    negs, anchors = negatives[split]
    rows = positives + list(negs)
    labels = np.asarray([1] * len(positives) + [0] * len(negs))
    keys = [t.as_tuple() for t in positives] + [a.as_tuple() for a in anchors]
    us = [t.head for t in rows]
    vs = [t.tail for t in rows]
    rels = np.asarray([t.relation for t in rows])
    return us, vs, rels, labels, keys


def evaluate_genotype(graph, params, genotype, bundle, config, split="valid",
                      negatives=None, scopes=None, full_report=False):
    """Frozen-weight evaluation of one genotype on a split.

    Scope handling: soft zero-noise mixture by default, or hard per-query
    scopes when a scope map is given.  Returns the scalar search metric, or a
    full metric report when full_report is set.
    """
    tensors = {k: T.Tensor(v) for k, v in sorted(params.arrays.items())}
    layers = enc.encode(graph, genotype, tensors)
    us, vs, rels, labels, keys = _eval_rows(bundle, split, negatives, config)
    beta, reprs = sc.score_scope_table(layers, us, vs, config.eta, tensors)
    if scopes is None:
        p = sc.gumbel_probs(beta, config.tau, rng=None)
    else:
        p = T.Tensor(np.stack([_onehot_row(scopes[k], config.eta) for k in keys]))
    z = sc.mixture(p, reprs)
    logits = enc.predict(z, tensors).data
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits during evaluation")
    if config.task == "multi_class":
        ev = M.MulticlassEval(rels, logits)
        return M.multiclass_report(ev) if full_report else M.accuracy(ev)
    scores = logits[np.arange(len(rels)), rels]
    ev = M.MultilabelEval(rels, scores, labels)
    return M.multilabel_report(ev) if full_report else M.pr_auc(ev)


def _onehot_row(ij, eta):
    row = np.zeros(eta * eta)
    row[(ij[0] - 1) * eta + (ij[1] - 1)] = 1.0
    return row


# ---------------------------------------------------------------------------
# partition and natural-gradient encoding search

@dataclass
class SubSupernet:
    pinned_mes: str
    params: "enc.SupernetParams"

    @property
    def pin(self):
        return {(0, "mes"): self.pinned_mes}


def partition(params):
    """Four copies of the supernet, each pinning the layer-1 message op."""
    return [SubSupernet(op, params.copy()) for op in enc.MES_OPS]


def train_subsupernets(children, graph, train_triples, config, master_seed):
    """Train each child with its pinned layer-1 message operator."""
    traces = []
    for idx, child in enumerate(children):
        rng = stage_rng(master_seed, f"subtrain_{idx}")
        trace, _ = train_supernet(graph, train_triples, config, child.params, rng,
                                  epochs=config.subsupernet_epochs, pin=child.pin)
        traces.append(trace)
    return traces


class ArchDistribution:
    """Per-slot categorical distribution over encoding operators."""

    def __init__(self, num_layers, pin=None):
        pin = dict(pin or {})
        self.slots = [(l, s) for l in range(num_layers) for s in enc.SLOT_NAMES]
        self.pinned = set()
        self.theta = {}
        for slot in self.slots:
            ops = enc.SLOT_CHOICES[slot[1]]
            if slot in pin:
                vec = np.zeros(len(ops))
                vec[ops.index(pin[slot])] = 1.0
                self.pinned.add(slot)
            else:
                vec = np.full(len(ops), 1.0 / len(ops))
            self.theta[slot] = vec

    def sample(self, rng):
        picks = {}
        for (l, s), vec in self.theta.items():
            ops = enc.SLOT_CHOICES[s]
            picks[(l, s)] = ops[int(rng.choice(len(ops), p=vec))]
        return enc.Genotype(
            enc.LayerChoice(*(picks[(l, s)] for s in enc.SLOT_NAMES))
            for l in range(len(self.theta) // len(enc.SLOT_NAMES)))

    def update(self, genotypes, utilities, delta):
        """theta_c += delta * mean(u * (1[choice=c] - theta_c)), then project."""
        for slot in self.slots:
            if slot in self.pinned:
                continue
            ops = enc.SLOT_CHOICES[slot[1]]
            vec = self.theta[slot]
            step = np.zeros_like(vec)
            for g, u in zip(genotypes, utilities):
                choice = ops.index(getattr(g[slot[0]], slot[1]))
                onehot = np.zeros_like(vec)
                onehot[choice] = 1.0
                step += u * (onehot - vec)
            vec += delta * step / len(genotypes)
            np.clip(vec, 0.0, None, out=vec)
            total = vec.sum()
            if total <= 0:
                vec[:] = 1.0 / len(vec)
            else:
                vec /= total

    def argmax_genotype(self):
        picks = {}
        for (l, s), vec in self.theta.items():
            picks[(l, s)] = enc.SLOT_CHOICES[s][int(np.argmax(vec))]
        num_layers = len(self.theta) // len(enc.SLOT_NAMES)
        return enc.Genotype(
            enc.LayerChoice(*(picks[(l, s)] for s in enc.SLOT_NAMES))
            for l in range(num_layers))

    def genotype_prob(self, genotype):
        prob = 1.0
        for (l, s) in self.slots:
            ops = enc.SLOT_CHOICES[s]
            prob *= self.theta[(l, s)][ops.index(getattr(genotype[l], s))]
        return prob


@dataclass
class SearchResult:
    genotypes: list
    scores: list
    winner: int
    distributions: list = field(repr=False, default=None)

    @property
    def best_genotype(self):
        return self.genotypes[self.winner]


def _ranking_utilities(scores):
    """+1 for the top half of the samples, -1 for the bottom half.

    Tied scores share the mean utility of the ranks they span, so a batch of
    identical scores yields all-zero utilities (no update signal).
    """
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    half = len(scores) // 2
    raw = [1.0 if rank < half else -1.0 for rank in range(len(scores))]
    utilities = np.zeros(len(scores))
    start = 0
    while start < len(order):
        stop = start
        while stop + 1 < len(order) and scores[order[stop + 1]] == scores[order[start]]:
            stop += 1
        shared = float(np.mean(raw[start:stop + 1]))
        for rank in range(start, stop + 1):
            utilities[order[rank]] = shared
        start = stop + 1
    return utilities


def search_encoding(children, graph, bundle, config, rng, evaluator=None,
                    negatives=None, steps=None):
    """Natural-gradient search over each child; returns the winning genotype.

    evaluator(child_index, genotype) -> validation score; defaults to the
    frozen-weight validation metric (accuracy or PR-AUC) with memoization.
    """
    steps = config.search_steps if steps is None else steps
    cache = {}

    def default_evaluator(idx, genotype):
        key = (idx, genotype)
        if key not in cache:
            score = evaluate_genotype(graph, children[idx].params, genotype,
                                      bundle, config, negatives=negatives)
            if not np.isfinite(score):
                raise NumericalError("validation metric is not finite")
            cache[key] = score
        return cache[key]

    evaluate = evaluator or default_evaluator
    dists, finals, scores = [], [], []
    for idx, child in enumerate(children):
        dist = ArchDistribution(config.num_layers, pin=child.pin)
        for _ in range(steps):
            samples = [dist.sample(rng) for _ in range(config.sample_size)]
            values = [evaluate(idx, g) for g in samples]
            dist.update(samples, _ranking_utilities(values), config.step_size)
        best = dist.argmax_genotype()
        dists.append(dist)
        finals.append(best)
        scores.append(float(evaluate(idx, best)))
    winner = int(np.argmax(scores))  # argmax breaks ties toward lower index
    return SearchResult(finals, scores, winner, dists)


# ---------------------------------------------------------------------------
# scope selection and fine-tuning

def search_scopes(params, genotype, graph, bundle, config, chunk=2048):
    """Zero-noise scope decision for every train/valid/test query."""
    tensors = {k: T.Tensor(v) for k, v in sorted(params.arrays.items())}
    layers = enc.encode(graph, genotype, tensors)
    queries = bundle.all_triples()
    decisions = []
    for start in range(0, len(queries), chunk):
        block = queries[start:start + chunk]
        us = [t.head for t in block]
        vs = [t.tail for t in block]
        beta, _ = sc.score_scope_table(layers, us, vs, config.eta, tensors)
        p = sc.gumbel_probs(beta, config.tau, rng=None).data
        for row, t in enumerate(block):
            i, j = sc.select_flat(p[row], config.eta)
            decisions.append(sc.ScopeDecision((t.head, t.relation, t.tail), i, j))
    histogram = sc.scope_histogram(decisions, config.eta)
    return decisions, histogram


def _loguniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


@dataclass
class FinetuneResult:
    params: "enc.SupernetParams"
    hyperparams: dict
    valid_metric: float
    valid_report: dict
    test_report: dict
    traces: list


def finetune(genotype, scopes, graph, bundle, config, rng, init_rng=None,
             negatives=None):
    """Independent trainings with sampled hyperparameters; best-valid wins.

    Each hyper step samples a learning rate and weight decay log-uniformly
    from the configured ranges, trains with hard per-query scopes and
    plateau-triggered learning-rate halving, and snapshots the parameters at
    its best validation epoch.  Test metrics come only from the run (and
    snapshot) with the best validation metric.
    """
    init_rng = init_rng or rng
    best = None
    traces = []
    for step in range(config.hyper_steps):
        lr = _loguniform(rng, *config.lr_range)
        wd = _loguniform(rng, *config.wd_range)
        params = enc.SupernetParams.init(
            init_rng, graph.num_nodes, graph.num_base_relations,
            config.dim, config.num_layers)
        opt = T.OptimState(params.arrays, lr=lr, weight_decay=wd)
        pin = full_pin(genotype)
        run_best_val, run_best_params, stall = -np.inf, None, 0
        trace = []
        for epoch in range(config.finetune_epochs):
            epoch_trace, _ = train_supernet(
                graph, list(bundle.train), config, params, rng, epochs=1,
                pin=pin, scopes=scopes, opt_state=opt)
            trace.extend(epoch_trace)
            val = evaluate_genotype(graph, params, genotype, bundle, config,
                                    split="valid", negatives=negatives,
                                    scopes=scopes)
            if val > run_best_val + 1e-12:
                run_best_val, run_best_params, stall = val, params.copy(), 0
            else:
                stall += 1
                if stall >= config.plateau_patience:
                    # floor keeps repeated halvings from freezing the run
                    opt.lr = max(opt.lr * 0.5, lr / 16.0)
                    stall = 0
        traces.append(trace)
        if best is None or run_best_val > best[0]:
            best = (run_best_val, run_best_params, {"learning_rate": lr,
                                                    "weight_decay": wd})
    if best is None or best[1] is None:
        raise StageError("finetune", "all fine-tuning runs diverged")
    val_metric, params, hp = best
    valid_report = evaluate_genotype(graph, params, genotype, bundle, config,
                                     split="valid", negatives=negatives,
                                     scopes=scopes, full_report=True)
    test_report = evaluate_genotype(graph, params, genotype, bundle, config,
                                    split="test", negatives=negatives,
                                    scopes=scopes, full_report=True)
    return FinetuneResult(params, hp, float(val_metric), valid_report,
                          test_report, traces)


# ---------------------------------------------------------------------------
# end-to-end pipeline

@dataclass
class RunReport:
    config_digest: str
    seeds: dict
    genotypes: list
    winner: int
    scopes_path: str
    metrics: dict
    timings: str

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def run_pipeline(config, triples, num_nodes, num_relations, master_seed,
                 scopes_path="scopes.tsv", timings_path="timings.csv"):
    """Full search pipeline on in-memory triples.

    Returns (report, artifacts) where artifacts carries the trained params,
    splits, scope decisions, histogram, traces, and timings for persistence.
    """
    timings = {}

    def timed(stage, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except (NumericalError, ValueError, RuntimeError) as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(stage, str(exc)) from exc
        timings[stage] = time.perf_counter() - t0
        return result

    bundle = timed("split", lambda: make_splits(
        triples, config.split_mode, config.split_ratios,
        seed=int(stage_rng(master_seed, "split").integers(2 ** 31)),
        emerging_fraction=config.emerging_fraction))
    graph = timed("graph", lambda: RelGraph(bundle.train, num_nodes, num_relations))

    negatives = None
    if config.task == "multi_label":
        neg_rng = stage_rng(master_seed, "negatives")
        negatives = {}
        for split in ("valid", "test"):
            negs, _, anchors = sample_negatives(
                bundle, graph, config.neg_per_positive,
                seed=int(neg_rng.integers(2 ** 31)),
                subset=getattr(bundle, split), with_anchors=True)
            negatives[split] = (negs, anchors)

    init = stage_rng(master_seed, "init")
    params = enc.SupernetParams.init(init, num_nodes, num_relations,
                                     config.dim, config.num_layers)

    genotypes_out = []
    winner = -1
    if config.variant == "fixed_function":
        genotype = fixed_function_genotype(config.num_layers)
        rng = stage_rng(master_seed, "supernet")
        timed("supernet", lambda: train_supernet(
            graph, list(bundle.train), config, params, rng,
            pin=full_pin(genotype)))
        winner_params = params
        genotypes_out = [json.loads(genotype.to_json())]
        winner = 0
    else:
        fixed = (config.eta, config.eta) if config.variant == "fixed_scope" else None
        rng = stage_rng(master_seed, "supernet")
        timed("supernet", lambda: train_supernet(
            graph, list(bundle.train), config, params, rng, fixed_scope=fixed))
        children = timed("partition", lambda: partition(params))
        timed("subtrain", lambda: [
            train_supernet(graph, list(bundle.train), config, child.params,
                           stage_rng(master_seed, f"subtrain_{i}"),
                           epochs=config.subsupernet_epochs, pin=child.pin,
                           fixed_scope=fixed)
            for i, child in enumerate(children)])
        result = timed("search", lambda: search_encoding(
            children, graph, bundle, config, stage_rng(master_seed, "search"),
            negatives=negatives))
        genotype = result.best_genotype
        winner = result.winner
        winner_params = children[winner].params
        genotypes_out = [json.loads(g.to_json()) for g in result.genotypes]

    if config.variant == "fixed_scope":
        decisions = [sc.ScopeDecision(t.as_tuple(), config.eta, config.eta)
                     for t in bundle.all_triples()]
        histogram = sc.scope_histogram(decisions, config.eta)
    else:
        decisions, histogram = timed("scopes", lambda: search_scopes(
            winner_params, genotype, graph, bundle, config))
    scope_map = {d.query: (d.i, d.j) for d in decisions}

    ft = timed("finetune", lambda: finetune(
        genotype, scope_map, graph, bundle, config,
        stage_rng(master_seed, "finetune"), negatives=negatives))

    seeds = {"master": master_seed,
             "stages": {name: f"SeedSequence({master_seed}, spawn_key=({sid},))"
                        for name, sid in STAGE_IDS.items()}}
    report = RunReport(
        config_digest=config.digest(),
        seeds=seeds,
        genotypes=genotypes_out,
        winner=winner,
        scopes_path=scopes_path,
        metrics={"search_genotype": json.loads(genotype.to_json()),
                 "valid": ft.valid_report,
                 "test": ft.test_report,
                 "hyperparams": ft.hyperparams},
        timings=timings_path,
    )
    artifacts = {
        "bundle": bundle,
        "graph": graph,
        "genotype": genotype,
        "decisions": decisions,
        "histogram": histogram,
        "finetune": ft,
        "timings": timings,
        "params": ft.params,
    }
    return report, artifacts
