"""Command-line surface: stage-by-stage reproducible runs.

Every stage reads its prerequisites from the run's output directory and
writes plain-file artifacts (TSV/JSON/CSV) stamped with the config digest
and master seed, so stages are independently inspectable and re-runnable.
Exit codes: 0 success, 1 usage/config error, 2 stage failure, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import encoder as enc
from . import scope as sc
from . import search as S
from . import synth as SY
from . import tape as T
from .graph import (GraphError, RelGraph, SplitBundle, Triple, load_triples,
                    make_splits, sample_negatives, save_triples)

ENV_OUTPUT_ROOT = "DDISEARCH_OUTPUT_ROOT"

STAGES = ("ingest", "split", "synth", "supernet", "partition", "subtrain",
          "search", "scopes", "finetune", "eval", "report", "gradcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config

DEFAULT_CONFIG = {
    "data": {"triples": None, "num_nodes": None, "num_relations": None},
    "output_dir": None,
    "master_seed": 0,
    "search": {},
    "synth": {},
}


def load_config(path, overrides=()):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config parse error in {path}: line {exc.lineno}: {exc.msg}")
    config = json.loads(json.dumps(DEFAULT_CONFIG))
    _deep_update(config, raw)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = parsed
    return config


def _deep_update(base, extra):
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


def search_config(config) -> S.SearchConfig:
    fields = dict(config.get("search", {}))
    for key in ("lr_range", "wd_range", "split_ratios"):
        if key in fields:
            fields[key] = tuple(fields[key])
    try:
        return S.SearchConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid search config: {exc}")


def synth_spec(config) -> SY.SynthSpec:
    fields = dict(config.get("synth", {}))
    for key in ("symmetric_relations", "asymmetric_relations"):
        if key in fields:
            fields[key] = tuple(fields[key])
    if "rules" in fields:
        fields["rules"] = tuple(tuple(r) for r in fields["rules"])
    try:
        return SY.SynthSpec(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}")


def _stamp(config):
    return {"config_digest": search_config(config).digest(),
            "master_seed": config["master_seed"]}


# ---------------------------------------------------------------------------
# artifact helpers

def _out_dir(config):
    out = config.get("output_dir")
    if not out:
        root = os.environ.get(ENV_OUTPUT_ROOT, ".")
        out = os.path.join(root, "ddisearch-run")
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2, default=list) + "\n")


def _read_json(path, stage):
    if not os.path.exists(path):
        raise StageMissing(stage, path)
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_trace(path, trace):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(trace):
            writer.writerow([epoch, repr(float(loss))])


class StageMissing(Exception):
    def __init__(self, stage, path):
        super().__init__(f"stage {stage!r}: missing prerequisite artifact {path}")
        self.path = path


class _Lock:
    """Exclusive ownership of an output directory for one invocation."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"output directory is locked: {self.path}")
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


def _record_timing(out_dir, stage, seconds):
    path = os.path.join(out_dir, "timings.csv")
    rows = {}
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                if row:
                    rows[row[0]] = row[1]
    rows[stage] = f"{seconds:.3f}"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "seconds"])
        for name in sorted(rows):
            writer.writerow([name, rows[name]])


def _load_data(config, out_dir):
    path = config["data"].get("triples") or os.path.join(out_dir, "triples.tsv")
    if not os.path.exists(path):
        raise StageMissing("data", path)
    return load_triples(path, config["data"].get("num_nodes"),
                        config["data"].get("num_relations"))


def _load_bundle(config, out_dir):
    meta = _read_json(os.path.join(out_dir, "split.json"), "split")
    bundle = SplitBundle(
        train=_read_split(out_dir, "train"),
        valid=_read_split(out_dir, "valid"),
        test=_read_split(out_dir, "test"),
        mode=meta["mode"], seed=meta["seed"],
        emerging_nodes=frozenset(meta.get("emerging_nodes", [])))
    return bundle


def _read_split(out_dir, name):
    path = os.path.join(out_dir, f"{name}.txt")
    if not os.path.exists(path):
        raise StageMissing("split", path)
    triples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                h, r, t = (int(x) for x in line.split("\t"))
                triples.append(Triple(h, r, t))
    return triples


def _build_graph(config, out_dir):
    _, num_nodes, num_rels = _load_data(config, out_dir)
    bundle = _load_bundle(config, out_dir)
    return RelGraph(bundle.train, num_nodes, num_rels), bundle


def _negatives(config, cfg, graph, bundle):
    if cfg.task != "multi_label":
        return None
    neg_rng = S.stage_rng(config["master_seed"], "negatives")
    negatives = {}
    for split in ("valid", "test"):
        negs, _, anchors = sample_negatives(
            bundle, graph, cfg.neg_per_positive,
            seed=int(neg_rng.integers(2 ** 31)),
            subset=getattr(bundle, split), with_anchors=True)
        negatives[split] = (negs, anchors)
    return negatives


def _load_scope_map(out_dir, bundle):
    path = os.path.join(out_dir, "scopes.tsv")
    if not os.path.exists(path):
        raise StageMissing("scopes", path)
    pair_scope = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                u, v, i, j = (int(x) for x in line.split("\t"))
                pair_scope[(u, v)] = (i, j)
    return {t.as_tuple(): pair_scope[(t.head, t.tail)]
            for t in bundle.all_triples()}


def _load_genotype(out_dir):
    meta = _read_json(os.path.join(out_dir, "search.json"), "search")
    genotype = enc.Genotype.from_json(json.dumps(meta["genotypes"][meta["winner"]]))
    return genotype, meta


def _check_stamp(meta, stamp, path):
    for key in ("config_digest", "master_seed"):
        if meta.get(key) != stamp[key]:
            raise UsageError(
                f"{path}: {key} mismatch (artifact {meta.get(key)!r} vs "
                f"config {stamp[key]!r}); refusing to aggregate")


# ---------------------------------------------------------------------------
# stage implementations

def stage_synth(config, out_dir):
    spec = synth_spec(config)
    triples, meta = SY.generate(spec)
    save_triples(os.path.join(out_dir, "triples.tsv"), triples)
    _write_json(os.path.join(out_dir, "rules.json"), {**_stamp(config), **meta})


def stage_ingest(config, out_dir):
    triples, num_nodes, num_rels = _load_data(config, out_dir)
    _write_json(os.path.join(out_dir, "ingest.json"), {
        **_stamp(config),
        "num_triples": len(triples),
        "num_nodes": num_nodes,
        "num_relations": num_rels,
    })


def stage_split(config, out_dir):
    cfg = search_config(config)
    triples, _, _ = _load_data(config, out_dir)
    seed = int(S.stage_rng(config["master_seed"], "split").integers(2 ** 31))
    bundle = make_splits(triples, cfg.split_mode, cfg.split_ratios, seed=seed,
                         emerging_fraction=cfg.emerging_fraction)
    for name in ("train", "valid", "test"):
        save_triples(os.path.join(out_dir, f"{name}.txt"), getattr(bundle, name))
    _write_json(os.path.join(out_dir, "split.json"), {
        **_stamp(config), "mode": bundle.mode, "seed": bundle.seed,
        "sizes": {"train": len(bundle.train), "valid": len(bundle.valid),
                  "test": len(bundle.test)},
        "emerging_nodes": sorted(bundle.emerging_nodes),
    })


def stage_supernet(config, out_dir):
    cfg = search_config(config)
    graph, bundle = _build_graph(config, out_dir)
    params = enc.SupernetParams.init(
        S.stage_rng(config["master_seed"], "init"), graph.num_nodes,
        graph.num_base_relations, cfg.dim, cfg.num_layers)
    rng = S.stage_rng(config["master_seed"], "supernet")
    fixed = (cfg.eta, cfg.eta) if cfg.variant == "fixed_scope" else None
    pin = (S.full_pin(S.fixed_function_genotype(cfg.num_layers))
           if cfg.variant == "fixed_function" else None)
    trace, _ = S.train_supernet(graph, list(bundle.train), cfg, params, rng,
                                pin=pin, fixed_scope=fixed)
    params.save(os.path.join(out_dir, "supernet.params"), meta=_stamp(config))
    _write_trace(os.path.join(out_dir, "supernet_loss.csv"), trace)
    _write_json(os.path.join(out_dir, "supernet.json"),
                {**_stamp(config), "epochs": cfg.supernet_epochs})


def stage_partition(config, out_dir):
    path = os.path.join(out_dir, "supernet.params")
    if not os.path.exists(path):
        raise StageMissing("supernet", path)
    params, _ = enc.SupernetParams.load(path)
    children = S.partition(params)
    for idx, child in enumerate(children):
        child.params.save(os.path.join(out_dir, f"child_{idx}.params"),
                          meta={**_stamp(config), "pinned_mes": child.pinned_mes,
                                "trained": False})
    _write_json(os.path.join(out_dir, "partition.json"),
                {**_stamp(config), "pins": [c.pinned_mes for c in children]})


def stage_subtrain(config, out_dir):
    cfg = search_config(config)
    graph, bundle = _build_graph(config, out_dir)
    fixed = (cfg.eta, cfg.eta) if cfg.variant == "fixed_scope" else None
    for idx, op in enumerate(enc.MES_OPS):
        path = os.path.join(out_dir, f"child_{idx}.params")
        if not os.path.exists(path):
            raise StageMissing("partition", path)
        params, meta = enc.SupernetParams.load(path)
        child = S.SubSupernet(op, params)
        trace, _ = S.train_supernet(
            graph, list(bundle.train), cfg, child.params,
            S.stage_rng(config["master_seed"], f"subtrain_{idx}"),
            epochs=cfg.subsupernet_epochs, pin=child.pin, fixed_scope=fixed)
        child.params.save(path, meta={**_stamp(config), "pinned_mes": op,
                                      "trained": True})
        _write_trace(os.path.join(out_dir, f"subtrain_loss_{idx}.csv"), trace)
    _write_json(os.path.join(out_dir, "subtrain.json"),
                {**_stamp(config), "epochs": cfg.subsupernet_epochs})


def _load_children(config, out_dir, require_trained=True):
    children = []
    for idx, op in enumerate(enc.MES_OPS):
        path = os.path.join(out_dir, f"child_{idx}.params")
        if not os.path.exists(path):
            raise StageMissing("subtrain", path)
        params, meta = enc.SupernetParams.load(path)
        if require_trained and not meta.get("trained"):
            raise StageMissing("subtrain", path)
        children.append(S.SubSupernet(op, params))
    return children


def stage_search(config, out_dir):
    cfg = search_config(config)
    graph, bundle = _build_graph(config, out_dir)
    if cfg.variant == "fixed_function":
        genotype = S.fixed_function_genotype(cfg.num_layers)
        payload = {"genotypes": [json.loads(genotype.to_json())], "scores": [],
                   "winner": 0}
    else:
        children = _load_children(config, out_dir)
        result = S.search_encoding(
            children, graph, bundle, cfg,
            S.stage_rng(config["master_seed"], "search"),
            negatives=_negatives(config, cfg, graph, bundle))
        payload = {"genotypes": [json.loads(g.to_json()) for g in result.genotypes],
                   "scores": result.scores, "winner": result.winner}
    _write_json(os.path.join(out_dir, "search.json"), {**_stamp(config), **payload})


def stage_scopes(config, out_dir):
    cfg = search_config(config)
    graph, bundle = _build_graph(config, out_dir)
    genotype, meta = _load_genotype(out_dir)
    if cfg.variant == "fixed_function":
        params_path = os.path.join(out_dir, "supernet.params")
        if not os.path.exists(params_path):
            raise StageMissing("supernet", params_path)
        params, _ = enc.SupernetParams.load(params_path)
    else:
        params = _load_children(config, out_dir)[meta["winner"]].params
    if cfg.variant == "fixed_scope":
        decisions = [sc.ScopeDecision(t.as_tuple(), cfg.eta, cfg.eta)
                     for t in bundle.all_triples()]
        histogram = sc.scope_histogram(decisions, cfg.eta)
    else:
        decisions, histogram = S.search_scopes(params, genotype, graph, bundle, cfg)
    pairs = {}
    for d in decisions:
        pairs[(d.query[0], d.query[2])] = (d.i, d.j)
    with open(os.path.join(out_dir, "scopes.tsv"), "w", encoding="utf-8") as fh:
        for (u, v) in sorted(pairs):
            i, j = pairs[(u, v)]
            fh.write(f"{u}\t{v}\t{i}\t{j}\n")
    _write_json(os.path.join(out_dir, "histogram.json"),
                {**_stamp(config), "eta": cfg.eta,
                 "counts": histogram.tolist(),
                 "num_decisions": int(histogram.sum())})


def stage_finetune(config, out_dir):
    cfg = search_config(config)
    graph, bundle = _build_graph(config, out_dir)
    genotype, _ = _load_genotype(out_dir)
    scope_map = _load_scope_map(out_dir, bundle)
    ft = S.finetune(genotype, scope_map, graph, bundle, cfg,
                    S.stage_rng(config["master_seed"], "finetune"),
                    negatives=_negatives(config, cfg, graph, bundle))
    ft.params.save(os.path.join(out_dir, "final.params"), meta=_stamp(config))
    _write_json(os.path.join(out_dir, "finetune.json"), {
        **_stamp(config),
        "genotype": json.loads(genotype.to_json()),
        "hyperparams": ft.hyperparams,
        "valid_metric": ft.valid_metric,
        "valid": ft.valid_report,
        "test": ft.test_report,
    })


def stage_eval(config, out_dir):
    cfg = search_config(config)
    graph, bundle = _build_graph(config, out_dir)
    genotype, _ = _load_genotype(out_dir)
    scope_map = _load_scope_map(out_dir, bundle)
    path = os.path.join(out_dir, "final.params")
    if not os.path.exists(path):
        raise StageMissing("finetune", path)
    params, _ = enc.SupernetParams.load(path)
    negatives = _negatives(config, cfg, graph, bundle)
    payload = {**_stamp(config), "task": cfg.task}
    for split in ("valid", "test"):
        payload[split] = S.evaluate_genotype(
            graph, params, genotype, bundle, cfg, split=split,
            negatives=negatives, scopes=scope_map, full_report=True)
    _write_json(os.path.join(out_dir, "metrics.json"), payload)


def stage_report(config, out_dir):
    stamp = _stamp(config)
    search_meta = _read_json(os.path.join(out_dir, "search.json"), "search")
    finetune_meta = _read_json(os.path.join(out_dir, "finetune.json"), "finetune")
    histogram = _read_json(os.path.join(out_dir, "histogram.json"), "scopes")
    for meta, path in ((search_meta, "search.json"),
                       (finetune_meta, "finetune.json"),
                       (histogram, "histogram.json")):
        _check_stamp(meta, stamp, path)
    report = S.RunReport(
        config_digest=stamp["config_digest"],
        seeds={"master": config["master_seed"],
               "stages": {name: f"SeedSequence({config['master_seed']}, "
                                f"spawn_key=({sid},))"
                          for name, sid in S.STAGE_IDS.items()}},
        genotypes=search_meta["genotypes"],
        winner=search_meta["winner"],
        scopes_path="scopes.tsv",
        metrics={"search_genotype": finetune_meta["genotype"],
                 "valid": finetune_meta["valid"],
                 "test": finetune_meta["test"],
                 "hyperparams": finetune_meta["hyperparams"]},
        timings="timings.csv",
    )
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())


def stage_gradcheck(config, out_dir):
    worst = run_gradcheck()
    print(f"gradcheck max relative error: {worst:.3e}")
    _write_json(os.path.join(out_dir, "gradcheck.json"),
                {**_stamp(config), "max_relative_error": worst})
    if worst >= 1e-5:
        raise S.NumericalError(f"gradient check failed: {worst:.3e} >= 1e-5")


def run_gradcheck(seeds=(0, 1, 2), dims=(2, 4, 8)):
    """Finite-difference sweep over the operator set; returns max rel error."""
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for d in dims:
            a = rng.normal(size=d)
            b = rng.normal(size=d)
            phases = rng.normal(size=d // 2) if d % 2 == 0 else None
            cases = [
                (lambda x, y: T.sum_all(T.circ_corr(x, y)), [a, b]),
                (lambda x, y: T.sum_all(T.mul(T.tanh(x), T.sigmoid(y))), [a, b]),
                (lambda x, y: T.sum_all(T.relu(T.sub(x, y))), [a, b]),
            ]
            if phases is not None:
                cases.append((lambda x, p: T.sum_all(T.complex_rotate(x, p)),
                              [a, phases]))
            msgs = rng.normal(size=(5, d))
            targets = rng.integers(0, 3, size=5)
            for kind in T.AGG_KINDS:
                cases.append((
                    (lambda k: lambda m: T.sum_all(
                        T.tanh(T.segment_aggregate(m, targets, 3, k))))(kind),
                    [msgs]))
            logits = rng.normal(size=(4, 3))
            labels = rng.integers(0, 2, size=4).astype(float)
            cases.append((lambda x: T.softmax_cross_entropy(x, [0, 2, 1, 0]),
                          [logits]))
            cases.append((lambda x: T.binary_cross_entropy(
                T.take_per_row(x, [0, 1, 2, 0]), labels), [logits]))
            for fn, params in cases:
                worst = max(worst, T.finite_diff_check(fn, params))
    return worst


# ---------------------------------------------------------------------------
# entry point

STAGE_FUNCS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "split": stage_split,
    "supernet": stage_supernet,
    "partition": stage_partition,
    "subtrain": stage_subtrain,
    "search": stage_search,
    "scopes": stage_scopes,
    "finetune": stage_finetune,
    "eval": stage_eval,
    "report": stage_report,
    "gradcheck": stage_gradcheck,
}


def main(argv=None):
    parser = _Parser(prog="ddisearch", description=__doc__)
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", required=True, help="JSON config path")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a scalar config field (dotted path)")
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config, args.set)
        out_dir = _out_dir(config)
        with _Lock(out_dir):
            t0 = time.perf_counter()
            STAGE_FUNCS[args.stage](config, out_dir)
            _record_timing(out_dir, args.stage, time.perf_counter() - t0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StageMissing as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (S.NumericalError, T.NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (S.StageError, GraphError, ValueError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
