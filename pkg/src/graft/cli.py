"""Command-line entry point: ``graft <subcommand> [--config run.json] [paths]``.

Every invocation writes into a fresh run directory
``<runs>/<timestamp>-<config hash>`` that is assembled under a temporary
name and renamed into place when complete.  Failures print one JSON line
(``{"error": kind, "message": ...}``) to standard error and exit with 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from contextlib import contextmanager

import numpy as np

from . import instructions as ins
from . import numerics as nx
from .config import ConfigError, RunConfig, load_config
from .evaluation import MetricError, evaluate_by_task, token_budget
from .graph_store import GraphFormatError, generate_sbm, load_graph, save_graph
from .grounding import init_grounding_params, run_grounding
from .lm_pretrain import BASE_LM_DIR, load_base_lm, pretrain_lm
from .projector_lm import init_projector
from .tokenizer import load_vocab, save_vocab
from .tuning import TuneConfig, TuningError, tune_stage1, tune_stage2

log = logging.getLogger("graft")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ----------------------------------------------------------------------------
# run directories and atomic output
# ----------------------------------------------------------------------------


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_fingerprint(path: str) -> str:
    """Content hash of a file or of every file under a directory (sorted relative paths)."""
    if os.path.isfile(path):
        return sha256_file(path)
    h = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            h.update(os.path.relpath(full, path).encode())
            h.update(sha256_file(full).encode())
    return h.hexdigest()


def write_json(path: str, obj) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    os.replace(tmp, path)


def write_jsonl(path: str, rows) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, default=_json_default) + "\n")
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset, tuple)):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


@contextmanager
def run_directory(root: str, command: str, cfg: RunConfig, inputs: dict):
    """Yield a staging directory that becomes ``<root>/<timestamp>-<hash>`` on success."""
    echo = {"command": command, "config": cfg.to_json(), "inputs": inputs}
    digest = hashlib.sha256(json.dumps(echo, sort_keys=True, default=_json_default).encode()).hexdigest()[:12]
    name = f"{time.strftime('%Y%m%d-%H%M%S')}-{digest}"
    os.makedirs(root, exist_ok=True)
    final = os.path.join(root, name)
    suffix = 1
    while os.path.exists(final):
        final = os.path.join(root, f"{name}-{suffix}")
        suffix += 1
    staging = os.path.join(root, f".staging-{os.path.basename(final)}-{os.getpid()}")
    os.makedirs(staging)
    try:
        write_json(os.path.join(staging, "config.json"), echo)
        yield staging
        artifacts = {}
        for base, _, files in os.walk(staging):
            for f in sorted(files):
                rel = os.path.relpath(os.path.join(base, f), staging)
                if rel not in ("report.json", "artifacts.json"):
                    artifacts[rel] = sha256_file(os.path.join(base, f))
        write_json(os.path.join(staging, "artifacts.json"), dict(sorted(artifacts.items())))
        os.replace(staging, final)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    print(final)


# ----------------------------------------------------------------------------
# inputs
# ----------------------------------------------------------------------------


def _require(path: str | None, kind: str, what: str) -> str:
    if path is None:
        raise CliError(kind, f"{what} is required")
    if not os.path.exists(path):
        raise CliError(kind, f"{what} not found: {path}")
    return path


def _load_graph(path: str | None):
    path = _require(path, "missing_input", "--graph bundle")
    try:
        return load_graph(path)
    except (GraphFormatError, OSError, ValueError) as exc:
        raise CliError("malformed_graph", str(exc)) from exc


def _load_checkpoint(path: str | None, what: str) -> nx.ParamStore:
    path = _require(path, "missing_checkpoint", what)
    try:
        return nx.load_checkpoint(path)
    except nx.CheckpointError as exc:
        raise CliError("malformed_checkpoint", str(exc)) from exc


def _load_base(path: str | None):
    try:
        return load_base_lm(path)
    except FileNotFoundError as exc:
        raise CliError("missing_checkpoint", str(exc)) from exc


def _load_corpus(path: str | None, g):
    path = _require(path, "missing_input", "--corpus")
    try:
        return ins.load_corpus(path, g)
    except (ins.InstructionError, json.JSONDecodeError, KeyError, GraphFormatError, ValueError) as exc:
        raise CliError("malformed_corpus", f"{path}: {exc}") from exc


def _vocab_for(args):
    if args.vocab:
        return load_vocab(_require(args.vocab, "missing_input", "--vocab"))
    return load_vocab(os.path.join(args.base_lm or BASE_LM_DIR, "vocab.txt"))


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> None:
    d = cfg.data
    g = generate_sbm(d.blocks, d.per_block, d.p_in, d.p_out, d.vocab_per_block, np.random.default_rng(cfg.seed), d.text_len, d.noise_vocab, d.noise_frac)
    with run_directory(args.runs, "gen-data", cfg, {}) as out:
        save_graph(g, os.path.join(out, "graph"))
        write_json(os.path.join(out, "report.json"), {"nodes": g.node_count, "edges": len(g.undirected_edges()), "classes": list(g.class_names)})


def cmd_pretrain_lm(args, cfg: RunConfig) -> None:
    from .lm_pretrain import base_vocab

    d = cfg.data

    def make_graph(rng):
        return generate_sbm(d.blocks, d.per_block, d.p_in, d.p_out, d.vocab_per_block, rng, d.text_len, d.noise_vocab, d.noise_frac)

    vocab = base_vocab()
    with run_directory(args.runs, "pretrain-lm", cfg, {}) as out:
        params, report = pretrain_lm(make_graph, vocab, cfg.pretrain, log=log.info)
        nx.save_checkpoint(params, os.path.join(out, "lm.ckpt"))
        save_vocab(vocab, os.path.join(out, "vocab.txt"))
        write_json(os.path.join(out, "report.json"), report)


def cmd_ground(args, cfg: RunConfig) -> None:
    g = _load_graph(_first(args.graph))
    vocab = _vocab_for(args)
    params = init_grounding_params(vocab, cfg.grounding, np.random.default_rng(cfg.seed))
    with run_directory(args.runs, "ground", cfg, {"graph": tree_fingerprint(_first(args.graph))}) as out:
        params, report = run_grounding(g, vocab, params, cfg.grounding)
        nx.save_checkpoint(params, os.path.join(out, "grounding.ckpt"))
        write_json(os.path.join(out, "report.json"), report)
        log.info("grounding retrieval accuracy %.3f", report["retrieval_accuracy"])


def build_corpus(g, cfg: RunConfig) -> list:
    """Corpus requested by the ``instructions`` section, mixed and shuffled deterministically."""
    ic = cfg.instructions
    rng = np.random.default_rng(cfg.seed)
    parts = []
    for task in ic.tasks:
        if task == "graph_matching":
            centers = rng.choice(g.node_count, ic.matching_samples, replace=ic.matching_samples > g.node_count)
            parts.append((ins.build_matching_corpus(g, centers, ic.matching, rng), 1.0))
        elif task == "node_classification":
            centers = rng.choice(g.node_count, ic.classification_samples, replace=ic.classification_samples > g.node_count)
            styles = ["std", "cot"] if ic.style == "mix_50_50" else [ic.style]
            for style in styles:
                parts.append((ins.build_classification_corpus(g, centers, ic.classification, style, rng), 1.0))
        elif task == "link_prediction":
            parts.append((ins.build_link_corpus(g, ic.link_pairs, ic.link, rng), 1.0))
        else:
            raise CliError("malformed_config", f"unknown task {task!r}")
    if ic.with_link and "link_prediction" not in ic.tasks:
        parts.append((ins.build_link_corpus(g, ic.link_pairs, ic.link, rng), 1.0))
    strategy = "with_link" if (ic.with_link or "link_prediction" in ic.tasks) else ic.style
    return ins.mix_corpora(parts, strategy, rng)


def cmd_build_instructions(args, cfg: RunConfig) -> None:
    g = _load_graph(_first(args.graph))
    try:
        corpus = build_corpus(g, cfg)
    except ins.InstructionError as exc:
        raise CliError("malformed_config", str(exc)) from exc
    with run_directory(args.runs, "build-instructions", cfg, {"graph": tree_fingerprint(_first(args.graph))}) as out:
        ins.save_corpus(corpus, os.path.join(out, "corpus.jsonl"))
        counts = {}
        for s in corpus:
            counts[f"{s.task}/{s.style}"] = counts.get(f"{s.task}/{s.style}", 0) + 1
        write_json(os.path.join(out, "report.json"), {"samples": len(corpus), "by_task": counts})


def _first(paths):
    return paths[0] if paths else None


def _provenance_path(ckpt: str) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(ckpt)), "provenance.json")


def cmd_tune(args, cfg: RunConfig) -> None:
    graph_path = _first(args.graph)
    g = _load_graph(graph_path)
    stage = args.stage
    tcfg: TuneConfig = cfg.stage1 if stage == 1 else cfg.stage2
    if args.skip_stage1:
        if stage != 2:
            raise CliError("malformed_config", "--skip-stage1 applies to --stage 2 only")
        tcfg.skip_stage1 = True
    if stage == 2 and not args.skip_stage1:
        params = _load_checkpoint(args.stage1, "stage-1 checkpoint (--stage1, or pass --skip-stage1)")
        vocab = _vocab_for(args)
    else:
        grounding = _load_checkpoint(args.grounding, "grounding checkpoint (--grounding)")
        params, vocab = _load_base(args.base_lm)
        params.merge(nx.ParamStore((n, t) for n, t in grounding))
        if stage == 1:
            d_graph = params["graph_encoder.w0"].shape[1]
            params.merge(init_projector(d_graph, params["lm.token_embeddings"].shape[1], np.random.default_rng(tcfg.seed)))
    corpus = _load_corpus(args.corpus, g)
    inputs = {"graph": tree_fingerprint(graph_path), "corpus": tree_fingerprint(args.corpus)}
    try:
        with run_directory(args.runs, f"tune-stage{stage}", cfg, inputs) as out:
            fn = tune_stage1 if stage == 1 else tune_stage2
            params, report = fn(tcfg, params, vocab, g, corpus, log=log.info)
            nx.save_checkpoint(params, os.path.join(out, f"stage{stage}.ckpt"))
            save_vocab(vocab, os.path.join(out, "vocab.txt"))
            write_json(os.path.join(out, "provenance.json"), {"tuned_on_graph": inputs["graph"], "stage": stage})
            write_json(os.path.join(out, "report.json"), report)
            for task, rep in report["heldout"].items():
                log.info("held-out %s accuracy %.3f", task, rep["accuracy"])
    except TuningError as exc:
        raise CliError("corpus_task_mismatch" if "corpus" in str(exc) else "tuning_error", str(exc)) from exc


def cmd_eval(args, cfg: RunConfig) -> None:
    graph_path = _first(args.graph)
    g = _load_graph(graph_path)
    ckpt = _require(args.checkpoint, "missing_checkpoint", "--checkpoint")
    params = _load_checkpoint(ckpt, "--checkpoint")
    vocab = load_vocab(args.vocab) if args.vocab else load_vocab(os.path.join(os.path.dirname(os.path.abspath(ckpt)), "vocab.txt"))
    corpus = _load_corpus(args.corpus, g)
    if cfg.eval.max_samples is not None:
        corpus = corpus[: cfg.eval.max_samples]
    graph_fp = tree_fingerprint(graph_path)
    tuned_on = None
    if os.path.exists(_provenance_path(ckpt)):
        with open(_provenance_path(ckpt), encoding="utf-8") as fh:
            tuned_on = json.load(fh).get("tuned_on_graph")
    if args.zero_shot and tuned_on == graph_fp:
        raise CliError("corpus_task_mismatch", "--zero-shot needs a graph the checkpoint was not tuned on")
    mode = "zero-shot" if args.zero_shot else "supervised"
    echo = {"mode": mode, "eval_graph": graph_fp, "tuned_on_graph": tuned_on, "checkpoint": sha256_file(ckpt)}
    try:
        reports = evaluate_by_task(params, vocab, g, corpus, heads=cfg.eval.heads, config=echo)
    except MetricError as exc:
        raise CliError("corpus_task_mismatch", str(exc)) from exc
    with run_directory(args.runs, "eval", cfg, {**echo, "corpus": tree_fingerprint(args.corpus)}) as out:
        write_json(os.path.join(out, "eval.json"), {t: r.to_json() for t, r in reports.items()})
        write_jsonl(os.path.join(out, "transcripts.jsonl"), [dict(task=t, **row) for t, r in reports.items() for row in r.transcripts])
        for task, r in reports.items():
            log.info("%s %s accuracy %.3f", mode, task, r.accuracy)


def cmd_token_budget(args, cfg: RunConfig) -> None:
    graph_path = _first(args.graph)
    g = _load_graph(graph_path)
    vocab = _vocab_for(args)
    corpus = _load_corpus(args.corpus, g)
    rows = []
    for s in corpus:
        graph_tokens, text_tokens = token_budget(s, vocab, g)
        rows.append({"task": s.task, "nodes": [len(x) for x in s.subgraphs], "graph_prompt_tokens": graph_tokens, "text_prompt_tokens": text_tokens})
    tot_g = sum(r["graph_prompt_tokens"] for r in rows)
    tot_t = sum(r["text_prompt_tokens"] for r in rows)
    with run_directory(args.runs, "token-budget", cfg, {"graph": tree_fingerprint(graph_path), "corpus": tree_fingerprint(args.corpus)}) as out:
        write_json(os.path.join(out, "token_budget.json"), {"graph_prompt_tokens": tot_g, "text_prompt_tokens": tot_t, "ratio": tot_g / tot_t if tot_t else None, "samples": rows})
    log.info("graph regime %d tokens, textified %d tokens", tot_g, tot_t)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-lm": cmd_pretrain_lm,
    "ground": cmd_ground,
    "build-instructions": cmd_build_instructions,
    "tune": cmd_tune,
    "eval": cmd_eval,
    "token-budget": cmd_token_budget,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graft", description="Graph instruction tuning pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="run config JSON (defaults apply when omitted)")
        sp.add_argument("--runs", default="runs", help="root directory for run outputs")
        sp.add_argument("--graph", action="append", help="graph bundle directory")
        sp.add_argument("--vocab", help="vocab.txt (default: the base LM's)")
        sp.add_argument("--base-lm", dest="base_lm", help="base LM directory (default: shipped)")
        if name in ("tune", "eval", "token-budget"):
            sp.add_argument("--corpus", help="instruction corpus JSONL")
        if name == "tune":
            sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
            sp.add_argument("--skip-stage1", action="store_true")
            sp.add_argument("--grounding", help="grounding checkpoint")
            sp.add_argument("--stage1", help="stage-1 checkpoint (stage 2)")
        if name == "eval":
            sp.add_argument("--checkpoint", help="tuned checkpoint")
            sp.add_argument("--zero-shot", dest="zero_shot", action="store_true")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        _fail(exc.kind, str(exc))
        return 2
    except ConfigError as exc:
        _fail("malformed_config", str(exc))
        return 2
    except TuningError as exc:
        _fail("tuning_error", str(exc))
        return 2
    return 0


def _fail(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message.replace("\n", " ")}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
