"""Operator command line: ingest a corpus, run one task, bench a suite,
or serve the HTTP API.

Exit codes report infrastructure health only: a benchmark full of failing
tasks still exits 0, while unreadable files, unknown task ids, provider
breakage, or bind failures exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from typing import Optional, Sequence

from . import harness, jsonio, llm, mcts, retriever, sandbox, service
from .model import AgentConfig, SuiteError, parse_suite

__all__ = ["main", "build_parser"]

logger = logging.getLogger(__name__)

_CFG_FLAGS = {
    # flag name -> AgentConfig field
    "c_base": "c_base",
    "c": "c",
    "n_samples": "n_samples",
    "k_top": "k_top",
    "k_retrieve": "k_retrieve",
    "max_attempts": "max_attempts",
    "lookahead_steps": "lookahead_steps",
    "temperature": "temperature",
    "top_p": "top_p",
    "max_tokens": "max_tokens",
    "context_window_tokens": "context_window_tokens",
}


class CliError(RuntimeError):
    """Infrastructure-level failure that should exit nonzero."""


def _add_cfg_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("agent config overrides")
    group.add_argument("--config", metavar="PATH",
                       help="JSON file of agent config fields")
    group.add_argument("--c-base", type=float, dest="c_base")
    group.add_argument("--c", type=float, dest="c")
    group.add_argument("--n-samples", type=int, dest="n_samples")
    group.add_argument("--k-top", type=int, dest="k_top")
    group.add_argument("--k-retrieve", type=int, dest="k_retrieve")
    group.add_argument("--max-attempts", type=int, dest="max_attempts")
    group.add_argument("--lookahead-steps", type=int, dest="lookahead_steps")
    group.add_argument("--temperature", type=float, dest="temperature")
    group.add_argument("--top-p", type=float, dest="top_p")
    group.add_argument("--max-tokens", type=int, dest="max_tokens")
    group.add_argument("--context-window-tokens", type=int,
                       dest="context_window_tokens")


def _add_provider_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--provider", required=True, metavar="SPEC",
                        help="scripted:PATH for a reply transcript, or an "
                             "http(s):// endpoint")
    parser.add_argument("--index", metavar="PATH",
                        help="embedding index built by `ingest`")
    parser.add_argument("--rag", choices=("at0", "at3"), default="at0",
                        help="retrieval condition (default at0: none)")
    parser.add_argument("--timeout-ms", type=int, default=30000,
                        help="per-cell execution deadline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellsmith",
        description="Search-guided code agent: run tasks, benchmark suites, "
                    "serve the intervention API.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    ingest = commands.add_parser("ingest", help="build an embedding index")
    ingest.add_argument("corpus", help="JSON corpus file")
    ingest.add_argument("out_index", help="where to write the index")
    ingest.add_argument("--dim", type=int, default=64,
                        help="hashing embedder dimension (default 64)")

    run = commands.add_parser("run", help="run one task end to end")
    run.add_argument("suite", help="suite JSON file")
    run.add_argument("task_id", help="task to run")
    run.add_argument("--mode", choices=("auto", "human-scripted"),
                     default="auto")
    run.add_argument("--edits", metavar="PATH",
                     help="scripted human edits (required for human-scripted)")
    run.add_argument("--out", default=".", metavar="DIR",
                     help="where to write the solution and tree dump")
    _add_provider_flags(run)
    _add_cfg_flags(run)

    bench = commands.add_parser("bench", help="evaluate a whole suite")
    bench.add_argument("suite", help="suite JSON file")
    bench.add_argument("--mode", choices=("auto", "human-scripted"),
                       default="auto")
    bench.add_argument("--edits", metavar="PATH")
    bench.add_argument("--jobs", type=int, default=1,
                       help="concurrent tasks (one sandbox session each)")
    bench.add_argument("--labels", choices=("dotted", "bare"),
                       default="dotted",
                       help="compare call labels with or without receiver "
                            "chains")
    bench.add_argument("--conventional-pr", action="store_true",
                       help="swap the recall/precision denominators to the "
                            "textbook convention")
    bench.add_argument("--report", metavar="PATH",
                       default="metrics-report.json",
                       help="structured report destination "
                            "(default metrics-report.json)")
    _add_provider_flags(bench)
    _add_cfg_flags(bench)

    serve = commands.add_parser("serve", help="serve the run/intervention API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8848)
    serve.add_argument("--data-dir", metavar="DIR",
                       help="persist event logs here and recover on restart")
    _add_provider_flags(serve)
    _add_cfg_flags(serve)

    return parser


# ---------------------------------------------------------------------------
# Shared assembly
# ---------------------------------------------------------------------------


def _load_cfg(args: argparse.Namespace) -> AgentConfig:
    base: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                base = json.load(fh)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}")
    try:
        cfg = AgentConfig.from_dict(base)
        overrides = {
            field: getattr(args, field)
            for field in _CFG_FLAGS.values()
            if getattr(args, field, None) is not None
        }
        return cfg.with_overrides(**overrides) if overrides else cfg
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad agent config: {exc}")


def _make_provider(spec: str):
    if spec.startswith("scripted:"):
        path = spec[len("scripted:"):]
        try:
            return llm.ScriptedProvider.from_file(path)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot load scripted provider {path}: {exc}")
    if spec.startswith(("http://", "https://")):
        return llm.HttpProvider(spec)
    raise CliError(f"provider must be scripted:PATH or an http(s) URL, "
                   f"got {spec!r}")


def _make_deps(args: argparse.Namespace) -> mcts.EngineDeps:
    index = embedder = None
    if getattr(args, "index", None):
        try:
            index = retriever.load_index(args.index)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot load index {args.index}: {exc}")
        embedder = retriever.HashingEmbedder(dim=index.dim)
    if args.rag == "at3" and index is None:
        raise CliError("--rag at3 needs --index")
    return mcts.EngineDeps(
        provider=_make_provider(args.provider),
        runner=sandbox.RunnerConfig(default_timeout_ms=args.timeout_ms),
        index=index,
        embedder=embedder,
        rag_mode=args.rag,
        exec_timeout_ms=args.timeout_ms,
    )


def _load_suite(path: str):
    try:
        with open(path, "rb") as fh:
            return parse_suite(fh.read(), derive_labels=True)
    except OSError as exc:
        raise CliError(f"cannot read suite {path}: {exc}")
    except SuiteError as exc:
        raise CliError(f"bad suite {path}: {exc}")


def _load_edits(path: Optional[str]) -> dict[str, dict[int, str]]:
    """Edits file: {task_id: {step_index: replacement_code}}."""
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read edits {path}: {exc}")
    if not isinstance(raw, dict):
        raise CliError(f"edits file {path} must be a JSON object")
    edits: dict[str, dict[int, str]] = {}
    for task_id, per_step in raw.items():
        if not isinstance(per_step, dict):
            raise CliError(f"edits[{task_id!r}] must map step index to code")
        try:
            edits[task_id] = {int(k): str(v) for k, v in per_step.items()}
        except ValueError:
            raise CliError(f"edits[{task_id!r}] has a non-integer step index")
    return edits


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    try:
        with open(args.corpus, "rb") as fh:
            docs = retriever.load_corpus(fh.read())
        embedder = retriever.HashingEmbedder(dim=args.dim)
        index = retriever.ingest(docs, embedder)
        retriever.save_index(index, args.out_index)
    except (OSError, ValueError) as exc:
        raise CliError(f"ingest failed: {exc}")
    print(f"ingested {len(index.docs)} docs (dim {index.dim or args.dim}) "
          f"-> {args.out_index}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    if args.mode == "human-scripted" and not args.edits:
        raise CliError("--mode human-scripted requires --edits")
    tasks = {t.id: t for t in _load_suite(args.suite)}
    if args.task_id not in tasks:
        raise CliError(f"no task {args.task_id!r} in {args.suite}")
    task = tasks[args.task_id]
    cfg = _load_cfg(args)
    deps = _make_deps(args)
    all_edits = _load_edits(args.edits)
    scripted = all_edits.get(args.task_id) if args.mode == "human-scripted" \
        else None
    if args.mode == "human-scripted" and scripted is None:
        scripted = {}
    try:
        solution, tree = mcts.run_search(
            task, deps, cfg,
            mode="human" if args.mode == "human-scripted" else "auto",
            scripted_edits=scripted)
    except (llm.GatewayError, sandbox.SandboxError, mcts.ExpansionError,
            mcts.EvaluationError) as exc:
        raise CliError(f"run failed: {exc}")
    os.makedirs(args.out, exist_ok=True)
    solution_path = os.path.join(args.out, f"solution-{task.id}.json")
    tree_path = os.path.join(args.out, f"tree-{task.id}.json")
    with open(solution_path, "w", encoding="utf-8") as fh:
        fh.write(jsonio.dumps_pretty({
            "task_id": solution.task_id,
            "completed_steps": solution.completed_steps,
            "total_steps": solution.total_steps,
            "cells": [
                {"step_index": c.step_index, "code": c.code,
                 "source": c.source}
                for c in solution.cells
            ],
        }) + "\n")
    with open(tree_path, "w", encoding="utf-8") as fh:
        fh.write(jsonio.dumps_pretty(tree.dump()) + "\n")
    rate = (solution.completed_steps / solution.total_steps
            if solution.total_steps else 0.0)
    print(f"complete@1 {rate:.4f} ({solution.completed_steps}/"
          f"{solution.total_steps} steps) -> {solution_path}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    if args.mode == "human-scripted" and not args.edits:
        raise CliError("--mode human-scripted requires --edits")
    suite = _load_suite(args.suite)
    cfg = _load_cfg(args)
    deps = _make_deps(args)
    edits = _load_edits(args.edits)
    single = [t for t in suite if t.kind == "single_turn"]
    multi = [t for t in suite if t.kind == "multi_turn"]
    reports: list[tuple[str, harness.MetricsReport]] = []
    if single:
        reports.append(("single-turn", harness.evaluate_single_turn(
            single, deps, cfg, rag_mode=args.rag, label_form=args.labels,
            conventional_pr=args.conventional_pr, jobs=args.jobs)))
    if multi:
        reports.append(("multi-turn", harness.evaluate_multi_turn(
            multi, deps, cfg,
            run_mode="human" if args.mode == "human-scripted" else "auto",
            rag_mode=args.rag, label_form=args.labels,
            conventional_pr=args.conventional_pr, scripted_edits=edits,
            jobs=args.jobs)))
    if not reports:
        raise CliError(f"suite {args.suite} has no tasks")
    structured = {}
    for name, report in reports:
        print(f"== {name} ==")
        sys.stdout.write(harness.emit_report(report, "table").decode("utf-8"))
        structured[name] = jsonio.loads(
            harness.emit_report(report, "structured").decode("utf-8"))
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(jsonio.dumps_pretty(structured) + "\n")
    print(f"structured report -> {args.report}")
    infra_errors = {name: report.errors for name, report in reports
                    if report.errors}
    if infra_errors:
        for name, errs in infra_errors.items():
            for task_id, message in errs.items():
                print(f"error [{name}] {task_id}: {message}", file=sys.stderr)
        return 1
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    # Build one EngineDeps per run so concurrent runs don't share event
    # sinks; the provider is shared and must be thread-safe.
    provider = _make_provider(args.provider)
    index = embedder = None
    if args.index:
        index = retriever.load_index(args.index)
        embedder = retriever.HashingEmbedder(dim=index.dim)

    def deps_factory() -> mcts.EngineDeps:
        return mcts.EngineDeps(
            provider=provider,
            runner=sandbox.RunnerConfig(default_timeout_ms=args.timeout_ms),
            index=index,
            embedder=embedder,
            rag_mode=args.rag,
            exec_timeout_ms=args.timeout_ms,
        )

    svc = service.AgentService(deps_factory, cfg=cfg, data_dir=args.data_dir,
                               host=args.host, port=args.port)
    try:
        host, port = svc.start()
    except OSError as exc:
        raise CliError(f"cannot bind {args.host}:{args.port}: {exc}")
    print(f"serving on http://{host}:{port}"
          + (f" (data dir {args.data_dir})" if args.data_dir else ""))
    stop = threading.Event()

    def _signalled(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, _signalled)
    signal.signal(signal.SIGTERM, _signalled)
    try:
        stop.wait()
    finally:
        svc.stop()
        print("stopped; event logs flushed")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    handlers = {
        "ingest": cmd_ingest,
        "run": cmd_run,
        "bench": cmd_bench,
        "serve": cmd_serve,
    }
    try:
        return handlers[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
