"""Command-line entry point.

Exit codes: 0 success, 1 verification/replay findings, 2 usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import PRESETS, ConfigError, load_config

EXIT_OK, EXIT_FINDINGS, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _overrides(args: argparse.Namespace) -> dict:
    o = {}
    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    if getattr(args, "days", None) is not None:
        o["max_days"] = args.days
    if getattr(args, "preset", None) is not None:
        o["preset"] = args.preset
    if getattr(args, "start_date", None) is not None:
        o["start_date"] = args.start_date
    return o


def _config(args: argparse.Namespace):
    cfg = load_config(args.config, _overrides(args))
    backend = getattr(args, "backend", None)
    if backend is not None and backend != cfg.backend.kind:
        from dataclasses import replace
        cfg = cfg.replace(backend=replace(cfg.backend, kind=backend))
    return cfg


def _client(cfg, log_llm: bool = False):
    from .llm import ChatClient
    return ChatClient(cfg.backend, log_llm=log_llm)


def cmd_generate(args) -> int:
    from .engine import run_corpus
    from .persona import load_personas

    cfg = _config(args)
    derive = None if args.derive == "none" else args.derive
    kw = {"client": _client(cfg)} if derive == "external" else {}
    personas = load_personas(args.personas, derive_mode=derive, seed=cfg.seed, **kw)
    if args.users is not None:
        personas = personas[: args.users]
    if not personas:
        raise UsageError(f"{args.personas}: no personas")
    client = _client(cfg, args.log_llm) if cfg.backend.kind != "mock" else None
    run = run_corpus(personas, cfg, args.out, jobs=args.jobs, client=client)
    manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8"))
    print(run)
    print(f"users={manifest['n_users']} events={manifest['n_events']} illiquid={manifest['n_illiquid']} "
          f"incomplete={manifest['n_incomplete']} manifest_hash={manifest['manifest_hash']}")
    return EXIT_OK


def cmd_replay(args) -> int:
    from .audit import ReplayDivergence, read_jsonl, replay
    from .ledger import state_hash

    run = Path(args.run)
    by_user: dict[str, list] = {}
    for r in read_jsonl(run / "audit.jsonl"):
        by_user.setdefault(r["user_id"], []).append(r)
    finals = {s["user_id"]: s["state_hash"] for s in read_jsonl(run / "snapshots.jsonl") if s.get("kind") == "final"}
    bad = 0
    for uid, recs in by_user.items():
        try:
            st = replay(recs)
        except ReplayDivergence as exc:
            print(f"DIVERGED {exc}")
            bad += 1
            continue
        got = state_hash(st)
        if finals.get(uid) != got:
            print(f"MISMATCH {uid}: replayed {got}, recorded {finals.get(uid)}")
            bad += 1
    print(f"replayed {len(by_user)} users, {bad} mismatch(es)")
    return EXIT_FINDINGS if bad else EXIT_OK


def cmd_verify(args) -> int:
    from .audit import verify

    report = verify(args.run)
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_FINDINGS


def cmd_build_task(args) -> int:
    from .benchmark import build_illiquidity_examples, build_theft_examples, load_corpus, positive_rate, write_task

    corpus = load_corpus(args.run)
    if args.task == "illiquidity":
        report: dict = {}
        exs = build_illiquidity_examples(corpus, args.n_months, args.horizon_days, args.stride_days, report)
        skipped = len(report["skipped_users"])
    else:
        exs = build_theft_examples(corpus, args.n_months, args.count, args.seed)
        skipped = 0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_task(out, exs)
    mean_len = sum(len(e.events) for e in exs) / n if n else 0.0
    print(f"wrote {n} {args.task} examples to {out} (users skipped: {skipped}, mean events/example {mean_len:.1f}, "
          f"positive rate {positive_rate(exs):.4f})")
    return EXIT_OK


def cmd_encode(args) -> int:
    from .benchmark import encode_task

    ratios = {"train": args.train_ratio, "test": round(1.0 - args.train_ratio, 12)}
    header = encode_task(args.task, args.out, args.vocab_threshold, ratios, args.seed)
    dims = header["vocab"]["dims"]
    print(f"dims names={dims['names']} types={dims['types']} total={dims['total']} "
          + " ".join(f"{k}:rows={v['rows']},examples={v['examples']}" for k, v in header["splits"].items()))
    return EXIT_OK


def cmd_stats(args) -> int:
    from .analytics import format_summary, load_run, summary, write_stats

    data = load_run(args.run)
    if args.out:
        s = write_stats(data, args.out, args.merchant_threshold)
    else:
        s = summary(data, args.merchant_threshold)
    print(format_summary(s))
    return EXIT_OK


def cmd_derive_profiles(args) -> int:
    from .persona import load_personas, write_personas

    kw = {}
    if args.mode == "external":
        kw["client"] = _client(load_config(args.config))
    personas = load_personas(args.personas, derive_mode=args.mode, seed=args.seed, **kw)
    write_personas(args.out, personas)
    print(f"wrote {len(personas)} augmented personas to {args.out}")
    return EXIT_OK


def cmd_sample_personas(args) -> int:
    from .persona import write_personas
    from .samples import bundled_records, synth_personas

    out = Path(args.out)
    if args.bundled:
        out.write_text("".join(line.rstrip("\n") + "\n" for line in bundled_records()), encoding="utf-8")
        print(f"wrote bundled sample personas to {out}")
    else:
        write_personas(out, synth_personas(args.n, args.seed))
        print(f"wrote {args.n} synthetic personas to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ledgerloop", description="Rule-checked synthetic credit card transaction generator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("generate", help="simulate a corpus")
    g.add_argument("--personas", required=True, help="JSONL of persona records")
    g.add_argument("--config", help="JSON config file (all engine and rule parameters)")
    g.add_argument("--out", required=True, help="parent directory for the run directory")
    g.add_argument("--backend", choices=("mock", "external"))
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--seed", type=int)
    g.add_argument("--days", type=int, help="simulation horizon in days (max_days)")
    g.add_argument("--start-date", help="first simulated day, YYYY-MM-DD")
    g.add_argument("--users", type=int, help="only simulate the first N personas")
    g.add_argument("--jobs", type=int, default=1, help="worker count; output does not depend on it")
    g.add_argument("--derive", choices=("heuristic", "external", "none"), default="heuristic",
                   help="how to fill in missing financial profiles (default: heuristic)")
    g.add_argument("--log-llm", action="store_true", help="log raw backend requests and responses")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("replay", help="rebuild every user's ledger from the audit log")
    r.add_argument("--run", required=True)
    r.set_defaults(func=cmd_replay)

    v = sub.add_parser("verify", help="check hash chain, replay, identities and export consistency")
    v.add_argument("--run", required=True)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("build-task", help="build a benchmark task file from a run")
    b.add_argument("task", choices=("illiquidity", "theft"))
    b.add_argument("--run", required=True)
    b.add_argument("--n-months", type=int, required=True)
    b.add_argument("--horizon-days", type=int, help="illiquidity horizon after the window (default: rest of trace)")
    b.add_argument("--stride-days", type=int, help="window stride in days (default: one calendar month)")
    b.add_argument("--count", type=int, default=100, help="number of theft injections")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True, help="task.jsonl path")
    b.set_defaults(func=cmd_build_task)

    e = sub.add_parser("encode", help="split a task by user, build the vocabulary on train, write feature rows")
    e.add_argument("--task", required=True)
    e.add_argument("--vocab-threshold", type=int, default=50)
    e.add_argument("--train-ratio", type=float, default=0.8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_encode)

    s = sub.add_parser("stats", help="summary tables for a run")
    s.add_argument("--run", required=True)
    s.add_argument("--out", help="directory for CSV tables and summary.txt")
    s.add_argument("--merchant-threshold", type=int, default=100)
    s.set_defaults(func=cmd_stats)

    d = sub.add_parser("derive-profiles", help="attach financial profiles to raw personas")
    d.add_argument("--personas", required=True)
    d.add_argument("--mode", choices=("heuristic", "external"), default="heuristic")
    d.add_argument("--config", help="config file with backend settings (external mode)")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_derive_profiles)

    sp = sub.add_parser("sample-personas", help="write synthetic or bundled sample personas")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--bundled", action="store_true", help="write the bundled sample file instead")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample_personas)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
