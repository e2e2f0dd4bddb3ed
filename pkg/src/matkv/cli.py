"""Operator entry point: ingest corpora, serve queries, run benchmarks, and
evaluate the cost model.

Exit codes: 0 success, 1 usage error (bad flags, missing or invalid
config/spec/params files), 2 runtime error (storage, corruption, malformed
data files, reported with line numbers where applicable).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from .costmodel import CostParams, SecPerMbMode, break_even, energy_comparison
from .engine import SCHEMA_VERSION, Engine, EngineConfig
from .errors import MatKVError
from .pipeline import Mode, Request, SimulatedTimes, run_batches
from .workload import (
    WorkloadSpec,
    generate_accesses,
    generate_corpus,
    skew_report,
    write_corpus_jsonl,
    write_trace_jsonl,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_json_file(path: str, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from exc


def _load_engine_config(args) -> EngineConfig:
    if args.config:
        data = _load_json_file(args.config, "config")
        try:
            config = EngineConfig.from_json_dict(data)
        except MatKVError as exc:
            raise UsageError(str(exc)) from exc
    else:
        config = EngineConfig()
    store_dir = os.environ.get("MATKV_STORE_DIR")
    if store_dir:
        from dataclasses import replace

        config = replace(config, store_dir=store_dir)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def _parse_mode(text: str) -> Mode:
    try:
        return Mode(text)
    except ValueError:
        valid = ", ".join(m.value for m in Mode)
        raise UsageError(f"unknown mode {text!r} (expected one of: {valid})") from None


def _parse_tokens(text: str) -> list[int]:
    try:
        return [int(part) for part in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"tokens must be integers, got {text!r}") from None


def _emit(obj: dict, stream=None) -> None:
    print(json.dumps(obj, sort_keys=True), file=stream or sys.stdout)


# -- subcommands ---------------------------------------------------------


def cmd_ingest(args) -> int:
    config = _load_engine_config(args)
    corpus = Path(args.corpus)
    if not corpus.is_file():
        raise UsageError(f"corpus file not found: {corpus}")
    engine = Engine(config)
    summary = engine.ingest_corpus(corpus)
    summary["schema_version"] = SCHEMA_VERSION
    _emit(summary)
    return 0


def cmd_query(args) -> int:
    config = _load_engine_config(args)
    mode = _parse_mode(args.mode)
    tokens = _parse_tokens(args.tokens)
    if not tokens:
        raise UsageError("query tokens must be non-empty")
    engine = Engine(config)
    output = engine.query(tokens, mode, k=args.k, max_new_tokens=args.max_new_tokens)
    _emit({
        "schema_version": SCHEMA_VERSION,
        "mode": output.mode.value,
        "generated": list(output.generated),
        "breakdown": {
            "load_s": output.breakdown.load_s,
            "prefill_s": output.breakdown.prefill_s,
            "decode_s": output.breakdown.decode_s,
        },
    })
    return 0


def _synth_query_tokens(config: EngineConfig, query_index: int) -> list[int]:
    """Deterministic stand-in query for trace lines that carry only ids."""
    import hashlib

    import numpy as np

    digest = hashlib.blake2b(
        f"query:{config.model.seed}:{query_index}".encode(), digest_size=16
    ).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
    return [int(t) for t in rng.integers(0, config.model.vocab_size, size=config.query_len)]


def _read_trace_requests(config: EngineConfig, path: Path) -> list[Request]:
    from .errors import PreconditionError

    requests = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PreconditionError(f"{path}: malformed trace line {line_no}: {exc}") from exc
            try:
                if "query_tokens" in obj:
                    requests.append(Request(
                        query_tokens=tuple(int(t) for t in obj["query_tokens"]),
                        retrieved_ids=tuple(obj.get("retrieved_ids", obj.get("ids", ()))),
                        max_new_tokens=int(obj.get("max_new_tokens", config.max_new_tokens)),
                    ))
                else:
                    requests.append(Request(
                        query_tokens=_synth_query_tokens(config, int(obj["query_index"])),
                        retrieved_ids=tuple(obj["ids"]),
                        max_new_tokens=config.max_new_tokens,
                    ))
            except (KeyError, ValueError, TypeError) as exc:
                raise PreconditionError(f"{path}: malformed trace line {line_no}: {exc}") from exc
    return requests


def _bench_mode_report(config: EngineConfig, engine: Engine, batches, mode: Mode,
                       simulated: SimulatedTimes | None) -> dict:
    report = run_batches(
        engine.model, engine.store, engine.index, batches, mode,
        positioning=config.positioning, simulated=simulated,
        parallelism=config.load_parallelism,
    )
    params = config.cost_params
    load_total = sum(b.breakdown.load_s for b in report.batches)
    compute_total = sum(
        b.breakdown.prefill_s + b.breakdown.decode_s for b in report.batches
    )
    store_stats = engine.store.stats()
    return {
        "mode": mode.value,
        "makespan_s": report.makespan_s,
        "energy_j": params.gpu_power_w * compute_total + params.ssd_power_w * load_total,
        "store": {"files": store_stats.files, "bytes": store_stats.bytes},
        "batches": [
            {
                "batch": i,
                "n_requests": len(b.outputs),
                "load_stage_s": b.load_stage_s,
                "compute_stage_s": b.compute_stage_s,
                "load_s": b.breakdown.load_s,
                "prefill_s": b.breakdown.prefill_s,
                "decode_s": b.breakdown.decode_s,
            }
            for i, b in enumerate(report.batches)
        ],
        "outputs": [[list(o.generated) for o in b.outputs] for b in report.batches],
    }


def bench_report_to_csv(report: dict) -> str:
    """Flatten a bench report to CSV; floats use repr so parsing round-trips."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow([
        "mode", "batch", "n_requests", "load_stage_s", "compute_stage_s",
        "load_s", "prefill_s", "decode_s", "makespan_s", "speedup_vs_vanilla",
        "energy_j",
    ])
    for mode_report in report["modes"]:
        speedup = mode_report.get("speedup_vs_vanilla")
        for row in mode_report["batches"]:
            writer.writerow([
                mode_report["mode"], row["batch"], row["n_requests"],
                repr(row["load_stage_s"]), repr(row["compute_stage_s"]),
                repr(row["load_s"]), repr(row["prefill_s"]), repr(row["decode_s"]),
                repr(mode_report["makespan_s"]),
                "" if speedup is None else repr(speedup),
                repr(mode_report["energy_j"]),
            ])
    return buf.getvalue()


def cmd_bench(args) -> int:
    config = _load_engine_config(args)
    trace = Path(args.trace)
    if not trace.is_file():
        raise UsageError(f"trace file not found: {trace}")
    if args.batch_size < 1:
        raise UsageError(f"--batch-size must be >= 1, got {args.batch_size}")
    modes = [_parse_mode(m.strip()) for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise UsageError("--modes must name at least one mode")

    simulated = None
    if args.simulate:
        data = _load_json_file(args.simulate, "stage-times")
        try:
            simulated = SimulatedTimes(load_s=data["load_s"], compute_s=data["compute_s"])
        except (KeyError, TypeError, MatKVError) as exc:
            raise UsageError(f"invalid stage-times file: {exc}") from exc

    engine = Engine(config)
    requests = _read_trace_requests(config, trace)
    if not requests:
        raise UsageError(f"trace {trace} contains no requests")
    batches = [
        requests[i : i + args.batch_size]
        for i in range(0, len(requests), args.batch_size)
    ]
    if simulated is not None and len(simulated.load_s) != len(batches):
        raise UsageError(
            f"stage-times cover {len(simulated.load_s)} batches but the trace "
            f"forms {len(batches)} batches of size {args.batch_size}"
        )

    mode_reports = [
        _bench_mode_report(config, engine, batches, mode, simulated) for mode in modes
    ]
    vanilla = next((m for m in mode_reports if m["mode"] == Mode.VANILLA.value), None)
    for mode_report in mode_reports:
        if vanilla is None:
            mode_report["speedup_vs_vanilla"] = None
        else:
            mode_report["speedup_vs_vanilla"] = (
                vanilla["makespan_s"] / mode_report["makespan_s"]
            )
    report = {
        "schema_version": SCHEMA_VERSION,
        "batch_size": args.batch_size,
        "modes": mode_reports,
    }
    out_format = args.out or config.out_format
    if out_format == "csv":
        sys.stdout.write(bench_report_to_csv(report))
    else:
        _emit(report)
    return 0


def cmd_costmodel(args) -> int:
    data = _load_json_file(args.params, "params")
    try:
        params = CostParams.from_json_dict(data)
    except MatKVError as exc:
        raise UsageError(str(exc)) from exc
    try:
        mode = SecPerMbMode(args.mode)
    except ValueError:
        valid = ", ".join(m.value for m in SecPerMbMode)
        raise UsageError(f"unknown cost-model mode {args.mode!r} (expected: {valid})") from None
    be = break_even(params, mode)
    energy = energy_comparison(params)
    _emit({
        "schema_version": SCHEMA_VERSION,
        "break_even": {"mode": mode.value, "t_seconds": be.t_seconds, "t_days": be.t_days},
        "energy": {
            "ratio": energy.ratio,
            "prefill_j": energy.prefill_j,
            "load_j": energy.load_j,
        },
    })
    return 0


def cmd_workload(args) -> int:
    data = _load_json_file(args.spec, "workload spec")
    try:
        spec = WorkloadSpec.from_json_dict(data)
        if args.seed is not None:
            from dataclasses import replace

            spec = replace(spec, seed=args.seed)
    except (MatKVError, KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid workload spec: {exc}") from exc

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(spec)
    accesses = generate_accesses(spec)
    report = skew_report(accesses, spec.n_docs)

    corpus_path = out_dir / "corpus.jsonl"
    trace_path = out_dir / "trace.jsonl"
    skew_path = out_dir / "skew.json"
    write_corpus_jsonl(corpus, corpus_path)
    write_trace_jsonl(accesses, trace_path)
    skew_path.write_text(json.dumps(
        {"schema_version": SCHEMA_VERSION, **report.to_json_dict()}, sort_keys=True
    ))
    _emit({
        "schema_version": SCHEMA_VERSION,
        "corpus_path": str(corpus_path),
        "trace_path": str(trace_path),
        "skew_path": str(skew_path),
        "skew": report.to_json_dict(),
    })
    return 0


# -- entry point ----------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="matkv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="engine config JSON file")
        p.add_argument("--seed", type=int, help="override the configured seed")

    p_ingest = sub.add_parser("ingest", help="ingest a JSONL corpus")
    add_common(p_ingest)
    p_ingest.add_argument("--corpus", required=True, help="corpus JSONL path")
    p_ingest.set_defaults(func=cmd_ingest)

    p_query = sub.add_parser("query", help="serve one query")
    add_common(p_query)
    p_query.add_argument("--mode", default=Mode.MATKV.value,
                         help="vanilla | matkv | matkv-overlap")
    p_query.add_argument("--tokens", required=True,
                         help="query token ids, comma or space separated")
    p_query.add_argument("--k", type=int, help="retrieval depth override")
    p_query.add_argument("--max-new-tokens", type=int, help="generation length override")
    p_query.set_defaults(func=cmd_query)

    p_bench = sub.add_parser("bench", help="run a trace through one or more modes")
    add_common(p_bench)
    p_bench.add_argument("--trace", required=True, help="trace JSONL path")
    p_bench.add_argument("--modes", default="vanilla,matkv,matkv-overlap")
    p_bench.add_argument("--batch-size", type=int, default=1)
    p_bench.add_argument("--simulate", help="stage-times JSON file")
    p_bench.add_argument("--out", choices=("json", "csv"), help="output format")
    p_bench.set_defaults(func=cmd_bench)

    p_cost = sub.add_parser("costmodel", help="break-even and energy analysis")
    p_cost.add_argument("--params", required=True, help="cost params JSON file")
    p_cost.add_argument("--mode", default=SecPerMbMode.UNIT.value,
                        help="unit | as-written")
    p_cost.set_defaults(func=cmd_costmodel)

    p_work = sub.add_parser("workload", help="generate corpus, trace, skew report")
    p_work.add_argument("--spec", required=True, help="workload spec JSON file")
    p_work.add_argument("--out-dir", required=True, help="output directory")
    p_work.add_argument("--seed", type=int, help="override the spec seed")
    p_work.set_defaults(func=cmd_workload)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except MatKVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
