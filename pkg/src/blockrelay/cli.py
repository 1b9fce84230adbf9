"""Command line front end for every experiment in the package.

Each subcommand runs one experiment and can emit its rows as CSV
(``--csv``), as JSON on stdout (``--json``), or as a one-line summary.
Every CSV is written with a ``<name>.manifest.json`` sidecar recording
the subcommand, the full parameter set, the seed, the toolkit version,
and start/end timestamps; ``blockrelay replay manifest.json`` reruns
the experiment from that record and reproduces the CSV byte for byte
(timestamps live only in the manifest, never in the CSV).

CSV conventions: UTF-8, LF line endings, one header row, floats with
six significant digits, booleans as 0/1.
"""

from __future__ import annotations

import argparse
import csv
import json
import shlex
import sys
from datetime import datetime, timezone
from pathlib import Path
from statistics import fmean
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .filters import BloomFilter, bloom_fpr
from .frontier import frontier_sim
from .ordering import run_ordering_trials
from .peerscore import evaluate_vector
from .simnet import ScenarioConfig, run_block_sim, run_sweep

__all__ = ["dispatch", "main"]

_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fmt(value: object) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
            count += 1
    return count


def _write_manifest(
    csv_path: Path,
    subcommand: str,
    parameters: dict,
    seed: int | None,
    started: str,
    finished: str,
    metadata: dict | None = None,
) -> None:
    manifest = {
        "subcommand": subcommand,
        "parameters": parameters,
        "seed": seed,
        "csv": str(csv_path),
        "toolkit_version": __version__,
        "started_utc": started,
        "finished_utc": finished,
    }
    if metadata:
        manifest["metadata"] = metadata
    sidecar = Path(str(csv_path) + ".manifest.json")
    sidecar.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _emit(
    args: argparse.Namespace,
    subcommand: str,
    parameters: dict,
    header: Sequence[str],
    rows: list[Sequence],
    started: str,
    summary: str,
    metadata: dict | None = None,
) -> None:
    """Common output plumbing: CSV + manifest, JSON, or a summary line."""
    finished = _utcnow()
    if args.csv is not None:
        _write_csv(args.csv, header, rows)
        _write_manifest(
            args.csv,
            subcommand,
            parameters,
            getattr(args, "seed", None),
            started,
            finished,
            metadata,
        )
    if args.json:
        print(json.dumps([dict(zip(header, row)) for row in rows], indent=2))
    elif not args.quiet:
        if args.csv is not None:
            summary += f" -> {args.csv}"
        print(summary)


def _parse_grid(text: str) -> list[float]:
    """Overlap grid: 'a:b:step' (inclusive), a comma list, or one value."""
    if ":" in text:
        lo_s, hi_s, step_s = text.split(":")
        lo, hi, step = float(lo_s), float(hi_s), float(step_s)
        if step <= 0 or hi < lo:
            raise ValueError(f"bad overlap grid {text!r}")
        count = int((hi - lo) / step + 1e-9) + 1
        return [round(lo + i * step, 10) for i in range(count)]
    if "," in text:
        return [float(part) for part in text.split(",")]
    return [float(text)]


def _parse_bloom_grid(text: str) -> list[tuple[int, int]]:
    """Filter bench grid: 'bits_per_entry:k' pairs, comma separated."""
    grid = []
    for part in text.split(","):
        bpe_s, k_s = part.split(":")
        grid.append((int(bpe_s), int(k_s)))
    if not grid:
        raise ValueError("empty filter grid")
    return grid


# -- subcommand runners ------------------------------------------------------


def _run_graphene_sim(args: argparse.Namespace) -> int:
    started = _utcnow()
    cfg = ScenarioConfig(
        n_block=args.block_size,
        mempool_size=args.mempool,
        overlap=args.overlap,
        tx_payload_bytes=args.payload,
        seed=args.seed,
    )
    transcripts: list[list] = []
    blocks = run_block_sim(cfg, args.blocks, transcripts=transcripts)
    header = ["block", "direction", "msg_type", "bytes"]
    rows = [
        (i, entry.direction, entry.msg_type, entry.nbytes)
        for i, transcript in enumerate(transcripts)
        for entry in transcript
    ]
    ok = sum(1 for b in blocks if b.success)
    summary = (
        f"{args.blocks} blocks, {ok} succeeded, "
        f"mean graphene {fmean(b.graphene_bytes for b in blocks):.6g} bytes "
        f"vs full {fmean(b.full_block_bytes for b in blocks):.6g} bytes"
    )
    _emit(
        args,
        "graphene-sim",
        {
            "blocks": args.blocks,
            "block-size": args.block_size,
            "mempool": args.mempool,
            "overlap": args.overlap,
            "payload": args.payload,
        },
        header,
        rows,
        started,
        summary,
    )
    return 0


def _run_frontier_sim(args: argparse.Namespace) -> int:
    started = _utcnow()
    reports = frontier_sim(
        args.accounts,
        args.mean_changes,
        args.intervals,
        seed=args.seed,
        sizing=args.sizing,
    )
    # build_time stays out of the CSV: a wall-clock column would make
    # byte-identical replay impossible.
    header = ["interval", "changes", "full_bytes", "iblt_bytes", "recovered"]
    rows = [
        (r.interval, r.changes, r.full_bytes, r.iblt_bytes, r.recovered)
        for r in reports
    ]
    recovered = sum(1 for r in reports if r.recovered)
    if reports:
        mean_iblt = fmean(r.iblt_bytes for r in reports)
        ratio = f"{mean_iblt / reports[0].full_bytes:.3g}x of a full dump"
    else:
        ratio = "no intervals"
    summary = f"{len(reports)} intervals, {recovered} recovered, mean table {ratio}"
    _emit(
        args,
        "frontier-sim",
        {
            "accounts": args.accounts,
            "mean-changes": args.mean_changes,
            "intervals": args.intervals,
            "sizing": args.sizing,
        },
        header,
        rows,
        started,
        summary,
    )
    return 0


def _run_ordering_sim(args: argparse.Namespace) -> int:
    started = _utcnow()
    trials = run_ordering_trials(
        args.n, args.ratio, args.trials, mode=args.mode, seed=args.seed
    )
    header = [
        "trial",
        "mode",
        "n",
        "ratio",
        "complete",
        "unencoded",
        "recovered",
        "payload_bytes",
        "equations",
    ]
    rows = [
        (
            t.trial,
            t.mode,
            t.n,
            t.ratio,
            t.complete,
            t.unencoded,
            t.recovered,
            t.payload_bytes,
            t.equations,
        )
        for t in trials
    ]
    recovered = sum(1 for t in trials if t.recovered)
    summary = (
        f"{len(trials)} trials, {recovered} recovered, "
        f"mean unencoded {fmean(t.unencoded for t in trials):.6g}"
    )
    _emit(
        args,
        "ordering-sim",
        {
            "n": args.n,
            "ratio": args.ratio,
            "trials": args.trials,
            "mode": args.mode,
        },
        header,
        rows,
        started,
        summary,
    )
    return 0


def _run_filter_bench(args: argparse.Namespace) -> int:
    started = _utcnow()
    grid = _parse_bloom_grid(args.grid)
    header = ["bits_per_entry", "k", "n", "probes", "target_fpr", "measured_fpr"]
    rows: list[Sequence] = []
    worst = 0.0
    for idx, (bpe, k) in enumerate(grid):
        rng = np.random.Generator(
            np.random.Philox(key=[args.seed & _MASK64, idx])
        )
        m_bits = bpe * args.n
        bloom = BloomFilter(m_bits, k, seed=args.seed + idx)
        bloom.insert_many(rng.integers(0, 256, size=(args.n, 8), dtype=np.uint8))
        probes = rng.integers(0, 256, size=(args.probes, 8), dtype=np.uint8)
        measured = float(np.count_nonzero(bloom.contains_many(probes))) / args.probes
        target = bloom_fpr(m_bits, args.n, k)
        worst = max(worst, abs(measured - target) / target)
        rows.append((bpe, k, args.n, args.probes, target, measured))
    summary = (
        f"{len(grid)} configurations, "
        f"worst relative error vs analytic fpr {worst:.3g}"
    )
    _emit(
        args,
        "filter-bench",
        {"n": args.n, "probes": args.probes, "grid": args.grid},
        header,
        rows,
        started,
        summary,
    )
    return 0


def _run_sweep(args: argparse.Namespace) -> int:
    started = _utcnow()
    overlaps = _parse_grid(args.overlap)
    cfg = ScenarioConfig(
        n_block=args.n,
        mempool_size=args.mempool,
        overlap=overlaps[0],
        tx_payload_bytes=args.payload,
        trials=args.trials,
        seed=args.seed,
    )
    report = run_sweep(cfg, overlaps)
    header = [
        "overlap",
        "graphene_bytes",
        "compact_bytes",
        "xthin_bytes",
        "missing_tx_count",
        "retries",
        "success_rate",
    ]
    rows = [
        (
            r.overlap,
            r.graphene_bytes,
            r.compact_bytes,
            r.xthin_bytes,
            r.missing_tx_count,
            r.retries,
            r.success_rate,
        )
        for r in report.rows
    ]
    metadata = dict(report.metadata)
    metadata["crossover_overlap"] = report.crossover_overlap
    if report.crossover_overlap is None:
        cross = "graphene never exceeded compact"
    else:
        cross = f"crossover at overlap {report.crossover_overlap:.6g}"
    summary = f"{len(rows)} grid points, {cross}"
    _emit(
        args,
        "sweep",
        {
            "n": args.n,
            "mempool": args.mempool,
            "overlap": args.overlap,
            "trials": args.trials,
            "payload": args.payload,
        },
        header,
        rows,
        started,
        summary,
        metadata=metadata,
    )
    return 0


def _run_peerscore_eval(args: argparse.Namespace) -> int:
    started = _utcnow()
    vectors = json.loads(Path(args.json_path).read_text(encoding="utf-8"))
    header = ["op", "name", "field", "expected", "computed", "match"]
    rows: list[Sequence] = []
    failures = 0
    for vec in vectors:
        computed = evaluate_vector(vec["op"], dict(vec["inputs"]))
        for fld in sorted(vec["expected"]):
            want = vec["expected"][fld]
            got = computed[fld]
            ok = abs(got - want) <= 1e-12
            failures += 0 if ok else 1
            rows.append((vec["op"], vec.get("name", ""), fld, want, got, ok))
    summary = f"{len(rows) - failures}/{len(rows)} values match"

    class _Shim:
        csv = args.csv
        json = False
        quiet = args.quiet
        seed = None

    _emit(
        _Shim(),
        "peerscore eval",
        {"json": str(args.json_path)},
        header,
        rows,
        started,
        summary,
    )
    return 1 if failures else 0


def _run_replay(args: argparse.Namespace) -> int:
    data = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    argv = shlex.split(data["subcommand"])
    for key in sorted(data["parameters"]):
        value = data["parameters"][key]
        if isinstance(value, bool):
            if value:
                argv.append(f"--{key}")
        else:
            argv.extend([f"--{key}", str(value)])
    if data.get("seed") is not None:
        argv.extend(["--seed", str(data["seed"])])
    out = args.csv if args.csv is not None else Path(data["csv"])
    argv.extend(["--csv", str(out), "--quiet"])
    return dispatch(argv)


# -- argument parsing --------------------------------------------------------


def _add_output_flags(sp: argparse.ArgumentParser, seed: bool = True) -> None:
    if seed:
        sp.add_argument("--seed", type=int, default=0, help="RNG seed")
    sp.add_argument("--csv", type=Path, help="write rows (plus manifest) here")
    sp.add_argument("--json", action="store_true", help="print rows as JSON")
    sp.add_argument("--quiet", action="store_true", help="suppress the summary line")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockrelay",
        description="Block relay experiments: set reconciliation, ordering, scoring.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("graphene-sim", help="relay synthetic blocks, log transcripts")
    g.add_argument("--blocks", type=int, required=True, help="number of blocks")
    g.add_argument("--block-size", type=int, required=True, help="txs per block")
    g.add_argument("--mempool", type=int, required=True, help="receiver mempool size")
    g.add_argument("--overlap", type=float, required=True, help="fraction in [0,1]")
    g.add_argument("--payload", type=float, default=300.0, help="mean tx bytes")
    _add_output_flags(g)
    g.set_defaults(run=_run_graphene_sim)

    f = sub.add_parser("frontier-sim", help="account-frontier reconciliation drill")
    f.add_argument("--accounts", type=int, required=True)
    f.add_argument("--mean-changes", type=float, required=True)
    f.add_argument("--intervals", type=int, required=True)
    f.add_argument(
        "--sizing",
        choices=("estimate", "true"),
        default="estimate",
        help="table sizing policy: doubled estimate or true delta",
    )
    _add_output_flags(f)
    f.set_defaults(run=_run_frontier_sim)

    o = sub.add_parser("ordering-sim", help="canonical-order recovery experiment")
    o.add_argument("--n", type=int, required=True, help="transactions per trial")
    o.add_argument("--ratio", type=float, required=True, help="buckets per tx")
    o.add_argument("--trials", type=int, required=True)
    o.add_argument("--mode", choices=("csp", "lex"), default="csp")
    _add_output_flags(o)
    o.set_defaults(run=_run_ordering_sim)

    b = sub.add_parser("filter-bench", help="measured vs analytic Bloom fpr")
    b.add_argument("--n", type=int, required=True, help="inserted elements")
    b.add_argument("--probes", type=int, required=True, help="membership probes")
    b.add_argument(
        "--grid",
        default="8:6,12:8,16:11",
        help="comma list of bits_per_entry:k pairs",
    )
    _add_output_flags(b)
    b.set_defaults(run=_run_filter_bench)

    s = sub.add_parser("sweep", help="graphene vs compact/xthin over an overlap grid")
    s.add_argument("--n", type=int, required=True, help="txs per block")
    s.add_argument("--mempool", type=int, required=True)
    s.add_argument(
        "--overlap",
        required=True,
        help="grid as lo:hi:step (inclusive), comma list, or one value",
    )
    s.add_argument("--trials", type=int, default=30)
    s.add_argument("--payload", type=float, default=300.0)
    _add_output_flags(s)
    s.set_defaults(run=_run_sweep)

    p = sub.add_parser("peerscore", help="peer scoring utilities")
    psub = p.add_subparsers(dest="peerscore_cmd", required=True)
    ev = psub.add_parser("eval", help="evaluate regression vectors from a JSON file")
    ev.add_argument(
        "--json",
        dest="json_path",
        required=True,
        metavar="FILE",
        help="JSON array of {op, inputs, expected} vectors",
    )
    ev.add_argument("--csv", type=Path, help="write per-field results here")
    ev.add_argument("--quiet", action="store_true")
    ev.set_defaults(run=_run_peerscore_eval)

    r = sub.add_parser("replay", help="rerun an experiment from its manifest")
    r.add_argument("manifest", type=Path)
    r.add_argument("--csv", type=Path, help="write the CSV here instead")
    r.set_defaults(run=_run_replay)

    return parser


def dispatch(argv: Sequence[str]) -> int:
    """Parse argv, run the subcommand, return the process exit status."""
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
