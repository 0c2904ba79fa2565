"""Command-line front end.

Every subcommand prints a short human-readable table followed by
machine-readable lines that start with ``#DATA``. Exit codes: 0 ok,
2 configuration or usage error, 3 space exhausted, 4 replication lost,
5 corruption.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from importlib import resources
from pathlib import Path

from .chunk import ChunkStore
from .config import EngineConfig, dump_config, load_config, load_population
from .csd import EntryFormat
from .errors import AlreadyInitialized, ConfigError, StoreError
from .metrics import format_record
from .scheduler import node_record, simulate, step_record, sweep_bounds, sweep_record
from .workload import (CompressibilitySpec, Generator, Pipeline, TraceRunner,
                       bundled_corpus, corpus_report, generate_page, parse_trace,
                       zstd_advantage)

CONFIG_NAME = "config.yaml"


def _emit(kind: str, items) -> None:
    print("#DATA " + format_record(kind, items))


def _table(rows, headers) -> None:
    widths = [max(len(str(h)), *(len(_fmt(r[i])) for r in rows)) for i, h in enumerate(headers)]
    print("  ".join(str(h).ljust(w) for h, w in zip(headers, widths)))
    for r in rows:
        print("  ".join(_fmt(v).ljust(w) for v, w in zip(r, widths)))


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# ---- engine config from flags

def _apply_flags(cfg: EngineConfig, args) -> EngineConfig:
    changes = {}
    if getattr(args, "format", None):
        changes["device"] = dataclasses.replace(cfg.device, entry_format=EntryFormat[args.format.upper()])
    if getattr(args, "software", None):
        changes["software"] = args.software
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _open(directory: Path, args) -> tuple[ChunkStore, EngineConfig]:
    cfg_path = directory / CONFIG_NAME
    if not cfg_path.exists():
        raise ConfigError(f"{directory} is not an initialized store (run init first)")
    cfg = load_config(cfg_path)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return ChunkStore.load(directory, cfg), cfg


def _save(store: ChunkStore, directory: Path) -> None:
    store.save(directory)


# ---- subcommands

def cmd_init(args) -> int:
    d = Path(args.dir)
    if d.exists() and any(d.iterdir()):
        raise AlreadyInitialized(f"{d} is not empty")
    cfg = load_config(args.config) if args.config else EngineConfig()
    cfg = _apply_flags(cfg, args)
    store = ChunkStore(cfg)
    store.space.checkpoint()
    for r in store.replicas[1:]:
        r.space.checkpoint()
    d.mkdir(parents=True, exist_ok=True)
    _save(store, d)
    (d / CONFIG_NAME).write_text(dump_config(cfg))
    print(f"initialized {d} ({cfg.replicas} replicas, {cfg.device.entry_format.name}, "
          f"software={cfg.software})")
    _emit("init", [("dir", d), ("replicas", cfg.replicas),
                   ("entry_format", cfg.device.entry_format.name.lower()),
                   ("logical_capacity", cfg.device.logical_capacity),
                   ("physical_capacity", cfg.device.physical_capacity)])
    return 0


def _stats(store: ChunkStore) -> None:
    st = store.device.device_stats()
    m = store.snapshot_metrics()
    rows = [(f.name, getattr(st, f.name)) for f in dataclasses.fields(st)]
    rows += [("pages", len(store.space.index)), ("durable_lsn", store.durable_lsn),
             ("apply_lsn", store.apply_lsn), ("compression_ratio", m.compression_ratio)]
    _table(rows, ("stat", "value"))
    _emit("device", [(f.name, getattr(st, f.name)) for f in dataclasses.fields(st)])
    _emit("store", [("pages", len(store.space.index)), ("durable_lsn", store.durable_lsn),
                    ("apply_lsn", store.apply_lsn), ("compression_ratio", m.compression_ratio)])


def cmd_stats(args) -> int:
    store, _ = _open(Path(args.dir), args)
    _stats(store)
    return 0


def _metrics_report(m) -> None:
    scalars = m.scalars()
    _table(list(scalars.items()), ("metric", "value"))
    _emit("metrics", list(scalars.items()))
    for name, hist in m.histograms().items():
        for k, v in hist.items():
            _emit("hist", [("name", name), ("key", k), ("count", v)])


def cmd_run(args) -> int:
    d = Path(args.dir)
    store, cfg = _open(d, args)
    spec = CompressibilitySpec(args.target_ratio, Generator(args.generator), cfg.seed)
    runner = TraceRunner(store, spec)
    metrics = runner.run(parse_trace(Path(args.trace).read_text()))
    _metrics_report(metrics)
    for line, pid, lsn, result in runner.reads:
        _emit("read", [("line", line), ("page_id", pid), ("lsn", "-" if lsn is None else lsn),
                       ("result", result)])
    _save(runner.engine, d)
    return 0


def cmd_bench(args) -> int:
    d = Path(args.dir)
    store, cfg = _open(d, args)
    spec = CompressibilitySpec(args.target_ratio, Generator(args.generator), cfg.seed)
    for i in range(args.pages):
        store.write_page(args.first + i, generate_page(spec, i))
    for i in range(args.pages):
        store.read_page(args.first + i)
    _metrics_report(store.snapshot_metrics())
    _save(store, d)
    return 0


def cmd_archive(args) -> int:
    d = Path(args.dir)
    store, _ = _open(d, args)
    pages = range(args.lo, args.hi + 1)
    before = store.stored_blocks(pages)
    after = store.archive_range(pages)
    _table([("pages", len(pages)), ("blocks_before", before), ("blocks_after", after)],
           ("archive", "value"))
    _emit("archive", [("lo", args.lo), ("hi", args.hi), ("blocks_before", before),
                      ("blocks_after", after)])
    _save(store, d)
    return 0


def cmd_sched(args) -> int:
    pop = args.population or str(resources.files("csdstore") / "populations" / "cluster100.yaml")
    spec, sched = load_population(pop)
    if args.c_l is not None or args.c_h is not None:
        sched = dataclasses.replace(sched, c_l=args.c_l if args.c_l is not None else sched.c_l,
                                    c_h=args.c_h if args.c_h is not None else sched.c_h)
    seed = args.seed or 0
    series, initial, final = simulate(spec, sched, steps=args.steps, seed=seed)
    _table([(r.step, r.moves, r.in_range, r.imbalance.wasted_logical_pct,
             r.imbalance.wasted_physical_pct) for r in series],
           ("step", "moves", "in_range", "wasted_logical_%", "wasted_physical_%"))
    print(f"in-range fraction after scheduling: {series[-1].in_range:.4f}")
    for r in series:
        print("#DATA " + step_record(r))
    if args.nodes:
        c_avg = final.c_avg
        for n in final.nodes:
            print("#DATA " + node_record(n, sched, c_avg))
    if args.sweep:
        pairs = [tuple(float(x) for x in s.split(",")) for s in args.sweep]
        for row in sweep_bounds(spec, pairs, seed, sched):
            print("#DATA " + sweep_record(row))
    if args.plot_dir:
        from .plotting import plot_in_range, plot_plane
        out = Path(args.plot_dir)
        for p in (plot_plane(initial, final, sched, out / "sched_plane.png"),
                  plot_in_range(series, out / "sched_in_range.png")):
            _emit("figure", [("path", p)])
    return 0


def cmd_report(args) -> int:
    corpus = Path(args.corpus) if args.corpus else bundled_corpus()
    fmt = EntryFormat[args.format.upper()] if args.format else EntryFormat.V2
    reports = [corpus_report(corpus, p, fmt) for p in Pipeline]
    rows = [(r.pipeline.value, r.ratio("software"), r.ratio("aligned"), r.ratio("dual"),
             r.ratio("device"), r.alignment_overhead) for r in reports]
    _table(rows, ("pipeline", "software", "aligned_4k", "dual", "device_only", "align_overhead"))
    for r in reports:
        _emit("corpus", list(r.row().items()))
        for alg, n in r.algorithms.items():
            _emit("algorithm", [("pipeline", r.pipeline.value), ("algorithm", alg), ("pages", n)])
    by = {r.pipeline: r for r in reports}
    soft = zstd_advantage(by[Pipeline.LZ4_ONLY], by[Pipeline.ZSTD_ONLY], "software")
    dual = zstd_advantage(by[Pipeline.LZ4_ONLY], by[Pipeline.ZSTD_ONLY], "dual")
    print(f"zstd advantage over lz4: software {soft:.4f}, dual-layer {dual:.4f}")
    _emit("advantage", [("software", soft), ("dual", dual)])
    if args.plot_dir:
        from .plotting import plot_corpus
        p = plot_corpus(reports, Path(args.plot_dir) / "corpus_ratios.png")
        _emit("figure", [("path", p)])
    return 0


# ---- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csdstore", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=None, help="override the configured seed")
    sub = ap.add_subparsers(dest="command", required=True)

    def engine_flags(p):
        p.add_argument("--format", choices=("v1", "v2"), help="L2P entry format")
        sw = p.add_mutually_exclusive_group()
        sw.add_argument("--no-software-compression", dest="software", action="store_const",
                        const="off", help="device compression only")
        sw.add_argument("--adaptive", dest="software", action="store_const", const="adaptive")
        sw.add_argument("--lz4", dest="software", action="store_const", const="lz4")
        sw.add_argument("--zstd", dest="software", action="store_const", const="zstd")

    def data_flags(p):
        p.add_argument("--target-ratio", type=float, default=2.0)
        p.add_argument("--generator", choices=[g.value for g in Generator],
                       default=Generator.REPEAT_FILL.value)

    p = sub.add_parser("init", help="create an engine directory")
    p.add_argument("dir")
    p.add_argument("--config", help="YAML engine config")
    engine_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("stats", help="device and store counters")
    p.add_argument("dir")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("run", help="replay a trace file")
    p.add_argument("dir")
    p.add_argument("trace")
    data_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="write and read back generated pages")
    p.add_argument("dir")
    p.add_argument("--pages", type=int, default=64)
    p.add_argument("--first", type=int, default=0, help="first page id")
    data_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("archive", help="heavy-compress a page range")
    p.add_argument("dir")
    p.add_argument("lo", type=int)
    p.add_argument("hi", type=int)
    p.set_defaults(func=cmd_archive)

    p = sub.add_parser("sched", help="simulate compression-aware scheduling")
    p.add_argument("--population", help="population YAML (default: bundled 100 nodes)")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--c-l", type=float)
    p.add_argument("--c-h", type=float)
    p.add_argument("--nodes", action="store_true", help="emit one record per node")
    p.add_argument("--sweep", nargs="*", metavar="CL,CH", help="candidate bound pairs")
    p.add_argument("--plot-dir")
    p.set_defaults(func=cmd_sched)

    p = sub.add_parser("report", help="corpus ratios per pipeline")
    p.add_argument("--corpus", help="directory of *.pages files (default: bundled)")
    p.add_argument("--format", choices=("v1", "v2"))
    p.add_argument("--plot-dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
