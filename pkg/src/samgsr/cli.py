"""Command-line interface: ``samgsr <subcommand> [options]``.

Every run writes its primary outputs plus ``manifest.json`` into ``--out``.
Settings resolve as flag > ``--config`` file > built-in default; the config
file is a JSON object, or a previous run's manifest (its ``config`` section is
used), so any run can be repeated from its manifest alone.

Exit codes: 0 success, 2 input or usage error, 3 degenerate data, 70 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .classifier_eval import evaluate, metrics_table
from .dataset import GeneSetCollection, load_expression, load_gmt, load_labels, restrict
from .errors import DegenerateDataError, InputError
from .reduction import (
    ReductionConfig,
    overlap_summary,
    read_signature,
    simple_samgsr,
    subgroup_means,
    two_level_samgsr,
    write_signature,
    write_trace,
)
from .report import safe_filename, subgroup_svg, write_overlap_tsv, write_subgroup_csv
from .sam_core import PermutationEngine, samgs_screen
from .simulation import PRESETS, SimSpec, load_simspec, run_benchmark

logger = logging.getLogger("samgsr")

FORMAT_VERSION = 1
THREADS_ENV = "SAMGSR_THREADS"

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3
EXIT_INTERNAL = 70

SAM_DEFAULTS = {
    "s0": "auto",
    "permutations": 1000,
    "seed": 0,
    "permutation_scope": "shared",
    "screen_null": "auto",
}
REDUCTION_DEFAULTS = {
    **SAM_DEFAULTS,
    "q_cutoff": 0.05,
    "c_cutoff": 0.2,
    "c_cutoff_genes": None,
    "c_cutoff_times": None,
}

DEFAULTS = {
    "screen": {
        **SAM_DEFAULTS, "expr": None, "labels": None, "gmt": None, "time_order": None, "min_set_size": 1,
    },
    "simple": {**REDUCTION_DEFAULTS, "expr": None, "labels": None, "time_order": None, "emit_trace": False},
    "two-level": {
        **REDUCTION_DEFAULTS, "expr": None, "labels": None, "gmt": None, "time_order": None,
        "min_set_size": 1, "emit_trace": False,
    },
    "evaluate": {
        "signature": None, "expr": None, "labels": None, "test_expr": None, "test_labels": None,
        "time_order": None, "C": 1.0,
    },
    "simulate": {
        **REDUCTION_DEFAULTS, "preset": None, "spec": None, "method": "simple", "replicates": None,
        "rho": None, "n_subjects": None, "n_noise_genes": None, "source_expr": None, "gmt": None,
        "keep_signatures": False,
    },
    "report": {"signature": None, "expr": None, "labels": None, "time_order": None, "plot_genes": "common"},
}
REQUIRED = {
    "screen": ("expr", "labels"),
    "simple": ("expr", "labels"),
    "two-level": ("expr", "labels", "gmt"),
    "evaluate": ("signature", "expr", "labels"),
    "simulate": (),
    "report": ("signature", "expr", "labels"),
}
PATH_KEYS = {"expr", "labels", "gmt", "signature", "test_expr", "test_labels", "spec", "source_expr"}


# ---------------------------------------------------------------- parsing


def _s0(text: str):
    if text == "auto":
        return text
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("s0 must be 'auto', a number, or comma-separated numbers") from None
    return values[0] if len(values) == 1 else values


def _time_order(text: str):
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_common(p):
    p.add_argument("--config", help="JSON config file or previous manifest")
    p.add_argument("--out", help="output directory (default: current directory)")
    p.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or CPU count)")
    p.add_argument("--dry-run", action="store_true", default=None, help="validate inputs, print config, stop")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_inputs(p, gmt=False):
    p.add_argument("--expr", help="expression TSV (gene column, then subject@time columns)")
    p.add_argument("--labels", help="subject-to-class TSV")
    if gmt:
        p.add_argument("--gmt", help="gene-set collection in GMT format")
        p.add_argument("--min-set-size", type=int)
    p.add_argument("--time-order", type=_time_order, help="comma-separated time labels")


def _add_sam(p):
    p.add_argument("--s0", type=_s0)
    p.add_argument("--permutations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--permutation-scope", choices=("shared", "per_set"))
    p.add_argument("--screen-null", choices=("auto", "per_set", "pooled"))


def _add_reduction(p):
    _add_sam(p)
    p.add_argument("--q-cutoff", type=float)
    p.add_argument("--c-cutoff", type=float)
    p.add_argument("--c-cutoff-genes", type=float)
    p.add_argument("--c-cutoff-times", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samgsr", description="SAMGS-based feature selection for longitudinal two-class expression data."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("screen", help="permutation SAMGS screen of gene sets (or single genes)")
    _add_common(p)
    _add_inputs(p, gmt=True)
    _add_sam(p)

    p = sub.add_parser("simple", help="simple SAMGSR: per-gene screen, then time reduction")
    _add_common(p)
    _add_inputs(p)
    _add_reduction(p)
    p.add_argument("--emit-trace", action="store_true", default=None)

    p = sub.add_parser("two-level", help="two-level SAMGSR: set screen, gene and time reduction")
    _add_common(p)
    _add_inputs(p, gmt=True)
    _add_reduction(p)
    p.add_argument("--emit-trace", action="store_true", default=None)

    p = sub.add_parser("evaluate", help="per-time classifier metrics for a signature")
    _add_common(p)
    p.add_argument("--signature", help="signature TSV")
    _add_inputs(p)
    p.add_argument("--test-expr")
    p.add_argument("--test-labels")
    p.add_argument("--C", type=float, dest="C", help="hinge-loss cost (default 1)")

    p = sub.add_parser("simulate", help="planted-signal benchmark")
    _add_common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--spec", help="simulation settings JSON")
    p.add_argument("--method", choices=("simple", "two-level"))
    p.add_argument("--replicates", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--n-noise-genes", type=int)
    p.add_argument("--source-expr", help="expression pool for resample mode")
    p.add_argument("--gmt", help="gene sets for two-level runs (default: synthetic blocks)")
    p.add_argument("--keep-signatures", action="store_true", default=None)
    _add_reduction(p)

    p = sub.add_parser("report", help="subgroup-mean tables, overlap counts and SVG plots")
    _add_common(p)
    p.add_argument("--signature")
    _add_inputs(p)
    p.add_argument("--plot-genes", choices=("common", "all"), help="genes selected at every time, or all")
    return parser


def _read_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise InputError(f"{path}: config must be a JSON object")
    if "config" in data and "format_version" in data:
        data = data["config"]
    return data


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags (in increasing priority)."""
    command = args.command
    resolved = dict(DEFAULTS[command])
    resolved["out"] = "."
    env = os.environ.get(THREADS_ENV)
    try:
        resolved["threads"] = int(env) if env else (os.cpu_count() or 1)
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if args.config:
        file_cfg = _read_config_file(args.config)
        if file_cfg.get("command", command) != command:
            raise InputError(f"config is for '{file_cfg['command']}', not '{command}'")
        unknown = set(file_cfg) - set(resolved) - {"command"}
        if unknown:
            raise InputError(f"unknown config keys for {command}: {sorted(unknown)}")
        resolved.update({k: v for k, v in file_cfg.items() if k != "command"})
    for key in list(resolved):
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    for key in PATH_KEYS & set(resolved):
        if resolved[key] is not None:
            resolved[key] = str(Path(resolved[key]).resolve())
    if resolved["threads"] < 1:
        raise InputError("threads must be >= 1")
    missing = [k for k in REQUIRED[command] if not resolved.get(k)]
    if missing:
        raise InputError(f"{command}: missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    resolved["command"] = command
    return resolved


# ---------------------------------------------------------------- helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _reduction_config(cfg) -> ReductionConfig:
    s0 = cfg["s0"]
    return ReductionConfig(
        s0=tuple(s0) if isinstance(s0, list) else s0,
        permutations=int(cfg["permutations"]),
        seed=int(cfg["seed"]),
        permutation_scope=cfg["permutation_scope"],
        screen_null=cfg["screen_null"],
        threads=int(cfg["threads"]),
        q_cutoff=float(cfg.get("q_cutoff", 0.05)),
        c_cutoff=float(cfg.get("c_cutoff", 0.2)),
        c_cutoff_genes=cfg.get("c_cutoff_genes"),
        c_cutoff_times=cfg.get("c_cutoff_times"),
    )


def _load_inputs(cfg):
    matrix = load_expression(cfg["expr"], time_order=cfg.get("time_order"))
    labels = load_labels(cfg["labels"], subjects=matrix.subjects)
    labels = labels.for_subjects(matrix.subjects)
    return matrix, labels


def _load_sets(cfg, matrix) -> GeneSetCollection:
    return restrict(load_gmt(cfg["gmt"]), matrix, min_size=int(cfg.get("min_set_size", 1)))


def write_screen(rows, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("set_name\tsize\tsamgs\tp_value\tq_value\n")
        for r in rows:
            fh.write(f"{r.name}\t{r.size}\t{float(r.samgs)!r}\t{float(r.p_value)!r}\t{float(r.q_value)!r}\n")


class Run:
    """Collects outputs, counts and timings for the manifest."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.outputs: list[str] = []
        self.counts: dict = {}
        self.timings: dict = {}
        self._t0 = time.perf_counter()

    def path(self, name) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return p

    def stage(self, name, t_start):
        self.timings[name] = round(time.perf_counter() - t_start, 6)

    def write_manifest(self):
        inputs = {
            k: {"path": self.cfg[k], "sha256": _sha256(self.cfg[k])}
            for k in sorted(PATH_KEYS)
            if self.cfg.get(k)
        }
        self.timings["total"] = round(time.perf_counter() - self._t0, 6)
        manifest = {
            "tool": "samgsr",
            "version": __version__,
            "format_version": FORMAT_VERSION,
            "command": self.cfg["command"],
            "config": self.cfg,
            "inputs": inputs,
            "counts": self.counts,
            "outputs": self.outputs,
            "timings_seconds": self.timings,
        }
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_screen(cfg, run: Run):
    t = time.perf_counter()
    matrix, labels = _load_inputs(cfg)
    if cfg.get("gmt"):
        sets = _load_sets(cfg, matrix)
    else:
        sets = GeneSetCollection()
        for g in matrix.genes:
            sets[g] = ("", {g})
    run.stage("load", t)
    if cfg["dry_run"]:
        return
    t = time.perf_counter()
    config = _reduction_config(cfg).sam()
    rows = samgs_screen(sets, matrix, labels, config, engine=PermutationEngine(matrix, labels, config))
    run.stage("screen", t)
    write_screen(rows, run.path("screen.tsv"))
    run.counts = {"sets_screened": len(rows), "genes": len(matrix.genes), "subjects": len(matrix.subjects)}


def _cmd_select(cfg, run: Run, two_level: bool):
    t = time.perf_counter()
    matrix, labels = _load_inputs(cfg)
    sets = _load_sets(cfg, matrix) if two_level else None
    config = _reduction_config(cfg)
    run.stage("load", t)
    if cfg["dry_run"]:
        return
    t = time.perf_counter()
    if two_level:
        signature = two_level_samgsr(matrix, labels, sets, config)
    else:
        signature = simple_samgsr(matrix, labels, config)
    run.stage("select", t)
    write_signature(signature, run.path("signature.tsv"))
    write_screen(signature.screen, run.path("screen.tsv"))
    write_overlap_tsv(overlap_summary(signature), run.path("overlap.tsv"))
    if cfg["emit_trace"]:
        write_trace(signature.traces, run.path("trace.tsv"))
    run.counts = dict(signature.stage_counts)
    run.counts["genes_per_time"] = {t: len(signature.genes_at(t)) for t in signature.time_labels}
    run.counts["excluded_genes"] = len(signature.excluded_genes)


def cmd_simple(cfg, run):
    _cmd_select(cfg, run, two_level=False)


def cmd_two_level(cfg, run):
    _cmd_select(cfg, run, two_level=True)


def cmd_evaluate(cfg, run: Run):
    t = time.perf_counter()
    matrix, labels = _load_inputs(cfg)
    signature = read_signature(cfg["signature"], time_labels=matrix.time_labels)
    test_matrix = test_labels = None
    if bool(cfg.get("test_expr")) != bool(cfg.get("test_labels")):
        raise InputError("--test-expr and --test-labels must be given together")
    if cfg.get("test_expr"):
        test_matrix = load_expression(cfg["test_expr"], time_order=cfg.get("time_order"))
        test_labels = load_labels(cfg["test_labels"], subjects=test_matrix.subjects)
    absent = sorted(set(signature.unique_genes()) - set(matrix.genes))
    if test_matrix is not None:
        absent += sorted(set(signature.unique_genes()) - set(test_matrix.genes) - set(absent))
    if absent:
        raise InputError(f"signature genes absent from expression data: {absent[:10]}")
    run.stage("load", t)
    if cfg["dry_run"]:
        return
    t = time.perf_counter()
    rows = evaluate(signature, matrix, labels, test_matrix, test_labels, C=float(cfg["C"]))
    run.stage("evaluate", t)
    run.path("metrics.tsv").write_text(metrics_table(rows))
    run.counts = {"empty_time_points": sorted({r.time_label for r in rows if r.empty})}


def _sim_spec(cfg) -> SimSpec:
    if cfg.get("spec"):
        spec = load_simspec(cfg["spec"])
    elif cfg.get("preset"):
        spec = PRESETS[cfg["preset"]]
    else:
        raise InputError("simulate needs --preset or --spec")
    changes = {k: cfg[k] for k in ("replicates", "rho", "n_subjects", "n_noise_genes") if cfg.get(k) is not None}
    changes["seed"] = int(cfg["seed"])
    if cfg.get("source_expr"):
        changes["source"] = "resample"
    return replace(spec, **changes)


def cmd_simulate(cfg, run: Run):
    t = time.perf_counter()
    spec = _sim_spec(cfg)
    config = _reduction_config(cfg)
    source = load_expression(cfg["source_expr"]) if cfg.get("source_expr") else None
    collection = load_gmt(cfg["gmt"]) if cfg.get("gmt") else None
    if spec.source == "resample" and source is None:
        raise InputError("resample mode needs --source-expr")
    run.stage("load", t)
    if cfg["dry_run"]:
        return
    t = time.perf_counter()
    table = run_benchmark(
        spec,
        cfg["method"],
        replace(config, threads=1),
        collection=collection,
        source=source,
        threads=int(cfg["threads"]),
        keep_signatures=bool(cfg["keep_signatures"]),
    )
    run.stage("simulate", t)
    run.path("selection.tsv").write_text(table.to_tsv())
    run.path("simspec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    for r, sig in enumerate(table.signatures):
        write_signature(sig, run.path(f"signatures/replicate_{r:03d}.tsv"))
    run.counts = {"replicates": table.replicates, "mean_unique_genes": table.mean_unique_genes}


def cmd_report(cfg, run: Run):
    t = time.perf_counter()
    matrix, labels = _load_inputs(cfg)
    signature = read_signature(cfg["signature"], time_labels=matrix.time_labels)
    genes = signature.unique_genes()
    absent = [g for g in genes if g not in matrix.gene_index]
    if absent:
        raise InputError(f"signature genes absent from expression data: {absent[:10]}")
    run.stage("load", t)
    if cfg["dry_run"]:
        return
    rows = subgroup_means(matrix, labels, genes)
    write_subgroup_csv(rows, run.path("subgroup_means.csv"))
    write_overlap_tsv(overlap_summary(signature), run.path("overlap.tsv"))
    if cfg["plot_genes"] == "all":
        plotted = genes
    else:
        n_times = len(matrix.time_labels)
        plotted = [g for g, ts in sorted(signature.time_sets().items()) if len(ts) == n_times]
    for gene in plotted:
        svg = subgroup_svg(gene, rows, matrix.time_labels)
        run.path(f"plots/{safe_filename(gene)}.svg").write_text(svg)
    run.counts = {"genes": len(genes), "plots": len(plotted)}


COMMANDS = {
    "screen": cmd_screen,
    "simple": cmd_simple,
    "two-level": cmd_two_level,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        cfg["dry_run"] = bool(args.dry_run)
        run = Run(cfg)
        COMMANDS[cfg["command"]](cfg, run)
        if cfg["dry_run"]:
            print(json.dumps({k: v for k, v in cfg.items() if k != "dry_run"}, indent=2, sort_keys=True))
            return EXIT_OK
        del cfg["dry_run"]
        run.write_manifest()
    except InputError as exc:
        print(f"samgsr: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"samgsr: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DegenerateDataError as exc:
        print(f"samgsr: degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        print(f"samgsr: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
