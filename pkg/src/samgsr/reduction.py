"""Core-subset reduction and the two longitudinal selection procedures.

Given items ordered by importance, the reduction tests the residual set formed
by items ``k+1..|S|`` for ``k = 1..|S|-1`` and keeps the first ``k`` items for
the least ``k`` whose residual permutation p-value ``c_k`` exceeds the cutoff.
When no residual clears the cutoff the whole set is kept.

* :func:`simple_samgsr` treats each gene's time course as a gene set, screens
  genes, then reduces each kept gene to its informative time points.
* :func:`two_level_samgsr` screens real gene sets, reduces each kept set to a
  core of genes, and reduces every gene in the union of cores to time points.

All permutation tests in one run share the screen's permutation sequence.
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import CASE, CONTROL, GeneSetCollection, LongitudinalMatrix, PhenotypeLabels
from .errors import DegenerateDataError, InputError
from .sam_core import (
    PermutationEngine,
    SamConfig,
    ScreenResult,
    permutation_pvalue_from_null,
    samgs_screen,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReductionConfig(SamConfig):
    """SAM settings plus screening and reduction cutoffs.

    ``c_cutoff`` is the default for both reduction levels; ``c_cutoff_genes``
    and ``c_cutoff_times`` override it per level.
    """

    q_cutoff: float = 0.05
    c_cutoff: float = 0.2
    c_cutoff_genes: float | None = None
    c_cutoff_times: float | None = None

    def __post_init__(self):
        super().__post_init__()
        if self.c_cutoff_genes is None:
            object.__setattr__(self, "c_cutoff_genes", self.c_cutoff)
        if self.c_cutoff_times is None:
            object.__setattr__(self, "c_cutoff_times", self.c_cutoff)
        for name in ("q_cutoff", "c_cutoff", "c_cutoff_genes", "c_cutoff_times"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise InputError(f"{name} must lie in (0, 1), got {value}")

    def sam(self) -> SamConfig:
        return SamConfig(
            s0=self.s0,
            permutations=self.permutations,
            seed=self.seed,
            permutation_unit=self.permutation_unit,
            permutation_scope=self.permutation_scope,
            screen_null=self.screen_null,
            threads=self.threads,
        )


@dataclass(frozen=True)
class ReductionTrace:
    """Ordered items with the residual p-value ``c[k-1]`` for each ``k = 1..|S|-1``."""

    items: tuple
    scores: tuple[float, ...]
    c: tuple[float, ...]
    chosen_k: int
    cutoff: float
    context: str = ""

    @property
    def core(self) -> tuple:
        return self.items[: self.chosen_k]


def reduce_ordered(items, observed, null, c_cutoff: float, context: str = "") -> ReductionTrace:
    """Reduction on precomputed per-item statistics.

    ``observed`` has one SAMGS contribution per item and ``null`` the matching
    permutation values, shape (items, permutations); items must already be in
    descending order of importance.
    """
    items = tuple(items)
    if not items:
        raise InputError("reduction needs at least one item")
    observed = np.asarray(observed, dtype=float)
    null = np.asarray(null, dtype=float)
    n = len(items)
    # residual after k items = items k..n-1, accumulated from the tail
    c = [0.0] * (n - 1)
    res_obs = 0.0
    res_null = np.zeros(null.shape[1])
    for k in range(n - 1, 0, -1):
        res_obs = res_obs + observed[k]
        res_null = res_null + null[k]
        c[k - 1] = permutation_pvalue_from_null(res_obs, res_null)
    chosen = next((k for k in range(1, n) if c[k - 1] > c_cutoff), n)
    return ReductionTrace(items, tuple(float(v) for v in observed), tuple(c), chosen, c_cutoff, context)


def reduce_items(
    items: Sequence[Iterable[tuple[int, int]]],
    engine: PermutationEngine,
    c_cutoff: float,
    context: str = "",
) -> ReductionTrace:
    """Reduce an ordered list of cell sets to its core prefix."""
    items = [tuple(sorted(set(it))) for it in items]
    observed = [engine.cells_observed(it) for it in items]
    null = np.stack([engine.cells_null(it) for it in items]) if items else np.zeros((0, 0))
    return reduce_ordered(items, observed, null, c_cutoff, context)


def order_genes(members: Iterable[int], stats, gene_names: Sequence[str]) -> list[int]:
    """Gene indices by descending sum over time of squared SAM statistics, ties by id."""
    d = stats.d
    scores = {g: float(np.sum(np.where(stats.usable[g], d[g], 0.0) ** 2)) for g in members}
    return sorted(scores, key=lambda g: (-scores[g], gene_names[g]))


def order_times(gene: int, stats) -> list[int]:
    """Usable time indices of one gene by descending squared SAM statistic."""
    times = [j for j in range(stats.d.shape[1]) if stats.usable[gene, j]]
    return sorted(times, key=lambda j: (-(stats.d[gene, j] ** 2), j))


@dataclass(frozen=True)
class SignatureEntry:
    gene: str
    time_index: int
    time_label: str
    d: float
    stage: str


@dataclass
class Signature:
    """Selected (gene, time point) pairs plus the provenance of the run."""

    entries: tuple[SignatureEntry, ...]
    time_labels: tuple[str, ...]
    method: str = ""
    screen: list[ScreenResult] = field(default_factory=list)
    traces: list[ReductionTrace] = field(default_factory=list)
    excluded_genes: tuple[str, ...] = ()
    stage_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = tuple(sorted(self.entries, key=lambda e: (e.gene, e.time_index)))
        pairs = [(e.gene, e.time_label) for e in self.entries]
        if len(set(pairs)) != len(pairs):
            raise InputError("duplicate (gene, time) pair in signature")

    def __len__(self):
        return len(self.entries)

    def pairs(self) -> set[tuple[str, str]]:
        return {(e.gene, e.time_label) for e in self.entries}

    def unique_genes(self) -> list[str]:
        return sorted({e.gene for e in self.entries})

    def genes_at(self, time_label: str) -> list[str]:
        return sorted(e.gene for e in self.entries if e.time_label == time_label)

    def time_sets(self) -> dict[str, frozenset[str]]:
        out: dict[str, set[str]] = {}
        for e in self.entries:
            out.setdefault(e.gene, set()).add(e.time_label)
        return {g: frozenset(ts) for g, ts in out.items()}


def _usable_genes(matrix, stats):
    keep = stats.usable.any(axis=1)
    excluded = tuple(g for g, ok in zip(matrix.genes, keep) if not ok)
    for g in excluded:
        logger.warning("gene %s has no usable time point; excluded before screening", g)
    return [i for i in range(len(matrix.genes)) if keep[i]], excluded


def _reduce_times(genes, engine, matrix, cutoff, stage_of):
    """Time-level reduction of every gene in ``genes``; returns (entries, traces)."""
    stats = engine.stats
    entries, traces = [], []
    for g in genes:
        times = order_times(g, stats)
        if not times:
            continue
        items = [matrix.times[j].label for j in times]
        observed = [float(stats.d[g, j] ** 2) for j in times]
        null_d = engine.null_d([g])[0]
        null = np.stack([null_d[j] * null_d[j] for j in times])
        trace = reduce_ordered(items, observed, null, cutoff, context=matrix.genes[g])
        traces.append(trace)
        for j in times[: trace.chosen_k]:
            entries.append(
                SignatureEntry(
                    matrix.genes[g], j, matrix.times[j].label, float(stats.d[g, j]), stage_of(g)
                )
            )
    return entries, traces


def _engine_for(matrix, labels, config, engine):
    if engine is None:
        engine = PermutationEngine(matrix, labels, config.sam(), cache_chunks=32)
    return engine


def simple_samgsr(
    matrix: LongitudinalMatrix,
    labels: PhenotypeLabels,
    config: ReductionConfig | None = None,
    *,
    engine: PermutationEngine | None = None,
) -> Signature:
    """Screen each gene's time course as a set, then reduce kept genes over time."""
    config = config or ReductionConfig()
    engine = _engine_for(matrix, labels, config, engine)
    genes, excluded = _usable_genes(matrix, engine.stats)
    if not genes:
        raise DegenerateDataError("no gene has a usable time point")
    singletons = GeneSetCollection()
    for g in genes:
        singletons[matrix.genes[g]] = ("", {matrix.genes[g]})
    screen = samgs_screen(singletons, matrix, labels, config.sam(), engine=engine)
    kept = sorted(matrix.gene_index[r.name] for r in screen if r.q_value <= config.q_cutoff)
    if not kept:
        logger.warning("no gene passed screening at q <= %g; signature is empty", config.q_cutoff)
    entries, traces = _reduce_times(
        kept, engine, matrix, config.c_cutoff_times, lambda g: "simple"
    )
    return Signature(
        tuple(entries),
        tuple(matrix.time_labels),
        method="simple",
        screen=screen,
        traces=traces,
        excluded_genes=excluded,
        stage_counts={
            "genes_screened": len(genes),
            "genes_passing_screen": len(kept),
            "pairs_selected": len(entries),
        },
    )


def two_level_samgsr(
    matrix: LongitudinalMatrix,
    labels: PhenotypeLabels,
    collection: GeneSetCollection,
    config: ReductionConfig | None = None,
    *,
    engine: PermutationEngine | None = None,
) -> Signature:
    """Screen gene sets, reduce kept sets to core genes, then reduce the union over time."""
    config = config or ReductionConfig()
    engine = _engine_for(matrix, labels, config, engine)
    genes, excluded = _usable_genes(matrix, engine.stats)
    usable_names = {matrix.genes[g] for g in genes}
    cleaned = GeneSetCollection()
    for name, (description, members) in collection.items():
        unknown = [m for m in members if m not in matrix.gene_index]
        if unknown:
            raise InputError(f"gene set {name!r} has members absent from the matrix; restrict first")
        kept_members = members & usable_names
        if kept_members:
            cleaned[name] = (description, kept_members)
    if not cleaned:
        raise DegenerateDataError("no gene set has a usable member")

    screen = samgs_screen(cleaned, matrix, labels, config.sam(), engine=engine)
    significant = [r.name for r in screen if r.q_value <= config.q_cutoff]
    if not significant:
        logger.warning("no gene set passed screening at q <= %g; signature is empty", config.q_cutoff)

    obs_totals = engine.gene_observed_totals()
    null_totals = engine.gene_null_totals() if significant else None
    traces = []
    sources: dict[int, list[str]] = {}
    for name in significant:
        ordered = order_genes((matrix.gene_index[m] for m in cleaned.members(name)), engine.stats, matrix.genes)
        trace = reduce_ordered(
            [matrix.genes[g] for g in ordered],
            obs_totals[ordered],
            null_totals[ordered],
            config.c_cutoff_genes,
            context=name,
        )
        traces.append(trace)
        for gene in trace.core:
            sources.setdefault(matrix.gene_index[gene], []).append(name)

    union = sorted(sources)
    entries, time_traces = _reduce_times(
        union, engine, matrix, config.c_cutoff_times, lambda g: ";".join(sorted(sources[g]))
    )
    return Signature(
        tuple(entries),
        tuple(matrix.time_labels),
        method="two-level",
        screen=screen,
        traces=traces + time_traces,
        excluded_genes=excluded,
        stage_counts={
            "sets_screened": len(cleaned),
            "sets_passing_screen": len(significant),
            "core_gene_union": len(union),
            "pairs_selected": len(entries),
        },
    )


def overlap_summary(signature: Signature, time_labels: Sequence[str] | None = None):
    """Number of genes selected at exactly each non-empty subset of time points.

    Returns ``[(subset, count), ...]`` ordered by subset size, then time order.
    """
    labels = list(time_labels if time_labels is not None else signature.time_labels)
    counts = {}
    for r in range(1, len(labels) + 1):
        for combo in itertools.combinations(labels, r):
            counts[frozenset(combo)] = 0
    for times in signature.time_sets().values():
        counts[frozenset(times)] += 1
    order = {lab: i for i, lab in enumerate(labels)}
    return [
        (tuple(sorted(k, key=order.__getitem__)), v)
        for k, v in sorted(counts.items(), key=lambda kv: (len(kv[0]), sorted(order[x] for x in kv[0])))
    ]


def subgroup_means(matrix: LongitudinalMatrix, labels: PhenotypeLabels, genes: Sequence[str]):
    """Complete-case class means per gene and time point, as tidy rows.

    Each row is ``(gene, time_label, class, mean, n)``; ``mean`` is NaN when no
    subject of that class is observed.
    """
    case = labels.case_mask(matrix.subjects)
    rows = []
    for gene in genes:
        if gene not in matrix.gene_index:
            raise InputError(f"gene {gene!r} not in expression matrix")
        g = matrix.gene_index[gene]
        for t in matrix.times:
            for cls, mask in ((CASE, case), (CONTROL, ~case)):
                ok = mask & matrix.present[g, :, t.index]
                n = int(ok.sum())
                mean = float(matrix.values[g, ok, t.index].mean()) if n else float("nan")
                rows.append((gene, t.label, cls, mean, n))
    return rows


SIGNATURE_HEADER = ["gene", "time_label", "d", "stage"]


def write_signature(signature: Signature, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("\t".join(SIGNATURE_HEADER) + "\n")
        for e in signature.entries:
            fh.write(f"{e.gene}\t{e.time_label}\t{e.d!r}\t{e.stage}\n")


def read_signature(path, time_labels: Sequence[str] | None = None) -> Signature:
    """Read a signature TSV; ``time_labels`` fixes time order (default: first appearance)."""
    path = Path(path)
    with path.open() as fh:
        lines = [ln.rstrip("\r\n") for ln in fh if ln.strip()]
    if not lines or lines[0].split("\t")[:2] != SIGNATURE_HEADER[:2]:
        raise InputError(f"{path}: not a signature file (expected header {SIGNATURE_HEADER})")
    rows = [ln.split("\t") for ln in lines[1:]]
    labels = list(time_labels) if time_labels is not None else []
    if time_labels is None:
        for r in rows:
            if r[1] not in labels:
                labels.append(r[1])
    order = {lab: i for i, lab in enumerate(labels)}
    entries = []
    for r in rows:
        if r[1] not in order:
            raise InputError(f"{path}: time label {r[1]!r} not among {labels}")
        d = float(r[2]) if len(r) > 2 and r[2] else float("nan")
        stage = r[3] if len(r) > 3 else ""
        entries.append(SignatureEntry(r[0], order[r[1]], r[1], d, stage))
    return Signature(tuple(entries), tuple(labels))


def write_trace(traces: Sequence[ReductionTrace], path) -> None:
    """One row per (reduction, k) with the residual p-value and whether k was chosen."""
    with Path(path).open("w") as fh:
        fh.write("context\tk\titem\tscore\tc_k\tcutoff\tin_core\n")
        for tr in traces:
            for k, item in enumerate(tr.items, 1):
                label = item if isinstance(item, str) else ",".join(f"{g}:{t}" for g, t in item)
                ck = repr(tr.c[k - 1]) if k <= len(tr.c) else ""
                fh.write(
                    f"{tr.context}\t{k}\t{label}\t{tr.scores[k - 1]!r}\t{ck}\t{tr.cutoff!r}\t"
                    f"{int(k <= tr.chosen_k)}\n"
                )
