"""Planted-signal longitudinal datasets and selection-frequency benchmarks.

A replicate draws expression for causal and noise genes, computes
``logit = sum(beta * X[gene, time])`` per subject and draws the class label
from ``P(case) = 1 / (1 + exp(-logit))``. Expression comes either from a
synthetic Gaussian model (AR(1) across time, equicorrelated blocks of genes)
or by resampling subjects of a real matrix.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import CASE, CONTROL, GeneSetCollection, LongitudinalMatrix, PhenotypeLabels, restrict
from .errors import DegenerateDataError, InputError
from .reduction import ReductionConfig, Signature, simple_samgsr, two_level_samgsr

logger = logging.getLogger(__name__)

MAX_LABEL_RETRIES = 20


@dataclass(frozen=True)
class CausalTerm:
    gene: str
    time: int  # 0-based time index
    beta: float


@dataclass(frozen=True)
class SimSpec:
    """Simulation settings.

    ``source`` is ``"gaussian"`` (synthetic) or ``"resample"`` (subjects drawn
    with replacement from a user-supplied matrix). In Gaussian mode every gene
    is standard normal at each time point with AR(1) correlation
    ``time_correlation`` between consecutive times, and genes in the same block
    of ``block_size`` share a latent factor giving pairwise correlation ``rho``.
    With ``causal_in_blocks`` each causal gene heads its own block, so its
    block-mates are correlated with it.
    """

    terms: tuple[CausalTerm, ...] = ()
    n_noise_genes: int = 998
    n_subjects: int = 100
    n_times: int = 5
    replicates: int = 50
    source: str = "gaussian"
    rho: float = 0.4
    block_size: int = 20
    time_correlation: float = 0.5
    causal_in_blocks: bool = True
    extra_set_memberships: int = 0
    seed: int = 0

    def __post_init__(self):
        terms = tuple(t if isinstance(t, CausalTerm) else CausalTerm(*t) for t in self.terms)
        object.__setattr__(self, "terms", terms)
        for t in terms:
            if not np.isfinite(t.beta):
                raise InputError(f"non-finite coefficient for {t.gene}")
            if not 0 <= t.time < self.n_times:
                raise InputError(f"time index {t.time} of {t.gene} outside 0..{self.n_times - 1}")
        if len({(t.gene, t.time) for t in terms}) != len(terms):
            raise InputError("duplicate (gene, time) causal term")
        if self.n_noise_genes < 0:
            raise InputError("n_noise_genes must be >= 0")
        if self.replicates < 1:
            raise InputError("replicates must be >= 1")
        if self.n_subjects < 4:
            raise InputError("n_subjects must be >= 4")
        if self.n_times < 1:
            raise InputError("n_times must be >= 1")
        if self.source not in ("gaussian", "resample"):
            raise InputError("source must be 'gaussian' or 'resample'")
        if not 0 <= self.rho < 1:
            raise InputError("rho must lie in [0, 1)")
        if not -1 < self.time_correlation < 1:
            raise InputError("time_correlation must lie in (-1, 1)")
        if self.block_size < 1:
            raise InputError("block_size must be >= 1")

    @property
    def causal_genes(self) -> list[str]:
        return list(dict.fromkeys(t.gene for t in self.terms))

    def negated(self) -> SimSpec:
        return replace(self, terms=tuple(CausalTerm(t.gene, t.time, -t.beta) for t in self.terms))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["terms"] = [[t.gene, t.time, t.beta] for t in self.terms]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> SimSpec:
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown simulation keys: {sorted(unknown)}")
        if "terms" in data:
            data["terms"] = tuple(
                CausalTerm(**t) if isinstance(t, dict) else CausalTerm(str(t[0]), int(t[1]), float(t[2]))
                for t in data["terms"]
            )
        return cls(**data)


def load_simspec(path) -> SimSpec:
    with Path(path).open() as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON: {exc}") from None
    return SimSpec.from_dict(data)


# time indices are 0-based: "time 1" of a five-point design is index 0
PRESETS = {
    "sim1": SimSpec(
        terms=(
            CausalTerm("F13A1", 0, 0.18),
            CausalTerm("F13A1", 1, 0.57),
            CausalTerm("F13A1", 2, 0.29),
            CausalTerm("F13A1", 3, 0.41),
            CausalTerm("GSTM1", 2, 1.02),
        ),
    ),
    "sim2": SimSpec(
        terms=(
            CausalTerm("COX4I2", 0, 0.56),
            CausalTerm("RP9", 4, -0.91),
        ),
    ),
    "null": SimSpec(terms=()),
}


def _ar1(rng, shape, phi):
    """Standard normal series along the last axis with lag-1 correlation ``phi``."""
    eta = rng.standard_normal(shape)
    out = np.empty(shape)
    out[..., 0] = eta[..., 0]
    scale = np.sqrt(1.0 - phi * phi)
    for t in range(1, shape[-1]):
        out[..., t] = phi * out[..., t - 1] + scale * eta[..., t]
    return out


def gene_layout(spec: SimSpec) -> tuple[list[str], list[list[str]]]:
    """Gene order and correlation blocks for Gaussian mode."""
    causal = spec.causal_genes
    noise = [f"N{i + 1:04d}" for i in range(spec.n_noise_genes)]
    blocks: list[list[str]] = []
    pool = list(noise)
    if spec.causal_in_blocks:
        for gene in causal:
            take = pool[: spec.block_size - 1]
            pool = pool[spec.block_size - 1 :]
            blocks.append([gene, *take])
    else:
        blocks.extend([g] for g in causal)
    while pool:
        blocks.append(pool[: spec.block_size])
        pool = pool[spec.block_size :]
    return [g for b in blocks for g in b], blocks


def synthetic_gene_sets(spec: SimSpec) -> GeneSetCollection:
    """One set per correlation block plus a set holding every causal gene.

    With ``extra_set_memberships = m`` each causal gene is also added to ``m``
    other blocks chosen from ``seed``.
    """
    _, blocks = gene_layout(spec)
    sets = [set(b) for b in blocks]
    causal = spec.causal_genes
    if spec.extra_set_memberships and len(sets) > 1:
        rng = np.random.default_rng(np.random.SeedSequence(int(spec.seed), spawn_key=(2**31,)))
        for gene in causal:
            home = next(i for i, b in enumerate(sets) if gene in b)
            others = [i for i in range(len(sets)) if i != home]
            m = min(spec.extra_set_memberships, len(others))
            for i in rng.choice(others, size=m, replace=False):
                sets[int(i)].add(gene)
    collection = GeneSetCollection()
    for i, members in enumerate(sets):
        collection[f"BLOCK_{i + 1:03d}"] = ("synthetic correlation block", members)
    if causal:
        collection["CAUSAL"] = ("planted causal genes", causal)
    return collection


def _gaussian_expression(spec, rng):
    genes, blocks = gene_layout(spec)
    S, T = spec.n_subjects, spec.n_times
    values = np.empty((len(genes), S, T))
    pos = 0
    for block in blocks:
        n = len(block)
        own = _ar1(rng, (n, S, T), spec.time_correlation)
        if spec.rho > 0:
            shared = _ar1(rng, (S, T), spec.time_correlation)
            own = np.sqrt(spec.rho) * shared[None] + np.sqrt(1.0 - spec.rho) * own
        values[pos : pos + n] = own
        pos += n
    return genes, values, np.ones(values.shape, dtype=bool)


def _resampled_expression(spec, rng, source: LongitudinalMatrix):
    causal = spec.causal_genes
    missing = [g for g in causal if g not in source.gene_index]
    if missing:
        raise InputError(f"causal genes absent from source matrix: {missing}")
    if source.shape[2] < spec.n_times:
        raise InputError("source matrix has fewer time points than the simulation")
    others = [g for g in source.genes if g not in set(causal)]
    if spec.n_noise_genes > len(others):
        raise InputError(f"source matrix has only {len(others)} candidate noise genes")
    noise = sorted(rng.choice(len(others), size=spec.n_noise_genes, replace=False).tolist())
    genes = causal + [others[i] for i in noise]
    gidx = [source.gene_index[g] for g in genes]
    subj = rng.integers(0, len(source.subjects), size=spec.n_subjects)
    values = source.values[np.ix_(gidx, subj, range(spec.n_times))]
    present = source.present[np.ix_(gidx, subj, range(spec.n_times))]
    return genes, values, present


def _draw_labels(logit, u):
    """Bernoulli(sigmoid(logit)) using one uniform per subject.

    The rule depends on the sign of the logit so that negating every
    coefficient yields exactly the complementary labeling for the same draws.
    """
    p = 1.0 / (1.0 + np.exp(-np.abs(logit)))
    return np.where(logit >= 0, u < p, u >= p)


def _causal_design(spec, genes, values, present):
    """Per-term expression used in the logit; real data are z-scored per (gene, time)."""
    index = {g: i for i, g in enumerate(genes)}
    cols = []
    for t in spec.terms:
        x = values[index[t.gene], :, t.time]
        ok = present[index[t.gene], :, t.time]
        if spec.source == "resample":
            mu = x[ok].mean() if ok.any() else 0.0
            sd = x[ok].std() if ok.sum() > 1 else 1.0
            x = (x - mu) / (sd if sd > 0 else 1.0)
        cols.append(np.where(ok, x, 0.0))
    return np.stack(cols, axis=1) if cols else np.zeros((values.shape[1], 0))


def generate(
    spec: SimSpec, replicate: int, source: LongitudinalMatrix | None = None
) -> tuple[LongitudinalMatrix, PhenotypeLabels]:
    """Draw one replicate; depends only on ``(spec, replicate)`` (and ``source``)."""
    expr_rng = np.random.default_rng(np.random.SeedSequence(int(spec.seed), spawn_key=(replicate, 0)))
    if spec.source == "gaussian":
        genes, values, present = _gaussian_expression(spec, expr_rng)
    else:
        if source is None:
            raise InputError("resample mode needs a source expression matrix")
        genes, values, present = _resampled_expression(spec, expr_rng, source)

    design = _causal_design(spec, genes, values, present)
    beta = np.array([t.beta for t in spec.terms])
    logit = design @ beta if beta.size else np.zeros(spec.n_subjects)
    for attempt in range(MAX_LABEL_RETRIES):
        label_rng = np.random.default_rng(
            np.random.SeedSequence(int(spec.seed), spawn_key=(replicate, 1, attempt))
        )
        case = _draw_labels(logit, label_rng.random(spec.n_subjects))
        if 2 <= case.sum() <= spec.n_subjects - 2:
            break
        logger.info("replicate %d: degenerate labels on attempt %d, redrawing", replicate, attempt)
    else:
        raise DegenerateDataError(
            f"replicate {replicate}: could not draw two subjects per class in {MAX_LABEL_RETRIES} tries"
        )

    subjects = [f"S{i + 1:03d}" for i in range(spec.n_subjects)]
    times = [f"t{j + 1}" for j in range(spec.n_times)]
    values = np.where(present, values, np.nan)
    matrix = LongitudinalMatrix.from_arrays(genes, subjects, times, values, present)
    labels = PhenotypeLabels({s: CASE if c else CONTROL for s, c in zip(subjects, case)})
    return matrix, labels


@dataclass
class SelectionFrequencyTable:
    """Per-time average selected-gene counts and causal selection percentages."""

    time_labels: tuple[str, ...]
    mean_genes_per_time: tuple[float, ...]
    causal_percent: dict[str, tuple[float, ...]]
    mean_unique_genes: float
    replicates: int
    method: str
    signatures: list[Signature] = field(default_factory=list, repr=False, compare=False)

    def percent(self, gene: str, time_index: int) -> float:
        return self.causal_percent[gene][time_index]

    def to_tsv(self) -> str:
        lines = ["row\t" + "\t".join(self.time_labels)]
        lines.append("# of genes\t" + "\t".join(_fmt(v) for v in self.mean_genes_per_time))
        for gene, pct in self.causal_percent.items():
            lines.append(f"{gene} (%)\t" + "\t".join(_fmt(v) for v in pct))
        lines.append(f"Ave. #\t{_fmt(self.mean_unique_genes)}")
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def replicate_seed(seed: int, replicate: int) -> int:
    """Permutation seed for one replicate, derived from ``(seed, replicate)``."""
    state = np.random.SeedSequence(int(seed), spawn_key=(replicate,)).generate_state(1, np.uint64)
    return int(state[0])


def _run_one(spec, method, config, replicate, collection, source):
    matrix, labels = generate(spec, replicate, source)
    rep_config = replace(config, seed=replicate_seed(config.seed, replicate), threads=1)
    if method == "simple":
        return simple_samgsr(matrix, labels, rep_config)
    sets = collection if collection is not None else synthetic_gene_sets(spec)
    sets = restrict(sets, matrix, min_size=1)
    return two_level_samgsr(matrix, labels, sets, rep_config)


def run_benchmark(
    spec: SimSpec,
    method: str = "simple",
    config: ReductionConfig | None = None,
    *,
    collection: GeneSetCollection | None = None,
    source: LongitudinalMatrix | None = None,
    threads: int = 1,
    keep_signatures: bool = False,
) -> SelectionFrequencyTable:
    """Run a selection method on every replicate and tabulate selection frequencies.

    Replicate ``r`` uses data seeded by ``(spec.seed, r)`` and permutations
    seeded by ``(config.seed, r)``, so the table does not depend on ``threads``.
    """
    if method not in ("simple", "two-level"):
        raise InputError(f"unknown method {method!r}")
    config = config or ReductionConfig()

    def work(r):
        return _run_one(spec, method, config, r, collection, source)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            signatures = list(pool.map(work, range(spec.replicates)))
    else:
        signatures = [work(r) for r in range(spec.replicates)]

    times = tuple(f"t{j + 1}" for j in range(spec.n_times))
    R = spec.replicates
    per_time = tuple(sum(len(s.genes_at(t)) for s in signatures) / R for t in times)
    causal = {}
    for gene in spec.causal_genes:
        causal[gene] = tuple(
            100.0 * sum((gene, t) in s.pairs() for s in signatures) / R for t in times
        )
    unique = sum(len(s.unique_genes()) for s in signatures) / R
    return SelectionFrequencyTable(
        times, per_time, causal, unique, R, method, signatures if keep_signatures else []
    )
