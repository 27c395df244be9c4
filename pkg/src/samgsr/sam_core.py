"""SAM and SAMGS statistics with subject-level permutation p-values.

The SAM statistic of a (gene, time) cell is

    d = (mean_case - mean_control) / (s + s0),
    s = sqrt((1/n_case + 1/n_control) / (n_case + n_control - 2) * (SS_case + SS_control))

computed from the subjects observed at that cell. A SAMGS value is the sum of
squared d over a set of cells. Note the sum of squares is used rather than its
square root; permutation p-values only depend on the ordering, which both share.

Permutations relabel whole subjects, so a subject's time course always moves
with its label. Permutation ``b`` is drawn from a generator seeded by
``(seed, b)`` alone, and every null statistic is computed in fixed gene chunks,
so results do not depend on the number of worker threads.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import OrderedDict
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import false_discovery_control

from .dataset import GeneSetCollection, LongitudinalMatrix, PhenotypeLabels
from .errors import DegenerateDataError, InputError

logger = logging.getLogger(__name__)

#: genes per unit of work; fixed so floating point results never depend on scheduling
GENE_CHUNK = 64
#: relative slack when counting null >= observed; absorbs last-bit differences
#: between the observed and permutation code paths
PVALUE_RTOL = 1e-12

CellSet = frozenset  # of (gene index, time index) pairs


@dataclass(frozen=True)
class SamConfig:
    """Settings for SAM statistics and permutation tests.

    ``s0`` is ``"auto"`` (median pooled standard error per time point), a single
    number, or one number per time point. ``permutation_scope`` chooses between
    one permutation sequence shared by every test in a run (``"shared"``) and a
    fresh sequence per gene set (``"per_set"``).

    ``screen_null`` picks the reference distribution of screening p-values:
    each set's own permutation values (``"per_set"``), or the permutation values
    of all screened sets pooled (``"pooled"``), which is only valid when the
    sets are exchangeable. ``"auto"`` pools exactly when every set has the same
    number of genes (per-gene screening of time courses is the common case).
    """

    s0: str | float | tuple[float, ...] = "auto"
    permutations: int = 1000
    seed: int = 0
    permutation_unit: str = "subject"
    permutation_scope: str = "shared"
    screen_null: str = "auto"
    threads: int = 1

    def __post_init__(self):
        if self.permutations < 1:
            raise InputError("permutations must be >= 1")
        if self.permutation_unit != "subject":
            raise InputError("only subject-level permutation is supported")
        if self.permutation_scope not in ("shared", "per_set"):
            raise InputError("permutation_scope must be 'shared' or 'per_set'")
        if self.screen_null not in ("auto", "per_set", "pooled"):
            raise InputError("screen_null must be 'auto', 'per_set' or 'pooled'")
        if self.threads < 1:
            raise InputError("threads must be >= 1")
        if isinstance(self.s0, str):
            if self.s0 != "auto":
                raise InputError(f"s0 must be 'auto' or numeric, got {self.s0!r}")
        elif isinstance(self.s0, (int, float)):
            if not self.s0 >= 0:
                raise InputError("s0 must be >= 0")
        else:
            object.__setattr__(self, "s0", tuple(float(v) for v in self.s0))
            if any(not v >= 0 for v in self.s0):
                raise InputError("s0 must be >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise InputError("seed must fit in 64 bits")


@dataclass(frozen=True, eq=False)
class SamStatMatrix:
    d: np.ndarray  # [gene, time]; 0 where not usable
    usable: np.ndarray
    s0: np.ndarray  # per time point

    @property
    def n_unusable(self) -> int:
        return int(self.usable.size - np.count_nonzero(self.usable))


@dataclass(frozen=True, eq=False)
class PermutationResult:
    observed: float
    null_values: np.ndarray
    p_value: float


@dataclass(frozen=True)
class ScreenResult:
    name: str
    size: int
    samgs: float
    p_value: float
    q_value: float


def sam_statistic(case_values: Sequence[float], control_values: Sequence[float], s0: float) -> float:
    """SAM statistic of one cell; needs two values per class and ``s + s0 > 0``."""
    x = np.asarray(case_values, dtype=float)
    y = np.asarray(control_values, dtype=float)
    nd, nc = len(x), len(y)
    if nd < 2 or nc < 2:
        raise DegenerateDataError("SAM statistic needs at least 2 values per class")
    md, mc = x.mean(), y.mean()
    ss = np.sum((x - md) ** 2) + np.sum((y - mc) ** 2)
    s = math.sqrt((1.0 / nd + 1.0 / nc) / (nd + nc - 2) * ss)
    if not s + s0 > 0:
        raise DegenerateDataError("degenerate scale: s + s0 = 0")
    return float((md - mc) / (s + s0))


def _moments(X, XX, P, masks):
    # masks: (subjects, k) float indicator of one class
    return P @ masks, X @ masks, XX @ masks


def _sam_from_moments(case, control, s0_rows):
    """Vectorised SAM statistic; returns (d, ok, s) with d = 0 where not ok.

    Case and control moments enter symmetrically so swapping them negates d exactly.
    """
    nd, sxd, sxxd = case
    nc, sxc, sxxc = control
    with np.errstate(divide="ignore", invalid="ignore"):
        md = sxd / nd
        mc = sxc / nc
        ss = np.maximum(sxxd - sxd * md, 0.0) + np.maximum(sxxc - sxc * mc, 0.0)
        a = (1.0 / nd + 1.0 / nc) / (nd + nc - 2.0)
        s = np.sqrt(a * ss)
        denom = s + s0_rows
        d = (md - mc) / denom
    ok = (nd >= 2) & (nc >= 2) & (denom > 0)
    return np.where(ok, d, 0.0), ok, np.where((nd >= 2) & (nc >= 2), s, np.nan)


def _centered(values, present):
    """(gene, time, subject) arrays: values centred per cell, zero where missing."""
    P = np.transpose(present, (0, 2, 1)).astype(float)
    X = np.where(np.transpose(present, (0, 2, 1)), np.transpose(values, (0, 2, 1)), 0.0)
    with np.errstate(invalid="ignore"):
        mu = X.sum(axis=2, keepdims=True) / P.sum(axis=2, keepdims=True)
    X = np.where(P > 0, X - np.nan_to_num(mu), 0.0)
    return X, P


def _resolve_s0(s0_setting, s_observed, n_times):
    if isinstance(s0_setting, str):
        out = np.zeros(n_times)
        for j in range(n_times):
            col = s_observed[:, j]
            col = col[np.isfinite(col)]
            out[j] = float(np.median(col)) if col.size else 0.0
        return out
    if isinstance(s0_setting, (int, float)):
        return np.full(n_times, float(s0_setting))
    if len(s0_setting) != n_times:
        raise InputError(f"s0 list has {len(s0_setting)} entries for {n_times} time points")
    return np.asarray(s0_setting, dtype=float)


def _observed_pass(matrix, case_mask, s0_setting):
    X, P = _centered(matrix.values, matrix.present)
    G, T, S = X.shape
    X2 = X.reshape(G * T, S)
    P2 = P.reshape(G * T, S)
    XX2 = X2 * X2
    m = case_mask.astype(float)[:, None]
    case = _moments(X2, XX2, P2, m)
    control = _moments(X2, XX2, P2, 1.0 - m)
    _, _, s = _sam_from_moments(case, control, 0.0)
    s0 = _resolve_s0(s0_setting, s.reshape(G, T), T)
    d, ok, _ = _sam_from_moments(case, control, np.tile(s0, G)[:, None])
    return d.reshape(G, T), ok.reshape(G, T), s0


def compute_sam_matrix(
    matrix: LongitudinalMatrix, labels: PhenotypeLabels, config: SamConfig | None = None
) -> SamStatMatrix:
    """SAM statistic for every (gene, time) cell from the subjects observed there."""
    config = config or SamConfig()
    case_mask = labels.case_mask(matrix.subjects)
    d, usable, s0 = _observed_pass(matrix, case_mask, config.s0)
    if not usable.any():
        raise DegenerateDataError("no (gene, time) cell has two observations per class")
    if not usable.all():
        logger.info("%d of %d cells unusable", usable.size - usable.sum(), usable.size)
    d.setflags(write=False)
    usable.setflags(write=False)
    return SamStatMatrix(d, usable, s0)


def _cell_arrays(cells: Iterable[tuple[int, int]], shape) -> tuple[np.ndarray, np.ndarray]:
    pairs = sorted(set((int(g), int(t)) for g, t in cells))
    if not pairs:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    arr = np.array(pairs, dtype=int)
    G, T = shape
    if arr.min() < 0 or arr[:, 0].max() >= G or arr[:, 1].max() >= T:
        raise InputError("cell index out of range")
    return arr[:, 0], arr[:, 1]


def samgs_statistic(cells: Iterable[tuple[int, int]], stats: SamStatMatrix) -> float:
    """Sum of squared SAM statistics over the usable cells in ``cells``."""
    g, t = _cell_arrays(cells, stats.d.shape)
    if g.size == 0:
        return 0.0
    d = np.where(stats.usable[g, t], stats.d[g, t], 0.0)
    return float(np.sum(d * d))


def permutation_pvalue_from_null(observed: float, null_values: np.ndarray) -> float:
    """Add-one permutation p-value ``(1 + #{null >= observed}) / (B + 1)``."""
    null_values = np.asarray(null_values)
    threshold = observed - PVALUE_RTOL * abs(observed)
    return (1.0 + np.count_nonzero(null_values >= threshold)) / (null_values.size + 1.0)


def permutation_masks(case_mask: np.ndarray, permutations: int, seed: int, stream=()) -> np.ndarray:
    """Permuted case indicators, shape (permutations, subjects).

    Permutation ``b`` depends only on ``(seed, *stream, b)``.
    """
    n = case_mask.size
    n_case = int(case_mask.sum())
    distinct = math.comb(n, n_case)
    if permutations > distinct:
        warnings.warn(
            f"{permutations} permutations requested but only {distinct} distinct labelings "
            "exist; sampling with replacement",
            RuntimeWarning,
            stacklevel=3,
        )
    out = np.empty((permutations, n), dtype=bool)
    for b in range(permutations):
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(*stream, b)))
        out[b] = case_mask[rng.permutation(n)]
    return out


class PermutationEngine:
    """Observed and permutation-null SAM statistics for one dataset and labeling.

    Null statistics are computed lazily per fixed chunk of ``GENE_CHUNK`` genes
    and cached, so any cell set can be tested against the same permutation
    sequence. Cells that are unusable under the observed labeling are excluded
    from both observed and null sums.
    """

    def __init__(
        self,
        matrix: LongitudinalMatrix,
        labels: PhenotypeLabels,
        config: SamConfig | None = None,
        *,
        stream: tuple[int, ...] = (),
        stats: SamStatMatrix | None = None,
        cache_chunks: int = 256,
    ):
        self.matrix = matrix
        self.config = config = config or SamConfig()
        self.case_mask = labels.case_mask(matrix.subjects)
        if self.case_mask.sum() < 2 or (~self.case_mask).sum() < 2:
            raise DegenerateDataError("each class needs at least 2 subjects")
        self.stats = stats if stats is not None else compute_sam_matrix(matrix, labels, config)
        self.s0 = self.stats.s0
        self.masks = permutation_masks(self.case_mask, config.permutations, config.seed, stream)
        self._case_cols = self.masks.T.astype(float)
        self._control_cols = 1.0 - self._case_cols
        X, P = _centered(matrix.values, matrix.present)
        self._X, self._P = X, P
        self._chunk_cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._cache_chunks = cache_chunks
        self._gene_totals: np.ndarray | None = None

    @property
    def n_permutations(self) -> int:
        return self.masks.shape[0]

    def _compute_chunk(self, c: int) -> np.ndarray:
        lo = c * GENE_CHUNK
        hi = min(lo + GENE_CHUNK, self._X.shape[0])
        X = self._X[lo:hi]
        G, T, S = X.shape
        X2 = X.reshape(G * T, S)
        P2 = self._P[lo:hi].reshape(G * T, S)
        XX2 = X2 * X2
        case = _moments(X2, XX2, P2, self._case_cols)
        control = _moments(X2, XX2, P2, self._control_cols)
        d, _, _ = _sam_from_moments(case, control, np.tile(self.s0, G)[:, None])
        d = d.reshape(G, T, -1)
        d *= self.stats.usable[lo:hi, :, None]
        return d

    def _chunks(self, chunk_ids: Sequence[int]) -> dict[int, np.ndarray]:
        out = {}
        todo = []
        for c in chunk_ids:
            if c in self._chunk_cache:
                self._chunk_cache.move_to_end(c)
                out[c] = self._chunk_cache[c]
            else:
                todo.append(c)
        if todo:
            if self.config.threads > 1 and len(todo) > 1:
                with ThreadPoolExecutor(self.config.threads) as pool:
                    computed = list(pool.map(self._compute_chunk, todo))
            else:
                computed = [self._compute_chunk(c) for c in todo]
            for c, arr in zip(todo, computed):
                out[c] = arr
                self._chunk_cache[c] = arr
                while len(self._chunk_cache) > self._cache_chunks:
                    self._chunk_cache.popitem(last=False)
        return out

    def null_d(self, genes: Sequence[int]) -> np.ndarray:
        """Permutation SAM statistics, shape (len(genes), times, permutations)."""
        genes = np.asarray(genes, dtype=int)
        chunks = self._chunks(sorted(set((genes // GENE_CHUNK).tolist())))
        T = self._X.shape[1]
        out = np.empty((genes.size, T, self.n_permutations))
        for k, g in enumerate(genes):
            out[k] = chunks[g // GENE_CHUNK][g % GENE_CHUNK]
        return out

    def gene_null_totals(self) -> np.ndarray:
        """Per-gene null SAMGS over all time points, shape (genes, permutations)."""
        if self._gene_totals is None:
            G = self._X.shape[0]
            n_chunks = -(-G // GENE_CHUNK)
            totals = np.empty((G, self.n_permutations))

            def work(c):
                d = self._compute_chunk(c)
                lo = c * GENE_CHUNK
                totals[lo : lo + d.shape[0]] = _sum_squares_over_time(d)

            if self.config.threads > 1:
                with ThreadPoolExecutor(self.config.threads) as pool:
                    list(pool.map(work, range(n_chunks)))
            else:
                for c in range(n_chunks):
                    work(c)
            self._gene_totals = totals
        return self._gene_totals

    def gene_observed_totals(self) -> np.ndarray:
        return _sum_squares_over_time(self.stats.d[:, :, None])[:, 0]

    def cells_null(self, cells: Iterable[tuple[int, int]]) -> np.ndarray:
        g, t = _cell_arrays(cells, self.stats.d.shape)
        if g.size == 0:
            return np.zeros(self.n_permutations)
        uniq, inv = np.unique(g, return_inverse=True)
        d = self.null_d(uniq)[inv, t]
        return np.sum(d * d, axis=0)

    def cells_observed(self, cells: Iterable[tuple[int, int]]) -> float:
        return samgs_statistic(cells, self.stats)

    def pvalue(self, cells: Iterable[tuple[int, int]]) -> PermutationResult:
        cells = list(cells)
        observed = self.cells_observed(cells)
        null = self.cells_null(cells)
        return PermutationResult(observed, null, permutation_pvalue_from_null(observed, null))


def _sum_squares_over_time(d: np.ndarray) -> np.ndarray:
    # (genes, times, k) -> (genes, k); explicit loop keeps the addition order fixed
    out = d[:, 0] * d[:, 0]
    for j in range(1, d.shape[1]):
        out = out + d[:, j] * d[:, j]
    return out


def permutation_pvalue(
    cells: Iterable[tuple[int, int]],
    matrix: LongitudinalMatrix,
    labels: PhenotypeLabels,
    config: SamConfig | None = None,
) -> PermutationResult:
    """Permutation test of the SAMGS statistic of ``cells``."""
    return PermutationEngine(matrix, labels, config).pvalue(cells)


def bh_qvalues(p_values: Sequence[float]) -> np.ndarray:
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return p
    return false_discovery_control(p, method="bh")


def gene_set_indices(collection: GeneSetCollection, matrix: LongitudinalMatrix) -> dict[str, np.ndarray]:
    out = {}
    for name, (_, members) in collection.items():
        idx = sorted(matrix.gene_index[g] for g in members if g in matrix.gene_index)
        if len(idx) != len(members):
            raise InputError(f"gene set {name!r} has members absent from the matrix; restrict first")
        out[name] = np.array(idx, dtype=int)
    return out


def _set_totals(idx: np.ndarray, totals: np.ndarray) -> np.ndarray:
    out = totals[idx[0]]
    for i in idx[1:]:
        out = out + totals[i]
    return out


def samgs_screen(
    collection: GeneSetCollection,
    matrix: LongitudinalMatrix,
    labels: PhenotypeLabels,
    config: SamConfig | None = None,
    *,
    engine: PermutationEngine | None = None,
) -> list[ScreenResult]:
    """Permutation SAMGS p-values over all (member, time) cells of every set.

    Returns one row per set with Benjamini-Hochberg q-values, sorted by p-value
    (ties by name). See :class:`SamConfig` for how the null is formed.
    """
    config = config or SamConfig()
    if engine is None:
        engine = PermutationEngine(matrix, labels, config)
    sets = gene_set_indices(collection, matrix)
    names = list(sets)
    obs_totals = engine.gene_observed_totals()
    observed, nulls = [], []
    if config.permutation_scope == "shared":
        null_totals = engine.gene_null_totals()
        for name in names:
            idx = sets[name]
            observed.append(float(_set_totals(idx, obs_totals)))
            nulls.append(_set_totals(idx, null_totals))
    else:
        for k, name in enumerate(names):
            idx = sets[name]
            local = PermutationEngine(
                matrix, labels, config, stream=(k + 1,), stats=engine.stats, cache_chunks=4
            )
            observed.append(float(_set_totals(idx, obs_totals)))
            nulls.append(_set_totals(np.arange(idx.size), _sum_squares_over_time(local.null_d(idx))))

    pooled = config.screen_null == "pooled" or (
        config.screen_null == "auto" and len({idx.size for idx in sets.values()}) == 1
    )
    logger.info("screening %d sets against a %s null", len(names), "pooled" if pooled else "per-set")
    if pooled:
        pool = np.sort(np.concatenate(nulls)) if nulls else np.zeros(0)
        thresholds = np.array([o - PVALUE_RTOL * abs(o) for o in observed])
        exceed = pool.size - np.searchsorted(pool, thresholds, side="left")
        p_values = [float((1.0 + e) / (pool.size + 1.0)) for e in exceed]
    else:
        p_values = [permutation_pvalue_from_null(o, n) for o, n in zip(observed, nulls)]
    rows = [(n, sets[n].size, o, p) for n, o, p in zip(names, observed, p_values)]
    q = bh_qvalues([r[3] for r in rows])
    results = [ScreenResult(n, s, o, p, float(qv)) for (n, s, o, p), qv in zip(rows, q)]
    results.sort(key=lambda r: (r.p_value, r.name))
    return results
