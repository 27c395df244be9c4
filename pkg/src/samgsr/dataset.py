"""Loading and validation of longitudinal expression data, phenotype labels and gene sets.

File formats (all tab separated, identifiers case sensitive):

* expression: header ``gene`` followed by ``<subject>@<time-label>`` columns, one row
  per gene; an empty cell (or ``NA``/``NaN``) is a missing measurement.
* labels: ``subject<TAB>class`` lines, optional ``subject<TAB>class`` header.
* gene sets: standard GMT, ``name<TAB>description<TAB>gene...``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateDataError, InputError

logger = logging.getLogger(__name__)

CASE = "case"
CONTROL = "control"

#: class tokens accepted in label files (matched case-insensitively)
CLASS_VOCABULARY = {
    "case": CASE,
    "complicated": CASE,
    "complication": CASE,
    "1": CASE,
    "control": CONTROL,
    "uncomplicated": CONTROL,
    "0": CONTROL,
}

_MISSING_TOKENS = {"", "na", "nan", "null"}


@dataclass(frozen=True)
class TimePoint:
    index: int
    label: str


@dataclass(frozen=True, eq=False)
class LongitudinalMatrix:
    """Log2 expression indexed as ``values[gene, subject, time]``.

    Missing cells hold NaN in ``values`` and False in ``present``.
    """

    genes: tuple[str, ...]
    subjects: tuple[str, ...]
    times: tuple[TimePoint, ...]
    values: np.ndarray
    present: np.ndarray
    gene_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        shape = (len(self.genes), len(self.subjects), len(self.times))
        values = np.asarray(self.values, dtype=float)
        present = np.asarray(self.present, dtype=bool)
        if values.shape != shape or present.shape != shape:
            raise InputError(f"array shape {values.shape} does not match index lists {shape}")
        if len(set(self.genes)) != len(self.genes):
            raise InputError("duplicate gene ids")
        if len(set(self.subjects)) != len(self.subjects):
            raise InputError("duplicate subject ids")
        labels = [t.label for t in self.times]
        if len(set(labels)) != len(labels):
            raise InputError("duplicate time labels")
        if [t.index for t in self.times] != list(range(len(self.times))):
            raise InputError("time indices must be contiguous from 0")
        if not np.all(np.isfinite(values[present])):
            raise InputError("non-finite value among present cells")
        values = np.where(present, values, np.nan)
        values.setflags(write=False)
        present = present.copy()
        present.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "present", present)
        object.__setattr__(self, "gene_index", {g: i for i, g in enumerate(self.genes)})

    @classmethod
    def from_arrays(cls, genes, subjects, time_labels, values, present=None):
        values = np.asarray(values, dtype=float)
        if present is None:
            present = np.isfinite(values)
        times = tuple(TimePoint(i, str(lab)) for i, lab in enumerate(time_labels))
        return cls(tuple(genes), tuple(subjects), times, values, present)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def time_labels(self) -> list[str]:
        return [t.label for t in self.times]

    def time_index(self, label: str) -> int:
        for t in self.times:
            if t.label == label:
                return t.index
        raise KeyError(label)

    @property
    def n_missing(self) -> int:
        return int(self.present.size - np.count_nonzero(self.present))

    def subset_genes(self, genes: Sequence[str]) -> LongitudinalMatrix:
        idx = [self.gene_index[g] for g in genes]
        return LongitudinalMatrix(
            tuple(genes), self.subjects, self.times, self.values[idx], self.present[idx]
        )

    def subset_subjects(self, subjects: Sequence[str]) -> LongitudinalMatrix:
        pos = {s: i for i, s in enumerate(self.subjects)}
        idx = [pos[s] for s in subjects]
        return LongitudinalMatrix(
            self.genes, tuple(subjects), self.times, self.values[:, idx], self.present[:, idx]
        )


class PhenotypeLabels(dict):
    """Mapping of subject id to ``"case"`` or ``"control"``."""

    def __init__(self, mapping: Mapping[str, str] = ()):
        super().__init__()
        for subject, cls in dict(mapping).items():
            if cls not in (CASE, CONTROL):
                raise InputError(f"unknown class {cls!r} for subject {subject!r}")
            self[subject] = cls
        if not any(v == CASE for v in self.values()) or not any(
            v == CONTROL for v in self.values()
        ):
            raise InputError("both classes required")

    def for_subjects(self, subjects: Iterable[str]) -> PhenotypeLabels:
        """Restrict to ``subjects``; every one of them must be labeled."""
        subjects = list(subjects)
        missing = [s for s in subjects if s not in self]
        if missing:
            raise InputError(f"subjects without a label: {', '.join(missing[:10])}")
        return PhenotypeLabels({s: self[s] for s in subjects})

    def case_mask(self, subjects: Sequence[str]) -> np.ndarray:
        """Boolean array, True where the subject is a case."""
        missing = [s for s in subjects if s not in self]
        if missing:
            raise InputError(f"subjects without a label: {', '.join(missing[:10])}")
        return np.array([self[s] == CASE for s in subjects], dtype=bool)

    def swapped(self) -> PhenotypeLabels:
        return PhenotypeLabels({s: CONTROL if c == CASE else CASE for s, c in self.items()})


class GeneSetCollection(dict):
    """Mapping of set name to ``(description, frozenset of gene ids)``, in file order."""

    def __setitem__(self, name, entry):
        description, members = entry
        members = frozenset(members)
        if not members:
            raise InputError(f"gene set {name!r} is empty")
        super().__setitem__(name, (description, members))

    def members(self, name: str) -> frozenset[str]:
        return self[name][1]

    def all_genes(self) -> set[str]:
        out: set[str] = set()
        for _, members in self.values():
            out |= members
        return out


def _check_token(token: str, what: str) -> str:
    if not token or any(ch.isspace() for ch in token):
        raise InputError(f"invalid {what} {token!r}")
    return token


def _parse_cell(token: str, where: str) -> float:
    if token.strip().lower() in _MISSING_TOKENS:
        return math.nan
    try:
        value = float(token)
    except ValueError:
        raise InputError(f"non-numeric cell {token!r} at {where}") from None
    if not math.isfinite(value):
        raise InputError(f"non-finite cell {token!r} at {where}")
    return value


def load_expression(path, time_order: Sequence[str] | None = None) -> LongitudinalMatrix:
    """Read an expression TSV into a :class:`LongitudinalMatrix`.

    Time labels are ordered by first appearance in the header unless
    ``time_order`` lists them explicitly. (subject, time) combinations with no
    column are recorded as missing.
    """
    path = Path(path)
    with path.open() as fh:
        lines = [ln.rstrip("\r\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise InputError(f"{path}: empty expression file")
    header = lines[0].split("\t")
    if header[0] != "gene":
        raise InputError(f"{path}: header must start with 'gene'")

    columns = header[1:]
    if len(set(columns)) != len(columns):
        dup = sorted({c for c in columns if columns.count(c) > 1})
        raise InputError(f"{path}: duplicate column header(s) {dup}")
    subjects: list[str] = []
    seen_times: list[str] = []
    col_keys = []
    for col in columns:
        subject, sep, time_label = col.rpartition("@")
        if not sep or not subject or not time_label:
            raise InputError(f"{path}: column {col!r} is not '<subject>@<time>'")
        _check_token(subject, "subject id")
        if subject not in subjects:
            subjects.append(subject)
        if time_label not in seen_times:
            seen_times.append(time_label)
        col_keys.append((subject, time_label))

    if time_order is not None:
        time_order = list(time_order)
        unknown = set(seen_times) - set(time_order)
        if unknown:
            raise InputError(f"{path}: time labels {sorted(unknown)} absent from time order")
        if len(set(time_order)) != len(time_order):
            raise InputError("duplicate labels in time order")
        time_labels = time_order
    else:
        time_labels = seen_times

    s_pos = {s: i for i, s in enumerate(subjects)}
    t_pos = {t: i for i, t in enumerate(time_labels)}
    col_s = np.array([s_pos[s] for s, _ in col_keys], dtype=int)
    col_t = np.array([t_pos[t] for _, t in col_keys], dtype=int)

    genes: list[str] = []
    seen_genes: set[str] = set()
    values = np.full((len(lines) - 1, len(subjects), len(time_labels)), np.nan)
    for r, line in enumerate(lines[1:]):
        fields = line.split("\t")
        gene = _check_token(fields[0].strip(), "gene id")
        if gene in seen_genes:
            raise InputError(f"{path}: duplicate gene id {gene!r}")
        seen_genes.add(gene)
        genes.append(gene)
        cells = fields[1:]
        if len(cells) > len(columns):
            raise InputError(f"{path}: row {gene!r} has more cells than header columns")
        cells += [""] * (len(columns) - len(cells))
        row = np.array([_parse_cell(c, f"{gene}/{columns[k]}") for k, c in enumerate(cells)])
        values[r, col_s, col_t] = row

    present = np.isfinite(values)
    per_subject = present.sum(axis=(0, 2))
    empty = [subjects[i] for i in np.flatnonzero(per_subject == 0)]
    if empty:
        raise InputError(f"{path}: subjects with no present values: {', '.join(empty)}")
    times = tuple(TimePoint(i, lab) for i, lab in enumerate(time_labels))
    matrix = LongitudinalMatrix(tuple(genes), tuple(subjects), times, values, present)
    logger.info(
        "loaded %s: %d genes, %d subjects, %d time points, %d missing cells",
        path, len(genes), len(subjects), len(times), matrix.n_missing,
    )
    return matrix


def write_expression(matrix: LongitudinalMatrix, path) -> None:
    """Write ``matrix`` in the format read by :func:`load_expression`.

    Floats use their shortest round-trip repr, so present cells reload bit-exactly.
    Subject/time combinations missing everywhere are still written, as empty cells.
    """
    cols = [(s, t) for t in range(len(matrix.times)) for s in range(len(matrix.subjects))]
    header = ["gene"] + [f"{matrix.subjects[s]}@{matrix.times[t].label}" for s, t in cols]
    with Path(path).open("w") as fh:
        fh.write("\t".join(header) + "\n")
        for g, gene in enumerate(matrix.genes):
            cells = [
                repr(float(matrix.values[g, s, t])) if matrix.present[g, s, t] else ""
                for s, t in cols
            ]
            fh.write(gene + "\t" + "\t".join(cells) + "\n")


def load_labels(path, subjects: Iterable[str] | None = None) -> PhenotypeLabels:
    """Read a ``subject<TAB>class`` file.

    With ``subjects`` given (usually ``matrix.subjects``) the result is restricted
    to them and every one must be labeled.
    """
    path = Path(path)
    mapping: dict[str, str] = {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = [f.strip() for f in line.split("\t")]
            if lineno == 1 and [f.lower() for f in fields[:2]] == ["subject", "class"]:
                continue
            if len(fields) < 2:
                raise InputError(f"{path}:{lineno}: expected 'subject<TAB>class'")
            subject, token = _check_token(fields[0], "subject id"), fields[1]
            cls = CLASS_VOCABULARY.get(token.lower())
            if cls is None:
                raise InputError(f"{path}:{lineno}: unknown class token {token!r}")
            if subject in mapping:
                raise InputError(f"{path}:{lineno}: subject {subject!r} labeled twice")
            mapping[subject] = cls
    if subjects is not None:
        subjects = list(subjects)
        missing = [s for s in subjects if s not in mapping]
        if missing:
            raise InputError(f"{path}: subjects missing from label file: {', '.join(missing[:10])}")
        mapping = {s: mapping[s] for s in subjects}
    return PhenotypeLabels(mapping)


def write_labels(labels: Mapping[str, str], path) -> None:
    with Path(path).open("w") as fh:
        for subject, cls in labels.items():
            fh.write(f"{subject}\t{cls}\n")


def load_gmt(path) -> GeneSetCollection:
    path = Path(path)
    collection = GeneSetCollection()
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise InputError(f"{path}:{lineno}: GMT line needs name, description and genes")
            name, description = fields[0].strip(), fields[1]
            if name in collection:
                raise InputError(f"{path}:{lineno}: duplicate gene set name {name!r}")
            genes = [g.strip() for g in fields[2:] if g.strip()]
            if not genes:
                raise InputError(f"{path}:{lineno}: gene set {name!r} has no genes")
            collection[name] = (description, genes)
    logger.info("loaded %d gene sets from %s", len(collection), path)
    return collection


def write_gmt(collection: GeneSetCollection, path) -> None:
    with Path(path).open("w") as fh:
        for name, (description, members) in collection.items():
            fh.write("\t".join([name, description, *sorted(members)]) + "\n")


@dataclass(frozen=True)
class Coverage:
    annotated: int
    total: int

    def __str__(self):
        return f"{self.annotated:,} of {self.total:,} genes annotated"


def coverage(collection: GeneSetCollection, matrix: LongitudinalMatrix) -> Coverage:
    """Count matrix genes that belong to at least one set in ``collection``."""
    annotated = len(collection.all_genes() & set(matrix.genes))
    return Coverage(annotated, len(matrix.genes))


def restrict(
    collection: GeneSetCollection, matrix: LongitudinalMatrix, min_size: int = 1
) -> GeneSetCollection:
    """Drop members absent from ``matrix`` and sets left with fewer than ``min_size`` genes."""
    if min_size < 1:
        raise InputError("min_size must be >= 1")
    known = set(matrix.genes)
    out = GeneSetCollection()
    for name, (description, members) in collection.items():
        kept = members & known
        if len(kept) >= min_size:
            out[name] = (description, kept)
    if not out:
        raise DegenerateDataError("no gene set survives restriction to the expression matrix")
    cov = coverage(out, matrix)
    logger.info(
        "gene sets: %d kept, %d dropped; %s", len(out), len(collection) - len(out), cov
    )
    return out
