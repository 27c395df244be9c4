from pathlib import Path

import numpy as np
import pytest

from samgsr.dataset import LongitudinalMatrix, PhenotypeLabels

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "samgsr" / "fixtures"

_ACCEPTANCE_LINES: list[str] = []


def random_dataset(rng, n_genes=20, n_subjects=12, n_times=3, n_case=None, shift=None, missing=0.0):
    """Gaussian longitudinal data; ``shift`` maps (gene, time) -> mean shift in cases."""
    n_case = n_subjects // 2 if n_case is None else n_case
    values = rng.normal(size=(n_genes, n_subjects, n_times))
    case = np.zeros(n_subjects, dtype=bool)
    case[:n_case] = True
    for (g, t), delta in (shift or {}).items():
        values[g, case, t] += delta
    present = rng.random(values.shape) >= missing
    present[:, :, 0] |= ~present.any(axis=(0, 2))[None, :]  # every subject keeps a value
    values = np.where(present, values, np.nan)
    genes = [f"G{i:03d}" for i in range(n_genes)]
    subjects = [f"S{i:03d}" for i in range(n_subjects)]
    times = [f"t{j}" for j in range(n_times)]
    matrix = LongitudinalMatrix.from_arrays(genes, subjects, times, values, present)
    labels = PhenotypeLabels({s: "case" if c else "control" for s, c in zip(subjects, case)})
    return matrix, labels


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number, passed, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
