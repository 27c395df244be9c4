"""Regenerate the small datasets under src/samgsr/fixtures (deterministic)."""

from pathlib import Path

import numpy as np

from samgsr.dataset import GeneSetCollection, LongitudinalMatrix, write_expression, write_gmt, write_labels

OUT = Path(__file__).resolve().parents[1] / "src" / "samgsr" / "fixtures"
TIMES = ["day0", "day1", "day3"]


def toy():
    rng = np.random.default_rng(20240501)
    genes = [f"G{i:02d}" for i in range(1, 41)]
    subjects = [f"P{i:02d}" for i in range(1, 13)]
    case = np.arange(12) < 6
    values = rng.normal(size=(40, 12, 3))
    # planted differences: G01 at every time, G02 at day1 and day3, G03 at day0
    values[0, case, :] += 3.0
    values[1, case, 1:] += 3.0
    values[2, case, 0] -= 3.0
    present = np.ones(values.shape, dtype=bool)
    present[10, 3, 2] = present[25, 8, 0] = present[33, 0, 1] = False
    values[~present] = np.nan
    matrix = LongitudinalMatrix.from_arrays(genes, subjects, TIMES, values, present)
    write_expression(matrix, OUT / "toy_expr.tsv")
    write_labels({s: "case" if c else "control" for s, c in zip(subjects, case)}, OUT / "toy_labels.tsv")
    sets = GeneSetCollection()
    sets["SIGNAL_PATHWAY"] = ("planted genes plus noise", {"G01", "G02", "G03", "G11", "G12", "G13", "G14", "G15"})
    for k in range(5):
        members = {genes[j] for j in range(8 + 6 * k, 8 + 6 * k + 8)} - {"G01", "G02", "G03"}
        sets[f"NOISE_{k + 1}"] = ("noise genes", members | {"UNMAPPED_GENE"})
    write_gmt(sets, OUT / "toy.gmt")
    with (OUT / "toy_common5_signature.tsv").open("w") as fh:
        fh.write("gene\ttime_label\td\tstage\n")
        for g in ("G01", "G02", "G03", "G04", "G05"):
            for t in TIMES:
                fh.write(f"{g}\t{t}\t\tfixture\n")
        fh.write("G06\tday1\t\tfixture\n")


def separable():
    rng = np.random.default_rng(7)
    genes = ["SEP1", "SEP2", "NOISE1", "NOISE2"]
    for name, n in (("train", 20), ("test", 12)):
        subjects = [f"{name[:2].upper()}{i:02d}" for i in range(n)]
        case = np.arange(n) % 2 == 0
        values = rng.normal(scale=0.3, size=(4, n, 3))
        values[0] += np.where(case, 2.0, -2.0)[:, None]
        values[1] += np.where(case, -1.5, 1.5)[:, None]
        matrix = LongitudinalMatrix.from_arrays(genes, subjects, TIMES, values)
        write_expression(matrix, OUT / f"separable_{name}_expr.tsv")
        write_labels({s: "case" if c else "control" for s, c in zip(subjects, case)}, OUT / f"separable_{name}_labels.tsv")
    with (OUT / "separable_signature.tsv").open("w") as fh:
        fh.write("gene\ttime_label\td\tstage\n")
        for t in TIMES:
            fh.write(f"SEP1\t{t}\t\tfixture\nSEP2\t{t}\t\tfixture\n")


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    toy()
    separable()
