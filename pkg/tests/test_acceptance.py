"""End-to-end acceptance criteria at desk scale.

Each test prints one PASS/FAIL line and adds it to the terminal summary.
Image-based criteria need MNIST IDX files under ``data/mnist`` (or
``$FSVI_DATA_DIR/mnist``); a missing dataset fails the criterion.
"""

import csv
import os
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, REPO, data_dir

from sfsvi import cli
from sfsvi.metrics import AccuracyMatrix, UncertaintyGrid, accuracy_so_far, far_field_deviation, mean_final_accuracy
from sfsvi.tasks import make_toy_sequence
from sfsvi.verify import full_rank_frcl_diagnostic, timed_checks

pytestmark = pytest.mark.acceptance

CONFIGS = REPO / "configs"


def record(number: int, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


class Runs:
    """Runs each config at most once per session through the CLI."""

    def __init__(self, root: Path):
        self.root = root
        self.cache: dict[str, tuple[int, Path, float]] = {}

    def get(self, name: str, tag: str = "") -> tuple[AccuracyMatrix, Path]:
        key = name + tag
        if key not in self.cache:
            out = self.root / key
            start = time.perf_counter()
            code = cli.main(["run", "--config", str(CONFIGS / f"{name}.json"), "--output-dir", str(out), "--quiet"])
            self.cache[key] = (code, out, time.perf_counter() - start)
        code, out, _ = self.cache[key]
        assert code == cli.EXIT_OK, f"run {name} exited with code {code}"
        return AccuracyMatrix.load(out / "R.csv"), out

    def seconds(self, name: str, tag: str = "") -> float:
        return self.cache[name + tag][2]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    os.environ.setdefault("FSVI_DATA_DIR", str(data_dir()))
    return Runs(tmp_path_factory.mktemp("acceptance"))


def _fmt_row(R: AccuracyMatrix) -> str:
    return "[" + ", ".join(f"{R[R.n_tasks, j]:.4f}" for j in range(1, R.n_tasks + 1)) + "]"


def test_criterion_1_verification_suite():
    checks, seconds = timed_checks("full", seed=0)
    failed = [c for c in checks if not c.passed]
    worst = {
        "gradients": max(c.value for c in checks if c.name.startswith("grad: objective") or c.name.startswith("grad: weight")),
        "full-vs-diag": next(c.value for c in checks if c.name.startswith("full KL")),
        "FROMP": next(c.value for c in checks if c.name.startswith("FROMP")),
        "FRCL 4x3": next(c.value for c in checks if c.name.startswith("FRCL")),
        "MC variance": next(c.value for c in checks if c.name.startswith("function variance")),
    }
    passed = not failed and seconds < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    extra = f"; failing: {', '.join(c.name for c in failed)}" if failed else ""
    extra += f"; full-rank FRCL diagnostic {full_rank_frcl_diagnostic().value:.1e}"
    record(1, passed, f"verify suite in {seconds:.1f}s (< 60s): {detail}{extra}")
    assert seconds < 60
    assert not failed, "; ".join(c.line() for c in failed)


def _read_grid(path: Path) -> UncertaintyGrid:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    xs = np.unique([float(r["x"]) for r in rows])
    ys = np.unique([float(r["y"]) for r in rows])
    p = np.array([float(r["p"]) for r in rows]).reshape(len(ys), len(xs))
    return UncertaintyGrid(xs, ys, p)


def test_criterion_2_toy_sequence(runs):
    R, out = runs.get("toy")
    final = [R[5, j] for j in range(1, 6)]
    data = np.concatenate([t.X_train for t in make_toy_sequence(0)])
    far = far_field_deviation(_read_grid(out / "heatmaps" / "grid_task_5.csv"), data)
    passed = min(final) >= 0.95 and far < 0.15
    record(2, passed, f"toy final accuracies {_fmt_row(R)} (each >= 0.95), far-field |p-0.5| {far:.3f} (< 0.15), {runs.seconds('toy'):.0f}s")
    assert min(final) >= 0.95
    assert far < 0.15


def test_criterion_3_split_mnist_multi_head(runs):
    R, _ = runs.get("split_mnist_mh")
    acc = mean_final_accuracy(R)
    record(3, acc >= 0.97, f"split MNIST MH mean accuracy {acc:.4f} (>= 0.97), final row {_fmt_row(R)}, {runs.seconds('split_mnist_mh'):.0f}s")
    assert acc >= 0.97


def test_criterion_4_split_mnist_single_head(runs):
    R, _ = runs.get("split_mnist_sh")
    R_vcl, _ = runs.get("split_mnist_sh_vcl")
    acc, vcl = mean_final_accuracy(R), mean_final_accuracy(R_vcl)
    passed = acc >= 0.85 and acc - vcl >= 0.30
    record(4, passed, f"split MNIST SH mean accuracy {acc:.4f} (>= 0.85), VCL without coreset {vcl:.4f}, margin {acc - vcl:.4f} (>= 0.30)")
    assert acc >= 0.85
    assert acc - vcl >= 0.30


def test_criterion_5_permuted_mnist(runs):
    R, _ = runs.get("permuted_mnist")
    acc = mean_final_accuracy(R)
    record(5, acc >= 0.90, f"permuted MNIST mean accuracy {acc:.4f} (>= 0.90), {runs.seconds('permuted_mnist'):.0f}s")
    assert acc >= 0.90


def test_criterion_6_forgetting_order(runs):
    ours = accuracy_so_far(runs.get("split_mnist_sh")[0])
    vcl = accuracy_so_far(runs.get("split_mnist_sh_vcl")[0])
    dominated = all(a > b for a, b in zip(ours[1:], vcl[1:]))
    curve = ", ".join(f"t={t}: {a:.3f}>{b:.3f}" for t, (a, b) in enumerate(zip(ours, vcl), 1) if t >= 2)
    record(6, dominated, f"accuracy so far, S-FSVI vs VCL: {curve}")
    assert dominated


def test_criterion_7_coreset_policy_spread(runs):
    accs = {
        name: mean_final_accuracy(runs.get(cfg)[0])
        for name, cfg in (("random", "split_mnist_mh"), ("entropy", "split_mnist_mh_entropy"), ("kl", "split_mnist_mh_kl"))
    }
    spread = max(accs.values()) - min(accs.values())
    detail = ", ".join(f"{k} {v:.4f}" for k, v in accs.items())
    record(7, spread <= 0.015, f"policy spread {100 * spread:.2f} points (<= 1.5): {detail}")
    assert spread <= 0.015


def test_criterion_8_determinism(runs):
    _, first = runs.get("toy")
    _, second = runs.get("toy", tag="_repeat")
    same = (first / "R.csv").read_bytes() == (second / "R.csv").read_bytes()
    record(8, same, "toy run repeated with the same seed gives a byte-identical R.csv")
    assert same
