"""
Writers for run outputs: metrics CSV, repeated-run summary, resolved config,
and the fixed-column text reports printed by the command line.
"""

from __future__ import annotations

import csv
import statistics
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, TextIO

import structlog

from config.settings import TrainConfig
from data.enums import AttentionKind, FileConstants
from data.metrics import METRICS_HEADER, EpochMetrics, RunSummary
from models.arch_spec import ArchSpec, layer_rows

if TYPE_CHECKING:
    from controllers.gradcheck_controller import GradReport

log = structlog.get_logger(__name__)


class MetricsWriter:
    """
    Incremental metrics CSV.

    The first line is ``#`` followed by the resolved config JSON, then the header
    row. Each ``append`` writes and flushes one data row, so a run that is cut
    short still leaves a readable file.
    """

    def __init__(self, path: Path, config: TrainConfig):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file: Optional[TextIO] = self.path.open("w", encoding="utf-8", newline="")
        self._file.write(f"# {config.to_json()}\n")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(METRICS_HEADER)
        self._file.flush()
        self.rows = 0

    def append(self, metrics: EpochMetrics) -> None:
        if self._file is None:
            raise ValueError(f"Metrics file {self.path} is closed")
        self._writer.writerow(metrics.csv_row())
        self._file.flush()
        self.rows += 1

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self) -> MetricsWriter:
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def read_metrics(path: Path) -> tuple[str, list[dict[str, str]]]:
    """
    Read a metrics CSV back.

    Returns:
        (comment header without the leading ``# ``, data rows as dicts)
    """
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        comment = f.readline().rstrip("\n")
        if not comment.startswith("#"):
            raise ValueError(f"{path} does not start with a config comment")
        rows = list(csv.DictReader(f))
    return comment[1:].strip(), rows


def write_config(path: Path, config: TrainConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config.save(path)
    return path


def write_summary(path: Path, runs: list[RunSummary]) -> Path:
    """
    Repeated-run summary: one row per seed, then mean and standard deviation
    of the best test accuracy.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    best = [run.best_test_acc for run in runs]
    mean = statistics.fmean(best) if best else 0.0
    std = statistics.pstdev(best) if len(best) > 1 else 0.0
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["seed", "best_test_acc", "best_epoch", "final_test_acc", "epochs"])
        for run in runs:
            writer.writerow(
                [run.seed, f"{run.best_test_acc:.6f}", run.best_epoch, f"{run.final_test_acc:.6f}", run.epochs]
            )
        writer.writerow(["mean", f"{mean:.6f}", "", "", ""])
        writer.writerow(["std", f"{std:.6f}", "", "", ""])
    log.info("summary written", path=str(path), runs=len(runs), mean_best_test_acc=round(mean, 6))
    return path


def format_layer_table(spec: ArchSpec) -> str:
    """Two-column layer table: output size and the layers producing it."""
    rows = layer_rows(spec)
    title = f"{spec.name.display_name} ({spec.attention})"
    width = max(len("Output size"), *(len(size) for size, _ in rows))
    lines = [title, f"{'Output size':<{width}}  Layers"]
    lines += [f"{size:<{width}}  {description}" for size, description in rows]
    return "\n".join(lines)


def format_param_report(counts: dict[AttentionKind, int], extra: Optional[dict[str, int]] = None) -> str:
    """
    Parameter totals per attention variant with the overhead over the baseline.

    Args:
        counts: Total parameters keyed by attention kind; must include NONE
        extra: Additional labelled totals printed after the variants
    """
    baseline = counts[AttentionKind.NONE]
    lines = [f"{'variant':<16}{'params':>12}{'overhead':>12}"]
    for kind, total in counts.items():
        lines.append(f"{kind.value:<16}{total:>12d}{total - baseline:>12d}")
    for label, total in (extra or {}).items():
        lines.append(f"{label:<16}{total:>12d}{total - baseline:>12d}")
    return "\n".join(lines)


def format_gradcheck_table(reports: Iterable[GradReport]) -> str:
    """Fixed-column gradient check report."""
    lines = [f"{'op':<28}{'target':<14}{'seed':>5}{'max_rel_err':>14}  {'worst':<18}{'status':>7}"]
    for report in reports:
        worst = ",".join(str(i) for i in report.worst_index)
        status = "PASS" if report.passed else "FAIL"
        lines.append(
            f"{report.op:<28}{report.target:<14}{report.seed:>5}{report.max_rel_error:>14.3e}  {worst:<18}{status:>7}"
        )
    return "\n".join(lines)


def metrics_path(out_dir: Path) -> Path:
    return Path(out_dir) / FileConstants.METRICS_FILE
