"""Single-positive ranking metrics and multi-run aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .parsing import RankedList

DEFAULT_METRICS = (("HitRatio", 1), ("HitRatio", 3), ("NDCG", 3))
WORST_RANK = 20


def _rank(ranked: RankedList | int) -> int:
    rank = ranked.gt_rank if isinstance(ranked, RankedList) else ranked
    if rank is None or rank < 1:
        raise ValueError("ranking carries no ground-truth rank")
    return int(rank)


def hit_ratio_at_k(ranked: RankedList | int, k: int) -> int:
    return int(_rank(ranked) <= k)


def ndcg_at_k(ranked: RankedList | int, k: int) -> float:
    """With a single relevant item the ideal DCG is 1, so NDCG is just the discount."""
    rank = _rank(ranked)
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


METRIC_FUNCS = {"HitRatio": hit_ratio_at_k, "NDCG": ndcg_at_k}


def metric_name(metric: str, k: int) -> str:
    return f"{metric}@{k}"


def user_metrics(ranked: RankedList | int,
                 metrics: Sequence[tuple[str, int]] = DEFAULT_METRICS) -> dict[str, float]:
    return {metric_name(m, k): float(METRIC_FUNCS[m](ranked, k)) for m, k in metrics}


@dataclass
class EvalReport:
    per_metric: dict[str, float]
    n_users: int
    n_runs: int
    per_run: list[dict[str, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"per_metric": self.per_metric, "n_users": self.n_users,
                "n_runs": self.n_runs, "per_run": self.per_run}

    def table(self, title: str | None = None) -> str:
        names = list(self.per_metric)
        width = max([len(n) for n in names] + [6])
        head = f"{'':<8}" + "".join(f"{n:>{width + 2}}" for n in names)
        lines = [title] if title else []
        lines.append(head)
        lines.append("-" * len(head))
        for j, run in enumerate(self.per_run, 1):
            lines.append(f"{'run ' + str(j):<8}" + "".join(f"{run[n]:>{width + 2}.4f}" for n in names))
        lines.append(f"{'mean':<8}" + "".join(f"{self.per_metric[n]:>{width + 2}.4f}" for n in names))
        if self.n_runs > 1:
            std = {n: float(np.std([r[n] for r in self.per_run])) for n in names}
            lines.append(f"{'std':<8}" + "".join(f"{std[n]:>{width + 2}.4f}" for n in names))
        lines.append(f"users={self.n_users} runs={self.n_runs}")
        return "\n".join(lines)


def aggregate(per_user_metrics: Sequence[Mapping[str, Mapping[str, float]]],
              runs: int | None = None) -> EvalReport:
    """Average over users within each run, then over runs.

    ``per_user_metrics[r][user][metric]`` is one user's value in run ``r``.
    """
    if runs is not None and runs != len(per_user_metrics):
        raise ValueError(f"expected {runs} runs, got {len(per_user_metrics)}")
    if not per_user_metrics:
        raise ValueError("no runs to aggregate")
    users = set(per_user_metrics[0])
    for run in per_user_metrics[1:]:
        if set(run) != users:
            raise ValueError("runs cover different user sets")
    if not users:
        raise ValueError("no users to aggregate")
    names = list(next(iter(per_user_metrics[0].values())))
    per_run = []
    for run in per_user_metrics:
        per_run.append({n: float(np.mean([run[u][n] for u in sorted(run)])) for n in names})
    means = {n: float(np.mean([r[n] for r in per_run])) for n in names}
    return EvalReport(means, len(users), len(per_user_metrics), per_run)


def write_report(report: EvalReport, path) -> None:
    """Line-delimited: one record per run, then the summary record."""
    with open(path, "w", encoding="utf-8") as fh:
        for j, run in enumerate(report.per_run, 1):
            fh.write(json.dumps({"kind": "run", "run": j, "metrics": run,
                                 "n_users": report.n_users}, sort_keys=True) + "\n")
        fh.write(json.dumps({"kind": "summary", "metrics": report.per_metric,
                             "n_users": report.n_users, "n_runs": report.n_runs},
                            sort_keys=True) + "\n")


def plot_curve(xs: Sequence[float], series: Mapping[str, Sequence[float]], path,
               xlabel: str = "step", ylabel: str = "reward", title: str | None = None) -> None:
    """Line plot written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "chainrec"
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, ys in series.items():
        ax.plot(xs, ys, label=label, linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
