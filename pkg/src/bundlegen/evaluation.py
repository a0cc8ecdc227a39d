"""Top-K retrieval metrics over held-out user-bundle interactions."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from bundlegen import data as bgdata
from bundlegen import generator as bggen
from bundlegen import retrieval as bgret

log = logging.getLogger(__name__)


def recall_at_k(ranked, truth, k: int) -> float:
    """Fraction of the ground-truth bundles appearing in the top k."""
    truth = set(int(b) for b in truth)
    if not truth:
        raise ValueError("truth set must be nonempty")
    hits = sum(1 for b in list(ranked)[:k] if int(b) in truth)
    return hits / len(truth)


def ndcg_at_k(ranked, truth, k: int) -> float:
    """DCG of the hits in the top k, normalized by the ideal DCG."""
    truth = set(int(b) for b in truth)
    if not truth:
        raise ValueError("truth set must be nonempty")
    dcg = 0.0
    for rank, b in enumerate(list(ranked)[:k], start=1):
        if int(b) in truth:
            dcg += 1.0 / np.log2(rank + 1)
    ideal = sum(1.0 / np.log2(r + 1) for r in range(1, min(k, len(truth)) + 1))
    return dcg / ideal


@dataclass
class EvalReport:
    ks: list
    metrics: dict  # e.g. {"R@5": 0.62, "N@5": 0.55}
    num_users_evaluated: int
    num_users_skipped: int
    seeds: list = field(default_factory=list)
    per_seed: dict = field(default_factory=dict)  # seed -> {metric: value}


def evaluate(
    state,
    split: bgdata.DatasetSplit,
    ks,
    part: str = "test",
    alpha: float | None = None,
    query_mode: str = "generated",
) -> EvalReport:
    """Generate, rank, and score every held-out user.

    ``query_mode='generated'`` queries with the decoded pseudo bundle
    (history as cosine fallback when it comes out empty);
    ``query_mode='history'`` skips generation and queries with the raw
    aggregated history. Users without truth or without any training
    history are skipped and counted.
    """
    if query_mode not in ("generated", "history"):
        raise ValueError(f"unknown query_mode {query_mode!r}")
    truth_by_user = split.test if part == "test" else split.val
    ks = sorted(int(k) for k in ks)
    alpha = state.config.alpha if alpha is None else float(alpha)
    train = split.train
    X = train.X.tocsr()
    catalog = state.catalog
    r_hat_value = state.index.r_hat_value

    sums = {k: {"R": 0.0, "N": 0.0} for k in ks}
    evaluated = 0
    skipped = 0
    for u in sorted(truth_by_user):
        truth = truth_by_user[u]
        history = bgdata.user_history(train, u)
        if len(truth) == 0 or len(history) == 0:
            skipped += 1
            continue
        if query_mode == "generated":
            pseudo = bggen.generate(state.generator, history).items
        else:
            pseudo = history
        mask = X.indices[X.indptr[u] : X.indptr[u + 1]]
        ranked = [
            sb.bundle_id
            for sb in bgret.rank_topk(
                pseudo,
                catalog,
                alpha,
                max(ks),
                mask=mask,
                r_hat_value=r_hat_value,
                fallback_items=history,
            )
        ]
        for k in ks:
            sums[k]["R"] += recall_at_k(ranked, truth, k)
            sums[k]["N"] += ndcg_at_k(ranked, truth, k)
        evaluated += 1

    metrics = {}
    for k in ks:
        denom = max(evaluated, 1)
        metrics[f"R@{k}"] = sums[k]["R"] / denom
        metrics[f"N@{k}"] = sums[k]["N"] / denom
    seed = state.config.seed
    return EvalReport(
        ks=ks,
        metrics=metrics,
        num_users_evaluated=evaluated,
        num_users_skipped=skipped,
        seeds=[seed],
        per_seed={seed: dict(metrics)},
    )


def merge_reports(reports) -> EvalReport:
    """Average per-seed reports into one (the multi-run protocol)."""
    reports = list(reports)
    ks = reports[0].ks
    seeds = []
    per_seed = {}
    for r in reports:
        seeds.extend(r.seeds)
        per_seed.update(r.per_seed)
    metrics = {
        name: float(np.mean([r.metrics[name] for r in reports]))
        for name in reports[0].metrics
    }
    return EvalReport(
        ks=ks,
        metrics=metrics,
        num_users_evaluated=reports[0].num_users_evaluated,
        num_users_skipped=reports[0].num_users_skipped,
        seeds=seeds,
        per_seed=per_seed,
    )


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    buf.write("metric,k," + ",".join(f"seed_{s}" for s in report.seeds) + ",mean\n")
    for metric in ("R", "N"):
        for k in report.ks:
            name = f"{metric}@{k}"
            row = [metric, str(k)]
            row += [f"{report.per_seed[s][name]:.6f}" for s in report.seeds]
            row.append(f"{report.metrics[name]:.6f}")
            buf.write(",".join(row) + "\n")
    return buf.getvalue()


def report_table(report: EvalReport) -> str:
    """Human-readable metric x K table."""
    lines = []
    header = "metric" + "".join(f"{'@' + str(k):>12}" for k in report.ks)
    lines.append(header)
    for metric in ("R", "N"):
        row = f"{metric:<6}" + "".join(
            f"{report.metrics[f'{metric}@{k}']:>12.4f}" for k in report.ks
        )
        lines.append(row)
    lines.append(
        f"users evaluated: {report.num_users_evaluated}, "
        f"skipped: {report.num_users_skipped}, runs: {len(report.seeds)}"
    )
    return "\n".join(lines) + "\n"
