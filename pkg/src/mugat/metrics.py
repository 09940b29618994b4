"""Text-similarity evaluation suite: normalized edit distance, sentence
BLEU, exact-match METEOR, word-set precision/recall, and per-scenario
aggregation.

Conventions: edit distance is normalized by the longer string (reports show
a x100 column at presentation only); BLEU is sentence-level without
smoothing; METEOR uses exact unigram matching with no stemming or synonymy.
Word sets are built without case folding.
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

SCENARIOS = ("curr_only", "prev_curr", "curr_next", "full")


@dataclass
class MetricsRecord:
    ed: float
    bleu: float
    meteor: float
    precision: float
    recall: float
    scenario: str

    def __post_init__(self):
        for name in ("ed", "bleu", "meteor", "precision", "recall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def edit_distance(pred: str, gt: str) -> dict:
    """Levenshtein distance with unit costs.

    Returns {"raw": int, "normalized": float}; normalized by the longer
    string, defined as 0 when both are empty.
    """
    n, m = len(pred), len(gt)
    if n == 0 or m == 0:
        raw = max(n, m)
    else:
        prev = list(range(m + 1))
        for i in range(1, n + 1):
            cur = [i] + [0] * m
            ci = pred[i - 1]
            for j in range(1, m + 1):
                cost = 0 if ci == gt[j - 1] else 1
                cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
            prev = cur
        raw = prev[m]
    denom = max(n, m)
    return {"raw": raw, "normalized": raw / denom if denom else 0.0}


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(pred: Sequence[str], gt: Sequence[str], max_n: int = 4) -> float:
    """Sentence BLEU: geometric mean of clipped n-gram precisions times the
    brevity penalty exp(min(0, 1 - len(gt)/len(pred))). No smoothing: any
    zero n-gram precision gives score 0. Empty prediction scores 0.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if len(pred) == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        pred_counts = _ngram_counts(pred, n)
        total = sum(pred_counts.values())
        if total == 0:
            return 0.0
        gt_counts = _ngram_counts(gt, n)
        clipped = sum(min(c, gt_counts[g]) for g, c in pred_counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    bp = math.exp(min(0.0, 1.0 - len(gt) / len(pred)))
    return bp * math.exp(log_sum / max_n)


def _meteor_chunks(pred: Sequence[str], gt: Sequence[str], m: int,
                   exhaustive_limit: int = 12) -> int:
    """Minimum number of chunks over alignments with the maximum match count.

    Exact branch-and-bound for short inputs; greedy longest-common-block
    decomposition beyond `exhaustive_limit` tokens (an upper bound on the
    true minimum, adequate for reporting).
    """
    if max(len(pred), len(gt)) <= exhaustive_limit:
        return _min_chunks_exact(tuple(pred), tuple(gt), m)
    return _min_chunks_greedy(list(pred), list(gt))


def _min_chunks_exact(pred: tuple, gt: tuple, m: int) -> int:
    """Search over maximal alignments; a chunk is a maximal run of pairs
    contiguous in both sequences."""
    best = [m]  # worst case: every match its own chunk

    def rec(i: int, used: frozenset, matched: int, chunks: int, last_j: int):
        if chunks >= best[0]:
            return
        remaining = len(pred) - i
        if matched + remaining < m:
            return
        if matched == m:
            best[0] = min(best[0], chunks)
            return
        if i == len(pred):
            return
        # option: leave pred[i] unmatched
        rec(i + 1, used, matched, chunks, -2)
        tok = pred[i]
        for j in range(len(gt)):
            if j not in used and gt[j] == tok:
                new_chunks = chunks + (0 if j == last_j + 1 else 1)
                rec(i + 1, used | {j}, matched + 1, new_chunks, j)

    rec(0, frozenset(), 0, 0, -2)
    return best[0]


def _min_chunks_greedy(pred: list, gt: list) -> int:
    """Repeatedly remove the longest common contiguous block."""
    FREE = object()
    chunks = 0
    while True:
        best_len, best_pos = 0, None
        for i in range(len(pred)):
            if pred[i] is FREE:
                continue
            for j in range(len(gt)):
                if gt[j] is FREE or gt[j] != pred[i]:
                    continue
                k = 0
                while (i + k < len(pred) and j + k < len(gt)
                       and pred[i + k] is not FREE and gt[j + k] is not FREE
                       and pred[i + k] == gt[j + k]):
                    k += 1
                if k > best_len:
                    best_len, best_pos = k, (i, j)
        if best_pos is None:
            return chunks
        i, j = best_pos
        for k in range(best_len):
            pred[i + k] = FREE
            gt[j + k] = FREE
        chunks += 1


def meteor(pred: Sequence[str], gt: Sequence[str]) -> float:
    """Exact-unigram METEOR: F-mean 10PR/(R+9P) with fragmentation penalty
    0.5*(chunks/m)^3. Score 0 when there are no matches."""
    if len(pred) == 0 or len(gt) == 0:
        return 0.0
    pc, gc = Counter(pred), Counter(gt)
    m = sum(min(c, gc[t]) for t, c in pc.items())
    if m == 0:
        return 0.0
    p = m / len(pred)
    r = m / len(gt)
    f = 10 * p * r / (r + 9 * p)
    chunks = _meteor_chunks(pred, gt, m)
    penalty = 0.5 * (chunks / m) ** 3
    return f * (1.0 - penalty)


def word_set_pr(pred: str, gt: str) -> dict:
    """Whitespace-token set precision/recall (no case folding)."""
    ps, gs = set(pred.split()), set(gt.split())
    inter = len(ps & gs)
    return {
        "precision": inter / len(ps) if ps else 0.0,
        "recall": inter / len(gs) if gs else 0.0,
    }


def score_pair(pred: str, gt: str, scenario: str) -> MetricsRecord:
    """All five metrics for one prediction/ground-truth pair."""
    pr = word_set_pr(pred, gt)
    return MetricsRecord(
        ed=edit_distance(pred, gt)["normalized"],
        bleu=bleu(pred.split(), gt.split()),
        meteor=meteor(pred.split(), gt.split()),
        precision=pr["precision"],
        recall=pr["recall"],
        scenario=scenario,
    )


METRIC_NAMES = ("ed", "bleu", "meteor", "precision", "recall")


def aggregate(records: list[MetricsRecord]) -> dict:
    """Per-scenario arithmetic means plus an overall row, with counts."""
    if not records:
        raise ValueError("aggregate: no records")
    table: dict[str, dict] = {}
    groups = {s: [r for r in records if r.scenario == s] for s in SCENARIOS}
    groups["overall"] = records
    for name, group in groups.items():
        if not group and name != "overall":
            continue
        row = {"count": len(group)}
        for metric in METRIC_NAMES:
            row[metric] = sum(getattr(r, metric) for r in group) / len(group)
        table[name] = row
    return table


def write_report(table: dict, csv_path: str, json_path: Optional[str] = None,
                 extra: Optional[dict] = None) -> None:
    """Emit the aggregation table as CSV (4 decimals, ED also x100) and a
    mirrored JSON. Writes are atomic (temp file + rename)."""
    header = ["scenario", "count"] + list(METRIC_NAMES) + ["ed_x100"]
    tmp = csv_path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for scenario in list(SCENARIOS) + ["overall"]:
            if scenario not in table:
                continue
            row = table[scenario]
            w.writerow([scenario, row["count"]]
                       + [f"{row[m]:.4f}" for m in METRIC_NAMES]
                       + [f"{row['ed'] * 100:.4f}"])
    os.replace(tmp, csv_path)
    if json_path:
        payload = {"table": table}
        if extra:
            payload.update(extra)
        tmp = json_path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, json_path)


def plot_report(table: dict, fig_path: str) -> None:
    """Bar chart of per-scenario metric means, rendered next to the CSV."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    scenarios = [s for s in SCENARIOS if s in table]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.15
    for k, metric in enumerate(METRIC_NAMES):
        xs = [i + (k - 2) * width for i in range(len(scenarios))]
        ax.bar(xs, [table[s][metric] for s in scenarios], width=width, label=metric)
    ax.set_xticks(range(len(scenarios)))
    ax.set_xticklabels(scenarios)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean score")
    ax.legend(ncol=5, fontsize=8)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
