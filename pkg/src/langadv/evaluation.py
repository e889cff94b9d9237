"""Accuracy, entity-level F1, parallel-pair cosine alignment, run averaging and
checkpoint-curve statistics, plus the tab-separated report writers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import repair_bio


@dataclass(frozen=True, order=True)
class Span:
    kind: str
    start: int
    end: int  # inclusive

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"span start {self.start} after end {self.end}")


def accuracy(preds: Sequence[int], golds: Sequence[int]) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} gold labels")
    if not golds:
        raise ValueError("accuracy of an empty set is undefined")
    return sum(int(p == g) for p, g in zip(preds, golds)) / len(golds)


def extract_spans(tags: Sequence[str]) -> set[Span]:
    """Maximal ``B-X (I-X)*`` runs. Orphan ``I-X`` tags are repaired to ``B-X`` first."""
    tags, _ = repair_bio(tags)
    spans, start, kind = set(), None, None
    for i, t in enumerate(list(tags) + ["O"]):
        if start is not None and t != f"I-{kind}":
            spans.add(Span(kind, start, i - 1))
            start = None
        if t.startswith("B-"):
            start, kind = i, t[2:]
    return spans


def spans_to_tags(spans: Iterable[Span], length: int) -> list[str]:
    tags = ["O"] * length
    for s in spans:
        tags[s.start] = f"B-{s.kind}"
        for i in range(s.start + 1, s.end + 1):
            tags[i] = f"I-{s.kind}"
    return tags


def prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def span_f1(pred: Iterable[Span], gold: Iterable[Span]) -> tuple[float, float, float]:
    pred, gold = set(pred), set(gold)
    return prf(len(pred & gold), len(pred), len(gold))


def corpus_span_f1(pred_tags: Sequence[Sequence[str]], gold_tags: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    """Micro-averaged span P/R/F1 over aligned sentences."""
    if len(pred_tags) != len(gold_tags):
        raise ValueError(f"{len(pred_tags)} predicted sentences for {len(gold_tags)} gold")
    tp = n_pred = n_gold = 0
    for p, g in zip(pred_tags, gold_tags):
        if len(p) != len(g):
            raise ValueError("predicted and gold tag sequences differ in length")
        ps, gs = extract_spans(p), extract_spans(g)
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    return prf(tp, n_pred, n_gold)


# ---------------------------------------------------------------- alignment


def cosine(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroDivisionError("cosine of a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def median(values: Sequence[float]) -> float:
    if not values:
        raise ValueError("median of an empty set")
    s = sorted(values)
    n = len(s)
    mid = n // 2
    return s[mid] if n % 2 else 0.5 * (s[mid - 1] + s[mid])


def _quartiles(values: Sequence[float]) -> tuple[float, float]:
    # same midpoint convention as median, applied to the lower/upper halves
    s = sorted(values)
    n = len(s)
    if n == 1:
        return s[0], s[0]
    lower, upper = s[: n // 2], s[(n + 1) // 2:]
    return median(lower), median(upper)


@dataclass
class AlignmentReport:
    pair_name: str
    similarities: list[float]
    median: float
    q1: float
    q3: float
    count: int
    excluded: int = 0

    def row(self) -> dict:
        return {
            "pair": self.pair_name,
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "count": self.count,
            "excluded": self.excluded,
        }


def alignment_report(embed: Callable[[list], np.ndarray], pairs: Sequence, pair_name: str = "A-B") -> AlignmentReport:
    """Cosine similarity of pooled embeddings for each (source, translation) pair.

    ``embed`` maps a list of documents to a (n, hidden) array. Pairs with a
    zero-norm embedding are excluded and counted.
    """
    if not pairs:
        raise ValueError("alignment needs at least one parallel pair")
    src = embed([p.source for p in pairs])
    tgt = embed([p.target for p in pairs])
    sims, excluded = [], 0
    for u, v in zip(src, tgt):
        try:
            sims.append(cosine(u, v))
        except ZeroDivisionError:
            excluded += 1
    if not sims:
        raise ValueError("every pair had a zero-norm embedding")
    q1, q3 = _quartiles(sims)
    return AlignmentReport(pair_name, sims, median(sims), q1, q3, len(sims), excluded)


# ---------------------------------------------------------------- runs


def average_runs(results: Sequence[Mapping[str, float]]) -> dict:
    """Arithmetic mean per metric; per-run values are kept under ``runs``."""
    if not results:
        raise ValueError("need at least one run")
    keys = set(results[0])
    for i, r in enumerate(results[1:], 1):
        if set(r) != keys:
            raise ValueError(f"run {i} metric keys {sorted(r)} differ from run 0 {sorted(keys)}")
    order = list(results[0])
    out = {k: math.fsum(r[k] for r in results) / len(results) for k in order}
    out["runs"] = [dict(r) for r in results]
    return out


@dataclass
class CurveStats:
    steps: list[int]
    values: list[float]
    tail_mean: float
    tail_std: float
    tail_count: int = field(default=0)


def curve_stats(steps: Sequence[int], values: Sequence[float]) -> CurveStats:
    """Mean and population std over the final half of the checkpoints."""
    if len(values) < 4:
        raise ValueError(f"curve statistics need at least 4 checkpoints, got {len(values)}")
    if len(steps) != len(values):
        raise ValueError("steps and values differ in length")
    tail = np.asarray(values[len(values) // 2:], dtype=np.float64)
    return CurveStats(list(steps), list(values), float(tail.mean()), float(tail.std()), len(tail))


# ---------------------------------------------------------------- report tables


def format_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    def cell(x):
        if isinstance(x, float):
            return f"{x:.4f}"
        return str(x)

    lines = ["\t".join(header)]
    lines += ["\t".join(cell(x) for x in row) for row in rows]
    return "\n".join(lines) + "\n"


def transfer_table(source: str, target: str, rows: Mapping[str, Mapping[str, float | None]]) -> str:
    """Transfer layout: one row per training mode, one column per language.

    ``rows`` maps a row label to ``{language: metric or None}``; ``None``
    renders as ``-``.
    """
    body = []
    for name, vals in rows.items():
        body.append([name] + ["-" if vals.get(lang) is None else vals[lang] for lang in (source, target)])
    return format_table(["", source, target], body)


def alignment_table(source: str, target: str, without_adv: float | None, with_adv: float | None) -> str:
    """Alignment layout: median cosine without and with the adversary."""
    row = [source, target] + ["-" if x is None else x for x in (without_adv, with_adv)]
    return format_table(["Source", "Target", "Without Adv.", "With Adv."], [row])
