"""Levenshtein alignment counts, corpus-level error rate and scoring reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import UndefinedWERError


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimum-cost unit-cost alignment."""
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(sub, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), int(ins), int(dels)


def wer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Corpus-level rate: all errors summed, divided by all reference tokens."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    n_ref = sum(len(r) for r in refs)
    if n_ref == 0:
        raise UndefinedWERError("error rate is undefined for an empty reference corpus")
    errors = sum(sum(edit_distance(r, h)) for r, h in zip(refs, hyps))
    return errors / n_ref


def write_scoring_report(path: str | Path, ids: Sequence[str], refs: Sequence[str],
                         hyps: Sequence[str], tokens_ref=None, tokens_hyp=None) -> float:
    """Write ``id<TAB>ref<TAB>hyp<TAB>S,I,D`` lines and a closing corpus line.

    Alignment runs over ``tokens_ref``/``tokens_hyp`` when given, otherwise
    over the characters of ``refs``/``hyps``. The last line is
    ``corpus<TAB>N=<ref tokens><TAB>S,I,D<TAB>WER=<rate>``.
    """
    tokens_ref = tokens_ref if tokens_ref is not None else [list(r) for r in refs]
    tokens_hyp = tokens_hyp if tokens_hyp is not None else [list(h) for h in hyps]
    totals = np.zeros(3, dtype=np.int64)
    lines = []
    for uid, r, h, tr, th in zip(ids, refs, hyps, tokens_ref, tokens_hyp):
        s, i, d = edit_distance(tr, th)
        totals += (s, i, d)
        lines.append(f"{uid}\t{r}\t{h}\t{s},{i},{d}")
    n_ref = sum(len(t) for t in tokens_ref)
    if n_ref == 0:
        raise UndefinedWERError("error rate is undefined for an empty reference corpus")
    rate = float(totals.sum()) / n_ref
    lines.append(f"corpus\tN={n_ref}\t{totals[0]},{totals[1]},{totals[2]}\tWER={rate:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rate


def read_scoring_report(path: str | Path) -> float:
    last = Path(path).read_text(encoding="utf-8").strip().splitlines()[-1]
    return float(last.rsplit("WER=", 1)[1])
