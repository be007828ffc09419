"""CTC loss with analytic gradients, decoding, and WER aggregation.

All functions here are pure and operate on plain numpy arrays; the blank
symbol is the *last* index (V) by convention, so a [T, V+1] log-probability
matrix covers V real labels plus blank.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, InfeasibleTarget, ResourceLimit

NEG_INF = -np.inf

# Label sequences are plain lists of indices in [0, V); V itself is blank.
LabelSequence = list


def _extend_with_blanks(target: list[int], blank: int) -> list[int]:
    ext = [blank]
    for tok in target:
        ext.append(tok)
        ext.append(blank)
    return ext


def _validate_target(target: list[int], n_labels: int) -> None:
    for tok in target:
        if not 0 <= tok < n_labels:
            raise InvalidArgument(f"target token {tok} outside [0, {n_labels})")


def ctc_loss_grad(log_probs: np.ndarray, target: list[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of `target` plus its gradient w.r.t. log_probs.

    log_probs is [T, V+1] with valid log-distributions per row and blank at
    index V. Runs the forward (alpha) / backward (beta) recursions over the
    blank-extended sequence entirely in log space.

    Raises InfeasibleTarget when no T-frame path collapses to the target
    (equivalently, when the alignment probability is exactly zero).
    """
    log_probs = np.asarray(log_probs)
    if log_probs.ndim != 2:
        raise InvalidArgument(f"log_probs must be [T, V+1], got shape {log_probs.shape}")
    if np.isnan(log_probs).any():
        raise InvalidArgument("log_probs contains NaN")
    T, n_classes = log_probs.shape
    blank = n_classes - 1
    _validate_target(list(target), blank)
    L = len(target)
    S = 2 * L + 1

    ext = _extend_with_blanks(list(target), blank)

    # forward: alpha[t, s] includes the emission at frame t
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = log_probs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = np.logaddexp(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                a = np.logaddexp(a, alpha[t - 1, s - 2])
            alpha[t, s] = a + log_probs[t, ext[s]]

    log_p = np.logaddexp(alpha[T - 1, S - 1],
                         alpha[T - 1, S - 2] if S > 1 else NEG_INF)
    if log_p == NEG_INF:
        raise InfeasibleTarget(
            f"no {T}-frame alignment collapses to a length-{L} target")
    loss = -log_p

    # backward: beta[t, s] covers frames t+1..T-1, so alpha*beta spans a path
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s] + log_probs[t + 1, ext[s]]
            if s + 1 < S:
                b = np.logaddexp(b, beta[t + 1, s + 1] + log_probs[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != blank and ext[s + 2] != ext[s]:
                b = np.logaddexp(b, beta[t + 1, s + 2] + log_probs[t + 1, ext[s + 2]])
            beta[t, s] = b

    # d(-log P)/d log_probs[t, k] = -(sum of path mass through k at t) / P
    log_q = np.full((T, n_classes), NEG_INF)
    ab = alpha + beta
    for s in range(S):
        k = ext[s]
        log_q[:, k] = np.logaddexp(log_q[:, k], ab[:, s])
    grad = -np.exp(log_q - log_p)
    return float(loss), grad


def ctc_brute_force(log_probs: np.ndarray, target: list[int]) -> float:
    """Exact CTC loss by enumerating every frame-label path.

    Verification oracle for the dynamic program: sums the probability of all
    paths whose collapse (merge repeats, then drop blanks) equals the target.
    Guarded to (V+1)^T <= 10^7 paths.
    """
    log_probs = np.asarray(log_probs)
    T, n_classes = log_probs.shape
    blank = n_classes - 1
    _validate_target(list(target), blank)
    if n_classes ** T > 10 ** 7:
        raise ResourceLimit(f"{n_classes}^{T} paths exceed the enumeration budget")
    target = list(target)
    total = NEG_INF
    for path in itertools.product(range(n_classes), repeat=T):
        collapsed = []
        prev = None
        for sym in path:
            if sym != prev:
                if sym != blank:
                    collapsed.append(sym)
            prev = sym
        if collapsed == target:
            total = np.logaddexp(total, sum(log_probs[t, path[t]] for t in range(T)))
    return float(-total)


def collapse(path: list[int], blank: int) -> list[int]:
    """CTC collapse map: merge consecutive repeats, then delete blanks."""
    out = []
    prev = None
    for sym in path:
        if sym != prev and sym != blank:
            out.append(sym)
        prev = sym
    return out


def greedy_decode(log_probs: np.ndarray) -> list[int]:
    """Best-path decoding: per-frame argmax, then CTC collapse.

    Ties break toward the lowest label index (argmax convention).
    """
    log_probs = np.asarray(log_probs)
    blank = log_probs.shape[1] - 1
    path = np.argmax(log_probs, axis=1).tolist()
    return collapse(path, blank)


def edit_distance(ref: list, hyp: list) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    n, m = len(ref), len(hyp)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ref[i - 1] != hyp[j - 1])
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev = cur
    return prev[m]


@dataclass
class AccentStats:
    """Accumulated error counts for one accent."""

    accent_id: int
    utterance_count: int = 0
    total_ref_words: int = 0
    total_edits: int = 0

    @property
    def wer(self) -> float:
        if self.total_ref_words == 0:
            raise InvalidArgument(f"accent {self.accent_id} has no reference words")
        return self.total_edits / self.total_ref_words


@dataclass
class EvalReport:
    """Per-accent WER table plus utterance-weighted subset averages."""

    per_accent: list[AccentStats]
    averages: dict[str, float]
    weighting: str = "utterances"
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_accent": [
                {
                    "accent": s.accent_id,
                    "utterances": s.utterance_count,
                    "ref_words": s.total_ref_words,
                    "edits": s.total_edits,
                    "wer": s.wer,
                }
                for s in self.per_accent
            ],
            "averages": self.averages,
            "weighting": self.weighting,
            "meta": self.meta,
        }

    @staticmethod
    def from_dict(doc: dict) -> "EvalReport":
        stats = [
            AccentStats(

                accent_id=row["accent"],
                utterance_count=row["utterances"],
                total_ref_words=row["ref_words"],
                total_edits=row["edits"],
            )
            for row in doc["per_accent"]
        ]
        return EvalReport(stats, dict(doc["averages"]),
                          doc.get("weighting", "utterances"), doc.get("meta", {}))


def weighted_average(stats: list[AccentStats], subset: list[int],
                     weighting: str = "utterances") -> float:
    """Subset average of per-accent WERs, weighted by utterance (or word) counts."""
    rows = [s for s in stats if s.accent_id in subset]
    if not rows:
        raise InvalidArgument(f"subset {subset} matches no accent")
    if weighting == "utterances":
        weights = [s.utterance_count for s in rows]
    elif weighting == "words":
        weights = [s.total_ref_words for s in rows]
    else:
        raise InvalidArgument(f"unknown weighting {weighting!r}")
    total = sum(weights)
    if total == 0:
        raise InvalidArgument("subset has zero total weight")
    return sum(s.wer * w for s, w in zip(rows, weights)) / total


def report_from_stats(stats: list[AccentStats], subsets: dict[str, list[int]],
                      weighting: str = "utterances") -> EvalReport:
    """Assemble an EvalReport from already-accumulated per-accent stats."""
    if not stats:
        raise InvalidArgument("empty reference corpus")
    ordered = sorted(stats, key=lambda s: s.accent_id)
    averages = {name: weighted_average(ordered, subset, weighting)
                for name, subset in subsets.items()}
    return EvalReport(ordered, averages, weighting)


def wer_aggregate(pairs: list[tuple[list, list, int]],
                  subsets: dict[str, list[int]],
                  weighting: str = "utterances") -> EvalReport:
    """Score (ref_words, hyp_words, accent_id) triples into an EvalReport.

    Per-accent WER is total edits / total reference words; subset averages
    weight the per-accent WERs by utterance counts, the convention that
    reproduces the printed weighted averages this report format mirrors.
    """
    if not pairs:
        raise InvalidArgument("empty reference corpus")
    by_accent: dict[int, AccentStats] = {}
    for ref, hyp, accent_id in pairs:
        stats = by_accent.setdefault(accent_id, AccentStats(accent_id))
        stats.utterance_count += 1
        stats.total_ref_words += len(ref)
        stats.total_edits += edit_distance(list(ref), list(hyp))
    return report_from_stats(list(by_accent.values()), subsets, weighting)
