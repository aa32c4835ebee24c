"""Ranking loss from kernel-smoothed score histograms, with exact gradients.

Relevance scores of the relevant and irrelevant sets are accumulated into two
normalized histograms over the shared score range; the loss is the estimated
probability that a relevant score falls below an irrelevant one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BINS = 100


class DegenerateScoreRange(ValueError):
    """All scores coincide; the histogram range collapses to a point."""


@dataclass
class RelevanceSets:
    """Scores (log-densities) of the relevant and irrelevant items."""

    r_plus: np.ndarray
    r_minus: np.ndarray

    def __post_init__(self):
        self.r_plus = np.asarray(self.r_plus, dtype=float)
        self.r_minus = np.asarray(self.r_minus, dtype=float)
        if self.r_plus.size == 0 or self.r_minus.size == 0:
            raise ValueError("both relevance sets must be nonempty")
        if not (np.all(np.isfinite(self.r_plus)) and np.all(np.isfinite(self.r_minus))):
            raise ValueError("relevance scores must be finite")


@dataclass
class HistogramPair:
    nodes: np.ndarray    # (B,) evenly spaced over [l_min, l_max]
    h_plus: np.ndarray   # (B,), sums to 1
    h_minus: np.ndarray  # (B,), sums to 1

    @property
    def step(self) -> float:
        return float(self.nodes[1] - self.nodes[0])


def triangular_kernel(s, width):
    """max(1 - 2|s| / width, 0); unit mass at 0, support |s| < width / 2."""
    width = float(width)
    if width <= 0.0:
        raise ValueError("kernel width must be positive")
    return np.maximum(1.0 - 2.0 * np.abs(np.asarray(s, dtype=float)) / width, 0.0)


def _bin_positions(scores: np.ndarray, l_min: float, step: float, bins: int):
    """Lower node index and fractional offset for every score.

    With kernel width 2*step each score splits its unit mass between the two
    adjacent nodes, linearly in the offset.
    """
    t = np.floor((scores - l_min) / step).astype(int)
    t = np.clip(t, 0, bins - 2)
    frac = (scores - l_min) / step - t
    return t, frac


def build_histograms(rel: RelevanceSets, bins: int = DEFAULT_BINS) -> HistogramPair:
    """Accumulate both normalized histograms over the union score range."""
    if bins < 2:
        raise ValueError("need at least 2 histogram nodes")
    l_min = float(min(rel.r_plus.min(), rel.r_minus.min()))
    l_max = float(max(rel.r_plus.max(), rel.r_minus.max()))
    if l_max == l_min:
        raise DegenerateScoreRange("all relevance scores are equal")
    step = (l_max - l_min) / (bins - 1)
    nodes = l_min + step * np.arange(bins)

    def accumulate(scores: np.ndarray) -> np.ndarray:
        t, frac = _bin_positions(scores, l_min, step, bins)
        h = np.zeros(bins)
        np.add.at(h, t, 1.0 - frac)
        np.add.at(h, t + 1, frac)
        return h / scores.size

    return HistogramPair(nodes=nodes, h_plus=accumulate(rel.r_plus), h_minus=accumulate(rel.r_minus))


def histogram_loss(pair: HistogramPair) -> float:
    """sum_b h_minus[b] * cumsum(h_plus)[b]: P(relevant score <= irrelevant)."""
    return float(np.dot(pair.h_minus, np.cumsum(pair.h_plus)))


def histogram_loss_backward(rel: RelevanceSets, bins: int = DEFAULT_BINS):
    """Exact derivative of histogram_loss(build_histograms(...)) per score.

    This is the total derivative of the composed map as evaluated: the node
    range is recomputed from the scores, so the scores holding the minimum
    and maximum carry extra terms from moving the grid itself (their own
    in-bin terms cancel exactly, since an extreme rides with the grid).

    Returns ``(grad_plus, grad_minus, degenerate)``; on a collapsed score
    range the gradients are zero and the flag is set.
    """
    try:
        pair = build_histograms(rel, bins)
    except DegenerateScoreRange:
        return np.zeros_like(rel.r_plus), np.zeros_like(rel.r_minus), True
    step = pair.step
    l_min = float(pair.nodes[0])
    span = float(pair.nodes[-1] - pair.nodes[0])
    # dL/dh_minus[b] is the plus CDF; dL/dh_plus[l] is the minus tail mass.
    dl_dh_minus = np.cumsum(pair.h_plus)
    dl_dh_plus = np.cumsum(pair.h_minus[::-1])[::-1]

    def sensitivities(scores: np.ndarray, dl_dh: np.ndarray):
        # q = dL / d(grid position); each score's mass moves from node t to
        # node t+1 at unit rate in position.
        t, _ = _bin_positions(scores, l_min, step, bins)
        q = (dl_dh[t + 1] - dl_dh[t]) / scores.size
        return q, (scores - l_min) / step

    q_plus, p_plus = sensitivities(rel.r_plus, dl_dh_plus)
    q_minus, p_minus = sensitivities(rel.r_minus, dl_dh_minus)
    grad_plus = q_plus / step
    grad_minus = q_minus / step

    # Grid motion: positions respond to the endpoints as
    # dp/dl_min = (p - (B-1)) / span and dp/dl_max = -p / span.
    qp_sum = float(q_plus.sum() + q_minus.sum())
    qp_dot = float((q_plus * p_plus).sum() + (q_minus * p_minus).sum())
    d_lmin = (qp_dot - (bins - 1) * qp_sum) / span
    d_lmax = -qp_dot / span
    all_scores = np.concatenate([rel.r_plus, rel.r_minus])
    amin = int(np.argmin(all_scores))
    amax = int(np.argmax(all_scores))
    for idx, extra in ((amin, d_lmin), (amax, d_lmax)):
        if idx < rel.r_plus.size:
            grad_plus[idx] += extra
        else:
            grad_minus[idx - rel.r_plus.size] += extra
    return grad_plus, grad_minus, False


def loss_and_grads(rel: RelevanceSets, bins: int = DEFAULT_BINS):
    """Loss plus per-score gradients; the degenerate range scores 0.5."""
    try:
        loss = histogram_loss(build_histograms(rel, bins))
        degenerate = False
    except DegenerateScoreRange:
        loss = 0.5
        degenerate = True
    grad_plus, grad_minus, _ = histogram_loss_backward(rel, bins)
    return loss, grad_plus, grad_minus, degenerate


def pairwise_violation_rate(rel: RelevanceSets) -> float:
    """Brute-force fraction of (plus, minus) pairs ranked the wrong way.

    Ties count one half.  This is the quantity the histogram loss
    approximates; kept as an independent reference.
    """
    plus = rel.r_plus[:, None]
    minus = rel.r_minus[None, :]
    return float(((plus < minus) + 0.5 * (plus == minus)).mean())
