"""Triplet losses over a mini-batch: hard-mined for identity, easy-mined for
bias, and their signed combination.

The identity loss picks the farthest same-id and nearest different-id sample
per anchor; the bias loss picks the nearest same-bias-class and farthest
different-bias-class sample per anchor, ignoring identity. All gradients are
exact subgradients with respect to the embeddings and flow only through each
anchor's selected pair. Ties in argmin/argmax break toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchCompositionError, ConfigError, DataError

MODES = ("reduce", "enhance")


def pairwise_sqdist(embeddings: np.ndarray) -> np.ndarray:
    """Symmetric [n, n] matrix of squared Euclidean distances.

    Computed as sum((a - b)^2) per pair, which is bit-identical to a naive
    per-pair loop (batch sizes here are small, so the O(n^2 d) broadcast is
    cheap and keeps selection tie-breaking exactly reproducible).
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if not np.isfinite(e).all():
        raise DataError("non-finite embeddings")
    diff = e[:, None, :] - e[None, :, :]
    return (diff * diff).sum(axis=-1)


@dataclass
class TripletSelection:
    """Chosen pair per anchor; index -1 marks a skipped anchor."""

    pos_idx: np.ndarray
    neg_idx: np.ndarray
    hinge_arg: np.ndarray
    active: np.ndarray
    skipped: np.ndarray

    @property
    def active_fraction(self) -> float:
        considered = ~self.skipped
        if not considered.any():
            return 0.0
        return float(self.active[considered].mean())


@dataclass
class LossOutput:
    value: float
    grads: np.ndarray
    selection: TripletSelection
    n_skipped: int = 0


def _select_extreme(d2_row: np.ndarray, mask: np.ndarray, largest: bool) -> int:
    """Index of the largest/smallest masked entry, lowest index on ties."""
    cand = np.flatnonzero(mask)
    vals = d2_row[cand]
    best = np.argmax(vals) if largest else np.argmin(vals)
    return int(cand[best])


def _accumulate_pair_grads(
    grads: np.ndarray, emb: np.ndarray, a: int, pos: int, neg: int
) -> None:
    # d/de of [m + d2(a,pos) - d2(a,neg)]: through the selected pair only
    ap = emb[a] - emb[pos]
    an = emb[a] - emb[neg]
    grads[a] += 2.0 * (ap - an)
    grads[pos] -= 2.0 * ap
    grads[neg] += 2.0 * an


def reid_hard_loss(embeddings: np.ndarray, id_labels, margin: float) -> LossOutput:
    """Batch-hard identity triplet loss with exact subgradients.

    Per anchor: hardest positive = max squared distance over same-id others,
    hardest negative = min over different-id samples. Every anchor must have
    at least one of each.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(id_labels)
    n = emb.shape[0]
    if labels.shape[0] != n:
        raise ConfigError("id labels misaligned with embeddings")
    d2 = pairwise_sqdist(emb)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]

    pos_idx = np.full(n, -1)
    neg_idx = np.full(n, -1)
    args = np.zeros(n)
    active = np.zeros(n, dtype=bool)
    grads = np.zeros_like(emb)
    total = 0.0
    for a in range(n):
        if not same[a].any():
            raise BatchCompositionError(f"anchor {a} has no positive (id {labels[a]!r})")
        if not diff[a].any():
            raise BatchCompositionError(f"anchor {a} has no negative (id {labels[a]!r})")
        p = _select_extreme(d2[a], same[a], largest=True)
        q = _select_extreme(d2[a], diff[a], largest=False)
        arg = margin + d2[a, p] - d2[a, q]
        pos_idx[a], neg_idx[a], args[a] = p, q, arg
        if arg > 0:
            active[a] = True
            total += arg
            _accumulate_pair_grads(grads, emb, a, p, q)

    sel = TripletSelection(pos_idx, neg_idx, args, active, np.zeros(n, dtype=bool))
    return LossOutput(total, grads, sel)


def bias_easy_loss(
    embeddings: np.ndarray, bias_labels, margin: float, hinge: bool = True
) -> LossOutput:
    """Easy-pair bias triplet loss: nearest same-bias-class sample (any id)
    against farthest different-bias-class sample.

    Anchors lacking either pool are skipped and counted, never fatal unless
    every anchor is skipped. `hinge=False` drops the [.]_+ clamp on this term
    so its gradient keeps flowing once the margin saturates.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(bias_labels)
    n = emb.shape[0]
    if labels.shape[0] != n:
        raise ConfigError("bias labels misaligned with embeddings")
    d2 = pairwise_sqdist(emb)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]

    pos_idx = np.full(n, -1)
    neg_idx = np.full(n, -1)
    args = np.zeros(n)
    active = np.zeros(n, dtype=bool)
    skipped = np.zeros(n, dtype=bool)
    grads = np.zeros_like(emb)
    total = 0.0
    for a in range(n):
        if not same[a].any() or not diff[a].any():
            skipped[a] = True
            continue
        p = _select_extreme(d2[a], same[a], largest=False)
        q = _select_extreme(d2[a], diff[a], largest=True)
        arg = margin + d2[a, p] - d2[a, q]
        pos_idx[a], neg_idx[a], args[a] = p, q, arg
        active[a] = arg > 0
        if not hinge:
            total += arg
            _accumulate_pair_grads(grads, emb, a, p, q)
        elif arg > 0:
            total += arg
            _accumulate_pair_grads(grads, emb, a, p, q)

    if skipped.all() and n > 0:
        raise BatchCompositionError("every anchor lacks a same-bias or different-bias partner")
    sel = TripletSelection(pos_idx, neg_idx, args, active, skipped)
    return LossOutput(total, grads, sel, n_skipped=int(skipped.sum()))


@dataclass
class CombinedLoss:
    """Signed combination of the identity and bias losses."""

    value: float
    grads: np.ndarray
    mode: str
    reid: LossOutput
    bias: LossOutput


def combined_loss(
    embeddings: np.ndarray,
    id_labels,
    bias_labels,
    mode: str,
    lam_dr: float,
    lam_db: float,
    margin_id: float,
    margin_bias: float,
    bias_hinge: bool = True,
) -> CombinedLoss:
    """reduce: lam_dr * L_id - lam_db * L_bias; enhance: plus instead of minus.

    Both weights are stored unsigned; the branch mode carries the sign. The
    gradient is the matching signed combination of the component gradients.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if lam_dr < 0 or lam_db < 0:
        raise ConfigError("loss weights must be >= 0")
    emb = np.asarray(embeddings, dtype=np.float64)
    reid = reid_hard_loss(emb, id_labels, margin_id)
    if lam_db == 0.0:
        # exactly the identity loss; the bias term is not even evaluated, so
        # a batch that cannot form bias pairs still trains as a baseline
        n = emb.shape[0]
        empty = TripletSelection(
            np.full(n, -1), np.full(n, -1), np.zeros(n),
            np.zeros(n, dtype=bool), np.ones(n, dtype=bool),
        )
        bias = LossOutput(0.0, np.zeros_like(emb), empty, n_skipped=n)
        return CombinedLoss(lam_dr * reid.value, lam_dr * reid.grads, mode, reid, bias)
    bias = bias_easy_loss(emb, bias_labels, margin_bias, hinge=bias_hinge)
    sign = -1.0 if mode == "reduce" else 1.0
    value = lam_dr * reid.value + sign * lam_db * bias.value
    grads = lam_dr * reid.grads + sign * lam_db * bias.grads
    return CombinedLoss(value, grads, mode, reid, bias)


# ----------------------------------------------------------------------------
# Exhaustive reference selections (oracle side of the dual-route check)
# ----------------------------------------------------------------------------


def brute_force_hard_loss(embeddings, id_labels, margin) -> float:
    """O(n^2) per anchor search over all valid pairs; no shared selection code."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(id_labels)
    total = 0.0
    for a in range(len(emb)):
        best_p, best_n = None, None
        for j in range(len(emb)):
            if j == a:
                continue
            d = float(((emb[a] - emb[j]) ** 2).sum())
            if labels[j] == labels[a]:
                if best_p is None or d > best_p:
                    best_p = d
            elif best_n is None or d < best_n:
                best_n = d
        if best_p is None or best_n is None:
            raise BatchCompositionError(f"anchor {a} lacks a pair")
        total += max(0.0, margin + best_p - best_n)
    return total


def brute_force_easy_loss(embeddings, bias_labels, margin, hinge: bool = True) -> float:
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(bias_labels)
    total = 0.0
    n_valid = 0
    for a in range(len(emb)):
        best_p, best_n = None, None
        for j in range(len(emb)):
            if j == a:
                continue
            d = float(((emb[a] - emb[j]) ** 2).sum())
            if labels[j] == labels[a]:
                if best_p is None or d < best_p:
                    best_p = d
            elif best_n is None or d > best_n:
                best_n = d
        if best_p is None or best_n is None:
            continue
        n_valid += 1
        arg = margin + best_p - best_n
        total += max(0.0, arg) if hinge else arg
    if n_valid == 0 and len(emb) > 0:
        raise BatchCompositionError("no anchor has both bias pools")
    return total
