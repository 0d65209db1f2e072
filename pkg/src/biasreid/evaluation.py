"""Retrieval scoring and bias measurement.

Ranking uses squared Euclidean distances on the final descriptor. The
standard protocol drops gallery items sharing both identity and camera with
the query; the nobias protocol additionally drops wrong-identity items that
share the query's bias label, quantifying how much same-bias distractors
inflate or deflate the scores. Bias retention in a frozen representation is
measured by a small probe (learnable PReLU then a linear layer) and by the
probability that the item at rank r is a same-bias negative/positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .dataset import Dataset
from .embedder import EmbeddingSet, embed_all
from .errors import ConfigError, EvaluationError
from .losses import pairwise_sqdist
from .numerics import prelu
from .trainer import BranchConfig, train_branch

PROTOCOLS = ("standard", "nobias")


@dataclass
class RankResult:
    """Per retained query: gallery order after exclusions, plus masks."""

    orders: list[np.ndarray]
    positive: list[np.ndarray]
    same_bias: dict[str, list[np.ndarray]]
    query_rows: np.ndarray
    protocol: str
    channel: str | None
    dropped: int

    @property
    def n_queries(self) -> int:
        return len(self.orders)


def _cross_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq_a = (a * a).sum(axis=1)[:, None]
    sq_b = (b * b).sum(axis=1)[None, :]
    d2 = sq_a + sq_b - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def rank_gallery(
    es: EmbeddingSet, protocol: str = "standard", channel: str | None = None
) -> RankResult:
    """Rank the gallery for every query under the chosen exclusion protocol.

    Ties in distance break toward the lower gallery index. Queries left
    without any positive are dropped and counted.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if protocol == "nobias":
        if channel is None:
            raise ConfigError("nobias protocol needs a bias channel")
        if channel not in es.channels:
            raise ConfigError(f"unknown bias channel {channel!r}")

    q_rows = np.flatnonzero(es.splits == "query")
    g_rows = np.flatnonzero(es.splits == "gallery")
    if len(q_rows) == 0 or len(g_rows) == 0:
        raise EvaluationError("need non-empty query and gallery splits")

    d2 = _cross_sqdist(es.matrix[q_rows], es.matrix[g_rows])
    g_ids = es.ids[g_rows]
    g_cams = es.cameras[g_rows]
    g_bias = {ch: es.bias_labels[ch][g_rows] for ch in es.channels}

    orders: list[np.ndarray] = []
    positive: list[np.ndarray] = []
    same_bias: dict[str, list[np.ndarray]] = {ch: [] for ch in es.channels}
    kept_rows = []
    dropped = 0
    for qi, row in enumerate(q_rows):
        qid, qcam = es.ids[row], es.cameras[row]
        exclude = (g_ids == qid) & (g_cams == qcam)
        if protocol == "nobias":
            q_label = es.bias_labels[channel][row]
            exclude |= (g_ids != qid) & (es.bias_labels[channel][g_rows] == q_label)
        keep = np.flatnonzero(~exclude)
        pos = g_ids[keep] == qid
        if not pos.any():
            dropped += 1
            continue
        # stable sort on ascending gallery index -> lowest index wins ties
        order_local = np.argsort(d2[qi, keep], kind="stable")
        order = keep[order_local]
        orders.append(order)
        positive.append(g_ids[order] == qid)
        for ch in es.channels:
            q_label = es.bias_labels[ch][row]
            same_bias[ch].append(g_bias[ch][order] == q_label)
        kept_rows.append(row)

    if not orders:
        raise EvaluationError("every query was dropped (no cross-camera positives)")
    return RankResult(
        orders, positive, same_bias, np.array(kept_rows, dtype=int), protocol, channel, dropped
    )


def cmc_map(rr: RankResult, max_rank: int = 20) -> tuple[np.ndarray, float]:
    """CMC(k) for k = 1..max_rank and mean average precision.

    AP per query is the mean of precision measured at each positive's rank.
    """
    if rr.n_queries == 0:
        raise EvaluationError("no retained queries")
    cmc = np.zeros(max_rank)
    aps = np.zeros(rr.n_queries)
    for i, pos in enumerate(rr.positive):
        hits = np.flatnonzero(pos)
        first = hits[0]
        if first < max_rank:
            cmc[first:] += 1.0
        ranks = hits + 1.0
        aps[i] = float(np.mean(np.arange(1, len(hits) + 1) / ranks))
    return cmc / rr.n_queries, float(aps.mean())


def same_bias_rank_prob(
    rr: RankResult, channel: str, polarity: str, max_rank: int
) -> np.ndarray:
    """curve[r-1] = P(item at rank r is a same-bias positive/negative).

    The denominator at rank r counts queries with at least r retained items.
    """
    if polarity not in ("negative", "positive"):
        raise ConfigError(f"polarity must be negative|positive, got {polarity!r}")
    if channel not in rr.same_bias:
        raise ConfigError(f"unknown bias channel {channel!r}")
    lengths = np.array([len(o) for o in rr.orders])
    if max_rank > lengths.max(initial=0):
        raise EvaluationError(
            f"max_rank {max_rank} exceeds every retained list length (max {lengths.max(initial=0)})"
        )
    curve = np.zeros(max_rank)
    for r in range(1, max_rank + 1):
        have = lengths >= r
        hits = 0
        for qi in np.flatnonzero(have):
            is_pos = rr.positive[qi][r - 1]
            matches_polarity = is_pos if polarity == "positive" else not is_pos
            if matches_polarity and rr.same_bias[channel][qi][r - 1]:
                hits += 1
        curve[r - 1] = hits / have.sum()
    return curve


def nauc(curve: np.ndarray, k: int = 10) -> float:
    """Mean of the first k rank-position probabilities."""
    if k < 1 or k > len(curve):
        raise ConfigError(f"k={k} outside curve length {len(curve)}")
    return float(np.mean(curve[:k]))


# ----------------------------------------------------------------------------
# Bias probe: learnable PReLU then a linear layer, trained on frozen features.
# ----------------------------------------------------------------------------

PROBE_CONFIG_KEYS = {
    "probe_epochs": "full-batch training epochs (default 200)",
    "probe_rate": "Adam learning rate (default 0.01)",
    "probe_train_fraction": "fraction of rows used for fitting (default 0.5)",
    "probe_seed": "probe init/split seed (default 0)",
}


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 200
    rate: float = 0.01
    train_fraction: float = 0.5
    seed: int = 0


@dataclass
class ProbeParams:
    slope: float
    weights: np.ndarray  # [n_classes, d]
    bias: np.ndarray  # [n_classes]
    classes: list[str]


def _probe_logits(probe: ProbeParams, x: np.ndarray) -> np.ndarray:
    h, _ = prelu(x, probe.slope)
    return h @ probe.weights.T + probe.bias


def train_probe(
    features: np.ndarray, labels: np.ndarray, classes: list[str], cfg: ProbeConfig
) -> ProbeParams:
    """Softmax cross-entropy with Adam, full batch; the features stay frozen."""
    present = np.unique(labels)
    if len(present) < 2:
        raise ConfigError(f"probe needs >= 2 classes present, got {len(present)}")
    x = np.asarray(features, dtype=np.float64)
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[l] for l in labels], dtype=int)
    n, d = x.shape
    c = len(classes)

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))
    theta = {
        "slope": np.array([0.25]),
        "w": rng.normal(0.0, 0.01, size=(c, d)),
        "b": np.zeros(c),
    }
    m = {k: np.zeros_like(v) for k, v in theta.items()}
    v = {k: np.zeros_like(val) for k, val in theta.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0

    for step in range(1, cfg.epochs + 1):
        h, _ = prelu(x, float(theta["slope"][0]))
        logits = h @ theta["w"].T + theta["b"]
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        probs = expl / expl.sum(axis=1, keepdims=True)
        dlogits = (probs - onehot) / n
        grads = {
            "w": dlogits.T @ h,
            "b": dlogits.sum(axis=0),
            "slope": np.array([np.sum((dlogits @ theta["w"]) * np.where(x > 0, 0.0, x))]),
        }
        for key in theta:
            g = grads[key]
            m[key] = beta1 * m[key] + (1 - beta1) * g
            v[key] = beta2 * v[key] + (1 - beta2) * g * g
            mhat = m[key] / (1 - beta1**step)
            vhat = v[key] / (1 - beta2**step)
            theta[key] = theta[key] - cfg.rate * mhat / (np.sqrt(vhat) + eps)

    return ProbeParams(float(theta["slope"][0]), theta["w"], theta["b"], list(classes))


def probe_accuracy(probe: ProbeParams, features: np.ndarray, labels: np.ndarray) -> float:
    logits = _probe_logits(probe, np.asarray(features, dtype=np.float64))
    pred = logits.argmax(axis=1)
    class_index = {c: i for i, c in enumerate(probe.classes)}
    y = np.array([class_index[l] for l in labels], dtype=int)
    return float(np.mean(pred == y))


@dataclass
class ProbeReport:
    channel: str
    accuracy: float
    train_accuracy: float
    n_train: int
    n_test: int
    classes: list[str]


def fit_probe(es: EmbeddingSet, channel: str, cfg: ProbeConfig) -> tuple[ProbeReport, ProbeParams]:
    """Disjoint train/test split of the embedding rows, then train + score."""
    if channel not in es.channels:
        raise ConfigError(f"unknown bias channel {channel!r}")
    labels = es.bias_labels[channel]
    n = len(es)
    if n < 4:
        raise ConfigError("too few rows to split for probing")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 3)))
    perm = rng.permutation(n)
    n_train = int(round(cfg.train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise ConfigError(f"probe train fraction {cfg.train_fraction} leaves an empty side")
    tr, te = perm[:n_train], perm[n_train:]
    probe = train_probe(es.matrix[tr], labels[tr], es.channels[channel], cfg)
    report = ProbeReport(
        channel=channel,
        accuracy=probe_accuracy(probe, es.matrix[te], labels[te]),
        train_accuracy=probe_accuracy(probe, es.matrix[tr], labels[tr]),
        n_train=len(tr),
        n_test=len(te),
        classes=list(es.channels[channel]),
    )
    return report, probe


# ----------------------------------------------------------------------------
# Report assembly and the lambda sweep
# ----------------------------------------------------------------------------


@dataclass
class ChannelStats:
    p_neg: list[float]
    p_pos: list[float]
    nauc_neg: float
    nauc_pos: float
    probe_accuracy: float | None = None


@dataclass
class EvalReport:
    protocol: str
    channel: str | None
    rank1: float
    rank5: float
    rank10: float
    cmc: list[float]
    map: float
    channels: dict[str, ChannelStats]
    n_queries: int
    n_gallery: int
    dropped_queries: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "channel": self.channel,
            "rank1": self.rank1,
            "rank5": self.rank5,
            "rank10": self.rank10,
            "cmc": self.cmc,
            "map": self.map,
            "channels": {
                ch: {
                    "p_neg": st.p_neg,
                    "p_pos": st.p_pos,
                    "nauc_neg": st.nauc_neg,
                    "nauc_pos": st.nauc_pos,
                    "probe_accuracy": st.probe_accuracy,
                }
                for ch, st in self.channels.items()
            },
            "n_queries": self.n_queries,
            "n_gallery": self.n_gallery,
            "dropped_queries": self.dropped_queries,
            "config": self.config,
        }

    def flat_metrics(self) -> dict:
        flat = {
            "protocol": self.protocol,
            "rank1": self.rank1,
            "rank5": self.rank5,
            "rank10": self.rank10,
            "map": self.map,
            "n_queries": self.n_queries,
            "dropped_queries": self.dropped_queries,
        }
        for ch, st in self.channels.items():
            flat[f"nauc10_neg_{ch}"] = st.nauc_neg
            flat[f"nauc10_pos_{ch}"] = st.nauc_pos
            if st.probe_accuracy is not None:
                flat[f"probe_acc_{ch}"] = st.probe_accuracy
        return flat


def evaluate_embeddings(
    es: EmbeddingSet,
    protocol: str = "standard",
    channel: str | None = None,
    stat_channels: Iterable[str] | None = None,
    max_rank: int = 20,
    curve_rank: int = 10,
    probe_cfg: ProbeConfig | None = None,
    config_echo: dict | None = None,
) -> EvalReport:
    """Full report: CMC/mAP plus per-channel curves, nauc, optional probes."""
    rr = rank_gallery(es, protocol, channel)
    shortest = min(len(o) for o in rr.orders)
    max_rank = max(1, min(max_rank, max(len(o) for o in rr.orders)))
    curve_rank = max(1, min(curve_rank, shortest))
    cmc, mean_ap = cmc_map(rr, max_rank)
    stats: dict[str, ChannelStats] = {}
    for ch in stat_channels if stat_channels is not None else es.channels:
        p_neg = same_bias_rank_prob(rr, ch, "negative", curve_rank)
        p_pos = same_bias_rank_prob(rr, ch, "positive", curve_rank)
        k = min(10, curve_rank)
        stats[ch] = ChannelStats(
            p_neg=[float(v) for v in p_neg],
            p_pos=[float(v) for v in p_pos],
            nauc_neg=nauc(p_neg, k),
            nauc_pos=nauc(p_pos, k),
        )
        if probe_cfg is not None:
            report, _ = fit_probe(es, ch, probe_cfg)
            stats[ch].probe_accuracy = report.accuracy

    def cmc_at(k: int) -> float:
        return float(cmc[min(k, len(cmc)) - 1])

    return EvalReport(
        protocol=protocol,
        channel=channel,
        rank1=cmc_at(1),
        rank5=cmc_at(5),
        rank10=cmc_at(10),
        cmc=[float(v) for v in cmc],
        map=mean_ap,
        channels=stats,
        n_queries=rr.n_queries,
        n_gallery=int(np.sum(es.splits == "gallery")),
        dropped_queries=rr.dropped,
        config=config_echo or {},
    )


@dataclass
class SweepRow:
    lam_db: float
    rank1: float
    map: float
    probe_accuracy: float
    nauc_neg: float


def lambda_sweep(
    ds: Dataset,
    base_cfg: BranchConfig,
    mode: str,
    lambdas: Iterable[float],
    probe_cfg: ProbeConfig | None = None,
) -> list[SweepRow]:
    """One full train + embed + rank + probe cycle per lambda, shared seeds."""
    lambdas = list(lambdas)
    if not lambdas:
        raise ConfigError("lambda sweep needs at least one value")
    probe_cfg = probe_cfg or ProbeConfig()
    rows = []
    for lam in lambdas:
        cfg = replace(base_cfg, mode=mode, lam_db=float(lam))
        params, _ = train_branch(ds, cfg)
        es = embed_all(params, ds, branch_name=f"{mode}:{lam:g}")
        report = evaluate_embeddings(
            es,
            protocol="standard",
            stat_channels=[cfg.bias_channel],
            probe_cfg=probe_cfg,
        )
        st = report.channels[cfg.bias_channel]
        rows.append(
            SweepRow(
                lam_db=float(lam),
                rank1=report.rank1,
                map=report.map,
                probe_accuracy=float(st.probe_accuracy),
                nauc_neg=st.nauc_neg,
            )
        )
    return rows


def sweep_to_csv(rows: list[SweepRow]) -> str:
    lines = ["lambda_db,rank1,map,probe_acc,nauc10_neg"]
    for r in rows:
        lines.append(
            f"{r.lam_db:.17g},{r.rank1:.17g},{r.map:.17g},"
            f"{r.probe_accuracy:.17g},{r.nauc_neg:.17g}"
        )
    return "\n".join(lines) + "\n"


def curves_to_csv(report: EvalReport, channel: str) -> str:
    st = report.channels[channel]
    lines = ["rank,p_neg,p_pos"]
    for i, (a, b) in enumerate(zip(st.p_neg, st.p_pos), start=1):
        lines.append(f"{i},{a:.17g},{b:.17g}")
    return "\n".join(lines) + "\n"
