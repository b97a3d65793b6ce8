"""Training losses, similarity scoring and evaluation metrics.

Ties are always broken in favour of the lower index, so the rank of an item
is ``1 + #(strictly better) + #(equal with a lower index)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError, Tensor, as_tensor, log_softmax, softmax, sqrt


class UsageError(RuntimeError):
    pass


@dataclass
class SimilarityMatrix:
    """Scores with queries along rows and candidates along columns."""

    values: Tensor
    ground_truth: np.ndarray | None = None  # row index -> matching column; None means diagonal

    def gt(self) -> np.ndarray:
        n = self.values.shape[0]
        if self.ground_truth is None:
            if self.values.shape[0] != self.values.shape[1]:
                raise UsageError("diagonal ground truth needs a square matrix")
            return np.arange(n)
        gt = np.asarray(self.ground_truth, dtype=np.int64)
        if gt.shape != (n,):
            raise UsageError(f"ground truth must map every one of {n} queries, got shape {gt.shape}")
        return gt

    def transposed(self) -> "SimilarityMatrix":
        """Swap query and candidate roles (needs a one-to-one ground truth)."""
        gt = self.gt()
        inv = np.empty_like(gt)
        inv[gt] = np.arange(len(gt))
        return SimilarityMatrix(Tensor(self.values.data.T.copy()), inv)


@dataclass
class MetricsReport:
    r_at: dict[int, float] = field(default_factory=dict)
    median_rank: float | None = None
    top1: float | None = None
    top5: float | None = None
    avg_pos_sim: float | None = None
    avg_margin: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def flat(self, prefix: str = "") -> dict[str, float]:
        out = {f"{prefix}r{k}": v for k, v in self.r_at.items()}
        for name in ("median_rank", "top1", "top5", "avg_pos_sim", "avg_margin"):
            value = getattr(self, name)
            if value is not None:
                out[prefix + ("mdr" if name == "median_rank" else name)] = value
        out.update({prefix + k: v for k, v in self.extra.items()})
        return out


def l2_normalize(x: Tensor) -> Tensor:
    norms = np.sqrt((x.data**2).sum(axis=-1))
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"zero-norm row {int(bad[0])}")
    return x / sqrt((x * x).sum(axis=-1, keepdims=True))


def cosine_sim_matrix(video_embs: Tensor, text_embs: Tensor) -> SimilarityMatrix:
    video_embs, text_embs = as_tensor(video_embs), as_tensor(text_embs)
    if video_embs.shape[-1] != text_embs.shape[-1]:
        raise ShapeError(f"embedding dims differ: {video_embs.shape} vs {text_embs.shape}")
    try:
        v = l2_normalize(video_embs)
    except ValueError as exc:
        raise ValueError(f"video embeddings: {exc}") from None
    try:
        t = l2_normalize(text_embs)
    except ValueError as exc:
        raise ValueError(f"text embeddings: {exc}") from None
    return SimilarityMatrix(v @ t.transpose())


def nce_loss(sim: SimilarityMatrix, temperature: float) -> Tensor:
    """Symmetric InfoNCE over a paired batch (positives on the diagonal)."""
    n, m = sim.values.shape
    if n != m:
        raise ShapeError(f"paired batch needs a square similarity matrix, got {sim.values.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = sim.values * (1.0 / temperature)
    diag = (np.arange(n), np.arange(n))
    rows = log_softmax(logits, axis=1)[diag].mean()
    cols = log_softmax(logits, axis=0)[diag].mean()
    return (rows + cols) * -0.5


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{n} logit rows but labels of shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label outside [0, {c})")
    return -log_softmax(logits, axis=1)[np.arange(n), labels].mean()


def dsl_transform(sim: SimilarityMatrix, temperature: float = 1.0, training: bool = False) -> SimilarityMatrix:
    """Dual-softmax reweighting: each score times a softmax prior over the query axis."""
    if training:
        raise UsageError("dual-softmax reweighting is an inference-time transform")
    values = as_tensor(sim.values.data)
    prior = softmax(values * (1.0 / temperature), axis=0)
    return SimilarityMatrix(prior * values, sim.ground_truth)


def ground_truth_ranks(scores: np.ndarray, gt: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores)
    target = scores[np.arange(len(gt)), gt][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    better = (scores > target).sum(axis=1)
    tied_before = ((scores == target) & (idx < gt[:, None])).sum(axis=1)
    return 1 + better + tied_before


def retrieval_metrics(sim: SimilarityMatrix, ks=(1, 5, 10)) -> MetricsReport:
    ranks = ground_truth_ranks(sim.values.data, sim.gt())
    return MetricsReport(
        r_at={k: 100.0 * float(np.mean(ranks <= k)) for k in ks},
        median_rank=float(np.median(ranks)),
    )


def topk_accuracy(logits, labels, k: int) -> float:
    scores = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    if k > scores.shape[1]:
        raise ValueError(f"k={k} exceeds class count {scores.shape[1]}")
    ranks = ground_truth_ranks(scores, np.asarray(labels, dtype=np.int64))
    return 100.0 * float(np.mean(ranks <= k))


def alignment_diagnostics(sim: SimilarityMatrix) -> tuple[float, float]:
    """Mean positive similarity and mean (positive - mean negative) margin."""
    s = sim.values.data
    if s.shape[1] < 2:
        raise ValueError("margin undefined with a single candidate")
    gt = sim.gt()
    pos = s[np.arange(len(gt)), gt]
    neg_mean = (s.sum(axis=1) - pos) / (s.shape[1] - 1)
    return float(pos.mean()), float((pos - neg_mean).mean())
