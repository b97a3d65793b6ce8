"""Optimizer, training and evaluation loops, experiment suites, CSV reports."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig
from .encoders import pad_captions, text_encode_batch
from .model import FeatureCache, StanModel, build_model, encode_videos, extract_features, video_embedding
from .numerics import ShapeError, Tensor, backward, no_grad, rng_stream
from .objectives import (
    MetricsReport,
    SimilarityMatrix,
    UsageError,
    alignment_diagnostics,
    cosine_sim_matrix,
    cross_entropy,
    dsl_transform,
    nce_loss,
    retrieval_metrics,
    topk_accuracy,
)
from .synthdata import PAIRED_CLASSES, REVERSE_OF, SyntheticClip, generate_dataset, load_dataset, stack_frames

log = logging.getLogger(__name__)

EVAL_SPLIT = 1
_REVERSE = {**REVERSE_OF, **{v: k for k, v in REVERSE_OF.items()}}


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update with decoupled weight decay, in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and optimizer state differ in length")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} / moment {m.shape} vs parameter {p.shape}")
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_lr(step: int, total: int, base: float) -> float:
    if total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / (total - 1)))


# -- data -------------------------------------------------------------------

@dataclass
class TaskData:
    clips: list[SyntheticClip]
    feats: FeatureCache
    labels: np.ndarray
    ids: np.ndarray
    lengths: np.ndarray


def load_or_generate(run: RunConfig, split: int) -> list[SyntheticClip]:
    path = run.dataset if split == 0 else run.eval_dataset
    if path:
        clips = load_dataset(path)
    else:
        n = run.n_per_class if split == 0 else run.eval_per_class
        clips = generate_dataset(run.seed, n, run.model, split=split)
    T = clips[0].frames.shape[0]
    if T != run.model.T:
        raise ConfigError(f"dataset has T={T} frames per clip, config expects T={run.model.T}")
    return clips


def prepare(model: StanModel, clips: list[SyntheticClip]) -> TaskData:
    feats = extract_features(model, stack_frames(clips))
    ids, lengths = pad_captions([c.caption for c in clips], model.config)
    return TaskData(clips, feats, np.array([c.label for c in clips]), ids, lengths)


def _batches(data: TaskData, run: RunConfig, epoch: int) -> list[np.ndarray]:
    order = rng_stream(run.seed, "shuffle", epoch).permutation(len(data.clips))
    B = run.batch_size
    if run.task == "recognition":
        return [order[s : s + B] for s in range(0, len(order), B)]
    # Retrieval: at most one clip per (shape, color, motion) tuple in a batch.
    # A clip from a reverse-pair class pulls in a clip of its twin tuple, so
    # every batch holds negatives that differ from a positive only in order.
    by_tuple: dict[tuple, list[int]] = {}
    for i in order:
        by_tuple.setdefault(data.clips[i].attributes, []).append(int(i))
    used = np.zeros(len(order), dtype=bool)
    batches = []
    while not used.all():
        batch: list[int] = []
        seen: set[tuple] = set()
        for i in order:
            if len(batch) >= B:
                break
            key = data.clips[i].attributes
            if used[i] or key in seen:
                continue
            seen.add(key)
            batch.append(int(i))
            used[i] = True
            twin = (key[0], key[1], _REVERSE.get(key[2]))
            if twin[2] is None or twin in seen or len(batch) >= B:
                continue
            j = next((j for j in by_tuple.get(twin, ()) if not used[j]), None)
            if j is not None:
                seen.add(twin)
                batch.append(j)
                used[j] = True
        batches.append(np.array(batch))
    return batches


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    model: StanModel
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def task_loss(model: StanModel, data: TaskData, idx: np.ndarray, task: str, training: bool, rng) -> Tensor:
    levels, final = data.feats.batch(idx)
    v = video_embedding(model, levels, final, training, rng)
    if task == "recognition":
        return cross_entropy(v @ model.head.w + model.head.b, data.labels[idx])
    t = text_encode_batch(data.ids[idx], data.lengths[idx], model.text, model.config)
    return nce_loss(cosine_sim_matrix(v, t), model.config.nce_temperature)


def _snapshot(model: StanModel) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in model.state().items() if k.startswith("backbone.")}


def _assert_frozen(model: StanModel, snap: dict[str, np.ndarray]) -> None:
    for k, t in model.state().items():
        if k.startswith("backbone.") and not np.array_equal(t.data, snap[k]):
            raise RuntimeError(f"frozen backbone parameter {k} changed during training")


def train(run: RunConfig, data: TaskData | None = None, model: StanModel | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Fit branch, text encoder and head; the backbone never moves."""
    run.validate()
    start = time.perf_counter()
    model = model or build_model(run.model, run.seed)
    if data is None:
        data = prepare(model, load_or_generate(run, 0))
    if data.feats.final.shape[1] != run.model.T:
        raise ConfigError("dataset and config disagree on T")
    params = model.trainable(run.task)
    plist = list(params.values())
    state = AdamState.zeros_like(plist)
    snap = _snapshot(model)
    schedule = [_batches(data, run, epoch) for epoch in range(run.epochs)]
    total = sum(len(b) for b in schedule)
    if max_steps is not None:
        total = min(total, max_steps)
    drop_rng = rng_stream(run.seed, "dropout")
    losses: list[float] = []
    step = 0
    for epoch in range(run.epochs):
        for idx in schedule[epoch]:
            if step >= total:
                break
            for p in plist:
                p.grad = None
            loss = task_loss(model, data, idx, run.task, True, drop_rng)
            backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in plist]
            adamw_step(plist, grads, state, cosine_lr(step, total, run.lr_branch), run.betas, run.adam_eps,
                       run.weight_decay)
            losses.append(loss.item())
            step += 1
        _assert_frozen(model, snap)
        log.info("epoch %d loss %.4f", epoch, losses[-1] if losses else float("nan"))
    return TrainResult(model, losses, time.perf_counter() - start)


# -- evaluation -------------------------------------------------------------

def _unique_tuples(data: TaskData) -> np.ndarray:
    seen, keep = set(), []
    for i, c in enumerate(data.clips):
        if c.attributes not in seen:
            seen.add(c.attributes)
            keep.append(i)
    return np.array(keep)


def evaluate_embeddings(video: np.ndarray, text: np.ndarray | None, labels, task: str, use_dsl: bool,
                        dsl_temperature: float = 1.0, logits: np.ndarray | None = None) -> MetricsReport:
    if task == "recognition":
        if use_dsl:
            raise UsageError("DSL only applies to retrieval")
        labels = np.asarray(labels)
        paired = np.isin(labels, list(PAIRED_CLASSES))
        report = MetricsReport(top1=topk_accuracy(logits, labels, 1), top5=topk_accuracy(logits, labels, 5))
        report.extra["pair_top1"] = topk_accuracy(logits[paired], labels[paired], 1) if paired.any() else float("nan")
        return report
    v2t = cosine_sim_matrix(Tensor(video), Tensor(text))
    t2v = v2t.transposed()
    pos, margin = alignment_diagnostics(t2v)
    if use_dsl:
        v2t, t2v = dsl_transform(v2t, dsl_temperature), dsl_transform(t2v, dsl_temperature)
    report = MetricsReport(avg_pos_sim=pos, avg_margin=margin)
    for name, sim in (("t2v", t2v), ("v2t", v2t)):
        for k, value in retrieval_metrics(sim).flat(name + "_").items():
            report.extra[k] = value
    report.r_at = {k: report.extra[f"t2v_r{k}"] for k in (1, 5, 10)}
    report.median_rank = report.extra["t2v_mdr"]
    return report


def evaluate(model: StanModel, data: TaskData, task: str, use_dsl: bool = False) -> MetricsReport:
    if use_dsl and task != "retrieval":
        raise UsageError("DSL only applies to retrieval")
    if task == "recognition":
        video = encode_videos(model, data.feats)
        logits = video @ model.head.w.data + model.head.b.data
        return evaluate_embeddings(video, None, data.labels, task, False, logits=logits)
    keep = _unique_tuples(data)
    sub = FeatureCache(data.feats.levels[keep], data.feats.final[keep], data.feats.level_index)
    video = encode_videos(model, sub)
    with no_grad():
        text = text_encode_batch(data.ids[keep], data.lengths[keep], model.text, model.config).data
    return evaluate_embeddings(video, text, None, task, use_dsl, model.config.dsl_temperature)


# -- experiment suites ------------------------------------------------------

ABLATION_ROWS = (
    # label, cross, intra, branch, multilevel
    ("baseline", False, False, False, False),
    ("posterior", True, True, False, False),
    ("branch_single_level", True, True, True, False),
    ("no_cross_frame", False, True, True, True),
    ("no_intra_frame", True, False, True, True),
    ("full", True, True, True, True),
)
SUITES = ("ablation", "level_sweep", "layer_sweep")
# headline metric per task, used to rank suite rows
EXPERIMENT_METRIC = {"recognition": "top1", "retrieval": "r1"}
LAYER_COUNTS = (1, 2, 4, 6, 8)


@dataclass
class ExperimentRow:
    variant: str
    switches: dict[str, bool]
    task: str
    metrics: dict[str, float]
    seconds: float
    losses: list[float] = field(default_factory=list, repr=False)


def suite_configs(base: RunConfig, suite: str) -> list[tuple[str, RunConfig]]:
    m = base.model
    if suite == "ablation":
        return [
            (label, base.replace(use_cross_frame=c, use_intra_frame=i, use_branch=b, use_multilevel=ml))
            for label, c, i, b, ml in ABLATION_ROWS
        ]
    if suite == "level_sweep":
        rows = [
            (f"interval={iv}", base.replace(level_interval=iv, level_range_end=m.depth)) for iv in (3, 2, 1)
        ]
        ends = sorted({m.K, m.K + (m.depth - m.K) // 2, m.depth})
        for end in ends:
            rows.append((f"range={end - m.K + 1}-{end}", base.replace(level_interval=1, level_range_end=end)))
        for _, cfg in rows:
            cfg.model.validate()
        return rows
    if suite == "layer_sweep":
        return [
            (f"layers={k}", base.replace(K=k, level_interval=1, level_range_end=m.depth))
            for k in LAYER_COUNTS
            if k <= m.depth
        ]
    raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")


def run_single(run: RunConfig, train_clips=None, eval_clips=None) -> tuple[TrainResult, MetricsReport]:
    run.validate()
    model = build_model(run.model, run.seed)
    train_clips = train_clips if train_clips is not None else load_or_generate(run, 0)
    eval_clips = eval_clips if eval_clips is not None else load_or_generate(run, EVAL_SPLIT)
    result = train(run, prepare(model, train_clips), model)
    return result, evaluate(result.model, prepare(model, eval_clips), run.task, run.use_dsl)


def run_experiment_suite(base: RunConfig, suite: str, timing: bool = True) -> list[ExperimentRow]:
    configs = suite_configs(base, suite)
    train_clips = load_or_generate(base, 0)
    eval_clips = load_or_generate(base, EVAL_SPLIT)
    rows = []
    for label, run in configs:
        start = time.perf_counter()
        result, report = run_single(run, train_clips, eval_clips)
        m = run.model
        rows.append(
            ExperimentRow(
                variant=label,
                switches={
                    "cross": m.use_cross_frame,
                    "intra": m.use_intra_frame,
                    "branch": m.use_branch,
                    "multilevel": m.use_multilevel,
                },
                task=run.task,
                metrics=report.flat(),
                seconds=time.perf_counter() - start if timing else 0.0,
                losses=result.losses,
            )
        )
        log.info("%s %s %s", suite, label, report.flat())
    return rows


# -- reports ----------------------------------------------------------------

REPORT_HEADER = ("variant", "cross", "intra", "branch", "multilevel", "task", "metric", "value", "seconds")


def format_report(rows: Sequence[ExperimentRow]) -> str:
    if not rows:
        raise ValueError("no rows to report")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for row in sorted(rows, key=lambda r: r.variant):
        sw = [int(row.switches[k]) for k in ("cross", "intra", "branch", "multilevel")]
        for metric in sorted(row.metrics):
            w.writerow([row.variant, *sw, row.task, metric, f"{row.metrics[metric]:.4f}", f"{row.seconds:.4f}"])
    return buf.getvalue()


def emit_report(rows: Sequence[ExperimentRow], path) -> Path:
    path = Path(path)
    text = format_report(rows)
    path.write_bytes(text.encode("utf-8"))
    return path


def read_report(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
