"""Measurement machinery: weighted metrics, agreement, significance, MMD.

Everything here is pure; folds of ``cross_validate`` derive their seed as
``seed + fold_index`` so serial and parallel execution agree exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .corpus import Dataset, merge_domains, stratified_kfold
from .predictions import Prediction


class EvaluationError(Exception):
    pass


class LengthMismatch(EvaluationError):
    pass


class EmptyInput(EvaluationError):
    pass


class TooFewSamples(EvaluationError):
    pass


class DimensionMismatch(EvaluationError):
    pass


class IdMismatch(EvaluationError):
    pass


@dataclass(frozen=True)
class WeightedScores:
    precision: float
    recall: float
    f1: float


@dataclass
class EvalReport:
    method: str
    train_domains: tuple[str, ...]
    test_domains: tuple[str, ...]
    per_fold: list[WeightedScores] = field(default_factory=list)
    predictions: list[Prediction] = field(default_factory=list)  # one per target post

    def _column(self, name: str) -> list[float]:
        return [getattr(s, name) for s in self.per_fold]

    def mean(self, name: str) -> float:
        return float(np.mean(self._column(name)))

    def std(self, name: str) -> float:
        # population std over the k fold values, matching "mean +- std" reporting
        return float(np.std(self._column(name)))


@dataclass(frozen=True)
class SignificanceResult:
    statistic: float
    p_value: float
    alpha_adjusted: float
    reject: bool
    method: str  # "mcnemar_exact" | "mcnemar_chi2"
    b: int
    c: int


@dataclass(frozen=True)
class BonferroniResult:
    alpha_adjusted: float
    reject: tuple[bool, ...]


@dataclass(frozen=True)
class MmdResult:
    value: float
    kernel: str
    bandwidth: float
    n_x: int
    n_y: int
    unbiased: bool


def weighted_metrics(
    y_true: Sequence[int], y_pred: Sequence[int]
) -> WeightedScores:
    """Support-weighted precision/recall/F1.

    Classes absent from ``y_true`` carry zero weight; a per-class precision,
    recall or F1 with a zero denominator is set to 0.
    """
    if len(y_true) != len(y_pred):
        raise LengthMismatch(f"{len(y_true)} labels vs {len(y_pred)} predictions")
    if not y_true:
        raise EmptyInput("no labels")
    n = len(y_true)
    precision = recall = f1 = 0.0
    for cls in sorted(set(y_true)):
        support = sum(1 for t in y_true if t == cls)
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == cls and p == cls)
        pred_pos = sum(1 for p in y_pred if p == cls)
        p_cls = tp / pred_pos if pred_pos else 0.0
        r_cls = tp / support
        f_cls = 2 * p_cls * r_cls / (p_cls + r_cls) if p_cls + r_cls else 0.0
        w = support / n
        precision += w * p_cls
        recall += w * r_cls
        f1 += w * f_cls
    return WeightedScores(precision=precision, recall=recall, f1=f1)


def cohen_kappa(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """Chance-corrected agreement between two annotators."""
    if len(labels_a) != len(labels_b):
        raise LengthMismatch(f"{len(labels_a)} vs {len(labels_b)}")
    if not labels_a:
        raise EmptyInput("no labels")
    n = len(labels_a)
    p_o = sum(1 for a, b in zip(labels_a, labels_b) if a == b) / n
    classes = set(labels_a) | set(labels_b)
    p_e = sum(
        (sum(1 for a in labels_a if a == c) / n) * (sum(1 for b in labels_b if b == c) / n)
        for c in classes
    )
    if p_e == 1.0:
        # both raters constant and identical: total agreement
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def mcnemar(
    preds_a: Sequence[int],
    preds_b: Sequence[int],
    y_true: Sequence[int],
    alpha: float = 0.05,
) -> SignificanceResult:
    """McNemar's test on the discordant predictions of two classifiers.

    Exact two-sided binomial when b + c < 25, otherwise chi-square with
    continuity correction ((|b-c|-1)^2 / (b+c)).
    """
    if not (len(preds_a) == len(preds_b) == len(y_true)):
        raise LengthMismatch(
            f"lengths {len(preds_a)}, {len(preds_b)}, {len(y_true)} differ"
        )
    b = sum(1 for pa, pb, t in zip(preds_a, preds_b, y_true) if pa == t and pb != t)
    c = sum(1 for pa, pb, t in zip(preds_a, preds_b, y_true) if pa != t and pb == t)
    n = b + c
    if n == 0:
        statistic, p, method = 0.0, 1.0, "mcnemar_exact"
    elif n < 25:
        statistic = float(min(b, c))
        p = min(1.0, 2.0 * float(stats.binom.cdf(min(b, c), n, 0.5)))
        method = "mcnemar_exact"
    else:
        statistic = (abs(b - c) - 1) ** 2 / n
        p = float(stats.chi2.sf(statistic, df=1))
        method = "mcnemar_chi2"
    p = min(max(p, 0.0), 1.0)
    return SignificanceResult(
        statistic=statistic,
        p_value=p,
        alpha_adjusted=alpha,
        reject=p < alpha,
        method=method,
        b=b,
        c=c,
    )


def bonferroni(p_values: Sequence[float], alpha: float = 0.05) -> BonferroniResult:
    """Family-wise correction: alpha' = alpha / k, reject iff p < alpha'."""
    if not p_values:
        raise EmptyInput("no p-values")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    adjusted = alpha / len(p_values)
    return BonferroniResult(
        alpha_adjusted=adjusted, reject=tuple(p < adjusted for p in p_values)
    )


def _rbf_kernel(sq_dists: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-sq_dists / (2.0 * bandwidth**2))


def _median_bandwidth(pooled: np.ndarray) -> float:
    diffs = pooled[:, None, :] - pooled[None, :, :]
    sq = np.sum(diffs * diffs, axis=-1)
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(np.sqrt(sq[iu])))
    return med if med > 0 else 1.0


def mmd(
    X: np.ndarray,
    Y: np.ndarray,
    bandwidth: Optional[float] = None,
    unbiased: bool = True,
) -> MmdResult:
    """MMD^2 between two embedding samples under an RBF kernel.

    Bandwidth defaults to the median pairwise distance over the pooled sample
    (median heuristic). The unbiased estimator can dip slightly below zero;
    the biased one is always >= 0. Exactly symmetric in its inputs.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[1] != Y.shape[1]:
        raise DimensionMismatch(f"dim {X.shape[1]} vs {Y.shape[1]}")
    if len(X) < 2 or len(Y) < 2:
        raise TooFewSamples(f"need >= 2 samples per side, got {len(X)}, {len(Y)}")

    # canonical argument order makes mmd(X, Y) == mmd(Y, X) bit-exact
    swapped = (len(Y), Y.tobytes()) < (len(X), X.tobytes())
    if swapped:
        X, Y = Y, X

    m, n = len(X), len(Y)
    pooled = np.concatenate([X, Y], axis=0)
    bw = float(bandwidth) if bandwidth is not None else _median_bandwidth(pooled)

    def sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
        d = A[:, None, :] - B[None, :, :]
        return np.sum(d * d, axis=-1)

    k_xx = _rbf_kernel(sq_dists(X, X), bw)
    k_yy = _rbf_kernel(sq_dists(Y, Y), bw)
    k_xy = _rbf_kernel(sq_dists(X, Y), bw)

    if unbiased:
        xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
        yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    else:
        xx = k_xx.sum() / (m * m)
        yy = k_yy.sum() / (n * n)
    xy = k_xy.sum() / (m * n)
    value = float(xx + yy - 2.0 * xy)

    return MmdResult(
        value=value,
        kernel="rbf",
        bandwidth=bw,
        n_x=n if swapped else m,
        n_y=m if swapped else n,
        unbiased=unbiased,
    )


# A trainer takes a training dataset and a fold seed and returns a predictor
# mapping an evaluation dataset to one Prediction per post, in order.
Trainer = Callable[[Dataset, int], Callable[[Dataset], list[Prediction]]]


@dataclass(frozen=True)
class MethodSpec:
    name: str
    trainer: Trainer
    uses_target_data: bool = True


def cross_validate(
    method: MethodSpec,
    train_source: Optional[Dataset],
    test_target: Dataset,
    k: int,
    seed: int,
) -> EvalReport:
    """k-fold evaluation on the target: train per fold, score on the held-out fold.

    When ``method.uses_target_data`` the training set is the union of the
    source data and the target training fold; otherwise the source alone.
    The report also carries the held-out predictions, one per target post.
    """
    folds = stratified_kfold(test_target, k, seed)
    train_domains: set[str] = set()
    if train_source is not None:
        train_domains |= {d.value for d in train_source.domain_tags}
    if method.uses_target_data:
        train_domains |= {d.value for d in test_target.domain_tags}
    report = EvalReport(
        method=method.name,
        train_domains=tuple(sorted(train_domains)),
        test_domains=tuple(sorted(d.value for d in test_target.domain_tags)),
    )
    held_out: dict[str, Prediction] = {}
    for fold in folds:
        fold_seed = seed + fold.fold_index
        if method.uses_target_data:
            target_train = test_target.subset(fold.train_ids)
            if train_source is not None and len(train_source):
                train_data = merge_domains(train_source, target_train)
            else:
                train_data = target_train
        else:
            train_data = train_source if train_source is not None else Dataset([])
        predict = method.trainer(train_data, fold_seed)
        test_data = test_target.subset(fold.test_ids)
        preds = predict(test_data)
        pred_map = {p.post_id: p.label for p in preds}
        # align on predicted ids; posts a method skipped are not scored
        y_true = [p.label for p in test_data.posts if p.id in pred_map]
        y_pred = [pred_map[p.id] for p in test_data.posts if p.id in pred_map]
        report.per_fold.append(weighted_metrics(y_true, y_pred))
        for p in preds:
            held_out[p.post_id] = p
    report.predictions = [held_out[p.id] for p in test_target.posts if p.id in held_out]
    return report


@dataclass(frozen=True)
class AgreementReport:
    """Prediction split and (dis)agreement breakdown against gold labels."""

    n: int
    predicted_negative: int
    predicted_positive: int
    agree: int
    agree_true_positive: int
    agree_true_negative: int
    disagree: int
    false_negatives: int
    false_positives: int
    disagree_confusing: int
    disagree_not_confusing: int

    def fraction(self, count: int, total: int) -> float:
        return count / total if total else 0.0


def agreement_analysis(
    preds: Sequence[int],
    gold: Sequence[int],
    confusing_flags: Sequence[bool],
) -> AgreementReport:
    if not (len(preds) == len(gold) == len(confusing_flags)):
        raise LengthMismatch(
            f"lengths {len(preds)}, {len(gold)}, {len(confusing_flags)} differ"
        )
    n = len(preds)
    agree_tp = sum(1 for p, g in zip(preds, gold) if p == 1 and g == 1)
    agree_tn = sum(1 for p, g in zip(preds, gold) if p == 0 and g == 0)
    fn = sum(1 for p, g in zip(preds, gold) if p == 0 and g == 1)
    fp = sum(1 for p, g in zip(preds, gold) if p == 1 and g == 0)
    dis_confusing = sum(
        1 for p, g, c in zip(preds, gold, confusing_flags) if p != g and c
    )
    return AgreementReport(
        n=n,
        predicted_negative=sum(1 for p in preds if p == 0),
        predicted_positive=sum(1 for p in preds if p == 1),
        agree=agree_tp + agree_tn,
        agree_true_positive=agree_tp,
        agree_true_negative=agree_tn,
        disagree=fn + fp,
        false_negatives=fn,
        false_positives=fp,
        disagree_confusing=dis_confusing,
        disagree_not_confusing=(fn + fp) - dis_confusing,
    )


def export_embeddings(
    model, dataset: Dataset, path: str | Path, projection=None
) -> None:
    """One JSONL record per post: id, domain, label, embedding vector.

    Deterministic for a frozen model, so re-exports are byte-identical. The
    output suits any external 2-D projector. By default the raw encoder
    output is exported; pass a ``projection`` callable (such as a trained
    down-projection) to export projected embeddings instead.
    """
    embeddings = model.encode([p.text for p in dataset.posts])
    if projection is not None:
        embeddings = projection(embeddings)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    with Path(path).open("w", encoding="utf-8") as f:
        for post, vec in zip(dataset.posts, embeddings):
            rec = {
                "id": post.id,
                "domain": post.domain.value,
                "label": post.label,
                "embedding": [float(v) for v in vec],
            }
            f.write(json.dumps(rec) + "\n")


def load_embeddings(path: str | Path) -> list[dict]:
    out = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


REPORT_COLUMNS = [
    "method",
    "train_set",
    "test_set",
    "precision_mean",
    "precision_std",
    "recall_mean",
    "recall_std",
    "f1_mean",
    "f1_std",
]


def write_report_csv(reports: Sequence[EvalReport], path: str | Path) -> None:
    """One CSV row per method: mean and std for each weighted metric."""
    with Path(path).open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow(
                [
                    r.method,
                    "+".join(r.train_domains),
                    "+".join(r.test_domains),
                    repr(r.mean("precision")),
                    repr(r.std("precision")),
                    repr(r.mean("recall")),
                    repr(r.std("recall")),
                    repr(r.mean("f1")),
                    repr(r.std("f1")),
                ]
            )
