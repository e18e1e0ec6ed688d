"""Metrics and the patient-level cross-validation harness.

Rank-based metrics only: the ROC area is the pairwise concordance
probability with ties counted half, the precision-recall area uses step
interpolation over ranked thresholds, recall@k is plain set intersection
over a ranking, and top-1 is exact-match accuracy. The harness deals
patients into disjoint folds, retrains every upstream model on each train
split, fits task heads per ablation variant on the frozen vectors, and
aggregates fold values as mean and sample standard deviation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from .cohort import (
    TASK_CODES,
    TASK_LOS,
    TASKS,
    Cohort,
    CodeVocabulary,
    DemographicsCodec,
    build_vocabulary,
    encode_visit_codes,
    extract_labels,
    patient_kfold_split,
)
from .code_embedder import (
    CodeEmbedderConfig,
    predict_next_codes,
    train_code_embedder,
)
from .errors import ValidationError
from .numerics import derive_seed
from .patient_rep import RepresentationPipeline, join_representations, zero_segments
from .tasks import TaskHeadConfig, balance_for_los, predict, train_task
from .text_embedder import SummarizerConfig, train_summarizer

ABLATION_VARIANTS = {
    "full": ("code", "text", "demo"),
    "code": ("code",),
    "text": ("text",),
    "demo": ("demo",),
    "code+text": ("code", "text"),
    "code+demo": ("code", "demo"),
    "text+demo": ("text", "demo"),
}


# -- metrics -----------------------------------------------------------------------


def recall_at_k(ranked, truth, k: int) -> float:
    """|top-k of the ranking ∩ truth| / |truth|; k clamps to the ranking."""
    if k < 1:
        raise ValidationError(f"recall_at_k: k must be >= 1, got {k}")
    truth = set(truth)
    if not truth:
        raise ValidationError("recall_at_k: empty truth set")
    top = set(list(ranked)[:k])
    return len(top & truth) / len(truth)


def mean_recall_at_k(rankings, truths, k: int):
    """Average recall@k over samples; empty-truth samples are skipped.

    Returns (mean, n_skipped); errors if every sample was skipped.
    """
    values, skipped = [], 0
    for ranked, truth in zip(rankings, truths):
        if not set(truth):
            skipped += 1
            continue
        values.append(recall_at_k(ranked, truth, k))
    if not values:
        raise ValidationError("mean_recall_at_k: every sample had an empty truth set")
    return float(np.mean(values)), skipped


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1])) + 1
    return (starts + (counts - 1) / 2.0)[inverse]


def auc_roc(scores, labels) -> float:
    """Probability a positive outranks a negative, ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError(
            f"auc_roc: scores {scores.shape} and labels {labels.shape} must be equal-length vectors"
        )
    pos = labels == 1.0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("auc_roc: both classes must be present")
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Step-interpolated area under precision-recall, thresholds at distinct scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError(
            f"pr_auc: scores {scores.shape} and labels {labels.shape} must be equal-length vectors"
        )
    n_pos = int((labels == 1.0).sum())
    if n_pos == 0:
        raise ValidationError("pr_auc: no positive labels")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    area, tp, fp, prev_recall = 0.0, 0, 0, 0.0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i : j + 1].sum())
        fp += (j - i + 1) - int(y[i : j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(area)


def top1_accuracy(pred_classes, true_classes) -> float:
    pred = np.asarray(pred_classes)
    true = np.asarray(true_classes)
    if pred.shape != true.shape:
        raise ValidationError(
            f"top1_accuracy: {pred.shape} predictions vs {true.shape} labels"
        )
    return float(np.mean(pred == true))


@dataclass
class MetricReport:
    name: str
    folds: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.folds))

    @property
    def std(self) -> float:
        if len(self.folds) < 2:
            return 0.0
        return float(np.std(self.folds, ddof=1))

    def to_json(self) -> dict:
        return {"folds": [float(v) for v in self.folds], "mean": self.mean, "std": self.std}


def write_report_json(path, reports: dict) -> None:
    payload = {name: rep.to_json() for name, rep in reports.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_report_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return {name: MetricReport(name, obj["folds"]) for name, obj in sorted(payload.items())}


def write_report_csv(path, reports: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "fold", "value"])
        for name in sorted(reports):
            rep = reports[name]
            for i, v in enumerate(rep.folds):
                writer.writerow([name, str(i), repr(float(v))])
            writer.writerow([name, "mean", repr(rep.mean)])
            writer.writerow([name, "std", repr(rep.std)])


# -- baselines ---------------------------------------------------------------------


def frequency_baseline(cohort: Cohort, vocab: CodeVocabulary) -> np.ndarray:
    """Codes ranked by training frequency, ties broken by vocabulary index."""
    counts = np.zeros(len(vocab))
    for record in cohort.patients:
        for visit in record.visits:
            counts += encode_visit_codes(visit, vocab)
    return np.lexsort((np.arange(len(vocab)), -counts))


# -- cross-validation harness ------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    folds: int = 7
    recall_ks: tuple = (10, 20, 30)
    seed: int = 0

    def validate(self):
        if self.folds < 2:
            raise ValidationError(f"eval: folds must be >= 2, got {self.folds}")
        if not self.recall_ks or any(k < 1 for k in self.recall_ks):
            raise ValidationError(f"eval: recall_ks must be positive, got {self.recall_ks}")

    def to_json(self) -> dict:
        return {"folds": self.folds, "recall_ks": list(self.recall_ks), "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "EvalConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"eval config: unknown keys {sorted(unknown)}")
        obj = dict(obj)
        if "recall_ks" in obj:
            obj["recall_ks"] = tuple(obj["recall_ks"])
        cfg = cls(**obj)
        cfg.validate()
        return cfg


def _complement(cohort: Cohort, held_out_ids) -> Cohort:
    held = set(held_out_ids)
    return cohort.subset([pid for pid in cohort.patient_ids() if pid not in held])


def next_code_recall(model, cohort: Cohort, vocab: CodeVocabulary, ks, ranking=None):
    """recall@k per system for next-visit codes; returns ({(sys, k): mean}, skipped).

    With `ranking` given (a precomputed code ordering, e.g. the frequency
    baseline), that fixed ranking is scored instead of the model's.
    """
    per_system_values = {}
    skipped = 0
    systems = sorted({e.system for e in vocab.entries})
    sys_idx = {s: vocab.system_indices(s) for s in systems}
    fixed = None
    if ranking is not None:
        members = {s: set(idx.tolist()) for s, idx in sys_idx.items()}
        fixed = {
            s: [int(c) for c in ranking if int(c) in members[s]] for s in systems
        }
    for record in cohort.patients:
        if len(record.visits) < 2:
            continue
        matrix = np.stack([encode_visit_codes(v, vocab) for v in record.visits])
        for t in range(len(record.visits) - 1):
            truth_vec = matrix[t + 1]
            for system in systems:
                idx = sys_idx[system]
                truth = set(idx[truth_vec[idx] > 0].tolist())
                if not truth:
                    skipped += 1
                    continue
                if fixed is not None:
                    ranked = fixed[system]
                else:
                    ranked = predict_next_codes(
                        model, matrix[: t + 1], system_indices=idx
                    ).tolist()
                for k in ks:
                    per_system_values.setdefault((system, k), []).append(
                        recall_at_k(ranked, truth, k)
                    )
    if not per_system_values:
        raise ValidationError("next_code_recall: no patient had a scorable next visit")
    means = {key: float(np.mean(vals)) for key, vals in per_system_values.items()}
    return means, skipped


def next_code_report(code_model, train_cohort, test_cohort, vocab, ks) -> dict:
    """Per-system recall@k for the model and the frequency baseline,
    keyed the way reports name them."""
    out = {}
    means, skipped = next_code_recall(code_model, test_cohort, vocab, ks)
    for (system, k), value in sorted(means.items()):
        out[f"{system}_recall@{k}"] = value
    baseline = frequency_baseline(train_cohort, vocab)
    base_means, _ = next_code_recall(None, test_cohort, vocab, ks, ranking=baseline)
    for (system, k), value in sorted(base_means.items()):
        out[f"{system}_freq_recall@{k}"] = value
    out["skipped_empty_truth"] = float(skipped)
    return out


def crossval(
    cohort: Cohort,
    task: str,
    code_config: CodeEmbedderConfig = None,
    summarizer_config: SummarizerConfig = None,
    head_config: TaskHeadConfig = None,
    eval_config: EvalConfig = None,
    ablations=("full",),
    shuffle_labels: bool = False,
    exclude_codes=None,
) -> dict:
    """Patient-level k-fold evaluation; returns {metric name: MetricReport}.

    Upstream models are retrained per fold on the train patients only and
    shared across ablation variants; only the head is refit per variant.
    Fold failures carry the fold index.
    """
    if task not in TASKS:
        raise ValidationError(f"crossval: unknown task {task!r}, expected one of {TASKS}")
    code_config = code_config or CodeEmbedderConfig()
    summarizer_config = summarizer_config or SummarizerConfig()
    head_config = head_config or TaskHeadConfig()
    eval_config = eval_config or EvalConfig()
    eval_config.validate()
    for name in ablations:
        if name not in ABLATION_VARIANTS:
            raise ValidationError(
                f"crossval: unknown ablation {name!r}, expected from {sorted(ABLATION_VARIANTS)}"
            )

    folds = patient_kfold_split(cohort, eval_config.folds, eval_config.seed)
    values: dict = {}
    for i, held_out in enumerate(folds):
        try:
            fold_values = _run_fold(
                cohort,
                task,
                held_out,
                i,
                code_config,
                summarizer_config,
                head_config,
                eval_config,
                ablations,
                shuffle_labels,
                exclude_codes,
            )
        except Exception as exc:
            raise RuntimeError(f"crossval: fold {i} failed: {exc}") from exc
        for name, value in fold_values.items():
            values.setdefault(name, []).append(value)
    return {name: MetricReport(name, vals) for name, vals in values.items()}


def _run_fold(
    cohort,
    task,
    held_out,
    fold_index,
    code_config,
    summarizer_config,
    head_config,
    eval_config,
    ablations,
    shuffle_labels,
    exclude_codes,
):
    train_cohort = _complement(cohort, held_out)
    test_cohort = cohort.subset(held_out)
    overlap = set(train_cohort.patient_ids()) & set(test_cohort.patient_ids())
    assert not overlap, f"patient leakage across folds: {sorted(overlap)[:5]}"

    vocab = build_vocabulary(train_cohort)
    code_cfg = replace(code_config, seed=derive_seed(eval_config.seed, f"code:{fold_index}"))
    code_model, _ = train_code_embedder(train_cohort, vocab, code_cfg)

    if task == TASK_CODES:
        return next_code_report(
            code_model, train_cohort, test_cohort, vocab, eval_config.recall_ks
        )

    summ_cfg = replace(
        summarizer_config, seed=derive_seed(eval_config.seed, f"text:{fold_index}")
    )
    encoder, summarizer, _ = train_summarizer(train_cohort, summ_cfg)
    codec = DemographicsCodec.from_cohort(train_cohort)
    pipeline = RepresentationPipeline(code_model, encoder, summarizer, codec, vocab)

    label_kw = {"exclude_codes": exclude_codes} if exclude_codes else {}
    reps_train = pipeline.represent_cohort(train_cohort, task)
    reps_test = pipeline.represent_cohort(test_cohort, task)
    X_train, y_train, _ = join_representations(
        reps_train, extract_labels(train_cohort, task, **label_kw)
    )
    X_test, y_test, _ = join_representations(
        reps_test, extract_labels(test_cohort, task, **label_kw)
    )

    if shuffle_labels:
        # Permutation null: destroy the label-feature pairing in both splits
        # so the whole pipeline is scored against exchangeable labels.
        shuffle_rng = np.random.default_rng(
            derive_seed(eval_config.seed, f"shuffle:{fold_index}")
        )
        y_train = y_train[shuffle_rng.permutation(len(y_train))]
        y_test = y_test[shuffle_rng.permutation(len(y_test))]

    if task == TASK_LOS:
        (X_train, y_train), (X_test, y_test) = balance_for_los(
            (X_train, y_train),
            (X_test, y_test),
            seed=derive_seed(eval_config.seed, f"balance:{fold_index}"),
        )

    out = {}
    for variant in ablations:
        keep = ABLATION_VARIANTS[variant]
        Xtr = zero_segments(X_train, pipeline.space, keep)
        Xte = zero_segments(X_test, pipeline.space, keep)
        head_cfg = replace(
            head_config, seed=derive_seed(eval_config.seed, f"head:{variant}:{fold_index}")
        )
        model, _ = train_task(Xtr, y_train, task, head_cfg)
        suffix = "" if variant == "full" else f"[{variant}]"
        if task == TASK_LOS:
            top1 = predict(model, Xte).argmax(axis=1) + 1
            out[f"top1{suffix}"] = top1_accuracy(top1, y_test.astype(int))
        else:
            scores = predict(model, Xte)
            out[f"auroc{suffix}"] = auc_roc(scores, y_test)
            out[f"auprc{suffix}"] = pr_auc(scores, y_test)
    return out
