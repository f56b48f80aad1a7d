"""Training harness: Adam, balanced batches, stratified patient-level
cross-validation, and multi-trial MAE reporting.

The reporting format mirrors the usual CV table: per GA month and overall,
the 2.5th / 50th / 97.5th percentile of MAE across trials.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .clstm import (
    ModelState,
    NetworkConfig,
    init_model,
    loss_and_gradients,
    named_parameters,
    network_forward,
    shape_input,
)
from .errors import DivergenceError
from .tf_features import FeatureSequence, compute_normalization_stats, normalize_features

GA_MONTHS = (5, 6, 7, 8, 9)
DIVERGENCE_LIMIT = 1e6


@dataclass
class LabeledExample:
    patient_id: str
    visit_id: str
    recording_id: str
    sequence: FeatureSequence
    ga_months_lmp: int


@dataclass
class FoldAssignment:
    folds: list[list[str]]  # patient ids per fold

    def __post_init__(self):
        flat = [p for fold in self.folds for p in fold]
        if len(flat) != len(set(flat)):
            raise ValueError("folds are not disjoint")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrialReport:
    per_month: dict[int, tuple[float, float, float]]  # month -> (lci, median, uci)
    overall: tuple[float, float, float]
    trial_count: int
    fold_count: int
    seeds: list[int]
    per_trial_month: dict[int, list[float]] = field(default_factory=dict)
    per_trial_overall: list[float] = field(default_factory=list)
    failed_trials: list[int] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.failed_trials)


# ---------------------------------------------------------------------------
# Fold assignment


def _modal_month(examples: list[LabeledExample], patient_id: str) -> int:
    months = [e.ga_months_lmp for e in examples if e.patient_id == patient_id]
    counts = Counter(months)
    best = max(counts.values())
    return min(m for m, c in counts.items() if c == best)


def stratified_kfold(
    examples: list[LabeledExample], k: int = 5, seed: int = 0
) -> FoldAssignment:
    """Patient-level stratified split by modal GA month.

    Strata with fewer patients than folds are merged with the nearest
    month for splitting purposes. Deterministic given the seed.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    patients = sorted({e.patient_id for e in examples})
    if len(patients) < k:
        raise ValueError(f"{len(patients)} patients < {k} folds")
    month_of = {p: _modal_month(examples, p) for p in patients}

    strata: dict[int, list[str]] = defaultdict(list)
    for p in patients:
        strata[month_of[p]].append(p)

    # merge undersized strata into the nearest month (ties toward lower)
    while len(strata) > 1:
        small = [m for m, ps in strata.items() if len(ps) < k]
        if not small:
            break
        m = small[0]
        others = [x for x in strata if x != m]
        target = min(others, key=lambda x: (abs(x - m), x))
        strata[target] = sorted(strata[target] + strata.pop(m))

    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    offset = 0
    for month in sorted(strata):
        members = list(strata[month])
        rng.shuffle(members)
        for i, p in enumerate(members):
            folds[(i + offset) % k].append(p)
        offset = (offset + len(members)) % k
    return FoldAssignment(folds=[sorted(f) for f in folds])


def split_examples(
    examples: list[LabeledExample], assignment: FoldAssignment, fold: int
) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """(train, test) example lists for one held-out fold."""
    held = set(assignment.folds[fold])
    train = [e for e in examples if e.patient_id not in held]
    test = [e for e in examples if e.patient_id in held]
    return train, test


# ---------------------------------------------------------------------------
# Balanced batch generation


def balanced_batches(
    examples: list[LabeledExample], batch_size: int, rng: np.random.Generator
) -> list[list[LabeledExample]]:
    """One epoch of class-balanced batches.

    Every example of the largest class appears exactly once; smaller
    classes are oversampled with replacement up to the largest count, so
    the expected per-class share is uniform. Within a batch a patient
    appears at most once when the draw permits.
    """
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, e in enumerate(examples):
        by_class[e.ga_months_lmp].append(i)
    if not by_class:
        raise ValueError("no training examples")
    n_max = max(len(v) for v in by_class.values())

    pool: list[int] = []
    for month in sorted(by_class):
        idx = np.array(by_class[month])
        perm = idx[rng.permutation(len(idx))]
        extra = rng.choice(idx, size=n_max - len(idx), replace=True)
        pool.extend(np.concatenate([perm, extra]).tolist())
    order = rng.permutation(len(pool))
    pool = [pool[i] for i in order]

    n_batches = int(np.ceil(len(pool) / batch_size))
    batches: list[list[int]] = [[] for _ in range(n_batches)]
    patients: list[set[str]] = [set() for _ in range(n_batches)]
    leftovers: list[int] = []
    for i in pool:
        pid = examples[i].patient_id
        placed = False
        for b in range(n_batches):
            if len(batches[b]) < batch_size and pid not in patients[b]:
                batches[b].append(i)
                patients[b].add(pid)
                placed = True
                break
        if not placed:
            leftovers.append(i)
    for i in leftovers:
        for b in range(n_batches):
            if len(batches[b]) < batch_size:
                batches[b].append(i)
                break
    return [[examples[i] for i in batch] for batch in batches if batch]


# ---------------------------------------------------------------------------
# Optimizer


def init_optimizer(
    params: dict[str, np.ndarray], learning_rate: float = 1e-3
) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        learning_rate=learning_rate,
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: OptimizerState,
) -> None:
    """One bias-corrected Adam update, in place."""
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    bias1 = 1.0 - b1**opt.step
    bias2 = 1.0 - b2**opt.step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
        m = opt.m[name]
        v = opt.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p -= opt.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + opt.eps)


# ---------------------------------------------------------------------------
# Training and evaluation


def _prepare_tensors(
    examples: list[LabeledExample], state: ModelState
) -> np.ndarray:
    tensors = [
        shape_input(normalize_features(e.sequence, state.norm_stats), state.config)
        for e in examples
    ]
    return np.stack(tensors)


def train_model(
    train_examples: list[LabeledExample],
    val_examples: list[LabeledExample] | None,
    cfg: NetworkConfig,
    epochs: int = 300,
    batch_size: int = 32,
    rng: np.random.Generator | None = None,
) -> tuple[ModelState, list[float]]:
    """Train a fresh model on one fold; returns (model, per-epoch MAE).

    Normalization statistics are fitted on the training fold only. The
    output-layer bias starts at the mean training label so the head
    regresses residuals around the cohort mean. No early stopping; the
    final-epoch model is returned.
    """
    if not train_examples:
        raise ValueError("empty training set")
    rng = rng or np.random.default_rng(cfg.seed)

    stats = compute_normalization_stats([e.sequence for e in train_examples])
    state = init_model(cfg, norm_stats=stats)
    labels_all = np.array([e.ga_months_lmp for e in train_examples], dtype=np.float64)
    state.dense.biases[-1][0] = labels_all.mean()

    tensor_of = {
        id(e): t
        for e, t in zip(train_examples, _prepare_tensors(train_examples, state))
    }
    params = named_parameters(state)
    opt = init_optimizer(params)

    history: list[float] = []
    for _ in range(epochs):
        abs_err_sum = 0.0
        n_seen = 0
        for batch in balanced_batches(train_examples, batch_size, rng):
            if len(batch) < 2:
                continue  # batch norm needs >= 2
            x = np.stack([tensor_of[id(e)] for e in batch])
            y = np.array([e.ga_months_lmp for e in batch], dtype=np.float64)
            try:
                loss, pred, grads = loss_and_gradients(x, y, state, rng)
            except FloatingPointError as exc:
                raise DivergenceError(str(exc)) from exc
            if loss > DIVERGENCE_LIMIT:
                err = DivergenceError(f"loss diverged: {loss}")
                err.history = history
                raise err
            adam_step(params, grads, opt)
            abs_err_sum += float(np.sum(np.abs(pred - y)))
            n_seen += len(batch)
        history.append(abs_err_sum / max(n_seen, 1))
    return state, history


def predict(state: ModelState, examples: list[LabeledExample]) -> np.ndarray:
    """Per-recording GA estimates in months (inference mode)."""
    x = _prepare_tensors(examples, state)
    return network_forward(x, state, mode="infer")


def visit_errors(
    state: ModelState, examples: list[LabeledExample]
) -> list[tuple[int, float]]:
    """Per-visit (label, absolute error); recordings of a visit are averaged
    into one prediction before scoring."""
    preds = predict(state, examples)
    groups: dict[tuple[str, str], list[int]] = defaultdict(list)
    for i, e in enumerate(examples):
        groups[(e.patient_id, e.visit_id)].append(i)
    out = []
    for key in sorted(groups):
        idx = groups[key]
        pred = float(np.mean(preds[idx]))
        label = int(np.median([examples[i].ga_months_lmp for i in idx]))
        out.append((label, abs(pred - label)))
    return out


def evaluate(
    state: ModelState, examples: list[LabeledExample]
) -> tuple[dict[int, float], float]:
    """Per-month and overall MAE over per-visit predictions."""
    if not examples:
        raise ValueError("no examples to evaluate")
    errors = visit_errors(state, examples)
    by_month: dict[int, list[float]] = defaultdict(list)
    for month, err in errors:
        by_month[month].append(err)
    per_month = {m: float(np.mean(v)) for m, v in sorted(by_month.items())}
    overall = float(np.mean([err for _, err in errors]))
    return per_month, overall


# ---------------------------------------------------------------------------
# Multi-trial cross-validation


def _run_fold(args):
    examples, assignment, fold, cfg, epochs, batch_size, seed = args
    train, test = split_examples(examples, assignment, fold)
    fold_cfg = replace(cfg, seed=seed)
    state, _ = train_model(
        train, None, fold_cfg, epochs=epochs, batch_size=batch_size,
        rng=np.random.default_rng(seed),
    )
    return visit_errors(state, test)


def run_trials(
    examples: list[LabeledExample],
    cfg: NetworkConfig,
    n_trials: int = 50,
    k: int = 5,
    base_seed: int = 0,
    epochs: int = 300,
    batch_size: int = 32,
    n_jobs: int = 1,
) -> TrialReport:
    """Repeated stratified k-fold CV; percentile summary across trials.

    Each trial refolds with a fresh seed, trains one model per fold, and
    pools held-out per-visit errors. A trial that raises is recorded as
    failed and flags the report; remaining trials still run.
    """
    trial_seeds = [
        int(np.random.SeedSequence([base_seed, i]).generate_state(1)[0])
        for i in range(n_trials)
    ]
    per_trial_month: dict[int, list[float]] = defaultdict(list)
    per_trial_overall: list[float] = []
    failed: list[int] = []

    tasks = []
    for i, seed in enumerate(trial_seeds):
        assignment = stratified_kfold(examples, k=k, seed=seed)
        for fold in range(k):
            tasks.append(
                (i, (examples, assignment, fold, cfg, epochs, batch_size, seed + fold))
            )

    results: dict[int, list] = defaultdict(list)
    trial_failed: set[int] = set()
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [(i, pool.submit(_run_fold, t)) for i, t in tasks]
            for i, fut in futures:
                try:
                    results[i].append(fut.result())
                except Exception:
                    trial_failed.add(i)
    else:
        for i, t in tasks:
            if i in trial_failed:
                continue
            try:
                results[i].append(_run_fold(t))
            except Exception:
                trial_failed.add(i)

    for i in range(n_trials):
        if i in trial_failed:
            failed.append(i)
            continue
        errors = [pair for fold_errors in results[i] for pair in fold_errors]
        by_month: dict[int, list[float]] = defaultdict(list)
        for month, err in errors:
            by_month[month].append(err)
        for month, v in by_month.items():
            per_trial_month[month].append(float(np.mean(v)))
        per_trial_overall.append(float(np.mean([e for _, e in errors])))

    def ci(values: list[float]) -> tuple[float, float, float]:
        arr = np.asarray(values)
        lci, med, uci = np.percentile(arr, [2.5, 50.0, 97.5], method="linear")
        return float(lci), float(med), float(uci)

    if not per_trial_overall:
        raise DivergenceError("all trials failed")
    return TrialReport(
        per_month={m: ci(v) for m, v in sorted(per_trial_month.items())},
        overall=ci(per_trial_overall),
        trial_count=n_trials,
        fold_count=k,
        seeds=trial_seeds,
        per_trial_month={m: list(v) for m, v in sorted(per_trial_month.items())},
        per_trial_overall=per_trial_overall,
        failed_trials=failed,
    )


# ---------------------------------------------------------------------------
# Report serialization


def report_to_json(report: TrialReport) -> str:
    payload = {
        "per_month": {str(m): list(v) for m, v in report.per_month.items()},
        "overall": list(report.overall),
        "trial_count": report.trial_count,
        "fold_count": report.fold_count,
        "seeds": report.seeds,
        "per_trial_month": {
            str(m): v for m, v in report.per_trial_month.items()
        },
        "per_trial_overall": report.per_trial_overall,
        "failed_trials": report.failed_trials,
        "flagged": report.flagged,
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def report_to_text(report: TrialReport) -> str:
    """Aligned table: one (LCI, median, UCI) cell per GA month plus overall."""
    months = sorted(report.per_month)
    header = "GA (months)  " + "  ".join(f"{m:^20d}" for m in months) + "  " + f"{'All':^20}"
    cells = [
        "({:.2f}, {:.2f}, {:.2f})".format(*report.per_month[m]) for m in months
    ]
    cells.append("({:.2f}, {:.2f}, {:.2f})".format(*report.overall))
    row = "MAE          " + "  ".join(f"{c:^20}" for c in cells)
    lines = [header, row]
    lines.append(f"trials={report.trial_count} folds={report.fold_count}")
    if report.flagged:
        lines.append(f"FLAGGED: failed trials {report.failed_trials}")
    return "\n".join(lines)
