"""Tasks, loss, Adam, the epoch loop and leave-one-subject-out evaluation."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, DomainError, NumericError
from .layers import softmax
from .metrics import MetricsReport, confusion_matrix
from .model import ModelConfig, PainAttnNet
from .synth import WindowRecord

log = logging.getLogger(__name__)

EXCLUDE = None


@dataclass(frozen=True)
class TaskSpec:
    name: str
    label_map: tuple  # raw level 0..4 -> class index, or EXCLUDE
    num_classes: int
    title: str = ""

    def map_level(self, level: int):
        return self.label_map[level]


TASKS = {
    "5way": TaskSpec("5way", (0, 1, 2, 3, 4), 5, "T0 vs T1 vs T2 vs T3 vs T4"),
    "pain-any": TaskSpec("pain-any", (0, 1, 1, 1, 1), 2, "T0 vs (T1, T2, T3, T4)"),
    "t0t1": TaskSpec("t0t1", (0, 1, EXCLUDE, EXCLUDE, EXCLUDE), 2, "T0 vs T1"),
    "t0t2": TaskSpec("t0t2", (0, EXCLUDE, 1, EXCLUDE, EXCLUDE), 2, "T0 vs T2"),
    "t0t3": TaskSpec("t0t3", (0, EXCLUDE, EXCLUDE, 1, EXCLUDE), 2, "T0 vs T3"),
    "t0t4": TaskSpec("t0t4", (0, EXCLUDE, EXCLUDE, EXCLUDE, 1), 2, "T0 vs T4"),
}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; choose from {', '.join(TASKS)}") from None


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    class_weighting: bool = False


@dataclass
class TaskDataset:
    x: np.ndarray          # (N, 1, L) float64
    y: np.ndarray          # (N,) task labels
    subjects: np.ndarray   # (N,)
    num_classes: int

    def __len__(self):
        return len(self.y)

    def subset(self, mask) -> "TaskDataset":
        return TaskDataset(self.x[mask], self.y[mask], self.subjects[mask], self.num_classes)


def build_task_dataset(windows: list[WindowRecord], task: TaskSpec) -> TaskDataset:
    kept = [(w, task.map_level(w.level)) for w in windows]
    kept = [(w, c) for w, c in kept if c is not EXCLUDE]
    y = np.array([c for _, c in kept], dtype=np.int64)
    counts = np.bincount(y, minlength=task.num_classes)
    if (counts == 0).any():
        raise ConfigError(f"task {task.name}: class(es) {np.flatnonzero(counts == 0).tolist()} have no windows")
    x = np.stack([w.samples for w, _ in kept]).astype(np.float64)[:, None, :]
    subjects = np.array([w.subject_id for w, _ in kept], dtype=np.int64)
    return TaskDataset(x, y, subjects, task.num_classes)


# -- loss and optimiser ------------------------------------------------------

def class_weights(labels, num_classes: int) -> np.ndarray:
    """Weights inversely proportional to class frequency, mean one over samples."""
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return np.divide(len(labels), num_classes * counts, out=np.zeros(num_classes), where=counts > 0)


def cross_entropy(probs: np.ndarray, labels, weights=None) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    ``probs`` are softmax outputs. With per-class ``weights`` the mean is
    weighted by each sample's class weight.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,):
        raise DomainError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DomainError(f"label outside [0, {k})")
    sample_w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)[labels]
    total = sample_w.sum()
    picked = np.clip(probs[np.arange(n), labels], 1e-12, 1.0)
    loss = float(np.sum(sample_w * -np.log(picked)) / total)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= (sample_w / total)[:, None]
    return loss, grad


def adam_step(state: dict, params: dict, grads: dict, cfg: TrainConfig) -> dict:
    """One in-place Adam update with bias correction.

    Weight decay is classic L2 coupling: ``weight_decay * param`` is added to
    the gradient before the moment updates (not decoupled as in AdamW).
    """
    b1, b2 = cfg.betas
    state["t"] = t = state.get("t", 0) + 1
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        m[name] *= b1
        m[name] += (1.0 - b1) * g
        v[name] *= b2
        v[name] += (1.0 - b2) * g * g
        p -= cfg.lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.eps)
    return params


class Adam:
    def __init__(self, model, cfg: TrainConfig):
        self.cfg = cfg
        self.params = {n: p for n, p, _ in model.named_parameters()}
        self.grads = {n: g for n, _, g in model.named_parameters()}
        self.state: dict = {}

    def step(self):
        adam_step(self.state, self.params, self.grads, self.cfg)


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)


def train_epochs(model: PainAttnNet, data: TaskDataset, cfg: TrainConfig,
                 progress=None) -> TrainResult:
    """Mini-batch training; every sample is visited once per epoch.

    Shuffling draws from a generator seeded by ``cfg.seed``. ``progress``,
    if given, is called as ``progress(epoch, loss, acc)``.
    """
    if len(data) == 0:
        raise DomainError("training set is empty")
    rng = np.random.default_rng([cfg.seed, 1])
    weights = class_weights(data.y, data.num_classes) if cfg.class_weighting else None
    opt = Adam(model, cfg)
    result = TrainResult()
    model.train()
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits = model.forward(data.x[idx])
            probs = softmax(logits)
            loss, dlogits = cross_entropy(probs, data.y[idx], weights)
            if not np.isfinite(loss) or not np.isfinite(logits).all():
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            model.zero_grad()
            model.backward(dlogits)
            opt.step()
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == data.y[idx]).sum())
        result.losses.append(loss_sum / n)
        result.accuracies.append(correct / n)
        if progress is not None:
            progress(epoch, result.losses[-1], result.accuracies[-1])
        log.debug("epoch %d loss %.6f acc %.4f", epoch, result.losses[-1], result.accuracies[-1])
    return result


def predict(model: PainAttnNet, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return model.predict_proba(x, batch_size).argmax(axis=1)


def evaluate(model: PainAttnNet, data: TaskDataset) -> MetricsReport:
    return MetricsReport.from_labels(data.y, predict(model, data.x), data.num_classes)


class MeanThresholdBaseline:
    """Nearest class mean on the scalar window mean.

    For two classes this is a threshold at the midpoint of the class means.
    """

    def fit(self, x: np.ndarray, y: np.ndarray, num_classes: int) -> "MeanThresholdBaseline":
        feat = x.reshape(len(x), -1).mean(axis=1)
        self.centers = np.array([feat[y == k].mean() for k in range(num_classes)])
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        feat = x.reshape(len(x), -1).mean(axis=1)
        return np.abs(feat[:, None] - self.centers[None, :]).argmin(axis=1)


# -- leave-one-subject-out ---------------------------------------------------

def fold_seed(seed: int, subject: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(subject)]).generate_state(1)[0])


@dataclass
class FoldResult:
    subject: int
    y_true: np.ndarray
    y_pred: np.ndarray
    baseline_pred: np.ndarray
    losses: list[float]
    seconds: float

    @property
    def accuracy(self) -> float:
        return float((self.y_true == self.y_pred).mean())

    @property
    def baseline_accuracy(self) -> float:
        return float((self.y_true == self.baseline_pred).mean())


@dataclass
class LoocvResult:
    folds: list[FoldResult]
    report: MetricsReport
    baseline: MetricsReport
    seconds: float


def run_fold(data: TaskDataset, subject: int, cfg: TrainConfig, model_cfg: ModelConfig) -> FoldResult:
    start = time.perf_counter()
    test_mask = data.subjects == subject
    train, test = data.subset(~test_mask), data.subset(test_mask)
    if np.intersect1d(np.unique(train.subjects), np.unique(test.subjects)).size:
        raise AssertionError(f"subject leakage in fold for subject {subject}")
    seed = fold_seed(cfg.seed, subject)
    fold_cfg = replace(cfg, seed=seed)
    with threadpool_limits(limits=1):
        model = PainAttnNet(model_cfg, seed=seed)
        result = train_epochs(model, train, fold_cfg)
        y_pred = predict(model, test.x)
    base = MeanThresholdBaseline().fit(train.x, train.y, data.num_classes).predict(test.x)
    return FoldResult(subject, test.y, y_pred, base, result.losses, time.perf_counter() - start)


def _run_fold_args(args):
    return run_fold(*args)


def loocv(windows, task: TaskSpec, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          jobs: int = 1, on_fold=None) -> LoocvResult:
    """One fold per subject; predictions from all folds pooled into one matrix.

    Fold seeds depend only on ``(cfg.seed, subject)``, so the pooled result
    is the same for any ``jobs``.
    """
    start = time.perf_counter()
    data = windows if isinstance(windows, TaskDataset) else build_task_dataset(windows, task)
    model_cfg = (model_cfg or ModelConfig()).with_overrides(num_classes=task.num_classes)
    subjects = sorted(int(s) for s in np.unique(data.subjects))
    if len(subjects) < 2:
        raise ConfigError("leave-one-subject-out needs at least two subjects")
    args = [(data, s, cfg, model_cfg) for s in subjects]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_run_fold_args, args)
    else:
        results = (run_fold(*a) for a in args)
    folds = []
    for fold in results:
        folds.append(fold)
        if on_fold is not None:
            on_fold(fold)
    folds.sort(key=lambda f: f.subject)
    y_true = np.concatenate([f.y_true for f in folds])
    k = task.num_classes
    report = MetricsReport.from_confusion(confusion_matrix(y_true, np.concatenate([f.y_pred for f in folds]), k))
    baseline = MetricsReport.from_confusion(
        confusion_matrix(y_true, np.concatenate([f.baseline_pred for f in folds]), k))
    return LoocvResult(folds, report, baseline, time.perf_counter() - start)
