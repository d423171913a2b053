"""Training loop, early stopping, cross-validation and external evaluation."""
import copy
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .data import batch_inputs, global_spec, normalized_input
from .labeling import CLASS_NAMES, class_weights as inverse_frequency, stratified_subject_kfold, subject_labels
from .metrics import UndefinedMetricError, aggregate_folds, confusion_metrics, format_cell, roc_auc
from .models import build_model
from .tensor import Tensor, active_tape, no_grad
from .tensor import functional as F
from .tensor.checkpoint import save_checkpoint, state_hash
from .tensor.optim import Adam
from .volume import NormalizationSpec

log = logging.getLogger(__name__)

METRICS = ("auc", "accuracy", "sensitivity", "specificity")


class TrainingError(RuntimeError):
    pass


class LabelSpaceError(ValueError):
    pass


@dataclass
class AugmentConfig:
    enabled: bool = True
    rotation: float = 10.0  # degrees, uniform in [-r, r]
    flip_p: float = 0.5
    jitter: float = 0.1  # multiplicative, uniform in [1 - j, 1 + j]
    noise: float = 0.05  # sigma as a fraction of the sample's intensity range


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 8
    dropout: float = 0.4
    max_epochs: int = 100
    patience: int = 30
    seed: int = 0
    min_delta: float = 1e-4
    weighted_loss: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError(f"need 1 <= patience <= max_epochs, got {self.patience} and {self.max_epochs}")

    def to_dict(self):
        return asdict(self)


MODEL_DEFAULTS = {
    "inception_grid": dict(lr=1e-4, batch_size=32, dropout=0.6, max_epochs=100, patience=30),
    "plane_transformer": dict(lr=5e-4, batch_size=8, dropout=0.4, max_epochs=100, patience=30),
    "pruned_resnet": dict(lr=5e-4, batch_size=8, dropout=0.4, max_epochs=100, patience=30),
}


def default_train_config(kind, **overrides):
    return TrainConfig(**{**MODEL_DEFAULTS[kind], **overrides})


# -- augmentation -----------------------------------------------------------------
def augment(sample, seed, cfg=None):
    """Rotate, flip, jitter and add noise to a (T, H, W) slice stack.

    One draw per call is shared by all slices of the sample, so the stack stays
    anatomically consistent.
    """
    cfg = cfg or AugmentConfig()
    x = np.asarray(sample)
    if not cfg.enabled:
        return x.copy()
    rng = np.random.default_rng(seed)
    angle, flip, gain, noise_draw = rng.uniform(-1, 1), rng.random(), rng.uniform(-1, 1), rng.standard_normal(x.shape)
    out = x.astype(np.float64)
    if cfg.rotation:
        out = ndimage.rotate(out, angle * cfg.rotation, axes=(-1, -2), reshape=False, order=1, mode="constant", cval=0.0)
    if flip < cfg.flip_p:
        out = out[..., ::-1]
    if cfg.jitter:
        out = out * (1.0 + gain * cfg.jitter)
    if cfg.noise:
        out = out + noise_draw * cfg.noise * float(out.max() - out.min())
    return np.ascontiguousarray(out, dtype=x.dtype)


# -- early stopping ---------------------------------------------------------------
class EarlyStopping:
    """Track the best validation score; ``update`` returns True when training should stop."""

    def __init__(self, patience, max_epochs, min_delta=1e-4):
        self.patience = patience
        self.max_epochs = max_epochs
        self.min_delta = min_delta
        self.best = -np.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, epoch, score):
        self.epoch = epoch
        improved = score > self.best + self.min_delta
        if improved:
            self.best, self.best_epoch = score, epoch
        return improved, (epoch - self.best_epoch >= self.patience or epoch >= self.max_epochs)


def run_early_stopping(trace, patience=30, max_epochs=100, min_delta=1e-4):
    """Replay a per-epoch score trace; returns (last epoch, best epoch)."""
    stopper = EarlyStopping(patience, max_epochs, min_delta)
    for epoch in range(1, max_epochs + 1):
        _, stop = stopper.update(epoch, trace(epoch) if callable(trace) else trace[epoch - 1])
        if stop:
            break
    return stopper.epoch, stopper.best_epoch


# -- data containers --------------------------------------------------------------
@dataclass
class SplitData:
    """Normalized slice stacks (N, T, S, S) with integer labels."""

    stacks: np.ndarray
    labels: np.ndarray
    ids: list = field(default_factory=list)
    subjects: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    epochs_trained: int
    metrics: dict  # split -> {auc, accuracy, sensitivity, specificity}
    checkpoint: str = ""
    state: dict = field(default=None, repr=False)
    history: list = field(default_factory=list)
    normalization: NormalizationSpec = None

    def __post_init__(self):
        if self.best_epoch > self.epochs_trained:
            raise ValueError("best epoch exceeds last trained epoch")


def predict(model, stacks, batch_size=16):
    """Class probabilities, eval mode, no tape. Restores the model's mode."""
    was_training = model.training
    model.eval()
    kind = model.config.kind
    out = []
    try:
        with no_grad():
            for i in range(0, len(stacks), batch_size):
                x = batch_inputs(stacks[i:i + batch_size], kind).astype(model.dtype)
                out.append(np.asarray(model.forward(Tensor(x)).data, dtype=np.float64))
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def split_metrics(probs, labels):
    """AUC, accuracy, sensitivity and specificity with AD (the last class) as positive."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    positive = probs.shape[1] - 1
    out = {"auc": roc_auc(probs, labels)}
    cm = confusion_metrics(probs, labels, positive=positive)
    out.update(accuracy=cm.accuracy, sensitivity=cm.sensitivity, specificity=cm.specificity)
    return out


def _weights_array(labels, num_classes, weighted):
    if not weighted:
        return np.ones(num_classes)
    counts = {c: int(np.sum(labels == c)) for c in range(num_classes)}
    w = inverse_frequency({c: n for c, n in counts.items() if n > 0})
    return np.array([w.get(c, 0.0) for c in range(num_classes)])


def train_fold(model, train, val, cfg, test=None, fold=0, score_fn=None, checkpoint_path=None):
    """Train ``model`` in place and return the FoldResult of its best epoch.

    ``score_fn(model, epoch)`` replaces the validation AUC when given; it is
    how early stopping is exercised against a scripted trace.
    """
    if len(train) == 0 or len(val) == 0:
        raise TrainingError(f"fold {fold}: empty {'train' if len(train) == 0 else 'validation'} split")
    num_classes = model.config.num_classes
    kind = model.config.kind
    weights = _weights_array(train.labels, num_classes, cfg.weighted_loss)
    opt = Adam(model.parameters(), cfg.lr)
    stopper = EarlyStopping(cfg.patience, cfg.max_epochs, cfg.min_delta)
    best_state = copy.deepcopy(model.state_dict())
    history = []
    n = len(train)
    dtype = model.dtype
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # batch norm needs two samples
            stacks = [augment(train.stacks[i], [cfg.seed, epoch, int(i)], cfg.augment) for i in idx]
            x = Tensor(batch_inputs(stacks, kind).astype(dtype))
            tape = active_tape()
            try:
                loss = F.weighted_cross_entropy(model.logits(x), train.labels[idx], weights)
            except FloatingPointError as e:
                tape.clear()
                raise TrainingError(f"fold {fold} epoch {epoch} step {step}: {e}") from e
            lv = float(loss.data.reshape(-1)[0])
            if not np.isfinite(lv):
                tape.clear()
                raise TrainingError(f"fold {fold} epoch {epoch} step {step}: non-finite loss {lv}")
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except FloatingPointError as e:
                raise TrainingError(f"fold {fold} epoch {epoch} step {step}: {e}") from e
            losses.append(lv)
        if score_fn is not None:
            score = float(score_fn(model, epoch))
        else:
            score = roc_auc(predict(model, val.stacks), val.labels)
        improved, stop = stopper.update(epoch, score)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"), "val_auc": score})
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        log.debug("fold %d epoch %d loss %.4f val %.4f", fold, epoch, history[-1]["loss"], score)
        if stop:
            break
    model.load_state_dict(best_state)
    model.eval()
    metrics = {}
    for name, split in (("val", val), ("test", test)):
        if split is None or len(split) == 0:
            continue
        try:
            metrics[name] = split_metrics(predict(model, split.stacks), split.labels)
        except UndefinedMetricError as e:
            log.warning("fold %d %s metrics undefined: %s", fold, name, e)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model.state_dict(), kind, model.config.config_hash(),
                        extra={"model_config": model.config.to_dict(), "fold": fold, "best_epoch": stopper.best_epoch})
    return FoldResult(fold, stopper.best_epoch, stopper.epoch, metrics, checkpoint_path or "",
                      {k: v.copy() for k, v in model.state_dict().items()}, history)


# -- cross-validation ---------------------------------------------------------------
def class_index(strategy):
    return {name: i for i, name in enumerate(CLASS_NAMES[strategy])}


def fold_spec(mode, train_scans, fold):
    if mode == "zscore_global":
        return global_spec(train_scans, f"training split of fold {fold}")
    return NormalizationSpec(mode, provenance="per image")


def make_split(samples, store, spec, strategy):
    idx = class_index(strategy)
    scans = [store.get(s) for s in samples]
    stacks = np.stack([normalized_input(sc, spec) for sc in scans]) if scans else np.zeros((0,))
    labels = np.array([idx[s.label] for s in samples], dtype=np.int64)
    return SplitData(stacks, labels, [s.scan_id for s in samples], [s.subject_id for s in samples])


@dataclass
class CVResult:
    folds: list
    plan: object

    def values(self, split, metric):
        return [f.metrics[split][metric] for f in sorted(self.folds, key=lambda r: r.fold) if split in f.metrics]

    def summary(self, split="test"):
        out = {}
        for m in METRICS:
            vals = self.values(split, m)
            if vals:
                mean, std = aggregate_folds(vals)
                out[m] = {"mean": mean, "std": std, "cell": format_cell(vals)}
        return out


def cross_validate(model_cfg, samples, store, train_cfg, strategy, normalization, selection="first", k=10,
                   folds=None, checkpoint_dir=None, on_fold=None):
    """One train_fold per CV round over ``samples`` (LabeledSamples of one strategy).

    ``folds`` restricts which rounds run. ``on_fold(result)`` is called as each
    fold finishes so callers can persist partial results.
    """
    plan = stratified_subject_kfold(subject_labels(samples), k=k, seed=train_cfg.seed, selection=selection)
    results = []
    for f in (range(k) if folds is None else folds):
        train_s, val_s, test_s = plan.split_samples(samples, f)
        spec = fold_spec(normalization, [store.get(s) for s in train_s], f)
        train = make_split(train_s, store, spec, strategy)
        val = make_split(val_s, store, spec, strategy)
        test = make_split(test_s, store, spec, strategy)
        model = build_model(model_cfg)
        ckpt = os.path.join(checkpoint_dir, f"fold{f:02d}.ckpt") if checkpoint_dir else None
        res = train_fold(model, train, val, train_cfg, test=test, fold=f, checkpoint_path=ckpt)
        res.normalization = spec
        results.append(res)
        if on_fold is not None:
            on_fold(res, model)
    return CVResult(results, plan)


# -- external evaluation ------------------------------------------------------------
def external_labels(model_classes, samples):
    """Map external sample labels into the model's class indices.

    A binary AD / non-AD cohort can score a 3-class model: only the AD
    probability matters there. The reverse (3-class labels, 2-class model)
    has no faithful mapping.
    """
    names = {s.label for s in samples}
    if names <= set(model_classes):
        idx = {c: i for i, c in enumerate(model_classes)}
        return np.array([idx[s.label] for s in samples]), False
    if names <= {"NonAD", "AD", "CN"} and "AD" in model_classes:
        return np.array([1 if s.label == "AD" else 0 for s in samples]), True
    raise LabelSpaceError(f"model classes {tuple(model_classes)} cannot score labels {sorted(names)}")


def evaluate_external(model, samples, store, spec, model_classes):
    """Metrics on an external cohort with no parameter updates."""
    if spec.mode == "zscore_global" and (spec.mean is None or spec.std is None):
        raise ValueError("zscore_global evaluation needs the training split's mean and std")
    labels, collapse = external_labels(model_classes, samples)
    if len(model_classes) != model.config.num_classes:
        raise LabelSpaceError(f"model has {model.config.num_classes} outputs but {len(model_classes)} class names")
    before = state_hash(model.state_dict())
    stacks = np.stack([normalized_input(store.get(s), spec) for s in samples])
    probs = predict(model, stacks)
    if collapse:
        ad = probs[:, -1]
        probs = np.stack([1.0 - ad, ad], axis=1)
    if state_hash(model.state_dict()) != before:
        raise RuntimeError("parameters changed during external evaluation")
    return split_metrics(probs, labels)
