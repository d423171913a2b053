"""Experiment configs, the results CSV, and the ablation grid."""
import csv
import datetime as dt
import fcntl
import hashlib
import itertools
import json
import logging
import os
from dataclasses import dataclass, field

from .data import ScanStore
from .labeling import CLASS_NAMES, SELECTIONS, STRATEGIES, label_cohort, read_manifest
from .metrics import format_cell
from .models import ModelConfig, build_model
from .tensor.checkpoint import load_checkpoint
from .tensor.functional import ConfigError
from .train import AugmentConfig, TrainConfig, MODEL_DEFAULTS, cross_validate, evaluate_external
from .volume import NORMALIZATION_MODES

log = logging.getLogger(__name__)

RECORD_FIELDS = [
    "model", "labeling", "classes", "slices", "normalization", "selection", "fold", "split",
    "auc", "accuracy", "sensitivity", "specificity", "best_epoch", "seed", "config_hash", "timestamp",
]
KEY_FIELDS = ("model", "labeling", "slices", "normalization", "selection", "fold", "split")
AXES = ("model", "labeling", "slices", "normalization", "selection")
MODEL_ALIASES = {
    "inception": "inception_grid", "inception_grid": "inception_grid",
    "transformer": "plane_transformer", "plane_transformer": "plane_transformer",
    "presnet": "pruned_resnet", "p-resnet": "pruned_resnet", "pruned_resnet": "pruned_resnet",
}
DISPLAY = {"inception_grid": "Inception", "plane_transformer": "Transformer", "pruned_resnet": "P-ResNet"}
NORM_DISPLAY = {"zscore_per_image": "z-score per-image", "zscore_global": "z-score global", "minmax": "min-max"}
MODEL_OPTIONS = ("width", "image_size", "token_dim", "heads", "layers")


class ConfigSchemaError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid experiment config:\n" + "\n".join(f"  {p}" for p in self.problems))


@dataclass
class ExperimentConfig:
    name: str
    cohort: str
    model: str
    labeling: str
    classes: int
    slices: int
    normalization: str
    selection: str
    folds: int = 10
    run_folds: list = None
    seed: int = 0
    external: dict = field(default_factory=dict)
    model_options: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def canonical(self):
        d = dict(self.__dict__)
        d["model_options"] = dict(sorted(self.model_options.items()))
        return d

    def config_hash(self):
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def model_config(self):
        dropout = self.train.get("dropout", MODEL_DEFAULTS[self.model]["dropout"])
        return ModelConfig(self.model, self.classes, self.slices, dropout=dropout, seed=self.seed, **self.model_options)

    def train_config(self):
        t = {**MODEL_DEFAULTS[self.model], "seed": self.seed, **self.train}
        return TrainConfig(**t)


def _resolve(path, base_dir):
    return path if os.path.isabs(path) or not base_dir else os.path.normpath(os.path.join(base_dir, path))


def parse_config(raw, base_dir=""):
    """Validate a config mapping; every problem is reported with its field path."""
    problems = []
    if not isinstance(raw, dict):
        raise ConfigSchemaError(["<root>: expected a JSON object"])

    def need(key, kind):
        if key not in raw:
            problems.append(f"{key}: required")
            return None
        v = raw[key]
        if not isinstance(v, kind) or isinstance(v, bool) and kind is not bool:
            problems.append(f"{key}: expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
            return None
        return v

    cohort = need("cohort", str)
    model = need("model", str)
    if model is not None and model.lower() not in MODEL_ALIASES:
        problems.append(f"model: unknown model {model!r}; choose from {sorted(set(MODEL_ALIASES))}")
    labeling = need("labeling", str)
    if labeling is not None and labeling not in STRATEGIES:
        problems.append(f"labeling: unknown labeling {labeling!r}; choose from {list(STRATEGIES)}")
    classes = raw.get("classes")
    if labeling in CLASS_NAMES:
        want = len(CLASS_NAMES[labeling])
        if classes is None:
            classes = want
        elif classes != want:
            problems.append(f"classes: labeling {labeling!r} has {want} classes, got {classes!r}")
    slices = need("slices", int)
    if slices is not None and slices not in (16, 77):
        problems.append(f"slices: must be 16 or 77, got {slices}")
    norm = need("normalization", str)
    if norm is not None and norm not in NORMALIZATION_MODES:
        problems.append(f"normalization: unknown normalization {norm!r}; choose from {list(NORMALIZATION_MODES)}")
    selection = raw.get("selection", "first")
    if selection not in SELECTIONS:
        problems.append(f"selection: unknown selection {selection!r}; choose from {list(SELECTIONS)}")
    folds = raw.get("folds", 10)
    if not isinstance(folds, int) or isinstance(folds, bool) or folds < 2:
        problems.append(f"folds: must be an integer >= 2, got {folds!r}")
    run_folds = raw.get("run_folds")
    if run_folds is not None:
        if not isinstance(run_folds, list) or not all(isinstance(f, int) for f in run_folds):
            problems.append("run_folds: expected a list of fold indices")
        elif isinstance(folds, int) and any(not 0 <= f < folds for f in run_folds):
            problems.append(f"run_folds: indices must lie in [0, {folds})")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append(f"seed: expected int, got {type(seed).__name__}")
    external = raw.get("external", {})
    if not isinstance(external, dict) or not all(isinstance(v, str) for v in external.values()):
        problems.append("external: expected an object mapping cohort name to manifest path")
        external = {}
    opts = raw.get("model_options", {})
    if not isinstance(opts, dict):
        problems.append("model_options: expected an object")
        opts = {}
    for k in opts:
        if k not in MODEL_OPTIONS:
            problems.append(f"model_options.{k}: unknown option; choose from {list(MODEL_OPTIONS)}")
    train = raw.get("train", {})
    if not isinstance(train, dict):
        problems.append("train: expected an object")
        train = {}
    allowed = set(TrainConfig.__dataclass_fields__)
    for k, v in train.items():
        if k not in allowed:
            problems.append(f"train.{k}: unknown field")
        elif k == "augment":
            if not isinstance(v, dict):
                problems.append("train.augment: expected an object")
            else:
                for ak in v:
                    if ak not in AugmentConfig.__dataclass_fields__:
                        problems.append(f"train.augment.{ak}: unknown field")
        elif isinstance(v, bool) != isinstance(TrainConfig.__dataclass_fields__[k].default, bool) or not isinstance(v, (int, float)):
            problems.append(f"train.{k}: expected a number, got {v!r}")
    for k in raw:
        if k not in ExperimentConfig.__dataclass_fields__:
            problems.append(f"{k}: unknown field")
    if problems:
        raise ConfigSchemaError(problems)

    cfg = ExperimentConfig(
        name=raw.get("name", ""), cohort=_resolve(cohort, base_dir), model=MODEL_ALIASES[model.lower()],
        labeling=labeling, classes=classes, slices=slices, normalization=norm, selection=selection,
        folds=folds, run_folds=run_folds, seed=seed,
        external={k: _resolve(v, base_dir) for k, v in sorted(external.items())},
        model_options=dict(opts), train=dict(train),
    )
    try:
        cfg.model_config()
        cfg.train_config()
    except (ConfigError, ValueError, TypeError) as e:
        raise ConfigSchemaError([f"model/train: {e}"]) from None
    return cfg


def load_config(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigSchemaError([f"<root>: not valid JSON ({e})"]) from None
    return parse_config(raw, os.path.dirname(os.path.abspath(path)))


# -- results CSV -------------------------------------------------------------------
def read_results(path):
    if not os.path.exists(path):
        return []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames and reader.fieldnames != RECORD_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def _write_rows(path, rows, mode):
    new = mode == "w" or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, mode, newline="") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            w = csv.DictWriter(fh, RECORD_FIELDS, lineterminator="\n")
            if new or mode == "w":
                w.writeheader()
            w.writerows(rows)
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def append_records(path, rows):
    existing = {tuple(r[k] for k in KEY_FIELDS) for r in read_results(path)}
    for r in rows:
        key = tuple(str(r[k]) for k in KEY_FIELDS)
        if key in existing:
            raise ValueError(f"duplicate result key {dict(zip(KEY_FIELDS, key))}")
        existing.add(key)
    _write_rows(path, [{k: r[k] for k in RECORD_FIELDS} for r in rows], "a")


def drop_records(path, predicate):
    rows = read_results(path)
    keep = [r for r in rows if not predicate(r)]
    if len(keep) != len(rows):
        _write_rows(path, keep, "w")
    return len(rows) - len(keep)


def make_record(cfg, fold, split, metrics, best_epoch, chash):
    return {
        "model": cfg.model, "labeling": cfg.labeling, "classes": cfg.classes, "slices": cfg.slices,
        "normalization": cfg.normalization, "selection": cfg.selection, "fold": fold, "split": split,
        "auc": repr(float(metrics["auc"])), "accuracy": repr(float(metrics["accuracy"])),
        "sensitivity": repr(float(metrics["sensitivity"])), "specificity": repr(float(metrics["specificity"])),
        "best_epoch": best_epoch, "seed": cfg.seed, "config_hash": chash,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }


# -- running ---------------------------------------------------------------------------
def load_labeled(manifest, strategy, slices, image_size):
    visits = read_manifest(manifest)
    samples = label_cohort(visits, strategy)
    store = ScanStore(slices, image_size, root=os.path.dirname(os.path.abspath(manifest)))
    return samples, store


def run_experiment(cfg, out_dir, force=False):
    """Cross-validate one config and append its rows; returns the number of new rows.

    Folds whose rows already exist under this config hash are skipped, so an
    interrupted run resumes and a finished one adds nothing.
    """
    os.makedirs(out_dir, exist_ok=True)
    results = os.path.join(out_dir, "results.csv")
    chash = cfg.config_hash()
    key = {"model": cfg.model, "labeling": cfg.labeling, "slices": str(cfg.slices),
           "normalization": cfg.normalization, "selection": cfg.selection}
    if force:
        removed = drop_records(results, lambda r: r["config_hash"] == chash or all(r[k] == v for k, v in key.items()))
        if removed:
            log.info("--force: removed %d earlier rows", removed)
    rows = read_results(results)
    clash = {r["config_hash"] for r in rows if all(r[k] == v for k, v in key.items())} - {chash}
    if clash:
        raise ValueError(f"results.csv already holds rows for {key} from config(s) {sorted(clash)}; use --force to replace")
    done = {int(r["fold"]) for r in rows if r["config_hash"] == chash}
    wanted = list(range(cfg.folds)) if cfg.run_folds is None else sorted(cfg.run_folds)
    todo = [f for f in wanted if f not in done]
    if not todo:
        log.info("config %s already complete; nothing to do", chash)
        return 0

    mcfg, tcfg = cfg.model_config(), cfg.train_config()
    samples, store = load_labeled(cfg.cohort, cfg.labeling, cfg.slices, mcfg.image_size)
    externals = {name: load_labeled(path, cfg.labeling, cfg.slices, mcfg.image_size) for name, path in cfg.external.items()}
    ckpt_dir = os.path.join(out_dir, "checkpoints", chash)
    os.makedirs(ckpt_dir, exist_ok=True)
    with open(os.path.join(ckpt_dir, "config.json"), "w") as fh:
        json.dump(cfg.canonical(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    classes = CLASS_NAMES[cfg.labeling]
    written = 0

    def on_fold(res, model):
        nonlocal written
        with open(os.path.join(ckpt_dir, f"fold{res.fold:02d}.norm.json"), "w") as fh:
            json.dump(res.normalization.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        fold_rows = [make_record(cfg, res.fold, "adni_test", res.metrics["test"], res.best_epoch, chash)]
        for name, (ext_samples, ext_store) in externals.items():
            m = evaluate_external(model, ext_samples, ext_store, res.normalization, classes)
            fold_rows.append(make_record(cfg, res.fold, f"external_{name}", m, res.best_epoch, chash))
        append_records(results, fold_rows)
        written += len(fold_rows)
        log.info("fold %d: test AUC %.3f (best epoch %d)", res.fold, res.metrics["test"]["auc"], res.best_epoch)

    cross_validate(mcfg, samples, store, tcfg, cfg.labeling, cfg.normalization, cfg.selection, k=cfg.folds,
                   folds=todo, checkpoint_dir=ckpt_dir, on_fold=on_fold)
    return written


# -- ablation grid ------------------------------------------------------------------------
def expand_grid(grid):
    """Split a grid mapping into (base config, list of (combo, config or skip reason))."""
    axes = {k: v for k, v in grid.items() if k in AXES and isinstance(v, list)}
    base = {k: v for k, v in grid.items() if k not in axes and k not in ("base", "output")}
    base.update(grid.get("base", {}))
    if not axes or any(len(v) == 0 for v in axes.values()):
        raise ValueError("ablation grid is empty: give at least one non-empty axis list")
    names = [a for a in AXES if a in axes]
    out = []
    for values in itertools.product(*(axes[a] for a in names)):
        combo = dict(zip(names, values))
        raw = {**base, **combo}
        raw.pop("classes", None)
        out.append((combo, raw))
    return out


def run_ablation(grid, out_dir, base_dir="", force=False):
    """Run every valid combination; returns (rows written, skipped [(combo, reason)])."""
    written, skipped = 0, []
    for combo, raw in expand_grid(grid):
        try:
            cfg = parse_config(raw, base_dir)
        except ConfigSchemaError as e:
            reason = "; ".join(e.problems)
            log.warning("skipping %s: %s", combo, reason)
            skipped.append((combo, reason))
            continue
        written += run_experiment(cfg, out_dir, force=force)
    return written, skipped


# -- rendering -------------------------------------------------------------------------------
def render_table(rows):
    """Markdown table of AUC 'mean (std)' per config family, one column per split."""
    families, splits = {}, []
    for r in rows:
        fam = (r["model"], r["labeling"], str(r["classes"]), str(r["slices"]), r["normalization"], r["selection"])
        families.setdefault(fam, {}).setdefault(r["split"], []).append(float(r["auc"]))
        if r["split"] not in splits:
            splits.append(r["split"])
    splits = sorted(splits, key=lambda s: (s != "adni_test", s))
    head = ["Model", "Labeling", "Classes", "Slices", "Normalization", "Selection"]
    head += ["ADNI Test" if s == "adni_test" else s.replace("external_", "").upper() for s in splits]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for fam in sorted(families):
        model, labeling, classes, slices, norm, sel = fam
        cells = [DISPLAY.get(model, model), labeling, classes, slices, NORM_DISPLAY.get(norm, norm), sel]
        cells += [format_cell(families[fam][s]) if s in families[fam] else "-" for s in splits]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def build_from_checkpoint(path):
    """Rebuild a model from a checkpoint written by train_fold."""
    state, header = load_checkpoint(path)
    with open(path + ".json") as fh:
        side = json.load(fh)
    extra = side.get("extra", {})
    if "model_config" not in extra:
        raise ValueError(f"{path}: sidecar has no model_config")
    model = build_model(ModelConfig.from_dict(extra["model_config"]))
    model.load_state_dict(state)
    model.eval()
    return model, header
