"""Experiment driver: configuration, protocols, evaluation and reports.

Two protocols are supported.

``ood``
    Base learners are trained on the base-class split of each meta-train
    domain, the WPN on their WPN-class split, and every model is evaluated on
    separate meta-test domains.
``in_distribution``
    A designated target domain is split three ways (meta-train / validation /
    meta-test).  A learner trained on the target's meta-train classes joins the
    ensemble and evaluation runs on the target's meta-test classes only.

All models see the same evaluation episodes: episode ``i`` of meta-test domain
``t`` is drawn from ``default_rng([eval_seed, t, i])``.
"""

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .episodes import DomainSpec, make_synthetic_domain, load_feature_dataset, partition_classes, sample_episode
from .learners import LEARNER_KINDS, TrainConfig, load_learner, save_learner, train_learner
from .mixture import (
    MODES,
    EnsembleModel,
    WpnTrainConfig,
    learner_outputs,
    load_manifest,
    mxml_predict,
    train_wpn,
    write_manifest,
)
from .wpn import WpnParams, save_wpn

log = logging.getLogger(__name__)

PROTOCOLS = ("ood", "in_distribution")
BASELINES = ("dataset_specific", "single", "uniform", "mxml_nontrans", "mxml_trans")
RESULTS_COLUMNS = ["model", "train_domains", "test_domain", "n_way", "k_shot", "queries", "episodes", "mean_acc", "ci95"]
COEF_COLUMNS = ["test_domain", "learner", "weight_mean", "weight_std", "episodes"]
EPISODE_COLUMNS = ["model", "train_domains", "test_domain", "n_way", "k_shot", "queries", "episode", "accuracy"]
WEIGHT_COLUMNS = ["model", "test_domain", "episode", "learner", "weight"]


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid experiment config:\n  - " + "\n  - ".join(self.errors))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class DomainEntry:
    """A meta-train/test domain: synthetic (``spec``) or loaded from ``csv``."""

    name: str
    seed: int = 0
    spec: DomainSpec = None
    csv: str = None

    def build(self, base_dir=Path(".")):
        if self.csv:
            path = Path(self.csv)
            return load_feature_dataset(path if path.is_absolute() else base_dir / path, self.name)
        return make_synthetic_domain(self.spec, self.seed)


@dataclass
class EvalConfig:
    episodes: int = 600
    n_way: int = 10
    k_shot: int = 5
    n_query: int = 15
    seed: int = 12345
    workers: int = 1
    baselines: tuple = BASELINES


@dataclass
class ExperimentConfig:
    protocol: str = "ood"
    seed: int = 0
    out: str = "results"
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    target: DomainEntry = None
    base_fraction: float = 0.8
    wpn_fraction: float = 0.2
    split_seed: int = 0
    target_fractions: tuple = (0.64, 0.16, 0.20)
    target_wpn_split: str = "none"  # validation classes are report-only unless set
    learner_kind: str = "protonet"
    learner: TrainConfig = field(default_factory=TrainConfig)
    wpn: WpnTrainConfig = field(default_factory=WpnTrainConfig)
    d_z: int = 128
    lam: float = 0.1
    mode: str = "normalized"
    transductive: bool = True
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_dir: Path = Path(".")

    # -- derived -----------------------------------------------------------
    def learner_seed(self, index):
        return 1000 * self.seed + index

    def primary_mxml(self):
        return "mxml_trans" if self.transductive else "mxml_nontrans"

    def validate(self):
        errors = []
        if self.protocol not in PROTOCOLS:
            errors.append(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if not self.train:
            errors.append("[domains] train must list at least one domain")
        names = [d.name for d in self.train]
        if len(set(names)) != len(names):
            errors.append("meta-train domain names must be unique")
        for entry in self.train + self.test + ([self.target] if self.target else []):
            if entry.spec is None and not entry.csv:
                errors.append(f"domain {entry.name!r} needs either synthetic spec fields or csv")
            if entry.spec is not None:
                errors += entry.spec.validate()
        if self.protocol == "ood":
            if not self.test:
                errors.append("[domains] test must list at least one domain for the ood protocol")
            overlap = sorted(set(names) & {d.name for d in self.test})
            if overlap:
                errors.append(f"meta-train and meta-test domains overlap: {overlap}")
        if self.protocol == "in_distribution":
            if self.target is None:
                errors.append("[domains] target is required for the in_distribution protocol")
            elif self.target.name in names:
                errors.append(f"target domain {self.target.name!r} also appears among meta-train domains")
            if len(self.target_fractions) != 3:
                errors.append("splits.target_fractions needs three values (train, validation, test)")
            elif any(f <= 0 for f in self.target_fractions) or sum(self.target_fractions) > 1 + 1e-12:
                errors.append(f"splits.target_fractions must be positive and sum to <= 1, got {list(self.target_fractions)}")
            if self.target_wpn_split not in ("val", "train", "none"):
                errors.append("splits.target_wpn_split must be one of val, train, none")
        if self.base_fraction <= 0 or self.wpn_fraction <= 0 or self.base_fraction + self.wpn_fraction > 1 + 1e-12:
            errors.append("splits.base_fraction and wpn_fraction must be positive and sum to <= 1")
        if self.learner_kind not in LEARNER_KINDS:
            errors.append(f"learner.kind must be one of {LEARNER_KINDS}")
        errors += self.learner.validate()
        if self.wpn.steps < 0 or self.wpn.lr <= 0:
            errors.append("wpn.steps must be >= 0 and wpn.lr positive")
        if self.d_z < 1 or self.lam < 0:
            errors.append("wpn.d_z must be positive and wpn.lam nonnegative")
        if self.mode not in MODES:
            errors.append(f"wpn.mode must be one of {MODES}")
        ev = self.eval
        for name in ("episodes", "n_way", "k_shot", "n_query", "workers"):
            if getattr(ev, name) < 1:
                errors.append(f"eval.{name} must be positive")
        unknown = sorted(set(ev.baselines) - set(BASELINES))
        if unknown:
            errors.append(f"eval.baselines has unknown entries {unknown}")
        return errors


_SPEC_FIELDS = {f.name for f in fields(DomainSpec)}


def _domain_entry(raw, defaults, fallback_seed, errors, where):
    if not isinstance(raw, dict) or "name" not in raw:
        errors.append(f"{where}: every domain needs a name")
        return None
    merged = {**defaults, **raw}
    name = merged.pop("name")
    seed = int(merged.pop("seed", fallback_seed))
    csv_path = merged.pop("csv", None)
    if csv_path:
        return DomainEntry(name, seed, None, csv_path)
    unknown = sorted(set(merged) - _SPEC_FIELDS)
    if unknown:
        errors.append(f"{where} {name!r}: unknown keys {unknown}")
        return None
    return DomainEntry(name, seed, DomainSpec(name=name, **merged))


def _take(section, cls, errors, where, rename=None):
    rename = rename or {}
    kwargs = {}
    valid = {f.name for f in fields(cls)}
    for key, value in section.items():
        key = rename.get(key, key)
        if key not in valid:
            errors.append(f"[{where}] unknown key {key!r}")
            continue
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    return kwargs


def config_from_dict(doc, base_dir=Path(".")):
    errors = []
    known = {"experiment", "domains", "splits", "learner", "wpn", "eval"}
    for key in doc:
        if key not in known:
            errors.append(f"unknown section [{key}]")
    exp = doc.get("experiment", {})
    doms = doc.get("domains", {})
    splits = doc.get("splits", {})
    learner = dict(doc.get("learner", {}))
    wpn = dict(doc.get("wpn", {}))
    ev = dict(doc.get("eval", {}))

    defaults = doms.get("defaults", {})
    train = [_domain_entry(r, defaults, i, errors, "train") for i, r in enumerate(doms.get("train", []))]
    test = [_domain_entry(r, defaults, 100 + i, errors, "test") for i, r in enumerate(doms.get("test", []))]
    target = _domain_entry(doms["target"], defaults, 200, errors, "target") if "target" in doms else None

    kind = learner.pop("kind", "protonet")
    lcfg = TrainConfig(**_take(learner, TrainConfig, errors, "learner"))

    d_z = wpn.pop("d_z", 128)
    lam = wpn.pop("lam", 0.1)
    mode = wpn.pop("mode", "normalized")
    transductive = wpn.pop("transductive", True)
    wcfg = WpnTrainConfig(**_take(wpn, WpnTrainConfig, errors, "wpn"))
    ecfg = EvalConfig(**_take(ev, EvalConfig, errors, "eval", {"queries": "n_query"}))

    cfg = ExperimentConfig(
        protocol=exp.get("protocol", "ood"),
        seed=int(exp.get("seed", 0)),
        out=exp.get("out", "results"),
        train=[t for t in train if t],
        test=[t for t in test if t],
        target=target,
        base_fraction=splits.get("base_fraction", 0.8),
        wpn_fraction=splits.get("wpn_fraction", 0.2),
        split_seed=splits.get("seed", 0),
        target_fractions=tuple(splits.get("target_fractions", (0.64, 0.16, 0.20))),
        target_wpn_split=splits.get("target_wpn_split", "none"),
        learner_kind=kind,
        learner=lcfg,
        wpn=wcfg,
        d_z=d_z,
        lam=lam,
        mode=mode,
        transductive=bool(transductive),
        eval=ecfg,
        base_dir=Path(base_dir),
    )
    errors += cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path):
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    return config_from_dict(doc, path.parent)


def apply_overrides(cfg, seed=None, out=None, episodes=None, transductive=None, mode=None):
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if out is not None:
        cfg = replace(cfg, out=str(out))
    if episodes is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, episodes=int(episodes)))
    if transductive is not None:
        cfg = replace(cfg, transductive=bool(transductive))
    if mode is not None:
        cfg = replace(cfg, mode=mode)
    errors = cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


# ---------------------------------------------------------------------------
# prepared data
# ---------------------------------------------------------------------------

@dataclass
class Prepared:
    """Domains and class splits derived deterministically from the config."""

    train: list  # [(domain, base_classes, wpn_classes)]
    tests: list  # [(domain, eval_classes)]
    target: tuple = None  # (domain, train, val, test) for in_distribution

    def member_names(self):
        names = [d.name for d, _, _ in self.train]
        if self.target:
            names.append(self.target[0].name)
        return names

    def base_sources(self):
        src = [(d, b) for d, b, _ in self.train]
        if self.target:
            src.append((self.target[0], self.target[1]))
        return src


def prepare(cfg):
    train = []
    for i, entry in enumerate(cfg.train):
        dom = entry.build(cfg.base_dir)
        base, wpn = partition_classes(dom, (cfg.base_fraction, cfg.wpn_fraction), cfg.split_seed + i)
        train.append((dom, base, wpn))
    if cfg.protocol == "ood":
        tests = []
        for entry in cfg.test:
            dom = entry.build(cfg.base_dir)
            tests.append((dom, dom.class_ids))
        return Prepared(train, tests)
    dom = cfg.target.build(cfg.base_dir)
    t_train, t_val, t_test = partition_classes(dom, cfg.target_fractions, cfg.split_seed)
    return Prepared(train, [(dom, t_test)], (dom, t_train, t_val, t_test))


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------

def _paths(out):
    out = Path(out)
    return {
        "ckpt": out / "checkpoints",
        "curves": out / "curves",
        "manifest": out / "ensemble.json",
        "single": out / "checkpoints" / "single.json",
        "wpn": out / "checkpoints" / "wpn.json",
        "episodes": out / "episodes.csv",
        "weights": out / "episode_weights.csv",
    }


def train_base(cfg, prepared=None):
    """Train one learner per member domain plus the pooled single model."""
    prepared = prepared or prepare(cfg)
    paths = _paths(cfg.out)
    members = []
    for i, (dom, classes) in enumerate(prepared.base_sources()):
        lcfg = replace(cfg.learner, seed=cfg.learner_seed(i))
        log.info("training %s learner on %s (%d classes)", cfg.learner_kind, dom.name, len(classes))
        model, curve = train_learner(cfg.learner_kind, [(dom, classes)], lcfg)
        path = save_learner(model, paths["ckpt"] / f"base_{dom.name}.json", lcfg.seed)
        curve.write_csv(paths["curves"] / f"base_{dom.name}.csv")
        members.append((dom.name, model.kind, path))
    if "single" in cfg.eval.baselines:
        lcfg = replace(cfg.learner, seed=cfg.learner_seed(999))
        log.info("training pooled single model on %d domains", len(prepared.base_sources()))
        model, curve = train_learner(cfg.learner_kind, prepared.base_sources(), lcfg)
        save_learner(model, paths["single"], lcfg.seed)
        curve.write_csv(paths["curves"] / "single.csv")
    return members


def _wpn_sources(cfg, prepared):
    src = [(d, w) for d, _, w in prepared.train]
    if prepared.target and cfg.target_wpn_split != "none":
        dom, t_train, t_val, _ = prepared.target
        src.append((dom, t_val if cfg.target_wpn_split == "val" else t_train))
    return src


def train_wpn_stage(cfg, prepared=None):
    prepared = prepared or prepare(cfg)
    paths = _paths(cfg.out)
    names = prepared.member_names()
    members = []
    for name in names:
        path = paths["ckpt"] / f"base_{name}.json"
        if not path.exists():
            raise FileNotFoundError(f"missing base checkpoint {path}; run train-base first")
        members.append((name, load_learner(path)))
    learners = [m for _, m in members]
    theta = WpnParams(cfg.learner.d_h, cfg.d_z, cfg.lam, rng=np.random.default_rng([cfg.seed, 77]))
    ensemble = EnsembleModel(learners, theta, cfg.mode, cfg.transductive, names)
    wcfg = replace(cfg.wpn, seed=cfg.seed, n_way=cfg.learner.n_way, k_shot=cfg.learner.k_shot, n_query=cfg.learner.n_query)
    log.info("training WPN for %d steps over %d domains", wcfg.steps, len(_wpn_sources(cfg, prepared)))
    theta, curve = train_wpn(ensemble, _wpn_sources(cfg, prepared), wcfg)
    save_wpn(theta, paths["wpn"], cfg.seed)
    curve.write_csv(paths["curves"] / "wpn.csv")
    write_manifest(
        paths["manifest"],
        [(n, m.kind, paths["ckpt"] / f"base_{n}.json") for n, m in members],
        paths["wpn"],
        cfg.mode,
        cfg.transductive,
    )
    return ensemble


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    model: str
    train_domains: str
    test_domain: str
    n_way: int
    k_shot: int
    queries: int
    accuracies: np.ndarray  # per-episode fraction correct
    learner_names: list = None
    weights: np.ndarray = None  # (episodes, M) mixture coefficients

    @property
    def episodes(self):
        return len(self.accuracies)

    @property
    def mean_acc(self):
        return 100.0 * float(np.mean(self.accuracies))

    @property
    def ci95(self):
        return ci95(self.accuracies)

    def coefficient_stats(self):
        if self.weights is None:
            return None
        return self.weights.mean(axis=0), self.weights.std(axis=0)


def ci95(accuracies):
    """Normal-approximation 95% half-width, in percent."""
    acc = 100.0 * np.asarray(accuracies, dtype=np.float64)
    if len(acc) < 2:
        return 0.0
    return 1.96 * float(np.std(acc, ddof=1)) / math.sqrt(len(acc))


def episode_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def _as_predictor(model):
    if isinstance(model, EnsembleModel):
        def predict(ep):
            probs, coef = mxml_predict(model, ep)
            return probs, coef.weights
        return predict
    if hasattr(model, "predict") and hasattr(model, "encoder"):
        return lambda ep: (np.exp(model.predict(ep)[0]), None)
    if callable(model):
        def predict(ep):
            out = model(ep)
            return out if isinstance(out, tuple) else (out, None)
        return predict
    raise TypeError(f"cannot evaluate {type(model).__name__}")


def _map_episodes(fn, count, workers):
    if workers <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def evaluate(model, domain, n_way, k_shot, n_query, episodes, seed, classes=None, name=None,
             train_domains="", workers=1):
    """Accuracy over ``episodes`` sampled episodes, with 95% CI and coefficient stats."""
    predict = _as_predictor(model)
    classes = domain.class_ids if classes is None else classes

    def one(i):
        ep = sample_episode(domain, classes, n_way, k_shot, n_query, episode_rng(seed, i))
        probs, weights = predict(ep)
        return float(np.mean(np.argmax(probs, axis=1) == ep.query_y)), weights

    rows = _map_episodes(one, episodes, workers)
    acc = np.array([r[0] for r in rows])
    weights = None if rows[0][1] is None else np.array([r[1] for r in rows])
    names = getattr(model, "names", None) if weights is not None else None
    return EvalResult(name or getattr(model, "kind", "model"), train_domains, domain.name, n_way, k_shot,
                      n_query, acc, names, weights)


def evaluate_suite(cfg, ensemble, single, prepared, progress=None):
    """Evaluate every enabled model on every meta-test domain over shared episodes."""
    ev = cfg.eval
    names = ensemble.names
    all_train = "+".join(names)
    wanted = set(ev.baselines)
    results = []
    for t, (dom, classes) in enumerate(prepared.tests):
        seed = ev.seed * 1000 + t

        def one(i):
            ep = sample_episode(dom, classes, ev.n_way, ev.k_shot, ev.n_query, episode_rng(seed, i))
            outs = learner_outputs(ensemble.learners, ep)
            y = ep.query_y
            row = {}
            if "dataset_specific" in wanted:
                for n, (lp, _) in zip(names, outs):
                    row[f"specific:{n}"] = (np.mean(np.argmax(lp, axis=1) == y), None)
            if "single" in wanted and single is not None:
                row["single"] = (np.mean(np.argmax(single.predict(ep)[0], axis=1) == y), None)
            if "uniform" in wanted:
                probs = np.mean([np.exp(lp) for lp, _ in outs], axis=0)
                row["uniform"] = (np.mean(np.argmax(probs, axis=1) == y), None)
            for key, trans in (("mxml_nontrans", False), ("mxml_trans", True)):
                if key in wanted:
                    probs, coef = mxml_predict(ensemble, ep, outs, transductive=trans)
                    row[key] = (np.mean(np.argmax(probs, axis=1) == y), coef.weights)
            return row

        rows = _map_episodes(one, ev.episodes, ev.workers)
        for key in rows[0]:
            acc = np.array([r[key][0] for r in rows], dtype=np.float64)
            weights = None if rows[0][key][1] is None else np.array([r[key][1] for r in rows])
            train_domains = key.split(":", 1)[1] if key.startswith("specific:") else all_train
            results.append(EvalResult(key, train_domains, dom.name, ev.n_way, ev.k_shot, ev.n_query, acc,
                                      list(names) if weights is not None else None, weights))
        if progress:
            progress(dom.name, results)
    return results


def eval_stage(cfg, prepared=None):
    prepared = prepared or prepare(cfg)
    paths = _paths(cfg.out)
    ensemble = load_manifest(paths["manifest"], mode=cfg.mode, transductive=cfg.transductive)
    single = load_learner(paths["single"]) if "single" in cfg.eval.baselines else None

    def flush(_name, results):
        write_episode_csvs(results, cfg.out)

    results = evaluate_suite(cfg, ensemble, single, prepared, progress=flush)
    write_episode_csvs(results, cfg.out)
    return results


# ---------------------------------------------------------------------------
# persistence of per-episode results and reports
# ---------------------------------------------------------------------------

def _g(x):
    return format(float(x), ".17g")


def write_episode_csvs(results, out):
    paths = _paths(out)
    paths["episodes"].parent.mkdir(parents=True, exist_ok=True)
    with paths["episodes"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPISODE_COLUMNS)
        for r in results:
            for i, a in enumerate(r.accuracies):
                w.writerow([r.model, r.train_domains, r.test_domain, r.n_way, r.k_shot, r.queries, i, _g(a)])
    with paths["weights"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WEIGHT_COLUMNS)
        for r in results:
            if r.weights is None:
                continue
            for i, row in enumerate(r.weights):
                for name, value in zip(r.learner_names, row):
                    w.writerow([r.model, r.test_domain, i, name, _g(value)])


def read_episode_csvs(out):
    """Rebuild EvalResults from the per-episode CSVs."""
    paths = _paths(out)
    groups = {}
    with paths["episodes"].open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["model"], row["test_domain"])
            g = groups.setdefault(key, {"row": row, "acc": {}})
            g["acc"][int(row["episode"])] = float(row["accuracy"])
    weights = {}
    if paths["weights"].exists():
        with paths["weights"].open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                key = (row["model"], row["test_domain"])
                weights.setdefault(key, {}).setdefault(int(row["episode"]), {})[row["learner"]] = float(row["weight"])
    results = []
    for key, g in groups.items():
        r = g["row"]
        acc = np.array([g["acc"][i] for i in sorted(g["acc"])])
        names = w = None
        if key in weights:
            per = weights[key]
            names = list(per[min(per)])
            w = np.array([[per[i][n] for n in names] for i in sorted(per)])
        results.append(EvalResult(r["model"], r["train_domains"], r["test_domain"], int(r["n_way"]),
                                  int(r["k_shot"]), int(r["queries"]), acc, names, w))
    return results


def _model_order(name):
    if name.startswith("specific:"):
        return (0, name)
    return (1 + ["single", "uniform", "mxml_nontrans", "mxml_trans"].index(name), name) if name in (
        "single", "uniform", "mxml_nontrans", "mxml_trans") else (9, name)


MODEL_LABELS = {
    "single": "Single model",
    "uniform": "Uniform averaging",
    "mxml_nontrans": "MxML (Non-trans.)",
    "mxml_trans": "MxML (Trans.)",
}


def emit_report(results, out, primary="mxml_trans", note=""):
    """Write results.csv, coefficients.csv and report.md under ``out``."""
    if not results:
        raise ValueError("emit_report needs at least one result")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results = sorted(results, key=lambda r: (_model_order(r.model), r.test_domain))
    with (out / "results.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_COLUMNS)
        for r in results:
            w.writerow([r.model, r.train_domains, r.test_domain, r.n_way, r.k_shot, r.queries, r.episodes,
                        f"{r.mean_acc:.6f}", f"{r.ci95:.6f}"])
    with (out / "coefficients.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COEF_COLUMNS)
        for r in results:
            if r.model != primary or r.weights is None:
                continue
            mean, std = r.coefficient_stats()
            for name, m, s in zip(r.learner_names, mean, std):
                w.writerow([r.test_domain, name, f"{m:.6f}", f"{s:.6f}", r.episodes])

    test_domains = sorted({r.test_domain for r in results})
    models = sorted({r.model for r in results}, key=_model_order)
    table = {(r.model, r.test_domain): r for r in results}
    first = results[0]
    lines = [
        "# Results",
        "",
        f"{first.n_way}-way {first.k_shot}-shot, {first.queries} queries, "
        f"{first.episodes} episodes per meta-test domain; accuracy % (95% CI half-width).",
    ]
    if note:
        lines += ["", note]
    lines += ["", "| Model | Meta-train | " + " | ".join(test_domains) + " |",
              "|---|---|" + "---|" * len(test_domains)]
    for m in models:
        label = MODEL_LABELS.get(m, m.split(":", 1)[0].replace("specific", "Dataset-specific"))
        trained = next(r.train_domains for r in results if r.model == m)
        cells = []
        for t in test_domains:
            r = table.get((m, t))
            cells.append(f"{r.mean_acc:.2f} ({r.ci95:.2f})" if r else "")
        lines.append(f"| {label} | {trained} | " + " | ".join(cells) + " |")
    coef = [r for r in results if r.model == primary and r.weights is not None]
    if coef:
        lines += ["", "## Mixture coefficients (mean ± std over episodes)", "",
                  "| Meta-test | " + " | ".join(coef[0].learner_names) + " |",
                  "|---|" + "---|" * len(coef[0].learner_names)]
        for r in sorted(coef, key=lambda r: r.test_domain):
            mean, std = r.coefficient_stats()
            lines.append(f"| {r.test_domain} | " + " | ".join(f"{m:.3f} ± {s:.3f}" for m, s in zip(mean, std)) + " |")
    (out / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out / "results.csv", out / "coefficients.csv", out / "report.md"


def read_results_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# full pipelines
# ---------------------------------------------------------------------------

def report_note(cfg):
    if cfg.eval.episodes != 600:
        return f"Evaluation used {cfg.eval.episodes} episodes per domain (reference protocol: 600)."
    return ""


def run_pipeline(cfg):
    """train-base -> train-wpn -> eval -> report, all under ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    prepared = prepare(cfg)
    train_base(cfg, prepared)
    train_wpn_stage(cfg, prepared)
    results = eval_stage(cfg, prepared)
    emit_report(results, out, cfg.primary_mxml(), report_note(cfg))
    return out


def in_distribution_protocol(cfg):
    if cfg.protocol != "in_distribution":
        cfg = replace(cfg, protocol="in_distribution")
        errors = cfg.validate()
        if errors:
            raise ConfigError(errors)
    run_pipeline(cfg)
    return read_episode_csvs(cfg.out)


def run_experiment(config_path, **overrides):
    cfg = apply_overrides(load_config(config_path), **overrides)
    return run_pipeline(cfg)


def save_resolved_config(cfg, path):
    """Debug aid: dump the resolved configuration as JSON."""
    def default(o):
        if isinstance(o, Path):
            return str(o)
        if hasattr(o, "__dataclass_fields__"):
            return {f.name: getattr(o, f.name) for f in fields(o)}
        return str(o)

    Path(path).write_text(json.dumps(cfg, default=default, indent=2, sort_keys=True) + "\n", encoding="utf-8")
