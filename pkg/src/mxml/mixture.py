"""MxML: task-adaptive mixture of frozen base learners.

For an episode every base learner yields query class probabilities and an
episode representation.  The WPN turns each representation into a raw score;
scores are combined with the probabilities in one of two modes:

``normalized`` (default)
    coefficients = softmax over learners of the raw scores, prediction is the
    convex combination of the learners' probability vectors.
``paper_literal``
    prediction = softmax over classes of the score-weighted sum of the
    probability vectors; softmax(scores) is reported for logging only.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .episodes import sample_episode
from .learners import TrainingCurve, load_learner, train_learner
from .optim import Adam
from .tensor import Tensor, backward, cross_entropy, log_softmax, logsumexp, no_grad, stack
from .wpn import WpnParams, load_wpn, wpn_score

log = logging.getLogger(__name__)

MODES = ("normalized", "paper_literal")


@dataclass
class MixtureCoefficients:
    raw: np.ndarray  # (M,) raw WPN scores
    weights: np.ndarray  # (M,) softmax of the raw scores


@dataclass
class EnsembleModel:
    learners: list
    wpn: WpnParams
    mode: str = "normalized"
    transductive: bool = True
    names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learners:
            raise ValueError("an ensemble needs at least one learner")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.names:
            self.names = [f"learner{i}" for i in range(len(self.learners))]


@dataclass
class WpnTrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    n_way: int = 10
    k_shot: int = 5
    n_query: int = 15
    seed: int = 0
    log_every: int = 100


def learner_outputs(learners, episode):
    """Frozen per-learner (log-probabilities, representation) for one episode."""
    return [learner.predict(episode) for learner in learners]


def _softmax(x):
    e = np.exp(x - np.max(x))
    return e / e.sum()


def mixture_log_probs(theta, outputs, mode="normalized", transductive=True):
    """Differentiable (wrt ``theta``) log of the mixture prediction, plus raw scores."""
    scores = stack([wpn_score(theta, rep.support, rep.query, transductive) for _, rep in outputs])
    log_p = np.stack([lp for lp, _ in outputs])  # (M, L, N)
    m, L, n = log_p.shape
    if mode == "normalized":
        joint = log_softmax(scores).reshape(m, 1, 1) + Tensor(log_p)
        return logsumexp(joint, axis=0), scores
    if mode == "paper_literal":
        probs = np.exp(log_p).reshape(m, L * n)
        mixed = (scores.reshape(m, 1) * Tensor(probs)).sum(axis=0)
        return log_softmax(mixed.reshape(L, n)), scores
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def mixture_loss(theta, outputs, labels, mode="normalized", transductive=True):
    """Mean query cross-entropy of the mixture prediction."""
    logp, scores = mixture_log_probs(theta, outputs, mode, transductive)
    return cross_entropy(logp, labels), logp, scores


def mxml_predict(ensemble, episode, outputs=None, transductive=None):
    if outputs is None:
        outputs = learner_outputs(ensemble.learners, episode)
    trans = ensemble.transductive if transductive is None else transductive
    with no_grad():
        logp, scores = mixture_log_probs(ensemble.wpn, outputs, ensemble.mode, trans)
    probs = np.exp(logp.data)
    return probs, MixtureCoefficients(scores.data.copy(), _softmax(scores.data))


def uniform_average_predict(learners, episode, outputs=None):
    if outputs is None:
        outputs = learner_outputs(learners, episode)
    return np.mean([np.exp(lp) for lp, _ in outputs], axis=0)


def train_wpn(ensemble, sources, cfg=WpnTrainConfig()):
    """Optimize the ensemble's WPN on episodes from ``sources``.

    ``sources`` is a list of ``(domain, wpn_classes)``.  Each step picks a
    source uniformly, samples an episode, and takes one Adam step on the mean
    query cross-entropy of the mixture.  Base learners are only evaluated.
    Returns the (updated in place) WPN parameters and the loss curve.
    """
    theta = ensemble.wpn
    sources = list(sources)
    if not sources:
        raise ValueError("train_wpn needs at least one source domain")
    dom_rng = np.random.default_rng([cfg.seed, 11])
    ep_rng = np.random.default_rng([cfg.seed, 12])
    opt = Adam(theta.params, lr=cfg.lr)
    curve = TrainingCurve()
    window_loss, window_acc = [], []
    for step in range(cfg.steps):
        dom, classes = sources[dom_rng.integers(len(sources))]
        episode = sample_episode(dom, classes, cfg.n_way, cfg.k_shot, cfg.n_query, ep_rng)
        outputs = learner_outputs(ensemble.learners, episode)
        opt.zero_grad()
        loss, logp, _ = mixture_loss(theta, outputs, episode.query_y, ensemble.mode, ensemble.transductive)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"WPN loss became non-finite at step {step} on domain {dom.name}")
        backward(loss)
        opt.step()
        window_loss.append(value)
        window_acc.append(np.mean(np.argmax(logp.data, axis=1) == episode.query_y))
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
            curve.append(step + 1, np.mean(window_loss), np.mean(window_acc))
            log.debug("wpn step %d loss %.4f", step + 1, curve.rows[-1][1])
            window_loss, window_acc = [], []
    opt.zero_grad()
    return theta, curve


def single_pooled_train(sources, cfg, kind="protonet"):
    """One learner trained on episodes whose source domain is drawn uniformly."""
    return train_learner(kind, sources, cfg)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_manifest(path, members, wpn_path, mode, transductive):
    """``members`` is a list of ``(name, kind, checkpoint_path)``."""
    path = Path(path)
    base = path.parent
    doc = {
        "format_version": 1,
        "members": [
            {"name": n, "kind": k, "checkpoint": str(Path(p).relative_to(base)) if Path(p).is_relative_to(base) else str(p)}
            for n, k, p in members
        ],
        "wpn": str(Path(wpn_path).relative_to(base)) if Path(wpn_path).is_relative_to(base) else str(wpn_path),
        "mode": mode,
        "transductive": bool(transductive),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest(path, mode=None, transductive=None):
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format_version") != 1:
        raise ValueError(f"{path}: unsupported manifest version {doc.get('format_version')!r}")
    base = path.parent
    learners, names = [], []
    for member in doc["members"]:
        learner = load_learner(base / member["checkpoint"])
        if learner.kind != member["kind"]:
            raise ValueError(f"{member['name']}: manifest says {member['kind']}, checkpoint is {learner.kind}")
        learners.append(learner)
        names.append(member["name"])
    return EnsembleModel(
        learners,
        load_wpn(base / doc["wpn"]),
        mode=mode or doc["mode"],
        transductive=doc["transductive"] if transductive is None else transductive,
        names=names,
    )
