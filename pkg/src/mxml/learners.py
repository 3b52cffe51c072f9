"""Dataset-specific base meta-learners.

Two kinds share a dense ReLU encoder whose outputs are L2-normalized before
anything downstream sees them:

* ``ProtoNet`` classifies a query by softmax over negative squared distances to
  the per-class means of the normalized support embeddings.
* ``Fomaml`` adapts encoder plus a zero-initialized linear head on the support
  set with a few SGD steps, then classifies queries with the adapted head.  The
  outer update is first order: query-loss gradients at the adapted parameters
  are applied to the meta-parameters directly.

Both return, per episode, query log-probabilities and an
:class:`EpisodeRepresentation` (normalized support embeddings grouped by class,
normalized query embeddings).
"""

import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .checkpoint import load_params, save_params
from .episodes import sample_episode
from .optim import Adam
from .tensor import (
    Tensor,
    backward,
    cross_entropy,
    l2_normalize,
    log_softmax,
    no_grad,
    relu,
    sqdist,
)

log = logging.getLogger(__name__)

LEARNER_KINDS = ("protonet", "fomaml")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class EpisodeRepresentation:
    support: np.ndarray  # (N, K, d_h), row n holds the class-n support embeddings
    query: np.ndarray  # (L, d_h)


@dataclass
class TrainConfig:
    epochs: int = 20
    episodes_per_epoch: int = 100
    n_way: int = 10
    k_shot: int = 5
    n_query: int = 15
    lr: float = 1e-3
    lr_final: float = 1e-4
    decay_at: float = 0.7
    meta_batch: int = 2
    inner_lr: float = 3e-2
    inner_steps: int = 5
    hidden: tuple = (64, 64)
    d_h: int = 64
    seed: int = 0

    def validate(self):
        errors = []
        for name in ("epochs", "episodes_per_epoch", "n_way", "k_shot", "n_query", "meta_batch", "d_h"):
            if getattr(self, name) < 1:
                errors.append(f"learner.{name} must be positive")
        if self.inner_steps < 0:
            errors.append("learner.inner_steps must be >= 0")
        if not (self.lr > 0 and self.lr_final > 0 and self.lr_final <= self.lr):
            errors.append("learner learning rates must be positive and non-increasing")
        if not 0 < self.decay_at <= 1:
            errors.append("learner.decay_at must lie in (0, 1]")
        if self.inner_lr < 0:
            errors.append("learner.inner_lr must be >= 0")
        return errors

    def lr_at(self, epoch):
        return self.lr if epoch < round(self.decay_at * self.epochs) else self.lr_final


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def _dense_init(rng, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), rng.uniform(-bound, bound, size=fan_out)


def mlp_forward(params, x):
    """Dense stack with ReLU between layers; ``params`` is [W0, b0, W1, b1, ...]."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    n_layers = len(params) // 2
    for i in range(n_layers):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = relu(h)
    return h


class Encoder:
    def __init__(self, sizes, rng=None, params=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("encoder needs at least input and output sizes")
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = []
            for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
                w, b = _dense_init(rng, fan_in, fan_out)
                params += [w, b]
        self.params = [p if isinstance(p, Tensor) else Tensor(p, requires_grad=True) for p in params]

    @classmethod
    def identity(cls, d):
        """Single d -> d layer with identity weights and zero bias."""
        return cls((d, d), params=[np.eye(d), np.zeros(d)])

    @property
    def d_in(self):
        return self.sizes[0]

    @property
    def d_h(self):
        return self.sizes[-1]

    def named_params(self):
        out = {}
        for i in range(len(self.params) // 2):
            out[f"enc.W{i}"] = self.params[2 * i].data
            out[f"enc.b{i}"] = self.params[2 * i + 1].data
        return out

    def raw(self, x, params=None):
        x = np.asarray(x, dtype=np.float64) if not isinstance(x, Tensor) else x
        if x.shape[-1] != self.d_in:
            raise ValueError(f"instance dimension {x.shape[-1]} does not match encoder input {self.d_in}")
        return mlp_forward(self.params if params is None else params, x)

    def __call__(self, x, params=None):
        return l2_normalize(self.raw(x, params))


def encode(encoder, instances):
    """Normalized embeddings of ``instances`` as a plain array."""
    with no_grad():
        return encoder(instances).data


# ---------------------------------------------------------------------------
# prototypical network
# ---------------------------------------------------------------------------

class ProtoNet:
    kind = "protonet"

    def __init__(self, encoder):
        self.encoder = encoder

    @property
    def params(self):
        return self.encoder.params

    def architecture(self):
        return {"kind": self.kind, "sizes": list(self.encoder.sizes)}

    def log_probs(self, episode, params=None):
        """Differentiable query log-probs plus the support/query embeddings."""
        n, k = episode.n_way, episode.k_shot
        s_emb = self.encoder(episode.support_x, params)
        q_emb = self.encoder(episode.query_x, params)
        protos = s_emb.reshape(n, k, -1).mean(axis=1)
        return log_softmax(-sqdist(q_emb, protos)), s_emb, q_emb

    def predict(self, episode):
        return proto_predict(self, episode)


def proto_predict(model, episode):
    with no_grad():
        logp, s_emb, q_emb = model.log_probs(episode)
    rep = EpisodeRepresentation(s_emb.data.reshape(episode.n_way, episode.k_shot, -1), q_emb.data)
    return logp.data, rep


# ---------------------------------------------------------------------------
# first-order MAML
# ---------------------------------------------------------------------------

class Fomaml:
    kind = "fomaml"

    def __init__(self, encoder, inner_steps=5, inner_lr=3e-2):
        self.encoder = encoder
        self.inner_steps = int(inner_steps)
        self.inner_lr = float(inner_lr)

    @property
    def params(self):
        return self.encoder.params

    def architecture(self):
        return {
            "kind": self.kind,
            "sizes": list(self.encoder.sizes),
            "inner_steps": self.inner_steps,
            "inner_lr": self.inner_lr,
        }

    def logits(self, params, x):
        """Head applied to the raw (unnormalized) encoder output."""
        return self.encoder.raw(x, params[:-2]) @ params[-2] + params[-1]

    def predict(self, episode):
        return fomaml_predict(self, episode)


def fomaml_adapt(model, episode, steps=None, inner_lr=None):
    """Plain SGD on the support cross-entropy from the meta-parameters.

    Returns the adapted parameter arrays ``[encoder..., W_head, b_head]``; the
    model itself is untouched.
    """
    steps = model.inner_steps if steps is None else int(steps)
    inner_lr = model.inner_lr if inner_lr is None else float(inner_lr)
    d_h, n = model.encoder.d_h, episode.n_way
    params = [p.data for p in model.encoder.params] + [np.zeros((d_h, n)), np.zeros(n)]
    for step in range(steps):
        leaves = [Tensor(a, requires_grad=True) for a in params]
        loss = cross_entropy(log_softmax(model.logits(leaves, episode.support_x)), episode.support_y)
        if not np.isfinite(loss.data):
            raise TrainingDivergedError(f"support loss became non-finite at inner step {step}")
        backward(loss)
        params = [a - inner_lr * leaf.grad for a, leaf in zip(params, leaves)]
    return params


def fomaml_predict(model, episode, adapted=None):
    if adapted is None:
        adapted = fomaml_adapt(model, episode)
    with no_grad():
        logp = log_softmax(model.logits(adapted, episode.query_x)).data
        s_emb = model.encoder(episode.support_x, adapted[:-2]).data
        q_emb = model.encoder(episode.query_x, adapted[:-2]).data
    rep = EpisodeRepresentation(s_emb.reshape(episode.n_way, episode.k_shot, -1), q_emb)
    return logp, rep


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainingCurve:
    rows: list = field(default_factory=list)  # (epoch, mean_loss, mean_acc)

    def append(self, epoch, loss, acc):
        self.rows.append((epoch, float(loss), float(acc)))

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss", "mean_acc"])
            for epoch, loss, acc in self.rows:
                w.writerow([epoch, f"{loss:.10f}", f"{acc:.10f}"])
        return path


def new_learner(kind, d_in, cfg, rng):
    encoder = Encoder((d_in, *cfg.hidden, cfg.d_h), rng)
    if kind == "protonet":
        return ProtoNet(encoder)
    if kind == "fomaml":
        return Fomaml(encoder, cfg.inner_steps, cfg.inner_lr)
    raise ValueError(f"unknown learner kind {kind!r}; expected one of {LEARNER_KINDS}")


def _check_loss(loss, epoch, episode_no, tag):
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"{tag}: loss {loss} at epoch {epoch}, episode {episode_no}")


def _proto_step(model, episode):
    logp, _, _ = model.log_probs(episode)
    loss = cross_entropy(logp, episode.query_y)
    acc = np.mean(np.argmax(logp.data, axis=1) == episode.query_y)
    return loss, acc


def _fomaml_grads(model, episode):
    adapted = fomaml_adapt(model, episode)
    leaves = [Tensor(a, requires_grad=True) for a in adapted]
    logp = log_softmax(model.logits(leaves, episode.query_x))
    loss = cross_entropy(logp, episode.query_y)
    backward(loss)
    acc = np.mean(np.argmax(logp.data, axis=1) == episode.query_y)
    n_enc = len(model.encoder.params)
    return [leaf.grad for leaf in leaves[:n_enc]], float(loss.data), acc


def train_learner(kind, sources, cfg):
    """Episodic training over one or more ``(domain, class_subset)`` sources.

    Each episode's source is drawn uniformly; with a single source no draw is
    made, so one source reproduces single-domain training exactly.
    """
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))
    sources = list(sources)
    d_in = sources[0][0].d_in
    if any(dom.d_in != d_in for dom, _ in sources):
        raise ValueError("all training domains must share the input dimension")
    model = new_learner(kind, d_in, cfg, np.random.default_rng([cfg.seed, 0]))
    dom_rng = np.random.default_rng([cfg.seed, 1])
    ep_rng = np.random.default_rng([cfg.seed, 2])
    opt = Adam(model.params, lr=cfg.lr)
    curve = TrainingCurve()

    def next_episode():
        dom, classes = sources[0] if len(sources) == 1 else sources[dom_rng.integers(len(sources))]
        return sample_episode(dom, classes, cfg.n_way, cfg.k_shot, cfg.n_query, ep_rng)

    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        losses, accs = [], []
        for i in range(cfg.episodes_per_epoch):
            if kind == "protonet":
                opt.zero_grad()
                loss, acc = _proto_step(model, next_episode())
                _check_loss(float(loss.data), epoch, i, "protonet")
                backward(loss)
                opt.step()
                losses.append(float(loss.data))
            else:
                total = None
                batch_loss = 0.0
                for _ in range(cfg.meta_batch):
                    grads, loss, acc = _fomaml_grads(model, next_episode())
                    _check_loss(loss, epoch, i, "fomaml")
                    total = grads if total is None else [t + g for t, g in zip(total, grads)]
                    batch_loss += loss / cfg.meta_batch
                opt.step([g / cfg.meta_batch for g in total])
                losses.append(batch_loss)
            accs.append(acc)
        curve.append(epoch, np.mean(losses), np.mean(accs))
        log.debug("%s epoch %d loss %.4f acc %.3f", kind, epoch, curve.rows[-1][1], curve.rows[-1][2])
    opt.zero_grad()
    return model, curve


def proto_train(domain, base_classes, cfg):
    return train_learner("protonet", [(domain, base_classes)], cfg)


def fomaml_train(domain, base_classes, cfg):
    return train_learner("fomaml", [(domain, base_classes)], cfg)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_learner(model, path, rng_seed=0):
    return save_params(model.encoder.named_params(), path, model.kind, model.architecture(), rng_seed)


def load_learner(path):
    ckpt = load_params(path)
    arch = ckpt.architecture
    sizes = arch.get("sizes")
    if ckpt.model_kind not in LEARNER_KINDS or not sizes:
        raise ValueError(f"{path}: not a base-learner checkpoint (kind {ckpt.model_kind!r})")
    expected = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        expected[f"enc.W{i}"] = (a, b)
        expected[f"enc.b{i}"] = (b,)
    ckpt = load_params(path, expected_shapes=expected)
    params = []
    for i in range(len(sizes) - 1):
        params += [ckpt.params[f"enc.W{i}"], ckpt.params[f"enc.b{i}"]]
    encoder = Encoder(sizes, params=params)
    if ckpt.model_kind == "protonet":
        return ProtoNet(encoder)
    return Fomaml(encoder, arch.get("inner_steps", 5), arch.get("inner_lr", 3e-2))


def config_dict(cfg):
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
