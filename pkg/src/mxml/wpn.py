"""Weight prediction network: scores how well a base learner fits an episode.

Each class's support embeddings are average-pooled and mapped by one dense
layer to a diagonal Gaussian ``(mu, log_var)`` in a ``d_z``-dimensional latent
space.  Queries are mapped to the same space by a bias-free linear layer.  The
raw score of a learner is the mean pairwise KL divergence between its class
Gaussians (separability), plus, in the transductive setting, ``lam`` times the
sum over queries of the log of a smooth max of the per-class query densities
(confidence).  The smooth max is taken in log space as a logsumexp.
"""

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_params, save_params
from .tensor import (
    Tensor,
    as_tensor,
    clip,
    exp,
    gauss_logpdf,
    logsumexp,
    pairwise_kl,
    stack,
    tsum,
)

LOGVAR_MIN = math.log(1e-6)
LOGVAR_MAX = math.log(1e6)


@dataclass
class ClassGaussian:
    mu: Tensor
    log_var: Tensor
    label: int = 0
    learner: int = 0


class WpnParams:
    """Parameters ``theta``: class encoder (d_h -> 2 d_z) and query projection (d_h -> d_z)."""

    def __init__(self, d_h, d_z=128, lam=0.1, rng=None, zero=False):
        if d_z <= 0:
            raise ValueError("d_z must be positive")
        if lam < 0:
            raise ValueError("lam must be nonnegative")
        self.d_h, self.d_z, self.lam = int(d_h), int(d_z), float(lam)
        if zero:
            arrays = [np.zeros((d_h, 2 * d_z)), np.zeros(2 * d_z), np.zeros((d_h, d_z))]
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            bound = 1.0 / math.sqrt(d_h)
            arrays = [
                rng.uniform(-bound, bound, size=(d_h, 2 * d_z)),
                rng.uniform(-bound, bound, size=2 * d_z),
                rng.uniform(-bound, bound, size=(d_h, d_z)),
            ]
        self.class_w, self.class_b, self.query_w = (Tensor(a, requires_grad=True) for a in arrays)

    @property
    def params(self):
        return [self.class_w, self.class_b, self.query_w]

    def named_params(self):
        return {"wpn.class_W": self.class_w.data, "wpn.class_b": self.class_b.data, "wpn.query_W": self.query_w.data}

    def architecture(self):
        return {"d_h": self.d_h, "d_z": self.d_z, "lam": self.lam}

    def copy(self):
        other = WpnParams(self.d_h, self.d_z, self.lam, zero=True)
        for dst, src in zip(other.params, self.params):
            dst.data = src.data.copy()
        return other


def class_gaussians(theta, support):
    """Batched class encoder: ``support`` (N, K, d_h) -> (mu, log_var), each (N, d_z)."""
    support = as_tensor(support)
    if support.ndim != 3 or support.shape[1] == 0:
        raise ValueError(f"support embeddings must be (N, K>0, d_h), got {support.shape}")
    if support.shape[2] != theta.d_h:
        raise ValueError(f"embedding dimension {support.shape[2]} != {theta.d_h}")
    pooled = support.mean(axis=1)
    out = pooled @ theta.class_w + theta.class_b
    d_z = theta.d_z
    return out[:, :d_z], clip(out[:, d_z:], LOGVAR_MIN, LOGVAR_MAX)


def encode_class_distribution(theta, group, label=0, learner=0):
    """Gaussian for one class from its K support embeddings (K, d_h)."""
    group = as_tensor(group)
    if group.ndim != 2 or group.shape[0] == 0:
        raise ValueError("class group must be a non-empty (K, d_h) array")
    mu, lv = class_gaussians(theta, group.reshape(1, *group.shape))
    return ClassGaussian(mu[0], lv[0], label, learner)


def encode_query_latent(theta, queries):
    queries = as_tensor(queries)
    if queries.shape[-1] != theta.d_h:
        raise ValueError(f"query dimension {queries.shape[-1]} != {theta.d_h}")
    if queries.ndim == 1:
        return (queries.reshape(1, -1) @ theta.query_w)[0]
    return queries @ theta.query_w


def kl_diag_gaussian(p, q):
    """Closed-form KL(p || q) for diagonal Gaussians, built from elementwise ops."""
    if p.mu.shape != q.mu.shape:
        raise ValueError("Gaussians differ in dimension")
    for t in (p.mu, p.log_var, q.mu, q.log_var):
        if not np.all(np.isfinite(as_tensor(t).data)):
            raise ValueError("non-finite Gaussian parameters")
    diff = q.mu - p.mu
    terms = exp(p.log_var - q.log_var) + diff * diff * exp(-q.log_var) - 1.0 + q.log_var - p.log_var
    return 0.5 * tsum(terms)


def _stack_gaussians(gaussians):
    return stack([g.mu for g in gaussians]), stack([g.log_var for g in gaussians])


def pairwise_kl_term(mu, log_var=None):
    """(1/N^2) sum over ordered pairs (i, j) of KL(q_i || q_j).

    Accepts either stacked ``(mu, log_var)`` arrays of shape (N, d_z) or a list
    of :class:`ClassGaussian`.
    """
    if log_var is None:
        mu, log_var = _stack_gaussians(mu)
    n = mu.shape[0]
    if n < 2:
        raise ValueError("pairwise KL term needs at least 2 classes")
    return tsum(pairwise_kl(mu, log_var)) * (1.0 / (n * n))


def query_log_densities(z, mu, log_var):
    """(L, N) matrix of log q(z_k | class n)."""
    return gauss_logpdf(z, mu, log_var)


def query_density_term(z, mu, log_var=None):
    """Sum over queries of logsumexp over classes of the query log-densities."""
    if log_var is None:
        mu, log_var = _stack_gaussians(mu)
    z = as_tensor(z)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    return tsum(logsumexp(query_log_densities(z, mu, log_var), axis=1))


def wpn_score(theta, support, query, transductive=True):
    """Raw score ``w_m`` for one learner's episode representation.

    ``support`` is (N, K, d_h), ``query`` is (L, d_h).  The non-transductive
    score ignores ``query`` entirely.
    """
    mu, lv = class_gaussians(theta, support)
    score = pairwise_kl_term(mu, lv)
    if transductive and theta.lam > 0:
        z = encode_query_latent(theta, query)
        score = score + theta.lam * query_density_term(z, mu, lv)
    return score


def save_wpn(theta, path, rng_seed=0):
    return save_params(theta.named_params(), path, "wpn", theta.architecture(), rng_seed)


def load_wpn(path):
    ckpt = load_params(path)
    if ckpt.model_kind != "wpn":
        raise ValueError(f"{path}: expected a wpn checkpoint, found {ckpt.model_kind!r}")
    arch = ckpt.architecture
    d_h, d_z = int(arch["d_h"]), int(arch["d_z"])
    shapes = {"wpn.class_W": (d_h, 2 * d_z), "wpn.class_b": (2 * d_z,), "wpn.query_W": (d_h, d_z)}
    ckpt = load_params(path, expected_shapes=shapes)
    theta = WpnParams(d_h, d_z, float(arch["lam"]), zero=True)
    theta.class_w.data = ckpt.params["wpn.class_W"]
    theta.class_b.data = ckpt.params["wpn.class_b"]
    theta.query_w.data = ckpt.params["wpn.query_W"]
    return theta

