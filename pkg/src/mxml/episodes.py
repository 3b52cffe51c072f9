"""Domains, class splits, N-way K-shot episode sampling and CSV ingestion."""

import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

TRANSFORMS = ("rotation", "scaling", "warp")


class EpisodeError(ValueError):
    pass


class FeatureFileError(ValueError):
    pass


class RaggedRowError(FeatureFileError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for a synthetic domain.

    Classes are Gaussian clusters in a latent space whose centers vary only in
    the first ``n_informative`` coordinates; the remaining coordinates carry
    class-independent noise of scale ``sigma_nuisance``.  The latent points are
    then pushed through the domain transform.  ``transform_seed`` fixes the
    transform independently of the cluster draw, so two domains can share a
    transform while having unrelated classes.  ``transform_jitter`` perturbs the
    transform by a small random rotation (a related but distinct domain).
    """

    name: str
    n_classes: int = 20
    d_in: int = 16
    per_class: int = 50
    sigma_between: float = 3.0
    sigma_within: float = 0.5
    transform: str = "rotation"
    n_informative: int = 0  # 0 means all d_in coordinates
    sigma_nuisance: float = 0.0
    transform_seed: int = -1  # -1 means derive from the domain seed
    transform_jitter: float = 0.0
    jitter_seed: int = 0

    def validate(self):
        errors = []
        if self.n_classes < 10:
            errors.append(f"{self.name}: n_classes must be >= 10, got {self.n_classes}")
        if self.d_in < 1:
            errors.append(f"{self.name}: d_in must be positive")
        if self.per_class < 2:
            errors.append(f"{self.name}: per_class must be >= 2")
        if not self.sigma_between > 0 or not self.sigma_within > 0:
            errors.append(f"{self.name}: sigma_between and sigma_within must be positive")
        if self.sigma_nuisance < 0 or self.transform_jitter < 0:
            errors.append(f"{self.name}: sigma_nuisance and transform_jitter must be >= 0")
        if self.transform not in TRANSFORMS:
            errors.append(f"{self.name}: transform must be one of {TRANSFORMS}, got {self.transform!r}")
        if not 0 <= self.n_informative <= self.d_in:
            errors.append(f"{self.name}: n_informative must lie in [0, d_in]")
        return errors


@dataclass(frozen=True, eq=False)
class Domain:
    name: str
    features: np.ndarray  # (n_instances, d_in)
    labels: np.ndarray  # (n_instances,) integer class ids
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.features.setflags(write=False)
        self.labels.setflags(write=False)
        index = {int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}
        object.__setattr__(self, "_index", index)

    @property
    def d_in(self):
        return self.features.shape[1]

    @property
    def class_ids(self):
        return tuple(self._index)

    @property
    def n_classes(self):
        return len(self._index)

    def instances_of(self, class_id):
        """Row indices of the instances of ``class_id``."""
        return self._index[int(class_id)]

    @property
    def classes(self):
        return {c: self.features[idx] for c, idx in self._index.items()}


@dataclass(frozen=True)
class SplitConfig:
    base_fraction: float = 0.8
    wpn_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Episode:
    """Support rows are grouped by episode-local label: label n owns rows n*K .. n*K+K-1."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    k_shot: int
    n_query: int
    classes: tuple  # global class id for each local label
    support_idx: np.ndarray
    query_idx: np.ndarray


# ---------------------------------------------------------------------------
# synthetic domains
# ---------------------------------------------------------------------------

def _random_rotation(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _small_rotation(rng, d, angle):
    a = rng.standard_normal((d, d))
    skew = (a - a.T) / math.sqrt(2.0 * d)
    # Cayley map keeps the result exactly orthogonal.
    eye = np.eye(d)
    return np.linalg.solve(eye + 0.5 * angle * skew, eye - 0.5 * angle * skew)


def _domain_transform(spec, rng):
    d = spec.d_in
    rot = _random_rotation(rng, d)
    if spec.transform == "rotation":
        def apply(x):
            return x @ rot
    elif spec.transform == "scaling":
        scales = np.exp(rng.uniform(-1.0, 1.0, size=d))

        def apply(x):
            return (x * scales) @ rot
    else:
        w1 = rng.standard_normal((d, d)) / math.sqrt(d)
        w2 = rng.standard_normal((d, d)) / math.sqrt(d)
        scale = spec.sigma_between

        def apply(x):
            return (x + scale * np.tanh(x @ w1 / scale) @ w2) @ rot
    return apply


def make_synthetic_domain(spec, seed):
    """Generate a domain deterministically from ``(spec, seed)``."""
    errors = spec.validate()
    if errors:
        raise ValueError("; ".join(errors))
    seed = int(seed)
    t_seed = seed if spec.transform_seed < 0 else spec.transform_seed
    transform = _domain_transform(spec, np.random.default_rng([t_seed, 101]))
    rng = np.random.default_rng([seed, 202])

    d, r = spec.d_in, spec.n_informative or spec.d_in
    centers = np.zeros((spec.n_classes, d))
    centers[:, :r] = rng.normal(0.0, spec.sigma_between, size=(spec.n_classes, r))
    noise_scale = np.full(d, spec.sigma_within)
    noise_scale[r:] = math.hypot(spec.sigma_within, spec.sigma_nuisance)

    labels = np.repeat(np.arange(spec.n_classes), spec.per_class)
    latent = centers[labels] + rng.standard_normal((labels.size, d)) * noise_scale
    feats = transform(latent)
    if spec.transform_jitter > 0:
        jitter = _small_rotation(np.random.default_rng([spec.jitter_seed, 303]), d, spec.transform_jitter)
        feats = feats @ jitter
    meta = {"seed": seed, "spec": asdict(spec)}
    return Domain(spec.name, np.ascontiguousarray(feats), labels, meta)


# ---------------------------------------------------------------------------
# class splits
# ---------------------------------------------------------------------------

def partition_classes(domain, fractions, seed):
    """Randomly partition the domain's classes into disjoint subsets.

    Subset ``i`` gets ``round(fractions[i] * n_classes)`` classes.
    """
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions):
        raise ValueError(f"every split fraction must be positive, got {fractions}")
    if sum(fractions) > 1.0 + 1e-12:
        raise ValueError(f"split fractions sum to {sum(fractions):.6g} > 1")
    ids = np.array(domain.class_ids)
    if len(ids) < 2:
        raise ValueError("splitting needs at least 2 classes")
    sizes = [int(round(f * len(ids))) for f in fractions]
    if any(s == 0 for s in sizes):
        raise ValueError(f"split fractions {fractions} leave an empty subset for {len(ids)} classes")
    if sum(sizes) > len(ids):
        raise ValueError(f"split sizes {sizes} exceed {len(ids)} classes")
    perm = np.random.default_rng([int(seed), 404]).permutation(ids)
    out, start = [], 0
    for s in sizes:
        out.append(tuple(sorted(int(c) for c in perm[start:start + s])))
        start += s
    return tuple(out)


def split_classes(domain, cfg=SplitConfig()):
    """Split into (base-learner classes, WPN classes)."""
    return partition_classes(domain, (cfg.base_fraction, cfg.wpn_fraction), cfg.seed)


# ---------------------------------------------------------------------------
# episode sampling
# ---------------------------------------------------------------------------

def query_counts(n_way, n_query):
    """Queries per local label; the remainder goes to the lowest labels."""
    base, rem = divmod(n_query, n_way)
    return [base + (1 if n < rem else 0) for n in range(n_way)]


def sample_episode(domain, class_subset, n_way, k_shot, n_query, rng):
    class_subset = list(class_subset)
    if n_way < 1 or k_shot < 1 or n_query < 1:
        raise EpisodeError("N, K and L must be positive")
    if len(class_subset) < n_way:
        raise EpisodeError(f"{n_way}-way episode needs {n_way} classes, subset has {len(class_subset)}")
    need = k_shot + math.ceil(n_query / n_way)
    chosen = rng.choice(np.array(class_subset), size=n_way, replace=False)
    counts = query_counts(n_way, n_query)
    s_idx, q_idx, q_lab = [], [], []
    for label, cls in enumerate(chosen):
        pool = domain.instances_of(cls)
        if len(pool) < need:
            raise EpisodeError(f"class {cls} of {domain.name} has {len(pool)} instances, needs {need}")
        picked = rng.permutation(pool)[: k_shot + counts[label]]
        s_idx.append(picked[:k_shot])
        q_idx.append(picked[k_shot:])
        q_lab.append(np.full(counts[label], label))
    s_idx = np.concatenate(s_idx)
    order = rng.permutation(n_query)
    q_idx = np.concatenate(q_idx)[order]
    q_lab = np.concatenate(q_lab)[order]
    return Episode(
        support_x=domain.features[s_idx],
        support_y=np.repeat(np.arange(n_way), k_shot),
        query_x=domain.features[q_idx],
        query_y=q_lab,
        n_way=n_way,
        k_shot=k_shot,
        n_query=n_query,
        classes=tuple(int(c) for c in chosen),
        support_idx=s_idx,
        query_idx=q_idx,
    )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def load_feature_dataset(path, name=None):
    """Read a ``label,f0,...,f{d-1}`` CSV into a Domain."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FeatureFileError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        expected = ["label"] + [f"f{i}" for i in range(len(header) - 1)]
        if len(header) < 2 or header != expected:
            raise FeatureFileError(f"{path}: unknown header {header[:4]}...; expected label,f0,f1,...")
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RaggedRowError(f"{path}:{lineno}: {len(row)} columns, header has {len(header)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise FeatureFileError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise FeatureFileError(f"{path}: no instances")
    feats = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(feats)):
        raise FeatureFileError(f"{path}: non-finite feature value")
    return Domain(name or path.stem, feats, np.array(labels, dtype=np.int64), {"source": str(path)})


def export_feature_dataset(domain, path):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{i}" for i in range(domain.d_in)])
        for label, row in zip(domain.labels, domain.features):
            writer.writerow([int(label)] + [format(float(v), ".17g") for v in row])
    return path
