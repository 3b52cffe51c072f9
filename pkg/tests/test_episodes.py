import numpy as np
import pytest

from mxml.episodes import (
    DomainSpec,
    EpisodeError,
    FeatureFileError,
    RaggedRowError,
    SplitConfig,
    export_feature_dataset,
    load_feature_dataset,
    make_synthetic_domain,
    partition_classes,
    query_counts,
    sample_episode,
    split_classes,
)

SPEC = DomainSpec("d", n_classes=20, d_in=16, per_class=50, sigma_between=3.0, sigma_within=0.5, transform="rotation")


def test_counts():
    dom = make_synthetic_domain(SPEC, seed=7)
    assert dom.features.shape == (1000, 16)
    assert dom.n_classes == 20


def test_same_seed_is_bitwise_identical():
    a, b = make_synthetic_domain(SPEC, 7), make_synthetic_domain(SPEC, 7)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = make_synthetic_domain(SPEC, 8)
    assert a.features.tobytes() != c.features.tobytes()


@pytest.mark.parametrize("transform", ["rotation", "scaling", "warp"])
def test_nearest_centroid_oracle_on_held_out_instances(transform):
    spec = DomainSpec("d", 20, 16, 50, sigma_between=3.0, sigma_within=0.5, transform=transform)
    dom = make_synthetic_domain(spec, 3)
    rng = np.random.default_rng(0)
    train, test = [], []
    for c in dom.class_ids:
        idx = rng.permutation(dom.instances_of(c))
        train.append(idx[:25])
        test.append(idx[25:])
    centroids = np.stack([dom.features[i].mean(axis=0) for i in train])
    test = np.concatenate(test)
    d = ((dom.features[test][:, None, :] - centroids[None]) ** 2).sum(-1)
    acc = np.mean(np.array(dom.class_ids)[d.argmin(1)] == dom.labels[test])
    assert acc > 0.95


def test_shared_transform_seed_gives_same_transform():
    s1 = DomainSpec("a", transform_seed=5, sigma_within=0.5)
    s2 = DomainSpec("b", transform_seed=5, sigma_within=0.5)
    # same cluster seed too: identical data despite different names
    assert make_synthetic_domain(s1, 1).features.tobytes() == make_synthetic_domain(s2, 1).features.tobytes()


def test_spec_validation_lists_errors():
    errors = DomainSpec("x", n_classes=3, d_in=0, transform="shear").validate()
    assert len(errors) >= 3
    with pytest.raises(ValueError):
        make_synthetic_domain(DomainSpec("x", n_classes=3), 0)


def test_split_sizes_and_disjoint():
    dom = make_synthetic_domain(SPEC, 0)
    base, wpn = split_classes(dom, SplitConfig(0.8, 0.2, seed=1))
    assert (len(base), len(wpn)) == (16, 4)
    assert not set(base) & set(wpn)


def test_split_rejects_empty_subset():
    dom = make_synthetic_domain(SPEC, 0)
    with pytest.raises(ValueError):
        split_classes(dom, SplitConfig(1.0, 0.0))


def test_split_rejects_oversubscription():
    with pytest.raises(ValueError):
        partition_classes(make_synthetic_domain(SPEC, 0), (0.7, 0.2, 0.2), 0)


def test_partitions_disjoint_over_seeds():
    dom = make_synthetic_domain(DomainSpec("t", n_classes=100, per_class=5), 0)
    for seed in range(100):
        parts = partition_classes(dom, (0.64, 0.16, 0.20), seed)
        assert [len(p) for p in parts] == [64, 16, 20]
        union = [c for p in parts for c in p]
        assert len(union) == len(set(union)) == 100


def test_episode_shapes():
    dom = make_synthetic_domain(SPEC, 0)
    ep = sample_episode(dom, dom.class_ids, 10, 5, 15, np.random.default_rng(0))
    assert ep.support_x.shape == (50, 16)
    assert ep.query_x.shape == (15, 16)
    assert list(ep.support_y) == [n for n in range(10) for _ in range(5)]
    np.testing.assert_array_equal(np.bincount(ep.query_y, minlength=10), query_counts(10, 15))


def test_query_counts_remainder():
    assert query_counts(10, 15) == [2] * 5 + [1] * 5
    assert query_counts(5, 15) == [3] * 5


def test_full_subset_uses_every_class():
    dom = make_synthetic_domain(SPEC, 0)
    subset = dom.class_ids[:10]
    ep = sample_episode(dom, subset, 10, 1, 10, np.random.default_rng(1))
    assert sorted(ep.classes) == sorted(subset)


def test_support_and_query_disjoint():
    dom = make_synthetic_domain(SPEC, 0)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ep = sample_episode(dom, dom.class_ids, 10, 5, 15, rng)
        assert not set(ep.support_idx) & set(ep.query_idx)
        # labels line up with the chosen global classes
        assert np.all(dom.labels[ep.support_idx] == np.array(ep.classes)[ep.support_y])
        assert np.all(dom.labels[ep.query_idx] == np.array(ep.classes)[ep.query_y])


def test_infeasible_episodes():
    dom = make_synthetic_domain(DomainSpec("s", n_classes=10, per_class=4), 0)
    with pytest.raises(EpisodeError):
        sample_episode(dom, dom.class_ids[:4], 5, 1, 5, np.random.default_rng(0))
    with pytest.raises(EpisodeError):
        sample_episode(dom, dom.class_ids, 5, 4, 5, np.random.default_rng(0))


def test_csv_three_rows(tmp_path):
    p = tmp_path / "tiny.csv"
    p.write_text("label,f0,f1\n0,1.0,2.0\n1,0.5,0.5\n0,1.5,2.5\n")
    dom = load_feature_dataset(p)
    assert dom.n_classes == 2
    assert dom.features.shape == (3, 2)


def test_csv_ragged_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("label,f0,f1\n0,1.0,2.0\n1,0.5\n")
    with pytest.raises(RaggedRowError):
        load_feature_dataset(p)


def test_csv_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("y,a,b\n0,1,2\n")
    with pytest.raises(FeatureFileError):
        load_feature_dataset(p)


def test_csv_round_trip(tmp_path):
    dom = make_synthetic_domain(SPEC, 4)
    back = load_feature_dataset(export_feature_dataset(dom, tmp_path / "d.csv"))
    np.testing.assert_array_equal(back.features, dom.features)
    np.testing.assert_array_equal(back.labels, dom.labels)
