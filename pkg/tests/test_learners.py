import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from mxml.episodes import DomainSpec, Episode, SplitConfig, make_synthetic_domain, sample_episode, split_classes
from mxml.learners import (
    Encoder,
    Fomaml,
    ProtoNet,
    TrainConfig,
    encode,
    fomaml_adapt,
    fomaml_predict,
    fomaml_train,
    load_learner,
    proto_predict,
    proto_train,
    save_learner,
)
from mxml.tensor import cross_entropy, log_softmax, no_grad

SEPARABLE = DomainSpec("sep", n_classes=20, d_in=8, per_class=40, sigma_between=3.0, sigma_within=0.5)
SMALL = TrainConfig(epochs=4, episodes_per_epoch=40, n_way=5, k_shot=5, n_query=15, hidden=(32,), d_h=16, seed=3)


def _episode(support, query, n_way, k_shot):
    support = np.asarray(support, dtype=float)
    query = np.asarray(query, dtype=float)
    return Episode(support, np.repeat(np.arange(n_way), k_shot), query, np.zeros(len(query), dtype=int),
                   n_way, k_shot, len(query), tuple(range(n_way)), np.arange(len(support)), np.arange(len(query)))


@pytest.fixture(scope="module")
def domain():
    return make_synthetic_domain(SEPARABLE, 11)


@pytest.fixture(scope="module")
def split(domain):
    return split_classes(domain, SplitConfig(0.75, 0.25, seed=0))


def test_embeddings_have_unit_norm(domain):
    enc = Encoder((8, 32, 16), np.random.default_rng(0))
    z = encode(enc, domain.features[:200])
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(encode(enc, domain.features[:3]), encode(enc, domain.features[:3]))


def test_identity_encoder_is_normalization(domain):
    x = domain.features[:50]
    np.testing.assert_allclose(encode(Encoder.identity(8), x), x / np.linalg.norm(x, axis=1, keepdims=True), atol=1e-15)


def test_proto_zero_distance_query_wins():
    rng = np.random.default_rng(0)
    support = rng.standard_normal((4, 6))
    model = ProtoNet(Encoder((6, 12, 8), rng))
    logp, _ = proto_predict(model, _episode(support, support[2:3], 4, 1))
    assert np.argmax(logp[0]) == 2
    np.testing.assert_allclose(np.exp(logp).sum(axis=1), 1.0, atol=1e-12)


def test_proto_symmetric_prototypes_tie():
    model = ProtoNet(Encoder.identity(2))
    # query on the bisector of two unit vectors
    logp, _ = proto_predict(model, _episode([[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0]], 2, 1))
    assert abs(np.exp(logp[0, 0]) - np.exp(logp[0, 1])) < 1e-9


def test_proto_prototypes_invariant_to_support_order(domain):
    model = ProtoNet(Encoder((8, 16), np.random.default_rng(1)))
    ep = sample_episode(domain, domain.class_ids, 5, 5, 10, np.random.default_rng(2))
    perm = np.concatenate([n * 5 + np.random.default_rng(n).permutation(5) for n in range(5)])
    shuffled = Episode(ep.support_x[perm], ep.support_y, ep.query_x, ep.query_y, 5, 5, 10, ep.classes,
                       ep.support_idx[perm], ep.query_idx)
    np.testing.assert_allclose(proto_predict(model, ep)[0], proto_predict(model, shuffled)[0], atol=1e-12)


def test_representation_shapes(domain):
    model = ProtoNet(Encoder((8, 16), np.random.default_rng(1)))
    ep = sample_episode(domain, domain.class_ids, 5, 3, 10, np.random.default_rng(2))
    _, rep = proto_predict(model, ep)
    assert rep.support.shape == (5, 3, 16) and rep.query.shape == (10, 16)
    np.testing.assert_allclose(np.linalg.norm(rep.support, axis=2), 1.0, atol=1e-12)


@pytest.fixture(scope="module")
def trained_proto(domain, split):
    return proto_train(domain, split[0], SMALL)


def test_proto_train_generalizes_to_held_out_classes(domain, split, trained_proto):
    model, _ = trained_proto
    rng = np.random.default_rng(99)
    accs = []
    for _ in range(100):
        ep = sample_episode(domain, split[1], 5, 5, 15, rng)
        accs.append(np.mean(np.argmax(proto_predict(model, ep)[0], axis=1) == ep.query_y))
    assert np.mean(accs) > 0.85


def test_proto_train_loss_decreases(trained_proto):
    curve = trained_proto[1]
    assert curve.rows[-1][1] < curve.rows[0][1]


def test_proto_train_deterministic(domain, split, trained_proto):
    again, _ = proto_train(domain, split[0], SMALL)
    for a, b in zip(trained_proto[0].params, again.params):
        assert a.data.tobytes() == b.data.tobytes()


def test_learner_checkpoint_round_trip(tmp_path, trained_proto):
    model = trained_proto[0]
    back = load_learner(save_learner(model, tmp_path / "p.json"))
    assert back.kind == "protonet"
    for a, b in zip(model.params, back.params):
        np.testing.assert_array_equal(a.data, b.data)


def test_fomaml_identity_adaptations(domain):
    model = Fomaml(Encoder((8, 16), np.random.default_rng(0)))
    ep = sample_episode(domain, domain.class_ids, 5, 2, 5, np.random.default_rng(0))
    meta = [p.data for p in model.params]
    for adapted in (fomaml_adapt(model, ep, steps=0), fomaml_adapt(model, ep, inner_lr=0.0)):
        for a, m in zip(adapted, meta):
            np.testing.assert_array_equal(a, m)
        assert not adapted[-2].any() and not adapted[-1].any()


def _support_loss(model, params, ep):
    with no_grad():
        return float(cross_entropy(log_softmax(model.logits(params, ep.support_x)), ep.support_y).data)


def test_fomaml_inner_loop_descends(domain):
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        model = Fomaml(Encoder((8, 16, 16), rng), inner_steps=5, inner_lr=0.1)
        ep = sample_episode(domain, domain.class_ids, 5, 5, 5, rng)
        before = _support_loss(model, fomaml_adapt(model, ep, steps=0), ep)
        after = _support_loss(model, fomaml_adapt(model, ep), ep)
        wins += after < before
    assert wins >= 95


def test_fomaml_zero_distance_and_symmetry():
    model = Fomaml(Encoder.identity(2), inner_steps=10, inner_lr=0.5)
    support = [[1.0, 0.0], [0.0, 1.0]]
    logp, _ = fomaml_predict(model, _episode(support, [[1.0, 0.0]], 2, 1))
    assert np.argmax(logp[0]) == 0
    logp, _ = fomaml_predict(model, _episode(support, [[1.0, 1.0]], 2, 1))
    assert abs(np.exp(logp[0, 0]) - np.exp(logp[0, 1])) < 1e-9


def test_fomaml_matches_logistic_regression_on_separable_support(domain):
    model = Fomaml(Encoder.identity(8), inner_steps=50, inner_lr=0.02)
    rng = np.random.default_rng(5)
    for _ in range(20):
        ep = sample_episode(domain, domain.class_ids, 5, 5, 15, rng)
        ours = np.argmax(fomaml_predict(model, ep)[0], axis=1)
        oracle = LogisticRegression(max_iter=1000).fit(ep.support_x, ep.support_y).predict(ep.query_x)
        np.testing.assert_array_equal(ours, oracle)


@pytest.fixture(scope="module")
def trained_fomaml(domain, split):
    cfg = TrainConfig(epochs=4, episodes_per_epoch=30, n_way=5, k_shot=5, n_query=15, hidden=(32,), d_h=16,
                      inner_lr=0.1, inner_steps=5, seed=4)
    return fomaml_train(domain, split[0], cfg), cfg


def test_fomaml_train_trio(domain, split, trained_fomaml):
    (model, curve), cfg = trained_fomaml
    assert curve.rows[-1][1] < curve.rows[0][1]
    again, _ = fomaml_train(domain, split[0], cfg)
    for a, b in zip(model.params, again.params):
        assert a.data.tobytes() == b.data.tobytes()
    rng = np.random.default_rng(7)
    accs = []
    for _ in range(60):
        ep = sample_episode(domain, split[1], 5, 5, 15, rng)
        accs.append(np.mean(np.argmax(fomaml_predict(model, ep)[0], axis=1) == ep.query_y))
    assert np.mean(accs) > 0.85


def test_train_config_validation():
    assert TrainConfig(epochs=0, lr=-1).validate()
    with pytest.raises(ValueError):
        proto_train(make_synthetic_domain(SEPARABLE, 0), range(10), TrainConfig(n_way=0))
