import numpy as np
import pytest
from hypothesis import given, strategies as st

from augkernel.graph import adjacency, build_block_graph, build_toy_graph, normalize
from augkernel.kernel import mercer_features, spectral_decompose
from augkernel.probe import ClassAbsentError, linear_probe, predict, split_indices


def test_one_hot_features_perfect(rng):
    labels = np.repeat([0, 1, 2], 10)
    feats = np.eye(3)[labels].T
    assert linear_probe(feats, labels, 0.5, seed=1).accuracy == 1.0


def test_noise_near_chance():
    labels = np.repeat([0, 1], 100)
    accs = [linear_probe(np.random.default_rng(s).standard_normal((3, 200)), labels, 0.5, s).accuracy
            for s in range(30)]
    assert abs(np.mean(accs) - 0.5) < 0.1


def test_toy_top_two_mercer_features_separate_classes():
    g = build_toy_graph(0.4, 0.3, 0.2, 0.1)
    f = mercer_features(spectral_decompose(normalize(adjacency(g))), 2)
    for seed in range(5):
        assert linear_probe(f.weights, g.labels, 0.5, seed).accuracy == 1.0


def test_top_eigenspace_beats_orthogonal_subspace():
    g = build_block_graph(2, 2, 3, 0.4, 0.3, 0.2, 0.1)
    spec = spectral_decompose(normalize(adjacency(g)))
    top = spec.eigenvectors[:, :2].T
    rest = spec.eigenvectors[:, 2:4].T
    for seed in range(5):
        assert (linear_probe(top, g.labels, 0.5, seed).accuracy
                >= linear_probe(rest, g.labels, 0.5, seed).accuracy)


@given(st.integers(0, 10_000))
def test_rotation_invariant_predictions(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1, 2], 8)
    feats = rng.standard_normal((3, 24)) + np.eye(3)[labels].T
    r, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    a = linear_probe(feats, labels, 0.5, seed)
    b = linear_probe(r @ feats, labels, 0.5, seed)
    assert a.accuracy == b.accuracy
    assert 0.0 <= a.accuracy <= 1.0


def test_split_deterministic_and_stratified():
    labels = np.repeat([0, 1, 2], 5)
    tr1, te1 = split_indices(labels, 0.4, seed=3)
    tr2, te2 = split_indices(labels, 0.4, seed=3)
    assert np.array_equal(tr1, tr2) and np.array_equal(te1, te2)
    assert set(labels[tr1]) == set(labels[te1]) == {0, 1, 2}
    assert np.intersect1d(tr1, te1).size == 0


def test_ties_go_to_lower_class():
    w = np.array([[0.0, 1.0], [0.0, 1.0]])
    assert predict(w, np.zeros((1, 1)), np.array([3, 7]))[0] == 3


def test_errors():
    labels = np.array([0, 0, 1, 1])
    with pytest.raises(ValueError):
        linear_probe(np.ones((1, 4)), np.zeros(4), 0.5)
    with pytest.raises(ValueError):
        linear_probe(np.ones((1, 4)), labels, 1.0)
    with pytest.raises(ValueError):
        linear_probe(np.ones((1, 3)), labels, 0.5)
    with pytest.raises(ClassAbsentError):
        linear_probe(np.ones((1, 3)), np.array([0, 0, 1]), 0.5)
    with pytest.raises(ClassAbsentError):
        # an unstratified one-sample training split cannot hold both classes
        linear_probe(np.ones((1, 4)), labels, 0.25, 0, stratify=False)


def test_alignment_and_sample_weight():
    labels = np.repeat([0, 1], 6)
    feats = np.eye(2)[labels].T
    res = linear_probe(feats, labels, 0.5, 0, reference=feats, sample_weight=np.ones(12))
    assert res.alignment == pytest.approx(1.0)
    assert res.weights.shape == (2, 2)
