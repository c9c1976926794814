import numpy as np
import pytest

from egokin.episodes import gen_fixture, list_episode_dirs, read_episode
from egokin.policy import ModelConfig, init_params, train
from egokin.probe import (EmptyHoldout, ProbeReport, SingleClassSplit,
                          evaluate_probe, extract_features, params_digest,
                          probe_probabilities, run_probe, split_indices,
                          train_probe)


def _separable_features(rng, n=300, c=16, margin=0.4):
    """Class 0 sits at -1, class 1 at +1 on the first axis with bounded
    jitter, so a margin is guaranteed rather than merely likely."""
    labels = (rng.random(n) > 0.5).astype(np.uint8)
    feats = rng.standard_normal((n, c)).astype(np.float32)
    feats[:, 0] = (2.0 * labels - 1.0) + rng.uniform(-(1 - margin), 1 - margin, n)
    return feats, labels


def test_separable_features_reach_full_accuracy():
    rng = np.random.default_rng(0)
    feats, labels = _separable_features(rng)
    rep = run_probe_features(feats, labels, seed=0)
    assert rep.accuracy == 1.0
    # diagonal confusion matrix
    assert rep.confusion[0, 1] == 0 and rep.confusion[1, 0] == 0


def run_probe_features(feats, labels, seed):
    tr, va = split_indices(feats.shape[0], seed)
    probe = train_probe(feats, labels, seed=seed, train_idx=tr)
    return evaluate_probe(probe, feats[va], labels[va], split_seed=seed)


def test_label_shuffled_accuracy_near_chance():
    rng = np.random.default_rng(1)
    feats, labels = _separable_features(rng, n=1000)
    accs = []
    for seed in range(5):
        shuffled = np.random.default_rng([seed, 77]).permutation(labels)
        rep = run_probe_features(feats, shuffled, seed=seed)
        accs.append(rep.accuracy)
        assert 0.4 <= rep.accuracy <= 0.6
    # binomial 99% interval around 0.5 for the pooled draws
    n_val = len(split_indices(1000, 0)[1]) * 5
    pooled = np.mean(accs)
    assert abs(pooled - 0.5) < 2.58 * np.sqrt(0.25 / n_val) + 0.02


def test_probe_deterministic_given_seed():
    rng = np.random.default_rng(2)
    feats, labels = _separable_features(rng)
    a = run_probe_features(feats, labels, seed=3)
    b = run_probe_features(feats, labels, seed=3)
    assert a.accuracy == b.accuracy
    assert np.array_equal(a.probabilities, b.probabilities)


def test_single_class_split_raises():
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((50, 8)).astype(np.float32)
    labels = np.zeros(50, dtype=np.uint8)
    with pytest.raises(SingleClassSplit):
        train_probe(feats, labels, seed=0)


def test_empty_holdout_raises():
    rng = np.random.default_rng(4)
    feats, labels = _separable_features(rng, n=100)
    probe = train_probe(feats, labels, seed=0)
    with pytest.raises(EmptyHoldout):
        evaluate_probe(probe, feats[:0], labels[:0])


def test_confusion_matrix_sums_to_holdout_count():
    rng = np.random.default_rng(5)
    feats, labels = _separable_features(rng, n=200, margin=-2.0)
    rep = run_probe_features(feats, labels, seed=1)
    assert rep.confusion.sum() == rep.labels.size
    assert np.all((rep.probabilities > 0) & (rep.probabilities < 1))


def test_split_is_80_20():
    tr, va = split_indices(1000, 0)
    assert len(tr) == 800 and len(va) == 200
    assert len(set(tr) | set(va)) == 1000


def test_report_json_and_csv(tmp_path):
    rng = np.random.default_rng(6)
    feats, labels = _separable_features(rng, n=100)
    rep = run_probe_features(feats, labels, seed=0)
    doc = rep.to_json()
    assert "accuracy" in doc and "confusion" in doc
    csv_path = rep.write_probability_csv(tmp_path / "p.csv")
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "sample,true_label,p_human"
    assert len(lines) == rep.labels.size + 1


@pytest.fixture(scope="module")
def tiny_policy(tmp_path_factory):
    d = tmp_path_factory.mktemp("probe_data")
    gen_fixture(d, "human", 3, seed=17, frames_per_episode=6)
    gen_fixture(d, "robot", 3, seed=17, frames_per_episode=6)
    eps = {"human": [], "robot": []}
    for p in list_episode_dirs(d):
        ep = read_episode(p)
        eps["human" if ep.manifest.embodiment == "human" else "robot"].append(ep)
    cfg = ModelConfig(c=16, t_tokens=4, horizon=2, steps=0, batch=4,
                      flow_hidden=32, mlp_ratio=2, disc_hidden=8)
    res = train(cfg, eps)
    return cfg, res.params, eps["human"] + eps["robot"]


def test_extract_features_shape_and_determinism(tiny_policy):
    cfg, params, eps = tiny_policy
    X, y = extract_features(params, cfg, eps)
    assert X.shape == (sum(len(e.frames) for e in eps), cfg.c)
    assert set(np.unique(y)) == {0, 1}
    X2, _ = extract_features(params, cfg, eps)
    assert np.array_equal(X, X2)


def test_probe_leaves_policy_frozen(tiny_policy):
    cfg, params, eps = tiny_policy
    before = params_digest(params)
    run_probe(params, cfg, eps, seed=0)
    assert params_digest(params) == before


def test_probabilities_are_p_human():
    rng = np.random.default_rng(8)
    feats, labels = _separable_features(rng, n=400)
    tr, va = split_indices(400, 2)
    probe = train_probe(feats, labels, seed=2, train_idx=tr)
    p = probe_probabilities(probe, feats[va])
    human = labels[va] == 0
    assert p[human].mean() > 0.9
    assert p[~human].mean() < 0.1
