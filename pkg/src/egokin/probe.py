"""Linear-probing diagnostic: how much embodiment identity leaks into the
frozen policy's pooled features.

A small MLP (2 layers, hidden 32) is trained on per-frame pooled features
m = pool(v, x) with binary embodiment labels. High held-out accuracy
means the policy features encode which body produced the data;
chance-level accuracy with probabilities hugging 0.5 means the features
are domain-invariant.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .episodes import Episode, NormStats
from .policy import ModelConfig, _encode_state_batch, _encode_vision_batch, \
    _pool_single, _pvars, patchify

PROBE_HIDDEN = 32
PROBE_STEPS = 500
PROBE_LR = 1e-2


class SingleClassSplit(ValueError):
    pass


class EmptyHoldout(ValueError):
    pass


@dataclass
class ProbeReport:
    accuracy: float
    confusion: np.ndarray          # 2x2, rows = true [human, robot]
    probabilities: np.ndarray      # held-out p(human) per sample
    labels: np.ndarray             # held-out true labels (0 human, 1 robot)
    split_seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "accuracy": self.accuracy,
                "confusion": self.confusion.tolist(),
                "mean_abs_p_minus_half": float(np.mean(np.abs(self.probabilities - 0.5))),
                "n_holdout": int(self.labels.size),
                "split_seed": self.split_seed,
            },
            sort_keys=True,
        )

    def write_probability_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample", "true_label", "p_human"])
            for i, (lab, p) in enumerate(zip(self.labels, self.probabilities)):
                w.writerow([i, "human" if lab == 0 else "robot", repr(float(p))])
        return path


def params_digest(params: dict[str, np.ndarray]) -> str:
    """Stable hash of a parameter set; used to verify the policy stays frozen."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return h.hexdigest()


def extract_features(params: dict, config: ModelConfig,
                     episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray]:
    """Pooled feature m and embodiment label for every frame.

    The policy is frozen: this is a pure forward pass through the stored
    parameters. Returns (features (n, C) f32, labels (n,) u8).
    """
    stats = NormStats(params["norm_mean"].reshape(-1).astype(np.float64),
                      params["norm_std"].reshape(-1).astype(np.float64))
    feats = []
    labels = []
    for ep in episodes:
        if ep.images is None:
            raise ValueError("probe features need episodes with images")
        states = np.stack([stats.normalize(fr.state_vector()) for fr in ep.frames])
        n = len(ep.frames)
        patches = np.concatenate([patchify(ep.images[k]) for k in range(n)], axis=0)
        tape = Tape()
        pv = _pvars(tape, params)
        v_list = _encode_vision_batch(tape, pv, patches, n)
        x_list = _encode_state_batch(tape, pv, states)
        for k in range(n):
            feats.append(_pool_single(tape, pv, v_list[k], x_list[k]).value[0])
        lab = 0 if ep.manifest.embodiment == "human" else 1
        labels.extend([lab] * n)
    return np.stack(feats).astype(np.float32), np.array(labels, dtype=np.uint8)


@dataclass
class ProbeParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    # train-split input standardization (applied wherever the probe scores)
    mu: np.ndarray = None
    sd: np.ndarray = None


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 80/20 permutation split."""
    rng = np.random.default_rng([seed, 31])
    perm = rng.permutation(n)
    cut = int(round(0.8 * n))
    return perm[:cut], perm[cut:]


def train_probe(features: np.ndarray, labels: np.ndarray, seed: int = 0,
                train_idx: np.ndarray | None = None) -> ProbeParams:
    """Fit the fixed-budget probe (500 full-batch Adam steps, lr 1e-2).

    `train_idx` defaults to the 80% side of the seeded split; both classes
    must appear in it.
    """
    if train_idx is None:
        train_idx, _ = split_indices(features.shape[0], seed)
    x = features[train_idx].astype(np.float32)
    y = labels[train_idx].astype(np.float32).reshape(-1, 1)
    if len(np.unique(y)) < 2:
        raise SingleClassSplit("training split contains a single class")

    mu = x.mean(axis=0, dtype=np.float64).astype(np.float32).reshape(1, -1)
    sd = np.maximum(x.std(axis=0, dtype=np.float64), 1e-6).astype(np.float32).reshape(1, -1)
    x = (x - mu) / sd

    rng = np.random.default_rng([seed, 37])
    c = x.shape[1]
    p = ProbeParams(
        w1=(rng.standard_normal((c, PROBE_HIDDEN)) / np.sqrt(c)).astype(np.float32),
        b1=np.zeros((1, PROBE_HIDDEN), dtype=np.float32),
        w2=(rng.standard_normal((PROBE_HIDDEN, 1)) / np.sqrt(PROBE_HIDDEN)).astype(np.float32),
        b2=np.zeros((1, 1), dtype=np.float32),
        mu=mu, sd=sd,
    )
    # probe label convention: predicts p(robot); report flips to p(human)
    mom = {k: np.zeros_like(getattr(p, k)) for k in ("w1", "b1", "w2", "b2")}
    vel = {k: np.zeros_like(getattr(p, k)) for k in ("w1", "b1", "w2", "b2")}
    b1m, b2m, eps = 0.9, 0.999, 1e-8
    for step in range(1, PROBE_STEPS + 1):
        tape = Tape()
        pv = {k: tape.param(getattr(p, k)) for k in ("w1", "b1", "w2", "b2")}
        h = tape.relu(tape.add(tape.matmul(tape.input(x), pv["w1"]), pv["b1"]))
        logits = tape.add(tape.matmul(h, pv["w2"]), pv["b2"])
        loss = tape.bce_with_logits(logits, tape.input(y))
        tape.backward(loss)
        for k in ("w1", "b1", "w2", "b2"):
            g = pv[k].grad
            mom[k] = b1m * mom[k] + (1 - b1m) * g
            vel[k] = b2m * vel[k] + (1 - b2m) * g * g
            mh = mom[k] / (1 - b1m**step)
            vh = vel[k] / (1 - b2m**step)
            getattr(p, k)[...] -= (PROBE_LR * mh / (np.sqrt(vh) + eps)).astype(np.float32)
    return p


def probe_probabilities(probe: ProbeParams, features: np.ndarray) -> np.ndarray:
    """p(human) per row."""
    x = features
    if probe.mu is not None:
        x = (x - probe.mu) / probe.sd
    h = np.maximum(x @ probe.w1 + probe.b1, 0.0)
    logits = (h @ probe.w2 + probe.b2).reshape(-1).astype(np.float64)
    p_robot = 1.0 / (1.0 + np.exp(-logits))
    return 1.0 - p_robot


def evaluate_probe(probe: ProbeParams, features: np.ndarray, labels: np.ndarray,
                   split_seed: int = 0) -> ProbeReport:
    """Score held-out features; confusion rows/cols are [human, robot]."""
    if features.shape[0] == 0:
        raise EmptyHoldout("no held-out samples")
    p_human = probe_probabilities(probe, features)
    pred = (p_human < 0.5).astype(np.uint8)  # 0 human, 1 robot
    confusion = np.zeros((2, 2), dtype=np.int64)
    for lab, pr in zip(labels, pred):
        confusion[int(lab), int(pr)] += 1
    accuracy = float(np.mean(pred == labels))
    return ProbeReport(accuracy=accuracy, confusion=confusion,
                       probabilities=p_human, labels=np.asarray(labels),
                       split_seed=split_seed)


def run_probe(params: dict, config: ModelConfig, episodes: list[Episode],
              seed: int = 0) -> ProbeReport:
    """Extract features, train on the 80% split, evaluate on the 20%."""
    features, labels = extract_features(params, config, episodes)
    train_idx, val_idx = split_indices(features.shape[0], seed)
    probe = train_probe(features, labels, seed=seed, train_idx=train_idx)
    return evaluate_probe(probe, features[val_idx], labels[val_idx], split_seed=seed)
