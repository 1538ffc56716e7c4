"""Linear probing of frozen encoder features on labeled synthetic clips."""

from __future__ import annotations

import warnings

import numpy as np

from . import tensor as tt
from .config import TrainConfig
from .mae import encode
from .tensor import ParamStore, adamw_step, backward
from .tokenizer import ClipTensor, positional_encoding, tokenize


def encoder_features(
    clips: list[ClipTensor], mae_store: ParamStore, cfg: TrainConfig
) -> np.ndarray:
    """Mean-pooled frozen-encoder features over the full token set."""
    tok_cfg = cfg.tokenizer_config()
    mae_cfg = cfg.mae_config()
    feats = np.empty((len(clips), cfg.embed_dim))
    with tt.no_grad():
        for i, clip in enumerate(clips):
            grid = tokenize(clip, tok_cfg, mae_store)
            pos = positional_encoding(grid.n, cfg.embed_dim, grid.coords)
            encoded = encode(tt.add(grid.tokens, tt.constant(pos)), mae_store, mae_cfg)
            feats[i] = encoded.values.mean(axis=0)
    return feats


def linear_probe_eval(
    mae_store: ParamStore,
    cfg: TrainConfig,
    clips: list[ClipTensor],
    labels: np.ndarray,
    seed: int = 0,
    train_fraction: float = 0.75,
    steps: int = 300,
    lr: float = 0.05,
) -> float:
    """Held-out accuracy of a linear classifier on frozen features.

    The encoder never updates; only a single softmax layer is trained (to
    convergence at these sizes) on a seeded train/test split.
    """
    labels = np.asarray(labels, dtype=np.intp)
    n_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_classes)
    if counts.min() > 0 and counts.max() / counts.min() > 10:
        warnings.warn(f"class imbalance beyond 10:1: counts {counts.tolist()}")

    feats = encoder_features(clips, mae_store, cfg)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(clips))
    n_train = int(round(train_fraction * len(clips)))
    train_idx, test_idx = order[:n_train], order[n_train:]

    mu = feats[train_idx].mean(axis=0)
    sd = feats[train_idx].std(axis=0) + 1e-8
    train_x = (feats[train_idx] - mu) / sd
    test_x = (feats[test_idx] - mu) / sd

    onehot = np.zeros((n_train, n_classes))
    onehot[np.arange(n_train), labels[train_idx]] = 1.0

    head = ParamStore()
    head.add("w", np.zeros((feats.shape[1], n_classes)))
    head.add("b", np.zeros(n_classes))
    x_const = tt.constant(train_x)
    y_const = tt.constant(onehot)
    for _ in range(steps):
        head.zero_grad()
        logits = tt.add(tt.matmul(x_const, head["w"]), head["b"])
        log_probs = tt.log(tt.softmax(logits, axis=1))
        loss = tt.scale(tt.mean(tt.sum(tt.mul(log_probs, y_const), axis=1)), -1.0)
        backward(loss)
        adamw_step(head, lr=lr)

    scores = test_x @ head["w"].values + head["b"].values
    predictions = scores.argmax(axis=1)
    return float(np.mean(predictions == labels[test_idx]))
