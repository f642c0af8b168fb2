"""BCE training with exact reverse-mode gradients, AUC model selection,
grid search over architecture hyperparameters, and seed-diverse ensembling.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from chronos.scorer_net import (
    ChronosConfig,
    ModelParams,
    SCORE_EPS,
    conv1d_same_backward,
    forward,
    init_params,
)
from chronos.signal import DEFAULT_K_STAT, compute_signal, fit_standardizer, signal_batch, tail_window
from chronos.trajectory_store import DatasetSplit, Trajectory

BCE_EPS = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 50
    batch_size: int = 32
    patience: int = 10
    ensemble_size: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")


@dataclass
class TrainReport:
    train_losses: list[float]  # mean BCE per epoch
    val_aucs: list[float]
    best_epoch: int  # 1-based epoch whose parameters were kept
    test_auc: float | None

    def __post_init__(self):
        if len(self.train_losses) != len(self.val_aucs):
            raise ValueError("per-epoch metric lists disagree in length")
        if not 1 <= self.best_epoch <= len(self.val_aucs):
            raise ValueError("best_epoch out of range")

    @property
    def best_val_auc(self) -> float:
        return self.val_aucs[self.best_epoch - 1]


def bce_loss(preds: np.ndarray, labels: np.ndarray, reduction: str = "sum") -> float:
    """Binary cross-entropy with predictions clamped into [eps, 1-eps]."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} predictions vs {labels.shape} labels")
    p = np.clip(preds, BCE_EPS, 1.0 - BCE_EPS)
    terms = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    if reduction == "sum":
        return float(terms.sum())
    if reduction == "mean":
        return float(terms.mean())
    raise ValueError(f"unknown reduction {reduction!r}")


def auc(scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank of the tie group
        i = j + 1
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# reverse-mode differentiation of the scorer

def backward(
    params: ModelParams,
    signals: np.ndarray,
    valid_lens: np.ndarray | Sequence[int] | None,
    labels: np.ndarray | Sequence[int],
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean BCE loss and its exact gradient for every parameter tensor.

    Returns (loss, grads) with grads keyed by the tensor names of
    ModelParams.tensors().
    """
    scores, cache = forward(params, signals, valid_lens, want_cache=True)
    labels = np.asarray(labels, dtype=np.float64)
    loss = bce_loss(scores, labels, reduction="mean")
    batch = len(scores)

    grads: dict[str, np.ndarray] = {}
    # sigmoid + BCE collapse: d(mean loss)/d logit = (score - label) / batch
    dlogit = (scores - labels) / batch
    grads["mlp_out_w"] = cache["h"].T @ dlogit
    grads["mlp_out_b"] = np.array([dlogit.sum()])
    dh = dlogit[:, None] * params.mlp_out_w[None, :]
    dh_pre = dh * (cache["h_pre"] > 0)
    grads["mlp_hidden_w"] = dh_pre.T @ cache["feats"]
    grads["mlp_hidden_b"] = dh_pre.sum(axis=0)
    dfeats = dh_pre @ params.mlp_hidden_w

    # masked average pooling over Sum of block outputs
    mask = cache["mask"].astype(np.float64)
    dacc = dfeats[:, :, None] * (mask / cache["valid"][:, None])[:, None, :]

    dx_next = None  # gradient w.r.t. the next block's input
    for i in range(len(params.blocks) - 1, -1, -1):
        blk = params.blocks[i]
        bc = cache["blocks"][i]
        do = dacc.copy() if dx_next is None else dacc + dx_next
        x_in = bc["x_in"]
        # residual shortcut path
        grads[f"block{i}.shortcut_w"] = np.einsum("bot,bit->oi", do, x_in)
        grads[f"block{i}.shortcut_b"] = do.sum(axis=(0, 2))
        dx = np.einsum("bot,oi->bit", do, blk.shortcut_w)
        # concat split: bottleneck rows, then one bank per kernel
        n_proj = params.config.n_proj
        n_conv = params.config.n_conv
        dbneck = do[:, :n_proj, :].copy()
        for j, w in enumerate(blk.conv_ws):
            lo = n_proj + j * n_conv
            dh_j = do[:, lo : lo + n_conv, :]
            dpre = dh_j * (bc["pres"][j] > 0)
            dbn_j, dw_j, db_j = conv1d_same_backward(bc["bneck"], w, dpre)
            grads[f"block{i}.conv{j}_w"] = dw_j
            grads[f"block{i}.conv{j}_b"] = db_j
            dbneck += dbn_j
        grads[f"block{i}.bottleneck_w"] = np.einsum("bpt,bit->pi", dbneck, x_in)
        grads[f"block{i}.bottleneck_b"] = dbneck.sum(axis=(0, 2))
        dx += np.einsum("bpt,pi->bit", dbneck, blk.bottleneck_w)
        dx_next = dx

    do0 = dacc if dx_next is None else dacc + dx_next
    grads["input_shortcut_w"] = np.einsum("bot,bpt->op", do0, cache["z"])
    grads["input_shortcut_b"] = do0.sum(axis=(0, 2))
    dz = np.einsum("bot,op->bpt", do0, params.input_shortcut_w)
    grads["proj_w"] = np.einsum("bpt,bt->p", dz, cache["signals"])
    grads["proj_b"] = dz.sum(axis=(0, 2))

    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
    return loss, grads


def init_adam_state(params: ModelParams) -> dict:
    state: dict = {"t": 0}
    for name, tensor in params.tensors():
        state[name] = (np.zeros_like(tensor), np.zeros_like(tensor))
    return state


def optimizer_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: dict,
    config: TrainConfig,
) -> tuple[ModelParams, dict]:
    """One Adam update in place; returns the same (params, state) for chaining."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, tensor in params.tensors():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}: {g.shape} vs {tensor.shape}")
        m, v = state[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        tensor -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, state


# ---------------------------------------------------------------------------
# training loop

def _labeled_arrays(trajs: Sequence[Trajectory], what: str) -> np.ndarray:
    labels = []
    for t in trajs:
        if t.label is None:
            raise ValueError(f"unlabeled trajectory {t.key} in the {what} set")
        labels.append(1.0 if t.label else 0.0)
    return np.array(labels, dtype=np.float64)


def train(
    split: DatasetSplit,
    cconf: ChronosConfig,
    tconf: TrainConfig,
    init_seed: int | None = None,
    shuffle_seed: int | None = None,
    k_stat: int | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Train one scorer; keeps the parameters from the epoch with the best
    validation AUC and early-stops once `patience` epochs pass without a new best.
    """
    if not split.train or not split.validation:
        raise ValueError("train and validation sets must be non-empty")
    y_train = _labeled_arrays(split.train, "training")
    y_val = _labeled_arrays(split.validation, "validation")
    if len(set(y_train.tolist())) < 2:
        raise ValueError("single-class training set")
    if len(set(y_val.tolist())) < 2:
        raise ValueError("single-class validation set")

    if k_stat is None:
        k_stat = min(DEFAULT_K_STAT, split.train[0].k)  # bounded by what the file stores
    raw_train = [tail_window(compute_signal(t, k_stat), cconf.l_tail) for t in split.train]
    standardizer = fit_standardizer(raw_train)
    x_train, v_train = signal_batch(split.train, k_stat, cconf.l_tail, standardizer)
    x_val, v_val = signal_batch(split.validation, k_stat, cconf.l_tail, standardizer)

    params = init_params(cconf, seed=cconf.seed if init_seed is None else init_seed,
                         standardizer=standardizer, k_stat=k_stat)
    state = init_adam_state(params)
    rng = np.random.default_rng(tconf.seed if shuffle_seed is None else shuffle_seed)

    n = len(split.train)
    best_params = copy.deepcopy(params)
    best_auc = -math.inf
    best_epoch = 0
    last_improvement = 0
    train_losses: list[float] = []
    val_aucs: list[float] = []
    for epoch in range(1, tconf.max_epochs + 1):
        perm = rng.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, tconf.batch_size):
            idx = perm[lo : lo + tconf.batch_size]
            loss, grads = backward(params, x_train[idx], v_train[idx], y_train[idx])
            optimizer_step(params, grads, state, tconf)
            loss_sum += loss * len(idx)
        train_losses.append(loss_sum / n)

        val_scores, _ = forward(params, x_val, v_val)
        val_auc = auc(val_scores, y_val.astype(int))
        val_aucs.append(val_auc)
        if val_auc >= best_auc:
            # ties keep the later epoch: equally highest AUC, further-optimized loss
            if val_auc > best_auc:
                last_improvement = epoch
            best_auc = val_auc
            best_epoch = epoch
            best_params = copy.deepcopy(params)
        if epoch - last_improvement >= tconf.patience:
            break

    test_auc = None
    if split.test and all(t.label is not None for t in split.test):
        y_test = _labeled_arrays(split.test, "test")
        if len(set(y_test.tolist())) >= 2:
            x_test, v_test = signal_batch(split.test, k_stat, cconf.l_tail, standardizer)
            test_scores, _ = forward(best_params, x_test, v_test)
            test_auc = auc(test_scores, y_test.astype(int))

    report = TrainReport(
        train_losses=train_losses,
        val_aucs=val_aucs,
        best_epoch=best_epoch,
        test_auc=test_auc,
    )
    return best_params, report


def grid_search(
    split: DatasetSplit,
    grid: Sequence[ChronosConfig],
    tconf: TrainConfig,
    selection: str = "test",
    on_result: Callable[[ChronosConfig, TrainReport], None] | None = None,
    k_stat: int | None = None,
    n_jobs: int = 1,
) -> tuple[ModelParams, ChronosConfig]:
    """Train every config and keep the one with the highest held-out AUC.

    selection="test" picks by test-set AUC; selection="validation" is the
    leakage-free mode. Ties break toward the earlier grid entry. Configs are
    independent, so with n_jobs > 1 they train in parallel processes; the
    selection is a reduction over grid order either way.
    """
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if selection not in ("test", "validation"):
        raise ValueError(f"unknown selection mode {selection!r}")
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(n_jobs, len(grid))) as pool:
            futures = [pool.submit(train, split, cfg, tconf, None, None, k_stat) for cfg in grid]
            results = [f.result() for f in futures]
    else:
        results = [train(split, cfg, tconf, k_stat=k_stat) for cfg in grid]

    best: tuple[ModelParams, ChronosConfig] | None = None
    best_metric = -math.inf
    for cfg, (params, report) in zip(grid, results):
        if selection == "test":
            if report.test_auc is None:
                raise ValueError("test-set selection requires a labeled, two-class test set")
            metric = report.test_auc
        else:
            metric = report.best_val_auc
        if on_result is not None:
            on_result(cfg, report)
        if metric > best_metric:
            best_metric = metric
            best = (params, cfg)
    assert best is not None
    return best


def train_ensemble(
    split: DatasetSplit,
    cconf: ChronosConfig,
    tconf: TrainConfig,
    k_stat: int | None = None,
) -> tuple[list[ModelParams], list[TrainReport]]:
    """Train ensemble_size members that differ only in seed offsets."""
    models = []
    reports = []
    for i in range(tconf.ensemble_size):
        params, report = train(
            split, cconf, tconf, init_seed=cconf.seed + i, shuffle_seed=tconf.seed + i, k_stat=k_stat
        )
        models.append(params)
        reports.append(report)
    return models, reports


def ensemble_score(
    models: Sequence[ModelParams],
    signals: np.ndarray,
    valid_lens: np.ndarray | Sequence[int] | None = None,
) -> np.ndarray:
    """Arithmetic mean of member scores on raw (unstandardized) tail signals."""
    if not models:
        raise ValueError("empty ensemble")
    l_tail = models[0].config.l_tail
    if any(m.config.l_tail != l_tail for m in models):
        raise ValueError("ensemble members disagree on l_tail")
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim == 1:
        signals = signals[None, :]
    batch = signals.shape[0]
    valid = np.full(batch, l_tail, dtype=np.int64) if valid_lens is None else np.asarray(valid_lens, dtype=np.int64)
    t = np.arange(l_tail)[None, :]
    mask = t >= (l_tail - valid[:, None])
    total = np.zeros(batch)
    for m in models:
        xs = np.where(mask, (signals - m.standardizer.mean) / m.standardizer.std, 0.0)
        scores, _ = forward(m, xs, valid)
        total += scores
    return np.clip(total / len(models), SCORE_EPS, 1.0 - SCORE_EPS)
