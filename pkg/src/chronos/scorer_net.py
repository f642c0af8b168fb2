"""Multi-scale convolutional trajectory scorer.

Architecture: a 1x1 projection lifts the single-channel signal to n_proj
channels; each block bottlenecks its input back to n_proj channels, runs
parallel same-padded convolutions at several kernel lengths, and concatenates
the bottleneck with the ReLU'd conv outputs. Blocks are stacked with learned
1x1 shortcut projections; the channel-aligned block outputs are summed,
average-pooled over the valid (non-padded) time positions, and fed to a
one-hidden-layer MLP with a sigmoid output.

All arithmetic is float64 and fully deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from chronos.signal import DEFAULT_K_STAT, Standardizer, signal_batch
from chronos.trajectory_store import Trajectory
from chronos.voter import canonicalize_answer

CHECKPOINT_MAGIC = b"CHRS"
CHECKPOINT_VERSION = 1
SCORE_EPS = 1e-15  # keeps scores in the open interval (0, 1)

DEFAULT_KERNELS = (20, 40, 80)
KERNEL_GRID = ((10, 20, 40), (20, 40, 80), (40, 80, 160))


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or incompatible."""


class NumericalError(FloatingPointError):
    """A forward/backward pass produced a non-finite value."""


@dataclass(frozen=True)
class ChronosConfig:
    """Scorer architecture hyperparameters."""

    l_tail: int = 2048
    n_proj: int = 8
    n_conv: int = 8
    kernel_lengths: tuple[int, ...] = DEFAULT_KERNELS
    n_blk: int = 3
    mlp_hidden: int | None = None  # defaults to the pooled feature width
    seed: int = 0

    def __post_init__(self):
        if min(self.l_tail, self.n_proj, self.n_conv, self.n_blk) < 1:
            raise ValueError("all dimensions must be >= 1")
        if not self.kernel_lengths:
            raise ValueError("at least one kernel length is required")
        if any(k < 1 for k in self.kernel_lengths):
            raise ValueError("kernel lengths must be >= 1")
        if list(self.kernel_lengths) != sorted(set(self.kernel_lengths)):
            raise ValueError(f"kernel lengths must be strictly increasing, got {self.kernel_lengths}")
        if max(self.kernel_lengths) > self.l_tail:
            raise ValueError(f"kernel length {max(self.kernel_lengths)} exceeds l_tail={self.l_tail}")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ValueError("mlp_hidden must be >= 1")

    @property
    def k_ker(self) -> int:
        return len(self.kernel_lengths)

    @property
    def channels(self) -> int:
        """Channel width after every block: n_proj + k_ker * n_conv."""
        return self.n_proj + self.k_ker * self.n_conv

    @property
    def mlp_width(self) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else self.channels

    def to_dict(self) -> dict:
        return {
            "l_tail": self.l_tail,
            "n_proj": self.n_proj,
            "n_conv": self.n_conv,
            "kernel_lengths": list(self.kernel_lengths),
            "n_blk": self.n_blk,
            "mlp_hidden": self.mlp_hidden,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChronosConfig":
        return cls(
            l_tail=int(d["l_tail"]),
            n_proj=int(d["n_proj"]),
            n_conv=int(d["n_conv"]),
            kernel_lengths=tuple(int(k) for k in d["kernel_lengths"]),
            n_blk=int(d["n_blk"]),
            mlp_hidden=None if d.get("mlp_hidden") is None else int(d["mlp_hidden"]),
            seed=int(d.get("seed", 0)),
        )


def default_grid() -> list[ChronosConfig]:
    """The standard 2 x 3 x 3 hyperparameter grid (n_proj, n_conv, kernel set)."""
    grid = []
    for n_proj in (8, 16):
        for n_conv in (4, 8, 16):
            for kernels in KERNEL_GRID:
                grid.append(ChronosConfig(n_proj=n_proj, n_conv=n_conv, kernel_lengths=kernels))
    return grid


@dataclass
class BlockParams:
    bottleneck_w: np.ndarray  # (n_proj, c_in)
    bottleneck_b: np.ndarray  # (n_proj,)
    conv_ws: list[np.ndarray]  # per kernel: (n_conv, n_proj, l)
    conv_bs: list[np.ndarray]  # per kernel: (n_conv,)
    shortcut_w: np.ndarray  # (c_out, c_in)
    shortcut_b: np.ndarray  # (c_out,)


@dataclass
class ModelParams:
    """All learnable weights plus the embedded input standardizer."""

    config: ChronosConfig
    standardizer: Standardizer
    k_stat: int
    proj_w: np.ndarray  # (n_proj,)
    proj_b: np.ndarray  # (n_proj,)
    input_shortcut_w: np.ndarray  # (channels, n_proj)
    input_shortcut_b: np.ndarray  # (channels,)
    blocks: list[BlockParams]
    mlp_hidden_w: np.ndarray  # (mlp_width, channels)
    mlp_hidden_b: np.ndarray  # (mlp_width,)
    mlp_out_w: np.ndarray  # (mlp_width,)
    mlp_out_b: np.ndarray  # (1,)

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """All parameter tensors in declaration order."""
        yield "proj_w", self.proj_w
        yield "proj_b", self.proj_b
        yield "input_shortcut_w", self.input_shortcut_w
        yield "input_shortcut_b", self.input_shortcut_b
        for i, blk in enumerate(self.blocks):
            yield f"block{i}.bottleneck_w", blk.bottleneck_w
            yield f"block{i}.bottleneck_b", blk.bottleneck_b
            for j in range(len(blk.conv_ws)):
                yield f"block{i}.conv{j}_w", blk.conv_ws[j]
                yield f"block{i}.conv{j}_b", blk.conv_bs[j]
            yield f"block{i}.shortcut_w", blk.shortcut_w
            yield f"block{i}.shortcut_b", blk.shortcut_b
        yield "mlp_hidden_w", self.mlp_hidden_w
        yield "mlp_hidden_b", self.mlp_hidden_b
        yield "mlp_out_w", self.mlp_out_w
        yield "mlp_out_b", self.mlp_out_b

    def n_parameters(self) -> int:
        return sum(t.size for _, t in self.tensors())


@dataclass
class ScoredTrajectory:
    """A trajectory with its predicted quality score in (0, 1)."""

    answer: str  # canonical answer string
    score: float
    trajectory: Trajectory | None = None

    def __post_init__(self):
        if not 0.0 < self.score < 1.0:
            raise ValueError(f"score must lie strictly in (0, 1), got {self.score}")


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    config: ChronosConfig,
    seed: int | None = None,
    standardizer: Standardizer | None = None,
    k_stat: int = DEFAULT_K_STAT,
) -> ModelParams:
    """Fan-in-scaled symmetric init for all weights; biases start at zero."""
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(seed)
    c = config.channels
    blocks = []
    for _ in range(config.n_blk):
        blocks.append(
            BlockParams(
                bottleneck_w=_fan_in_uniform(rng, (config.n_proj, c), c),
                bottleneck_b=np.zeros(config.n_proj),
                conv_ws=[
                    _fan_in_uniform(rng, (config.n_conv, config.n_proj, l), config.n_proj * l)
                    for l in config.kernel_lengths
                ],
                conv_bs=[np.zeros(config.n_conv) for _ in config.kernel_lengths],
                shortcut_w=_fan_in_uniform(rng, (c, c), c),
                shortcut_b=np.zeros(c),
            )
        )
    return ModelParams(
        config=config,
        standardizer=standardizer or Standardizer(mean=0.0, std=1.0),
        k_stat=k_stat,
        proj_w=_fan_in_uniform(rng, (config.n_proj,), 1),
        proj_b=np.zeros(config.n_proj),
        input_shortcut_w=_fan_in_uniform(rng, (c, config.n_proj), config.n_proj),
        input_shortcut_b=np.zeros(c),
        blocks=blocks,
        mlp_hidden_w=_fan_in_uniform(rng, (config.mlp_width, c), c),
        mlp_hidden_b=np.zeros(config.mlp_width),
        mlp_out_w=_fan_in_uniform(rng, (config.mlp_width,), config.mlp_width),
        mlp_out_b=np.zeros(1),
    )


# ---------------------------------------------------------------------------
# primitives (shared with the trainer's reverse pass)

def conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise channel mix: (B, C_in, L) x (C_out, C_in) -> (B, C_out, L)."""
    return np.einsum("oi,bit->bot", w, x) + b[None, :, None]


def pad_split(l: int) -> tuple[int, int]:
    """Zero padding for a length-preserving convolution, split as evenly as possible."""
    return (l - 1) // 2, l // 2


def conv1d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Length-preserving 1-D convolution: (B, C_in, L) x (C_out, C_in, l) -> (B, C_out, L)."""
    l = w.shape[2]
    pl, pr = pad_split(l)
    xp = np.pad(x, ((0, 0), (0, 0), (pl, pr)))
    windows = sliding_window_view(xp, l, axis=2)  # (B, C_in, L, l)
    return np.einsum("oij,bitj->bot", w, windows) + b[None, :, None]


def conv1d_same_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of conv1d_same given the upstream gradient."""
    batch, _, length = x.shape
    l = w.shape[2]
    pl, pr = pad_split(l)
    xp = np.pad(x, ((0, 0), (0, 0), (pl, pr)))
    windows = sliding_window_view(xp, l, axis=2)
    dw = np.einsum("bot,bitj->oij", dout, windows)
    db = dout.sum(axis=(0, 2))
    dxp = np.zeros_like(xp)
    for j in range(l):
        dxp[:, :, j : j + length] += np.einsum("bot,oi->bit", dout, w[:, :, j])
    return dxp[:, :, pl : pl + length], dw, db


def valid_mask(valid_lens: np.ndarray, l_tail: int) -> np.ndarray:
    """(B, L) boolean mask of the non-padded (rightmost valid_len) positions."""
    t = np.arange(l_tail)[None, :]
    return t >= (l_tail - np.asarray(valid_lens)[:, None])


def _check_finite(x: np.ndarray, stage: str) -> None:
    if not np.isfinite(x).all():
        raise NumericalError(f"non-finite activation at stage {stage!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# forward pass

def project(signals: np.ndarray, params: ModelParams) -> np.ndarray:
    """1x1 lift of the single-channel signal: (B, L) -> (B, n_proj, L)."""
    if signals.ndim == 1:
        signals = signals[None, :]
    if signals.shape[1] != params.config.l_tail:
        raise ValueError(f"expected signals of length {params.config.l_tail}, got {signals.shape[1]}")
    return params.proj_w[None, :, None] * signals[:, None, :] + params.proj_b[None, :, None]


def multiscale_block(x: np.ndarray, blk: BlockParams) -> tuple[np.ndarray, dict]:
    """Bottleneck + parallel ReLU convolutions, concatenated along channels.

    Returns the block output (without the residual shortcut) and a cache of
    intermediates for the reverse pass.
    """
    if x.shape[1] != blk.bottleneck_w.shape[1]:
        raise ValueError(f"block expects {blk.bottleneck_w.shape[1]} input channels, got {x.shape[1]}")
    bneck = conv1x1(x, blk.bottleneck_w, blk.bottleneck_b)
    pres = [conv1d_same(bneck, w, b) for w, b in zip(blk.conv_ws, blk.conv_bs)]
    hs = [np.maximum(pre, 0.0) for pre in pres]
    out = np.concatenate([bneck] + hs, axis=1)
    return out, {"bneck": bneck, "pres": pres}


def forward(
    params: ModelParams,
    signals: np.ndarray,
    valid_lens: np.ndarray | Sequence[int] | None = None,
    want_cache: bool = False,
) -> tuple[np.ndarray, dict | None]:
    """Score a batch of standardized signals.

    signals: (B, l_tail) float64; valid_lens: (B,) counts of non-padded
    positions (defaults to fully valid). Returns (scores (B,), cache).
    """
    cfg = params.config
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim == 1:
        signals = signals[None, :]
    if signals.shape[1] != cfg.l_tail:
        raise ValueError(f"expected signals of length {cfg.l_tail}, got {signals.shape[1]}")
    batch = signals.shape[0]
    if valid_lens is None:
        valid = np.full(batch, cfg.l_tail, dtype=np.int64)
    else:
        valid = np.asarray(valid_lens, dtype=np.int64)
        if valid.shape != (batch,):
            raise ValueError("valid_lens must have one entry per signal")
        if valid.min() < 1 or valid.max() > cfg.l_tail:
            raise ValueError("valid_lens out of range")

    z = project(signals, params)
    o0 = conv1x1(z, params.input_shortcut_w, params.input_shortcut_b)
    acc = o0.copy()
    x = o0
    block_caches = []
    for i, blk in enumerate(params.blocks):
        m, bc = multiscale_block(x, blk)
        shortcut = conv1x1(x, blk.shortcut_w, blk.shortcut_b)
        o = m + shortcut
        _check_finite(o, f"block{i}")
        acc += o
        bc["x_in"] = x
        block_caches.append(bc)
        x = o

    mask = valid_mask(valid, cfg.l_tail)
    feats = np.einsum("bct,bt->bc", acc, mask.astype(np.float64)) / valid[:, None]
    h_pre = feats @ params.mlp_hidden_w.T + params.mlp_hidden_b
    h = np.maximum(h_pre, 0.0)
    logits = h @ params.mlp_out_w + params.mlp_out_b[0]
    _check_finite(logits, "mlp")
    scores = np.clip(_sigmoid(logits), SCORE_EPS, 1.0 - SCORE_EPS)

    cache = None
    if want_cache:
        cache = {
            "signals": signals,
            "valid": valid,
            "mask": mask,
            "z": z,
            "o0": o0,
            "blocks": block_caches,
            "acc": acc,
            "feats": feats,
            "h_pre": h_pre,
            "h": h,
            "logits": logits,
            "scores": scores,
        }
    return scores, cache


def score_trajectories(
    models: ModelParams | Sequence[ModelParams],
    trajs: Sequence[Trajectory],
    batch_size: int = 256,
) -> list[ScoredTrajectory]:
    """Score trajectories end to end (signal extraction through the ensemble mean)."""
    if isinstance(models, ModelParams):
        models = [models]
    if not models:
        raise ValueError("empty model list")
    l_tail = models[0].config.l_tail
    if any(m.config.l_tail != l_tail for m in models):
        raise ValueError("ensemble members disagree on l_tail")
    out: list[ScoredTrajectory] = []
    for start in range(0, len(trajs), batch_size):
        chunk = trajs[start : start + batch_size]
        total = np.zeros(len(chunk))
        for m in models:
            xs, valid = signal_batch(chunk, m.k_stat, l_tail, m.standardizer)
            scores, _ = forward(m, xs, valid)
            total += scores
        mean = np.clip(total / len(models), SCORE_EPS, 1.0 - SCORE_EPS)
        for traj, s in zip(chunk, mean):
            out.append(ScoredTrajectory(answer=canonicalize_answer(traj.answer), score=float(s), trajectory=traj))
    return out


# ---------------------------------------------------------------------------
# analytic cost model

def count_flops(config: ChronosConfig, batch_size: int) -> int:
    """Closed-form forward-pass FLOPs (1 multiply-add = 2 FLOPs), linear in batch size."""
    if batch_size < 0:
        raise ValueError("batch_size must be >= 0")
    L = config.l_tail
    c = config.channels
    per_sample = 0
    per_sample += 2 * config.n_proj * L  # 1x1 projection from the single channel
    per_sample += 2 * c * config.n_proj * L  # input shortcut projection
    for _ in range(config.n_blk):
        per_sample += 2 * config.n_proj * c * L  # bottleneck
        for l in config.kernel_lengths:
            per_sample += 2 * config.n_conv * config.n_proj * l * L  # parallel conv
        per_sample += 2 * c * c * L  # residual shortcut
        per_sample += 2 * c * L  # residual add + running sum of block outputs
    per_sample += c * L + c  # masked average pooling
    per_sample += 2 * config.mlp_width * c + 2 * config.mlp_width + 1  # MLP + sigmoid
    return per_sample * batch_size


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, JSON header, tensors as LE float64

def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<q", d))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_tensor(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(f, 4))
    shape = tuple(struct.unpack("<q", _read_exact(f, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").astype(np.float64)
    return name, data.reshape(shape)


def save_checkpoint(models: ModelParams | Sequence[ModelParams], path: str | Path) -> None:
    """Serialize one model or an ensemble; the round trip is bit-exact."""
    if isinstance(models, ModelParams):
        models = [models]
    if not models:
        raise ValueError("no models to save")
    first = models[0]
    if any(m.config != first.config for m in models):
        raise ValueError("ensemble members must share a config")
    header = {
        "config": first.config.to_dict(),
        "k_stat": first.k_stat,
        "n_models": len(models),
        "standardizers": [{"mean": m.standardizer.mean, "std": m.standardizer.std} for m in models],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for m in models:
            for name, arr in m.tensors():
                _write_tensor(f, name, arr)


def _expected_shapes(config: ChronosConfig) -> list[tuple[str, tuple[int, ...]]]:
    c = config.channels
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("proj_w", (config.n_proj,)),
        ("proj_b", (config.n_proj,)),
        ("input_shortcut_w", (c, config.n_proj)),
        ("input_shortcut_b", (c,)),
    ]
    for i in range(config.n_blk):
        shapes.append((f"block{i}.bottleneck_w", (config.n_proj, c)))
        shapes.append((f"block{i}.bottleneck_b", (config.n_proj,)))
        for j, l in enumerate(config.kernel_lengths):
            shapes.append((f"block{i}.conv{j}_w", (config.n_conv, config.n_proj, l)))
            shapes.append((f"block{i}.conv{j}_b", (config.n_conv,)))
        shapes.append((f"block{i}.shortcut_w", (c, c)))
        shapes.append((f"block{i}.shortcut_b", (c,)))
    shapes += [
        ("mlp_hidden_w", (config.mlp_width, c)),
        ("mlp_hidden_b", (config.mlp_width,)),
        ("mlp_out_w", (config.mlp_width,)),
        ("mlp_out_b", (1,)),
    ]
    return shapes


def _assemble(config: ChronosConfig, standardizer: Standardizer, k_stat: int, tensors: dict[str, np.ndarray]) -> ModelParams:
    blocks = []
    for i in range(config.n_blk):
        blocks.append(
            BlockParams(
                bottleneck_w=tensors[f"block{i}.bottleneck_w"],
                bottleneck_b=tensors[f"block{i}.bottleneck_b"],
                conv_ws=[tensors[f"block{i}.conv{j}_w"] for j in range(config.k_ker)],
                conv_bs=[tensors[f"block{i}.conv{j}_b"] for j in range(config.k_ker)],
                shortcut_w=tensors[f"block{i}.shortcut_w"],
                shortcut_b=tensors[f"block{i}.shortcut_b"],
            )
        )
    return ModelParams(
        config=config,
        standardizer=standardizer,
        k_stat=k_stat,
        proj_w=tensors["proj_w"],
        proj_b=tensors["proj_b"],
        input_shortcut_w=tensors["input_shortcut_w"],
        input_shortcut_b=tensors["input_shortcut_b"],
        blocks=blocks,
        mlp_hidden_w=tensors["mlp_hidden_w"],
        mlp_hidden_b=tensors["mlp_hidden_b"],
        mlp_out_w=tensors["mlp_out_w"],
        mlp_out_b=tensors["mlp_out_b"],
    )


def load_ensemble(path: str | Path) -> list[ModelParams]:
    """Load every model stored in a checkpoint, validating shapes against its config."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4))
        try:
            header = json.loads(_read_exact(f, hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from None
        config = ChronosConfig.from_dict(header["config"])
        k_stat = int(header["k_stat"])
        n_models = int(header["n_models"])
        expected = _expected_shapes(config)
        models = []
        for m in range(n_models):
            tensors: dict[str, np.ndarray] = {}
            for exp_name, exp_shape in expected:
                name, arr = _read_tensor(f)
                if name != exp_name:
                    raise CheckpointError(f"{path}: expected tensor {exp_name!r}, found {name!r}")
                if arr.shape != exp_shape:
                    raise CheckpointError(
                        f"{path}: tensor {name!r} has shape {arr.shape}, config requires {exp_shape}"
                    )
                if not np.isfinite(arr).all():
                    raise CheckpointError(f"{path}: tensor {name!r} contains non-finite values")
                tensors[name] = arr
            std = header["standardizers"][m]
            models.append(_assemble(config, Standardizer(mean=std["mean"], std=std["std"]), k_stat, tensors))
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after the declared tensors")
    return models


def load_checkpoint(path: str | Path) -> ModelParams:
    """Load a single-model checkpoint."""
    models = load_ensemble(path)
    if len(models) != 1:
        raise CheckpointError(f"{path}: holds {len(models)} models; use load_ensemble")
    return models[0]
