"""Language-model stand-in, stream fusion, consistency and mean-teacher pieces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .numerics import DiffValue

FUSE_MODES = ("dfuse", "add", "concat")


@dataclass
class NgramLM:
    """Add-k smoothed character bigram over class ids.

    ``logp[prev, c]``: prev in 0..C-1 is a class id (0 = background) and
    prev == C is the start token; c == 0 doubles as end of text.
    """

    logp: np.ndarray
    smoothing: float = 1.0
    order: int = 2

    @property
    def num_classes(self) -> int:
        return self.logp.shape[1]

    @property
    def start(self) -> int:
        return self.logp.shape[1]

    @classmethod
    def fit(cls, sequences: Sequence[Sequence[int]], num_classes: int, smoothing: float = 1.0) -> "NgramLM":
        counts = np.zeros((num_classes + 1, num_classes))
        for seq in sequences:
            prev = num_classes
            for c in list(seq) + [0]:
                counts[prev, c] += 1
                prev = c
        probs = (counts + smoothing) / (counts.sum(axis=1, keepdims=True) + smoothing * num_classes)
        return cls(np.log(probs), smoothing)

    @classmethod
    def uniform(cls, num_classes: int) -> "NgramLM":
        return cls(np.full((num_classes + 1, num_classes), -np.log(num_classes)))

    def to_dict(self) -> dict:
        return {"order": self.order, "smoothing": self.smoothing, "logp": self.logp.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NgramLM":
        return cls(np.asarray(d["logp"], dtype=np.float64), float(d["smoothing"]), int(d["order"]))


def lm_rescore(T: DiffValue, lengths: np.ndarray, lm: NgramLM, prev_best: np.ndarray | None = None) -> DiffValue:
    """L[t] = log_softmax(T[t]) + log P(c | character read at t-1); rows >= length copy T.

    The previous character is the non-background argmax of row t-1, the
    start token for t = 0. ``T`` is (B, T, C). ``prev_best`` overrides the
    per-row argmax, shape (B, T).
    """
    B, Tn, C = T.shape
    flat = nx.reshape(T, (B * Tn, C))
    lsm = nx.log_softmax_rows(flat)
    prior = np.zeros((B * Tn, C))
    live = np.zeros((B * Tn, C))
    if prev_best is None:
        prev_best = context_argmax(T.data)
    for b in range(B):
        for t in range(int(lengths[b])):
            prev = lm.start if t == 0 else int(prev_best[b, t - 1])
            prior[b * Tn + t] = lm.logp[prev]
            live[b * Tn + t] = 1.0
    rescored = nx.add(lsm, nx.constant(prior))
    L = nx.add(nx.mul(rescored, nx.constant(live)), nx.mul(flat, nx.constant(1.0 - live)))
    return nx.reshape(L, (B, Tn, C))


def context_argmax(T: np.ndarray) -> np.ndarray:
    """Non-background argmax per row, the character each row hands to the next."""
    return T[:, :, 1:].argmax(axis=-1) + 1


def init_fusion_params(rng: np.random.Generator, num_classes: int, n_streams: int) -> dict[str, DiffValue]:
    """Gate weights start at zero (gate 0.5); the value map starts near a stream sum."""
    C = num_classes
    w1 = np.vstack([np.eye(C)] * n_streams) + rng.normal(0, 0.01, (n_streams * C, C))
    return {
        "fuse.w0": nx.parameter(np.zeros((n_streams * C, C))),
        "fuse.b0": nx.parameter(np.zeros(C)),
        "fuse.w1": nx.parameter(w1),
        "fuse.b1": nx.parameter(np.zeros(C)),
    }


def dynamic_fuse(streams: Sequence[DiffValue], params, mode: str = "dfuse") -> DiffValue:
    """Fuse N x C prediction streams row by row.

    dfuse: sigmoid(W0 [..]) * (W1 [..]); add: plain sum; concat: W1 [..].
    """
    if mode not in FUSE_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    if mode == "add":
        out = streams[0]
        for s in streams[1:]:
            out = nx.add(out, s)
        return out
    cat = nx.concat(list(streams), axis=1) if len(streams) > 1 else streams[0]
    value = nx.add_bias(cat @ params["fuse.w1"], params["fuse.b1"])
    if mode == "concat":
        return value
    gate = nx.sigmoid(nx.add_bias(cat @ params["fuse.w0"], params["fuse.b0"]))
    return nx.mul(gate, value)


def consistency_loss(L: DiffValue, S: DiffValue, lengths: np.ndarray, direction: str = "symmetric") -> DiffValue:
    """Mutual-learning KL between the row distributions of L and S, rows < length."""
    B, Tn, C = L.shape
    w = (np.arange(Tn)[None, :] < np.asarray(lengths)[:, None]).reshape(-1).astype(np.float64)
    if w.sum() == 0:
        return DiffValue(0.0)
    pl = nx.softmax_rows(nx.reshape(L, (B * Tn, C)))
    ps = nx.softmax_rows(nx.reshape(S, (B * Tn, C)))
    return symmetric_kl(pl, ps, w, direction)


def symmetric_kl(p: DiffValue, q: DiffValue, row_weights=None, direction: str = "symmetric") -> DiffValue:
    if direction == "forward":
        return nx.kl_probs(p, q, row_weights)
    if direction == "reverse":
        return nx.kl_probs(q, p, row_weights)
    if direction != "symmetric":
        raise ValueError(f"unknown KL direction {direction!r}")
    return nx.scale(nx.add(nx.kl_probs(p, q, row_weights), nx.kl_probs(q, p, row_weights)), 0.5)


@dataclass(frozen=True)
class LossConfig:
    lambda_seg: float = 1.0
    lambda_cc: float = 1.0
    lambda_mt: float = 1.0
    mt_start_epoch: int = 0
    mt_end_epoch: int | None = None  # None: decay to zero at the last epoch
    kl_direction: str = "symmetric"
    fg_weight: float = 5.0  # pixel cross-entropy weight of text pixels versus background

    def __post_init__(self):
        if self.lambda_mt < 0:
            raise ValueError("lambda_mt must be non-negative")
        if not 0 < self.fg_weight < float("inf"):
            raise ValueError(f"fg_weight must be positive and finite, got {self.fg_weight}")

    def lambda_mt_at(self, epoch: int, total_epochs: int) -> float:
        """Linear decay from ``lambda_mt`` at the start epoch to 0 at the end epoch."""
        end = total_epochs if self.mt_end_epoch is None else self.mt_end_epoch
        if epoch < self.mt_start_epoch:
            return self.lambda_mt
        if end <= self.mt_start_epoch:
            return 0.0
        frac = (epoch - self.mt_start_epoch) / (end - self.mt_start_epoch)
        return self.lambda_mt * max(0.0, 1.0 - frac)


@dataclass
class MeanTeacherState:
    teacher: dict[str, np.ndarray]
    alpha: float = 0.999
    updates: int = 0

    @classmethod
    def from_student(cls, params: Mapping[str, DiffValue], alpha: float = 0.999, names=None) -> "MeanTeacherState":
        names = list(params) if names is None else list(names)
        return cls({k: params[k].data.copy() for k in names}, alpha)


def ema_update(mt: MeanTeacherState, student: Mapping[str, DiffValue | np.ndarray]) -> MeanTeacherState:
    """theta_T <- alpha * theta_T + (1 - alpha) * theta_S for every teacher parameter."""
    a = mt.alpha
    for name, t in mt.teacher.items():
        s = student[name]
        s = s.data if isinstance(s, DiffValue) else np.asarray(s)
        if s.shape != t.shape:
            raise ValueError(f"shape drift in {name!r}: teacher {t.shape} vs student {s.shape}")
        t *= a
        t += (1.0 - a) * s
    mt.updates += 1
    return mt


@dataclass
class LossBreakdown:
    total: DiffValue
    seg: float
    cc: float
    mt: float
    parts: dict[str, float] = field(default_factory=dict)
    lambda_mt: float = 0.0
