"""Training and evaluation loops."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .fusion import LossConfig, MeanTeacherState, NgramLM, ema_update
from .model import EVAL_MODES, ModelConfig, SGTRModel, sequence_targets
from .numerics import load_checkpoint, save_checkpoint
from .numerics.checkpoint import atomic_write_text
from .synthdata import SegSample


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; ``epoch`` is the epoch that failed."""

    def __init__(self, msg: str, epoch: int, last_good: str | None):
        super().__init__(msg)
        self.epoch = epoch
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    batch_size: int = 16
    seed: int = 0
    mean_teacher: bool = False
    ema_alpha: float = 0.999
    eval_every: int = 1  # 0: only after the last epoch
    eval_batch: int = 16
    loss: LossConfig = LossConfig()

    def lr_at(self, epoch: int) -> float:
        """Step decay: divided by 10 at 2/3 and again at 5/6 of the epochs."""
        drops = sum(epoch >= m for m in self.milestones())
        return self.lr * 0.1**drops

    def milestones(self) -> list[int]:
        return [m for m in (2 * self.epochs // 3, 5 * self.epochs // 6) if m > 0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(loss=loss, **d)


# ------------------------------------------------------------------ metrics


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ned_score(pred: str, label: str) -> float:
    """1 - edit distance / longer length; two empty strings score 1."""
    n = max(len(pred), len(label))
    return 1.0 if n == 0 else 1.0 - edit_distance(pred, label) / n


@dataclass
class Tally:
    n: int = 0
    words: int = 0
    chars: int = 0
    char_total: int = 0
    ned: float = 0.0

    def add(self, pred: str, label: str) -> None:
        self.n += 1
        self.words += pred == label
        self.chars += sum(a == b for a, b in zip(pred, label))
        self.char_total += max(len(pred), len(label))
        self.ned += ned_score(pred, label)

    def merge(self, other: "Tally") -> "Tally":
        return Tally(self.n + other.n, self.words + other.words, self.chars + other.chars,
                     self.char_total + other.char_total, self.ned + other.ned)

    def summary(self) -> dict:
        return {
            "word_acc": self.words / self.n if self.n else 0.0,
            "char_acc": self.chars / self.char_total if self.char_total else 1.0,
            "ned": self.ned / self.n if self.n else 0.0,
        }


def pixel_hits(out, samples: Sequence[SegSample]) -> tuple[int, int]:
    pred = out.seg.probs.data.argmax(axis=-1)
    true = np.stack([s.class_map for s in samples])
    return int((pred == true).sum()), int(true.size)


# ------------------------------------------------------------- checkpoints


def checkpoint_meta(model: SGTRModel, extra: dict | None = None) -> dict:
    meta = {"model": model.cfg.to_dict(), "lm": model.lm.to_dict()}
    meta.update(extra or {})
    return meta


def save_model(path, model: SGTRModel, extra: dict | None = None) -> None:
    save_checkpoint(path, model.state_dict(), checkpoint_meta(model, extra))


def load_model(path) -> tuple[SGTRModel, dict]:
    params, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ValueError(f"{path}: checkpoint carries no model configuration")
    cfg = ModelConfig.from_dict(meta["model"])
    lm = NgramLM.from_dict(meta["lm"]) if "lm" in meta else None
    model = SGTRModel(cfg, lm=lm)
    model.load_state_dict(params)
    return model, meta


# ------------------------------------------------------------------ evaluate


def evaluate_model(model: SGTRModel, samples: Sequence[SegSample], modes=None, batch: int = 16) -> dict:
    """Metrics per prediction mode from a single forward pass per batch.

    Returns ``{mode: {"word_acc", "char_acc", "ned"}, "pixel_acc": ...,
    "loss_seg": ..., "loss_cc": ...}``.
    """
    modes = list(available_modes(model.cfg) if modes is None else modes)
    for m in modes:
        check_mode(model.cfg, m)
    tallies = {m: Tally() for m in modes}
    hit = tot = 0
    seg = cc = 0.0
    for k in range(0, len(samples), batch):
        chunk = samples[k:k + batch]
        out = model.forward(np.stack([s.image for s in chunk]))
        lb = model.loss(out, chunk)
        seg += lb.seg * len(chunk)
        cc += lb.cc * len(chunk)
        h, t = pixel_hits(out, chunk)
        hit, tot = hit + h, tot + t
        for m in modes:
            for pred, s in zip(model.predict(out, m), chunk):
                tallies[m].add(pred, s.label)
    res: dict = {m: tallies[m].summary() for m in modes}
    n = max(len(samples), 1)
    res["pixel_acc"] = hit / tot if tot else 0.0
    res["loss_seg"] = seg / n
    res["loss_cc"] = cc / n
    return res


def available_modes(cfg: ModelConfig) -> list[str]:
    out = ["vr"]
    if cfg.use_lm:
        out.append("vr+lm")
    if cfg.use_gtr:
        out.append("vr+gtr")
    out.append("full")
    return out


def check_mode(cfg: ModelConfig, mode: str) -> None:
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {EVAL_MODES}")
    if mode not in available_modes(cfg):
        raise ValueError(f"checkpoint/config mismatch: mode {mode!r} needs a stream this checkpoint was trained without")


def evaluate(checkpoint, samples: Sequence[SegSample], mode: str = "full", batch: int = 16) -> dict:
    model, _ = load_model(checkpoint)
    res = evaluate_model(model, samples, [mode], batch)
    out = dict(res[mode])
    out.update(mode=mode, n=len(samples), pixel_acc=res["pixel_acc"])
    return out


# --------------------------------------------------------------------- train


@dataclass
class TrainResult:
    model: SGTRModel
    history: list[dict] = field(default_factory=list)
    final_path: str | None = None
    best_path: str | None = None


def _metrics_line(epoch: int, split: str, seg: float, cc: float, mt: float, acc: dict, **extra) -> dict:
    row = {"epoch": epoch, "split": split, "loss_seg": seg, "loss_cc": cc, "loss_mt": mt,
           "word_acc": acc["word_acc"], "char_acc": acc["char_acc"], "ned": acc["ned"]}
    row.update(extra)
    return row


def fit_lm(samples: Sequence[SegSample], charset: str) -> NgramLM:
    return NgramLM.fit([[charset.index(ch) + 1 for ch in s.label] for s in samples], len(charset) + 1)


def train(train_set: Sequence[SegSample], cfg: TrainConfig, model_cfg: ModelConfig,
          test_set: Sequence[SegSample] | None = None, out_dir=None, log=None) -> TrainResult:
    """Train a model; deterministic given ``cfg.seed``.

    With ``out_dir`` set, ``metrics.jsonl``, ``final.json`` (rewritten after
    every epoch, so it is the last good state) and ``best.json`` are written
    there. A non-finite loss raises :class:`TrainingAborted`.
    """
    if not train_set:
        raise ValueError("training corpus is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        metrics_path.write_text("")
    model = SGTRModel(model_cfg, seed=cfg.seed, lm=fit_lm(train_set, model_cfg.charset))
    opt = nx.Adam(list(model.params.values()), lr=cfg.lr, betas=cfg.betas)
    rng = np.random.default_rng(cfg.seed)
    teacher_rng = np.random.default_rng([cfg.seed, 1])
    teacher = MeanTeacherState.from_student(model.params, cfg.ema_alpha, model.seg_param_names) if cfg.mean_teacher else None
    res = TrainResult(model)
    best = -math.inf
    last_good = None
    lines: list[str] = []

    def emit(row):
        res.history.append(row)
        lines.append(json.dumps(row))
        if out is not None:
            atomic_write_text(metrics_path, "\n".join(lines) + "\n")
        if log is not None:
            log(row)

    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        lam_mt = cfg.loss.lambda_mt_at(epoch, cfg.epochs) if teacher is not None else 0.0
        perm = rng.permutation(len(train_set))
        sums = {"seg": 0.0, "cc": 0.0, "mt": 0.0, "total": 0.0}
        tally = Tally()
        hit = tot = 0
        for k in range(0, len(perm), cfg.batch_size):
            batch = [train_set[j] for j in perm[k:k + cfg.batch_size]]
            images = np.stack([s.image for s in batch])
            outp = model.forward(images, training=True)
            tp = model.teacher_probs(teacher, images, teacher_rng) if teacher is not None else None
            lb = model.loss(outp, batch, cfg.loss, tp, lam_mt)
            total = lb.total.item()
            if not np.isfinite(total):
                raise TrainingAborted(f"non-finite loss at epoch {epoch} batch {k // cfg.batch_size}", epoch, last_good)
            opt.zero_grad()
            nx.backward(lb.total)
            opt.step()
            if teacher is not None:
                ema_update(teacher, model.params)
            w = len(batch)
            sums["seg"] += lb.seg * w
            sums["cc"] += lb.cc * w
            sums["mt"] += lb.mt * w
            sums["total"] += total * w
            for pred, s in zip(model.predict(outp, "full"), batch):
                tally.add(pred, s.label)
            h, t = pixel_hits(outp, batch)
            hit, tot = hit + h, tot + t
            del outp, lb
        n = len(train_set)
        emit(_metrics_line(epoch, "train", sums["seg"] / n, sums["cc"] / n, sums["mt"] / n, tally.summary(),
                           loss_total=sums["total"] / n, pixel_acc=hit / tot, lr=opt.lr))
        # best.json ranks by test word accuracy when a test set exists, else by train loss
        score = None if test_set else -sums["total"] / n
        last = epoch == cfg.epochs - 1
        if test_set and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            ev = evaluate_model(model, test_set, batch=cfg.eval_batch)
            modes = {m: ev[m] for m in available_modes(model_cfg)}
            emit(_metrics_line(epoch, "test", ev["loss_seg"], ev["loss_cc"], 0.0, ev["full"],
                               pixel_acc=ev["pixel_acc"], modes=modes))
            score = ev["full"]["word_acc"]
        if out is not None:
            meta = {"epoch": epoch, "train": cfg.to_dict()}
            save_model(out / "final.json", model, meta)
            last_good = str(out / "final.json")
            res.final_path = last_good
            if score is not None and score > best:
                best = score
                save_model(out / "best.json", model, meta)
                res.best_path = str(out / "best.json")
    return res
