"""Finite-difference check of the whole model's loss."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .fusion import NgramLM
from .gtr import GTRConfig
from .model import ModelConfig, SGTRModel
from .synthdata import CorpusConfig, generate_corpus

# The relative error floors its denominator at 1e-8, so central-difference
# rounding (about 1e-11 * |f|) must stay below 1e-12 on tiny gradients.
# Scaling the loss by a constant leaves the gradient comparison unchanged.
LOSS_SCALE = 1e-3
TOLERANCE = 1e-4


@dataclass
class ModelGradCheck:
    report: nx.GradReport
    n_nodes: int
    n_samples: int

    @property
    def max_rel_err(self) -> float:
        return self.report.max_rel_err

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOLERANCE


def check_model_gradients(seed: int = 0, n_samples: int = 3, eps: float = 1e-5,
                          max_coords: int = 12) -> ModelGradCheck:
    """Gradient check of the full model (LM, GTR, dynamic fusion, 1-hop mask off)
    on ``n_samples`` random two-character images.

    Graph structure, order code, lengths and LM context are piecewise constant
    in the parameters, and relu / neighbour-max switch between linear pieces.
    All of these are held at their state at the unperturbed point, which is
    the function backprop differentiates.
    """
    corpus = CorpusConfig(charset="abcd", H=16, W=28, T=3, min_len=2, max_len=2, seed=seed)
    samples = generate_corpus(corpus, n_samples)
    cfg = ModelConfig(charset=corpus.charset, H=corpus.H, W=corpus.W, T=corpus.T,
                      gtr=replace(GTRConfig(), onehop_mask=False))
    lm = NgramLM.fit([[corpus.charset.index(c) + 1 for c in s.label] for s in samples], cfg.num_classes)
    model = SGTRModel(cfg, seed=seed, lm=lm)
    images = np.stack([s.image for s in samples])
    tape = nx.SwitchTape()
    with nx.switch_tape(tape):
        structure = model.forward(images).structure
    n_nodes = sum(g.n for g in structure.graphs)

    def f():
        with nx.switch_tape(tape):
            out = model.forward(images, structure=structure)
            return nx.scale(model.loss(out, samples).total, LOSS_SCALE)

    report = nx.grad_check(f, model.params, eps=eps, max_coords=max_coords, seed=seed)
    return ModelGradCheck(report, n_nodes, n_samples)
