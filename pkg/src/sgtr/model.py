"""End-to-end S-GTR model: VR, LM stand-in, GTR and fusion wired together."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import fusion, graphgen, gtr, vrseg
from . import numerics as nx
from .fusion import LossBreakdown, LossConfig, MeanTeacherState, NgramLM
from .gtr import GTRConfig, RootCheckConfig
from .numerics import DiffValue
from .synthdata import SegSample

EVAL_MODES = ("vr", "vr+lm", "vr+gtr", "full")
TEACHER_NOISE = 0.03


@dataclass(frozen=True)
class ModelConfig:
    charset: str = "abcdefghij"
    H: int = 32
    W: int = 128
    T: int = 8
    use_lm: bool = True
    use_gtr: bool = True
    fuse: str = "dfuse"
    gtr: GTRConfig = GTRConfig()

    @property
    def num_classes(self) -> int:
        return len(self.charset) + 1

    @property
    def n_streams(self) -> int:
        return 1 + int(self.use_lm) + int(self.use_gtr)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        g = dict(d.pop("gtr", {}))
        rc = RootCheckConfig(**g.pop("root_check", {}))
        return cls(gtr=GTRConfig(root_check=rc, **g), **d)


@dataclass
class Outputs:
    seg: vrseg.SegmentationMap
    order: vrseg.OrderAttention
    V: DiffValue
    coarse: vrseg.SequenceLogits
    L: DiffValue | None
    S: DiffValue | None
    Z: DiffValue
    graphs: list = field(default_factory=list)
    structure: "Structure | None" = None

    @property
    def lengths(self) -> np.ndarray:
        return self.coarse.length


@dataclass
class Structure:
    """The discrete choices of a forward pass: order code, sequence lengths,
    LM context characters and graphs. Passing it back to ``forward`` holds
    them fixed, which makes the loss smooth in the parameters around that point."""

    code: np.ndarray
    lengths: np.ndarray
    prev: np.ndarray
    graphs: list


def build_graphs(probs: np.ndarray, maps: np.ndarray, coarse_scores: np.ndarray, lengths: np.ndarray,
                 cfg: GTRConfig) -> list[graphgen.FullGraph]:
    """One root-checked full graph per sample, from detached VR outputs."""
    B, H, W, _ = probs.shape
    out = []
    for b in range(B):
        subs = []
        for i in range(int(lengths[b])):
            c_i = int(np.argmax(coarse_scores[b, i, 1:])) + 1
            P = graphgen.extract_node_set(probs[b], maps[b], i, c_i)
            g = graphgen.char_graph(P, H, W, cfg.adjacency)
            g.pix = P.pix  # type: ignore[attr-defined]
            subs.append(g)
        full = graphgen.link_subgraphs(subs)
        full = gtr.root_check(full, cfg.root_check)
        full.pix = [g.pix for g in subs]  # type: ignore[attr-defined]
        out.append(full)
    return out


def node_features(params, graphs, V: DiffValue, H: int, W: int) -> DiffValue:
    """Embedded node rows for all graphs; R is gathered from V so gradients reach the VR."""
    B, _, _, T, C = V.shape
    rows, cols, vals = [], [], []
    xs, ys, idx = [], [], []
    r = 0
    for b, g in enumerate(graphs):
        for k, (start, stop) in enumerate(g.spans):
            i = g.char_index[k]
            pix = g.pix[k]
            src = (b * H * W + pix) * T + i
            for s in src:
                rows.append(r)
                cols.append(int(s))
                vals.append(1.0)
                r += 1
            # root: mean of the entries
            rows.extend([r] * len(src))
            cols.extend(int(s) for s in src)
            vals.extend([1.0 / len(src)] * len(src))
            r += 1
        xs.append(g.xs)
        ys.append(g.ys)
        idx.append(g.order)
    Sel = sp.csr_matrix((vals, (rows, cols)), shape=(r, B * H * W * T))
    R = nx.spmm(Sel, nx.reshape(V, (B * H * W * T, C)))
    return graphgen.embed_features(params, np.concatenate(xs) / W, np.concatenate(ys) / H, R, np.concatenate(idx))


class SGTRModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, lm: NgramLM | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        C, T = cfg.num_classes, cfg.T
        self.params: dict[str, DiffValue] = {}
        self.params.update(vrseg.init_params(rng, C, T))
        if cfg.use_gtr:
            self.params.update(graphgen.init_embed_params(rng, C))
            self.params.update(gtr.init_params(rng, C, cfg.gtr))
        if cfg.fuse != "add":
            self.params.update(fusion.init_fusion_params(rng, C, cfg.n_streams))
        self.lm = lm if lm is not None else NgramLM.uniform(C)

    # ------------------------------------------------------------------ utils

    @property
    def seg_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("seg.")]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ValueError(f"checkpoint/config mismatch: missing {missing}, unexpected {extra}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"checkpoint/config mismatch: {k} has shape {v.shape}, expected {self.params[k].shape}")
            self.params[k].data[...] = v

    # ---------------------------------------------------------------- forward

    def forward(self, images: np.ndarray, training: bool = False, structure: Structure | None = None) -> Outputs:
        cfg = self.cfg
        p = self.params
        fixed = structure is not None
        seg = vrseg.vr_forward(p, images)
        order = vrseg.feature_order(p, seg, structure.code if fixed else None)
        V = vrseg.attend(seg.probs, order.maps)
        coarse = vrseg.decode_sequence(V, structure.lengths if fixed else None)
        B, Tn, C = coarse.scores.shape
        prev = structure.prev if fixed else fusion.context_argmax(coarse.scores.data)
        streams = [nx.reshape(coarse.scores, (B * Tn, C))]
        L = S = None
        if cfg.use_lm:
            L = fusion.lm_rescore(coarse.scores, coarse.length, self.lm, prev)
            streams.append(nx.reshape(L, (B * Tn, C)))
        graphs = []
        if cfg.use_gtr:
            if fixed:
                graphs = structure.graphs
            else:
                graphs = build_graphs(seg.probs.data, order.maps.data, coarse.scores.data, coarse.length, cfg.gtr)
            n_nodes = sum(g.n for g in graphs)
            X = node_features(p, graphs, V, cfg.H, cfg.W) if n_nodes else nx.constant(np.zeros((0, graphgen.EMBED_DIM)))
            S = gtr.gtr_forward(p, graphs, X, Tn, C, cfg.gtr, training=training)
            streams.append(nx.reshape(S, (B * Tn, C)))
        Z = nx.reshape(fusion.dynamic_fuse(streams, p, cfg.fuse), (B, Tn, C))
        return Outputs(seg, order, V, coarse, L, S, Z, graphs, Structure(order.code, coarse.length, prev, graphs))

    def teacher_probs(self, teacher: MeanTeacherState, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noisy = np.clip(images + rng.normal(0.0, TEACHER_NOISE, size=images.shape), 0.0, 1.0)
        tp = {k: nx.constant(v) for k, v in teacher.teacher.items()}
        return vrseg.vr_forward(tp, noisy).probs.data

    # ------------------------------------------------------------------- loss

    def loss(self, out: Outputs, samples: Sequence[SegSample], loss_cfg: LossConfig = LossConfig(),
             teacher_probs: np.ndarray | None = None, lambda_mt: float = 0.0) -> LossBreakdown:
        """Weighted sum of segmentation, consistency and mean-teacher terms.

        The segmentation term adds pixel cross-entropy, smooth-L1 on the order
        maps, sequence cross-entropy on Z and (with GTR) on S.
        """
        cfg = self.cfg
        B, H, W, C = out.seg.logits.shape
        Tn = cfg.T
        pix_t = np.stack([s.class_map for s in samples]).reshape(-1)
        l_pix = nx.cross_entropy(nx.reshape(out.seg.logits, (B * H * W, C)), pix_t,
                                 np.where(pix_t > 0, loss_cfg.fg_weight, 1.0))
        tgt = vrseg.order_targets([s.order_centers for s in samples], [s.length for s in samples], H, W, Tn)
        l_ord = nx.smooth_l1(out.order.maps, nx.constant(tgt))
        seq_t = sequence_targets(samples, cfg.charset, Tn).reshape(-1)
        l_z = nx.cross_entropy(nx.reshape(out.Z, (B * Tn, C)), seq_t)
        seg_terms = [l_pix, l_ord, l_z]
        parts = {"pixel_ce": l_pix.item(), "order_l1": l_ord.item(), "seq_ce_z": l_z.item()}
        if out.S is not None:
            l_s = nx.cross_entropy(nx.reshape(out.S, (B * Tn, C)), seq_t)
            seg_terms.append(l_s)
            parts["seq_ce_s"] = l_s.item()
        l_seg = seg_terms[0]
        for t in seg_terms[1:]:
            l_seg = nx.add(l_seg, t)
        total = nx.scale(l_seg, loss_cfg.lambda_seg)
        l_cc = 0.0
        if out.S is not None and out.L is not None:
            cc = fusion.consistency_loss(out.L, out.S, out.lengths, loss_cfg.kl_direction)
            l_cc = cc.item()
            if loss_cfg.lambda_cc:
                total = nx.add(total, nx.scale(cc, loss_cfg.lambda_cc))
        l_mt = 0.0
        if teacher_probs is not None:
            mt = nx.mse(out.seg.probs, nx.constant(teacher_probs))
            l_mt = mt.item()
            if lambda_mt:
                total = nx.add(total, nx.scale(mt, lambda_mt))
        return LossBreakdown(total, l_seg.item(), l_cc, l_mt, parts, lambda_mt)

    # ------------------------------------------------------------ prediction

    def predict(self, out: Outputs, mode: str = "full") -> list[str]:
        if mode not in EVAL_MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {EVAL_MODES}")
        cfg = self.cfg
        lengths = out.lengths
        if mode == "vr":
            ids = _row_argmax(out.coarse.scores.data, lengths)
        elif mode == "vr+lm":
            if out.L is None:
                raise ValueError("checkpoint/config mismatch: mode vr+lm needs a model trained with the LM")
            ids = _row_argmax(out.L.data, lengths)
        elif mode == "vr+gtr":
            if out.S is None:
                raise ValueError("checkpoint/config mismatch: mode vr+gtr needs a model trained with GTR")
            ids = _row_argmax(_log_softmax(out.coarse.scores.data) + _log_softmax(out.S.data), lengths)
        else:
            z = out.Z.data.argmax(axis=-1)
            ids = [[int(c) for c in row if c != 0] for row in z]
        return ["".join(cfg.charset[c - 1] for c in row) for row in ids]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _row_argmax(scores: np.ndarray, lengths) -> list[list[int]]:
    return [[int(np.argmax(scores[b, t, 1:])) + 1 for t in range(int(lengths[b]))] for b in range(scores.shape[0])]


def sequence_targets(samples: Sequence[SegSample], charset: str, max_len: int) -> np.ndarray:
    out = np.zeros((len(samples), max_len), dtype=np.int64)
    for b, s in enumerate(samples):
        for t, ch in enumerate(s.label[:max_len]):
            out[b, t] = charset.index(ch) + 1
    return out
