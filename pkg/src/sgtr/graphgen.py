"""Two-level character graphs built from the attended segmentation tensor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DiffValue

N_MAX = 64
TOP_K = 8
PRUNE_RATIO = 0.5
EMBED_DIM = 64
PART_DIM = EMBED_DIM // 4
ATTN_KEEP = 0.5


@dataclass
class NodeSet:
    xs: np.ndarray  # column index per entry, root last
    ys: np.ndarray  # row index per entry
    R: np.ndarray  # (n, C) feature vectors
    pix: np.ndarray  # flat (h * W + w) pixel index of each non-root entry
    char_index: int

    @property
    def root_index(self) -> int:
        return len(self.xs) - 1

    def __len__(self) -> int:
        return len(self.xs)


@dataclass
class CharGraph:
    xs: np.ndarray
    ys: np.ndarray
    E: np.ndarray
    A: np.ndarray
    root: int
    i: int
    X: DiffValue | np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.xs)


@dataclass
class FullGraph:
    xs: np.ndarray
    ys: np.ndarray
    A: np.ndarray  # block diagonal plus root chain, dense
    roots: list[int]
    spans: list[tuple[int, int]]  # [start, stop) per subgraph
    order: np.ndarray  # character index per node
    char_index: list[int]
    sub_A: list[np.ndarray] = field(default_factory=list)
    sub_E: list[np.ndarray] = field(default_factory=list)
    X: DiffValue | np.ndarray | None = None
    context_A: np.ndarray | None = None  # set by the first GTR pass, reused afterwards

    @property
    def n(self) -> int:
        return len(self.xs)

    def chain_edges(self) -> list[tuple[int, int]]:
        return [(self.roots[k], self.roots[k + 1]) for k in range(len(self.roots) - 1)]


# ----------------------------------------------------------------- node sets


def extract_node_set(probs: np.ndarray, maps: np.ndarray, i: int, char_class: int, n_max: int = N_MAX) -> NodeSet:
    """Pixels of the i-th character: predicted class matches and attention is strong.

    ``probs`` is (H, W, C), ``maps`` is (H, W, T). At most ``n_max`` pixels
    are kept, highest attention first (raster order breaks ties). A root
    entry holding the mean position and feature is appended.
    """
    h, w, _ = probs.shape
    att = maps[:, :, i]
    sel = (probs.argmax(axis=-1) == char_class) & (att > ATTN_KEEP * att.max())
    flat = np.flatnonzero(sel.reshape(-1))
    if flat.size == 0:
        flat = np.array([int(np.argmax(att.reshape(-1)))])
    elif flat.size > n_max:
        a = att.reshape(-1)[flat]
        flat = flat[np.lexsort((flat, -a))[:n_max]]
        flat.sort()
    ys, xs = np.divmod(flat, w)
    R = probs.reshape(-1, probs.shape[-1])[flat] * att.reshape(-1)[flat, None]
    xs_all = np.r_[xs.astype(np.float64), xs.mean()]
    ys_all = np.r_[ys.astype(np.float64), ys.mean()]
    R_all = np.vstack([R, R.mean(axis=0, keepdims=True)])
    return NodeSet(xs_all, ys_all, R_all, flat, i)


def sincos_code(i, dim: int = PART_DIM, base: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos code of order index ``i``: dims 2k, 2k+1 = sin, cos of i / base^(2k/dim)."""
    i = np.atleast_1d(np.asarray(i, dtype=np.float64))
    k = np.arange(dim // 2)
    ang = i[:, None] / base ** (2 * k / dim)
    out = np.empty((i.size, dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def init_embed_params(rng: np.random.Generator, num_classes: int) -> dict[str, DiffValue]:
    return {
        "embed.x.w": nx.parameter(rng.normal(0, 1.0, (1, PART_DIM))),
        "embed.x.b": nx.parameter(rng.normal(0, 0.1, PART_DIM)),
        "embed.y.w": nx.parameter(rng.normal(0, 1.0, (1, PART_DIM))),
        "embed.y.b": nx.parameter(rng.normal(0, 0.1, PART_DIM)),
        "embed.R.w": nx.parameter(rng.normal(0, 1.0 / np.sqrt(num_classes), (num_classes, PART_DIM))),
        "embed.R.b": nx.parameter(np.zeros(PART_DIM)),
    }


def embed_features(params, x_norm: np.ndarray, y_norm: np.ndarray, R: DiffValue, order_idx: np.ndarray) -> DiffValue:
    """Node feature rows concat(e_x, e_y, e_R, e_i)."""
    ex = nx.add_bias(nx.constant(x_norm.reshape(-1, 1)) @ params["embed.x.w"], params["embed.x.b"])
    ey = nx.add_bias(nx.constant(y_norm.reshape(-1, 1)) @ params["embed.y.w"], params["embed.y.b"])
    er = nx.add_bias(R @ params["embed.R.w"], params["embed.R.b"])
    ei = nx.constant(sincos_code(order_idx))
    return nx.concat([ex, ey, er, ei], axis=1)


def embed_nodes(params, P: NodeSet, H: int, W: int) -> DiffValue:
    n = len(P)
    return embed_features(params, P.xs / W, P.ys / H, nx.constant(P.R), np.full(n, P.char_index))


# -------------------------------------------------------------- similarities


def position_similarity(p, q, H: int, W: int) -> float:
    d = np.hypot(p[0] - q[0], p[1] - q[1])
    return max(0.0, 1.0 - d / max(H, W))


def feature_similarity(Rp, Rq) -> float:
    Rp, Rq = np.asarray(Rp, dtype=np.float64), np.asarray(Rq, dtype=np.float64)
    den = np.linalg.norm(Rp) * np.linalg.norm(Rq)
    if den == 0:
        return 0.0
    return float(np.clip(Rp @ Rq / den, -1.0, 1.0))


def overall_similarity(p, q, Rp, Rq, H: int, W: int) -> float:
    return position_similarity(p, q, H, W) * feature_similarity(Rp, Rq)


def cosine_matrix(F: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(F, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = F / safe[:, None]
    S = np.clip(U @ U.T, -1.0, 1.0)
    S[norms == 0, :] = 0.0
    S[:, norms == 0] = 0.0
    return S


def similarity_matrix(xs, ys, R, H: int, W: int) -> np.ndarray:
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    d = np.hypot(xs[:, None] - xs[None, :], ys[:, None] - ys[None, :])
    Ep = np.maximum(0.0, 1.0 - d / max(H, W))
    return Ep * cosine_matrix(np.asarray(R, dtype=np.float64))


# ----------------------------------------------------------------- adjacency


def build_adjacency(E: np.ndarray, mode: str = "discrete", k: int = TOP_K, ratio: float = PRUNE_RATIO) -> np.ndarray:
    """Top-k proposals, 1-hop pruning, symmetrisation by union.

    A proposal (u, v) survives pruning when E(u, v) is at least ``ratio``
    times the mean top-k similarity of u and also of v, i.e. v sits inside
    u's similarity cluster and vice versa.
    """
    if mode not in ("discrete", "continuous"):
        raise ValueError(f"unknown adjacency mode {mode!r}")
    n = E.shape[0]
    A = np.zeros((n, n))
    kk = min(k, n - 1)
    if kk <= 0:
        return A
    masked = E.astype(np.float64).copy()
    np.fill_diagonal(masked, -np.inf)
    top = np.argsort(-masked, axis=1, kind="stable")[:, :kk]
    rows = np.repeat(np.arange(n), kk)
    cols = top.reshape(-1)
    vals = E[rows, cols]
    m = E[np.arange(n)[:, None], top].mean(axis=1)
    keep = (vals >= ratio * m[rows]) & (vals >= ratio * m[cols])
    r, c = rows[keep], cols[keep]
    A[r, c] = 1.0
    A = np.maximum(A, A.T)
    if mode == "continuous":
        A = A * E
    np.fill_diagonal(A, 0.0)
    return A


def char_graph(P: NodeSet, H: int, W: int, mode: str = "discrete") -> CharGraph:
    E = similarity_matrix(P.xs, P.ys, P.R, H, W)
    return CharGraph(P.xs, P.ys, E, build_adjacency(E, mode), P.root_index, P.char_index)


def link_subgraphs(graphs: list[CharGraph]) -> FullGraph:
    """Block-diagonal assembly with an undirected edge between consecutive roots."""
    if not graphs:
        return FullGraph(np.zeros(0), np.zeros(0), np.zeros((0, 0)), [], [], np.zeros(0, dtype=np.int64), [])
    sizes = [g.n for g in graphs]
    total = int(np.sum(sizes))
    A = np.zeros((total, total))
    roots, spans, order = [], [], []
    start = 0
    for g in graphs:
        stop = start + g.n
        A[start:stop, start:stop] = g.A
        roots.append(start + g.root)
        spans.append((start, stop))
        order.extend([g.i] * g.n)
        start = stop
    for a, b in zip(roots[:-1], roots[1:]):
        A[a, b] = A[b, a] = 1.0
    return FullGraph(
        np.concatenate([g.xs for g in graphs]), np.concatenate([g.ys for g in graphs]), A, roots, spans,
        np.asarray(order, dtype=np.int64), [g.i for g in graphs], [g.A for g in graphs], [g.E for g in graphs],
    )
