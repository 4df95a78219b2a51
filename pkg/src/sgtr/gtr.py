"""Graph reasoning network: spatial and contextual GCN stages, root check,
readout with iterative pooling, and per-character classification."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .graphgen import EMBED_DIM, N_MAX, FullGraph, build_adjacency, cosine_matrix
from .numerics import DiffValue

READOUT_ROUNDS = math.ceil(math.log2(N_MAX + 1)) + 1
BACKGROUND_ROW = 1.0


@dataclass(frozen=True)
class RootCheckConfig:
    eps: float = 0.75
    trials: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.eps <= 1:
            raise ValueError(f"root check eps must lie in (0, 1], got {self.eps}")


@dataclass(frozen=True)
class GTRConfig:
    layers: int = 2
    adjacency: str = "discrete"
    pool: str = "graph"
    onehop_mask: bool = True
    root_check: RootCheckConfig = RootCheckConfig()

    def __post_init__(self):
        if self.layers not in (1, 2, 3):
            raise ValueError(f"GCN layer count must be 1, 2 or 3, got {self.layers}")
        if self.adjacency not in ("discrete", "continuous"):
            raise ValueError(f"adjacency must be discrete or continuous, got {self.adjacency!r}")
        if self.pool not in ("graph", "average"):
            raise ValueError(f"pool must be graph or average, got {self.pool!r}")


def init_params(rng: np.random.Generator, num_classes: int, cfg: GTRConfig, d: int = EMBED_DIM) -> dict[str, DiffValue]:
    p = {}
    for l in range(1, cfg.layers + 1):
        p[f"gtr.spatial{l}.w"] = nx.parameter(rng.normal(0, math.sqrt(2.0 / (2 * d)), (2 * d, d)))
    for l in range(1, cfg.layers + 1):
        p[f"gtr.context{l}.w"] = nx.parameter(rng.normal(0, math.sqrt(2.0 / d), (d, d)))
    if cfg.pool == "graph":
        for r in range(READOUT_ROUNDS):
            p[f"gtr.readout{r}.w"] = nx.parameter(rng.normal(0, math.sqrt(2.0 / (2 * d)), (2 * d, d)))
            p[f"gtr.readout{r}.b"] = nx.parameter(np.zeros(d))
    p["gtr.cls.w"] = nx.parameter(rng.normal(0, math.sqrt(1.0 / d), (d, num_classes)))
    p["gtr.cls.b"] = nx.parameter(np.zeros(num_classes))
    return p


# ------------------------------------------------------------------ adjacency


def normalize_adjacency(A):
    """K = D^-1/2 (A + I) D^-1/2 with D the row sums of A + I; sparse in, sparse out."""
    if sp.issparse(A):
        At = (sp.csr_matrix(A) + sp.identity(A.shape[0], format="csr")).tocsr()
        dinv = 1.0 / np.sqrt(np.asarray(At.sum(axis=1)).reshape(-1))
        D = sp.diags(dinv)
        return (D @ At @ D).tocsr()
    At = np.asarray(A, dtype=np.float64) + np.eye(A.shape[0])
    dinv = 1.0 / np.sqrt(At.sum(axis=1))
    return At * dinv[:, None] * dinv[None, :]


def contextual_adjacency(Xc: np.ndarray) -> np.ndarray:
    """Discrete top-k adjacency over feature cosine similarity of the rows."""
    return build_adjacency(cosine_matrix(np.asarray(Xc, dtype=np.float64)), "discrete")


# --------------------------------------------------------------------- stages


def spatial_stage(X: DiffValue, K, weights: list[DiffValue]) -> DiffValue:
    """Y = relu([X ; K X] W) for each layer, output feeding the next."""
    for W in weights:
        X = nx.relu(nx.concat([X, nx.spmm(K, X)], axis=1) @ W)
    return X


def contextual_stage(Xc: DiffValue, G, weights: list[DiffValue]) -> DiffValue:
    for W in weights:
        Xc = nx.relu(nx.spmm(G, Xc) @ W)
    return Xc


# ----------------------------------------------------------------- root check


def closed_neighbors(A: np.ndarray, v: int) -> set[int]:
    return set(np.flatnonzero(A[v] != 0).tolist()) | {v}


def neighbor_iou(A: np.ndarray, r: int, s: int) -> float:
    a, b = closed_neighbors(A, r), closed_neighbors(A, s)
    return len(a & b) / len(a | b)


def root_check(full: FullGraph, cfg: RootCheckConfig = RootCheckConfig(), rng: np.random.Generator | None = None) -> FullGraph:
    """Re-anchor roots whose 1-hop neighbourhood disagrees with a random alternative root.

    For each subgraph with at least two nodes, ``cfg.trials`` alternative
    roots are drawn; if the mean neighbourhood IoU with the current root is
    below ``cfg.eps`` the root moves to the node with the largest total
    similarity. Chain edges follow the new roots.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    new_roots = []
    for k, (start, stop) in enumerate(full.spans):
        A, E = full.sub_A[k], full.sub_E[k]
        r = full.roots[k] - start
        n = stop - start
        if n < 2:
            new_roots.append(full.roots[k])
            continue
        others = np.array([v for v in range(n) if v != r])
        ious = [neighbor_iou(A, r, int(rng.choice(others))) for _ in range(cfg.trials)]
        if float(np.mean(ious)) < cfg.eps:
            r = int(np.argmax(E.sum(axis=1)))
        new_roots.append(start + r)
    A = full.A.copy()
    for a, b in full.chain_edges():
        A[a, b] = A[b, a] = 0.0
    for k, (start, stop) in enumerate(full.spans):
        A[start:stop, start:stop] = full.sub_A[k]
    for a, b in zip(new_roots[:-1], new_roots[1:]):
        A[a, b] = A[b, a] = 1.0
    return replace(full, A=A, roots=new_roots)


# ------------------------------------------------------------ readout/pooling


def readout_concat(X: DiffValue, A: np.ndarray) -> DiffValue:
    """x_i* = [x_i ; element-wise max of neighbour features]; zero max for isolated nodes."""
    dst, src = np.nonzero(np.asarray(A) != 0)
    return nx.concat([X, nx.segment_max(X, dst, src, X.shape[0])], axis=1)


def pool_indices(xs: np.ndarray, ys: np.ndarray, root: int) -> np.ndarray:
    """Sorted indices of the ceil(N/2) nodes nearest the root (root first, ties by id)."""
    n = len(xs)
    if n <= 1:
        return np.arange(n)
    d = np.hypot(xs - xs[root], ys - ys[root])
    d[root] = -1.0
    order = np.lexsort((np.arange(n), d))
    return np.sort(order[: (n + 1) // 2])


def pool_graph(X, A: np.ndarray, root: int, xs: np.ndarray, ys: np.ndarray):
    """One pooling step: keep the nearer half; returns (X', A', root', xs', ys')."""
    keep = pool_indices(xs, ys, root)
    new_root = int(np.flatnonzero(keep == root)[0])
    Xk = nx.take_rows(X, keep) if isinstance(X, DiffValue) else np.asarray(X)[keep]
    return Xk, A[np.ix_(keep, keep)], new_root, xs[keep], ys[keep]


def onehop_node_mask(full: FullGraph) -> np.ndarray:
    """True for nodes in the union of the roots' closed 1-hop neighbourhoods."""
    mask = np.zeros(full.n, dtype=bool)
    for r in full.roots:
        mask[list(closed_neighbors(full.A, r))] = True
    return mask


def onehop_grad_mask(full: FullGraph, grads: np.ndarray) -> np.ndarray:
    """Zero node-feature gradient rows outside the roots' 1-hop neighbourhoods."""
    return grads * onehop_node_mask(full)[:, None]


# -------------------------------------------------------------------- forward


def _block(mats):
    return sp.block_diag(mats, format="csr") if mats else sp.csr_matrix((0, 0))


def gtr_forward(params, graphs: list[FullGraph], X: DiffValue, max_len: int, num_classes: int,
                cfg: GTRConfig, training: bool = False) -> DiffValue:
    """Spatial context logits S, shape (B, T, C), for a batch of full graphs.

    ``X`` stacks the embedded node features of all graphs in order. Rows of S
    without a subgraph carry background one-hot logits.
    """
    B = len(graphs)
    fill = np.zeros((B * max_len, num_classes))
    fill[:, 0] = BACKGROUND_ROW
    offsets = np.cumsum([0] + [g.n for g in graphs])
    if offsets[-1] == 0:
        return nx.reshape(nx.constant(fill), (B, max_len, num_classes))

    if training and cfg.onehop_mask:
        X = nx.mask_grad(X, np.concatenate([onehop_node_mask(g) for g in graphs]))
    K = normalize_adjacency(_block([sp.csr_matrix(g.A) for g in graphs]))
    Xc = spatial_stage(X, K, [params[f"gtr.spatial{l}.w"] for l in range(1, cfg.layers + 1)])
    for b, g in enumerate(graphs):
        if g.context_A is None:
            g.context_A = contextual_adjacency(Xc.data[offsets[b]:offsets[b + 1]])
    G = normalize_adjacency(_block([sp.csr_matrix(g.context_A) for g in graphs]))
    Y = contextual_stage(Xc, G, [params[f"gtr.context{l}.w"] for l in range(1, cfg.layers + 1)])

    # one entry per subgraph: (global node ids, local root, xs, ys, adjacency, output row)
    subs = []
    for b, g in enumerate(graphs):
        for k, (start, stop) in enumerate(g.spans):
            subs.append((np.arange(start, stop) + offsets[b], g.roots[k] - start, g.xs[start:stop],
                         g.ys[start:stop], g.sub_A[k], b * max_len + g.char_index[k]))
    out_rows = np.array([s[5] for s in subs], dtype=np.int64)

    if cfg.pool == "average":
        n_all = int(offsets[-1])
        rows, cols, vals = [], [], []
        for j, s in enumerate(subs):
            rows += [j] * len(s[0])
            cols += s[0].tolist()
            vals += [1.0 / len(s[0])] * len(s[0])
        P = sp.csr_matrix((vals, (rows, cols)), shape=(len(subs), n_all))
        final = nx.spmm(P, Y)
    else:
        final = _graph_pool(params, Y, subs)

    logits = nx.add_bias(final @ params["gtr.cls.w"], params["gtr.cls.b"])
    S = nx.tensor.scatter_rows(logits, out_rows, B * max_len, fill)
    return nx.reshape(S, (B, max_len, num_classes))


def _graph_pool(params, Y: DiffValue, subs) -> DiffValue:
    """Readout then pool, repeated until each subgraph holds a single node."""
    state = [(s[0].copy(), s[1], s[2], s[3], s[4]) for s in subs]  # rows into current X
    X = Y
    done = [None] * len(subs)  # (round, row) of the final node
    active = list(range(len(subs)))
    finals = []
    r = 0
    while active:
        # relabel the active subgraphs' nodes into a compact matrix
        rows, dst, src, base = [], [], [], 0
        local = {}
        for j in active:
            ids, root, xs, ys, A = state[j]
            rows.append(ids)
            a_dst, a_src = np.nonzero(A)
            dst.append(a_dst + base)
            src.append(a_src + base)
            local[j] = base
            base += len(ids)
        cur = nx.take_rows(X, np.concatenate(rows))
        star = nx.concat([cur, nx.segment_max(cur, np.concatenate(dst), np.concatenate(src), base)], axis=1)
        Xn = nx.relu(nx.add_bias(star @ params[f"gtr.readout{r}.w"], params[f"gtr.readout{r}.b"]))
        still = []
        for j in active:
            ids, root, xs, ys, A = state[j]
            if len(ids) == 1:
                done[j] = (len(finals), local[j])
                continue
            keep = pool_indices(xs, ys, root)
            new_root = int(np.flatnonzero(keep == root)[0])
            state[j] = (local[j] + keep, new_root, xs[keep], ys[keep], A[np.ix_(keep, keep)])
            still.append(j)
        finals.append(Xn)
        X = Xn
        active = still
        r += 1
    # gather each subgraph's final node from the round where it finished
    parts = []
    order = []
    for rnd, Xr in enumerate(finals):
        members = [j for j in range(len(subs)) if done[j][0] == rnd]
        if members:
            parts.append(nx.take_rows(Xr, [done[j][1] for j in members]))
            order.extend(members)
    stacked = nx.concat(parts, axis=0)
    inv = np.empty(len(order), dtype=np.int64)
    inv[np.asarray(order)] = np.arange(len(order))
    return nx.take_rows(stacked, inv)
