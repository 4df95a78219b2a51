"""The eight acceptance criteria, each reported as one PASS/FAIL line in the summary."""

import json
import math
import time

import numpy as np
import pytest

from sgtr import fusion
from sgtr import graphgen as gg
from sgtr import gtr
from sgtr import numerics as nx
from sgtr.checks import check_model_gradients
from sgtr.cli import main
from sgtr.fusion import MeanTeacherState, ema_update
from sgtr.gtr import RootCheckConfig
from sgtr.model import ModelConfig
from sgtr.synthdata import CorpusConfig, generate_corpus
from sgtr.training import TrainConfig, evaluate_model, train

from conftest import record_acceptance
from oracles import adjacency_oracle, similarity_oracle


# ------------------------------------------------------------------------ 1


def test_criterion_1_graph_construction_oracles():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_sim = 0.0
    adj_mismatch = 0
    for _ in range(500):
        n = int(rng.integers(1, 13))
        H, W = int(rng.integers(4, 33)), int(rng.integers(4, 129))
        xs = rng.integers(0, W, n).astype(float)
        ys = rng.integers(0, H, n).astype(float)
        R = rng.random((n, int(rng.integers(2, 12))))
        E = gg.similarity_matrix(xs, ys, R, H, W)
        worst_sim = max(worst_sim, float(np.abs(E - similarity_oracle(xs, ys, R, H, W)).max()))
        A = gg.build_adjacency(E, "discrete")
        adj_mismatch += int(not np.array_equal(A, adjacency_oracle(E, "discrete")))
        Ac = gg.build_adjacency(E, "continuous")
        adj_mismatch += int(not np.allclose(Ac, adjacency_oracle(E, "continuous"), rtol=0, atol=1e-12))
    elapsed = time.perf_counter() - t0
    ok = worst_sim <= 1e-12 and adj_mismatch == 0 and elapsed < 10
    record_acceptance(1, ok, f"500 node sets, max similarity error {worst_sim:.1e}, "
                             f"{adj_mismatch} adjacency mismatches, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------------ 2


def _power_radius(K, steps=100, seed=0):
    v = np.random.default_rng(seed).normal(size=K.shape[0])
    lam = 0.0
    for _ in range(steps):
        w = K @ v
        lam = np.linalg.norm(w) / np.linalg.norm(v)
        if lam == 0:
            return 0.0
        v = w / np.linalg.norm(w)
    return lam


def test_criterion_2_normalized_adjacency_spectrum():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst_asym = worst_rad = 0.0
    for k in range(200):
        n = int(rng.integers(1, 33))
        A = np.triu((rng.random((n, n)) < rng.uniform(0.05, 0.9)).astype(float), 1)
        if k % 2:
            A = A * rng.random((n, n))  # continuous weights in [0, 1)
        A = A + A.T
        K = gtr.normalize_adjacency(A)
        K = K.toarray() if hasattr(K, "toarray") else np.asarray(K)
        worst_asym = max(worst_asym, float(np.abs(K - K.T).max()))
        worst_rad = max(worst_rad, _power_radius(K, seed=k))
    elapsed = time.perf_counter() - t0
    ok = worst_asym <= 1e-12 and worst_rad <= 1 + 1e-9 and elapsed < 10
    record_acceptance(2, ok, f"200 graphs, max asymmetry {worst_asym:.1e}, max spectral radius "
                             f"{worst_rad:.12f}, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------------ 3


def test_criterion_3_full_model_gradients():
    t0 = time.perf_counter()
    res = check_model_gradients(seed=0, n_samples=3, eps=1e-5, max_coords=30)
    elapsed = time.perf_counter() - t0
    ok = res.max_rel_err < 1e-4 and elapsed < 300
    record_acceptance(3, ok, f"3 two-character samples, {len(res.report.params)} parameter tensors, "
                             f"{res.n_nodes} graph nodes, max rel err {res.max_rel_err:.2e} "
                             f"({res.report.worst_param}), {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------------ 4


def test_criterion_4_pooling_contract():
    rng = np.random.default_rng(11)
    failures = []
    for n in range(1, 65):
        for trial in range(3):
            if trial == 0:  # integer pixel grid, many distance ties
                xs, ys = rng.integers(0, 128, n).astype(float), rng.integers(0, 32, n).astype(float)
            else:
                xs, ys = rng.random(n) * 128, rng.random(n) * 32
            X, A = rng.normal(size=(n, 4)), np.zeros((n, n))
            root = orig = int(rng.integers(0, n))
            ids = np.arange(n)
            steps = 0
            while len(xs) > 1 and steps <= 64:
                ids = ids[gtr.pool_indices(xs, ys, root)]
                X, A, root, xs, ys = gtr.pool_graph(X, A, root, xs, ys)
                steps += 1
                if ids[root] != orig:
                    failures.append((n, "root lost"))
                    break
            bound = math.ceil(math.log2(n)) + 1
            if steps > bound:
                failures.append((n, f"{steps} steps > {bound}"))
    ok = not failures
    record_acceptance(4, ok, f"N = 1..64 x 3 layouts, {len(failures)} violations"
                      + (f": {failures[:3]}" if failures else ""))
    assert ok


# ------------------------------------------------------------------------ 5


def _unit_value_checks():
    """(name, got, expected) for every closed-form example of the listed operations."""
    out = []
    ps, fs, es = gg.position_similarity, gg.feature_similarity, gg.overall_similarity
    out += [("E_p same pixel", ps((2, 3), (2, 3), 4, 4), 1.0),
            ("E_p (0,0)-(0,2) in 4x4", ps((0, 0), (0, 2), 4, 4), 0.5),
            ("E_p opposite corners clamped", ps((0, 0), (3, 3), 4, 4), 0.0)]
    r = np.array([0.2, 0.5, 0.3])
    out += [("E_f equal", fs(r, r), 1.0),
            ("E_f orthogonal one-hots", fs([1, 0, 0], [0, 1, 0]), 0.0),
            ("E_f opposite", fs(r, -r), -1.0)]
    out += [("E same pixel and feature", es((1, 1), (1, 1), r, r, 4, 4), 1.0),
            ("E with clamped E_p", es((0, 0), (3, 3), r, r, 4, 4), 0.0)]

    # G_iou and the root decision
    star = np.ones((3, 3)) - np.eye(3)
    out.append(("G_iou identical sets", gtr.neighbor_iou(star, 0, 1), 1.0))
    two = np.zeros((4, 4))
    two[0, 1] = two[1, 0] = two[2, 3] = two[3, 2] = 1
    out.append(("G_iou disjoint sets", gtr.neighbor_iou(two, 0, 2), 0.0))
    C = np.zeros((4, 4))
    for a, b in [(0, 1), (0, 2), (1, 2), (1, 3)]:
        C[a, b] = C[b, a] = 1
    out.append(("G_iou |cap|=3 |cup|=4", gtr.neighbor_iou(C, 0, 1), 0.75))

    class Pick:
        def __init__(self, v):
            self.v = v

        def choice(self, others):
            return self.v

    def root_after(A, E, root, alt):
        g = gg.CharGraph(np.arange(len(A), dtype=float), np.zeros(len(A)), E, A, root, 0)
        return gtr.root_check(gg.link_subgraphs([g]), RootCheckConfig(eps=0.75), rng=Pick(alt)).roots[0]

    out.append(("root kept, identical sets", root_after(star, np.ones((3, 3)), 0, 1), 0))
    E2 = np.eye(4)
    E2[2, 3] = E2[3, 2] = 0.9
    out.append(("root re-anchored, disjoint sets", root_after(two, E2, 0, 2), 2))
    out.append(("root kept at G_iou = 0.75", root_after(C, np.ones((4, 4)), 0, 1), 0))

    # normalised adjacency
    K1 = gtr.normalize_adjacency(np.zeros((1, 1)))
    K2 = gtr.normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]))
    P3 = np.array([[0.0, 1, 0], [1, 0, 1], [0, 1, 0]])
    K3 = gtr.normalize_adjacency(P3)
    dense = lambda K: K.toarray() if hasattr(K, "toarray") else np.asarray(K)  # noqa: E731
    out.append(("K single node", float(dense(K1)[0, 0]), 1.0))
    for i in range(2):
        for j in range(2):
            out.append((f"K two nodes [{i},{j}]", float(dense(K2)[i, j]), 0.5))
    out.append(("K path [0,1]", float(dense(K3)[0, 1]), 1 / math.sqrt(6)))

    # EMA
    mt = ema_update(MeanTeacherState({"w": np.zeros(1)}, 0.999), {"w": np.ones(1)})
    out.append(("EMA one step", float(mt.teacher["w"][0]), 0.001))
    mt = MeanTeacherState({"w": np.array([4.0])}, 0.9)
    for _ in range(10):
        ema_update(mt, {"w": np.array([1.0])})
    out.append(("EMA constant student, 10 steps", float(mt.teacher["w"][0] - 1.0), 0.9**10 * 3.0))
    mt = ema_update(MeanTeacherState({"w": np.array([3.0])}, 0.0), {"w": np.array([-2.0])})
    out.append(("EMA alpha 0", float(mt.teacher["w"][0]), -2.0))

    # dynamic fusion
    rng = np.random.default_rng(0)
    Cn = 3
    streams = [nx.constant(rng.normal(size=(2, Cn))) for _ in range(3)]
    cat = np.hstack([s.data for s in streams])
    W1, b1 = rng.normal(size=(3 * Cn, Cn)), rng.normal(size=Cn)
    p = {"fuse.w0": nx.constant(np.zeros((3 * Cn, Cn))), "fuse.b0": nx.constant(np.zeros(Cn)),
         "fuse.w1": nx.constant(W1), "fuse.b1": nx.constant(b1)}
    Z = fusion.dynamic_fuse(streams, p).data
    out.append(("fusion W0 = 0 halves W1[T;L;S]", float(np.abs(Z - 0.5 * (cat @ W1 + b1)).max()), 0.0))
    p["fuse.w0"] = nx.constant(rng.normal(size=(3 * Cn, Cn)))
    p["fuse.w1"], p["fuse.b1"] = nx.constant(np.zeros((3 * Cn, Cn))), nx.constant(np.zeros(Cn))
    out.append(("fusion W1 = 0 gives 0", float(np.abs(fusion.dynamic_fuse(streams, p).data).max()), 0.0))

    # KL
    L = nx.constant(rng.normal(size=(1, 3, 4)))
    out.append(("KL of identical streams", fusion.consistency_loss(L, L, np.array([3])).item(), 0.0))
    kl = fusion.symmetric_kl(nx.constant(np.array([[1.0, 0.0]])), nx.constant(np.array([[0.5, 0.5]]))).item()
    closed = 0.5 * (math.log(2) + 0.5 * math.log(0.5) + 0.5 * (math.log(0.5) - math.log(1e-12)))
    out.append(("KL one-hot vs uniform", kl, closed))
    return out


def test_criterion_5_unit_values():
    checks = _unit_value_checks()
    bad = [(n, g, e) for n, g, e in checks if abs(g - e) > 1e-9]
    ok = not bad
    record_acceptance(5, ok, f"{len(checks)} closed-form values, {len(bad)} off by more than 1e-9"
                      + (f": {bad[:3]}" if bad else ""))
    assert ok


# ------------------------------------------------------------------------ 6

ABLATION_SEEDS = (0, 1, 2)
# one CPU core: the compact geometry keeps 3 x 5 x 5000 training steps inside the budget
ABLATION_GEOMETRY = dict(H=16, W=72)


def run_ablation_seed(seed: int) -> dict:
    cc = CorpusConfig.at_level(0.5, seed=seed, **ABLATION_GEOMETRY)
    tr = generate_corpus(cc, 5000, stream=0)
    te = generate_corpus(cc, 1000, stream=1)
    mc = ModelConfig(charset=cc.charset, H=cc.H, W=cc.W, T=cc.T)
    res = train(tr, TrainConfig(epochs=5, seed=seed, eval_every=0), mc)
    ev = evaluate_model(res.model, te)
    losses = [r["loss_total"] for r in res.history if r["split"] == "train"]
    return {m: ev[m]["word_acc"] for m in ("vr", "vr+lm", "vr+gtr", "full")} | {"train_loss": losses}


@pytest.mark.slow
def test_criterion_6_desk_scale_ablation():
    t0 = time.perf_counter()
    rows = {s: run_ablation_seed(s) for s in ABLATION_SEEDS}
    elapsed = time.perf_counter() - t0
    mean = {m: float(np.mean([rows[s][m] for s in ABLATION_SEEDS])) for m in ("vr", "vr+lm", "vr+gtr", "full")}
    wins_lm = sum(rows[s]["full"] >= rows[s]["vr+lm"] for s in ABLATION_SEEDS)
    checks = {
        "mean full >= mean vr": mean["full"] >= mean["vr"],
        "full >= vr+lm in >= 2 of 3 seeds": wins_lm >= 2,
        "vr >= 0.60": mean["vr"] >= 0.60,
        "runtime < 90 min": elapsed < 90 * 60,
    }
    per_seed = "; ".join(f"seed {s}: " + " ".join(f"{m}={rows[s][m]:.3f}" for m in ("vr", "vr+lm", "vr+gtr", "full"))
                         for s in ABLATION_SEEDS)
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    record_acceptance(6, ok, "mean word acc " + " ".join(f"{m}={v:.3f}" for m, v in mean.items())
                      + f", full>=vr+lm in {wins_lm}/3 seeds, {elapsed / 60:.1f} min"
                      + (f"; failed: {failed}" if failed else "") + f" [{per_seed}]")
    print(json.dumps(rows))
    assert ok


# ------------------------------------------------------------------------ 7


def test_criterion_7_determinism(tmp_path):
    gen = ["--n-train", "24", "--n-test", "8", "--height", "16", "--width", "48", "--max-len", "5", "--seed", "9"]
    codes = [main(["gen", "--out", str(tmp_path / d), *gen]) for d in ("g1", "g2")]
    same_corpus = all((tmp_path / "g1" / f).read_bytes() == (tmp_path / "g2" / f).read_bytes()
                      for f in ("train.sgtr", "test.sgtr", "manifest.json"))
    tr = ["--corpus", str(tmp_path / "g1"), "--epochs", "2", "--batch-size", "8", "--seed", "4"]
    codes += [main(["train", *tr, "--out", str(tmp_path / d)]) for d in ("t1", "t2")]
    m1 = (tmp_path / "t1" / "metrics.jsonl").read_bytes()
    same_metrics = m1 == (tmp_path / "t2" / "metrics.jsonl").read_bytes()
    ok = codes == [0, 0, 0, 0] and same_corpus and same_metrics and len(m1.splitlines()) == 4
    record_acceptance(7, ok, f"exit codes {codes}, corpus bytes identical: {same_corpus}, "
                             f"metric streams identical: {same_metrics}")
    assert ok


# ------------------------------------------------------------------------ 8


def test_criterion_8_config_axes(tmp_path, capsys):
    gen = ["--n-train", "32", "--n-test", "8", "--height", "16", "--width", "48", "--max-len", "5", "--seed", "2"]
    assert main(["gen", "--out", str(tmp_path / "data"), *gen]) == 0
    capsys.readouterr()
    runs = {"layers=1": ["--gcn-layers", "1"], "layers=2": ["--gcn-layers", "2"], "layers=3": ["--gcn-layers", "3"],
            "fuse=add": ["--fuse", "add"], "fuse=concat": ["--fuse", "concat"], "fuse=dfuse": ["--fuse", "dfuse"]}
    keys = {"epoch", "split", "loss_seg", "loss_cc", "loss_mt", "word_acc", "char_acc", "ned"}
    params, problems = {}, []
    for name, flags in runs.items():
        out = tmp_path / name
        code = main(["train", "--corpus", str(tmp_path / "data"), "--out", str(out), "--epochs", "2",
                     "--batch-size", "8", *flags])
        summary = capsys.readouterr().out
        if code != 0:
            problems.append(f"{name} exit {code}")
            continue
        params[name] = json.loads(summary)["parameters"]
        rows = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
        if [(r["epoch"], r["split"]) for r in rows] != [(0, "train"), (0, "test"), (1, "train"), (1, "test")]:
            problems.append(f"{name} incomplete stream")
        for r in rows:
            if not keys <= set(r) or not all(math.isfinite(r[k]) for k in keys - {"epoch", "split"}):
                problems.append(f"{name} bad row {r}")
    monotone = params.get("layers=1", 0) < params.get("layers=2", 0) < params.get("layers=3", 0)
    ok = not problems and monotone
    record_acceptance(8, ok, f"{len(runs)} runs, parameter counts by layers "
                             f"{[params.get(f'layers={k}') for k in (1, 2, 3)]}, monotone: {monotone}"
                      + (f"; problems: {problems}" if problems else ""))
    assert ok
