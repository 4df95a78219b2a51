"""Heatmap exports for looking inside a trained model: PGM images with JSON sidecars."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .model import SGTRModel, build_graphs
from .numerics.checkpoint import atomic_write_text
from .synthdata import SegSample


def to_gray(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max scale to 0..255 bytes; a constant array maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        g = np.rint((v - lo) / (hi - lo) * 255.0)
    else:
        g = np.zeros_like(v)
    return g.astype(np.uint8), lo, hi


def write_pgm(path, values: np.ndarray, sidecar: dict | None = None) -> dict:
    """Binary (P5) greyscale image of a 2-D array plus ``<name>.json`` describing the scaling."""
    if values.ndim != 2 or 0 in values.shape:
        raise ValueError(f"PGM export needs a non-empty 2-D array, got shape {values.shape}")
    path = Path(path)
    gray, lo, hi = to_gray(values)
    h, w = gray.shape
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
    os.replace(tmp, path)
    meta = {"file": path.name, "rows": h, "cols": w, "min": lo, "max": hi,
            "scaling": "linear, min -> 0, max -> 255"}
    meta.update(sidecar or {})
    atomic_write_text(path.with_suffix(".json"), json.dumps(meta, indent=2))
    return meta


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = parts[4]
    return np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w)


def similarity_matrix(graph) -> np.ndarray:
    """Node similarity over the whole graph: each character's block on the diagonal."""
    n = graph.n
    out = np.zeros((n, n))
    for (start, stop), E in zip(graph.spans, graph.sub_E):
        out[start:stop, start:stop] = E
    return out


def feature_energy(act: np.ndarray) -> np.ndarray:
    """Root-mean-square activation over channels, (H, W, ch) -> (H, W)."""
    return np.sqrt(np.mean(np.square(act), axis=-1))


def export_sample(model: SGTRModel, sample: SegSample, out_dir, index: int = 0) -> dict:
    """Write similarity, order-attention and feature-energy heatmaps for one sample."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = model.forward(sample.image[None])
    pred = model.predict(out, "full")[0]
    common = {"sample_index": index, "label": sample.label, "prediction": pred}
    files = []

    graphs = out.graphs or build_graphs(out.seg.probs.data, out.order.maps.data, out.coarse.scores.data,
                                        out.lengths, model.cfg.gtr)
    g = graphs[0]
    if g.n:
        meta = write_pgm(out_dir / "similarity.pgm", similarity_matrix(g),
                         dict(common, kind="node similarity", nodes=g.n, spans=[list(s) for s in g.spans],
                              roots=list(map(int, g.roots))))
        files.append(meta["file"])
    maps = out.order.maps.data[0]
    for t in range(maps.shape[-1]):
        meta = write_pgm(out_dir / f"order_{t}.pgm", maps[:, :, t], dict(common, kind="order attention", t=t))
        files.append(meta["file"])
    for k, act in enumerate(out.seg.features, start=1):
        meta = write_pgm(out_dir / f"energy_conv{k}.pgm", feature_energy(act.data[0]),
                         dict(common, kind="feature energy", stage=f"conv{k}", channels=int(act.shape[-1])))
        files.append(meta["file"])
    probs = out.seg.probs.data[0]
    meta = write_pgm(out_dir / "foreground.pgm", 1.0 - probs[:, :, 0], dict(common, kind="text probability"))
    files.append(meta["file"])
    summary = dict(common, files=files, nodes=int(g.n), length=int(out.lengths[0]))
    atomic_write_text(out_dir / "inspect.json", json.dumps(summary, indent=2))
    return summary
