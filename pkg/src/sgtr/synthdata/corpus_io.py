"""Line-oriented corpus files.

Line 1 is the header ``SGTR-CORPUS v1``; each following line is one JSON
object per sample. Images are stored as flat 0..255 integers (the renderer
quantises to 1/255 steps, so the round trip is exact), class maps as flat
integers.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable

import numpy as np

from .render import SegSample

HEADER = "SGTR-CORPUS v1"


class CorpusError(ValueError):
    pass


def sample_to_record(s: SegSample) -> dict:
    h, w = s.class_map.shape
    return {
        "label": s.label,
        "length": s.length,
        "H": h,
        "W": w,
        "image": np.rint(s.image * 255.0).astype(np.int64).reshape(-1).tolist(),
        "class_map": s.class_map.reshape(-1).tolist(),
        "order_centers": s.order_centers.tolist(),
    }


def record_to_sample(rec: dict) -> SegSample:
    h, w = int(rec["H"]), int(rec["W"])
    image = np.asarray(rec["image"], dtype=np.float64)
    cmap = np.asarray(rec["class_map"], dtype=np.int64)
    if image.size != h * w * 3 or cmap.size != h * w:
        raise ValueError(f"array sizes {image.size}/{cmap.size} do not match {h}x{w}")
    centers = np.asarray(rec["order_centers"], dtype=np.float64).reshape(-1, 2)
    s = SegSample((image / 255.0).reshape(h, w, 3), cmap.reshape(h, w), centers, rec["label"])
    if s.length != rec.get("length", s.length):
        raise ValueError(f"length field {rec['length']} disagrees with label {rec['label']!r}")
    return s


def write_corpus(samples: Iterable[SegSample], path) -> int:
    """Write atomically; returns the number of samples written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    n = 0
    with open(tmp, "w") as fh:
        fh.write(HEADER + "\n")
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), separators=(",", ":")) + "\n")
            n += 1
    os.replace(tmp, path)
    return n


def read_corpus(path) -> list[SegSample]:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    head = raw if nl < 0 else raw[:nl]
    if head.decode("utf-8", errors="replace") != HEADER:
        if head.startswith(b"SGTR-CORPUS"):
            raise CorpusError(f"{path}: unsupported version header {head[:40]!r} at byte offset 0")
        raise CorpusError(f"{path}: not a corpus file (bad header at byte offset 0)")
    if nl < 0:
        raise CorpusError(f"{path}: truncated header at byte offset {len(raw)}")
    samples = []
    offset = nl + 1
    while offset < len(raw):
        end = raw.find(b"\n", offset)
        if end < 0:
            raise CorpusError(f"{path}: truncated record at byte offset {offset}")
        try:
            samples.append(record_to_sample(json.loads(raw[offset:end])))
        except (ValueError, KeyError, TypeError) as exc:
            raise CorpusError(f"{path}: malformed record at byte offset {offset}: {exc}") from exc
        offset = end + 1
    return samples
