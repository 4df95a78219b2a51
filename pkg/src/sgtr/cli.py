"""Command-line entry point: ``sgtr {gen,train,eval,inspect,gradcheck}``.

Exit codes: 0 success, 1 IO or state error, 2 usage error, 3 numerical failure.
Each command accepts ``--config FILE`` (JSON); explicit flags override it, and
the effective settings are written to ``resolved-config.json`` so a run can be
repeated with ``--config resolved-config.json`` alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .fusion import FUSE_MODES, LossConfig
from .gtr import GTRConfig
from .model import EVAL_MODES, ModelConfig
from .numerics import CheckpointError
from .numerics.checkpoint import atomic_write_text
from .synthdata import CorpusConfig, CorpusError, RenderError, generate_corpus, read_corpus, write_corpus

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "gen": {"out": None, "n_train": 5000, "n_test": 1000, "charset": "abcdefghij", "seed": 0,
            "corrupt_level": 0.5, "height": 32, "width": 128, "max_len": 8},
    "train": {"corpus": None, "out": None, "epochs": 5, "lr": 1e-3, "batch_size": 16, "gcn_layers": 2,
              "adj": "discrete", "pool": "graph", "fuse": "dfuse", "no_gtr": False, "no_lm": False,
              "mean_teacher": False, "seed": 0, "eval_every": 1, "fg_weight": 5.0},
    "eval": {"checkpoint": None, "corpus": None, "split": "test", "mode": "full", "batch_size": 16, "out": "."},
    "inspect": {"checkpoint": None, "corpus": None, "split": "test", "sample_index": 0, "out": None},
    "gradcheck": {"seed": 0, "samples": 3, "eps": 1e-5, "coords": 30, "out": "."},
}
REQUIRED = {"gen": ["out"], "train": ["corpus", "out"], "eval": ["checkpoint", "corpus"],
            "inspect": ["checkpoint", "corpus", "out"], "gradcheck": []}


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_IO):
        super().__init__(msg)
        self.code = code


# ------------------------------------------------------------------- parsing


def _flag(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgtr", description="Segmentation-plus-graph text recognition at desk scale.")
    parser.add_argument("--version", action="version", version=f"sgtr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render train/test corpora")
    _flag(g, "out", help="output directory")
    _flag(g, "n_train", type=int)
    _flag(g, "n_test", type=int)
    _flag(g, "charset")
    _flag(g, "seed", type=int)
    _flag(g, "corrupt_level", type=float, help="corruption strength in [0, 1]")
    _flag(g, "height", type=int)
    _flag(g, "width", type=int)
    _flag(g, "max_len", type=int, help="longest word, also the number of order maps")

    t = sub.add_parser("train", help="train a model on a generated corpus")
    _flag(t, "corpus", help="directory written by 'sgtr gen'")
    _flag(t, "out")
    _flag(t, "epochs", type=int)
    _flag(t, "lr", type=float)
    _flag(t, "batch_size", type=int)
    _flag(t, "gcn_layers", type=int, choices=(1, 2, 3))
    _flag(t, "adj", choices=("discrete", "continuous"))
    _flag(t, "pool", choices=("graph", "average"))
    _flag(t, "fuse", choices=FUSE_MODES)
    _flag(t, "no_gtr", action="store_const", const=True)
    _flag(t, "no_lm", action="store_const", const=True)
    _flag(t, "mean_teacher", action="store_const", const=True)
    _flag(t, "seed", type=int)
    _flag(t, "eval_every", type=int, help="evaluate on the test split every N epochs (0: last only)")
    _flag(t, "fg_weight", type=float, help="pixel loss weight of text pixels")

    e = sub.add_parser("eval", help="score a checkpoint; prints JSON metrics")
    _flag(e, "checkpoint")
    _flag(e, "corpus", help="corpus file or 'sgtr gen' directory")
    _flag(e, "split", choices=("train", "test"))
    _flag(e, "mode", choices=EVAL_MODES)
    _flag(e, "batch_size", type=int)
    _flag(e, "out", help="where resolved-config.json goes")

    i = sub.add_parser("inspect", help="export heatmaps for one sample")
    _flag(i, "checkpoint")
    _flag(i, "corpus")
    _flag(i, "split", choices=("train", "test"))
    _flag(i, "sample_index", type=int)
    _flag(i, "out")

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    _flag(c, "seed", type=int)
    _flag(c, "samples", type=int)
    _flag(c, "eps", type=float)
    _flag(c, "coords", type=int, help="coordinates checked per parameter tensor")
    _flag(c, "out", help="where resolved-config.json goes")

    for p in (g, t, e, i, c):
        p.add_argument("--config", default=None, help="JSON file of settings; flags take precedence")
    return parser


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}")
        if not isinstance(loaded, dict):
            raise CliError(f"config {args.config} must hold a JSON object")
        if loaded.get("command", cmd) != cmd:
            parser.error(f"config {args.config} is for '{loaded['command']}', not '{cmd}'")
        unknown = set(loaded) - set(cfg) - {"command", "version"}
        if unknown:
            parser.error(f"unknown settings in {args.config}: {sorted(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k in cfg})
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    missing = [k for k in REQUIRED[cmd] if cfg.get(k) in (None, "")]
    if missing:
        parser.error(f"{cmd}: missing required " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def write_resolved(out_dir, cmd: str, cfg: dict) -> None:
    atomic_write_text(Path(out_dir) / "resolved-config.json",
                      json.dumps({"command": cmd, "version": __version__, **cfg}, indent=2, sort_keys=True))


def thread_count() -> int:
    raw = os.environ.get("SGTR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"SGTR_THREADS must be a positive integer, got {raw!r}", EXIT_USAGE)
    if n < 1:
        raise CliError(f"SGTR_THREADS must be a positive integer, got {raw!r}", EXIT_USAGE)
    return n


# ------------------------------------------------------------------ commands


def _render(cc: CorpusConfig, n: int, stream: int, workers: int):
    if workers <= 1 or n < 2 * workers:
        return generate_corpus(cc, n, stream)
    # samples depend only on (seed, stream, index), so chunking cannot change them
    step = -(-n // workers)
    starts = list(range(0, n, step))
    with ProcessPoolExecutor(workers) as pool:
        parts = pool.map(generate_corpus, [cc] * len(starts), [min(step, n - s) for s in starts],
                         [stream] * len(starts), starts)
        return [s for part in parts for s in part]


def corpus_config_from(cfg: dict) -> CorpusConfig:
    level = cfg["corrupt_level"]
    if not 0 <= level <= 1:
        raise ValueError(f"--corrupt-level must lie in [0, 1], got {level}")
    return CorpusConfig.at_level(level, charset=cfg["charset"], H=cfg["height"], W=cfg["width"],
                                 T=cfg["max_len"], max_len=cfg["max_len"], min_len=min(3, cfg["max_len"]),
                                 seed=cfg["seed"])


def cmd_gen(cfg: dict, parser) -> int:
    if cfg["n_train"] < 1 or cfg["n_test"] < 0:
        parser.error("--n-train must be >= 1 and --n-test >= 0")
    try:
        cc = corpus_config_from(cfg)
    except ValueError as exc:
        parser.error(str(exc))
    out = Path(cfg["out"])
    workers = thread_count()
    try:
        train = _render(cc, cfg["n_train"], 0, workers)
        test = _render(cc, cfg["n_test"], 1, workers)
    except RenderError as exc:
        raise CliError(f"rendering failed: {exc}", EXIT_USAGE)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_corpus(train, out / "train.sgtr")
        write_corpus(test, out / "test.sgtr")
        cdict = cc.to_dict()
        digest = hashlib.sha256(json.dumps(cdict, sort_keys=True).encode()).hexdigest()
        manifest = {"n_train": len(train), "n_test": len(test), "corpus_config": cdict, "config_hash": digest,
                    "corrupt_level": cfg["corrupt_level"], "files": {"train": "train.sgtr", "test": "test.sgtr"}}
        atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        write_resolved(out, "gen", cfg)
    except OSError as exc:
        raise CliError(f"cannot write corpus to {out}: {exc}")
    print(json.dumps({"out": str(out), "n_train": len(train), "n_test": len(test), "config_hash": digest}))
    return EXIT_OK


def load_manifest(corpus_dir: Path) -> dict:
    path = corpus_dir / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError(f"{corpus_dir} has no manifest.json; point --corpus at a 'sgtr gen' directory")
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {path}: {exc}")


def load_split(corpus: str, split: str):
    path = Path(corpus)
    if path.is_dir():
        path = path / f"{split}.sgtr"
    try:
        return read_corpus(path)
    except FileNotFoundError:
        raise CliError(f"corpus file {path} does not exist")
    except (OSError, CorpusError) as exc:
        raise CliError(str(exc))


def model_config_from(cfg: dict, corpus_cfg: dict) -> ModelConfig:
    gtr_cfg = GTRConfig(layers=cfg["gcn_layers"], adjacency=cfg["adj"], pool=cfg["pool"])
    return ModelConfig(charset=corpus_cfg["charset"], H=corpus_cfg["H"], W=corpus_cfg["W"], T=corpus_cfg["T"],
                       use_gtr=not cfg["no_gtr"], use_lm=not cfg["no_lm"], fuse=cfg["fuse"], gtr=gtr_cfg)


def cmd_train(cfg: dict, parser) -> int:
    from .training import TrainConfig, TrainingAborted, train

    if cfg["epochs"] < 1 or cfg["lr"] < 0 or cfg["batch_size"] < 1 or cfg["eval_every"] < 0:
        parser.error("need --epochs >= 1, --lr >= 0, --batch-size >= 1, --eval-every >= 0")
    try:
        if cfg["fuse"] not in FUSE_MODES:
            raise ValueError(f"--fuse must be one of {FUSE_MODES}")
        tc = TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], batch_size=cfg["batch_size"], seed=cfg["seed"],
                         mean_teacher=cfg["mean_teacher"], eval_every=cfg["eval_every"],
                         loss=LossConfig(fg_weight=cfg["fg_weight"]))
    except ValueError as exc:
        parser.error(str(exc))
    corpus_dir = Path(cfg["corpus"])
    manifest = load_manifest(corpus_dir)
    try:
        mc = model_config_from(cfg, manifest["corpus_config"])
    except ValueError as exc:
        parser.error(str(exc))
    except KeyError as exc:
        raise CliError(f"manifest in {corpus_dir} lacks {exc}")
    train_set = load_split(str(corpus_dir), "train")
    test_path = corpus_dir / "test.sgtr"
    test_set = load_split(str(corpus_dir), "test") if test_path.exists() else None
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(out, "train", cfg)
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}")

    def log(row):
        print(json.dumps(row), file=sys.stderr, flush=True)

    try:
        res = train(train_set, tc, mc, test_set or None, out, log)
    except TrainingAborted as exc:
        last = f"; last good checkpoint {exc.last_good}" if exc.last_good else ""
        raise CliError(f"training aborted at epoch {exc.epoch}: {exc}{last}", EXIT_NUMERIC)
    print(json.dumps({"final": res.final_path, "best": res.best_path, "parameters": res.model.num_parameters(),
                      "last": res.history[-1]}))
    return EXIT_OK


def _load_model(path: str):
    from .training import load_model

    if not Path(path).is_file():
        raise CliError(f"checkpoint {path} does not exist")
    try:
        return load_model(path)[0]
    except (CheckpointError, ValueError, KeyError, OSError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}")


def cmd_eval(cfg: dict, parser) -> int:
    from .training import check_mode, evaluate_model

    if cfg["batch_size"] < 1:
        parser.error("--batch-size must be >= 1")
    model = _load_model(cfg["checkpoint"])
    samples = load_split(cfg["corpus"], cfg["split"])
    try:
        check_mode(model.cfg, cfg["mode"])
    except ValueError as exc:
        raise CliError(str(exc))
    if any(s.image.shape[:2] != (model.cfg.H, model.cfg.W) for s in samples):
        raise CliError(f"checkpoint/config mismatch: corpus images are not {model.cfg.H}x{model.cfg.W}")
    try:
        write_resolved(cfg["out"], "eval", cfg)
    except OSError as exc:
        raise CliError(f"cannot write to {cfg['out']}: {exc}")
    res = evaluate_model(model, samples, [cfg["mode"]], cfg["batch_size"])
    metrics = dict(res[cfg["mode"]], mode=cfg["mode"], n=len(samples), pixel_acc=res["pixel_acc"])
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_inspect(cfg: dict, parser) -> int:
    from .inspection import export_sample

    model = _load_model(cfg["checkpoint"])
    samples = load_split(cfg["corpus"], cfg["split"])
    k = cfg["sample_index"]
    if not 0 <= k < len(samples):
        parser.error(f"--sample-index {k} outside 0..{len(samples) - 1}")
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(out, "inspect", cfg)
        summary = export_sample(model, samples[k], out, k)
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_gradcheck(cfg: dict, parser) -> int:
    from .checks import TOLERANCE, check_model_gradients

    if cfg["samples"] < 1 or cfg["coords"] < 1 or not 1e-7 <= cfg["eps"] <= 1e-3:
        parser.error("need --samples >= 1, --coords >= 1 and --eps in [1e-7, 1e-3]")
    try:
        write_resolved(cfg["out"], "gradcheck", cfg)
    except OSError as exc:
        raise CliError(f"cannot write to {cfg['out']}: {exc}")
    res = check_model_gradients(cfg["seed"], cfg["samples"], cfg["eps"], cfg["coords"])
    print(json.dumps({"max_rel_err": res.max_rel_err, "worst_param": res.report.worst_param,
                      "tolerance": TOLERANCE, "nodes": res.n_nodes, "ok": res.ok,
                      "params": {k: v.max_rel_err for k, v in sorted(res.report.params.items())}}))
    return EXIT_OK if res.ok else EXIT_NUMERIC


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
    try:
        cfg = resolve(args, sub)
        return COMMANDS[args.command](cfg, sub)
    except SystemExit as exc:  # parser.error inside a command
        return int(exc.code or 0)
    except CliError as exc:
        print(f"sgtr {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
