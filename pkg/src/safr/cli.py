"""Command-line entry point: ``safr <subcommand> [flags]``.

Every flag can also come from a ``key=value`` config file (``--config``);
flags win over file values. Each run writes ``manifest.json`` and
``effective.cfg`` to its output directory; re-running with
``--config effective.cfg`` repeats the run.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

log = logging.getLogger("safr")

SUBCOMMANDS = ("ingest", "train", "eval", "srs", "sensitivity", "sweep",
               "capacity-report", "viz", "grad-check")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # data
    train_tsv: str = ""
    dev_tsv: str = ""
    test_tsv: str = ""
    data: str = ""
    num_classes: int = 2
    min_freq: int = 2
    max_len: int = 64
    dev_fraction: float = 0.2
    # model
    E: int = 256
    d_ff: int = 1024
    M: int = 4
    dropout: float = 0.1
    use_vmask: bool = True
    mask_temperature: float = 0.5
    dtype: str = "float32"
    # training
    lambda_imp: float = 0.0
    lambda_inter: float = 0.0
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    patience: int = 3
    eval_every: int = 0
    vmask_info_coeff: float = 0.0
    seed: int = 0
    # evaluation
    ckpt: str = ""
    split: str = "test"
    k: float = 30.0
    ks: str = "10,20,30,40,50,60,70"
    layer: str = "fc1"
    random_draws: int = 5
    important_fraction: float = 0.3
    per_type: bool = False
    grid_imp: str = "0,0.01,0.1,1,100"
    grid_inter: str = "0,0.01,0.1,1,100"
    cells: str = ""
    example_index: int = 0
    edge_threshold: float = 0.3
    cross_layer: bool = False
    step_size: float = 1e-5
    grad_tol: float = 1e-4
    out: str = ""


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()

_HELP = {
    "train_tsv": "training TSV (label<TAB>text)",
    "dev_tsv": "dev TSV; when empty a seeded dev split is carved from train",
    "test_tsv": "test TSV",
    "data": "dataset cache written by `ingest` (defaults to the one recorded in --ckpt)",
    "num_classes": "number of classes",
    "min_freq": "minimum train-split frequency for a vocabulary entry",
    "max_len": "truncate inputs to this many tokens",
    "dev_fraction": "fraction of train held out as dev when no dev TSV is given",
    "E": "embedding / model width",
    "d_ff": "FFN inner width",
    "M": "attention heads",
    "dropout": "dropout on attention weights and FFN output",
    "use_vmask": "insert the word-mask layer (false gives the plain baseline)",
    "mask_temperature": "relaxation temperature of the word mask",
    "dtype": "float32 or float64",
    "lambda_imp": "weight of the importance regularizer",
    "lambda_inter": "weight of the interaction regularizer",
    "epochs": "training epochs",
    "batch_size": "minibatch size",
    "lr": "Adam learning rate",
    "beta1": "Adam beta1",
    "beta2": "Adam beta2",
    "weight_decay": "Adam weight decay",
    "clip_norm": "global gradient-norm clip (0 disables)",
    "patience": "stop after this many dev evaluations without improvement",
    "eval_every": "steps between dev evaluations (0: once per epoch)",
    "vmask_info_coeff": "weight of the optional word-mask KL penalty",
    "seed": "master seed; all randomness derives from it",
    "ckpt": "checkpoint file",
    "split": "dataset split to evaluate",
    "k": "percent of tokens to delete",
    "ks": "comma-separated k values for the sensitivity curve",
    "layer": "layer whose capacity ranks tokens (embedding|vmask|attention_out|fc1|fc2)",
    "random_draws": "random-deletion draws averaged for the baseline",
    "important_fraction": "top fraction of tokens (by mask score) counted as important",
    "per_type": "group tokens by vocabulary type instead of occurrence",
    "grid_imp": "comma-separated lambda_imp values (full grid with grid_inter)",
    "grid_inter": "comma-separated lambda_inter values",
    "cells": "explicit cells 'imp:inter,imp:inter'; overrides the grid",
    "example_index": "index of the example to draw",
    "edge_threshold": "minimum |cosine| for a token-graph edge",
    "cross_layer": "also draw capacity/interference panels for every layer",
    "step_size": "finite-difference step",
    "grad_tol": "maximum accepted relative gradient error",
    "out": "output directory (default: $SAFR_OUT_DIR or ./safr_out)",
}

_DATA_FLAGS = ("train_tsv", "dev_tsv", "test_tsv", "num_classes", "min_freq", "max_len",
               "dev_fraction", "seed")
_MODEL_FLAGS = ("E", "d_ff", "M", "dropout", "use_vmask", "mask_temperature", "dtype")
_TRAIN_FLAGS = ("data", "lambda_imp", "lambda_inter", "epochs", "batch_size", "lr", "beta1",
                "beta2", "weight_decay", "clip_norm", "patience", "eval_every",
                "vmask_info_coeff", "seed")
_EVAL_FLAGS = ("ckpt", "data", "split")

SUBCOMMAND_FLAGS = {
    "ingest": _DATA_FLAGS,
    "train": _MODEL_FLAGS + _TRAIN_FLAGS,
    "eval": _EVAL_FLAGS,
    "srs": _EVAL_FLAGS + ("k", "layer", "random_draws", "seed"),
    "sensitivity": _EVAL_FLAGS + ("ks", "layer", "random_draws", "seed"),
    "sweep": _MODEL_FLAGS + _TRAIN_FLAGS + ("split", "k", "layer", "random_draws",
                                            "grid_imp", "grid_inter", "cells"),
    "capacity-report": _EVAL_FLAGS + ("layer", "important_fraction", "per_type"),
    "viz": _EVAL_FLAGS + ("layer", "example_index", "edge_threshold", "cross_layer", "seed"),
    "grad-check": ("E", "d_ff", "M", "max_len", "lambda_imp", "lambda_inter", "step_size",
                   "grad_tol", "seed"),
}

_SUMMARIES = {
    "ingest": "tokenize TSV corpora and write a dataset cache",
    "train": "train a classifier and keep the best dev checkpoint",
    "eval": "accuracy of a checkpoint on one split",
    "srs": "accuracy drop after capacity-ranked deletion of k%% of tokens",
    "sensitivity": "deletion scores over several k",
    "sweep": "train and score one model per (lambda_imp, lambda_inter) cell",
    "capacity-report": "mean capacity of important vs. remaining tokens",
    "viz": "SVG capacity bar chart, interference heatmap and token graph",
    "grad-check": "finite-difference check of the full loss on a tiny model",
}


# -- config handling -----------------------------------------------------

def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _convert(name: str, raw: str):
    ftype = _FIELDS[name].type
    try:
        if ftype in ("bool", bool):
            return _parse_bool(raw)
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise UsageError(f"bad value for {name}: {exc}") from None


def read_config_file(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _convert(key, value)
    return values


def write_config_file(cfg: RunConfig, path) -> None:
    lines = ["# effective configuration"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve_config(file_values: dict, flag_values: dict) -> RunConfig:
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    if not merged.get("out"):
        merged["out"] = os.environ.get("SAFR_OUT_DIR", "safr_out")
    return RunConfig(**merged)


# -- parser --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="safr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=_SUMMARIES[name], description=_SUMMARIES[name])
        p.add_argument("--config", default=None, help="key=value config file (default: none)")
        for key in dict.fromkeys(SUBCOMMAND_FLAGS[name] + ("out",)):
            default = getattr(_DEFAULTS, key)
            kind = _FIELDS[key].type
            help_text = f"{_HELP[key]} (default: {default!r})"
            if kind in ("bool", bool):
                p.add_argument(_flag(key), dest=key, default=None, metavar="BOOL",
                               type=_parse_bool, help=help_text)
            else:
                conv = {"int": int, "float": float}.get(kind, str)
                p.add_argument(_flag(key), dest=key, default=None, type=conv, help=help_text)
    return parser


# -- helpers -------------------------------------------------------------

def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {s!r}") from None


def _random_seeds(cfg: RunConfig) -> list[int]:
    from .train import substream_seed
    base = substream_seed(cfg.seed, "deletion")
    return [(base + i) % 2 ** 63 for i in range(cfg.random_draws)]


def _model_config(cfg: RunConfig, vocab_size: int, max_len: int, num_classes: int):
    from .model import ModelConfig
    return ModelConfig(vocab_size=vocab_size, E=cfg.E, d_ff=cfg.d_ff, M=cfg.M, G=num_classes,
                       max_len=max_len, dropout=cfg.dropout, seed=cfg.seed,
                       use_vmask=cfg.use_vmask, mask_temperature=cfg.mask_temperature,
                       dtype=cfg.dtype)


def _train_config(cfg: RunConfig):
    from .train import TrainConfig
    return TrainConfig(lambda_imp=cfg.lambda_imp, lambda_inter=cfg.lambda_inter,
                       epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                       beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay,
                       clip_norm=cfg.clip_norm, seed=cfg.seed, patience=cfg.patience,
                       eval_every=cfg.eval_every, vmask_info_coeff=cfg.vmask_info_coeff)


def _require(cfg: RunConfig, *names):
    for n in names:
        if not getattr(cfg, n):
            raise UsageError(f"{_flag(n)} is required")


class _Run:
    """Collects artifacts and writes the manifest for one subcommand."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command, self.cfg = command, cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: dict[str, str] = {}
        self.hashes: dict[str, str] = {}
        self.results: dict = {}

    def path(self, name: str) -> Path:
        p = self.out / name
        self.artifacts[name] = str(p)
        return p

    def dataset(self):
        from .data import file_digest, load_dataset
        from .model import Checkpoint
        path = self.cfg.data
        if not path and self.cfg.ckpt:
            path = Checkpoint.load(self.cfg.ckpt).extra.get("dataset", "")
        if not path:
            raise UsageError("--data is required (no dataset recorded in the checkpoint)")
        self.hashes[str(path)] = file_digest(path)
        return load_dataset(path), str(path)

    def checkpoint(self):
        from .data import file_digest
        from .model import Checkpoint
        _require(self.cfg, "ckpt")
        self.hashes[self.cfg.ckpt] = file_digest(self.cfg.ckpt)
        return Checkpoint.load(self.cfg.ckpt)

    def finish(self):
        from . import __version__
        from .train import substream_seed
        write_config_file(self.cfg, self.out / "effective.cfg")
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": dataclasses.asdict(self.cfg),
            "seeds": {name: substream_seed(self.cfg.seed, name)
                      for name in ("train", "mask", "dropout", "deletion", "layout")},
            "input_sha256": self.hashes,
            "artifacts": self.artifacts,
            "results": self.results,
        }
        (self.out / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _split(ds, name):
    if name not in ds.splits:
        raise UsageError(f"split {name!r} not in dataset (have {sorted(ds.splits)})")
    return ds[name]


# -- subcommands ---------------------------------------------------------

def cmd_ingest(run: _Run):
    from .data import dataset_manifest, file_digest, ingest, save_dataset
    cfg = run.cfg
    _require(cfg, "train_tsv")
    for p in (cfg.train_tsv, cfg.dev_tsv, cfg.test_tsv):
        if p:
            run.hashes[p] = file_digest(p)
    ds, reports = ingest(cfg.train_tsv, cfg.dev_tsv or None, cfg.test_tsv or None,
                         min_freq=cfg.min_freq, max_len=cfg.max_len, seed=cfg.seed,
                         num_classes=cfg.num_classes, dev_fraction=cfg.dev_fraction)
    digest = save_dataset(ds, run.path("dataset.bin"))
    man = dataset_manifest(ds, digest, reports)
    run.path("dataset_manifest.json").write_text(
        json.dumps(man, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    run.results = {"counts": man["counts"], "vocab_size": man["vocab_size"]}
    print(json.dumps(run.results))


def cmd_train(run: _Run):
    from .train import train
    cfg = run.cfg
    ds, ds_path = run.dataset()
    mc = _model_config(cfg, len(ds.vocab), ds.max_len, ds.meta.get("num_classes", 2))
    tc = _train_config(cfg)
    ck, hist = train(mc, tc, ds, log_path=run.path("train_log.tsv"))
    ck.extra = {"dataset": ds_path, "dataset_sha256": run.hashes[ds_path],
                "lambda_imp": tc.lambda_imp, "lambda_inter": tc.lambda_inter}
    ck_hash = ck.save(run.path("best.ck"))
    run.results = {"dev_acc": ck.dev_acc, "best_epoch": ck.epoch, "steps": len(hist.steps),
                   "checkpoint_sha256": ck_hash}
    print(json.dumps(run.results))


def cmd_eval(run: _Run):
    from .evaluate import accuracy
    ck = run.checkpoint()
    ds, _ = run.dataset()
    acc = accuracy(ck, _split(ds, run.cfg.split))
    with open(run.path("eval.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"split\tN\taccuracy\n{run.cfg.split}\t{ds[run.cfg.split].N}\t{acc!r}\n")
    run.results = {"accuracy": acc}
    print(json.dumps(run.results))


def cmd_srs(run: _Run):
    from .evaluate import srs, write_srs_tsv
    cfg = run.cfg
    ck = run.checkpoint()
    ds, _ = run.dataset()
    rep = srs(ck, _split(ds, cfg.split), cfg.k, cfg.layer, _random_seeds(cfg))
    write_srs_tsv([rep], run.path("srs.tsv"))
    run.results = dataclasses.asdict(rep)
    print(json.dumps({"k": rep.k, "acc_s": rep.acc_original, "acc_r": rep.acc_random,
                      "acc_k": rep.acc_capacity, "srs": rep.srs}))


def cmd_sensitivity(run: _Run):
    from .evaluate import sensitivity_curve
    cfg = run.cfg
    ck = run.checkpoint()
    ds, _ = run.dataset()
    reps = sensitivity_curve(ck, _split(ds, cfg.split), _floats(cfg.ks), cfg.layer,
                             _random_seeds(cfg), path=run.path("sensitivity.tsv"))
    run.results = {"srs": [r.srs for r in reps], "ks": [r.k for r in reps]}
    print(json.dumps(run.results))


def cmd_sweep(run: _Run):
    from .evaluate import sweep
    cfg = run.cfg
    ds, ds_path = run.dataset()
    if cfg.cells:
        try:
            grid = [tuple(float(x) for x in c.split(":")) for c in cfg.cells.split(",") if c]
        except ValueError:
            raise UsageError(f"bad --cells {cfg.cells!r}") from None
        if any(len(c) != 2 for c in grid):
            raise UsageError("each cell must be imp:inter")
    else:
        grid = [(a, b) for a in _floats(cfg.grid_imp) for b in _floats(cfg.grid_inter)]
    mc = _model_config(cfg, len(ds.vocab), ds.max_len, ds.meta.get("num_classes", 2))
    ck_dir = run.out / "checkpoints"
    ck_dir.mkdir(exist_ok=True)
    rows = sweep(grid, mc, _train_config(cfg), ds, dataset_name=Path(ds_path).stem,
                 k=cfg.k, layer_tag=cfg.layer, eval_split=cfg.split,
                 random_seeds=_random_seeds(cfg), path=run.path("sweep.tsv"),
                 checkpoint_dir=ck_dir)
    run.results = {"cells": len(rows), "failed": sum(r.status != "ok" for r in rows)}
    print(json.dumps(run.results))


def cmd_capacity_report(run: _Run):
    from .evaluate import capacity_report, write_capacity_report
    cfg = run.cfg
    ck = run.checkpoint()
    ds, _ = run.dataset()
    rep = capacity_report(ck, _split(ds, cfg.split), cfg.important_fraction, cfg.layer,
                          cfg.per_type)
    write_capacity_report(rep, run.path("capacity_report.tsv"))
    run.results = {"all": rep.mean_all, "important": rep.mean_important, "rest": rep.mean_rest}
    print(json.dumps(run.results))


def cmd_viz(run: _Run):
    from .train import substream_seed
    from .viz import emit_capacity_barchart, emit_cross_layer, emit_interference_heatmap, \
        emit_token_graph
    cfg = run.cfg
    ck = run.checkpoint()
    ds, _ = run.dataset()
    split = _split(ds, cfg.split)
    if not 0 <= cfg.example_index < split.N:
        raise UsageError(f"--example-index must be in [0, {split.N})")
    trace = ck.model().trace(split.examples[cfg.example_index])
    ex_id = f"{cfg.split}{cfg.example_index}"
    layout_seed = substream_seed(cfg.seed, "layout") % 2 ** 32
    emit_capacity_barchart(trace, cfg.layer, run.path(f"{ex_id}_{cfg.layer}_capacity.svg"))
    emit_interference_heatmap(trace, cfg.layer,
                              run.path(f"{ex_id}_{cfg.layer}_interference.svg"))
    emit_token_graph(trace, cfg.layer, run.path(f"{ex_id}_{cfg.layer}_graph.svg"),
                     cfg.edge_threshold, layout_seed)
    if cfg.cross_layer:
        for p in emit_cross_layer(trace, run.out, ex_id):
            run.artifacts[p.name] = str(p)
    run.results = {"files": sorted(run.artifacts)}
    print(json.dumps(run.results))


def cmd_grad_check(run: _Run):
    from .data import TokenizedExample
    from .model import ModelConfig
    from .train import grad_check
    cfg = run.cfg
    T = min(5, cfg.max_len)
    rng = np.random.default_rng(cfg.seed)
    vocab_size = 12
    ids = rng.integers(2, vocab_size, size=T).tolist()
    ex = TokenizedExample(ids, [str(i) for i in ids], int(rng.integers(0, 2)))
    mc = ModelConfig(vocab_size=vocab_size, E=cfg.E, d_ff=cfg.d_ff, M=cfg.M, G=2,
                     max_len=cfg.max_len, dropout=0.0, seed=cfg.seed, dtype="float64")
    rep = grad_check(mc, ex, cfg.step_size, lambda_imp=cfg.lambda_imp,
                     lambda_inter=cfg.lambda_inter, seed=cfg.seed)
    run.results = {"max_rel_error": rep.max_rel_error, "checked": rep.checked,
                   "worst": rep.worst, "passed": rep.passed(cfg.grad_tol)}
    print(json.dumps(run.results))
    if not rep.passed(cfg.grad_tol):
        raise RuntimeError(f"gradient check failed: {rep.max_rel_error:.3g} > {cfg.grad_tol}")


_COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "srs": cmd_srs,
    "sensitivity": cmd_sensitivity,
    "sweep": cmd_sweep,
    "capacity-report": cmd_capacity_report,
    "viz": cmd_viz,
    "grad-check": cmd_grad_check,
}

# defaults that differ for the tiny gradient-check model
_GRAD_CHECK_DEFAULTS = {"E": 8, "d_ff": 32, "M": 2, "max_len": 5,
                        "lambda_imp": 0.1, "lambda_inter": 0.1}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        flag_values = {k: v for k, v in vars(args).items()
                       if k in _FIELDS and v is not None}
        file_values = read_config_file(args.config) if args.config else {}
        if args.command == "grad-check":
            file_values = {**_GRAD_CHECK_DEFAULTS, **file_values}
        cfg = resolve_config(file_values, flag_values)
    except UsageError as exc:
        print(f"safr: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = _Run(args.command, cfg)
    try:
        _COMMANDS[args.command](run)
    except UsageError as exc:
        print(f"safr {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"safr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        run.results = {"error": f"{type(exc).__name__}: {exc}"}
        run.finish()
        return 2
    run.finish()
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
