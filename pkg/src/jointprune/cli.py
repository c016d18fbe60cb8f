"""Command-line driver for the prune-search pipeline.

    jointprune pretrain -c cfg.json          train the unpruned child -> OUT/base.json
    jointprune search   -c cfg.json          controller search -> OUT/search.jsonl, OUT/ckpt/
    jointprune best     -c cfg.json          print the best logged action
    jointprune retrain  -c cfg.json          train the pruned net -> OUT/pruned.json, OUT/retrain.json
    jointprune eval     -c cfg.json          loss / accuracy / FLOPs / parameters of a checkpoint
    jointprune flops    -c cfg.json          static per-layer FLOPs of a spec under a mask or action
    jointprune serve    -c cfg.json          answer evaluator requests on stdin/stdout
    jointprune verify-checkpoint PATH        load/save round-trip check of a checkpoint

Exit status: 0 success, 1 evaluator failure, 2 malformed config or input,
3 missing file, 4 numerical fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .arch import (NetworkSpec, PruneMask, PruningAction, check_action, conv_param_count,
                   enforce_group_constraint, export_pruned, flops_by_layer, reference_spec,
                   resolve_mask)
from .child.data import Dataset, make_shapes, read_dataset
from .child.evaluator import ChildEvaluator, ExternalEvaluator, Landscape, serve
from .child.model import (CHILD_SCHEMA, ChildModel, accuracy, bn_gammas, parameter_count,
                          pretrain, retrain, test_loss)
from .config import ExperimentConfig, split_seed
from .errors import EvaluatorFailure, InvalidArgument, NumericalFault, VersionMismatch
from .rl import (CTRL_SCHEMA, SearchAborted, SearchState, best_record, read_log, run_search)

log = logging.getLogger("jointprune")

EXIT_OK, EXIT_EVAL, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4

BASE_CKPT = "base.json"
PRUNED_CKPT = "pruned.json"
SEARCH_LOG = "search.jsonl"
CKPT_DIR = "ckpt"


class Run:
    """Resolved locations and lazily built inputs of one experiment."""

    def __init__(self, cfg: ExperimentConfig, config_dir: Path):
        self.cfg = cfg
        self.dir = config_dir
        self.out = self._path(cfg.paths.out)
        self.seeds = split_seed(cfg.seed)
        self._data: Dataset | None = None

    def _path(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.dir / p

    @property
    def data(self) -> Dataset:
        if self._data is None:
            if self.cfg.paths.data:
                self._data = read_dataset(self._path(self.cfg.paths.data))
            else:
                d = self.cfg.data
                self._data = make_shapes(d.n_train, d.n_test, self.seeds["data"], d.size)
        return self._data

    def spec(self) -> NetworkSpec:
        if self.cfg.paths.spec:
            return NetworkSpec.loads(self._path(self.cfg.paths.spec).read_text())
        base = self.out / BASE_CKPT
        if base.exists():
            return ChildModel.load(base).spec
        return reference_spec(1, self.cfg.data.size)

    def base_model(self) -> ChildModel:
        return ChildModel.load(self.out / BASE_CKPT)


def _emit(doc) -> None:
    print(json.dumps(doc, sort_keys=True))


def _load_run(args) -> Run:
    cfg_path = Path(args.config)
    return Run(ExperimentConfig.load(cfg_path), cfg_path.resolve().parent)


def cmd_pretrain(args) -> int:
    run = _load_run(args)
    run.out.mkdir(parents=True, exist_ok=True)
    spec = run.spec() if run.cfg.paths.spec else reference_spec(
        run.data.image_shape[0], run.data.image_shape[1:])
    model = pretrain(spec, run.data, run.cfg.child, np.random.default_rng(run.seeds["pretrain"]))
    model.save(run.out / BASE_CKPT)
    _emit({"checkpoint": str(run.out / BASE_CKPT), "test_loss": test_loss(model, run.data),
           "accuracy": accuracy(model, run.data), "parameters": model.n_params()})
    return EXIT_OK


def _make_evaluator(run: Run, spec: NetworkSpec):
    ev = run.cfg.evaluator
    if ev.kind == "child":
        return ChildEvaluator(run.base_model(), run.data, run.cfg.child)
    if ev.kind == "synthetic":
        doc = ev.landscape
        return Landscape(spec, PruningAction(doc["optimum"]),
                         tuple(float(w) for w in doc["weights"]),
                         float(doc.get("base_loss", 1.0)))
    return ExternalEvaluator(ev.command)


def cmd_search(args) -> int:
    run = _load_run(args)
    run.out.mkdir(parents=True, exist_ok=True)
    scfg = run.cfg.search_config()
    spec = run.spec()
    log_path = run.out / SEARCH_LOG
    if args.resume:
        state = SearchState.load(args.resume)
        kept = log_path.read_text().splitlines(keepends=True)[:state.episode] \
            if log_path.exists() else []
        if len(kept) < state.episode:
            raise InvalidArgument(f"log has {len(kept)} lines, checkpoint is at episode "
                                  f"{state.episode}")
        log_path.write_text("".join(kept))
        mode = "a"
    else:
        state = SearchState.fresh(spec, scfg, run.seeds["controller"], run.seeds["evaluator"])
        mode = "w"
    evaluator = _make_evaluator(run, spec)
    try:
        with open(log_path, mode) as fh:
            run_search(spec, evaluator, scfg, state, log_file=fh,
                       checkpoint_dir=run.out / CKPT_DIR)
    finally:
        if isinstance(evaluator, ExternalEvaluator):
            evaluator.close()
    state.save(run.out / CKPT_DIR / "ctrl_last.json")
    _emit({"log": str(log_path), "episodes": state.episode, "best_reward": state.best_reward,
           "best_episode": state.best_episode})
    return EXIT_OK


def _log_path(run: Run, args) -> Path:
    return Path(args.log) if getattr(args, "log", None) else run.out / SEARCH_LOG


def cmd_best(args) -> int:
    run = _load_run(args)
    rec = best_record(read_log(_log_path(run, args)))
    if args.verbose:
        _emit({"episode": rec.episode, "reward": rec.reward, "action": rec.action})
    else:
        print(json.dumps(rec.action))
    return EXIT_OK


def _read_action(text: str) -> PruningAction:
    """An action given inline as JSON or as ``@path`` to a JSON file."""
    if text.startswith("@"):
        text = Path(text[1:]).read_text()
    try:
        return PruningAction(json.loads(text))
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"action is not valid JSON: {exc}") from exc


def cmd_retrain(args) -> int:
    run = _load_run(args)
    base = run.base_model()
    spec = base.spec
    if args.action:
        action, episode = enforce_group_constraint(spec, _read_action(args.action)), None
    else:
        rec = best_record(read_log(_log_path(run, args)))
        action, episode = PruningAction(rec.action), rec.episode
    mask = resolve_mask(spec, action, bn_gammas(base))
    compact = export_pruned(spec, mask)
    model = retrain(compact, run.data, run.cfg.child, np.random.default_rng(run.seeds["retrain"]))
    model.save(run.out / PRUNED_CKPT)
    f_base = sum(flops_by_layer(spec, PruneMask.identity(spec)))
    f_pruned = sum(flops_by_layer(spec, mask))
    report = {
        "episode": episode, "action": action.to_list(), "mask": mask.to_list(),
        "flops_base": f_base, "flops_pruned": f_pruned,
        "flops_reduction": 1.0 - f_pruned / f_base,
        "params_base": base.n_params(), "params_pruned": model.n_params(),
        "accuracy_base": accuracy(base, run.data), "accuracy_pruned": accuracy(model, run.data),
        "loss_base": test_loss(base, run.data), "loss_pruned": test_loss(model, run.data),
    }
    (run.out / "retrain.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    _emit({k: v for k, v in report.items() if k not in ("mask",)})
    return EXIT_OK


def cmd_eval(args) -> int:
    run = _load_run(args)
    path = Path(args.checkpoint) if args.checkpoint else run.out / BASE_CKPT
    model = ChildModel.load(path)
    spec = model.spec
    _emit({"checkpoint": str(path), "test_loss": test_loss(model, run.data),
           "accuracy": accuracy(model, run.data),
           "flops": sum(flops_by_layer(spec, PruneMask.identity(spec))),
           "parameters": parameter_count(spec, model.num_classes),
           "conv_parameters": conv_param_count(spec)})
    return EXIT_OK


def cmd_flops(args) -> int:
    if args.spec:
        spec = NetworkSpec.loads(Path(args.spec).read_text())
        run = None
    else:
        run = _load_run(args)
        spec = run.spec()
    if args.mask:
        mask = PruneMask.from_list(json.loads(Path(args.mask).read_text()))
    elif args.action:
        action = enforce_group_constraint(spec, _read_action(args.action))
        check_action(spec, action)
        if args.checkpoint:
            gammas = bn_gammas(ChildModel.load(args.checkpoint))
        else:
            gammas = [np.ones(l.out_ch) for l in spec.layers]
        mask = resolve_mask(spec, action, gammas)
    else:
        mask = PruneMask.identity(spec)
    per_layer = flops_by_layer(spec, mask)
    base = sum(flops_by_layer(spec, PruneMask.identity(spec)))
    total = sum(per_layer)
    if args.json:
        _emit({"per_layer": per_layer, "total": total, "unpruned": base})
        return EXIT_OK
    print(f"{'layer':>5} {'kind':<12} {'kept':>9} {'flops':>14}")
    for l, m, f in zip(spec.layers, mask.layers, per_layer):
        kept = "removed" if m.removed else f"{len(m.kept)}/{l.out_ch}"
        print(f"{l.id:>5} {l.kind:<12} {kept:>9} {f:>14,d}")
    print(f"total {total:,d} of {base:,d} ({100.0 * total / base:.2f}%)")
    return EXIT_OK


def cmd_serve(args) -> int:
    run = _load_run(args)
    evaluator = ChildEvaluator(run.base_model(), run.data, run.cfg.child)
    serve(evaluator, sys.stdin, sys.stdout)
    return EXIT_OK


def checkpoint_roundtrip(path: str | Path) -> bool:
    """Load a checkpoint, re-serialize it and compare bytes with the original.

    Raises ``VersionMismatch`` for documents that are not a supported
    controller or child checkpoint.
    """
    raw = Path(path).read_text()
    try:
        schema = json.loads(raw).get("schema")
    except (json.JSONDecodeError, AttributeError) as exc:
        raise VersionMismatch(f"{path}: not a checkpoint document") from exc
    if schema == CTRL_SCHEMA:
        again = SearchState.loads(raw).dumps()
    elif schema == CHILD_SCHEMA:
        again = json.dumps(ChildModel.from_dict(json.loads(raw)).to_dict(),
                           sort_keys=True, separators=(",", ":"))
    else:
        raise VersionMismatch(f"{path}: unsupported checkpoint schema {schema!r} "
                              f"(expected {CTRL_SCHEMA!r} or {CHILD_SCHEMA!r})")
    return again == raw


def cmd_verify(args) -> int:
    ok = checkpoint_roundtrip(args.path)
    print("identical" if ok else "DIFFERENT")
    return EXIT_OK if ok else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointprune", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose-log", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("-c", "--config", required=True, help="experiment config JSON")
        sp.set_defaults(fn=fn)
        return sp

    with_config("pretrain", cmd_pretrain, "train the unpruned child network")
    sp = with_config("search", cmd_search, "run the controller search")
    sp.add_argument("--resume", help="controller checkpoint to continue from")
    sp = with_config("best", cmd_best, "print the highest-reward action of a search log")
    sp.add_argument("--log", help="search log (default OUT/search.jsonl)")
    sp.add_argument("--verbose", action="store_true", help="also print episode and reward")
    sp = with_config("retrain", cmd_retrain, "retrain the pruned architecture from scratch")
    sp.add_argument("--log", help="search log (default OUT/search.jsonl)")
    sp.add_argument("--action", help="explicit action as JSON or @file instead of the log's best")
    sp = with_config("eval", cmd_eval, "report metrics of a child checkpoint")
    sp.add_argument("--checkpoint", help="child checkpoint (default OUT/base.json)")

    sp = sub.add_parser("flops", help="static FLOPs report")
    sp.add_argument("-c", "--config", help="experiment config JSON (for its spec)")
    sp.add_argument("--spec", help="network spec JSON (overrides the config)")
    sp.add_argument("--mask", help="mask JSON file")
    sp.add_argument("--action", help="action as JSON or @file, resolved to a mask")
    sp.add_argument("--checkpoint", help="child checkpoint whose BN scales rank channels")
    sp.add_argument("--json", action="store_true", help="machine-readable output")
    sp.set_defaults(fn=cmd_flops)

    with_config("serve", cmd_serve, "serve child evaluations over stdin/stdout")
    sp = sub.add_parser("verify-checkpoint", help="load/save round-trip check")
    sp.add_argument("path")
    sp.set_defaults(fn=cmd_verify)
    return p


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose_log else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "flops" and not (args.config or args.spec):
        print("error: flops needs --config or --spec", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except VersionMismatch as exc:
        print(f"error: version mismatch: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFault as exc:
        print(f"error: numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SearchAborted as exc:
        if isinstance(exc.__cause__, NumericalFault):
            print(f"error: numerical fault: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except EvaluatorFailure as exc:
        print(f"error: evaluator failed: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except (InvalidArgument, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run_cli())
