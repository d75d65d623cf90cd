"""Command line interface.

    advbench train    --config cfg.yaml --model resnet [--out ckpt]
    advbench attack   --config cfg.yaml --target ckpt --attack fgsm|pgd
    advbench transfer --config cfg.yaml --source ckpt --targets a.ckpt,b.ckpt --attack fgsm|pgd
    advbench report   --in dir [--format csv|json] [--out path]

Exit codes: 0 success, 1 config or usage error, 2 I/O or integrity error.
"""

from __future__ import annotations

import argparse
import sys
import time
import zlib
from pathlib import Path

from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .config import DATA_ENV, RunConfig, load_run_config
from .data import load_dataset, stratified_head, subset, SubsetSpec
from .errors import ConfigError, IntegrityError
from .harness import (
    ReportRow,
    emit_report,
    merge_rows,
    read_report_rows,
    run_transfer,
    run_whitebox_fgsm,
    run_whitebox_pgd,
)
from .nn import build_model
from .train import evaluate, train, write_history_csv

__all__ = ["main", "run"]


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(_fail(1, f"{self.prog}: {message}"))


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advbench",
                     description="Adversarial robustness benchmark for small convnets.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run configuration yaml")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")

    p_train = sub.add_parser("train", help="train one configured model")
    common(p_train)
    p_train.add_argument("--model", required=True, help="model name from the config")
    p_train.add_argument("--out", default=None, help="checkpoint path (default: output dir)")

    p_attack = sub.add_parser("attack", help="white-box sweep against one checkpoint")
    common(p_attack)
    p_attack.add_argument("--target", required=True, help="checkpoint to attack")
    p_attack.add_argument("--attack", required=True, choices=("fgsm", "pgd"))

    p_transfer = sub.add_parser("transfer", help="black-box transfer sweep")
    common(p_transfer)
    p_transfer.add_argument("--source", required=True, help="checkpoint that crafts the attack")
    p_transfer.add_argument("--targets", required=True,
                            help="comma-separated checkpoints that receive it")
    p_transfer.add_argument("--attack", required=True, choices=("fgsm", "pgd"))

    p_report = sub.add_parser("report", help="merge emitted reports from a directory")
    p_report.add_argument("--in", dest="in_dir", required=True, help="directory of report files")
    p_report.add_argument("--format", default="csv", choices=("csv", "json"))
    p_report.add_argument("--out", default=None, help="merged report path")
    p_report.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def _load_data(cfg: RunConfig):
    root = cfg.data.resolve_root()
    if not root.exists():
        raise FileNotFoundError(f"dataset root does not exist: {root} (set data.root or {DATA_ENV})")
    train_set, test_set = load_dataset(cfg.data.name, root)
    if cfg.data.train_per_class is not None:
        train_set = subset(train_set, SubsetSpec(cfg.data.train_per_class,
                                                 cfg.data.train_subset_seed))
    return train_set, test_set


def _eval_split(cfg: RunConfig, test_set):
    if cfg.data.eval_count is not None:
        return stratified_head(test_set, cfg.data.eval_count, cfg.data.eval_seed)
    return test_set


def _model_seed(cfg: RunConfig, name: str) -> int:
    return cfg.seed * 100003 + zlib.crc32(name.encode())


def _check_dataset_match(model, cfg: RunConfig, what: str) -> None:
    mc = model.config
    shape = {"num_classes": mc.num_classes, "input_channels": mc.input_channels,
             "input_size": mc.input_size}
    from .config import _DATASET_SHAPES

    if shape != _DATASET_SHAPES[cfg.data.name]:
        raise ConfigError(
            f"{what} was built for {shape}, config dataset {cfg.data.name} "
            f"needs {_DATASET_SHAPES[cfg.data.name]}"
        )


def _print_table(rows: list[ReportRow], clean_map: dict[str, float]) -> None:
    """A Table-2/3 shaped block: the sweep parameter against one metric
    column per model."""
    if not rows:
        return
    param = rows[0].param_name
    metric = rows[0].metric
    columns = sorted({r.target_model for r in rows})
    values = sorted({r.param_value for r in rows})
    cells = {(r.param_value, r.target_model): r.value for r in rows}
    head = [param.ljust(12)] + [f"{c} ({metric})".rjust(18) for c in columns]
    print(f"dataset: {rows[0].dataset}   scenario: {rows[0].scenario}   attack: {rows[0].attack}")
    print("  ".join(head))
    for v in values:
        line = [f"{v:g}".ljust(12)]
        for c in columns:
            cell = cells.get((v, c))
            line.append(("-" if cell is None else f"{cell:.2f}").rjust(18))
        print("  ".join(line))
    clean_line = ", ".join(f"{name}={acc:.2f}" for name, acc in sorted(clean_map.items()))
    print(f"clean accuracy: {clean_line}")


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    if args.model not in cfg.models:
        raise ConfigError(f"--model {args.model!r} is not defined under 'models' "
                          f"(have {sorted(cfg.models)})")
    train_set, test_set = _load_data(cfg)
    model = build_model(cfg.models[args.model], seed=_model_seed(cfg, args.model))
    started = time.time()
    history = train(model, train_set, test_set, cfg.train)
    out_dir = Path(cfg.output.dir)
    ckpt_path = Path(args.out) if args.out else out_dir / f"{args.model}.ckpt"
    save_checkpoint(model, ckpt_path)
    history_path = write_history_csv(history, ckpt_path.with_suffix(".history.csv"))
    final_acc = 100.0 * (history[-1].test_acc if history else evaluate(model, test_set))
    _say(args, f"trained {args.model} for {cfg.train.epochs} epochs "
               f"in {time.time() - started:.1f}s")
    _say(args, f"clean test accuracy: {final_acc:.2f}%")
    _say(args, f"checkpoint: {ckpt_path} (sha256 {file_digest(ckpt_path)[:12]})")
    _say(args, f"history: {history_path}")
    return 0


def _cmd_attack(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    model = load_checkpoint(args.target)
    _check_dataset_match(model, cfg, f"checkpoint {args.target}")
    name = Path(args.target).stem
    _, test_set = _load_data(cfg)
    test_set = _eval_split(cfg, test_set)
    clip = (cfg.attack.clip_min, cfg.attack.clip_max)
    if args.attack == "fgsm":
        rows = run_whitebox_fgsm(model, name, test_set, cfg.attack.fgsm_epsilons,
                                 clip=clip, seed=cfg.seed)
    else:
        rows = run_whitebox_pgd(model, name, test_set, cfg.attack.pgd_iterations,
                                epsilon=cfg.attack.epsilon, alpha=cfg.attack.alpha,
                                clip=clip, seed=cfg.seed)
    out_dir = Path(cfg.output.dir)
    written = emit_report(rows, out_dir, name=f"report_whitebox_{args.attack}_{name}",
                          formats=cfg.output.formats, render_figures=cfg.output.figures)
    _print_table(rows, {name: rows[0].clean_value})
    _say(args, f"config digest: {cfg.digest()[:12]}   checkpoint: {file_digest(args.target)[:12]}")
    for path in written:
        _say(args, f"wrote {path}")
    return 0


def _cmd_transfer(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    source_path = Path(args.source)
    target_paths = [Path(p) for p in args.targets.split(",") if p]
    if not target_paths:
        raise ConfigError("--targets must list at least one checkpoint")
    if any(p.resolve() == source_path.resolve() for p in target_paths):
        raise ConfigError(f"transfer source {source_path} cannot also be a target")
    source = load_checkpoint(source_path)
    targets = [(p.stem, load_checkpoint(p)) for p in target_paths]
    names = [source_path.stem] + [n for n, _ in targets]
    if len(set(names)) != len(names):
        raise ConfigError(f"checkpoint names must be distinct, got {names}")
    for model, label in [(source, args.source)] + [(m, str(p)) for (_, m), p
                                                   in zip(targets, target_paths)]:
        _check_dataset_match(model, cfg, f"checkpoint {label}")
    _, test_set = _load_data(cfg)
    test_set = _eval_split(cfg, test_set)
    sweep = cfg.attack.fgsm_epsilons if args.attack == "fgsm" else cfg.attack.pgd_iterations
    out_dir = Path(cfg.output.dir)
    rows, digests = run_transfer(
        source, source_path.stem, targets, test_set, args.attack, sweep,
        out_dir / "batches", epsilon=cfg.attack.epsilon, alpha=cfg.attack.alpha,
        clip=(cfg.attack.clip_min, cfg.attack.clip_max), seed=cfg.seed,
    )
    written = emit_report(rows, out_dir,
                          name=f"report_transfer_{args.attack}_{source_path.stem}",
                          formats=cfg.output.formats, render_figures=cfg.output.figures)
    _print_table(rows, {r.target_model: r.clean_value for r in rows})
    for point, by_model in digests.items():
        uniq = sorted(set(by_model.values()))
        status = "identical" if len(uniq) == 1 else "MISMATCH"
        _say(args, f"batch {point}: digest {uniq[0][:12]} across "
                   f"{len(by_model)} models ({status})")
    _say(args, f"config digest: {cfg.digest()[:12]}")
    for path in written:
        _say(args, f"wrote {path}")
    return 0


def _cmd_report(args) -> int:
    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"--in directory does not exist: {in_dir}")
    row_lists = []
    for path in sorted(in_dir.glob("report*")):
        if path.suffix not in (".csv", ".json"):
            continue
        try:
            row_lists.append(read_report_rows(path))
        except ValueError:
            continue
    if not row_lists:
        raise ConfigError(f"no report files found under {in_dir}")
    merged = merge_rows(row_lists)
    out_path = Path(args.out) if args.out else in_dir / f"merged.{args.format}"
    emit_report(merged, out_path.parent, name=out_path.stem, formats=(args.format,))
    _say(args, f"merged {sum(len(r) for r in row_lists)} rows from "
               f"{len(row_lists)} files into {len(merged)} ({out_path})")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "attack": _cmd_attack,
    "transfer": _cmd_transfer,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(1, str(exc))
    except ValueError as exc:
        return _fail(1, str(exc))
    except IntegrityError as exc:
        return _fail(2, str(exc))
    except FileNotFoundError as exc:
        return _fail(2, str(exc))
    except OSError as exc:
        return _fail(2, str(exc))


def run() -> None:
    raise SystemExit(main())
