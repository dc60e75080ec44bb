"""Command-line entry point: train-teacher, distill, eval, verify.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numerical divergence, 5 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .amd import FAULT_ENV, PairingError
from .attention import attention_map
from .config import ConfigError, RunConfig
from .data import DataError, Dataset, load_cifar10, synth_dataset
from .metrics import evaluate, reliability_diagram, write_diagram_csv, write_report
from .nn import load_checkpoint
from .nn.checkpoint import MANIFEST, CheckpointError
from .nn.models import ModelSpecError
from .tensor import NonFiniteError, no_grad
from .tensor import io as tio
from .tensor.io import TensorFormatError
from .train import DivergenceError, distill_student, repeat_runs, train_teacher

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4, 5

log = logging.getLogger("amdistill")


def load_data(cfg: RunConfig):
    dtype = cfg.dtype
    if cfg["data.source"] == "cifar10":
        cache = cfg["data.cache_dir"] or None
        train, test = load_cifar10(cfg.data_root(), cache_dir=cache, dtype=dtype)
    else:
        common = dict(num_classes=cfg["data.num_classes"], image_size=cfg["data.image_size"],
                      seed=cfg["data.synth_seed"], noise=cfg["data.noise"],
                      distractors=cfg["data.distractors"], dtype=dtype)
        train = synth_dataset(n_per_class=cfg["data.n_per_class"], split="train", **common)
        test = synth_dataset(n_per_class=cfg["data.test_per_class"], split="test", **common)
    if cfg["data.train_subset"]:
        train = train.subset(cfg["data.train_subset"])
    if cfg["data.test_subset"]:
        test = test.subset(cfg["data.test_subset"])
    return train, test


def resolve_checkpoint(path, snapshot: str = "best") -> Path:
    """Accept a checkpoint directory or a run directory holding ``checkpoints/``."""
    p = Path(path)
    if (p / MANIFEST).is_file():
        return p
    ckpts = p / "checkpoints"
    if not ckpts.is_dir():
        raise CheckpointError(f"no checkpoint at {p}")
    if snapshot == "eskd":
        snaps = sorted(ckpts.glob("epoch*"), key=lambda q: int(q.name[5:]))
        if not snaps:
            raise CheckpointError(f"{ckpts} holds no early-stopped snapshot (epochN)")
        return snaps[-1]
    target = ckpts / snapshot
    if not (target / MANIFEST).is_file():
        raise CheckpointError(f"no {snapshot!r} checkpoint under {ckpts}")
    return target


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.set or ())
    if args.seed is not None:
        cfg.set("train", "seed", str(args.seed))
    return cfg


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    cfg.echo(out)
    train, test = load_data(cfg)
    spec = cfg.model_spec("teacher", train.image_shape, train.num_classes)
    res = train_teacher(spec, train, test, cfg.train_config(), out_dir=out, dtype=cfg.dtype)
    print(f"teacher {spec.name}: best test accuracy {res.record.best_acc:.4f} "
          f"at epoch {res.record.best_epoch}; checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


def _distill_once(cfg: RunConfig, train: Dataset, test: Dataset, teacher, out: Path, seed: int):
    tcfg = cfg.train_config()
    tcfg.seed = seed
    spec = cfg.model_spec("student", train.image_shape, train.num_classes)
    res = distill_student(teacher, spec, cfg.pairing(), cfg.loss_weights(), cfg.amd_config(),
                          train, test, tcfg, method=cfg["distill.method"], mixup=cfg.mixup(),
                          out_dir=out, dtype=cfg.dtype)
    print(f"{cfg['distill.method']} seed {seed}: best test accuracy {res.record.best_acc:.4f} "
          f"at epoch {res.record.best_epoch}")
    return res.record


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    cfg.echo(out)
    method = cfg["distill.method"]
    teacher = None
    if method != "scratch":
        if not cfg["distill.teacher_checkpoint"]:
            raise ConfigError("distill.teacher_checkpoint is not set")
        path = resolve_checkpoint(cfg["distill.teacher_checkpoint"], cfg["distill.teacher_snapshot"])
        teacher = load_checkpoint(path)[0]
    train, test = load_data(cfg)
    base = cfg["train.seed"]
    if not args.repeat:
        _distill_once(cfg, train, test, teacher, out, base)
        return EXIT_OK
    seeds = [base + k for k in range(cfg["train.repeats"])]
    summary = repeat_runs(lambda s: _distill_once(cfg, train, test, teacher, out / f"seed{s}", s), seeds)
    payload = {"method": method, "seeds": seeds, "best_acc": summary.values,
               "mean": summary.mean, "std": summary.std}
    (out / "repeat_summary.json").write_text(json.dumps(payload, indent=2))
    print(f"{method}: {summary.mean:.4f} +- {summary.std:.4f} over {len(seeds)} seeds")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    cfg.echo(out)
    source = args.checkpoint or cfg["eval.checkpoint"]
    if not source:
        raise ConfigError("no checkpoint given (--checkpoint or eval.checkpoint)")
    model, manifest = load_checkpoint(resolve_checkpoint(source))
    train, test = load_data(cfg)
    ds = test if cfg["eval.split"] == "test" else train
    report = evaluate(model, ds, n_bins=cfg["eval.bins"])
    write_report(report, out / "report.json")
    write_diagram_csv(reliability_diagram(report), out / "reliability.csv")
    if args.dump_attention:
        dump_attention(model, ds, out / "attention", cfg["distill.d"])
    print(f"{model.spec.name} (epoch {manifest.get('epoch')}) on {cfg['eval.split']}: "
          f"accuracy {report.accuracy:.4f}  ECE {report.ece_percent:.2f}%  "
          f"NLL {report.nll:.4f} ({report.nll_percent:.2f} x100)")
    return EXIT_OK


def dump_attention(model, ds: Dataset, out: Path, d: float, n: int = 64) -> List[Path]:
    """Attention maps of the first ``n`` samples, one tensor file per tap."""
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    with no_grad():
        _, taps = model(ds.images[:n].astype(model.dtype))
    paths = []
    for name, act in taps.items():
        path = out / f"{name}.amdt"
        tio.save(attention_map(act, d), path)
        paths.append(path)
    return paths


def cmd_verify(args) -> int:
    from .verify import format_table, run_checks

    if args.inject_fault:
        os.environ[FAULT_ENV] = args.inject_fault
    try:
        results = run_checks(seed=args.seed or 0)
    finally:
        if args.inject_fault:
            os.environ.pop(FAULT_ENV, None)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only print summaries")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_out):
        p.add_argument("--config", help="config file (cwd first, then bundled presets)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")
        p.add_argument("--out", default=default_out, help="output directory")
        p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")

    p = sub.add_parser("train-teacher", help="train a teacher from scratch with cross-entropy")
    common(p, "runs/teacher")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    common(p, "runs/student")
    p.add_argument("--repeat", action="store_true",
                   help="run train.repeats seeds and write a mean/std summary")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="accuracy, ECE, NLL and a reliability table")
    common(p, "runs/eval")
    p.add_argument("--checkpoint", help="checkpoint or run directory")
    p.add_argument("--dump-attention", action="store_true",
                   help="also write per-tap attention maps as tensor files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="oracle and gradient self-checks (offline)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (DivergenceError, NonFiniteError) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, TensorFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ModelSpecError, PairingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
