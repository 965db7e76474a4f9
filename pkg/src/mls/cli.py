"""``mls`` command line: pretrain, eval, dump, dump-bank, ablate.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime abort
(non-finite training, checkpoint mismatch, bank not ready).
"""
import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from ._io import atomic_write_json
from .bank import BankNotReadyError
from .checkpoint import CheckpointError, load_checkpoint
from .config import load_config
from .errors import ConfigError
from .trainer import Trainer, TrainingAborted, env_workers

log = logging.getLogger("mls")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


@dataclass
class RunManifest:
    artifact: str
    version: str
    config_hash: str
    seed: int
    started_at: str
    finished_at: str = None
    status: str = "running"
    deterministic: bool = True
    resumed_from: str = None
    final_step: int = None
    paths: dict = field(default_factory=dict)

    def write(self, run_dir):
        atomic_write_json(Path(run_dir) / "manifest.json", asdict(self))


def _dump_dir(ckpt, out):
    if out:
        return Path(out)
    ckpt = Path(ckpt)
    if ckpt.parent.name == "checkpoints":
        return ckpt.parent.parent / "dumps"
    return ckpt / "dumps"


def _emit(report, out=None):
    text = json.dumps(report, indent=1)
    if out:
        atomic_write_json(out, report)
    print(text)


# -- subcommands -----------------------------------------------------------

def cmd_pretrain(args):
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg = cfg.with_overrides(epochs=args.epochs)
    workers = env_workers()
    deterministic = args.deterministic or workers == 1
    run_dir = Path(args.out) if args.out else Path("runs") / cfg.hash()
    run_dir.mkdir(parents=True, exist_ok=True)
    for sub in ("checkpoints", "dumps"):
        (run_dir / sub).mkdir(exist_ok=True)
    atomic_write_json(run_dir / "config.json", cfg.to_dict())
    manifest = RunManifest(
        artifact="mls", version=__version__, config_hash=cfg.hash(), seed=cfg.seed,
        started_at=_now(), deterministic=deterministic,
        resumed_from=str(args.resume) if args.resume else None,
        paths={"config": "config.json", "metrics": "metrics.jsonl",
               "checkpoints": "checkpoints", "dumps": "dumps"})
    manifest.write(run_dir)
    trainer = Trainer(cfg, run_dir=run_dir, deterministic=deterministic, workers=workers)
    try:
        if args.resume:
            trainer.resume(args.resume)
        trainer.run(progress=True)
        manifest.status = "completed"
    except TrainingAborted:
        manifest.status = "aborted"
        raise
    except CheckpointError:
        manifest.status = "checkpoint_mismatch"
        raise
    finally:
        manifest.finished_at = _now()
        manifest.final_step = trainer.state.step
        manifest.write(run_dir)
    print(json.dumps({"run_dir": str(run_dir), "steps": trainer.state.step,
                      "final_checkpoint": str(run_dir / "checkpoints" / "final")}))
    return EXIT_OK


def cmd_eval(args):
    from .evalkit import eval_linear_probe, eval_retrieval
    state = load_checkpoint(args.ckpt)
    if args.what == "retrieval":
        report = eval_retrieval(state, k=args.k).to_dict()
    else:
        report = eval_linear_probe(state, split_seed=args.split_seed).to_dict()
    _emit(report, args.out)
    return EXIT_OK


def cmd_dump(args):
    from .evalkit import dump_neighbors, dump_score_histograms
    state = load_checkpoint(args.ckpt)
    out = _dump_dir(args.ckpt, args.out)
    if args.what == "histograms":
        report = dump_score_histograms(state, sample_index=args.sample, out_dir=out)
        summary = {"out_dir": str(out), "ks_backbone": report["ks_backbone"],
                   "ks_projector": report["ks_projector"]}
    else:
        report = dump_neighbors(state, n_queries=args.queries, k=args.k, out_dir=out, seed=args.seed)
        summary = {"out_dir": str(out), "queries": len(report["queries"])}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_dump_bank(args):
    state = load_checkpoint(args.ckpt)
    bank = state.bank
    report = {"capacity": bank.capacity, "head": bank.head, "filled": bank.filled,
              "d_g": bank.Qg.shape[1], "d_z": bank.Qz.shape[1], "step": state.step,
              "slots": bank.meta_records()}
    if args.vectors:
        report["Qg"] = bank.Qg[:bank.filled].tolist()
        report["Qz"] = bank.Qz[:bank.filled].tolist()
    out = Path(args.out) if args.out else _dump_dir(args.ckpt, None) / "bank.json"
    atomic_write_json(out, report)
    print(json.dumps({"out": str(out), "filled": bank.filled, "capacity": bank.capacity}))
    return EXIT_OK


def cmd_ablate(args):
    from .evalkit import run_ablation_grid
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg = cfg.with_overrides(epochs=args.epochs)
    out = Path(args.out) if args.out else Path("runs") / f"ablation_{cfg.hash()}"
    table = run_ablation_grid(cfg, args.axes, out_dir=out, eval_k=args.k,
                              split_seed=args.split_seed, processes=args.processes)
    print((out / "ablation.txt").read_text(), end="")
    print(json.dumps({"table": str(out / "ablation.json"), "rows": len(table["rows"])}))
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser():
    p = _Parser(prog="mls", description="Multi-label self-supervised pretraining on synthetic scenes.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    pt = sub.add_parser("pretrain", help="train from a JSON config")
    pt.add_argument("--config", required=True)
    pt.add_argument("--out", help="run directory (default runs/<config hash>)")
    pt.add_argument("--resume", help="checkpoint directory to continue from")
    pt.add_argument("--deterministic", action="store_true",
                    help="single worker, wall time omitted from metrics")
    pt.add_argument("--epochs", type=int, help="override the config's epoch count")
    pt.set_defaults(func=cmd_pretrain)

    ev = sub.add_parser("eval", help="retrieval or linear-probe report")
    ev.add_argument("what", choices=("retrieval", "probe"))
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--k", type=int, default=4)
    ev.add_argument("--split-seed", type=int, default=0)
    ev.add_argument("--out", help="also write the JSON report here")
    ev.set_defaults(func=cmd_eval)

    dp = sub.add_parser("dump", help="score histograms or neighbor grids")
    dp.add_argument("what", choices=("histograms", "neighbors"))
    dp.add_argument("--ckpt", required=True)
    dp.add_argument("--out", help="output directory (default: the run's dumps/)")
    dp.add_argument("--sample", type=int, default=0, help="dataset index for histograms")
    dp.add_argument("--queries", type=int, default=8)
    dp.add_argument("--k", type=int, default=4)
    dp.add_argument("--seed", type=int, default=0)
    dp.set_defaults(func=cmd_dump)

    db = sub.add_parser("dump-bank", help="bank cursor and per-slot provenance as JSON")
    db.add_argument("--ckpt", required=True)
    db.add_argument("--out")
    db.add_argument("--vectors", action="store_true", help="include Qg/Qz rows")
    db.set_defaults(func=cmd_dump_bank)

    ab = sub.add_parser("ablate", help="train and evaluate a grid of configs")
    ab.add_argument("--config", required=True)
    ab.add_argument("--axes", nargs="+", required=True, metavar="NAME=V1,V2",
                    help="axes among variant, dictionaries, k, D, lambda")
    ab.add_argument("--out")
    ab.add_argument("--epochs", type=int)
    ab.add_argument("--k", type=int, default=4, help="retrieval neighbors per query")
    ab.add_argument("--split-seed", type=int, default=0)
    ab.add_argument("--processes", type=int, default=1)
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --version / --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"mls: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, CheckpointError, BankNotReadyError) as exc:
        print(f"mls: aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
