"""
Command-line entry point.

    python cli.py make-toy-data --out data/toy
    python cli.py train --config configs/toy.yaml --stage 1
    python cli.py bench --config configs/toy.yaml --set protocol.methods=[dt,agra]
    python cli.py mmd --config configs/toy.yaml
    python cli.py dump-features --config configs/toy.yaml --dataset toy_target --out feats.csv

Exit codes: 0 success, 1 configuration or validation error, 2 any other failure.
"""

import argparse
import sys
from pathlib import Path

import pandas as pd
import yaml

from schemas import Domain, RunConfig
from agra.benchmark import MMD_MODES, write_artifact_csv, dump_features, format_report, mmd_by_mode
from agra.config import dump_config, load_run_config
from agra.data import load_manifest
from agra.errors import ConfigError, ValidationError
from agra.orchestrator import manifest_path
from agra.toy_data import make_toy_dataset
from agra.training import load_checkpoint, train_stage1, train_stage2
from graph import run_protocol

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2


def _manifest(cfg: RunConfig, name: str):
    path = manifest_path(cfg, name)
    if not Path(path).exists():
        raise ConfigError(f"Manifest for '{name}' not found: {path}")
    return load_manifest(path, name)


def _stage2_checkpoint(cfg: RunConfig) -> Path:
    return Path(cfg.protocol.checkpoint or Path(cfg.output_dir) / "stage2.pt")


# ---------------------------
# Commands
# ---------------------------
def cmd_train(cfg: RunConfig, args) -> int:
    """Stage 1, stage 2, or both, into cfg.output_dir."""
    out_dir = Path(cfg.output_dir)
    source = _manifest(cfg, cfg.protocol.source)
    target_name = args.target or cfg.protocol.targets[0]
    target = _manifest(cfg, target_name) if args.stage in ("2", "all") else None
    dump_config(cfg, out_dir / "config.yaml")

    stage1 = out_dir / "stage1.pt"
    if args.stage in ("1", "all"):
        stage1 = train_stage1(cfg, source, out_dir).checkpoint
    if args.stage in ("2", "all"):
        result = train_stage2(stage1, cfg, source, target, out_dir)
        print(f"[CLI] Stage-2 checkpoint {result.checkpoint}, bank {out_dir / 'bank.pt'}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    """Run the protocol and print the method x target accuracy table."""
    report = run_protocol(cfg)
    print(format_report(report))
    return EXIT_OK


def cmd_mmd(cfg: RunConfig, args) -> int:
    """MMD per feature mode and target for a stage-2 checkpoint."""
    model, bank, _ = load_checkpoint(_stage2_checkpoint(cfg), expected_stage=2)
    source = _manifest(cfg, cfg.protocol.source)
    rows = []
    for name in cfg.protocol.targets:
        values = mmd_by_mode(model, bank, source, _manifest(cfg, name), cfg.mmd, split=args.split)
        rows += [{"target": name, "mode": mode, "mmd": values[mode]} for mode in MMD_MODES]
    frame = pd.DataFrame(rows)
    path = write_artifact_csv(frame, Path(cfg.output_dir) / "mmd.csv", cfg)
    print(frame.to_markdown(index=False))
    print(f"[CLI] Wrote {path}")
    return EXIT_OK


def cmd_dump_features(cfg: RunConfig, args) -> int:
    model, bank, _ = load_checkpoint(_stage2_checkpoint(cfg), expected_stage=2)
    name = args.dataset or cfg.protocol.targets[0]
    domain = Domain.SOURCE if name == cfg.protocol.source else Domain.TARGET
    out = args.out or Path(cfg.output_dir) / f"features_{name}.csv"
    dump_features(model, bank, _manifest(cfg, name), out, cfg, split=args.split, domain=domain)
    return EXIT_OK


def cmd_make_toy_data(cfg: RunConfig, args) -> int:
    """Write the synthetic fixture and a config that points at it."""
    out = Path(args.out or Path(cfg.output_dir) / "toy_data")
    manifests = make_toy_dataset(out, n_source=args.n_source, n_target=args.n_target, seed=args.seed)
    protocol = cfg.protocol.model_copy(update={
        "source": "toy_source", "targets": ["toy_target"], "manifests": manifests,
    })
    config_path = dump_config(cfg.model_copy(update={"protocol": protocol}), out / "toy.yaml")
    print(yaml.safe_dump({"manifests": manifests}, sort_keys=True), end="")
    print(f"[CLI] Wrote {config_path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "bench": cmd_bench,
    "mmd": cmd_mmd,
    "dump-features": cmd_dump_features,
    "make-toy-data": cmd_make_toy_data,
}


# ---------------------------
# Parser
# ---------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set train.stage2_epochs=2")

    parser = argparse.ArgumentParser(prog="agra", description="Adversarial graph representation adaptation")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], help="two-stage training")
    train.add_argument("--stage", choices=["1", "2", "all"], default="all")
    train.add_argument("--target", help="target dataset for stage 2 (default: first protocol target)")

    sub.add_parser("bench", parents=[common], help="run the evaluation protocol")

    mmd = sub.add_parser("mmd", parents=[common], help="MMD diagnostics per feature mode")
    mmd.add_argument("--split", default="test")

    dump = sub.add_parser("dump-features", parents=[common], help="write F(x) rows for plotting")
    dump.add_argument("--dataset", help="dataset name from protocol.manifests")
    dump.add_argument("--split", default=None, help="train/val/test (default: every record)")
    dump.add_argument("--out")

    toy = sub.add_parser("make-toy-data", parents=[common], help="write the synthetic two-domain fixture")
    toy.add_argument("--out")
    toy.add_argument("--n-source", type=int, default=2000)
    toy.add_argument("--n-target", type=int, default=2000)
    toy.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValidationError) as e:
        print(f"[CLI] {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:
        print(f"[CLI] {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
