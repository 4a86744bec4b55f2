"""Command line entry point: ``mivpg {check,bench,train,export-attn,make-bag}``.

Exit codes: 0 success, 1 invariant failure, 2 usage or config error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import bagio
from .config import MivpgConfig
from .errors import ConfigError, GenerationError, ShapeError, TrainingError
from .model import Bag, init_params
from .rng import Rng

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_config(path: str | None, default: MivpgConfig) -> MivpgConfig:
    return default if path is None else MivpgConfig.load(path)


def cmd_check(args) -> int:
    from .harness.invariants import parse_grid, report_csv, run_invariant_suite, suite_passed

    base = MivpgConfig.load(args.config) if args.config else None
    rows = run_invariant_suite(parse_grid(args.grid), seed=args.seed, base_config=base)
    _emit(report_csv(rows), args.out)
    failed = [r for r in rows if r.status == "fail"]
    for r in failed:
        print(f"FAIL {r.invariant} scenario={r.cell.scenario} csa={r.cell.use_csa} ppeg={r.cell.use_ppeg} "
              f"max_abs={r.max_abs!r}", file=sys.stderr)
    return EXIT_OK if suite_passed(rows) else EXIT_INVARIANT


def cmd_bench(args) -> int:
    from .harness.bench import MECHANISMS, bench_complexity, bench_csv

    mechs = MECHANISMS if args.mechanism == "all" else (args.mechanism,)
    results = [bench_complexity(m, args.m_list, r=args.r, repeats=args.repeats, mode=args.mode,
                                dim=args.dim, heads=args.heads, seed=args.seed) for m in mechs]
    _emit(bench_csv(results), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness.data import SyntheticTaskSpec, generate_task
    from .harness.train import train, witness_config

    config = _load_config(args.config, witness_config(args.instance_dim))
    spec = SyntheticTaskSpec(
        scenario=args.scenario,
        instance_dim=config.instance_dim,
        num_bags=args.num_bags,
        seed=args.seed if args.data_seed is None else args.data_seed,
    )
    dataset = generate_task(spec)
    metrics, clf = train(dataset, config, model=args.model, epochs=args.epochs, lr=args.lr, seed=args.seed,
                         batch_size=args.batch_size, patience=args.patience, return_model=True)
    rows = metrics.to_rows()
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    _emit(buf.getvalue(), args.out)
    if args.save_params:
        if args.model != "mivpg":
            raise ConfigError("--save-params needs --model mivpg")
        np.savez(args.save_params, **clf.params.state_dict())
    if args.save_config:
        config.save(args.save_config)
    return EXIT_OK


def cmd_export(args) -> int:
    from .harness.export import export_attention

    config = _load_config(args.config, MivpgConfig.desk())
    bag = bagio.read_bag(args.bag)
    if args.scenario == 1 and bag.hierarchical:
        bag = bag.flattened()
    params = init_params(config, Rng(args.seed))
    if args.params:
        with np.load(args.params) as data:
            params.load_state_dict({k: data[k] for k in data.files})
    for path in export_attention(bag, config, params, args.out_dir):
        print(path)
    return EXIT_OK


def cmd_make_bag(args) -> int:
    rng = Rng(args.seed)
    if args.images == 1 and args.patches:
        raise ConfigError("a one-image bag file is read back as a flat bag; use --images >= 2")
    if args.patches:
        bag = Bag.nested([rng.normal((args.patches, args.dim)) for _ in range(args.images)])
    else:
        bag = Bag.flat(rng.normal((args.images, args.dim)))
    _emit(bagio.format_bag(bag), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mivpg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("check", help="run the invariant suite over a config grid")
    c.add_argument("--grid", default="default", help="'default' or e.g. 'scenario=1,3;csa=on;ppeg=off'")
    c.add_argument("--config", help="JSON config used as the base of every grid cell")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="report CSV path (stdout if omitted)")
    c.set_defaults(func=cmd_check)

    b = sub.add_parser("bench", help="time and MAC-count bag attention mechanisms")
    b.add_argument("--mechanism", default="all", choices=("full_sa", "low_rank_sa", "csa", "all"))
    b.add_argument("--m-list", type=_int_list, default=[512, 1024, 2048, 4096, 8192])
    b.add_argument("--r", type=int, default=32)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--mode", choices=("time", "mac"), default="time",
                   help="'mac' skips timing so the CSV is deterministic")
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train", help="train on the synthetic witness task")
    t.add_argument("--scenario", type=int, choices=(1, 2, 3), default=3)
    t.add_argument("--config", help="JSON config (default: small witness-task config)")
    t.add_argument("--model", choices=("mivpg", "mean_pool"), default="mivpg")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data-seed", type=int, help="dataset seed (defaults to --seed)")
    t.add_argument("--num-bags", type=int, default=1000)
    t.add_argument("--instance-dim", type=int, default=32)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--patience", type=int)
    t.add_argument("--save-params", help="write trained MIVPG parameters to this .npz")
    t.add_argument("--save-config", help="write the config used to this JSON path")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("export-attn", help="dump attention maps of one bag as CSV")
    e.add_argument("--config", help="JSON config (default: desk config)")
    e.add_argument("--params", help=".npz of parameters (default: random init from --seed)")
    e.add_argument("--bag", required=True, help="bag file")
    e.add_argument("--scenario", type=int, choices=(1, 2, 3),
                   help="1 flattens a hierarchical bag before the forward pass")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_export)

    m = sub.add_parser("make-bag", help="write a random bag file")
    m.add_argument("--images", type=int, default=4, help="images (or instances of a flat bag)")
    m.add_argument("--patches", type=int, default=0, help="patches per image; 0 writes a flat bag")
    m.add_argument("--dim", type=int, default=64)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out")
    m.set_defaults(func=cmd_make_bag)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, bagio.BagFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, TrainingError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
