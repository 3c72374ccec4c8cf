"""Command-line entry point: ``neuraldemand <verb> [flags]``.

Exit status is 0 on success, 2 when some model/seed cells failed but the
remaining outputs were written, and 1 on error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .benchmarks import write_params_csv
from .dgp import SimConfig, generate_dataset, make_dgp
from .experiments import (
    MODEL_LABELS,
    ExperimentConfig,
    fit_model,
    load_config,
    prepare_dataset,
    run_experiment,
)
from .metrics import fit_metrics
from .neural import write_loss_history
from .nn.kernels import tune_allocator
from .panel import (
    build_panel,
    ingest_upc_csv,
    label_split,
    load_classification,
    read_panel,
    write_panel,
)

log = logging.getLogger("neuraldemand")

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2

SUITES = ("sim-suite", "habit-suite", "panel-suite")
VERB_KIND = {"profile-delta": "profile", "welfare": "welfare", "dashboard": "dashboard", "decompose": "decompose"}


def parse_seeds(text: str) -> tuple:
    """``"0,1,2"`` or ``"0-4"`` (inclusive) or a mix, e.g. ``"0-2,7"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"no seeds in {text!r}")
    return tuple(out)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="sectioned key/value config file")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--seeds", type=parse_seeds, help="seed list, e.g. 0-4 or 0,3,7")
    p.add_argument("--out", type=Path, help="output directory (nothing is written outside it)")
    p.add_argument("--desk-scale", action="store_true", help="epochs x 0.3 and at most three seeds")
    p.add_argument("--dgp", help="simulation DGP (ces, quasilinear, leontief, stone_geary, endogenous_ces, habit_ces)")
    p.add_argument("--model", action="append", help=f"model key, repeatable or comma separated ({', '.join(MODEL_LABELS)})")
    p.add_argument("--shock-good", type=int)
    p.add_argument("--shock-factor", type=float)
    p.add_argument("--epochs", type=int, help="override the training epochs")
    p.add_argument("--panel", type=Path, help="aggregated panel CSV (switches to panel mode)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neuraldemand", description="Neural demand estimation experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)
    sp = sub.add_parser("simulate", help="draw a simulated dataset and write it as a panel CSV")
    _common(sp)
    sp.add_argument("--n", type=int, help="observations")
    fp = sub.add_parser("fit", help="fit one model and save its parameters")
    _common(fp)
    ep = sub.add_parser("evaluate", help="multi-seed accuracy, elasticity and welfare tables")
    _common(ep)
    for verb in VERB_KIND:
        _common(sub.add_parser(verb, help=f"run the {VERB_KIND[verb]} experiment"))
    ip = sub.add_parser("ingest", help="aggregate UPC-level movement rows into a store-week panel")
    ip.add_argument("upc_csv", type=Path)
    ip.add_argument("--classification", type=Path, help="upc,class CSV overriding the file's class column")
    ip.add_argument("--split-week", type=int, default=None)
    ip.add_argument("--out", type=Path, default=Path("results"))
    ip.add_argument("--config", type=Path)
    ip.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def _models(arg) -> tuple:
    if not arg:
        return ()
    return tuple(m.strip() for a in arg for m in a.split(",") if m.strip())


def config_from_args(args, kind) -> ExperimentConfig:
    """Config file (if any) overlaid with command-line flags; ``kind=None`` keeps the file's kind."""
    seeds = (args.seed,) if args.seed is not None else args.seeds
    over = dict(
        kind=kind,
        seeds=seeds,
        out=None if args.out is None else str(args.out),
        dgp=args.dgp,
        models=_models(args.model) or None,
        shock_good=args.shock_good,
        shock_factor=args.shock_factor,
        epochs=args.epochs,
        panel_path=None if args.panel is None else str(args.panel),
        desk_scale=True if args.desk_scale else None,
    )
    if args.config is not None:
        return load_config(args.config, **over)
    return ExperimentConfig(**{k: v for k, v in over.items() if v is not None})


def _default_eval_kind(cfg: ExperimentConfig) -> str:
    if cfg.panel_path:
        return "panel-suite"
    if cfg.dgp == "habit_ces":
        return "habit-suite"
    return "sim-suite"


def cmd_simulate(args) -> int:
    cfg = config_from_args(args, "sim-suite").effective()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in cfg.seeds:
        data = generate_dataset(make_dgp(cfg.dgp), SimConfig(N=args.n or cfg.N, seed=s, shock_good=cfg.shock_good, shock_factor=cfg.shock_factor))
        path = out / f"sim_{cfg.dgp}_seed{s}.csv"
        write_panel(data, path)
        print(path)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = config_from_args(args, "sim-suite").effective()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    for s in cfg.seeds:
        if cfg.is_panel:
            panel = label_split(read_panel(cfg.panel_path), cfg.split_week)
            mask = panel.split == "train"
            train = prepare_dataset(panel, cfg, s, train_mask=mask).subset(np.flatnonzero(mask))
        else:
            raw = generate_dataset(make_dgp(cfg.dgp), SimConfig(N=cfg.N, seed=s))
            train = prepare_dataset(raw, cfg, s)
        for key in cfg.models:
            try:
                f = fit_model(key, train, cfg, s)
            except Exception as exc:  # noqa: BLE001
                log.error("%s seed %d failed: %s", key, s, exc)
                status = EXIT_PARTIAL
                continue
            stem = out / f"{key}_seed{s}"
            if hasattr(f.model, "to_json"):
                stem.with_suffix(".json").write_text(f.model.to_json(), encoding="utf-8")
                write_loss_history(f.extra["history"], out / f"loss_{key}_seed{s}.csv")
            else:
                write_params_csv([f.model], stem.with_suffix(".csv"))
            rmse, mae, kl = fit_metrics(f.predict(train), train.shares)
            print(f"{key} seed {s}: in-sample rmse={rmse:.6g} mae={mae:.6g} kl={kl:.6g}")
    return status


def _report(rep) -> int:
    for name, t in rep.tables.items():
        print(f"== {name}")
        print(t.to_markdown())
    for seed, model, msg in rep.failures:
        print(f"FAILED seed {seed} {model}: {msg}", file=sys.stderr)
    return EXIT_PARTIAL if rep.partial else EXIT_OK


def cmd_experiment(args) -> int:
    if args.verb == "evaluate":
        probe = config_from_args(args, None)
        explicit = args.config is not None and _config_sets(args.config, "kind")
        kind = probe.kind if explicit and probe.kind in SUITES else _default_eval_kind(probe)
    else:
        kind = VERB_KIND[args.verb]
    return _report(run_experiment(config_from_args(args, kind)))


def _config_sets(path: Path, key: str) -> bool:
    cp = configparser.ConfigParser()
    cp.read(path, encoding="utf-8")
    return any(cp.has_option(sec, key) for sec in cp.sections())


def cmd_ingest(args) -> int:
    cls = load_classification(args.classification) if args.classification else None
    rep = ingest_upc_csv(args.upc_csv, cls)
    split_week = args.split_week
    if split_week is None:
        split_week = load_config(args.config).split_week if args.config else ExperimentConfig().split_week
    panel = label_split(build_panel(rep.records), split_week)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "panel.csv"
    write_panel(panel, path)
    if rep.rejected:
        with open(args.out / "rejected_rows.csv", "w", encoding="utf-8") as fh:
            fh.write("line,reason\n")
            for line, reason in rep.rejected:
                fh.write(f'{line},"{reason}"\n')
    print(f"{len(rep.records)} records, {rep.dropped_unclassified} unclassified, {len(rep.rejected)} rejected; {len(panel)} store-weeks -> {path}")
    return EXIT_PARTIAL if rep.rejected else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    handler = {"simulate": cmd_simulate, "fit": cmd_fit, "ingest": cmd_ingest}.get(args.verb, cmd_experiment)
    try:
        return handler(args)
    except Exception as exc:  # noqa: BLE001 - report, do not dump a traceback on users
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
