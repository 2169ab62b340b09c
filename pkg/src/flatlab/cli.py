"""Command-line entry point: ``flatlab <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import sys
import warnings
from pathlib import Path

from . import constructions as C
from .analysis import neuron_report
from .data import read_csv
from .harness import (CERT_COLUMNS, CONSTRUCTION_KINDS, build_construction, output_root,
                      parse_config, run_config, run_preset, summarize, sweep, verify_all,
                      write_certificates)
from .losses import LossKind
from .models import read_checkpoint, write_checkpoint
from .plotting import emit_plot
from .presets import PRESETS
from .sharpness import PreconditionWarning, SharpnessReport, sharpness_report


def _csv_out(header, rows, stream=None):
    w = csv.writer(stream or sys.stdout)
    w.writerow(header)
    for r in rows:
        w.writerow(r)


def cmd_construct(args):
    spec, params, ds, ev, metric = build_construction(args.kind, args.d, args.n, args.seed,
                                                      args.ln_eps, args.sbn_scale)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(spec, params, out)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PreconditionWarning)
        cert = C.certify(args.kind, spec, params, ds, ev, metric=metric)
    cert_path = out.with_suffix(".certificate.csv")
    write_certificates([cert], cert_path)
    if args.data_out:
        from .data import write_csv
        write_csv(ds, args.data_out)
    row = cert.csv_row()
    _csv_out(C.ConstructionCertificate.FIELDS, [[row[k] for k in C.ConstructionCertificate.FIELDS]])
    return 0


def cmd_verify(args):
    if args.checkpoint:
        if not args.data:
            print("verify --checkpoint needs --data", file=sys.stderr)
            return 2
        spec, params = read_checkpoint(args.checkpoint)
        ds = read_csv(args.data)
        loss = LossKind.parse(args.loss)
        rep = sharpness_report(spec, params, ds, loss, oracle=args.oracle, seed=args.seed)
        row = rep.csv_row()
        _csv_out(SharpnessReport.FIELDS, [[row[k] for k in SharpnessReport.FIELDS]])
        exact = "n/a" if rep.exact_trace is None else f"{rep.exact_trace:.8g}"
        tmin = "n/a" if rep.theoretical_min is None else f"{rep.theoretical_min:.8g}"
        print(f"# exact trace {exact}; {rep.oracle_kind} {rep.oracle_trace:.8g}"
              f" (se {rep.oracle_stderr:.3g}); minimum {tmin}; residual "
              f"{rep.interpolation_residual:.3g}", file=sys.stderr)
        return 0
    rows, ok = verify_all(args.d, args.n, args.seed)
    certs = [r.certificate for r in rows]
    if args.out:
        write_certificates(certs, args.out, [r.checked for r in rows], [r.passed for r in rows])
    table = []
    for r in rows:
        c = r.certificate.csv_row()
        table.append([c[k] for k in C.ConstructionCertificate.FIELDS] + [r.checked, r.passed])
    _csv_out(CERT_COLUMNS, table)
    print(f"# {'all checks passed' if ok else 'some checks FAILED'}", file=sys.stderr)
    return 0 if ok else 1


def _config_items(args):
    items = list(args.overrides)
    if args.config:
        items = Path(args.config).read_text().splitlines() + items
    return items


def cmd_train(args):
    cfg = parse_config(_config_items(args))
    out = Path(args.out) if args.out else (output_root() / (cfg.preset or "custom")
                                           / f"seed{cfg.seed}_scale{cfg.scale:g}")
    res = run_config(cfg, out)
    print(summarize(res))
    print(f"run directory: {out}")
    return 0


def cmd_report(args):
    spec, params = read_checkpoint(args.checkpoint)
    rep = neuron_report(params, args.top_k)
    if args.out:
        rep.write_csv(args.out)
    print(rep.summary(args.top_k))
    print(f"top-{args.top_k} head/tail ratio {rep.top_ratio(args.top_k):.4g}; "
          f"column ratio {rep.column_ratio():.4g}")
    return 0


def cmd_sweep(args):
    seeds = [int(s) for s in args.seeds.split(",")]
    results, index = sweep(args.preset, seeds, args.scale, args.workers, args.root)
    print(f"{len(results)} runs indexed in {index}")
    return 0


def cmd_preset(args):
    if args.action == "list":
        for p in PRESETS.values():
            stages = "; ".join(f"lr={s.lr:g} rho={s.rho:g} batch={'n' if s.batch is None else s.batch}"
                               f" wd={s.wd:g} epochs={s.epochs:g}" for s in p.stages)
            flag = " [interpreted]" if p.interpreted else ""
            detail = stages if stages else "construction only"
            print(f"{p.id:7s} {p.title}{flag}\n        {detail}")
        return 0
    if not args.id:
        print("preset run needs an id", file=sys.stderr)
        return 2
    res = run_preset(args.id, args.scale, args.seed, args.root)
    if res.config is not None:
        print(summarize(res))
    print(f"run directory: {res.directory}")
    return 0


def cmd_plot(args):
    emit_plot(args.csv, args.columns.split(","), args.out, log_y=args.log)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flatlab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("construct", help="build a closed-form interpolant and certify it")
    p.add_argument("--kind", required=True, choices=CONSTRUCTION_KINDS)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ln-eps", type=float, default=1.0)
    p.add_argument("--sbn-scale", type=float, default=100.0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--data-out", help="optional CSV for the training set")
    p.set_defaults(func=cmd_construct)

    p = sub.add_parser("verify", help="certificate table, or a sharpness report for a checkpoint")
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the certificate table here")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset CSV used with --checkpoint")
    p.add_argument("--loss", default="mse")
    p.add_argument("--oracle", default="full-fd", choices=("full-fd", "hutchinson"))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train from key=value config lines")
    p.add_argument("--config", help="config file with key=value lines")
    p.add_argument("--out", help="run directory")
    p.add_argument("overrides", nargs="*", help="extra key=value items")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="first-layer neuron report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--top-k", type=int, default=4)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="run one preset over several seeds")
    p.add_argument("--preset", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--scale", type=float, default=0.2)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--root")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("preset", help="list or run experiment presets")
    p.add_argument("action", choices=("list", "run"))
    p.add_argument("id", nargs="?")
    p.add_argument("--scale", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--root")
    p.set_defaults(func=cmd_preset)

    p = sub.add_parser("plot", help="SVG chart from a trajectory CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--columns", default="train_loss,test_loss")
    p.add_argument("--out", required=True)
    p.add_argument("--log", action="store_true", help="log-scale y axis")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
