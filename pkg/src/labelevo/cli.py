"""Command line entry point: synth, train, sweep, pseudo-baseline, eval."""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as X, report, synth as S

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_IO = 0, 2, 3, 4


def _value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args):
    cfg = X.ExperimentConfig.load(args.config) if args.config else X.ExperimentConfig()
    for item in args.set or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise X.ConfigError(f"--set expects key=value, got {item!r}")
        if key.startswith("evolution.") and cfg.evolution is None:
            cfg = X.set_field(cfg, "evolution", X.desk_evolution(cfg))
        cfg = X.set_field(cfg, key, _value(val))
    if getattr(args, "epochs", None):
        cfg = X.set_field(cfg, "epochs", args.epochs)
    if getattr(args, "seed", None) is not None:
        cfg = X.set_field(cfg, "seed", args.seed)
    return cfg


def _with_lesps(cfg, mode):
    if mode == "off":
        return X.set_field(cfg, "evolution", None)
    if cfg.evolution is None:
        return X.set_field(cfg, "evolution", X.desk_evolution(cfg))
    return cfg


def cmd_synth(args):
    cfg = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    specs, scenes = X.make_scenes(cfg.scenes)
    for i, (spec, (img, gt, _)) in enumerate(zip(specs, scenes)):
        S.dump_scene(str(out / f"scene_{i:03d}"), spec, img, gt)
    print(f"wrote {len(specs)} scenes to {out}")


def cmd_train(args):
    cfg = _with_lesps(load_config(args), args.lesps)
    res = X.run_experiment(cfg, args.out)
    report.render(args.out)
    s = X.summarize(res)
    print(json.dumps(s, indent=2, sort_keys=True))


def cmd_sweep(args):
    cfg = _with_lesps(load_config(args), args.lesps)
    values = _value(args.values)
    if not isinstance(values, list):
        values = [_value(v) for v in str(args.values).split(",")]
    _, rows = X.sweep(cfg, args.axis, values, args.out)
    for v in values:
        report.render(Path(args.out) / f"{args.axis}={v}")
    for key in ("peak_iou_mean", "final_iou_mean", "area_at_peak_mean", "final_label_iou_median"):
        report.plots.plot_sweep(rows, key, Path(args.out) / f"summary_{key}.png", args.axis)
    X.write_csv(sys.stdout, ("value", "peak_iou_mean", "final_iou_mean", "area_at_peak_mean",
                             "final_label_iou_median"), rows)


def cmd_pseudo(args):
    cfg = X.set_field(load_config(args), "evolution", None)
    taus = [float(t) for t in args.tau.split(",")]
    _, rows = X.sweep(cfg, "pseudo_threshold", taus, args.out)
    for t in taus:
        report.render(Path(args.out) / f"pseudo_threshold={t}")
    X.write_csv(sys.stdout, ("value", "final_iou_mean", "final_iou_median"), rows)


def cmd_eval(args):
    rows = report.render(args.run)
    X.write_csv(sys.stdout, report.SCENE_FIELDS, rows)


def build_parser():
    p = argparse.ArgumentParser(prog="labelevo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a dotted config field, value parsed as JSON")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("synth", help="write seeded scenes as PGM plus JSON sidecars")
    common(sp)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="one training run, with or without label evolution")
    common(sp)
    sp.add_argument("--lesps", choices=("on", "off"), default="on")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sweep", help="one run per value of a config field")
    common(sp)
    sp.add_argument("--axis", required=True, help="dotted field, e.g. scenes.target.radius")
    sp.add_argument("--values", required=True, help="JSON list or comma-separated values")
    sp.add_argument("--lesps", choices=("on", "off"), default="off")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("pseudo-baseline", help="train on fixed intensity-threshold labels")
    common(sp)
    sp.add_argument("--tau", default="0.3,0.5,0.7")
    sp.set_defaults(fn=cmd_pseudo)

    sp = sub.add_parser("eval", help="render figures and a per-scene CSV for a run directory")
    sp.add_argument("run")
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (X.ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except X.ExperimentError as exc:
        where = f" (epoch {exc.epoch})" if exc.epoch is not None else ""
        print(f"run failed{where}: {exc}", file=sys.stderr)
        return EXIT_RUN
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
