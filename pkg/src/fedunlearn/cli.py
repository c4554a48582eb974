"""Command line: ``run``, ``gen-data`` and ``compare``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from .datagen import default_generator, generate_domain, write_dataset
from .errors import ConfigError, NumericError
from .experiment import (SCENARIOS, ExperimentConfig, dumps_metrics, parse_config, read_metrics,
                         simulate, summarize)
from .numerics import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _config(args) -> ExperimentConfig:
    """Config file, then ``--set`` lines (later lines win), then the dedicated flags."""
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    text += "\n" + "\n".join(args.set or [])
    return parse_config(text, scenario=getattr(args, "scenario", None), seed=args.seed)


def cmd_run(args) -> int:
    cfg = _config(args)
    fmt = args.format or cfg.format
    out = args.out or cfg.output
    res = simulate(cfg)
    text = dumps_metrics(res.records, fmt)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    for key, val in summarize(res.records).items():
        print(f"{key:>20} {val:.6g}" if isinstance(val, float) else f"{key:>20} {val}", file=sys.stderr)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    spec = default_generator(cfg.num_classes, cfg.margin, cfg.sigma_c, cfg.sigma_s, cfg.rhos,
                             cfg.offset_scale, seed=cfg.seed, offset_style=cfg.offset_style)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = cfg.samples_per_client * cfg.clients_per_domain
    for d in spec.domains:
        ds = generate_domain(spec, d, n, RngStream(cfg.seed, (d.domain_id, 0, "data")))
        path = out / f"domain{d.domain_id}.txt"
        write_dataset(path, ds, cfg.num_classes)
        print(f"wrote {path} ({len(ds)} rows, rho={d.rho:g})", file=sys.stderr)
    return EXIT_OK


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4g}"
    return str(v)


def cmd_compare(args) -> int:
    try:
        a, b = summarize(read_metrics(args.a)), summarize(read_metrics(args.b))
    except (ValueError, KeyError) as exc:
        raise OSError(f"cannot parse metric log: {exc}") from exc
    keys = [k for k in a if k in b] + [k for k in b if k not in a]
    rows = [("metric", Path(args.a).name, Path(args.b).name, "delta")]
    for k in keys:
        va, vb = a.get(k, float("nan")), b.get(k, float("nan"))
        rows.append((k, _fmt(va), _fmt(vb), _fmt(vb - va)))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    for r in rows:
        print("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedunlearn", description="Federated unlearning simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int)

    run = sub.add_parser("run", help="run an experiment and emit the metric log")
    common(run)
    run.add_argument("--scenario", choices=SCENARIOS)
    run.add_argument("--out", help="metric log path (stdout when omitted)")
    run.add_argument("--format", choices=("csv", "jsonl"))
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen-data", help="write the per-domain synthetic datasets")
    common(gen)
    gen.add_argument("--out-dir", required=True)
    gen.set_defaults(func=cmd_gen_data)

    cmp_ = sub.add_parser("compare", help="summarise two metric logs side by side")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
