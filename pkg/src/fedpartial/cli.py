"""Command line driver.

    fedpartial gen-data        write the synthetic sites to disk
    fedpartial train           --mode federated | central | local:<site>
    fedpartial adapt           --checkpoint CKPT [--mode FTB] [--site ID ...]
    fedpartial eval            --checkpoint CKPT [CKPT ...] | --ground-truth
    fedpartial ablate-losses   central models over loss combinations
    fedpartial ablate-schedule federated models over schedule splits

Shared flags: --config PATH, --out DIR, --seed INT, --threads INT.
Exit codes: 0 success, 2 configuration error, 3 runtime or data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import evaluation, pipeline, segnet, synthdata
from .pipeline import ConfigError, DataError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("fedpartial")


def _common(p):
    p.add_argument("--config", type=Path, help="experiment JSON (defaults for every missing field)")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="override the top-level seed")
    p.add_argument("--threads", type=int, default=1, help="parallel clients per round")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpartial", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic sites")
    _common(p)

    p = sub.add_parser("train", help="train a federated, central or site-local model")
    _common(p)
    p.add_argument("--mode", required=True, help="federated | central | local:<site>")

    p = sub.add_parser("adapt", help="fine-tune a federated checkpoint per site")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=["FTA", "FTB", "FTC"], help="overrides adapt.mode")
    p.add_argument("--site", action="append", help="restrict to these sites (repeatable)")

    p = sub.add_parser("eval", help="score checkpoints per site and organ")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path, nargs="+")
    src.add_argument("--ground-truth", action="store_true", help="score the reference masks themselves")
    p.add_argument("--split", choices=["train", "test"], help="overrides eval.splits")
    p.add_argument("--report", default="report.csv", help="CSV file name inside the output directory")

    p = sub.add_parser("ablate-losses", help="central models over loss combinations")
    _common(p)
    p = sub.add_parser("ablate-schedule", help="federated models over schedule splits")
    _common(p)
    return parser


def _out_dir(args, cfg) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args, cfg, out: Path) -> int:
    root = Path(cfg.data.root) if cfg.data.root else out / "data"
    sites = pipeline.generate_sites(cfg)
    synthdata.save_benchmark(sites, root)
    for s in sites:
        labeled = ",".join(s.scheme.space.class_names[c] for c in sorted(s.scheme.labeled_foreground))
        print(f"{s.site_id}: train={len(s.train)} test={len(s.test)} labeled={labeled} "
              f"shift={s.spec.intensity_shift:+.2f} noise={s.spec.noise_sigma:.2f} deform={s.spec.deform_amp:.1f}")
    print(f"wrote {len(sites)} sites to {root}")
    return EXIT_OK


def cmd_train(args, cfg, out: Path) -> int:
    sites = pipeline.load_sites(cfg)
    mode = args.mode
    if not (mode in ("federated", "central") or mode.startswith("local:")):
        raise ConfigError("--mode", f"expected federated, central or local:<site>, got {mode!r}")
    if mode.startswith("local:") and mode[6:] not in {s.site_id for s in sites}:
        raise ConfigError("--mode", f"unknown site {mode[6:]!r}")
    name, res, secs = pipeline.train(cfg, sites, mode, threads=args.threads)
    meta = {"experiment": name, "mode": mode, "seed": cfg.seed}
    if mode.startswith("local:"):
        meta["site"] = mode[6:]
    ckpt = out / f"{name}.ckpt"
    segnet.save_checkpoint(ckpt, res.params, meta)
    pipeline.write_trace(res.trace, out / f"{name}_trace.csv")
    last = res.trace[-1][2] if res.trace else float("nan")
    print(f"trained {name} in {secs:.1f}s, final mean loss {last:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return segnet.load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None


def cmd_adapt(args, cfg, out: Path) -> int:
    params, _ = _load_ckpt(args.checkpoint)
    if params.spec != cfg.net:
        log.warning("checkpoint network %s differs from config %s; using the checkpoint's", params.spec, cfg.net)
    sites = pipeline.load_sites(cfg)
    if args.site:
        cfg = replace(cfg, adapt=replace(cfg.adapt, sites=args.site))
    mode = args.mode or cfg.adapt.mode
    adapted = pipeline.adapt_sites(cfg, params, sites, mode)
    for site_id, p in adapted.items():
        path = out / f"{site_id}_{mode}.ckpt"
        segnet.save_checkpoint(path, p, {"experiment": f"{site_id}_{mode}", "mode": mode, "site": site_id,
                                         "seed": cfg.seed, "source": args.checkpoint.name})
        print(f"adapted {site_id} ({mode}, {cfg.adapt.epochs} epochs) -> {path}")
    return EXIT_OK


def cmd_eval(args, cfg, out: Path) -> int:
    sites = pipeline.select_sites(pipeline.load_sites(cfg), cfg.eval.sites)
    splits = [args.split] if args.split else list(cfg.eval.splits)
    rows = []
    for split in splits:
        if args.ground_truth:
            rows += pipeline.evaluate_ground_truth(sites, split)
            continue
        for path in args.checkpoint:
            params, meta = _load_ckpt(path)
            targets = sites
            if meta.get("site"):
                # site-specific models (local or adapted) are scored on their own site only
                targets = [s for s in sites if s.site_id == meta["site"]]
            rows += pipeline.evaluate(params, targets, split, meta.get("experiment", Path(path).stem))
    report = out / args.report
    evaluation.write_report_csv(rows, report)
    print(evaluation.format_table(rows))
    print(f"report written to {report}")
    return EXIT_OK


def _report_ablation(rows, out: Path, name: str) -> int:
    evaluation.write_report_csv(rows, out / f"{name}.csv")
    print(evaluation.format_table(rows))
    print()
    header = f"{'experiment':<28}{'mean DC':>9}{'mean HD95':>11}{'time(s)':>9}"
    print(header)
    for exp in dict.fromkeys(r.experiment for r in rows):
        sub = [r for r in rows if r.experiment == exp]
        h = evaluation.mean_hd95(sub)
        print(f"{exp:<28}{evaluation.mean_dc(sub):>9.3f}{'undef' if h is None else f'{h:.2f}':>11}"
              f"{sub[0].wall_time_s:>9.1f}")
    print(f"report written to {out / (name + '.csv')}")
    return EXIT_OK


def cmd_ablate_losses(args, cfg, out: Path) -> int:
    return _report_ablation(pipeline.ablate_losses(cfg, pipeline.load_sites(cfg)), out, "ablate_losses")


def cmd_ablate_schedule(args, cfg, out: Path) -> int:
    rows = pipeline.ablate_schedule(cfg, pipeline.load_sites(cfg), threads=args.threads)
    return _report_ablation(rows, out, "ablate_schedule")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "ablate-losses": cmd_ablate_losses,
    "ablate-schedule": cmd_ablate_schedule,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        cfg = pipeline.load_config(args.config, seed=args.seed)
        out = _out_dir(args, cfg)
        written = pipeline.write_resolved_config(cfg, out)
        log.info("resolved config written to %s", written)
        # one BLAS thread: results must not depend on the thread layout
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
