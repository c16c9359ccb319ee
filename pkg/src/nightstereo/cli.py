"""Command-line entry point: ``nightstereo {train,infer,eval,synth,gradcheck}``.

Exit codes: 0 success, 1 user error (bad flags, config or input files), 2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__, config as config_mod, synth
from .config import RunConfig
from .diffmath import check_all
from .errors import ConfigurationError, NightStereoError, TrainingStepError
from .metrics import METRICS, LABELS, format_report, write_bins_csv
from .training import evaluate, infer, load_checkpoint, run_manifest, train

log = logging.getLogger("nightstereo")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
COMMANDS = ("train", "infer", "eval", "synth", "gradcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file; flags override its values")
    for f in fields(RunConfig):
        if f.name == "command":
            continue
        kind = {"int": int, "float": float, "str": str}[f.type]
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None,
                            help=f"default {f.default!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nightstereo", description="Self-supervised stereo matching toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on a dataset directory")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("infer", help="write disparity PFM/PNG and mask PNG per image")
    _add_config_flags(p)
    p.add_argument("--only", help="process a single item by name")

    p = sub.add_parser("eval", help="depth metrics table (TSV on stdout) plus CSVs")
    _add_config_flags(p)

    p = sub.add_parser("synth", help="generate a synthetic dataset from a scene spec file")
    p.add_argument("--spec", required=True, help="key=value scene spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--oracle-features", action="store_true", help="also write exact-correspondence features")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="directory for the manifest and result table")
    return parser


def _config(args, command: str) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if f.name != "command"}
    overrides["command"] = command
    return config_mod.resolve(args.config, overrides)


def _write_manifest(out: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text(run_manifest(cfg, extra))


def _require(value: str, flag: str) -> str:
    if not value:
        raise ConfigurationError(f"{flag} is required")
    return value


# ------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    cfg = _config(args, "train")
    root = Path(_require(cfg.dataset, "--dataset"))
    data = synth.load_dataset(root)
    items = list(data)
    out = Path(cfg.out)
    resume = Path(args.resume) if args.resume else None
    result = train(cfg, items, root=root, out=out, resume=resume)
    _write_manifest(out, cfg, {"items": len(items), "steps": result.state.step,
                               "skipped": len(data.skipped)})
    last = result.trace[-1] if result.trace else None
    print("step\ttotal\tphoto\treg\tsmooth")
    if last:
        print("\t".join([str(last["step"])] + [f"{last[k]:.6f}" for k in ("total", "photo", "reg", "smooth")]))
    return EXIT_OK


def _load_for_inference(args, command: str):
    """Checkpoint config as the base, then config file, then flags; model fields must still agree."""
    checkpoint = _require(args.checkpoint or "", "--checkpoint")
    model, ck_cfg, _ = load_checkpoint(checkpoint)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if f.name != "command"}
    cfg = config_mod.resolve(args.config, {**overrides, "command": command}, base=ck_cfg)
    load_checkpoint(checkpoint, expected=cfg)
    return cfg, Path(_require(cfg.dataset, "--dataset")), model


def cmd_infer(args) -> int:
    cfg, root, model = _load_for_inference(args, "infer")
    data = synth.load_dataset(root)
    out = Path(cfg.out)
    print("item\tpfm\tpng\tmask")
    written = 0
    for item in data:
        if args.only and item.name != args.only:
            continue
        paths = infer(model, item, out, root=root)
        print(f"{item.name}\t{paths['pfm']}\t{paths['png']}\t{paths['mask']}")
        written += 1
    if args.only and not written:
        raise ConfigurationError(f"no item named {args.only!r} in {root}")
    _write_manifest(out, cfg, {"items": written})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, root, model = _load_for_inference(args, "eval")
    data = synth.load_dataset(root)
    result = evaluate(model, list(data), cfg, root=root)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = result.report
    report.notes["epe_px"] = f"{result.epe:.6f}"
    sys.stdout.write(format_report(report))
    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "unweighted", "weighted"])
        for m in METRICS:
            writer.writerow([LABELS[m], f"{report.unweighted[m]:.6f}", f"{report.weighted[m]:.6f}"])
    write_bins_csv(report, out / "bins.csv")
    _write_manifest(out, cfg, {"images": result.images, "epe_px": f"{result.epe:.6f}"})
    return EXIT_OK


def cmd_synth(args) -> int:
    plan = synth.read_scene_plan(args.spec)
    items = synth.render_plan(plan)
    out = Path(args.out)
    synth.write_dataset(items, out, oracle=args.oracle_features)
    cfg = RunConfig(command="synth", height=plan.height, width=plan.width, seed=plan.seed, out=str(out))
    _write_manifest(out, cfg, {"scenes": len(items), "spec": Path(args.spec).name})
    print("item\tmin_disparity\tmax_disparity\tvalid_fraction")
    for it in items:
        d = it.disparity[it.valid]
        lo, hi = (f"{d.min():.3f}", f"{d.max():.3f}") if d.size else ("nan", "nan")
        print(f"{it.name}\t{lo}\t{hi}\t{it.valid.mean():.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = check_all(seed=args.seed)
    rows = [("op", "max_rel_error", "tolerance", "status")]
    for r in results:
        status = "pass" if r.passed else ("error: " + r.error if r.error else "fail")
        rows.append((r.op, f"{r.max_rel_error:.3e}", f"{r.tolerance:.0e}", status))
    text = "\n".join("\t".join(row) for row in rows) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        _write_manifest(out, RunConfig(command="gradcheck", seed=args.seed), {"ops": len(results)})
        (out / "gradcheck.tsv").write_text(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_USER


HANDLERS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "synth": cmd_synth,
            "gradcheck": cmd_gradcheck}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return HANDLERS[args.subcommand](args)
    except TrainingStepError as exc:
        print(f"training aborted: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_INTERNAL
    except (NightStereoError, FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - last-resort classification for the exit code
        log.exception("internal error")
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
