"""Command-line entry point: ``dclgan {train,translate,eval,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 data/checkpoint error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import ABLATIONS, TrainConfig, dump_config, load_config
from .errors import ConfigError, DataError, DCLError
from .evaluation import (
    COLLAPSE_THRESHOLD,
    collect_stats,
    diversity_score,
    frechet_distance,
    load_folder,
    random_projection_embedder,
    translate_folder,
)
from .imagedata import list_images

log = logging.getLogger("dclgan")

REPORT_COLUMNS = ("metric", "value", "n_real", "n_fake", "embedder", "checkpoint")
EMBEDDERS = {"randproj": random_projection_embedder}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _git_fingerprint() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).parent,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def _check_dataset(cfg: TrainConfig) -> None:
    for d in cfg.data.resolved_dirs():
        if not list_images(d):
            raise ConfigError(f"no PNG/JPEG images in {d}")


def _prepare_run_dir(run_dir: Path, resume: bool, force: bool) -> None:
    if run_dir.exists() and any(run_dir.iterdir()) and not (resume or force):
        raise ConfigError(f"run directory {run_dir} is not empty; pass --resume or --force")


def run_training(cfg: TrainConfig, run_dir: Path, resume: bool = False, force: bool = False, dry_run: bool = False) -> int:
    from .training import train

    _check_dataset(cfg)
    _prepare_run_dir(run_dir, resume, force)
    if dry_run:
        print(json.dumps({"run_dir": str(run_dir), **cfg.to_flat()}, indent=2, default=str))
        return 0
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.yaml")
    manifest = {
        "run_dir": str(run_dir),
        "config": cfg.to_flat(),
        "version": __version__,
        "git": _git_fingerprint(),
        "start": _now(),
        "end": None,
    }
    manifest_path = run_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, default=str))
    result = train(cfg, run_dir, resume=resume, force=force)
    manifest["end"] = _now()
    manifest["final_checkpoint"] = str(result.checkpoint)
    manifest_path.write_text(json.dumps(manifest, indent=2, default=str))
    print(f"finished: {result.checkpoint}")
    return 0


def _overrides(args) -> list[str]:
    sets = list(args.set or [])
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    return sets


def _default_run_dir(config_path, suffix: str = "") -> Path:
    stem = Path(config_path).stem if config_path else "run"
    return Path("runs") / f"{stem}{suffix}"


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    run_dir = Path(args.run_dir) if args.run_dir else _default_run_dir(args.config)
    return run_training(cfg, run_dir, args.resume, args.force, args.dry_run)


def cmd_ablate(args) -> int:
    if args.which not in ABLATIONS:
        raise ConfigError(f"unknown ablation {args.which!r}; choose from {', '.join(ABLATIONS)}")
    flag = ABLATIONS[args.which]
    cfg = load_config(args.config, _overrides(args) + [f"ablation.{flag}=true"])
    base = Path(args.run_dir) if args.run_dir else _default_run_dir(args.config)
    run_dir = base.with_name(f"{base.name}_ablation-{args.which}")
    return run_training(cfg, run_dir, args.resume, args.force, args.dry_run)


def cmd_translate(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    if not Path(args.input).is_dir():
        raise ConfigError(f"input directory not found: {args.input}")
    manifest = translate_folder(args.checkpoint, args.input, args.direction, args.out, args.size)
    print(f"translated {len(manifest)} images into {args.out}")
    return 0


def cmd_eval(args) -> int:
    if args.embedder not in EMBEDDERS:
        raise ConfigError(f"unknown embedder {args.embedder!r}")
    real = load_folder(args.real, args.size)
    fake = load_folder(args.fake, args.size)
    for name, imgs in (("real", real), ("fake", fake)):
        if len(imgs) < 2:
            raise DataError(f"{name} directory needs at least 2 images, found {len(imgs)}")
    emb = EMBEDDERS[args.embedder]()
    fd = frechet_distance(collect_stats(real, emb), collect_stats(fake, emb))
    div = diversity_score(fake)
    rows = [("FD (custom embedder)", fd), ("diversity", div)]
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    with open(report, "w") as fh:
        fh.write("\t".join(REPORT_COLUMNS) + "\n")
        for metric, value in rows:
            fh.write(f"{metric}\t{value!r}\t{len(real)}\t{len(fake)}\t{emb.name}\t{args.checkpoint_id}\n")
    print(f"FD (custom embedder, {emb.name}): {fd:.6g}")
    print(f"diversity: {div:.6g}")
    if div < COLLAPSE_THRESHOLD:
        print(
            f"WARNING: possible mode collapse: diversity {div:.3g} < threshold {COLLAPSE_THRESHOLD}",
            file=sys.stderr,
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--run-dir", default=None)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")

    p = argparse.ArgumentParser(prog="dclgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (
        ("train", cmd_train, "train a DCL / SimDCL model"),
        ("ablate", cmd_ablate, "train with one ablation (I-V) switched on"),
    ):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--config", default=None)
        sp.add_argument("--resume", action="store_true")
        sp.add_argument("--force", action="store_true")
        sp.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
        if name == "ablate":
            sp.add_argument("--which", required=True)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("translate", parents=[common], help="translate a folder of test images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--direction", default="XtoY", help="XtoY or YtoX")
    sp.add_argument("--out", required=True)
    sp.add_argument("--size", type=int, default=256)
    sp.set_defaults(func=cmd_translate)

    sp = sub.add_parser("eval", parents=[common], help="Fréchet distance and output diversity")
    sp.add_argument("--real", required=True)
    sp.add_argument("--fake", required=True)
    sp.add_argument("--embedder", default="randproj")
    sp.add_argument("--report", default="eval_report.tsv")
    sp.add_argument("--checkpoint-id", default="-")
    sp.add_argument("--size", type=int, default=256)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DCLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
