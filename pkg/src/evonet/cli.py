"""``evonet`` command line: synth, evolve, train, denoise, metrics.

Exit codes: 0 success, 1 runtime or data failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, digest as model_digest, load_checkpoint, save_checkpoint
from .config import ConfigError, load_run_config
from .data import CubeFormatError, PatchSet, load_cube, save_cube, synth_cube
from .engine import FINAL, TrainingDivergedError, denoise_cube, evolve, final_train, stream
from .genome import dumps_genome, loads_genome, validate
from .metrics import report
from .pipeline import patch_quality, prepare_patches

log = logging.getLogger("evonet")


class CommandError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _run_log(out_dir: Path):
    """Timestamped run log kept apart from the deterministic artifacts."""
    handler = logging.FileHandler(out_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    cube = synth_cube(args.height, args.width, args.bands, np.random.default_rng(args.seed))
    try:
        save_cube(cube, args.out)
    except OSError as exc:
        raise CommandError(f"cannot write {args.out}: {exc}")


def cmd_evolve(args) -> None:
    rc = load_run_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = _run_log(out)
    try:
        log.info("evolve: config=%s seed=%d (%s) jobs=%d", args.config, rc.seed, rc.seed_source, args.jobs)
        try:
            train, evals, test = prepare_patches(rc)
        except (CubeFormatError, ValueError) as exc:
            raise CommandError(f"data preparation failed: {exc}")
        log.info("patches: train=%d eval=%d test=%d", len(train), len(evals), len(test))
        history, best = evolve(rc.evolution, train, evals, jobs=args.jobs,
                               progress=lambda g: log.info("generation %d best %.6g mean %.6g",
                                                           g["generation"], g["best_mse"], g["mean_mse"]))
        channels = train.clean.shape[-1]
        (out / "history.jsonl").write_text(history.to_jsonl())
        summary = history.summary()
        summary["run"] = rc.to_dict()
        summary["best_genome_digest"] = best.digest()
        _write_json(out / "summary.json", summary)
        (out / "best_genome.json").write_text(dumps_genome(best, rc.evolution.encoding, channels))
        _write_json(out / "config.json", rc.to_dict())
        log.info("best genome %s with %d blocks", best.digest(), len(best))
    finally:
        log.removeHandler(handler)
        handler.close()


def cmd_train(args) -> None:
    rc = load_run_config(args.config)
    try:
        genome, enc, genome_channels = loads_genome(Path(args.genome).read_text())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CommandError(f"cannot read genome {args.genome}: {exc}", 2)
    problems = validate(genome, enc)
    if problems:
        raise CommandError("invalid genome: " + "; ".join(problems))
    try:
        train, evals, test = prepare_patches(rc)
    except (CubeFormatError, ValueError) as exc:
        raise CommandError(f"data preparation failed: {exc}")
    channels = train.clean.shape[-1]
    if genome_channels is not None and genome_channels != channels:
        raise CommandError(f"genome was evolved for {genome_channels} bands but the configured "
                           f"data has {channels}; retrain with a matching cube")
    cfg = replace(rc.evolution, encoding=enc)
    try:
        result = final_train(genome, PatchSet.concat([train, evals]), cfg, stream(rc.seed, FINAL))
    except TrainingDivergedError as exc:
        raise CommandError(f"final training diverged: {exc}")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"genome": genome.to_dict(), "genome_digest": genome.digest(), "seed": rc.seed,
            "best_epoch": result.best_epoch}
    save_checkpoint(result.network, out, meta)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_mse", "holdout_mse"])
    for row in result.curve:
        writer.writerow([row["epoch"], repr(row["train_mse"]), repr(row["holdout_mse"])])
    out.with_suffix(".curve.csv").write_text(buf.getvalue())
    peak = load_cube(rc.cubes[0]).peak
    quality = patch_quality(result.network, test, peak=peak)
    quality.update(best_epoch=result.best_epoch, epochs=len(result.curve),
                   model_digest=model_digest(result.network))
    _write_json(out.with_suffix(".test.json"), quality)


def cmd_denoise(args) -> None:
    try:
        model, _ = load_checkpoint(args.model)
    except (OSError, CheckpointError) as exc:
        raise CommandError(f"cannot load model {args.model}: {exc}")
    try:
        cube = load_cube(args.input)
    except CubeFormatError as exc:
        raise CommandError(f"{args.input}: {exc}", 2)
    except OSError as exc:
        raise CommandError(f"cannot read {args.input}: {exc}")
    if cube.shape[2] != model.in_channels:
        raise CommandError(f"cube has {cube.shape[2]} bands, model expects {model.in_channels}")
    try:
        out = denoise_cube(model, cube, tile=args.tile, overlap=args.overlap)
    except ValueError as exc:
        raise CommandError(str(exc))
    try:
        save_cube(out, args.out)
    except OSError as exc:
        raise CommandError(f"cannot write {args.out}: {exc}")


def cmd_metrics(args) -> None:
    cubes = []
    for path in (args.clean, args.test):
        try:
            cubes.append(load_cube(path))
        except CubeFormatError as exc:
            raise CommandError(f"{path}: {exc}", 2)
        except OSError as exc:
            raise CommandError(f"cannot read {path}: {exc}")
    clean, test = cubes
    if clean.shape != test.shape:
        raise CommandError(f"shape mismatch {clean.shape} vs {test.shape}")
    try:
        result = report(clean, test, window=min(args.window, clean.shape[0], clean.shape[1]))
    except ValueError as exc:
        raise CommandError(str(exc))
    json.dump(result, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evonet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic HSC1 cube")
    s.add_argument("--out", required=True)
    s.add_argument("--height", type=positive_int, default=64)
    s.add_argument("--width", type=positive_int, default=64)
    s.add_argument("--bands", type=positive_int, default=8)
    s.add_argument("--seed", type=non_negative_int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("evolve", help="run the architecture search")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--jobs", type=positive_int, default=1,
                   help="parallel fitness evaluations; results do not depend on it")
    s.set_defaults(func=cmd_evolve)

    s = sub.add_parser("train", help="final training of an evolved genome")
    s.add_argument("--genome", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="checkpoint path; curve CSV and test report go alongside")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", help="denoise a whole cube with a trained checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tile", type=positive_int, default=32)
    s.add_argument("--overlap", type=non_negative_int, default=8)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("metrics", help="MPSNR / MSSIM / MERGAS between two cubes")
    s.add_argument("--clean", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--window", type=positive_int, default=8)
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"evonet {args.command}: {exc}", file=sys.stderr)
        return 2
    except CommandError as exc:
        print(f"evonet {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
