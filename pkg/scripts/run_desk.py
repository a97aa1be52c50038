"""Desk-scale end-to-end run through the CLI: synth, evolve, train, denoise, metrics.

    python scripts/run_desk.py --out runs/desk --seeds 0 1 2

Each seed gets its own synthetic cube and output directory. The script prints
the test-patch MPSNR of the noisy input and of the trained network.
"""

import argparse
import json
import time
from pathlib import Path

from evonet.cli import main as evonet

CONFIG = """profile = "desk"
seed = {seed}

[noise]
sigma = {sigma}

[data]
cubes = ["cube.hsc"]
patch_size = 16
stride = 8
"""


def run(out: Path, seed: int, sigma: float, jobs: int) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    cube = out / "cube.hsc"
    config = out / "desk.toml"
    config.write_text(CONFIG.format(seed=seed, sigma=sigma))
    start = time.perf_counter()
    steps = [
        ["synth", "--out", str(cube), "--height", "64", "--width", "64", "--bands", "8", "--seed", str(seed)],
        ["evolve", "--config", str(config), "--out-dir", str(out / "evolve"), "--jobs", str(jobs)],
        ["train", "--genome", str(out / "evolve" / "best_genome.json"), "--config", str(config),
         "--out", str(out / "model.evnc")],
        ["denoise", "--model", str(out / "model.evnc"), "--in", str(cube), "--out", str(out / "denoised.hsc")],
    ]
    for argv in steps:
        code = evonet(argv)
        if code != 0:
            raise SystemExit(f"evonet {argv[0]} failed with exit code {code}")
    quality = json.loads((out / "model.test.json").read_text())
    quality["seconds"] = round(time.perf_counter() - start, 1)
    return quality


def cli() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    for seed in args.seeds:
        q = run(Path(args.out) / f"seed{seed}", seed, args.sigma, args.jobs)
        gain = q["denoised_mpsnr"] - q["noisy_mpsnr"]
        print(f"seed {seed}: noisy {q['noisy_mpsnr']:.2f} dB, denoised {q['denoised_mpsnr']:.2f} dB, "
              f"gain {gain:+.2f} dB, best epoch {q['best_epoch']}, {q['seconds']} s", flush=True)


if __name__ == "__main__":
    cli()
