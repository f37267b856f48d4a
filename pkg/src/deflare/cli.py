"""Command-line entry points: synth, train, eval, spectrum."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .metrics import spectrum_image
from .synthesis import FlareAsset, fit_square, make_sample, procedural_flare, procedural_scene
from .trainer import TrainingDiverged, evaluate, load_config, train

log = logging.getLogger("deflare")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def sample_seeds(seed: int, n: int) -> list[int]:
    """Independent per-index seeds, so sample i does not depend on n."""
    return [int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) for i in range(n)]


def _images(directory) -> list[Path]:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no images found in {directory}")
    return paths


def _square(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    s = min(h, w)
    y, x = (h - s) // 2, (w - s) // 2
    return image[y : y + s, x : x + s]


def _rgb(path) -> np.ndarray:
    img = ds.read_png(path)
    return np.repeat(img[..., None], 3, -1) if img.ndim == 2 else img


def load_flare_asset(path, kind: str = "scattering") -> FlareAsset:
    """A user flare image; the light source is its near-saturated core."""
    flare = _square(_rgb(path)).astype(np.float64)
    core = (flare.max(-1, keepdims=True) >= 0.9).astype(np.float64)
    return FlareAsset(flare, flare * core, kind)


def synth_command(n_samples: int, out_dir, seed: int = 0, resolution: int = 64, scenes=None, flares=None):
    """Write ``n_samples`` synthesized pairs in the dataset layout."""
    scene_paths = _images(scenes) if scenes else None
    flare_paths = _images(flares) if flares else None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, s in enumerate(sample_seeds(seed, n_samples)):
        rng = np.random.default_rng(s)
        scene_seed, flare_seed, pair_seed = (int(v) for v in rng.integers(0, 2**31, 3))
        if scene_paths:
            scene = fit_square(_square(_rgb(scene_paths[scene_seed % len(scene_paths)])).astype(np.float64), resolution)
        else:
            scene = procedural_scene(scene_seed, resolution)
        if flare_paths:
            asset = load_flare_asset(flare_paths[flare_seed % len(flare_paths)])
        else:
            asset = procedural_flare(flare_seed, resolution)
        written += ds.write_sample(out_dir, i, make_sample(scene, asset, pair_seed))
    return written


def spectrum_command(image_path, out_path) -> Path:
    """Write the centred log-amplitude spectrum of an image as an 8-bit grayscale PNG."""
    image = ds.read_png(image_path)
    out_path = Path(out_path)
    ds.write_png(out_path, spectrum_image(image))
    return out_path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deflare", description="Frequency-domain flare removal toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize a paired dataset")
    s.add_argument("--n", type=int, required=True, help="number of samples")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--scenes", help="directory of clean scene images (default: procedural)")
    s.add_argument("--flares", help="directory of flare images (default: procedural)")

    t = sub.add_parser("train", help="train on a dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--save-images", action="store_true")

    sp = sub.add_parser("spectrum", help="render an image's log-amplitude spectrum")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.command == "synth":
            synth_command(args.n, args.out, args.seed, args.size, args.scenes, args.flares)
            log.info("wrote %d samples to %s", args.n, args.out)
        elif args.command == "train":
            cfg = load_config(args.config)

            def progress(row):
                if row["iter"] % 50 == 0 or row["iter"] == 1:
                    log.info("iter %d  total %.5f  lr %.2e", row["iter"], row["total"], row["lr"])

            res = train(cfg, args.data, args.out, progress)
            log.info("checkpoint: %s", res.checkpoint_path)
        elif args.command == "eval":
            report = evaluate(args.ckpt, args.data, args.out, args.save_images)
            print(json.dumps(report["aggregate"], indent=2))
        elif args.command == "spectrum":
            spectrum_command(args.input, args.out)
    except TrainingDiverged as e:
        log.error("%s", e)
        return 3
    except (ds.DatasetError, ValueError) as e:
        log.error("error: %s", e)
        return 2
    except OSError as e:
        log.error("I/O error: %s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
