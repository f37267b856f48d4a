"""Training loop, checkpoints and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import dataset as ds
from .contrastive import ProjectionHead, ldg_loss, sample_patches
from .losses import LossWeights, total_loss
from .metrics import masked_psnr, psnr, ssim
from .network import DeflareNet, NetworkConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "total", "perceptual", "frequency", "ldg", "lr")
CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    batch_size: int = 2
    crop: int = 64
    total_iters: int = 500
    lr_halve_at: tuple[int, ...] | None = None  # default: 75% and 100% of total_iters
    seed: int = 0
    alpha: float = 2.0
    lam: float = 1.0
    tau: float = 0.07
    n_negatives: int = 16
    patch_size: int | None = None  # default: crop // 16
    proj_dim: int = 128
    stages: int = 2
    base_channels: int = 8
    n_filters: int = 4
    blocks_per_stage: int = 1
    ldgm_enabled: bool = True
    gdfg_enabled: bool = True

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr_halve_at is None:
            self.lr_halve_at = tuple(sorted({round(0.75 * self.total_iters), self.total_iters}))
        self.lr_halve_at = tuple(int(m) for m in self.lr_halve_at)
        if self.patch_size is None:
            self.patch_size = max(1, self.crop // 16)
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if any(b <= a for a, b in zip(self.lr_halve_at, self.lr_halve_at[1:])):
            raise ValueError(f"lr_halve_at must be strictly increasing, got {list(self.lr_halve_at)}")
        if self.batch_size < 1 or self.total_iters < 0:
            raise ValueError("batch_size must be >= 1 and total_iters >= 0")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        LossWeights(self.alpha, self.lam)
        self.network  # validates crop against stages

    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig(
            stages=self.stages,
            base_channels=self.base_channels,
            n_filters=self.n_filters,
            blocks_per_stage=self.blocks_per_stage,
            image_size=self.crop,
            gdfg=self.gdfg_enabled,
        )

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.lam)

    def lr_at(self, iteration: int) -> float:
        """Learning rate for 1-based ``iteration``: halved once per milestone passed."""
        passed = sum(1 for m in self.lr_halve_at if iteration > m)
        return self.lr * 0.5**passed

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["lr_halve_at"] = list(self.lr_halve_at)
        return d


# config file keys that differ from field names
_KEY_ALIASES = {"lambda": "lam"}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple) or default is None and "," in raw:
        return tuple(float(v) if "." in v or "e" in v.lower() else int(v) for v in raw.split(",") if v.strip())
    if isinstance(default, int) or default is None:
        return int(raw)
    return float(raw)


def parse_config(text: str) -> TrainConfig:
    """Parse a flat ``key = value`` document; unknown keys are errors."""
    defaults = TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        name = _KEY_ALIASES.get(key, key)
        if name not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        default = getattr(defaults, name)
        if name == "lr_halve_at":
            default = ()
        try:
            values[name] = _parse_value(raw, default)
        except ValueError as e:
            raise ValueError(f"line {lineno}: bad value for {key!r}: {e}") from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        key = {v_: k_ for k_, v_ in _KEY_ALIASES.items()}.get(k, k)
        if isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, list):
            v = ", ".join(repr(x) for x in v)
        else:
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, checkpoint_path):
        super().__init__(f"non-finite loss at iteration {iteration}; last good checkpoint: {checkpoint_path}")
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainResult:
    model: DeflareNet
    head: ProjectionHead | None
    log: list[dict]
    checkpoint: dict
    checkpoint_path: Path | None = None
    log_path: Path | None = None
    extras: dict = field(default_factory=dict)


@contextmanager
def single_threaded():
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(n)


def build_models(cfg: TrainConfig):
    torch.manual_seed(cfg.seed)
    model = DeflareNet(cfg.network)
    head = ProjectionHead(3, cfg.patch_size, cfg.proj_dim) if cfg.ldgm_enabled else None
    return model, head


def make_checkpoint(iteration, cfg, model, head, optimizer, rng) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "iteration": iteration,
        "config": cfg.to_dict(),
        "model": model.state_dict(),
        "head": head.state_dict() if head is not None else None,
        "optimizer": optimizer.state_dict(),
        "rng": {"numpy": rng.bit_generator.state, "torch": torch.get_rng_state()},
    }


def save_checkpoint(ckpt: dict, path) -> None:
    buf = io.BytesIO()
    torch.save(ckpt, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def config_from_checkpoint(ckpt: dict) -> TrainConfig:
    return TrainConfig(**ckpt["config"])


def model_from_checkpoint(ckpt: dict) -> DeflareNet:
    model = DeflareNet(config_from_checkpoint(ckpt).network)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model


def _batch(data: ds.PairedData, cfg: TrainConfig, rng: np.random.Generator):
    n = len(data)
    idx = rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
    h, w = data.size
    if (h, w) == (cfg.crop, cfg.crop):
        sl = [(0, 0)] * len(idx)
    elif h < cfg.crop or w < cfg.crop:
        raise ds.DatasetError(f"dataset images {h}x{w} are smaller than crop {cfg.crop}")
    else:
        sl = [(int(rng.integers(h - cfg.crop + 1)), int(rng.integers(w - cfg.crop + 1))) for _ in idx]

    def take(t):
        return torch.stack([t[i, ..., y : y + cfg.crop, x : x + cfg.crop] for i, (y, x) in zip(idx, sl)])

    return take(data.input), take(data.gt), take(data.flare), take(data.masks["light_source"])


def _ldg_term(cfg, head, restored, gt, light, rng):
    losses = []
    for b in range(restored.shape[0]):
        ps = sample_patches(
            restored[b], gt[b], light[b].numpy(), cfg.n_negatives, cfg.patch_size, seed=int(rng.integers(2**31))
        )
        losses.append(ldg_loss(ps, head, cfg.tau))
    return torch.stack(losses).mean()


def train(
    cfg: TrainConfig,
    data,
    out_dir=None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimize the network (and projection head) on a paired dataset.

    ``data`` is a dataset directory or an already loaded :class:`PairedData`.
    With ``out_dir`` the final checkpoint, the loss log CSV and the config are
    written there.
    """
    if not isinstance(data, ds.PairedData):
        data = ds.load(data)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    with single_threaded():
        model, head = build_models(cfg)
        rng = np.random.default_rng(cfg.seed)
        params = list(model.parameters()) + (list(head.parameters()) if head is not None else [])
        optimizer = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)
        weights = cfg.weights
        rows = []
        model.train()

        for it in range(1, cfg.total_iters + 1):
            lr = cfg.lr_at(it)
            for group in optimizer.param_groups:
                group["lr"] = lr
            inp, gt, flare_gt, light = _batch(data, cfg, rng)
            restored, flare = model(inp)
            ldg = _ldg_term(cfg, head, restored, gt, light, rng) if head is not None else torch.zeros(())
            loss, parts = total_loss(restored, flare, gt, flare_gt, ldg, weights)

            if not torch.isfinite(loss):
                # parameters have not been stepped yet: they are the last good state
                ckpt = make_checkpoint(it - 1, cfg, model, head, optimizer, rng)
                path = None
                if out_dir is not None:
                    path = out_dir / "last_good.pt"
                    save_checkpoint(ckpt, path)
                raise TrainingDiverged(it, path)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            row = {
                "iter": it,
                "total": loss.item(),
                "perceptual": parts["perceptual"].item(),
                "frequency": parts["frequency"].item(),
                "ldg": float(ldg.item()),
                "lr": lr,
            }
            rows.append(row)
            if progress is not None:
                progress(row)

        ckpt = make_checkpoint(cfg.total_iters, cfg, model, head, optimizer, rng)

    result = TrainResult(model, head, rows, ckpt)
    if out_dir is not None:
        result.checkpoint_path = out_dir / "checkpoint.pt"
        save_checkpoint(ckpt, result.checkpoint_path)
        result.log_path = out_dir / "loss_log.csv"
        write_loss_log(rows, result.log_path)
        (out_dir / "config.txt").write_text(format_config(cfg))
    model.eval()
    return result


def write_loss_log(rows, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow([r["iter"]] + [repr(float(r[k])) for k in LOG_COLUMNS[1:]])


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {k: (int(v) if k == "iter" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]


# ---------------------------------------------------------------------------
# evaluation


def padded_predictor(model: DeflareNet):
    """Wrap a model so inputs of any size are reflect-padded to a multiple of
    2**stages and the outputs cropped back and clamped to [0, 1]."""
    factor = 2**model.cfg.stages

    @torch.no_grad()
    def predict(x):
        h, w = x.shape[-2:]
        ph, pw = (-h) % factor, (-w) % factor
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        restored, _ = model(x)
        return restored[..., :h, :w].clamp(0.0, 1.0)

    predict.factor = factor
    return predict


def _hwc(t: torch.Tensor) -> np.ndarray:
    return t.permute(1, 2, 0).cpu().numpy().astype(np.float64)


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_model(predict, data, out_dir=None, save_images: bool = False, factor: int | None = None) -> dict:
    """Score ``predict`` (input batch -> restored batch) on every sample."""
    if not isinstance(data, ds.PairedData):
        data = ds.load(data)
    factor = factor or getattr(predict, "factor", 1)
    h, w = data.size
    padded_to = [h + (-h) % factor, w + (-w) % factor]

    per_image = []
    for i, name in enumerate(data.names):
        restored = predict(data.input[i : i + 1])[0].clamp(0.0, 1.0)
        pred, gt = _hwc(restored), _hwc(data.gt[i])
        masks = {k: data.masks[k][i].numpy() for k in data.masks}
        per_image.append(
            {
                "name": name,
                "psnr": psnr(pred, gt),
                "ssim": ssim(pred, gt),
                "g_psnr": masked_psnr(pred, gt, masks["glare"]),
                "s_psnr": masked_psnr(pred, gt, masks["streak"]),
            }
        )
        if save_images and out_dir is not None:
            img_dir = Path(out_dir) / "restored"
            img_dir.mkdir(parents=True, exist_ok=True)
            ds.write_png(img_dir / f"{name}.png", pred)

    keys = ("psnr", "ssim", "g_psnr", "s_psnr")
    report = {
        "n_images": len(per_image),
        "aggregate": {k: _mean(r[k] for r in per_image) for k in keys},
        "skipped_empty_mask": {k: sum(r[k] is None for r in per_image) for k in ("g_psnr", "s_psnr")},
        "padding": {"applied": padded_to != [h, w], "from": [h, w], "to": padded_to},
        "per_image": per_image,
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def evaluate(checkpoint, data, out_dir=None, save_images: bool = False) -> dict:
    ckpt = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    model = model_from_checkpoint(ckpt)
    with single_threaded():
        return evaluate_model(padded_predictor(model), data, out_dir, save_images)
