"""Optimisation protocol: replay buffers, LR schedule, the training step and loop."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch.utils.data import DataLoader

from .config import TrainConfig, from_flat
from .contrastive import patchnce_pair
from .errors import CheckpointError, NumericalError
from .imagedata import DatasetSpec, UnpairedDataset
from .networks import NetBundle, build_netbundle, light_forward
from .objectives import (
    LOSS_TERMS,
    gan_loss,
    identity_from_outputs,
    l1_mean,
    similarity_loss,
    total_objective,
)

log = logging.getLogger(__name__)

SWAP_PROBABILITY = 0.5
CHECKPOINT_MAGIC = b"DCLCKPT1"


def lr_at_epoch(e: float, cfg) -> float:
    """Constant for the first half of training, then linear decay to zero at ``cfg.epochs``."""
    total, lr0 = cfg.epochs, cfg.lr
    if not 0 <= e <= total:
        raise ValueError(f"epoch {e} outside [0, {total}]")
    half = total / 2
    if e <= half:
        return lr0
    return lr0 * (total - e) / half


class ImageBuffer:
    """Pool of past generated images fed to the discriminator.

    Until full, every image is stored and returned as is. Afterwards each
    query returns the new image with probability 1/2, or else swaps it for
    a uniformly chosen stored one and returns that.
    """

    def __init__(self, capacity: int = 50, seed: int = 0):
        self.capacity = capacity
        self.images: list[torch.Tensor] = []
        self.rng = random.Random(seed)

    def __len__(self) -> int:
        return len(self.images)

    def query_one(self, img: torch.Tensor) -> torch.Tensor:
        img = img.detach()
        if self.capacity == 0:
            return img
        if len(self.images) < self.capacity:
            self.images.append(img.clone())
            return img
        if self.rng.random() < SWAP_PROBABILITY:
            return img
        idx = self.rng.randrange(self.capacity)
        old = self.images[idx]
        self.images[idx] = img.clone()
        return old

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        """Batched :meth:`query_one`, image by image."""
        return torch.stack([self.query_one(im) for im in batch])

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "images": list(self.images), "rng": self.rng.getstate()}

    def load_state_dict(self, state: dict) -> None:
        self.capacity = state["capacity"]
        self.images = list(state["images"])
        self.rng.setstate(_as_tuple(state["rng"]))


def _as_tuple(x):
    return tuple(_as_tuple(v) for v in x) if isinstance(x, (list, tuple)) else x


def buffer_query(buf: ImageBuffer, img: torch.Tensor) -> torch.Tensor:
    return buf.query(img) if img.dim() == 4 else buf.query_one(img)


def _set_requires_grad(params, flag: bool) -> None:
    for p in params:
        p.requires_grad_(flag)


class Trainer:
    """Owns the networks, optimisers, buffers and step counter of one run."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg.validate()
        torch.manual_seed(cfg.seed)
        self.bundle: NetBundle = build_netbundle(cfg.mode, cfg.ablation, cfg.net, cfg.nce.tap_layers())
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.g_params = self.bundle.generator_side()
        self.d_params = self.bundle.discriminator_side()
        self.opt_G = torch.optim.Adam(self.g_params, lr=cfg.lr, betas=betas)
        self.opt_D = torch.optim.Adam(self.d_params, lr=cfg.lr, betas=betas)
        self.buf_X = ImageBuffer(cfg.buffer_capacity, seed=cfg.seed * 2 + 1)
        self.buf_Y = ImageBuffer(cfg.buffer_capacity, seed=cfg.seed * 2 + 2)
        self.global_step = 0
        self.epoch = 0

    # ---------------------------------------------------------------- schedule

    @property
    def lr(self) -> float:
        return self.opt_G.param_groups[0]["lr"]

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_G, self.opt_D):
            for group in opt.param_groups:
                group["lr"] = lr

    # -------------------------------------------------------------------- step

    def train_step(self, x: torch.Tensor, y: torch.Tensor) -> dict[str, float]:
        """One discriminator update followed by one generator-side update."""
        cfg, b = self.cfg, self.bundle
        if x.dim() == 3:
            x, y = x[None], y[None]
        flags, w = cfg.ablation, cfg.loss
        dual = b.F is not None
        layers = b.layers

        # (a) translations, with encoder taps of the real inputs for PatchNCE
        fake_y, taps_x = b.G(x, layers)
        fake_x, taps_y = b.F(y, layers) if dual else (None, None)

        # (b) discriminators, on real images and buffered fakes
        _set_requires_grad(self.d_params, True)
        self.opt_D.zero_grad(set_to_none=True)
        report: dict[str, float | None] = dict.fromkeys(LOSS_TERMS)
        d_y = gan_loss(b.D_Y(y), b.D_Y(buffer_query(self.buf_Y, fake_y)), "discriminator", w.gan_variant)
        d_loss = d_y
        report["d_Y"] = d_y.item()
        if dual:
            d_x = gan_loss(b.D_X(x), b.D_X(buffer_query(self.buf_X, fake_x)), "discriminator", w.gan_variant)
            d_loss = d_loss + d_x
            report["d_X"] = d_x.item()
        self._assert_finite(report)
        d_loss.backward()
        self.opt_D.step()

        # (c) generators, heads and light networks with discriminators frozen
        _set_requires_grad(self.d_params, False)
        self.opt_G.zero_grad(set_to_none=True)
        parts: dict[str, torch.Tensor] = {}
        parts["gan_G"] = gan_loss(None, b.D_Y(fake_y), "generator", w.gan_variant)
        if dual:
            parts["gan_F"] = gan_loss(None, b.D_X(fake_x), "generator", w.gan_variant)
        nce = patchnce_pair(
            x,
            y,
            b,
            cfg.nce.temperature,
            cfg.nce.num_patches,
            flags.external_negatives,
            fake_y=fake_y,
            fake_x=fake_x,
            taps_x=taps_x,
            taps_y=taps_y,
        )
        parts["nce_X"] = nce.loss_x
        if dual:
            parts["nce_Y"] = nce.loss_y
        idt_x = b.F(x) if dual else None
        parts["idt"] = identity_from_outputs(idt_x, x, b.G(y), y)
        if cfg.mode == "SimDCL":
            parts["sim"] = similarity_loss(
                light_forward(b.H_xr, nce.real_x),
                light_forward(b.H_xf, nce.fake_x),
                light_forward(b.H_yr, nce.real_y),
                light_forward(b.H_yf, nce.fake_y),
            )
        if flags.cycle_loss:
            # same as cycle_loss(G, F, x, y), reusing the translations
            parts["cycle"] = l1_mean(b.F(fake_y), x) + l1_mean(b.G(fake_x), y)
        total = total_objective(parts, w, cfg.mode, flags.cycle_loss, flags.single_direction)
        for k, v in parts.items():
            report[k] = v.item()
        report["total_G"] = total.item()
        self._assert_finite(report)
        total.backward()
        self.opt_G.step()
        _set_requires_grad(self.d_params, True)

        self.global_step += 1
        return {k: v for k, v in report.items() if v is not None}

    @staticmethod
    def _assert_finite(report) -> None:
        for k, v in report.items():
            if v is not None and not math.isfinite(v):
                raise NumericalError(f"non-finite loss term {k!r} = {v}")

    # ------------------------------------------------------------ checkpointing

    def state_dict(self) -> dict:
        params = {}
        for name, net in self.bundle.networks().items():
            for k, v in net.state_dict().items():
                params[f"{name}/{k}"] = v.detach().clone()
        return {
            "config": self.cfg.to_flat(),
            "fingerprint": self.cfg.fingerprint(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "params": params,
            "opt_G": self.opt_G.state_dict(),
            "opt_D": self.opt_D.state_dict(),
            "buffers": {"X": self.buf_X.state_dict(), "Y": self.buf_Y.state_dict()},
            "rng": {"torch": torch.get_rng_state()},
        }

    def load_state_dict(self, state: dict, force: bool = False) -> None:
        check_fingerprint(state, self.cfg, force)
        load_params(self.bundle, state["params"])
        self.opt_G.load_state_dict(state["opt_G"])
        self.opt_D.load_state_dict(state["opt_D"])
        self.buf_X.load_state_dict(state["buffers"]["X"])
        self.buf_Y.load_state_dict(state["buffers"]["Y"])
        torch.set_rng_state(state["rng"]["torch"])
        self.epoch = state["epoch"]
        self.global_step = state["global_step"]

    @classmethod
    def from_checkpoint(cls, path, force: bool = False) -> "Trainer":
        state = load_checkpoint(path)
        trainer = cls(from_flat(state["config"]))
        trainer.load_state_dict(state, force=force)
        return trainer


def train_step(trainer: Trainer, sample) -> dict[str, float]:
    return trainer.train_step(sample.x, sample.y)


def load_params(bundle: NetBundle, params: dict) -> None:
    for name, net in bundle.networks().items():
        prefix = name + "/"
        sub = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
        try:
            net.load_state_dict(sub, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"parameters for {name} do not match: {exc}") from exc


def check_fingerprint(state: dict, cfg: TrainConfig, force: bool = False) -> None:
    saved, current = state.get("fingerprint"), cfg.fingerprint()
    if saved != current:
        msg = (
            f"checkpoint was written for a different network configuration "
            f"(mode={state.get('config', {}).get('mode')}, fingerprint {saved} != {current})"
        )
        if not force:
            raise CheckpointError(msg)
        log.warning("%s; loading anyway (forced)", msg)


def save_checkpoint(state: dict, path) -> Path:
    """Write ``state`` atomically as magic + sha256 + torch payload."""
    buf = io.BytesIO()
    torch.save(state, buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).hexdigest().encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + digest + b"\n" + payload)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    head = len(CHECKPOINT_MAGIC)
    if raw[:head] != CHECKPOINT_MAGIC or raw[head + 64 : head + 65] != b"\n":
        raise CheckpointError(f"{path} is not a checkpoint file")
    digest, payload = raw[head : head + 64], raw[head + 65 :]
    if hashlib.sha256(payload).hexdigest().encode() != digest:
        raise CheckpointError(f"checksum mismatch in {path}; file is corrupt")
    return torch.load(io.BytesIO(payload), weights_only=False)


# ---------------------------------------------------------------------- loop


def collate(samples):
    x = torch.stack([s.x for s in samples])
    y = torch.stack([s.y for s in samples])
    return x, y


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_log: Path
    epochs: list[dict] = field(default_factory=list)
    trainer: Trainer | None = None


def _format(v) -> str:
    return "-" if v is None else repr(float(v))


def _truncate_log(path: Path, last_step: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    keep = [lines[0]] if lines else []
    keep += [l for l in lines[1:] if int(l.split("\t", 1)[0]) <= last_step]
    path.write_text("".join(keep))


def train(cfg: TrainConfig, run_dir, resume: bool = False, force: bool = False) -> TrainResult:
    """Run the full protocol, writing logs and checkpoints under ``run_dir``.

    ``run_dir/metrics.tsv`` gets one row per step, ``run_dir/epochs.tsv`` one
    per epoch, and checkpoints go to ``run_dir/checkpoints/epoch_<k>`` (every
    ``checkpoint_every`` epochs) and ``run_dir/checkpoints/latest``.
    """
    cfg.validate()
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    dir_x, dir_y = cfg.data.resolved_dirs()
    ds = UnpairedDataset(
        DatasetSpec(dir_x, dir_y, cfg.data.load_size, cfg.data.crop_size, cfg.data.flip, cfg.seed)
    )
    latest = ckpt_dir / "latest"
    if resume and latest.exists():
        trainer = Trainer.from_checkpoint(latest, force=force)
        if trainer.cfg.fingerprint() != cfg.fingerprint() and not force:
            raise CheckpointError("resume config differs structurally from the checkpoint")
        # run-length and I/O knobs follow the invocation, everything else the checkpoint
        trainer.cfg.max_steps = cfg.max_steps
        trainer.cfg.checkpoint_every = cfg.checkpoint_every
        trainer.cfg.data.workers = cfg.data.workers
        log.info("resumed from %s at step %d", latest, trainer.global_step)
    else:
        trainer = Trainer(cfg)
    cfg = trainer.cfg

    steps_per_epoch = math.ceil(len(ds) / cfg.batch_size)
    metrics = run_dir / "metrics.tsv"
    epochs_log = run_dir / "epochs.tsv"
    run_dir.mkdir(parents=True, exist_ok=True)
    header = ["step", "epoch", "lr", *LOSS_TERMS]
    _truncate_log(metrics, trainer.global_step)
    _truncate_log(epochs_log, trainer.global_step)
    if not metrics.exists():
        metrics.write_text("\t".join(header) + "\n")
    if not epochs_log.exists():
        epochs_log.write_text("\t".join(["step", "epoch", "lr", "seconds", *LOSS_TERMS]) + "\n")

    records: list[dict] = []
    start_epoch = trainer.global_step // steps_per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.max_steps is not None and trainer.global_step >= cfg.max_steps:
            break
        trainer.epoch = epoch
        trainer.set_lr(lr_at_epoch(epoch, cfg))
        first = trainer.global_step - epoch * steps_per_epoch
        ds.set_epoch(epoch)
        batches = [list(range(i * cfg.batch_size, min((i + 1) * cfg.batch_size, len(ds)))) for i in range(first, steps_per_epoch)]
        # private generator: creating the loader must not advance the global torch RNG
        loader_gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + epoch)
        loader = DataLoader(
            ds, batch_sampler=batches, num_workers=cfg.data.workers, collate_fn=collate, generator=loader_gen
        )
        t0 = time.time()
        sums: dict[str, float] = {}
        count = 0
        with open(metrics, "a", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for x, y in loader:
                report = trainer.train_step(x, y)
                writer.writerow(
                    [trainer.global_step, epoch, repr(trainer.lr)] + [_format(report.get(k)) for k in LOSS_TERMS]
                )
                for k, v in report.items():
                    sums[k] = sums.get(k, 0.0) + v
                count += 1
                if cfg.max_steps is not None and trainer.global_step >= cfg.max_steps:
                    break
        finished = trainer.global_step == (epoch + 1) * steps_per_epoch
        record = {"step": trainer.global_step, "epoch": epoch, "lr": trainer.lr, "seconds": time.time() - t0}
        record.update({k: s / max(count, 1) for k, s in sums.items()})
        records.append(record)
        with open(epochs_log, "a") as fh:
            row = [record["step"], epoch, repr(record["lr"]), f"{record['seconds']:.3f}"]
            fh.write("\t".join(map(str, row + [_format(record.get(k)) for k in LOSS_TERMS])) + "\n")
        if finished:
            trainer.epoch = epoch + 1
        _save(trainer, latest)
        if finished and (epoch + 1) % cfg.checkpoint_every == 0:
            _save(trainer, ckpt_dir / f"epoch_{epoch + 1}")
        log.info("epoch %d done: step %d, total_G %.4f", epoch, trainer.global_step, record.get("total_G", float("nan")))
    if not latest.exists():
        _save(trainer, latest)
    return TrainResult(latest, metrics, records, trainer)


def _save(trainer: Trainer, path: Path) -> None:
    try:
        save_checkpoint(trainer.state_dict(), path)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path} after step {trainer.global_step}: {exc}") from exc
