"""Teacher pretraining, student distillation training, and inference.

Both training loops are deterministic under a fixed config: batch order comes
from a numpy generator, crop/flip decisions from torch generators, and every
checkpoint stores the generator states needed to resume bit-compatibly on the
same hardware.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .histmatch import LutMapping, enhance
from .errors import ConfigError, NumericalError
from .imaging import UnpairedDataset, load_image, replicate_gray, save_image
from .losses import (
    LossWeights,
    adv_losses,
    content_loss,
    kd_loss,
    luma_t,
    perceptual_content_loss,
    total_loss,
)
from .networks import (
    build_discriminators,
    build_embedder,
    build_generator,
    build_teacher,
    load_checkpoint,
    save_checkpoint,
    state_checksum,
)

VARIANTS = ("full", "ablation1", "ablation2", "ablation3")


@dataclass
class TrainConfig:
    lr_initial: float = 1e-4
    epochs_flat: int = 200
    epochs_decay: int = 100
    batch_size: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    variant: str = "full"
    image_size: int = 256
    base_width: int = 64
    teacher_width: int = 32
    patch_count: int = 5
    patch_size: int = 64
    max_steps: int | None = None
    checkpoint_interval: int = 0
    sample_interval: int = 0
    flips: bool = False
    gan_global: str = "relativistic-lsgan"
    device: str = "cpu"

    def validate(self) -> None:
        if self.lr_initial <= 0:
            raise ConfigError("lr_initial must be positive")
        if self.epochs_flat < 0 or self.epochs_decay < 0 or self.epochs_flat + self.epochs_decay < 1:
            raise ConfigError("epoch counts must be non-negative and total at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.image_size % 16 != 0 or self.image_size < 32:
            raise ConfigError("image_size must be a multiple of 16 and >= 32")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1 when set")
        if self.device not in ("cpu", "accelerator"):
            raise ConfigError("device must be 'cpu' or 'accelerator'")

    def student_arch(self) -> str:
        return "eg-unet" if self.variant == "ablation3" else "resnet9"

    def effective_weights(self) -> LossWeights:
        # ablation1: no distillation, deep-feature content term at weight 1
        # ablation2: no distillation, pixel content term kept
        if self.variant == "ablation1":
            return LossWeights(lambda1=0.0, lambda2=1.0)
        if self.variant == "ablation2":
            return LossWeights(lambda1=0.0, lambda2=self.weights.lambda2)
        return self.weights

    def uses_perceptual_content(self) -> bool:
        return self.variant == "ablation1"


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Flat learning rate for the first phase, then linear decay that reaches
    exactly zero on the final epoch."""
    total = cfg.epochs_flat + cfg.epochs_decay
    if epoch < 0 or epoch >= total:
        raise ValueError(f"epoch {epoch} outside schedule range [0, {total})")
    if epoch < cfg.epochs_flat:
        return cfg.lr_initial
    return cfg.lr_initial * (1.0 - (epoch - cfg.epochs_flat + 1) / cfg.epochs_decay)


def _lr_for_step_epoch(epoch: int, cfg: TrainConfig) -> float:
    # Desk-scale runs can exceed the nominal schedule length; hold the final
    # decay value instead of erroring.
    total = cfg.epochs_flat + cfg.epochs_decay
    return lr_schedule(min(epoch, total - 1), cfg)


def _device_for(name: str) -> torch.device:
    if name == "accelerator":
        if not torch.cuda.is_available():
            raise ConfigError("device 'accelerator' requested but no accelerator is available")
        return torch.device("cuda")
    return torch.device("cpu")


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W) -> (1, H, W); (H, W, 3) -> (3, H, W); float32."""
    if img.ndim == 2:
        return torch.from_numpy(np.ascontiguousarray(img))[None]
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def to_image(t: torch.Tensor) -> np.ndarray:
    """(C, H, W) or (1, C, H, W) tensor -> float32 image array in [0, 1]."""
    if t.dim() == 4:
        t = t[0]
    arr = t.detach().cpu().clamp(0.0, 1.0).numpy()
    if arr.shape[0] == 1:
        return arr[0]
    return arr.transpose(1, 2, 0)


def _resize(t: torch.Tensor, size: int) -> torch.Tensor:
    if t.shape[-1] == size and t.shape[-2] == size:
        return t
    return F.interpolate(t[None], size=(size, size), mode="bilinear",
                         align_corners=False, antialias=True)[0]


def _load_bank(paths, size: int) -> torch.Tensor:
    if not paths:
        raise ValueError("empty image list")
    return torch.stack([_resize(to_tensor(load_image(p)), size) for p in paths])


def _maybe_flip(batch: torch.Tensor, gen: torch.Generator, enabled: bool) -> torch.Tensor:
    if not enabled:
        return batch
    if int(torch.randint(0, 2, (1,), generator=gen)):
        batch = torch.flip(batch, dims=[-1])
    if int(torch.randint(0, 2, (1,), generator=gen)):
        batch = torch.flip(batch, dims=[-2])
    return batch


class _Sampler:
    """Epoch-shuffled cyclic batch sampler with serializable state."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(n)
        self.pos = 0

    def next_batch(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": self.order.tolist(), "pos": self.pos}

    def load_state(self, s: dict) -> None:
        self.rng.bit_generator.state = s["rng"]
        self.order = np.asarray(s["order"], dtype=np.int64)
        self.pos = int(s["pos"])


def _write_run_manifest(out_dir: Path, kind: str, cfg: TrainConfig, extra: dict | None = None) -> None:
    meta = {
        "kind": kind,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        meta.update(extra)
    (out_dir / "run.json").write_text(json.dumps(meta, indent=2, default=str) + "\n")


def pretrain_teacher(bright_paths, cfg: TrainConfig, out_dir: str | Path,
                     manifest_extra: dict | None = None) -> Path:
    """Train the colorizer on self-synthesized (luma, color) pairs from the
    stained bright-field set under mean L1. Returns the checkpoint path."""
    cfg.validate()
    bright_paths = list(bright_paths)
    if not bright_paths:
        raise ValueError("bright set must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    dev = _device_for(cfg.device)
    torch.manual_seed(cfg.seed)
    teacher = build_teacher(cfg.seed, cfg.teacher_width).to(dev)
    opt = torch.optim.Adam(teacher.parameters(), lr=cfg.lr_initial,
                           betas=(cfg.adam_beta1, cfg.adam_beta2))

    bank = _load_bank(bright_paths, cfg.image_size).to(dev)
    sampler = _Sampler(len(bright_paths), cfg.batch_size, cfg.seed)
    aug_gen = torch.Generator().manual_seed(cfg.seed + 1)

    steps_per_epoch = max(1, len(bright_paths) // sampler.batch_size)
    total_epochs = cfg.epochs_flat + cfg.epochs_decay
    total_steps = cfg.max_steps if cfg.max_steps is not None else total_epochs * steps_per_epoch

    step_rows, epoch_l1 = [], []
    epoch = -1
    for step in range(total_steps):
        new_epoch = step // steps_per_epoch
        if new_epoch != epoch:
            if epoch >= 0:
                epoch_l1.append((epoch, float(np.mean([r[1] for r in step_rows[-steps_per_epoch:]]))))
            epoch = new_epoch
            lr = _lr_for_step_epoch(epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
        batch = _maybe_flip(bank[sampler.next_batch()], aug_gen, cfg.flips)
        target = batch
        gray = luma_t(target)
        pred = teacher(gray)
        loss = kd_loss(pred, target)
        if not torch.isfinite(loss):
            raise NumericalError(f"teacher L1 became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        step_rows.append((step, float(loss.detach())))
    if step_rows:
        tail = step_rows[-(len(step_rows) - epoch * steps_per_epoch):]
        epoch_l1.append((epoch, float(np.mean([r[1] for r in tail]))))

    with open(out_dir / "teacher_steps.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "l1"])
        w.writerows([(s, f"{v:.8f}") for s, v in step_rows])
    with open(out_dir / "teacher_epochs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_l1"])
        w.writerows([(e, f"{v:.8f}") for e, v in epoch_l1])

    ckpt_path = out_dir / "teacher.pt"
    save_checkpoint(
        ckpt_path,
        kind="teacher",
        states={"teacher": teacher.state_dict(), "optimizer": opt.state_dict()},
        meta={
            "arch_tag": teacher.arch_tag,
            "seed": cfg.seed,
            "config_hash": config_hash(cfg),
            "teacher_width": cfg.teacher_width,
            "steps": total_steps,
            "final_l1": step_rows[-1][1] if step_rows else None,
        },
    )
    _write_run_manifest(out_dir, "pretrain-teacher", cfg, manifest_extra)
    return ckpt_path


def load_teacher(path: str | Path):
    payload = load_checkpoint(path)
    if payload["kind"] != "teacher":
        raise ValueError(f"expected a teacher checkpoint, got kind={payload['kind']!r}")
    teacher = build_teacher(payload["meta"]["seed"], payload["meta"]["teacher_width"])
    teacher.load_state_dict(payload["states"]["teacher"])
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def load_student(path: str | Path):
    payload = load_checkpoint(path)
    if payload["kind"] != "student":
        raise ValueError(f"expected a student checkpoint, got kind={payload['kind']!r}")
    meta = payload["meta"]
    net = build_generator(meta["arch_tag"], meta["seed"], meta["base_width"])
    net.load_state_dict(payload["states"]["generator"])
    net.eval()
    return net


def train_student(
    data: UnpairedDataset,
    teacher_ckpt: str | Path,
    lut: LutMapping,
    cfg: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    manifest_extra: dict | None = None,
) -> Path:
    """Adversarial distillation of the staining generator.

    Each iteration enhances a dark batch through the fixed lookup table,
    queries the frozen teacher, then takes one critic step followed by one
    generator step on the hybrid objective. Writes a per-step loss CSV,
    optional sample grids, and a resumable checkpoint."""
    cfg.validate()
    data.validate_for_training()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    dev = _device_for(cfg.device)
    teacher = load_teacher(teacher_ckpt).to(dev)

    torch.manual_seed(cfg.seed)
    student = build_generator(cfg.student_arch(), cfg.seed, cfg.base_width).to(dev)
    critics = build_discriminators(cfg.patch_count, cfg.patch_size, cfg.seed + 1,
                                   base_width=cfg.base_width).to(dev)
    opt_g = torch.optim.Adam(student.parameters(), lr=cfg.lr_initial,
                             betas=(cfg.adam_beta1, cfg.adam_beta2))
    opt_d = torch.optim.Adam(critics.parameters(), lr=cfg.lr_initial,
                             betas=(cfg.adam_beta1, cfg.adam_beta2))

    # The lookup table is fixed before training; enhanced inputs are pure
    # functions of the dark images, so compute them once.
    z_bank = torch.stack([
        _resize(to_tensor(enhance(load_image(p), lut)), cfg.image_size) for p in data.dark_paths
    ]).to(dev)
    real_bank = _load_bank(data.bright_paths, cfg.image_size).to(dev)

    dark_sampler = _Sampler(len(data.dark_paths), cfg.batch_size, cfg.seed + 2)
    bright_sampler = _Sampler(len(data.bright_paths), cfg.batch_size, cfg.seed + 3)
    step_gen = torch.Generator().manual_seed(cfg.seed + 4)

    weights = cfg.effective_weights()
    embedder = build_embedder(cfg.seed).to(dev) if cfg.uses_perceptual_content() else None

    steps_per_epoch = max(1, len(data.dark_paths) // dark_sampler.batch_size)
    total_epochs = cfg.epochs_flat + cfg.epochs_decay
    total_steps = cfg.max_steps if cfg.max_steps is not None else total_epochs * steps_per_epoch

    start_step = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["kind"] != "student":
            raise ValueError("resume checkpoint is not a student checkpoint")
        student.load_state_dict(payload["states"]["generator"])
        critics.load_state_dict(payload["states"]["critics"])
        opt_g.load_state_dict(payload["states"]["opt_g"])
        opt_d.load_state_dict(payload["states"]["opt_d"])
        rng_state = payload["meta"]["rng"]
        dark_sampler.load_state(rng_state["dark"])
        bright_sampler.load_state(rng_state["bright"])
        step_gen.set_state(torch.tensor(rng_state["step_gen"], dtype=torch.uint8))
        start_step = payload["meta"]["step"] + 1

    def save_student(path: Path, step: int) -> None:
        save_checkpoint(
            path,
            kind="student",
            states={
                "generator": student.state_dict(),
                "critics": critics.state_dict(),
                "opt_g": opt_g.state_dict(),
                "opt_d": opt_d.state_dict(),
            },
            meta={
                "arch_tag": cfg.student_arch(),
                "seed": cfg.seed,
                "base_width": cfg.base_width,
                "config_hash": config_hash(cfg),
                "step": step,
                "epoch": step // steps_per_epoch,
                "rng": {
                    "dark": dark_sampler.state(),
                    "bright": bright_sampler.state(),
                    "step_gen": step_gen.get_state().tolist(),
                },
            },
        )

    loss_path = out_dir / "losses.csv"
    critic_path = out_dir / "critic_losses.csv"
    mode = "a" if resume_from is not None and loss_path.exists() else "w"
    loss_f = open(loss_path, mode, newline="")
    critic_f = open(critic_path, mode, newline="")
    loss_csv = csv.writer(loss_f)
    critic_csv = csv.writer(critic_f)
    if mode == "w":
        loss_csv.writerow(["step", "adv", "kd", "con", "total"])
        critic_csv.writerow(["step", "d_adv"])

    teacher_sum_before = state_checksum(teacher.state_dict())
    try:
        epoch = -1
        for step in range(start_step, total_steps):
            new_epoch = step // steps_per_epoch
            if new_epoch != epoch:
                epoch = new_epoch
                lr = _lr_for_step_epoch(epoch, cfg)
                for opt in (opt_g, opt_d):
                    for group in opt.param_groups:
                        group["lr"] = lr

            z = _maybe_flip(z_bank[dark_sampler.next_batch()], step_gen, cfg.flips)
            real = _maybe_flip(real_bank[bright_sampler.next_batch()], step_gen, cfg.flips)
            crop_seed = int(torch.randint(0, 2**31 - 1, (1,), generator=step_gen))

            with torch.no_grad():
                y_t = teacher(z)
            y = student(z)

            # critic step first, then the generator step on the updated critic
            _, d_adv = adv_losses(critics, real, y, crop_seed, cfg.gan_global)
            opt_d.zero_grad()
            d_adv.backward()
            opt_d.step()

            g_adv, _ = adv_losses(critics, real, y, crop_seed, cfg.gan_global)
            kd = kd_loss(y, y_t)
            if cfg.uses_perceptual_content():
                con = perceptual_content_loss(embedder, z, y)
            else:
                con = content_loss(z, y)
            # report excluded terms without building their graphs into total
            total = total_loss(g_adv, kd, con, weights)
            if not torch.isfinite(total):
                raise NumericalError(f"student objective became non-finite at step {step}")
            opt_g.zero_grad()
            total.backward()
            opt_g.step()

            loss_csv.writerow([step, f"{float(g_adv.detach()):.8f}", f"{float(kd.detach()):.8f}",
                               f"{float(con.detach()):.8f}", f"{float(total.detach()):.8f}"])
            critic_csv.writerow([step, f"{float(d_adv.detach()):.8f}"])

            if cfg.sample_interval and (step + 1) % cfg.sample_interval == 0:
                _write_sample_grid(out_dir / f"samples_step{step + 1:06d}.png", z, y_t, y, real)
            if cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                save_student(out_dir / f"student_step{step + 1:06d}.pt", step)
    finally:
        loss_f.close()
        critic_f.close()

    if state_checksum(teacher.state_dict()) != teacher_sum_before:
        raise NumericalError("teacher parameters changed during student training")

    ckpt_path = out_dir / "student.pt"
    save_student(ckpt_path, total_steps - 1)
    _write_run_manifest(out_dir, "train-student", cfg, manifest_extra)
    return ckpt_path


def _write_sample_grid(path: Path, z, y_t, y, real) -> None:
    rows = []
    n = min(4, z.shape[0])
    for i in range(n):
        tiles = [
            replicate_gray(to_image(z[i])),
            to_image(y_t[i]),
            to_image(y[i]),
            to_image(real[i % real.shape[0]]),
        ]
        rows.append(np.concatenate(tiles, axis=1))
    save_image(np.concatenate(rows, axis=0).astype(np.float32), path)


def stain(x: np.ndarray, lut: LutMapping, student, device: str = "cpu") -> np.ndarray:
    """Full pipeline on one dark-field image: enhance, then colorize with the
    trained student. Sizes that are not multiples of 4 are reflect-padded and
    cropped back, never rejected."""
    dev = _device_for(device)
    if isinstance(student, (str, Path)):
        student = load_student(student)
    student = student.to(dev)
    student.eval()
    z = enhance(x, lut)
    h, w = z.shape
    pad_h = (-h) % 4
    pad_w = (-w) % 4
    t = to_tensor(z)[None].to(dev)
    if pad_h or pad_w:
        t = F.pad(t, (0, pad_w, 0, pad_h), mode="reflect")
    with torch.no_grad():
        y = student(t)
    y = y[:, :, :h, :w]
    return to_image(y)
