"""Noise-prediction training with min-SNR weighting and token dropout.

Checkpoints are single .npz files holding every parameter and optimizer
moment as a named float32 array, the RNG state, and a JSON config
snapshot, so an interrupted run resumes bit-identically.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .errors import CheckpointError, TrainingDivergence, ValidationError
from .schedule import NoiseSchedule, forward_noise, min_snr_weight
from .tokenizer import ParcelLinearMaps, apply_token_dropout
from .unet import BrainUNet, DenoiserConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    loss_parameterization: str = "noise-prediction"
    token_dropout: bool = True
    max_steps: Optional[int] = None
    checkpoint_every: Optional[int] = None
    adapter_only_after: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.loss_parameterization != "noise-prediction":
            raise ValidationError(f"unsupported loss parameterization {self.loss_parameterization!r}")


def training_step(
    model: BrainUNet,
    maps: ParcelLinearMaps,
    images: torch.Tensor,
    responses: torch.Tensor,
    sched: NoiseSchedule,
    generator: torch.Generator,
    token_dropout: bool = True,
    noise: Optional[torch.Tensor] = None,
    timesteps: Optional[torch.Tensor] = None,
    weight_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> tuple[torch.Tensor, dict]:
    """Min-SNR-weighted noise-prediction loss for one batch.

    ``noise``, ``timesteps`` and ``weight_fn`` are injectable for testing;
    by default noise and timesteps come from ``generator`` and the weight
    is the schedule's min-SNR rule.
    """
    b = images.shape[0]
    if timesteps is None:
        timesteps = torch.randint(0, sched.num_timesteps, (b,), generator=generator)
    if noise is None:
        noise = torch.randn(images.shape, generator=generator, dtype=images.dtype)
    t_np = timesteps.cpu().numpy()
    x_t = forward_noise(images, t_np, noise, sched)

    tokens = maps(responses)
    if token_dropout:
        tokens, _ = apply_token_dropout(tokens, generator=generator, training=True)
    eps_hat, _ = model(x_t, timesteps, tokens, capture=False)

    per_item = ((noise - eps_hat) ** 2).mean(dim=(1, 2, 3))
    weights = weight_fn(t_np) if weight_fn is not None else min_snr_weight(t_np, sched)
    w = torch.as_tensor(np.atleast_1d(weights), dtype=per_item.dtype)
    if w.numel() == 1:
        w = w.expand(b)
    loss = (w * per_item).mean()
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite training loss at timesteps {t_np.tolist()}")
    return loss, {"mean_weight": float(w.mean()), "timesteps": t_np}


def _named_parameters(model: BrainUNet, maps: ParcelLinearMaps) -> list[tuple[str, torch.nn.Parameter]]:
    named = [(f"model.{n}", p) for n, p in model.named_parameters()]
    named += [(f"maps.{n}", p) for n, p in maps.named_parameters()]
    return named


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:epoch:{epoch}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.permutation(n)


def save_checkpoint(
    path: str | Path,
    model: BrainUNet,
    maps: ParcelLinearMaps,
    sched: NoiseSchedule,
    train_config: TrainConfig,
    optimizer: Optional[torch.optim.Adam] = None,
    generator: Optional[torch.Generator] = None,
    epoch: int = 0,
    step: int = 0,
    step_in_epoch: int = 0,
    extra: Optional[dict] = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    named = _named_parameters(model, maps)
    for name, param in named:
        arrays[f"param.{name}"] = param.detach().cpu().numpy().astype(np.float32)
    if optimizer is not None:
        for group_idx, group in enumerate(optimizer.param_groups):
            for p_idx, param in enumerate(group["params"]):
                state = optimizer.state.get(param, {})
                if not state:
                    continue
                prefix = f"opt.{group_idx}.{p_idx}"
                arrays[f"{prefix}.step"] = np.array(float(state["step"]), dtype=np.float32)
                arrays[f"{prefix}.exp_avg"] = state["exp_avg"].cpu().numpy().astype(np.float32)
                arrays[f"{prefix}.exp_avg_sq"] = state["exp_avg_sq"].cpu().numpy().astype(np.float32)
    if generator is not None:
        arrays["rng_state"] = generator.get_state().numpy()
    meta = {
        "denoiser_config": dataclasses.asdict(model.config),
        "maps": {
            "num_parcels": maps.num_parcels,
            "v_max": maps.v_max,
            "token_dim": maps.token_dim,
            "shared": maps.shared,
            "bias": maps.bias is not None,
        },
        "schedule": {"alpha_bar_len": sched.num_timesteps, "gamma": sched.gamma},
        "train_config": dataclasses.asdict(train_config),
        "epoch": epoch,
        "step": step,
        "step_in_epoch": step_in_epoch,
        "extra": extra or {},
    }
    arrays["alpha_bar"] = sched.alpha_bar
    arrays["config_json"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)


@dataclass
class LoadedCheckpoint:
    model: BrainUNet
    maps: ParcelLinearMaps
    sched: NoiseSchedule
    train_config: TrainConfig
    epoch: int
    step: int
    step_in_epoch: int
    extra: dict
    optimizer_arrays: dict[str, np.ndarray]
    rng_state: Optional[np.ndarray]


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            if "config_json" not in data.files:
                raise CheckpointError(f"{path}: missing config snapshot")
            meta = json.loads(str(data["config_json"]))
            arrays = {k: data[k] for k in data.files if k != "config_json"}
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted checkpoint ({exc})") from exc

    model = BrainUNet(DenoiserConfig(**meta["denoiser_config"]))
    maps_meta = meta["maps"]
    maps = ParcelLinearMaps(
        num_parcels=maps_meta["num_parcels"],
        v_max=maps_meta["v_max"],
        token_dim=maps_meta["token_dim"],
        shared=maps_meta["shared"],
        bias=maps_meta["bias"],
    )
    named = dict(_named_parameters(model, maps))
    with torch.no_grad():
        for name, param in named.items():
            key = f"param.{name}"
            if key not in arrays:
                raise CheckpointError(f"{path}: missing parameter {name}")
            value = arrays[key]
            if tuple(value.shape) != tuple(param.shape):
                raise CheckpointError(f"{path}: parameter {name} has shape {value.shape}, expected {tuple(param.shape)}")
            param.copy_(torch.from_numpy(value))
    sched = NoiseSchedule(alpha_bar=arrays["alpha_bar"], gamma=meta["schedule"]["gamma"])
    return LoadedCheckpoint(
        model=model,
        maps=maps,
        sched=sched,
        train_config=TrainConfig(**meta["train_config"]),
        epoch=int(meta["epoch"]),
        step=int(meta["step"]),
        step_in_epoch=int(meta["step_in_epoch"]),
        extra=meta.get("extra", {}),
        optimizer_arrays={k: v for k, v in arrays.items() if k.startswith("opt.")},
        rng_state=arrays.get("rng_state"),
    )


def _restore_optimizer(optimizer: torch.optim.Adam, arrays: dict[str, np.ndarray]) -> None:
    for group_idx, group in enumerate(optimizer.param_groups):
        for p_idx, param in enumerate(group["params"]):
            prefix = f"opt.{group_idx}.{p_idx}"
            if f"{prefix}.exp_avg" not in arrays:
                continue
            optimizer.state[param] = {
                "step": torch.tensor(float(arrays[f"{prefix}.step"])),
                "exp_avg": torch.from_numpy(arrays[f"{prefix}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}.exp_avg_sq"].copy()),
            }


@dataclass
class TrainResult:
    checkpoint_path: Path
    loss_curve_path: Path
    losses: list[float]
    steps_run: int


def train(
    model: BrainUNet,
    maps: ParcelLinearMaps,
    images: np.ndarray,
    responses: np.ndarray,
    config: TrainConfig,
    sched: NoiseSchedule,
    out_dir: str | Path,
    resume_from: Optional[str | Path] = None,
    log_every: int = 0,
) -> TrainResult:
    """Run the training loop and persist checkpoint + loss curve.

    ``images`` is (n, C, H, W) in [-1, 1]; ``responses`` is (n, p, v_max).
    All randomness flows from one generator seeded by config.seed; the
    per-epoch shuffle uses a stream derived from (seed, epoch) so resuming
    mid-epoch reproduces the uninterrupted run exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = images.shape[0]
    if n == 0:
        raise ValidationError("dataset must be nonempty")
    if responses.shape[0] != n:
        raise ValidationError(f"{n} images but {responses.shape[0]} response rows")

    images_t = torch.from_numpy(np.asarray(images, dtype=np.float32))
    responses_t = torch.from_numpy(np.asarray(responses, dtype=np.float32))

    generator = torch.Generator().manual_seed(int(config.seed))
    named = _named_parameters(model, maps)
    optimizer = torch.optim.Adam([p for _, p in named], lr=config.learning_rate)

    start_epoch, start_step_in_epoch, global_step = 0, 0, 0
    losses: list[float] = []
    rows: list[tuple[int, float, float]] = []
    if resume_from is not None:
        loaded = load_checkpoint(resume_from)
        with torch.no_grad():
            for (name, param), (_, src) in zip(named, _named_parameters(loaded.model, loaded.maps)):
                param.copy_(src)
        _restore_optimizer(optimizer, loaded.optimizer_arrays)
        if loaded.rng_state is not None:
            generator.set_state(torch.from_numpy(loaded.rng_state.copy()))
        start_epoch, start_step_in_epoch = loaded.epoch, loaded.step_in_epoch
        global_step = loaded.step

    adapter_frozen = False

    def maybe_freeze_backbone(step: int):
        nonlocal adapter_frozen
        if config.adapter_only_after is None or adapter_frozen or step < config.adapter_only_after:
            return
        for name, param in model.named_parameters():
            if "attn" not in name:
                param.requires_grad_(False)
        adapter_frozen = True

    batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
    done = False
    epoch = start_epoch
    while epoch < config.epochs and not done:
        perm = _epoch_permutation(config.seed, epoch, n)
        first_batch = start_step_in_epoch if epoch == start_epoch else 0
        for b_idx in range(first_batch, batches_per_epoch):
            if config.max_steps is not None and global_step >= config.max_steps:
                done = True
                break
            maybe_freeze_backbone(global_step)
            idx = perm[b_idx * config.batch_size : (b_idx + 1) * config.batch_size]
            loss, stats = training_step(
                model,
                maps,
                images_t[idx],
                responses_t[idx],
                sched,
                generator,
                token_dropout=config.token_dropout,
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            global_step += 1
            loss_value = float(loss.detach())
            losses.append(loss_value)
            rows.append((global_step, loss_value, stats["mean_weight"]))
            if log_every and global_step % log_every == 0:
                print(f"step {global_step}: loss {loss_value:.5f}")
            if config.checkpoint_every and global_step % config.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"checkpoint_step{global_step:07d}.npz",
                    model, maps, sched, config, optimizer, generator,
                    epoch=epoch, step=global_step, step_in_epoch=b_idx + 1,
                )
        epoch += 1

    checkpoint_path = out_dir / "checkpoint.npz"
    save_checkpoint(
        checkpoint_path, model, maps, sched, config, optimizer, generator,
        epoch=epoch, step=global_step, step_in_epoch=0,
    )
    loss_curve_path = out_dir / "loss_curve.csv"
    with open(loss_curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "mean_weight"])
        writer.writerows([(s, f"{l:.8e}", f"{w:.8e}") for s, l, w in rows])
    return TrainResult(
        checkpoint_path=checkpoint_path,
        loss_curve_path=loss_curve_path,
        losses=losses,
        steps_run=global_step,
    )
