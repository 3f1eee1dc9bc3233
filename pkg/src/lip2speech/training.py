"""Training objective, optimizer schedule, checkpoints and the training loop."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import Example, collate
from .model import AblationFlags, Batch, DecoderOutput, Lip2Speech, ModelConfig
from .providers import StubTimbreEncoder

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lip2speech-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    mel: float = 100.0
    pitch: float = 0.1
    energy: float = 0.1
    unit: float = 0.01
    label_smoothing: float = 0.1

    def __post_init__(self):
        if min(self.mel, self.pitch, self.energy, self.unit) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label smoothing must be in [0, 1)")


@dataclass
class LossBreakdown:
    l_m: torch.Tensor
    l_p: torch.Tensor
    l_e: torch.Tensor
    l_u: torch.Tensor
    l_total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    steps_per_epoch: int | None = None
    warmup_steps: int = 1000
    lr_decay_every: int = 20
    lr_decay: float = 0.5
    betas: tuple[float, float] = (0.9, 0.98)
    grad_clip: float = 1.0
    flags: AblationFlags = field(default_factory=AblationFlags)


def weighted_total(l_m, l_p, l_e, l_u, weights: LossWeights):
    return weights.mel * l_m + weights.pitch * l_p + weights.energy * l_e + weights.unit * l_u


def smoothed_cross_entropy(logits: torch.Tensor, target: torch.Tensor, alpha: float) -> torch.Tensor:
    """Mean over rows of -sum_k q_k log p_k with q = (1 - alpha) * onehot + alpha / K."""
    logp = torch.log_softmax(logits, dim=-1)
    k = logits.shape[-1]
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    uniform = -logp.sum(-1) / k
    return ((1.0 - alpha) * nll + alpha * uniform).mean()


def _masked_l1(pred, target, valid):
    if valid.sum() == 0:
        return pred.new_zeros(())
    return (pred - target).abs()[valid].mean()


def compute_loss(output: DecoderOutput, batch: Batch, weights: LossWeights,
                 flags: AblationFlags = AblationFlags()) -> LossBreakdown:
    """Weighted sum of mel, pitch, energy and unit losses.

    The mel term averages the L1 of the fine and coarse mels.  Terms for
    ablated heads are exactly zero.
    """
    t_mel = output.mel_fine.shape[1]
    t_v = output.pitch_pred.shape[1]
    if batch.mel is None or batch.mel.shape[1] < t_mel:
        raise ValueError("mel target missing or shorter than the prediction")
    mel_valid = ~output.mel_pad_mask
    target = batch.mel[:, :t_mel]
    if target.shape != output.mel_fine.shape:
        raise ValueError(f"mel target shape {tuple(target.shape)} != prediction {tuple(output.mel_fine.shape)}")
    l_m = 0.5 * (_masked_l1(output.mel_fine, target, mel_valid) + _masked_l1(output.mel_coarse, target, mel_valid))

    zero = output.mel_fine.new_zeros(())
    v_valid = ~output.visual_pad_mask
    if flags.no_acoustic_branch:
        l_p = zero
    else:
        l_p = _masked_l1(output.pitch_pred, batch.f0[:, :t_v], v_valid)
    if flags.no_acoustic_branch or flags.no_energy_predictor:
        l_e = zero
    else:
        l_e = _masked_l1(output.energy_pred, batch.energy[:, :t_v], v_valid)

    if batch.units is None:
        l_u = zero
    else:
        t_u = output.unit_logits.shape[1]
        u_valid = ~output.unit_pad_mask[:, :t_u]
        units = batch.units[:, :t_u]
        if units.shape[1] != t_u:
            raise ValueError("unit target shorter than the prediction")
        l_u = smoothed_cross_entropy(output.unit_logits[u_valid], units[u_valid], weights.label_smoothing)

    total = weighted_total(l_m, l_p, l_e, l_u, weights)
    return LossBreakdown(l_m, l_p, l_e, l_u, total)


def unit_accuracy(output: DecoderOutput, batch: Batch) -> float:
    t_u = output.unit_logits.shape[1]
    valid = ~output.unit_pad_mask[:, :t_u]
    pred = output.unit_logits.argmax(-1)
    return float((pred[valid] == batch.units[:, :t_u][valid]).float().mean())


# ---------------------------------------------------------------------------
# optimisation


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)


def learning_rate(step: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up over ``warmup_steps`` then a step decay every ``lr_decay_every`` epochs."""
    warm = min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps > 0 else 1.0
    return cfg.lr * warm * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def train_step(batch: Batch, model: Lip2Speech, optimizer: torch.optim.Optimizer, weights: LossWeights,
               flags: AblationFlags | None = None, grad_clip: float = 1.0) -> dict[str, float]:
    flags = flags or model.flags
    model.train()
    output = model(batch, teacher_forcing=True, flags=flags)
    losses = compute_loss(output, batch, weights, flags)
    if not torch.isfinite(losses.l_total):
        raise TrainingError(f"non-finite loss: {losses.floats()}")
    optimizer.zero_grad(set_to_none=True)
    losses.l_total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return losses.floats()


@torch.no_grad()
def evaluate_loss(batch: Batch, model: Lip2Speech, weights: LossWeights, flags: AblationFlags | None = None,
                  teacher_forcing: bool = True) -> dict[str, float]:
    flags = flags or model.flags
    model.eval()
    output = model(batch, teacher_forcing=teacher_forcing, flags=flags)
    out = compute_loss(output, batch, weights, flags).floats()
    if batch.units is not None:
        out["unit_acc"] = unit_accuracy(output, batch)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | os.PathLike, model: Lip2Speech, optimizer: torch.optim.Optimizer | None,
                    step: int, epoch: int = 0, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": json.dumps(model.config.to_dict()),
        "flags": json.dumps(asdict(model.flags)),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
        "epoch": int(epoch),
        "extra": json.dumps(extra or {}),
    }
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises several unrelated types for damaged files
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"corrupt checkpoint {path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch: file has {payload.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    payload["model_config"] = ModelConfig.from_dict(json.loads(payload["model_config"]))
    payload["flags"] = AblationFlags(**json.loads(payload["flags"]))
    payload["extra"] = json.loads(payload["extra"])
    return payload


def restore_model(ckpt: dict, config: ModelConfig | None = None) -> Lip2Speech:
    """Build a model from a loaded checkpoint; ``config`` (if given) must match."""
    if config is not None and config != ckpt["model_config"]:
        theirs, ours = ckpt["model_config"].to_dict(), config.to_dict()
        diff = sorted(k for k in ours if ours[k] != theirs.get(k))
        raise CheckpointError(f"checkpoint incompatible with config; mismatched keys: {diff}")
    model = Lip2Speech(ckpt["model_config"], ckpt["flags"])
    missing, unexpected = model.load_state_dict(ckpt["model"], strict=False)
    if missing or unexpected:
        raise CheckpointError(f"checkpoint parameter mismatch: missing={missing} unexpected={unexpected}")
    return model


# ---------------------------------------------------------------------------
# loop


class MetricLog:
    """Append-only JSON-lines loss log."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)

    def write(self, record: dict) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    step: int
    history: list[dict]


def run_training(
    train: list[Example],
    config: TrainConfig,
    model_config: ModelConfig,
    out_dir: str | os.PathLike,
    *,
    val: list[Example] | None = None,
    weights: LossWeights = LossWeights(),
    hop_seconds: float = 0.01,
    timbre_seed: int = 0,
    resume: str | os.PathLike | None = None,
) -> TrainResult:
    """Epoch loop with per-epoch validation loss.

    Data order, prompt crops and dropout are seeded from ``(seed, epoch)`` and
    ``(seed, step)``, so a resumed run follows the same trajectory as an
    uninterrupted one.
    """
    if not train:
        raise TrainingError("empty training set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.pt"
    log = MetricLog(out_dir / "train_log.jsonl")
    timbre = StubTimbreEncoder(model_config.n_mels, model_config.timbre_dim, timbre_seed)

    if resume is not None:
        ckpt = load_checkpoint(resume)
        model = restore_model(ckpt, model_config)
        model.flags = config.flags
        optimizer = make_optimizer(model, config)
        if ckpt["optimizer"] is not None:
            optimizer.load_state_dict(ckpt["optimizer"])
        step, start_epoch = ckpt["step"], ckpt["epoch"]
    else:
        model = Lip2Speech(model_config, config.flags, seed=config.seed)
        optimizer = make_optimizer(model, config)
        step, start_epoch = 0, 0

    steps_per_epoch = config.steps_per_epoch or math.ceil(len(train) / config.batch_size)
    val = val or train
    history = []
    for epoch in range(start_epoch, config.epochs):
        order_rng = np.random.default_rng([config.seed, epoch])
        order: list[int] = []
        for _ in range(steps_per_epoch):
            if len(order) < config.batch_size:
                order.extend(order_rng.permutation(len(train)).tolist())
            idx, order = order[: config.batch_size], order[config.batch_size:]
            rng = np.random.default_rng([config.seed, step, 1])
            batch = collate([train[i] for i in idx], timbre, hop_seconds, rng=rng)
            lr = learning_rate(step, epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            torch.manual_seed(config.seed * 1_000_003 + step)
            losses = train_step(batch, model, optimizer, weights, config.flags, config.grad_clip)
            step += 1
            rec = {"split": "train", "epoch": epoch, "step": step, "lr": lr, **losses}
            log.write(rec)
            history.append(rec)
        val_batch = collate(val, timbre, hop_seconds)
        vrec = {"split": "val", "epoch": epoch, "step": step,
                **evaluate_loss(val_batch, model, weights, config.flags)}
        log.write(vrec)
        history.append(vrec)
        logger.info("epoch %d step %d train l_total %.4f val l_total %.4f",
                    epoch, step, history[-2]["l_total"], vrec["l_total"])
        save_checkpoint(ckpt_path, model, optimizer, step, epoch + 1)

    if start_epoch >= config.epochs:  # nothing ran; still leave a checkpoint in out_dir
        save_checkpoint(ckpt_path, model, optimizer, step, start_epoch)
    return TrainResult(ckpt_path, log.path, step, history)
