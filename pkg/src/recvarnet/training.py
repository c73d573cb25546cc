"""Loss, learning-rate schedule, training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .data import SliceDataset, derive_seed
from .model import ModelConfig, RecurrentVarNet
from .operators import apply_mask
from .sampling import SamplingMask, build_mask

__all__ = [
    "CHECKPOINT_VERSION",
    "CheckpointRecord",
    "TrainConfig",
    "gaussian_window",
    "load_checkpoint",
    "lr_at",
    "model_from_checkpoint",
    "save_checkpoint",
    "ssim",
    "train_loop",
    "train_step",
    "training_loss",
    "validate",
]

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    """Normalized 2D Gaussian window ``[size, size]``."""
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(
    x: torch.Tensor,
    y: torch.Tensor,
    data_range: Union[float, torch.Tensor],
    window_size: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
    k1: float = SSIM_K1,
    k2: float = SSIM_K2,
) -> torch.Tensor:
    """Structural similarity of two real images, averaged over all valid windows.

    Local statistics use a Gaussian window and no border padding. Leading
    dimensions are treated as a batch; ``data_range`` may be a scalar or a tensor
    broadcastable to the batch shape. Returns one value per image.
    """
    if x.shape != y.shape:
        raise ValueError(f"Image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}.")
    data_range = torch.as_tensor(data_range, dtype=x.dtype, device=x.device)
    if bool((data_range <= 0).any()):
        raise ValueError("data_range must be positive.")
    batch_shape = x.shape[:-2]
    x4 = x.reshape(-1, 1, *x.shape[-2:])
    y4 = y.reshape(-1, 1, *y.shape[-2:])
    window = gaussian_window(window_size, sigma, x.dtype).to(x.device)[None, None]

    def local_mean(z):
        return F.conv2d(z, window)

    mu_x = local_mean(x4)
    mu_y = local_mean(y4)
    var_x = local_mean(x4 * x4) - mu_x * mu_x
    var_y = local_mean(y4 * y4) - mu_y * mu_y
    cov = local_mean(x4 * y4) - mu_x * mu_y

    data_range = data_range.reshape(-1, 1, 1, 1) if data_range.dim() else data_range
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (numerator / denominator).mean((-3, -2, -1)).reshape(batch_shape)


def training_loss(
    reference: torch.Tensor, prediction: torch.Tensor, w1: float = 1.0, w2: float = 1.0
) -> torch.Tensor:
    """Weighted sum of the mean absolute error and ``1 - SSIM`` per image.

    The SSIM data range is the maximum of each reference image.
    """
    data_range = reference.flatten(-2).amax(-1)
    l1 = (reference - prediction).abs().mean((-2, -1))
    return w1 * l1 + w2 * (1 - ssim(reference, prediction, data_range))


@dataclass
class TrainConfig:
    lr_peak: float = 5e-4
    warmup_iters: int = 1000
    decay_every: int = 20000
    decay_factor: float = 0.2
    batch_size: int = 4
    total_iters: int = 63000
    w1: float = 1.0
    w2: float = 1.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    acceleration_list: tuple = (5, 10)
    checkpoint_every: int = 1000
    validate_every: int = 1000
    grad_clip: Optional[float] = None
    mask_type: str = "variable-density"
    center_radius: float = 0.12
    acs_fraction: Optional[float] = None

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.acceleration_list = tuple(self.acceleration_list)
        for name in ("warmup_iters", "decay_every", "batch_size", "checkpoint_every", "validate_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}.")
        if self.lr_peak < 0 or self.total_iters < 0:
            raise ValueError("lr_peak and total_iters must be non-negative.")
        if not (0 <= self.w1 <= 1 and 0 <= self.w2 <= 1):
            raise ValueError(f"w1 and w2 must lie in [0, 1], got {self.w1}, {self.w2}.")
        if not self.acceleration_list:
            raise ValueError("acceleration_list must not be empty.")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Learning rate at a 0-based iteration.

    Linear warmup to ``lr_peak`` over ``warmup_iters``, then a step decay by
    ``decay_factor`` every ``decay_every`` iterations counted from iteration 0.
    """
    if iteration < cfg.warmup_iters:
        return cfg.lr_peak * (iteration + 1) / cfg.warmup_iters
    return cfg.lr_peak * cfg.decay_factor ** (iteration // cfg.decay_every)


def make_mask(cfg: TrainConfig, shape: tuple[int, int], acceleration: float, seed: int) -> SamplingMask:
    return build_mask(cfg.mask_type, shape, acceleration, seed, cfg.acs_fraction, cfg.center_radius)


def _subsample(kspace: torch.Tensor, masks: Sequence[SamplingMask]):
    mask = torch.stack([m.mask_tensor(kspace.real.dtype) for m in masks])
    acs = torch.stack([m.acs_tensor(kspace.real.dtype) for m in masks])
    return apply_mask(kspace, mask), mask, acs


def train_step(
    model: RecurrentVarNet,
    optimizer: torch.optim.Optimizer,
    batch: tuple,
    cfg: TrainConfig,
    lr: Optional[float] = None,
) -> float:
    """One Adam update on a batch ``(kspace, reference, masks, slice_ids)``.

    ``kspace`` is fully-sampled ``[B, n_c, n_y, n_x]``; it is sub-sampled with
    ``masks`` before entering the model. Returns the batch-mean loss.
    """
    kspace, reference, masks, slice_ids = batch
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    masked, mask, acs = _subsample(kspace, masks)
    model.train()
    _, prediction = model(masked, mask, acs)
    losses = training_loss(reference, prediction, cfg.w1, cfg.w2)
    bad = [sid for sid, value in zip(slice_ids, losses.detach()) if not math.isfinite(float(value))]
    if bad:
        raise FloatingPointError(f"Non-finite training loss for sample(s): {', '.join(bad)}.")
    loss = losses.mean()
    optimizer.zero_grad(set_to_none=False)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return float(loss.detach())


def make_optimizer(model: RecurrentVarNet, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr_at(0, cfg), betas=cfg.adam_betas, eps=cfg.adam_eps)


def sample_batch(dataset: SliceDataset, iteration: int, cfg: TrainConfig) -> tuple:
    """Deterministic batch for ``iteration``: seeded per-epoch shuffles and per-sample mask draws."""
    n = len(dataset)
    indices = []
    for j in range(cfg.batch_size):
        counter = iteration * cfg.batch_size + j
        epoch, position = divmod(counter, n)
        permutation = np.random.default_rng(derive_seed(cfg.seed, 10, epoch)).permutation(n)
        indices.append(int(permutation[position]))
    kspace = torch.stack([dataset[i][0] for i in indices])
    reference = torch.stack([dataset[i][1] for i in indices])
    shape = tuple(kspace.shape[-2:])
    masks = []
    for j in range(cfg.batch_size):
        rng = np.random.default_rng(derive_seed(cfg.seed, 11, iteration, j))
        acceleration = cfg.acceleration_list[int(rng.integers(len(cfg.acceleration_list)))]
        masks.append(make_mask(cfg, shape, acceleration, int(rng.integers(2**31))))
    return kspace, reference, masks, [dataset.slice_ids[i] for i in indices]


def validation_mask(cfg: TrainConfig, shape, acceleration: float, index: int) -> SamplingMask:
    return make_mask(cfg, shape, acceleration, derive_seed(cfg.seed, 20, index, int(acceleration)))


@torch.no_grad()
def validate(model: RecurrentVarNet, dataset: SliceDataset, cfg: TrainConfig) -> dict:
    """Mean SSIM per acceleration over a dataset with fixed per-slice masks.

    Returns ``{R: mean_ssim, ..., "mean": pooled_mean}``.
    """
    model.eval()
    scores: dict = {}
    for acceleration in cfg.acceleration_list:
        values = []
        for index in range(len(dataset)):
            kspace, reference, _ = dataset[index]
            mask = validation_mask(cfg, tuple(kspace.shape[-2:]), acceleration, index)
            masked, m, acs = _subsample(kspace[None], [mask])
            _, prediction = model(masked, m, acs)
            values.append(
                float(ssim(reference.double(), prediction[0].double(), reference.max().double()))
            )
        scores[acceleration] = float(np.mean(values))
    scores["mean"] = float(np.mean([scores[r] for r in cfg.acceleration_list]))
    return scores


@dataclass
class CheckpointRecord:
    """Everything needed to restore a training run."""

    params: dict
    optimizer: dict
    iteration: int
    model_config: dict
    train_config: dict
    best_val_ssim: Optional[float] = None
    val_ssim: Optional[float] = None
    version: int = CHECKPOINT_VERSION


def _little_endian(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array.astype(array.dtype.newbyteorder("<")))


def capture(
    model: RecurrentVarNet,
    optimizer: Optional[torch.optim.Optimizer],
    iteration: int,
    train_config: Optional[TrainConfig] = None,
    best_val_ssim: Optional[float] = None,
    val_ssim: Optional[float] = None,
) -> CheckpointRecord:
    params = {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}
    optim_state = {}
    if optimizer is not None:
        names = {id(p): name for name, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                for key, value in state.items():
                    optim_state[f"{names[id(p)]}/{key}"] = torch.as_tensor(value).detach().cpu().numpy().copy()
    return CheckpointRecord(
        params=params,
        optimizer=optim_state,
        iteration=iteration,
        model_config=model.config.to_dict(),
        train_config=train_config.to_dict() if train_config else {},
        best_val_ssim=best_val_ssim,
        val_ssim=val_ssim,
    )


def save_checkpoint(path: Union[str, Path], record: CheckpointRecord) -> None:
    """Write a checkpoint as an ``.npz`` archive of little-endian arrays plus a JSON metadata entry."""
    meta = {
        "version": record.version,
        "iteration": record.iteration,
        "model_config": record.model_config,
        "train_config": record.train_config,
        "best_val_ssim": record.best_val_ssim,
        "val_ssim": record.val_ssim,
    }
    arrays = {f"model/{k}": _little_endian(v) for k, v in record.params.items()}
    arrays.update({f"optim/{k}": _little_endian(v) for k, v in record.optimizer.items()})
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path]) -> CheckpointRecord:
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive.files:
            raise ValueError(f"{path}: not a checkpoint (missing metadata).")
        meta = json.loads(archive["__meta__"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}.")
        params = {k[len("model/") :]: archive[k] for k in archive.files if k.startswith("model/")}
        optim = {k[len("optim/") :]: archive[k] for k in archive.files if k.startswith("optim/")}
    return CheckpointRecord(
        params=params,
        optimizer=optim,
        iteration=meta["iteration"],
        model_config=meta["model_config"],
        train_config=meta["train_config"],
        best_val_ssim=meta["best_val_ssim"],
        val_ssim=meta.get("val_ssim"),
        version=meta["version"],
    )


def restore(record: CheckpointRecord, model: RecurrentVarNet, optimizer: Optional[torch.optim.Optimizer] = None):
    """Load parameters (and optimizer moments) from ``record`` into existing objects."""
    state = {name: torch.from_numpy(np.array(value)) for name, value in record.params.items()}
    missing = set(dict(model.named_parameters())) - set(state)
    if missing:
        raise KeyError(f"Checkpoint lacks parameters: {sorted(missing)}.")
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(state[name])
    if optimizer is not None and record.optimizer:
        params = dict(model.named_parameters())
        for key, value in record.optimizer.items():
            name, slot = key.rsplit("/", 1)
            optimizer.state[params[name]][slot] = torch.from_numpy(np.array(value))


def model_from_checkpoint(record: Union[CheckpointRecord, str, Path]) -> RecurrentVarNet:
    if not isinstance(record, CheckpointRecord):
        record = load_checkpoint(record)
    model = RecurrentVarNet(ModelConfig(**record.model_config))
    restore(record, model)
    model.eval()
    return model


METRICS_LOG = "metrics.tsv"


def train_loop(
    model: RecurrentVarNet,
    train_set: SliceDataset,
    cfg: TrainConfig,
    out_dir: Union[str, Path],
    val_set: Optional[SliceDataset] = None,
    resume: bool = False,
) -> CheckpointRecord:
    """Train ``model`` for ``cfg.total_iters`` iterations.

    Writes ``latest.ckpt`` every ``checkpoint_every`` iterations and at the end,
    ``best.ckpt`` whenever the pooled validation SSIM improves, and one line of
    ``metrics.tsv`` per validation. Returns the final checkpoint record.
    """
    if len(train_set) == 0:
        raise ValueError("Training dataset is empty.")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(model, cfg)
    latest_path, best_path, log_path = out_dir / "latest.ckpt", out_dir / "best.ckpt", out_dir / METRICS_LOG

    start, best = 0, None
    if resume and latest_path.exists():
        record = load_checkpoint(latest_path)
        restore(record, model, optimizer)
        start, best = record.iteration, record.best_val_ssim
        logger.info("Resumed from %s at iteration %d.", latest_path, start)
    elif not log_path.exists() or not resume:
        columns = ["iteration", "loss"] + [f"ssim_R{r:g}" for r in cfg.acceleration_list] + ["ssim_mean"]
        log_path.write_text("\t".join(columns) + "\n")

    def run_validation(iteration, recent_losses):
        nonlocal best
        if val_set is None or len(val_set) == 0:
            return None
        scores = validate(model, val_set, cfg)
        loss = float(np.mean(recent_losses)) if recent_losses else float("nan")
        row = [str(iteration), f"{loss:.6f}"] + [f"{scores[r]:.6f}" for r in cfg.acceleration_list]
        row.append(f"{scores['mean']:.6f}")
        with open(log_path, "a") as f:
            f.write("\t".join(row) + "\n")
        logger.info("iter %d loss %.5f val ssim %.5f", iteration, loss, scores["mean"])
        if best is None or scores["mean"] > best:
            best = scores["mean"]
            save_checkpoint(best_path, capture(model, optimizer, iteration, cfg, best, scores["mean"]))
        return scores["mean"]

    recent: list[float] = []
    for iteration in range(start, cfg.total_iters):
        batch = sample_batch(train_set, iteration, cfg)
        recent.append(train_step(model, optimizer, batch, cfg, lr=lr_at(iteration, cfg)))
        done = iteration + 1
        if done % cfg.validate_every == 0:
            run_validation(done, recent)
            recent = []
        if done % cfg.checkpoint_every == 0:
            save_checkpoint(latest_path, capture(model, optimizer, done, cfg, best))

    final_iteration = max(start, cfg.total_iters)
    if final_iteration % cfg.validate_every != 0 or final_iteration == 0:
        run_validation(final_iteration, recent)
    record = capture(model, optimizer, final_iteration, cfg, best)
    save_checkpoint(latest_path, record)
    return record
