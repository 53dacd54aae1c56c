"""
The two training loops: self-supervised DDPM pre-training with EMA and
iteration snapshots, and supervised fine-tuning with plateau LR scheduling
and early stopping. Also the snapshot-selection protocol (fine-tune from
each pre-training snapshot, keep the one with the best validation MRE).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from landmark_diffusion.checkpoint import Checkpoint
from landmark_diffusion.data import AugmentationParams, augment
from landmark_diffusion.diffusion import NoiseSchedule, forward_sample, simple_loss
from landmark_diffusion.heatmaps import (
    HeatmapStack,
    LandmarkSet,
    decode_centroid,
    encode_heatmaps,
)
from landmark_diffusion.network import DenoisingUNet, build_network, convert_to_detector

LogFn = Callable[[dict], None]

LabeledSample = Tuple[np.ndarray, LandmarkSet]


@dataclass
class PretrainConfig:
    total_iterations: int = 10000
    snapshot_iterations: Tuple[int, ...] = (4000, 6000, 8000, 10000)
    batch_size: int = 4
    grad_accumulation: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    ema_decay: float = 0.995
    num_diffusion_steps: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    single_threaded: bool = False

    def validate(self) -> None:
        if min(self.total_iterations, self.batch_size, self.grad_accumulation) < 1:
            raise ValueError("counts must be positive")
        for it in self.snapshot_iterations:
            if not (1 <= it <= self.total_iterations):
                raise ValueError(
                    f"snapshot iteration {it} outside [1, {self.total_iterations}]"
                )
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema_decay must be in [0, 1)")


@dataclass
class FinetuneConfig:
    max_epochs: int = 200
    batch_size: int = 2
    grad_accumulation: int = 8
    initial_lr: float = 1e-5
    weight_decay: float = 1e-2
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    min_lr: float = 1e-7
    early_stop_patience: int = 30
    loss_mode: str = "gaussian_ce"  # gaussian_ce | contour_nll
    init_source: str = "ema"  # ema | raw
    heatmap_sigma: float = 5.0
    seed: int = 0
    single_threaded: bool = False

    def validate(self) -> None:
        if min(self.max_epochs, self.batch_size, self.grad_accumulation) < 1:
            raise ValueError("counts must be positive")
        if not (0.0 < self.plateau_factor < 1.0):
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.loss_mode not in ("gaussian_ce", "contour_nll"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.init_source not in ("ema", "raw"):
            raise ValueError(f"unknown init_source {self.init_source!r}")


class EmaTracker:
    """Exponential moving average of parameter tensors.

    After n updates against a constant target p starting from q, the
    shadow equals p + (q - p) * decay^n.
    """

    def __init__(self, params: Dict[str, torch.Tensor], decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in params.items()}
        self.updates = 0

    def update(self, current: Dict[str, torch.Tensor]) -> "EmaTracker":
        if current.keys() != self.shadow.keys():
            raise ValueError("EMA key set does not match model key set")
        with torch.no_grad():
            for k, v in current.items():
                self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1.0 - self.decay)
        self.updates += 1
        return self

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return {k: v.clone() for k, v in self.shadow.items()}


def ema_update(tracker: EmaTracker, current: Dict[str, torch.Tensor]) -> EmaTracker:
    return tracker.update(current)


def _to_batch_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack (H, W) float images into an (M, 1, H, W) float32 tensor."""
    arrs = [np.asarray(im, dtype=np.float32) for im in images]
    return torch.from_numpy(np.stack(arrs)[:, None, :, :])


@dataclass
class PretrainResult:
    snapshots: List[Checkpoint]
    losses: List[float]


def pretrain(
    net: DenoisingUNet,
    images: Sequence[np.ndarray],
    cfg: PretrainConfig,
    sched: NoiseSchedule,
    dataset_id: str = "",
    log: Optional[LogFn] = None,
) -> PretrainResult:
    """DDPM pre-training: predict the injected noise at a uniformly random
    timestep, MSE objective, gradient accumulation, EMA shadow weights.
    A checkpoint (raw + EMA) is emitted at each snapshot iteration."""
    cfg.validate()
    if len(images) == 0:
        raise ValueError("empty pre-training data stream")
    if cfg.single_threaded:
        torch.set_num_threads(1)

    data = _to_batch_tensor(images)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(
        net.parameters(),
        lr=cfg.learning_rate,
        betas=cfg.adam_betas,
        weight_decay=cfg.weight_decay,
    )
    ema = EmaTracker(dict(net.named_parameters()), cfg.ema_decay)
    snapshot_at = set(cfg.snapshot_iterations)
    snapshots: List[Checkpoint] = []
    losses: List[float] = []
    t0 = time.monotonic()

    opt.zero_grad(set_to_none=True)
    for it in range(1, cfg.total_iterations + 1):
        idx = torch.randint(0, data.shape[0], (cfg.batch_size,), generator=gen)
        x0 = data[idx]
        t = torch.randint(1, sched.num_steps + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = forward_sample(x0, t, eps, sched)
        loss = simple_loss(eps, net(x_t, t))
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite pre-training loss at iteration {it}: {loss.item()}"
            )
        (loss / cfg.grad_accumulation).backward()
        if it % cfg.grad_accumulation == 0:
            opt.step()
            opt.zero_grad(set_to_none=True)
            ema.update(dict(net.named_parameters()))
        losses.append(loss.item())
        if log is not None:
            log(
                {
                    "iteration": it,
                    "loss": losses[-1],
                    "lr": cfg.learning_rate,
                    "wall_time_s": round(time.monotonic() - t0, 3),
                }
            )
        if it in snapshot_at:
            state = {k: v.detach().clone() for k, v in net.state_dict().items()}
            ema_state = dict(state)
            ema_state.update(ema.state_dict())
            snapshots.append(
                Checkpoint(
                    config=net.config,
                    state=state,
                    ema_state=ema_state,
                    schedule={
                        "num_steps": cfg.num_diffusion_steps,
                        "beta_start": cfg.beta_start,
                        "beta_end": cfg.beta_end,
                    },
                    metadata={
                        "iteration": it,
                        "dataset_id": dataset_id,
                        "seed": cfg.seed,
                        "mode": "denoiser",
                    },
                )
            )
    return PretrainResult(snapshots=snapshots, losses=losses)


def _finetune_batches(
    order: Sequence[int], batch_size: int
) -> List[List[int]]:
    return [
        list(order[i : i + batch_size]) for i in range(0, len(order), batch_size)
    ]


def _encode_targets(
    samples: Sequence[LabeledSample], grid: Tuple[int, int], sigma: float
) -> torch.Tensor:
    stacks = [encode_heatmaps(lms, grid, sigma).maps for _, lms in samples]
    return torch.from_numpy(np.stack(stacks))


def _labeled_loss(
    net: DenoisingUNet, samples: Sequence[LabeledSample], sigma: float
) -> torch.Tensor:
    """Per-pixel binary cross-entropy between predicted logits and the
    binary heatmap targets, averaged over pixels, channels and images."""
    x = _to_batch_tensor([im for im, _ in samples])
    grid = (x.shape[-2], x.shape[-1])
    targets = _encode_targets(samples, grid, sigma)
    logits = net(x, None)
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, targets)


class PlateauController:
    """Reduce-on-plateau LR and early stopping on the validation loss.

    An epoch is a plateau epoch iff its loss is strictly worse than the
    best seen so far; non-increasing sequences therefore never trigger a
    reduction. LR is multiplied by `factor` (floored at `min_lr`) after
    `patience` consecutive plateau epochs; `observe` returns stop=True
    after `early_stop_patience` consecutive plateau epochs.
    """

    def __init__(
        self,
        initial_lr: float,
        factor: float,
        patience: int,
        min_lr: float,
        early_stop_patience: int,
    ):
        self.lr = initial_lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.early_stop_patience = early_stop_patience
        self.best = float("inf")
        self._plateau_bad = 0
        self._stop_bad = 0

    def observe(self, val_loss: float) -> Tuple[float, bool, bool]:
        """Returns (current lr, stop flag, improved flag)."""
        improved = val_loss < self.best
        if improved:
            self.best = val_loss
        if val_loss <= self.best:
            self._plateau_bad = 0
            self._stop_bad = 0
        else:
            self._plateau_bad += 1
            self._stop_bad += 1
        if self._plateau_bad >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self._plateau_bad = 0
        return self.lr, self._stop_bad >= self.early_stop_patience, improved


@dataclass
class FinetuneResult:
    best_state: Dict[str, torch.Tensor]
    best_epoch: int
    best_val_loss: float
    log: List[dict] = field(default_factory=list)


def finetune(
    detector: DenoisingUNet,
    train: Sequence[LabeledSample],
    val: Sequence[LabeledSample],
    cfg: FinetuneConfig,
    aug_params: Optional[AugmentationParams] = None,
    log: Optional[LogFn] = None,
) -> FinetuneResult:
    """Supervised fine-tuning of a converted detector on labeled samples.

    LR is halved (cfg.plateau_factor) after plateau_patience epochs with
    no new best validation loss; training stops after early_stop_patience
    such epochs. The returned weights are from the best-validation epoch.
    """
    cfg.validate()
    if cfg.loss_mode == "contour_nll":
        raise NotImplementedError(
            "contour_nll targets come from the external contour-hugging "
            "method and are not implemented; use loss_mode='gaussian_ce'"
        )
    if not train or not val:
        raise ValueError("train and val sets must be non-empty")
    n = detector.config.out_channels
    for _, lms in list(train) + list(val):
        if len(lms) != n:
            raise ValueError(
                f"landmark count mismatch: detector head has {n} channels, "
                f"labels have {len(lms)}"
            )
    if cfg.single_threaded:
        torch.set_num_threads(1)

    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(
        detector.parameters(),
        lr=cfg.initial_lr,
        betas=cfg.adam_betas,
        weight_decay=cfg.weight_decay,
    )
    controller = PlateauController(
        cfg.initial_lr,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.min_lr,
        cfg.early_stop_patience,
    )
    best_state = {k: v.detach().clone() for k, v in detector.state_dict().items()}
    best_epoch = 0
    history: List[dict] = []
    t0 = time.monotonic()

    # the validation set is fixed, so its inputs and targets are encoded once
    x_val = _to_batch_tensor([im for im, _ in val])
    val_grid = (x_val.shape[-2], x_val.shape[-1])
    val_targets = _encode_targets(val, val_grid, cfg.heatmap_sigma)

    for epoch in range(1, cfg.max_epochs + 1):
        order = torch.randperm(len(train), generator=gen).tolist()
        batches = _finetune_batches(order, cfg.batch_size)
        epoch_loss = 0.0
        # accumulate over groups of grad_accumulation micro-batches;
        # gradients averaged across the actual group size
        for g in range(0, len(batches), cfg.grad_accumulation):
            group = batches[g : g + cfg.grad_accumulation]
            opt.zero_grad(set_to_none=True)
            for batch in group:
                samples = []
                for i in batch:
                    im, lms = train[i]
                    if aug_params is not None:
                        im, lms = augment(im, lms, aug_params, rng)
                    samples.append((im, lms))
                loss = _labeled_loss(detector, samples, cfg.heatmap_sigma)
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite fine-tuning loss at epoch {epoch}: {loss.item()}"
                    )
                (loss / len(group)).backward()
                epoch_loss += loss.item()
            opt.step()

        with torch.no_grad():
            val_loss = torch.nn.functional.binary_cross_entropy_with_logits(
                detector(x_val, None), val_targets
            ).item()

        lr, stop, improved = controller.observe(val_loss)
        if improved:
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in detector.state_dict().items()}
        for group in opt.param_groups:
            group["lr"] = lr

        entry = {
            "epoch": epoch,
            "train_loss": epoch_loss / max(len(batches), 1),
            "val_loss": val_loss,
            "lr": lr,
            "wall_time_s": round(time.monotonic() - t0, 3),
        }
        history.append(entry)
        if log is not None:
            log(entry)

        if stop:
            break

    return FinetuneResult(
        best_state=best_state,
        best_epoch=best_epoch,
        best_val_loss=controller.best,
        log=history,
    )


def predict_landmarks(net: DenoisingUNet, image: np.ndarray) -> LandmarkSet:
    """Run the detector and decode heatmap centroids, in grid coordinates."""
    x = _to_batch_tensor([image])
    with torch.no_grad():
        logits = net(x, None)
    stack = HeatmapStack(
        maps=logits[0].numpy(), encoding="predicted_logits"
    )
    return decode_centroid(stack)


def evaluate_mre(net: DenoisingUNet, samples: Sequence[LabeledSample]) -> float:
    """Mean radial error over (image, landmark) pairs, in grid pixels."""
    from landmark_diffusion.evaluation import radial_errors

    errors = []
    for start in range(0, len(samples), 16):
        chunk = samples[start : start + 16]
        x = _to_batch_tensor([im for im, _ in chunk])
        with torch.no_grad():
            logits = net(x, None)
        for (_, lms), out in zip(chunk, logits):
            stack = HeatmapStack(maps=out.numpy(), encoding="predicted_logits")
            errors.extend(radial_errors(decode_centroid(stack), lms))
    return float(np.mean(errors))


def detector_from_checkpoint(
    ckpt: Checkpoint,
    num_landmarks: int,
    init_source: str = "ema",
    generator: Optional[torch.Generator] = None,
) -> DenoisingUNet:
    """Rebuild the denoiser from a checkpoint and head-swap it into an
    N-channel detector."""
    denoiser = build_network(ckpt.config)
    denoiser.load_state_dict(ckpt.weights(init_source))
    return convert_to_detector(denoiser, num_landmarks, generator=generator)


@dataclass
class SnapshotScore:
    iteration: int
    mre_mean: float
    mre_std: float
    mre_runs: List[float]


@dataclass
class SnapshotSelection:
    winner: Checkpoint
    scores: List[SnapshotScore]


def select_snapshot(
    snapshots: Sequence[Checkpoint],
    train: Sequence[LabeledSample],
    val: Sequence[LabeledSample],
    cfg: FinetuneConfig,
    repetitions: int = 1,
    aug_params: Optional[AugmentationParams] = None,
    log: Optional[LogFn] = None,
) -> SnapshotSelection:
    """Fine-tune from every pre-training snapshot (repeated with shifted
    seeds), compare mean validation MRE, return the winning snapshot.
    Ties break toward fewer pre-training iterations."""
    if len(snapshots) == 0:
        raise ValueError("empty snapshot list")
    num_landmarks = len(val[0][1])
    scores: List[SnapshotScore] = []
    for snap in snapshots:
        runs = []
        for rep in range(repetitions):
            rep_cfg = replace(cfg, seed=cfg.seed + rep)
            gen = torch.Generator().manual_seed(rep_cfg.seed)
            detector = detector_from_checkpoint(
                snap, num_landmarks, init_source=cfg.init_source, generator=gen
            )
            result = finetune(detector, train, val, rep_cfg, aug_params=aug_params)
            detector.load_state_dict(result.best_state)
            mre = evaluate_mre(detector, val)
            runs.append(mre)
            if log is not None:
                log(
                    {
                        "snapshot_iteration": snap.metadata.get("iteration"),
                        "repetition": rep,
                        "val_mre": mre,
                    }
                )
        scores.append(
            SnapshotScore(
                iteration=int(snap.metadata.get("iteration", 0)),
                mre_mean=float(np.mean(runs)),
                mre_std=float(np.std(runs)),
                mre_runs=runs,
            )
        )

    ordered = sorted(
        range(len(snapshots)), key=lambda i: (scores[i].mre_mean, scores[i].iteration)
    )
    return SnapshotSelection(winner=snapshots[ordered[0]], scores=scores)
