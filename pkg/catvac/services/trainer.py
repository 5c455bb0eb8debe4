"""
Joint optimization of h, f and g with Adam, exponential learning-rate decay and
temperature annealing. Writes EpochLog lines and CVCK checkpoints to a run directory.
"""

import copy
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch.utils.data import DataLoader, TensorDataset

from ..errors import InvariantViolation, NonFiniteError, ShapeError, UserError
from ..storage.container import CheckpointError, read_container, write_container
from .features import FeatureConfig, FeatureTensor, NormStats
from .gumbel import ScheduleError, TemperatureSchedule, anneal, hard_assignment
from .losses import total_loss
from .model import CategoricalVAE, ModelConfig

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Independent RNG streams derived from (seed, epoch, stream)
_SHUFFLE_STREAM = 0
_NOISE_STREAM = 1
_VALIDATION_STREAM = 2


class TrainingDivergedError(InvariantViolation):
    """The loss became NaN or infinite."""
    pass


class TrainConfig(BaseModel):
    """Optimization hyperparameters."""
    model_config = ConfigDict(populate_by_name=True)

    epochs: int = 500
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    lam: float = Field(0.5, alias="lambda")
    tau: TemperatureSchedule = TemperatureSchedule()
    batch_size: int = 32
    seed: int = 0
    K: int = 10
    d_z: int = 32
    grad_clip: Optional[float] = 5.0
    checkpoint_every: int = 1
    num_workers: int = 0

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr_start >= self.lr_end >= 0:
            raise ValueError("need lr_start >= lr_end >= 0")
        if self.lr_end == 0 and self.lr_start != 0:
            raise ValueError("an exponential schedule cannot reach 0; use lr_start = lr_end = 0 for a frozen run")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.batch_size < 1 or self.checkpoint_every < 1 or self.num_workers < 0:
            raise ValueError("batch_size and checkpoint_every must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or null")
        if self.tau.total_epochs != self.epochs:
            self.tau = self.tau.model_copy(update={"total_epochs": self.epochs})
        return self


class EpochLog(BaseModel):
    """Per-epoch averages of the loss terms."""
    epoch: int
    recon: float
    kl_gauss: float
    kl_cat: float
    total: float
    lr: float
    tau: float
    val_total: Optional[float] = None
    wall_time: float


@dataclass
class Checkpoint:
    """Everything needed to rebuild the model or resume training."""
    model_config: ModelConfig
    train_config: TrainConfig
    state: Dict[str, torch.Tensor]
    epoch: int
    tau: float
    best_loss: float = math.inf
    optimizer_state: Optional[dict] = None
    norm_stats: Optional[NormStats] = None
    feature_config: Optional[FeatureConfig] = None

    def build_model(self, device: Union[str, torch.device] = "cpu") -> CategoricalVAE:
        """Instantiate the network with these weights, in inference mode."""
        model = CategoricalVAE(self.model_config)
        model.load_state_dict(self.state)
        return model.to(device).eval()

    def save(self, path: Union[str, Path]) -> None:
        tensors = {f"model.{name}": value.detach().cpu().numpy() for name, value in self.state.items()}
        optimizer_groups = None
        if self.optimizer_state is not None:
            for index, slots in self.optimizer_state["state"].items():
                for slot, value in slots.items():
                    tensors[f"optim.{index}.{slot}"] = torch.as_tensor(value).detach().cpu().numpy()
            optimizer_groups = self.optimizer_state["param_groups"]

        meta = {
            "model_config": self.model_config.model_dump(mode="json"),
            "train_config": self.train_config.model_dump(mode="json", by_alias=True),
            "epoch": self.epoch,
            "tau": self.tau,
            "best_loss": self.best_loss if math.isfinite(self.best_loss) else None,
            "optimizer_param_groups": optimizer_groups,
            "norm_stats": self.norm_stats.model_dump(mode="json") if self.norm_stats else None,
            "feature_config": self.feature_config.model_dump(mode="json") if self.feature_config else None,
        }
        write_container(path, tensors, meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        """
        Raises:
            CheckpointError: If the file is not a model checkpoint or its metadata is malformed
        """
        tensors, meta = read_container(path)
        if "model_config" not in meta:
            raise CheckpointError(f"{path} does not hold a model checkpoint")

        state = {name[len("model."):]: torch.from_numpy(value) for name, value in tensors.items() if name.startswith("model.")}
        optimizer_state = None
        if meta.get("optimizer_param_groups") is not None:
            slots: Dict[int, Dict[str, torch.Tensor]] = defaultdict(dict)
            for name, value in tensors.items():
                if name.startswith("optim."):
                    _, index, slot = name.split(".", 2)
                    slots[int(index)][slot] = torch.from_numpy(value)
            optimizer_state = {"state": dict(slots), "param_groups": meta["optimizer_param_groups"]}

        best = meta.get("best_loss")
        try:
            return cls(
                model_config=ModelConfig.model_validate(meta["model_config"]),
                train_config=TrainConfig.model_validate(meta["train_config"]),
                state=state,
                epoch=int(meta["epoch"]),
                tau=float(meta["tau"]),
                best_loss=math.inf if best is None else float(best),
                optimizer_state=optimizer_state,
                norm_stats=NormStats.model_validate(meta["norm_stats"]) if meta.get("norm_stats") else None,
                feature_config=FeatureConfig.model_validate(meta["feature_config"]) if meta.get("feature_config") else None,
            )
        except (KeyError, TypeError, ValueError) as e:
            logger.error(f"Malformed checkpoint metadata in {path}: {str(e)}")
            raise CheckpointError(f"{path}: malformed checkpoint metadata ({e})") from e


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    logs: List[EpochLog] = field(default_factory=list)
    best_checkpoint: Optional[Checkpoint] = None


def lr_at(config: TrainConfig, epoch: int) -> float:
    """
    lr(e) = lr_start * (lr_end / lr_start) ** (e / (epochs - 1)); endpoints exact.

    Raises:
        ScheduleError: If epoch is outside [0, epochs)
    """
    if not 0 <= epoch < config.epochs:
        raise ScheduleError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch == 0 or config.epochs == 1 or config.lr_start == config.lr_end:
        return config.lr_start
    if epoch == config.epochs - 1:
        return config.lr_end
    return config.lr_start * (config.lr_end / config.lr_start) ** (epoch / (config.epochs - 1))


def derive_seed(seed: int, epoch: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, stream]).generate_state(1)[0])


def _stack(dataset: Sequence[FeatureTensor], model_config: ModelConfig) -> TensorDataset:
    if not dataset:
        raise UserError("no feature tensors given")
    expected = (model_config.input_frames, model_config.input_freq_bins)
    for index, item in enumerate(dataset):
        if item.values.shape != expected:
            raise ShapeError(f"item {index} has shape {item.values.shape}, model expects {expected}")
        if not np.isfinite(item.values).all():
            raise UserError(f"item {index} holds non-finite feature values")
    values = torch.from_numpy(np.stack([np.asarray(item.values, dtype=np.float32) for item in dataset]))
    masks = torch.from_numpy(np.stack([np.asarray(item.mask, dtype=np.float32) for item in dataset]))
    return TensorDataset(values, masks)


def _needs_drop_last(n_items: int, batch_size: int, model_config: ModelConfig) -> bool:
    """
    Batch norm in training mode needs more than one value per channel. When the
    last conv stage is 1 x 1 a single-item batch has exactly one, so a trailing
    batch of one item is dropped from every epoch.

    Raises:
        ShapeError: If every batch would hold a single item
    """
    if model_config.encoded_frames * model_config.encoded_bins > 1:
        return False
    if n_items < 2 or batch_size < 2:
        raise ShapeError(
            f"encoder output is 1 x 1, so batch normalization needs at least 2 items per batch "
            f"(got {n_items} item(s), batch_size {batch_size})"
        )
    if n_items % batch_size == 1:
        logger.info(f"Dropping the trailing single-item batch each epoch ({n_items} items, batch_size {batch_size})")
        return True
    return False


def _parameter_norms(model: torch.nn.Module) -> Dict[str, float]:
    return {name: float(param.detach().norm()) for name, param in model.named_parameters()}


def _dump_divergence(model, epoch: int, batch_id: int, run_dir: Optional[Path]) -> None:
    norms = _parameter_norms(model)
    worst = sorted(((n, v) for n, v in norms.items() if math.isfinite(v)), key=lambda kv: kv[1], reverse=True)[:5]
    non_finite = [name for name, value in norms.items() if not math.isfinite(value)]
    logger.error(f"Non-finite loss at epoch {epoch}, batch {batch_id}")
    logger.error(f"Largest parameter norms: {worst}; non-finite parameters: {non_finite}")
    if run_dir is not None:
        dump = {"epoch": epoch, "batch": batch_id, "parameter_norms": norms}
        (run_dir / "divergence.json").write_text(json.dumps(dump, indent=2))


@torch.no_grad()
def evaluate_loss(
    model: CategoricalVAE,
    dataset: TensorDataset,
    tau: float,
    lam: float,
    seed: int,
    batch_size: int,
    device: torch.device,
) -> float:
    """Item-averaged total loss in inference mode with a fixed noise stream."""
    model.eval()
    generator = torch.Generator(device=device).manual_seed(seed)
    total, count = 0.0, 0
    for x, mask in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        x, mask = x.to(device), mask.to(device)
        out = model(x, tau, generator=generator)
        loss = total_loss(x, out.x_hat, out.posterior, out.probs, mask, lam)
        total += float(loss.total) * x.shape[0]
        count += x.shape[0]
    return total / count


def _snapshot(model, optimizer, model_config, config, epoch, tau, best, norm_stats, feature_config) -> Checkpoint:
    return Checkpoint(
        model_config=model_config,
        train_config=config,
        state={name: value.detach().cpu().clone() for name, value in model.state_dict().items()},
        epoch=epoch,
        tau=tau,
        best_loss=best,
        optimizer_state=copy.deepcopy(optimizer.state_dict()),
        norm_stats=norm_stats,
        feature_config=feature_config,
    )


def train(
    dataset: Sequence[FeatureTensor],
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    val_dataset: Optional[Sequence[FeatureTensor]] = None,
    run_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Checkpoint] = None,
    device: Union[str, torch.device] = "cpu",
    norm_stats: Optional[NormStats] = None,
    feature_config: Optional[FeatureConfig] = None,
    callback: Optional[Callable[[EpochLog], None]] = None,
) -> TrainResult:
    """
    Run epochs x batches of: forward (h → GS at tau(e) → f → reparametrize → g),
    total_loss, backward, Adam step.

    Args:
        dataset: Training FeatureTensors
        config: Optimization hyperparameters
        model_config: Architecture; derived from config and the data when omitted
        val_dataset: Validation tensors used for best-checkpoint selection
        run_dir: Directory for epochs.jsonl, last.cvck and best.cvck
        resume: Checkpoint to continue from (epoch + 1 onwards)
        device: Single torch device
        norm_stats: Stored in checkpoints so inference can normalize raw audio
        feature_config: Stored alongside norm_stats
        callback: Called with each EpochLog after that epoch's checkpoints are written

    Returns:
        TrainResult with the final checkpoint, the EpochLogs of this call and the best checkpoint

    Raises:
        TrainingDivergedError: On a NaN or infinite loss
    """
    if not dataset:
        raise UserError("training set is empty")
    if model_config is None:
        frames, bins = dataset[0].values.shape
        model_config = ModelConfig(K=config.K, d_z=config.d_z, input_frames=frames, input_freq_bins=bins)
    if (model_config.K, model_config.d_z) != (config.K, config.d_z):
        raise UserError(f"model (K={model_config.K}, d_z={model_config.d_z}) and train config (K={config.K}, d_z={config.d_z}) disagree")

    device = torch.device(device)
    train_set = _stack(dataset, model_config)
    val_set = _stack(val_dataset, model_config) if val_dataset else None
    drop_last = _needs_drop_last(len(train_set), config.batch_size, model_config)

    # Build the network from the run seed without disturbing the global RNG
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = CategoricalVAE(model_config)
    model = model.to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr_at(config, 0), betas=ADAM_BETAS, eps=ADAM_EPS)

    # Restore weights, optimizer moments and best loss when resuming
    start_epoch = 0
    best = math.inf
    best_checkpoint = None
    if resume is not None:
        if resume.model_config != model_config:
            raise UserError("resume checkpoint was trained with a different model configuration")
        model.load_state_dict(resume.state)
        if resume.optimizer_state is not None:
            optimizer.load_state_dict(resume.optimizer_state)
        start_epoch = resume.epoch + 1
        best = resume.best_loss
        norm_stats = norm_stats or resume.norm_stats
        feature_config = feature_config or resume.feature_config
        logger.info(f"Resuming from epoch {resume.epoch}")

    # Prepare the run directory
    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)

    logs: List[EpochLog] = []
    checkpoint = None
    for epoch in range(start_epoch, config.epochs):
        started = time.perf_counter()
        lr = lr_at(config, epoch)
        tau = anneal(config.tau, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        # Per-epoch RNG streams so a resumed run draws the same batches and noise
        shuffle = torch.Generator().manual_seed(derive_seed(config.seed, epoch, _SHUFFLE_STREAM))
        noise = torch.Generator(device=device).manual_seed(derive_seed(config.seed, epoch, _NOISE_STREAM))
        loader = DataLoader(
            train_set,
            batch_size=config.batch_size,
            shuffle=True,
            generator=shuffle,
            num_workers=config.num_workers,
            drop_last=drop_last,
        )

        # One pass over the shuffled training set
        model.train()
        sums: Dict[str, float] = defaultdict(float)
        seen = 0
        for batch_id, (x, mask) in enumerate(loader):
            x, mask = x.to(device), mask.to(device)
            try:
                out = model(x, tau, generator=noise)
                loss = total_loss(x, out.x_hat, out.posterior, out.probs, mask, config.lam)
                finite = bool(torch.isfinite(loss.total))
            except NonFiniteError:
                finite = False
            if not finite:
                _dump_divergence(model, epoch, batch_id, run_path)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {batch_id}")

            # Backward pass with gradient-norm clipping
            optimizer.zero_grad(set_to_none=True)
            loss.total.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()

            # Item-weighted running sums for the epoch averages
            for key, value in loss.as_floats().items():
                sums[key] += value * x.shape[0]
            seen += x.shape[0]

        # Validation pass with its own noise stream
        val_total = None
        if val_set is not None:
            val_total = evaluate_loss(
                model, val_set, tau, config.lam,
                derive_seed(config.seed, epoch, _VALIDATION_STREAM), config.batch_size, device,
            )

        log = EpochLog(
            epoch=epoch,
            recon=sums["recon"] / seen,
            kl_gauss=sums["kl_gauss"] / seen,
            kl_cat=sums["kl_cat"] / seen,
            total=sums["total"] / seen,
            lr=lr,
            tau=tau,
            val_total=val_total,
            wall_time=time.perf_counter() - started,
        )
        logs.append(log)
        logger.info(
            f"Epoch {epoch}: total {log.total:.5f} (recon {log.recon:.5f}, KL_z {log.kl_gauss:.4f}, "
            f"KL_y {log.kl_cat:.4f}) lr {lr:.3e} tau {tau:.4f}"
            + (f" val {val_total:.5f}" if val_total is not None else "")
        )

        # Best checkpoint by validation loss, training loss when there is no validation split
        selection = val_total if val_total is not None else log.total
        improved = selection < best
        if improved:
            best = selection

        # Snapshot weights and optimizer state for resume
        checkpoint = _snapshot(model, optimizer, model_config, config, epoch, tau, best, norm_stats, feature_config)
        if improved:
            best_checkpoint = checkpoint

        # Persist the log line and checkpoints
        if run_path is not None:
            with open(run_path / "epochs.jsonl", "a") as handle:
                handle.write(log.model_dump_json() + "\n")
            if improved:
                checkpoint.save(run_path / "best.cvck")
            if (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1:
                checkpoint.save(run_path / "last.cvck")

        if callback is not None:
            callback(log)

    if checkpoint is None:
        if resume is None:
            raise InvariantViolation("training finished without running an epoch")
        checkpoint = resume
        logger.info("Resume checkpoint already covers every epoch; nothing to do")

    return TrainResult(checkpoint=checkpoint, logs=logs, best_checkpoint=best_checkpoint)


@torch.no_grad()
def predict_probs(
    dataset: Sequence[FeatureTensor],
    checkpoint: Checkpoint,
    device: Union[str, torch.device] = "cpu",
    batch_size: int = 64,
    model: Optional[CategoricalVAE] = None,
) -> np.ndarray:
    """Encoder probabilities pi for every item, inference mode, no noise."""
    if model is None:
        model = checkpoint.build_model(device)
    stacked = _stack(dataset, checkpoint.model_config)
    probs = []
    for x, _ in DataLoader(stacked, batch_size=batch_size, shuffle=False):
        logits = model.encode_categorical(x.to(device))
        probs.append(torch.softmax(logits.log_pi, dim=-1).cpu())
    return torch.cat(probs).numpy()


@torch.no_grad()
def assign_clusters(
    dataset: Sequence[FeatureTensor],
    checkpoint: Checkpoint,
    device: Union[str, torch.device] = "cpu",
    batch_size: int = 64,
) -> List[int]:
    """
    Hard cluster per item: argmax of h's softmax probabilities (noise-free, inference mode).

    Raises:
        ShapeError: If the features do not match the checkpoint's input shape
    """
    model = checkpoint.build_model(device)
    stacked = _stack(dataset, checkpoint.model_config)
    assignments: List[int] = []
    for x, _ in DataLoader(stacked, batch_size=batch_size, shuffle=False):
        assignments.extend(int(c) for c in hard_assignment(model.encode_categorical(x.to(device))).cpu())
    return assignments


@torch.no_grad()
def embed_dataset(
    dataset: Sequence[FeatureTensor],
    checkpoint: Checkpoint,
    device: Union[str, torch.device] = "cpu",
    batch_size: int = 64,
) -> np.ndarray:
    """Latent means per item, for geometry metrics computed in latent space."""
    model = checkpoint.build_model(device)
    stacked = _stack(dataset, checkpoint.model_config)
    return torch.cat([model.embed(x.to(device)).cpu() for x, _ in DataLoader(stacked, batch_size=batch_size)]).numpy()
