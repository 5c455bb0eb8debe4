"""
Categorical sampling via the Gumbel-Max trick and its Gumbel-Softmax relaxation,
plus the temperature schedule used during training.

All samplers take an explicit torch.Generator; callers own RNG partitioning.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import torch
from pydantic import BaseModel, model_validator

from ..errors import NonFiniteError, UserError

logger = logging.getLogger(__name__)

# Uniform draws u = (n + 0.5) / 2^53 never reach 0 or 1
_UNIFORM_BITS = 53
_UNIFORM_SCALE = float(2 ** _UNIFORM_BITS)


class InvalidTemperatureError(UserError):
    """Softmax temperature must be a positive real."""
    pass


class ScheduleError(UserError):
    """Epoch index outside the schedule's range."""
    pass


class TemperatureSchedule(BaseModel):
    """Geometric annealing of tau from tau_start to tau_end across total_epochs."""
    tau_start: float = 1.0
    tau_end: float = 0.5
    total_epochs: int = 500

    @model_validator(mode="after")
    def _check(self) -> "TemperatureSchedule":
        if not self.tau_end > 0:
            raise ValueError("tau_end must be > 0")
        if self.tau_start < self.tau_end:
            raise ValueError("tau_start must be >= tau_end")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        return self


@dataclass
class ClassLogits:
    """Unnormalized log-probabilities log(pi) over K classes (last dimension)."""
    log_pi: torch.Tensor

    def __post_init__(self):
        if self.log_pi.dim() == 0 or self.log_pi.shape[-1] < 2:
            raise UserError("categorical distributions need K >= 2 classes")
        if torch.isnan(self.log_pi).any() or torch.isposinf(self.log_pi).any():
            raise NonFiniteError("logits must be finite (or -inf for impossible classes)")

    @property
    def K(self) -> int:
        return int(self.log_pi.shape[-1])

    @classmethod
    def from_probs(cls, probs: Sequence[float], dtype: torch.dtype = torch.float64) -> "ClassLogits":
        return cls(torch.log(torch.as_tensor(probs, dtype=dtype)))


@dataclass
class GsSample:
    """A point on the simplex drawn from the Gumbel-Softmax distribution at temperature tau."""
    y: torch.Tensor
    tau: float


def gumbel_transform(u: torch.Tensor) -> torch.Tensor:
    """g = -log(-log(u)) for u in (0, 1)."""
    return -torch.log(-torch.log(u))


def gumbel_noise(
    generator: Optional[torch.Generator],
    shape: Union[int, Tuple[int, ...], torch.Size],
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """
    Draw i.i.d. standard Gumbel noise.

    Args:
        generator: RNG handle; the noise lives on the generator's device
        shape: K, or any tensor shape
        dtype: Output floating dtype

    Returns:
        Tensor of Gumbel samples
    """
    if isinstance(shape, int):
        shape = (shape,)
    if any(dim < 1 for dim in shape):
        raise UserError(f"noise shape must be positive, got {tuple(shape)}")

    device = generator.device if generator is not None else None
    n = torch.randint(0, 2 ** _UNIFORM_BITS, tuple(shape), generator=generator, dtype=torch.int64, device=device)
    u = (n.to(torch.float64) + 0.5) / _UNIFORM_SCALE
    return gumbel_transform(u).to(dtype)


def gumbel_max_sample(
    logits: ClassLogits,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Exact categorical sample: one_hot(argmax_k [log pi_k + g_k]).
    Ties resolve to the lowest index.
    """
    if noise is None:
        noise = gumbel_noise(generator, logits.log_pi.shape, dtype=logits.log_pi.dtype)
    winner = torch.argmax(logits.log_pi + noise, dim=-1)
    return torch.nn.functional.one_hot(winner, logits.K).to(logits.log_pi.dtype)


def gumbel_softmax_sample(
    logits: ClassLogits,
    tau: float,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> GsSample:
    """
    Differentiable relaxation: y_k = softmax((log pi + g) / tau)_k.

    Args:
        logits: Class logits; gradients flow back into logits.log_pi
        tau: Softmax temperature
        generator: RNG handle, used when noise is not given
        noise: Fixed Gumbel noise of the same shape as the logits

    Raises:
        InvalidTemperatureError: If tau is not a positive real
    """
    try:
        tau = float(tau)
    except (TypeError, ValueError) as e:
        raise InvalidTemperatureError("invalid temperature") from e
    if not math.isfinite(tau) or tau <= 0:
        raise InvalidTemperatureError("invalid temperature")
    if noise is None:
        noise = gumbel_noise(generator, logits.log_pi.shape, dtype=logits.log_pi.dtype)

    # softmax subtracts the row maximum internally
    y = torch.softmax((logits.log_pi + noise) / tau, dim=-1)
    return GsSample(y=y, tau=float(tau))


def hard_assignment(logits: ClassLogits) -> torch.Tensor:
    """Noise-free cluster ids: argmax of the encoder probabilities pi."""
    return torch.argmax(torch.softmax(logits.log_pi, dim=-1), dim=-1)


def anneal(schedule: TemperatureSchedule, epoch: int) -> float:
    """
    tau(e) = tau_start * (tau_end / tau_start) ** (e / (total_epochs - 1)).
    Both endpoints are returned exactly.

    Raises:
        ScheduleError: If epoch is outside [0, total_epochs)
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise ScheduleError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch == 0 or schedule.total_epochs == 1:
        return schedule.tau_start
    if epoch == schedule.total_epochs - 1:
        return schedule.tau_end
    ratio = schedule.tau_end / schedule.tau_start
    return schedule.tau_start * ratio ** (epoch / (schedule.total_epochs - 1))


def temperature_profile(
    logits: ClassLogits,
    taus: Sequence[float],
    generator: torch.Generator,
) -> List[GsSample]:
    """One Gumbel-Softmax sample per temperature, all sharing the same noise draw."""
    noise = gumbel_noise(generator, logits.log_pi.shape, dtype=logits.log_pi.dtype)
    return [gumbel_softmax_sample(logits, tau, noise=noise) for tau in taus]
