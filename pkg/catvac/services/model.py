"""
The three networks of the categorical VAE:
  h (CategoricalEncoder):  x -> K class logits
  f (GaussianEncoder):     (y, x) -> [mu, log_var] of q(z | y, x)
  g (Decoder):             (y, z) -> x_hat
plus the reparametrization trick that ties f to g.

Tensors are laid out (batch, time, freq); conv stacks see (batch, channels, time, freq).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from pydantic import BaseModel, field_validator, model_validator
from torch import nn

from ..errors import ShapeError
from .gumbel import ClassLogits, GsSample, gumbel_noise, gumbel_softmax_sample

logger = logging.getLogger(__name__)


class ModelConfig(BaseModel):
    """Architecture hyperparameters for 128 x 128 inputs and d_z = 32."""
    K: int = 10
    d_z: int = 32
    conv_channels: Tuple[int, ...] = (16, 32, 64, 128)
    gru_hidden: int = 128
    gru_layers: int = 2
    kernel: Tuple[int, int] = (8, 8)
    stride: Tuple[int, int] = (2, 2)
    padding: Tuple[int, int] = (3, 3)
    input_freq_bins: int = 128
    input_frames: int = 128
    bn_momentum: float = 0.1

    @field_validator("conv_channels")
    @classmethod
    def _channels(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value or any(c < 1 for c in value):
            raise ValueError("conv_channels must be a nonempty tuple of positive ints")
        return value

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.d_z < 1:
            raise ValueError("d_z must be >= 1")
        if self.gru_hidden < 1 or self.gru_layers < 1:
            raise ValueError("GRU sizes must be positive")
        divisor = self.downsampling
        if self.input_frames % divisor or self.input_freq_bins % divisor:
            raise ValueError(f"input_frames and input_freq_bins must be divisible by {divisor}")
        for n in (self.input_frames, self.input_freq_bins):
            for _ in self.conv_channels:
                m = conv_output_size(n, self)
                if deconv_output_size(m, self) != n:
                    raise ValueError("kernel/stride/padding do not round-trip the input shape")
                n = m
        return self

    @property
    def downsampling(self) -> int:
        return self.stride[0] ** len(self.conv_channels)

    @property
    def encoded_frames(self) -> int:
        return self.input_frames // self.downsampling

    @property
    def encoded_bins(self) -> int:
        return self.input_freq_bins // self.downsampling


def conv_output_size(n: int, config: ModelConfig) -> int:
    """One conv stage: floor((n + 2p - k) / s) + 1."""
    return (n + 2 * config.padding[0] - config.kernel[0]) // config.stride[0] + 1


def deconv_output_size(n: int, config: ModelConfig) -> int:
    """One transposed-conv stage: (n - 1) s - 2p + k."""
    return (n - 1) * config.stride[0] - 2 * config.padding[0] + config.kernel[0]


@dataclass
class GaussianPosterior:
    """q(z | y, x) as mean and log-variance, each (batch, d_z)."""
    mu: torch.Tensor
    log_var: torch.Tensor

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_var)


@dataclass
class LatentSample:
    """z = mu + exp(log_var / 2) * epsilon, with the epsilon used."""
    z: torch.Tensor
    epsilon: torch.Tensor


@dataclass
class ForwardOutput:
    logits: ClassLogits
    probs: torch.Tensor
    y: GsSample
    posterior: GaussianPosterior
    latent: LatentSample
    x_hat: torch.Tensor


def reparametrize(
    post: GaussianPosterior,
    generator: Optional[torch.Generator] = None,
    epsilon: Optional[torch.Tensor] = None,
) -> LatentSample:
    """Differentiable Gaussian sample via z = mu + sigma * epsilon, epsilon ~ N(0, I)."""
    if epsilon is None:
        epsilon = torch.randn(post.mu.shape, generator=generator, dtype=post.mu.dtype, device=post.mu.device)
    z = post.mu + torch.exp(0.5 * post.log_var) * epsilon
    return LatentSample(z=z, epsilon=epsilon)


class ConvStack(nn.Module):
    """Stride-2 conv stages, each conv (no bias) → batch-norm → ReLU."""

    def __init__(self, in_channels: int, config: ModelConfig):
        super().__init__()
        layers = []
        for out_channels in config.conv_channels:
            layers += [
                nn.Conv2d(in_channels, out_channels, config.kernel, stride=config.stride, padding=config.padding, bias=False),
                nn.BatchNorm2d(out_channels, momentum=config.bn_momentum),
                nn.ReLU(),
            ]
            in_channels = out_channels
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class RecurrentSummary(nn.Module):
    """GRU over time on flattened (channels x freq) features; returns the last hidden state."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        features = config.conv_channels[-1] * config.encoded_bins
        self.gru = nn.GRU(features, config.gru_hidden, num_layers=config.gru_layers, batch_first=True)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        batch, channels, frames, bins = h.shape
        sequence = h.permute(0, 2, 1, 3).reshape(batch, frames, channels * bins)
        _, last = self.gru(sequence)
        return last[-1]


class CategoricalEncoder(nn.Module):
    """h: x -> K logits."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.conv = ConvStack(1, config)
        self.rnn = RecurrentSummary(config)
        self.out = nn.Linear(config.gru_hidden, config.K)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.rnn(self.conv(x.unsqueeze(1))))


class GaussianEncoder(nn.Module):
    """f: (y, x) -> (mu, log_var); y enters as K constant planes next to x."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.d_z = config.d_z
        self.conv = ConvStack(1 + config.K, config)
        self.rnn = RecurrentSummary(config)
        self.out = nn.Linear(config.gru_hidden, 2 * config.d_z)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        batch, frames, bins = x.shape
        planes = y[:, :, None, None].expand(batch, y.shape[1], frames, bins)
        stacked = torch.cat([x.unsqueeze(1), planes], dim=1)
        mu, log_var = self.out(self.rnn(self.conv(stacked))).split(self.d_z, dim=-1)
        return mu, log_var


class Decoder(nn.Module):
    """g: [y; z] -> seed tensor -> transposed-conv stages -> sigmoid grid."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.seed_shape = (config.conv_channels[-1], config.encoded_frames, config.encoded_bins)
        self.seed = nn.Linear(config.K + config.d_z, config.conv_channels[-1] * config.encoded_frames * config.encoded_bins)

        out_channels = list(reversed(config.conv_channels[:-1])) + [1]
        layers = []
        in_channels = config.conv_channels[-1]
        for index, channels in enumerate(out_channels):
            layers.append(nn.ConvTranspose2d(in_channels, channels, config.kernel, stride=config.stride, padding=config.padding))
            layers.append(nn.Sigmoid() if index == len(out_channels) - 1 else nn.ReLU())
            in_channels = channels
        self.layers = nn.Sequential(*layers)

    def forward(self, y: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        seed = self.seed(torch.cat([y, z], dim=-1)).view(-1, *self.seed_shape)
        return self.layers(seed).squeeze(1)


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GRU):
            for name, param in m.named_parameters():
                if name.startswith("weight_hh"):
                    for gate in param.data.chunk(3, dim=0):
                        nn.init.orthogonal_(gate)
                elif name.startswith("weight_ih"):
                    nn.init.kaiming_uniform_(param, nonlinearity="linear")
                else:
                    nn.init.zeros_(param)


class CategoricalVAE(nn.Module):
    """h, f and g trained jointly. h and f do not share weights."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.h = CategoricalEncoder(config)
        self.f = GaussianEncoder(config)
        self.g = Decoder(config)
        _init_weights(self)

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x.unsqueeze(0)
        expected = (self.config.input_frames, self.config.input_freq_bins)
        if x.dim() != 3 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"input shape: expected (batch, {expected[0]}, {expected[1]}), got {tuple(x.shape)}")
        return x

    def encode_categorical(self, x: torch.Tensor) -> ClassLogits:
        """h(x): K finite logits per item."""
        return ClassLogits(self.h(self._check_input(x)))

    def encode_gaussian(self, x: torch.Tensor, y: GsSample) -> GaussianPosterior:
        """f(y, x): posterior over z given the (relaxed) class sample."""
        x = self._check_input(x)
        if y.y.dim() != 2 or y.y.shape != (x.shape[0], self.config.K):
            raise ShapeError(f"class sample shape: expected ({x.shape[0]}, {self.config.K}), got {tuple(y.y.shape)}")
        mu, log_var = self.f(x, y.y)
        return GaussianPosterior(mu=mu, log_var=log_var)

    def decode(self, y: GsSample, z: LatentSample) -> torch.Tensor:
        """g(y, z): reconstruction with entries in (0, 1)."""
        if y.y.shape[-1] != self.config.K or z.z.shape[-1] != self.config.d_z or y.y.shape[0] != z.z.shape[0]:
            raise ShapeError(f"decoder inputs: got y {tuple(y.y.shape)} and z {tuple(z.z.shape)}")
        return self.g(y.y, z.z)

    def forward(
        self,
        x: torch.Tensor,
        tau: float,
        generator: Optional[torch.Generator] = None,
        gumbel: Optional[torch.Tensor] = None,
        epsilon: Optional[torch.Tensor] = None,
    ) -> ForwardOutput:
        """
        h → Gumbel-Softmax sample at tau → f → reparametrize → g.

        Args:
            x: (batch, T, F) features
            tau: Gumbel-Softmax temperature
            generator: RNG for the Gumbel and Gaussian noise
            gumbel: Fixed Gumbel noise (batch, K), overrides the generator
            epsilon: Fixed Gaussian noise (batch, d_z), overrides the generator
        """
        x = self._check_input(x)
        logits = self.encode_categorical(x)
        if gumbel is None:
            gumbel = gumbel_noise(generator, logits.log_pi.shape, dtype=logits.log_pi.dtype)
        y = gumbel_softmax_sample(logits, tau, noise=gumbel.to(logits.log_pi.device))
        posterior = self.encode_gaussian(x, y)
        latent = reparametrize(posterior, generator=generator, epsilon=epsilon)
        x_hat = self.decode(y, latent)
        return ForwardOutput(
            logits=logits,
            probs=torch.softmax(logits.log_pi, dim=-1),
            y=y,
            posterior=posterior,
            latent=latent,
            x_hat=x_hat,
        )

    @torch.no_grad()
    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Latent means mu(x, one_hot(argmax pi)) for geometry metrics in latent space."""
        x = self._check_input(x)
        logits = self.encode_categorical(x)
        one_hot = nn.functional.one_hot(logits.log_pi.argmax(dim=-1), self.config.K).to(x.dtype)
        mu, _ = self.f(x, one_hot)
        return mu
