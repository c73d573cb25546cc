"""Recurrent variational network: k-space unrolled optimization with a convolutional recurrent refiner."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import torch
from torch import nn

from .operators import (
    apply_mask,
    channels_to_complex,
    complex_to_channels,
    expand,
    fft2c,
    ifft2c,
    rss,
    sense_reconstruct,
)
from .sensitivity import SensitivityRefiner, estimate_initial_maps

__all__ = [
    "ConvGRUCell",
    "HiddenState",
    "ModelConfig",
    "RecurrentStateInitializer",
    "RecurrentUnit",
    "RecurrentVarNet",
    "block_step",
]

HiddenState = list  # list[torch.Tensor], one [B, C, n_y, n_x] tensor per recurrent layer


@dataclass
class ModelConfig:
    time_steps: int = 8
    recurrent_layers: int = 4
    hidden_channels: int = 128
    gru_kernel_size: int = 1
    rsi_dilations: tuple = (1, 1, 2, 4)
    rsi_filters: tuple = (32, 32, 64, 64)
    ser_filters: tuple = (8, 16, 32, 64)
    ser_negative_slope: float = 0.2
    use_ser: bool = True
    use_rsi: bool = True
    share_weights: bool = False
    rsi_input: str = "sense"

    def __post_init__(self):
        self.rsi_dilations = tuple(int(d) for d in self.rsi_dilations)
        self.rsi_filters = tuple(int(f) for f in self.rsi_filters)
        self.ser_filters = tuple(int(f) for f in self.ser_filters)
        if self.time_steps < 1:
            raise ValueError(f"time_steps must be >= 1, got {self.time_steps}.")
        if self.recurrent_layers < 1:
            raise ValueError(f"recurrent_layers must be >= 1, got {self.recurrent_layers}.")
        if len(self.rsi_dilations) != len(self.rsi_filters):
            raise ValueError("rsi_dilations and rsi_filters must have the same length.")
        if self.rsi_input not in ("sense", "rss"):
            raise ValueError(f"rsi_input must be 'sense' or 'rss', got {self.rsi_input!r}.")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class ConvGRUCell(nn.Module):
    """Convolutional GRU cell.

    ``z = sigmoid(W_z [x, h])``, ``r = sigmoid(W_r [x, h])``,
    ``h~ = tanh(W_h [x, r * h])``, ``h' = (1 - z) * h + z * h~``.
    """

    def __init__(self, input_channels: int, hidden_channels: int, kernel_size: int = 1):
        super().__init__()
        padding = kernel_size // 2
        self.update_gate = nn.Conv2d(input_channels + hidden_channels, hidden_channels, kernel_size, padding=padding)
        self.reset_gate = nn.Conv2d(input_channels + hidden_channels, hidden_channels, kernel_size, padding=padding)
        self.out_gate = nn.Conv2d(input_channels + hidden_channels, hidden_channels, kernel_size, padding=padding)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != h.shape[-2:]:
            raise ValueError(f"Input {tuple(x.shape)} and state {tuple(h.shape)} are not spatially aligned.")
        stacked = torch.cat([x, h], dim=1)
        z = torch.sigmoid(self.update_gate(stacked))
        r = torch.sigmoid(self.reset_gate(stacked))
        candidate = torch.tanh(self.out_gate(torch.cat([x, r * h], dim=1)))
        return (1 - z) * h + z * candidate


class RecurrentUnit(nn.Module):
    """Conv5x5 followed by ``n_layers`` of (Conv3x3 + ReLU, ConvGRU) and a 3x3 projection to two channels.

    ReLU follows every convolution except the output projection.
    """

    def __init__(self, in_channels: int = 2, hidden_channels: int = 128, n_layers: int = 4, gru_kernel_size: int = 1):
        super().__init__()
        self.n_layers = n_layers
        self.conv_in = nn.Conv2d(in_channels, hidden_channels, 5, padding=2)
        self.convs = nn.ModuleList(nn.Conv2d(hidden_channels, hidden_channels, 3, padding=1) for _ in range(n_layers))
        self.grus = nn.ModuleList(ConvGRUCell(hidden_channels, hidden_channels, gru_kernel_size) for _ in range(n_layers))
        self.conv_out = nn.Conv2d(hidden_channels, in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, hidden: HiddenState) -> tuple[torch.Tensor, HiddenState]:
        if len(hidden) != self.n_layers:
            raise ValueError(f"Expected {self.n_layers} hidden states, got {len(hidden)}.")
        out = torch.relu(self.conv_in(x))
        new_hidden = []
        for conv, gru, h in zip(self.convs, self.grus, hidden):
            out = gru(torch.relu(conv(out)), h)
            new_hidden.append(out)
        return self.conv_out(out), new_hidden


class RecurrentStateInitializer(nn.Module):
    """Dilated-convolution encoder producing the initial hidden state of every recurrent layer."""

    def __init__(
        self,
        in_channels: int = 2,
        hidden_channels: int = 128,
        n_layers: int = 4,
        dilations: tuple = (1, 1, 2, 4),
        filters: tuple = (32, 32, 64, 64),
    ):
        super().__init__()
        layers = []
        channels = in_channels
        for dilation, width in zip(dilations, filters):
            layers += [
                nn.ReplicationPad2d(dilation),
                nn.Conv2d(channels, width, 3, dilation=dilation),
                nn.ReLU(),
            ]
            channels = width
        self.encoder = nn.Sequential(*layers)
        self.heads = nn.ModuleList(nn.Conv2d(channels, hidden_channels, 1) for _ in range(n_layers))

    def forward(self, x: torch.Tensor) -> HiddenState:
        features = self.encoder(x)
        return [torch.relu(head(features)) for head in self.heads]


def block_step(
    kspace: torch.Tensor,
    masked_kspace: torch.Tensor,
    mask: torch.Tensor,
    maps: torch.Tensor,
    hidden: HiddenState,
    unit: Callable[[torch.Tensor, HiddenState], tuple[torch.Tensor, HiddenState]],
    step_size: torch.Tensor,
) -> tuple[torch.Tensor, HiddenState]:
    """One unrolled iteration in k-space.

    The current k-space is SENSE-combined and refined by ``unit``; the refinement
    is expanded back to coil k-space and added to a gradient step on the data
    term: ``y' = y - step * U(y - y~) + F(E(w))``.

    Parameters
    ----------
    kspace : torch.Tensor
        Current prediction ``[B, n_c, n_y, n_x]`` (complex).
    masked_kspace : torch.Tensor
        Acquired sub-sampled k-space, same shape.
    mask : torch.Tensor
        Sampling mask ``[B, n_y, n_x]``.
    maps : torch.Tensor
        Coil sensitivities, same shape as ``kspace``.
    hidden : list of torch.Tensor
        Recurrent state.
    unit : callable
        Recurrent unit mapping ``(image [B, 2, n_y, n_x], hidden)`` to ``(w, hidden)``.
    step_size : torch.Tensor
        Scalar step size of the data-consistency term.

    Returns
    -------
    tuple
        Next k-space prediction and next hidden state.
    """
    image = complex_to_channels(sense_reconstruct(kspace, maps), dim=1)
    refinement, hidden = unit(image, hidden)
    if not bool(torch.isfinite(refinement).all()):
        raise FloatingPointError("Recurrent unit produced non-finite activations.")
    residual = apply_mask(kspace - masked_kspace, mask)
    update = fft2c(expand(channels_to_complex(refinement, dim=1), maps))
    return kspace - step_size * residual + update, hidden


class RecurrentVarNet(nn.Module):
    """Unrolled k-space reconstruction network.

    Inputs are sub-sampled multi-coil k-space ``[B, n_c, n_y, n_x]`` (complex), the
    sampling mask ``[B, n_y, n_x]`` and the ACS mask ``[B, n_y, n_x]``. Unbatched
    inputs (no leading ``B``) are accepted as well.
    """

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        n_units = 1 if config.share_weights else config.time_steps
        self.units = nn.ModuleList(
            RecurrentUnit(2, config.hidden_channels, config.recurrent_layers, config.gru_kernel_size)
            for _ in range(n_units)
        )
        self.step_sizes = nn.Parameter(torch.ones(config.time_steps))
        self.rsi = (
            RecurrentStateInitializer(
                2 if config.rsi_input == "sense" else 1,
                config.hidden_channels,
                config.recurrent_layers,
                config.rsi_dilations,
                config.rsi_filters,
            )
            if config.use_rsi
            else None
        )
        self.ser = SensitivityRefiner(config.ser_filters, config.ser_negative_slope) if config.use_ser else None

    def unit(self, t: int) -> RecurrentUnit:
        return self.units[0 if self.config.share_weights else t]

    def sensitivity_maps(self, masked_kspace: torch.Tensor, acs: torch.Tensor) -> torch.Tensor:
        maps = estimate_initial_maps(masked_kspace, acs)
        if self.ser is not None:
            maps = self.ser(maps)
        return maps

    def initial_state(self, masked_kspace: torch.Tensor, maps: torch.Tensor) -> HiddenState:
        batch, _, n_y, n_x = masked_kspace.shape
        if self.rsi is None:
            dtype = masked_kspace.real.dtype
            return [
                masked_kspace.new_zeros((batch, self.config.hidden_channels, n_y, n_x), dtype=dtype)
                for _ in range(self.config.recurrent_layers)
            ]
        if self.config.rsi_input == "sense":
            init = complex_to_channels(sense_reconstruct(masked_kspace, maps), dim=1)
        else:
            init = rss(ifft2c(masked_kspace)).unsqueeze(1)
        return self.rsi(init)

    def forward(
        self, masked_kspace: torch.Tensor, mask: torch.Tensor, acs: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the unrolled reconstruction.

        Returns
        -------
        tuple of torch.Tensor
            Final k-space prediction and its root-sum-of-squares image ``[B, n_y, n_x]``.
        """
        unbatched = masked_kspace.dim() == 3
        if unbatched:
            masked_kspace, mask, acs = masked_kspace[None], mask[None], acs[None]
        mask = mask.to(masked_kspace.real.dtype)
        acs = acs.to(masked_kspace.real.dtype)

        maps = self.sensitivity_maps(masked_kspace, acs)
        hidden = self.initial_state(masked_kspace, maps)
        kspace = masked_kspace
        for t in range(self.config.time_steps):
            kspace, hidden = block_step(kspace, masked_kspace, mask, maps, hidden, self.unit(t), self.step_sizes[t])
        image = rss(ifft2c(kspace))
        if unbatched:
            return kspace[0], image[0]
        return kspace, image

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count for ``config``."""

    def conv(c_in, c_out, k, bias=True):
        return c_in * c_out * k * k + (c_out if bias else 0)

    c, n_l = config.hidden_channels, config.recurrent_layers
    unit = conv(2, c, 5) + n_l * (conv(c, c, 3) + 3 * conv(2 * c, c, config.gru_kernel_size)) + conv(c, 2, 3)
    total = unit * (1 if config.share_weights else config.time_steps) + config.time_steps

    if config.use_rsi:
        channels = 2 if config.rsi_input == "sense" else 1
        for width in config.rsi_filters:
            total += conv(channels, width, 3)
            channels = width
        total += n_l * conv(channels, c, 1)

    if config.use_ser:

        def block(c_in, c_out):
            return conv(c_in, c_out, 3, bias=False) + conv(c_out, c_out, 3, bias=False)

        channels = 2
        for width in config.ser_filters:
            total += block(channels, width)
            channels = width
        total += block(channels, 2 * channels)
        channels *= 2
        for width in reversed(config.ser_filters):
            total += conv(channels, width, 3, bias=False) + block(2 * width, width)
            channels = width
        total += conv(channels, 2, 1)
    return total
