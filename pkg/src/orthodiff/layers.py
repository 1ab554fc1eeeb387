"""Small shared building blocks for the toy networks."""

import math

import torch
from torch import nn

from .errors import ConfigurationError

# All models run in double precision: the toy scale makes it affordable and
# the verification suite relies on 1e-10-grade tolerances.
DTYPE = torch.float64

_ACTIVATIONS = {
    "silu": nn.SiLU,
    "identity": nn.Identity,
}


def make_activation(name):
    try:
        return _ACTIVATIONS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown activation: {name!r}") from None


class MLP(nn.Module):
    """Stack of linear layers; activation and dropout between layers only.

    ``dims`` lists the widths, so ``len(dims) - 1`` linear layers. ``bias``
    and ``activation`` exist so tests can build exactly linear maps.
    """

    def __init__(self, dims, activation="silu", dropout=0.0, bias=True):
        super().__init__()
        if len(dims) < 2:
            raise ConfigurationError("MLP needs at least input and output dims")
        layers = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1], bias=bias, dtype=DTYPE))
            if i < len(dims) - 2:
                layers.append(make_activation(activation))
                if dropout > 0:
                    layers.append(nn.Dropout(dropout))
        self.net = nn.Sequential(*layers)
        self.in_dim = dims[0]
        self.out_dim = dims[-1]

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(
                f"MLP expects last dim {self.in_dim}, got {x.shape[-1]}"
            )
        return self.net(x)


def sinusoidal_embedding(steps, dim, max_period=10000.0):
    """Classic sin/cos positional embedding for integer steps.

    steps: int tensor of shape [...]; returns [..., dim].
    """
    if dim % 2 != 0:
        raise ConfigurationError("sinusoidal embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=DTYPE) / half
    )
    angles = steps.to(DTYPE)[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def zero_init_(module):
    """Zero a layer's weight and bias in place (stable-start output heads)."""
    nn.init.zeros_(module.weight)
    if module.bias is not None:
        nn.init.zeros_(module.bias)
    return module
