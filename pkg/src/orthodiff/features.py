"""Multi-layer image feature extraction.

A small convolutional encoder exposes five tap points (input stem plus four
conv blocks); each tap is global-average-pooled to one vector, giving an
ordered set of five per-layer features per image.  A shared perceptron then
maps every tap vector into the main feature space used downstream.
"""

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InputError
from .layers import DTYPE, MLP, make_activation

NUM_TAPS = 5


def image_to_tensor(image):
    """Convert an H×W×C array in [0, 1] to a [C, H, W] double tensor."""
    if isinstance(image, torch.Tensor):
        t = image.to(DTYPE)
        if t.dim() == 3 and t.shape[0] in (1, 3):
            return t
        if t.dim() == 3:  # HWC tensor
            return t.permute(2, 0, 1).contiguous()
        raise InputError(f"expected 3D image, got shape {tuple(t.shape)}")
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise InputError(f"expected H×W×C image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(DTYPE)


class ImageEncoder(nn.Module):
    """Frozen-after-pretraining conv trunk with five pooled tap points.

    Stand-in for a large pretrained image tower: one stem conv plus four
    stride-2-capable blocks, every stage tapped and pooled to a ``dim``
    vector.  ``activation='identity'`` with ``bias=False`` yields an exactly
    linear encoder, which several tests rely on.
    """

    def __init__(self, dim=64, in_channels=3, image_size=32,
                 activation="silu", bias=True):
        super().__init__()
        self.dim = dim
        self.in_channels = in_channels
        self.image_size = image_size
        self.stem = nn.Conv2d(in_channels, dim, 3, padding=1, bias=bias, dtype=DTYPE)
        # Strides shrink 32 -> 16 -> 8 -> 4 -> 4; the last block keeps size so
        # tiny inputs (8x8 in the gradient-check config) stay >= 1 pixel.
        strides = [2, 2, 2, 1]
        self.blocks = nn.ModuleList(
            nn.Conv2d(dim, dim, 3, stride=s, padding=1, bias=bias, dtype=DTYPE)
            for s in strides
        )
        self.act = make_activation(activation)

    def forward(self, x):
        """x: [B, C, H, W] -> per-layer features [B, 5, dim]."""
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"encoder expects [B, {self.in_channels}, H, W], got {tuple(x.shape)}"
            )
        if x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise ConfigurationError(
                f"encoder configured for {self.image_size}x{self.image_size} inputs, "
                f"got {tuple(x.shape[2:])}"
            )
        if not torch.isfinite(x).all():
            raise InputError("image contains non-finite pixels")
        taps = []
        h = self.act(self.stem(x))
        taps.append(h.mean(dim=(2, 3)))
        for block in self.blocks:
            h = self.act(block(h))
            taps.append(h.mean(dim=(2, 3)))
        return torch.stack(taps, dim=1)  # [B, 5, dim]


class FeatureMapper(nn.Module):
    """Five-layer perceptron with dropout, shared across the five taps."""

    def __init__(self, in_dim=64, out_dim=64, hidden=64, dropout=0.1,
                 activation="silu", bias=True):
        super().__init__()
        self.mlp = MLP([in_dim, hidden, hidden, hidden, hidden, out_dim],
                       activation=activation, dropout=dropout, bias=bias)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, features):
        """features: [..., 5, in_dim] -> [..., 5, out_dim]."""
        if features.shape[-2] != NUM_TAPS:
            raise ConfigurationError(
                f"expected {NUM_TAPS} tap vectors, got {features.shape[-2]}"
            )
        return self.mlp(features)


def encode_image(image, encoder):
    """Encode one image into its five per-layer feature vectors [5, dim]."""
    x = image_to_tensor(image)
    return encoder(x.unsqueeze(0)).squeeze(0)


def map_features(raw, mapper):
    """Map raw per-layer features into the main feature space."""
    if raw.shape[-1] != mapper.in_dim:
        raise ConfigurationError(
            f"mapper expects dim {mapper.in_dim}, got {raw.shape[-1]}"
        )
    return mapper(raw)
