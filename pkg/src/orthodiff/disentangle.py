"""Nuisance-feature prediction and orthogonal-projection decoupling.

Expert perceptrons predict per-layer pose and background features from the
main features; those directions are then removed from the main features by
subtracting projections, either sequentially (pose first, then background)
or jointly against an orthogonalized pair of directions.
"""

import logging

import torch
from torch import nn

from .errors import ConfigurationError, InputError
from .features import NUM_TAPS
from .layers import MLP

log = logging.getLogger(__name__)

FACTORS = ("pose", "background")

# Below this squared norm a direction is treated as absent: projecting onto
# (numerically) nothing removes nothing.
DEFAULT_EPS_PER_DIM = 1e-12


def default_eps(dim):
    return DEFAULT_EPS_PER_DIM * dim


def project_out(v, u, eps=None):
    """Remove from ``v`` its projection onto ``u``: v - (<v,u>/||u||^2) u.

    Operates on the last dimension; broadcasts over leading dimensions.
    Directions with ||u||^2 < eps pass ``v`` through unchanged.
    """
    if v.shape[-1] != u.shape[-1]:
        raise InputError(
            f"dimension mismatch: v has {v.shape[-1]}, u has {u.shape[-1]}"
        )
    if not (torch.isfinite(v).all() and torch.isfinite(u).all()):
        raise InputError("non-finite entries in projection inputs")
    if eps is None:
        eps = default_eps(v.shape[-1])
    elif eps <= 0:
        raise InputError("eps must be positive")
    sq = (u * u).sum(dim=-1, keepdim=True)
    coef = (v * u).sum(dim=-1, keepdim=True) / torch.clamp(sq, min=eps)
    keep = (sq >= eps).to(v.dtype)
    return v - keep * coef * u


def gram_schmidt(vectors, eps=None):
    """Orthogonalize vectors (stacked on dim -2) by modified Gram-Schmidt.

    Degenerate inputs stay as (near-)zero rows rather than being normalized,
    so callers can project against the result without special cases.
    """
    if eps is None:
        eps = default_eps(vectors.shape[-1])
    basis = []
    for i in range(vectors.shape[-2]):
        w = vectors[..., i, :]
        for b in basis:
            w = project_out(w, b, eps)
        basis.append(w)
    return torch.stack(basis, dim=-2)


def decouple(main, pose, background, mode="sequential", eps=None, lift=None):
    """Remove pose and background directions from the main features.

    main: [..., 5, d_main]; pose/background: [..., 5, d_nuis]. ``lift`` is an
    optional fixed [d_nuis, d_main] matrix applied to the nuisance vectors
    when dimensions differ (identity when omitted and dims match).

    sequential: ((main ⊖ pose) ⊖ background), exactly orthogonal to the
    background direction. joint: orthogonalize {pose, background} first, then
    subtract both projections, exactly orthogonal to both.
    """
    if main.shape[-2] != NUM_TAPS or pose.shape[-2] != NUM_TAPS \
            or background.shape[-2] != NUM_TAPS:
        raise InputError(
            "layer-count mismatch: expected "
            f"{NUM_TAPS} layers, got {main.shape[-2]}/{pose.shape[-2]}/"
            f"{background.shape[-2]}"
        )
    if lift is not None:
        pose = pose @ lift
        background = background @ lift
    if pose.shape[-1] != main.shape[-1] or background.shape[-1] != main.shape[-1]:
        raise InputError(
            "nuisance feature dim does not match main dim and no lift given"
        )
    if eps is None:
        eps = default_eps(main.shape[-1])
    if mode == "sequential":
        return project_out(project_out(main, pose, eps), background, eps)
    if mode == "joint":
        basis = gram_schmidt(torch.stack([pose, background], dim=-2), eps)
        out = main
        for i in range(basis.shape[-2]):
            out = project_out(out, basis[..., i, :], eps)
        return out
    raise ConfigurationError(f"unknown decouple mode: {mode!r}")


class DimensionLift(nn.Module):
    """Fixed, non-trainable linear lift from nuisance dim to main dim.

    Identity when the dims agree; otherwise a seeded random orthonormal-column
    map, frozen at construction.
    """

    def __init__(self, in_dim, out_dim, seed=0):
        super().__init__()
        if in_dim == out_dim:
            matrix = torch.eye(in_dim, dtype=torch.float64)
        else:
            gen = torch.Generator().manual_seed(seed)
            raw = torch.randn(in_dim, out_dim, generator=gen, dtype=torch.float64)
            q, _ = torch.linalg.qr(raw.T if in_dim < out_dim else raw)
            matrix = q.T if in_dim < out_dim else q
            matrix = matrix[:in_dim, :out_dim]
        self.register_buffer("matrix", matrix)
        self.identity = in_dim == out_dim

    def forward(self, x):
        if self.identity:
            return x
        return x @ self.matrix


class ExpertNetwork(nn.Module):
    """Three-layer perceptron predicting one nuisance factor's features."""

    def __init__(self, factor, in_dim=64, out_dim=64, hidden=64, dropout=0.1,
                 activation="silu", bias=True):
        super().__init__()
        if factor not in FACTORS:
            raise ConfigurationError(f"factor must be one of {FACTORS}, got {factor!r}")
        self.factor = factor
        self.mlp = MLP([in_dim, hidden, hidden, out_dim],
                       activation=activation, dropout=dropout, bias=bias)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, features):
        """features: [..., 5, in_dim] -> predicted factor features."""
        return self.mlp(features)


def predict_nuisance(main, expert):
    """Run one expert over the five main feature vectors."""
    if main.shape[-2] != NUM_TAPS:
        raise ConfigurationError(
            f"expected {NUM_TAPS} layers, got {main.shape[-2]}"
        )
    if main.shape[-1] != expert.in_dim:
        raise ConfigurationError(
            f"expert expects dim {expert.in_dim}, got {main.shape[-1]}"
        )
    return expert(main)


def ground_truth_features(images, encoder, factor):
    """Frozen-encoder target features for one nuisance factor.

    factor='background': images is [..., C, H, W], the subject-free render.
    factor='pose': images is [..., V, C, H, W]; the per-layer features of the
    V >= 1 pose-matched variants are averaged so appearance cancels out.
    Gradients never flow into the result.
    """
    if factor not in FACTORS:
        raise InputError(f"factor must be one of {FACTORS}, got {factor!r}")
    with torch.no_grad():
        if factor == "background":
            batched = images.dim() == 4
            x = images if batched else images.unsqueeze(0)
            feats = encoder(x)
            return feats if batched else feats.squeeze(0)
        if images.dim() not in (4, 5):  # [V, C, H, W] or [B, V, C, H, W]
            raise InputError(
                f"pose variants must be [V,C,H,W] or [B,V,C,H,W], got shape "
                f"{tuple(images.shape)}"
            )
        if images.shape[-4] < 1:
            raise InputError("need at least 1 pose variant")
        flat = images.reshape(-1, *images.shape[-3:])
        feats = encoder(flat).reshape(*images.shape[:-3], NUM_TAPS, -1)
        return feats.mean(dim=-3)  # average variants; appearance cancels


def cosine_alignment(a, b, eps=1e-30):
    """Mean over the five layers of cos(a_layer, b_layer), per sample.

    Pairs where either vector has (near-)zero norm contribute similarity 0
    (loss term 1) and are logged rather than raised, so early training with
    tiny features cannot crash.
    """
    dot = (a * b).sum(dim=-1)
    norms = a.norm(dim=-1) * b.norm(dim=-1)
    degenerate = norms < eps
    if degenerate.any():
        log.warning("cosine over zero-norm vectors in %d layer pairs; treating as 0",
                    int(degenerate.sum()))
    cos = torch.where(degenerate, torch.zeros_like(dot), dot / torch.clamp(norms, min=eps))
    return cos.mean(dim=-1)


def alignment_loss(predicted, truth):
    """Cosine alignment loss between predicted and target nuisance features.

    predicted/truth: mappings from factor name to [B, 5, d] tensors, matched
    by sample index. Returns (1/N) sum_i sum_k (1 - cos_k^(i)) where the
    per-sample cosine is averaged over the five layers; range [0, 2*|factors|].
    """
    if set(predicted) != set(truth):
        raise InputError(
            f"factor sets differ: {sorted(predicted)} vs {sorted(truth)}"
        )
    if not predicted:
        raise InputError("no factors given")
    total = None
    for factor in sorted(predicted):
        p, t = predicted[factor], truth[factor]
        if p.shape != t.shape:
            raise InputError(
                f"{factor}: predicted shape {tuple(p.shape)} != truth {tuple(t.shape)}"
            )
        term = (1.0 - cosine_alignment(p, t)).mean()
        total = term if total is None else total + term
    return total
