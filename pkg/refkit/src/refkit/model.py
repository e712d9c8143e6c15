"""Torch capsule network used for desk-scale training.

Inference path: 9x9 conv (relu) -> 9x9 stride-2 conv grouped into
8-dimensional capsules (squashed) -> per-pair prediction vectors -> three
rounds of routing by agreement (softmax over output capsules, weighted sum,
squash, logit update skipped on the last round). Class scores are the output
capsule norms; training uses the standard margin loss.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def squash(s: torch.Tensor, dim: int = -1) -> torch.Tensor:
    n2 = (s * s).sum(dim=dim, keepdim=True)
    return s * (n2.sqrt() / (1.0 + n2))


class CapsNet(nn.Module):
    def __init__(
        self,
        conv1_channels: int = 256,
        capsule_types: int = 32,
        caps_dim: int = 8,
        digit_caps: int = 10,
        digit_dim: int = 16,
        kernel: int = 9,
        grid: int = 6,
        routing_iters: int = 3,
    ):
        super().__init__()
        primary_channels = capsule_types * caps_dim
        self.caps_dim = caps_dim
        self.capsule_types = capsule_types
        self.grid = grid
        self.digit_caps = digit_caps
        self.digit_dim = digit_dim
        self.routing_iters = routing_iters
        self.conv1 = nn.Conv2d(1, conv1_channels, kernel)
        self.primary = nn.Conv2d(conv1_channels, primary_channels, kernel, stride=2)
        in_caps = capsule_types * grid * grid
        self.routing_w = nn.Parameter(
            0.05 * torch.randn(in_caps, digit_caps, digit_dim, caps_dim)
        )

    @property
    def in_caps(self) -> int:
        return self.routing_w.shape[0]

    def primary_capsules(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, T*8, g, g) -> (B, T*g*g, 8); capsule index = type*g*g + position."""
        b, c, gh, gw = feats.shape
        caps = feats.view(b, self.capsule_types, self.caps_dim, gh * gw)
        caps = caps.permute(0, 1, 3, 2).reshape(b, self.capsule_types * gh * gw, self.caps_dim)
        return squash(caps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Return output capsule norms (B, digit_caps)."""
        feats = F.relu(self.conv1(x))
        caps = self.primary_capsules(self.primary(feats))
        u_hat = torch.einsum("bid,ijkd->bijk", caps, self.routing_w)
        v = self.route(u_hat)
        return v.norm(dim=-1)

    def route(self, u_hat: torch.Tensor) -> torch.Tensor:
        b = torch.zeros(u_hat.shape[:3], device=u_hat.device, dtype=u_hat.dtype)
        v = None
        for it in range(self.routing_iters):
            c = torch.softmax(b, dim=2)
            s = torch.einsum("bij,bijk->bjk", c, u_hat)
            v = squash(s)
            if it < self.routing_iters - 1:
                b = b + torch.einsum("bijk,bjk->bij", u_hat, v)
        return v


def margin_loss(norms: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    t = F.one_hot(labels, norms.shape[1]).to(norms.dtype)
    present = t * F.relu(0.9 - norms) ** 2
    absent = 0.5 * (1.0 - t) * F.relu(norms - 0.1) ** 2
    return (present + absent).sum(dim=1).mean()


def export_tensors(model: CapsNet) -> dict:
    """float32 numpy views of the parameters, named for the engine's CLI."""
    with torch.no_grad():
        return {
            "conv1.weight": model.conv1.weight.numpy().astype(np.float32),
            "conv1.bias": model.conv1.bias.numpy().astype(np.float32),
            "primary_caps.weight": model.primary.weight.numpy().astype(np.float32),
            "primary_caps.bias": model.primary.bias.numpy().astype(np.float32),
            "digit_caps.weight": model.routing_w.numpy().astype(np.float32),
        }


def model_from_tensors(tensors: dict, routing_iters: int = 3) -> CapsNet:
    """Rebuild a (possibly compacted) model from exported tensors."""
    conv1_w = tensors["conv1.weight"]
    primary_w = tensors["primary_caps.weight"]
    routing = tensors["digit_caps.weight"]
    in_caps, digit_caps, digit_dim, caps_dim = routing.shape
    types = primary_w.shape[0] // caps_dim
    grid = int(round((in_caps // types) ** 0.5))
    model = CapsNet(
        conv1_channels=conv1_w.shape[0],
        capsule_types=types,
        caps_dim=caps_dim,
        digit_caps=digit_caps,
        digit_dim=digit_dim,
        kernel=conv1_w.shape[2],
        grid=grid,
        routing_iters=routing_iters,
    )
    with torch.no_grad():
        model.conv1.weight.copy_(torch.from_numpy(conv1_w))
        model.conv1.bias.copy_(torch.from_numpy(tensors["conv1.bias"]))
        model.primary.weight.copy_(torch.from_numpy(primary_w))
        model.primary.bias.copy_(torch.from_numpy(tensors["primary_caps.bias"]))
        model.routing_w.copy_(torch.from_numpy(routing))
    return model
