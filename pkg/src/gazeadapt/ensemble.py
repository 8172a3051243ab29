"""Online and momentum model groups.

The online group holds the H gradient-trained networks; the momentum
group holds their temporally averaged twins, updated once per iteration
as

    E_T[theta] = alpha * E_(T-1)[theta] + (1 - alpha) * theta

and never touched by any optimizer. At initialization the momentum
parameters are exact copies of the online ones. After adaptation the
first online member is extracted as the adapted model.
"""

import contextlib
import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .checkpoint import load_into
from .core import SampleBatch


class GazeBackbone(nn.Module):
    """Contract for pluggable gaze regressors.

    A backbone pairs a feature extractor (image batch -> B x F features)
    with a regression head (features -> B x 2 gaze), and the full
    prediction is their composition. Parameter names and shapes must be
    stable across instances of the same architecture so that EMA updates
    and checkpoint loading are well-defined.
    """

    architecture_id = "base"
    in_channels = 1
    image_size = 32
    feature_dim = 16

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def predict_head(self, features: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.predict_head(self.extract_features(images))


@dataclass
class GroupState:
    """The collaborating pair of model groups plus the EMA coefficient."""

    online_members: list[GazeBackbone]
    momentum_members: list[GazeBackbone]
    alpha: float
    iteration: int = 1

    @property
    def size(self) -> int:
        return len(self.online_members)


def _freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def init_group(checkpoints: list, factory, alpha: float) -> GroupState:
    """Build a group state from H >= 2 checkpoint archives.

    factory() must return a fresh backbone of the matching architecture;
    each checkpoint is loaded into one online member and the momentum
    members start as exact copies. Momentum members are frozen (no
    gradients, inference mode) from the start.
    """
    if len(checkpoints) < 2:
        raise ValueError(f"a group needs H >= 2 members, got {len(checkpoints)}")
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    online = []
    momentum = []
    for ckpt in checkpoints:
        model = factory()
        load_into(model, ckpt)
        online.append(model)
        momentum.append(_freeze(copy.deepcopy(model)))
    return GroupState(online_members=online, momentum_members=momentum, alpha=alpha)


@torch.no_grad()
def ema_update(state: GroupState) -> GroupState:
    """Move every momentum tensor toward its online twin by (1 - alpha).

    Covers parameters and buffers alike (normalization statistics are
    averaged with the same coefficient); non-floating tensors are copied.
    alpha = 0 degenerates to an exact copy.
    """
    a = state.alpha
    for online, momentum in zip(state.online_members, state.momentum_members):
        online_sd = online.state_dict()
        for name, m_t in momentum.state_dict().items():
            o_t = online_sd[name]
            if not torch.is_floating_point(m_t) or a == 0.0:
                m_t.copy_(o_t)
            else:
                # m += (1 - a) * (o - m): exact fixed point when o == m
                m_t.add_(o_t - m_t, alpha=1.0 - a)
    state.iteration += 1
    return state


def batch_to_tensor(batch: SampleBatch) -> torch.Tensor:
    """Stack a sample batch into a (B, C, H, W) float32 tensor."""
    images = batch.images()  # (B, H, W, C)
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def group_forward(members: list[GazeBackbone], batch: SampleBatch):
    """Run every member on a batch; returns (H, B, F) features and (H, B, 2) predictions.

    Members whose parameters require no gradient (the momentum group) are
    evaluated under no_grad, so their outputs are plain constants to any
    loss that consumes them.
    """
    if not members:
        raise ValueError("member list must be nonempty")
    images = batch_to_tensor(batch)
    ref = members[0]
    expected = (ref.in_channels, ref.image_size, ref.image_size)
    if tuple(images.shape[1:]) != expected:
        raise ValueError(
            f"image shape {tuple(images.shape[1:])} incompatible with "
            f"architecture input {expected}"
        )
    feats, preds = [], []
    for member in members:
        needs_grad = any(p.requires_grad for p in member.parameters())
        ctx = contextlib.nullcontext() if needs_grad else torch.no_grad()
        with ctx:
            z = member.extract_features(images)
            g = member.predict_head(z)
        feats.append(z)
        preds.append(g)
    return torch.stack(feats), torch.stack(preds)


def extract_adapted(state: GroupState) -> GazeBackbone:
    """Return a standalone copy of the first online member (member #1)."""
    return copy.deepcopy(state.online_members[0])
