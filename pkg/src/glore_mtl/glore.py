"""Latent-space global reasoning unit with a summary readout and injection port.

The unit projects coordinate-space features onto a small set of latent nodes,
applies one graph-convolution step among those nodes, and projects back with
a residual connection:

    assignment  B = softmax_over_nodes(theta(x)),  reshaped N x hw
    nodes       V = B . phi(x)^T                   (N x Cr)
    reasoning   Z = ((I - A) V) W                  (N x Cr)
    output      y = x + psi(B^T Z)

Two side channels ride on the latent space: a fixed-width per-sample summary
of the reasoned nodes (consumed by the interaction head), and an optional
injection port that adds a projected external vector to every latent node
before reasoning (the reverse sharing direction, driven by pooled scene-graph
edge features).
"""

import math

import torch
from torch import nn

GISF_DIM = 64


def _check_finite(tensor: torch.Tensor, stage: str) -> None:
    if not torch.isfinite(tensor).all():
        raise FloatingPointError(f"non-finite values produced at stage {stage!r}")


class GlobalReasoningUnit(nn.Module):
    """Coordinate -> latent projection, latent graph convolution, residual reprojection.

    ``psi`` is bias-free so that zeroing the state weight (or psi itself)
    makes the unit an exact identity on its input.
    """

    def __init__(
        self,
        channels: int,
        num_nodes: int = 16,
        latent_channels: int | None = None,
        summary_dim: int = GISF_DIM,
        injection_dim: int | None = None,
        summary_from_reasoned: bool = True,
    ):
        super().__init__()
        if channels < 1 or num_nodes < 1:
            raise ValueError("channels and num_nodes must be positive")
        latent_channels = latent_channels or max(1, channels // 4)
        self.channels = channels
        self.num_nodes = num_nodes
        self.latent_channels = latent_channels
        self.summary_dim = summary_dim
        self.summary_from_reasoned = summary_from_reasoned

        self.theta = nn.Conv2d(channels, num_nodes, 1)
        self.phi = nn.Conv2d(channels, latent_channels, 1)
        self.adjacency = nn.Parameter(torch.zeros(num_nodes, num_nodes))
        self.state_weight = nn.Parameter(torch.empty(latent_channels, latent_channels))
        nn.init.kaiming_uniform_(self.state_weight, a=math.sqrt(5))
        self.psi = nn.Conv2d(latent_channels, channels, 1, bias=False)
        self.summary_head = nn.Linear(latent_channels, summary_dim)
        if injection_dim is not None:
            # Zero-initialized so an untrained injection is an exact no-op.
            self.injection = nn.Linear(injection_dim, latent_channels)
            nn.init.zeros_(self.injection.weight)
            nn.init.zeros_(self.injection.bias)
        else:
            self.injection = None

    def assignment(self, x: torch.Tensor) -> torch.Tensor:
        """Soft node-assignment maps, normalized over nodes per location."""
        return torch.softmax(self.theta(x), dim=1)

    def forward(
        self, x: torch.Tensor, injection: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (reasoned map of the input's shape, per-sample summary vector)."""
        if x.dim() != 4:
            raise ValueError(f"expected B x C x h x w input, got {tuple(x.shape)}")
        b, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(
                f"channel mismatch: unit built for {self.channels}, input has {c}"
            )
        assign = self.assignment(x).reshape(b, self.num_nodes, h * w)
        _check_finite(assign, "assignment")
        latent = self.phi(x).reshape(b, self.latent_channels, h * w)
        nodes = torch.bmm(assign, latent.transpose(1, 2))
        if injection is not None:
            if self.injection is None:
                raise ValueError("unit was built without an injection port")
            if injection.shape != (b, self.injection.in_features):
                raise ValueError(
                    f"injection must be {b} x {self.injection.in_features}, "
                    f"got {tuple(injection.shape)}"
                )
            nodes = nodes + self.injection(injection).unsqueeze(1)
        _check_finite(nodes, "latent_nodes")
        propagated = nodes - torch.matmul(self.adjacency, nodes)
        reasoned = torch.matmul(propagated, self.state_weight)
        _check_finite(reasoned, "reasoned_nodes")
        back = torch.bmm(assign.transpose(1, 2), reasoned)
        y = x + self.psi(back.transpose(1, 2).reshape(b, self.latent_channels, h, w))
        _check_finite(y, "output")
        source = reasoned if self.summary_from_reasoned else nodes
        summary = self.summary_head(source.mean(dim=1))
        _check_finite(summary, "summary")
        return y, summary


class EdgeSummaryProjector(nn.Module):
    """Pools scene-graph edge features into one injection vector per frame."""

    def __init__(self, edge_dim: int, injection_dim: int = GISF_DIM):
        super().__init__()
        self.edge_dim = edge_dim
        self.proj = nn.Linear(edge_dim, injection_dim)

    def forward(self, edge_features) -> torch.Tensor:
        """Mean-pool edge vectors (zeros when the frame has no edges), then project."""
        if isinstance(edge_features, (list, tuple)):
            if edge_features:
                widths = {int(v.shape[-1]) for v in edge_features}
                if widths != {self.edge_dim}:
                    raise ValueError(
                        f"edge vectors must all have width {self.edge_dim}, got {sorted(widths)}"
                    )
                stacked = torch.stack([v.reshape(-1) for v in edge_features])
            else:
                stacked = self.proj.weight.new_zeros((0, self.edge_dim))
        else:
            stacked = edge_features
            if stacked.dim() != 2 or stacked.shape[1] != self.edge_dim:
                raise ValueError(
                    f"expected E x {self.edge_dim} edge features, got {tuple(stacked.shape)}"
                )
        if stacked.shape[0] == 0:
            pooled = self.proj.weight.new_zeros(self.edge_dim)
        else:
            pooled = stacked.mean(dim=0)
        return self.proj(pooled)
