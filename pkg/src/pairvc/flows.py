"""Speaker-conditioned affine coupling flow (VITS-style residual coupling).

Every coupling layer's output projection is zero initialised, so a freshly
built flow is the identity map in both directions.
"""

from __future__ import annotations

import torch
from torch import nn


class WN(nn.Module):
    """Gated dilated conv stack with a global conditioning vector."""

    def __init__(self, hidden: int, kernel_size: int, n_layers: int, cond_dim: int = 0):
        super().__init__()
        self.hidden = hidden
        self.in_layers = nn.ModuleList()
        self.res_skip = nn.ModuleList()
        for i in range(n_layers):
            dilation = 2 ** i
            pad = (kernel_size * dilation - dilation) // 2
            self.in_layers.append(nn.Conv1d(hidden, 2 * hidden, kernel_size, dilation=dilation, padding=pad))
            out = 2 * hidden if i < n_layers - 1 else hidden
            self.res_skip.append(nn.Conv1d(hidden, out, 1))
        self.cond = nn.Conv1d(cond_dim, 2 * hidden * n_layers, 1) if cond_dim else None

    def forward(self, x, g=None):
        out = torch.zeros_like(x)
        cond = self.cond(g.unsqueeze(-1)) if (self.cond is not None and g is not None) else None
        for i, (inp, rs) in enumerate(zip(self.in_layers, self.res_skip)):
            h = inp(x)
            if cond is not None:
                h = h + cond[:, i * 2 * self.hidden:(i + 1) * 2 * self.hidden]
            a, b = h.chunk(2, dim=1)
            acts = torch.tanh(a) * torch.sigmoid(b)
            rs_out = rs(acts)
            if i < len(self.in_layers) - 1:
                x = x + rs_out[:, :self.hidden]
                out = out + rs_out[:, self.hidden:]
            else:
                out = out + rs_out
        return out


class CouplingLayer(nn.Module):
    def __init__(self, channels: int, hidden: int, kernel_size: int = 5, n_layers: int = 2,
                 cond_dim: int = 0, mean_only: bool = False, scale_bound: float = 2.0):
        super().__init__()
        if channels % 2:
            raise ValueError("coupling flow needs an even channel count")
        self.half = channels // 2
        self.mean_only = mean_only
        self.scale_bound = scale_bound
        self.pre = nn.Conv1d(self.half, hidden, 1)
        self.enc = WN(hidden, kernel_size, n_layers, cond_dim)
        self.post = nn.Conv1d(hidden, self.half * (1 if mean_only else 2), 1)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def _stats(self, x0, g):
        stats = self.post(self.enc(self.pre(x0), g))
        if self.mean_only:
            return stats, torch.zeros_like(stats)
        m, raw = stats.chunk(2, dim=1)
        return m, self.scale_bound * torch.tanh(raw / self.scale_bound)

    def forward(self, x, g=None, reverse: bool = False):
        x0, x1 = x[:, :self.half], x[:, self.half:]
        m, logs = self._stats(x0, g)
        if not reverse:
            x1 = m + x1 * torch.exp(logs)
            logdet = logs.sum(dim=(1, 2))
        else:
            x1 = (x1 - m) * torch.exp(-logs)
            logdet = -logs.sum(dim=(1, 2))
        return torch.cat([x0, x1], dim=1), logdet


class SpeakerFlow(nn.Module):
    """Stack of coupling layers and channel flips.

    ``forward`` maps posterior latents ``z`` to prior space ``z_p`` and
    returns the accumulated log-determinant; ``inverse`` undoes it.
    Tensors are ``(batch, channels, frames)``, ``g`` is ``(batch, cond_dim)``.
    """

    def __init__(self, channels: int, hidden: int, n_flows: int = 4, kernel_size: int = 5,
                 n_layers: int = 2, cond_dim: int = 0, mean_only: bool = False):
        super().__init__()
        self.layers = nn.ModuleList(
            CouplingLayer(channels, hidden, kernel_size, n_layers, cond_dim, mean_only)
            for _ in range(n_flows)
        )

    def forward(self, z, g=None):
        logdet = torch.zeros(z.shape[0], dtype=z.dtype, device=z.device)
        for layer in self.layers:
            z, ld = layer(z, g)
            z = torch.flip(z, dims=[1])
            logdet = logdet + ld
        return z, logdet

    def inverse(self, z_p, g=None):
        for layer in reversed(self.layers):
            z_p = torch.flip(z_p, dims=[1])
            z_p, _ = layer(z_p, g, reverse=True)
        return z_p

    @torch.no_grad()
    def perturb_(self, generator: torch.Generator, scale: float):
        """Give the zero-initialised output projections random weights."""
        for layer in self.layers:
            for p in (layer.post.weight, layer.post.bias):
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * scale)
