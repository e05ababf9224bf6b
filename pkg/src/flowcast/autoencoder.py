"""Frame autoencoder with a token codebook and flow-guided temporal skip connections.

The encoder halves resolution K times; the decoder mirrors it. Fusion with
context frames happens at the K coarsest feature resolutions H/2^K .. H/2
(coarse to fine): at each level the flow estimator aligns encoded context
features to the decoded ones, a fusion mask gates the blend
``sigmoid(m) * d + (1 - sigmoid(m)) * warped``, and multi-frame contexts are
aggregated by relevance-normalized weighting before the blend. The final
up-to-full-resolution head has no fusion.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .flowkit import warp, resample_flow, resample_mask

AGG_EPS = 1e-8


class ResBlock(nn.Module):
    """Two 3x3 convs with LeakyReLU and a 1x1 skip; optional x2 resample."""

    def __init__(self, c_in, c_out, mode="same"):
        super().__init__()
        self.mode = mode
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        if self.mode == "down":
            x = F.avg_pool2d(x, 2)
        elif self.mode == "up":
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.conv2(self.act(self.conv1(self.act(x))))
        return self.skip(x) + h


def _channel_schedule(base, latent, k):
    # width after d downsamples, d = 1..K, capped at the bottleneck width
    return [min(base * 2 ** (d - 1), latent) for d in range(1, k + 1)]


class Encoder(nn.Module):
    def __init__(self, levels, base_channels, latent_channels):
        super().__init__()
        self.levels = levels
        chans = _channel_schedule(base_channels, latent_channels, levels)
        self.stem = nn.Conv2d(3, base_channels, 3, padding=1)
        blocks = []
        c_prev = base_channels
        for c in chans:
            blocks.append(ResBlock(c_prev, c, mode="down"))
            c_prev = c
        self.blocks = nn.ModuleList(blocks)
        self.to_latent = nn.Conv2d(chans[-1], latent_channels, 1)

    def forward(self, x):
        if x.shape[-2] % 2 ** self.levels or x.shape[-1] % 2 ** self.levels:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} not divisible by 2^{self.levels}"
            )
        h = self.stem(x)
        feats = []
        for blk in self.blocks:
            h = blk(h)
            feats.append(h)
        z = self.to_latent(h)
        return z, feats[::-1]  # pyramid coarse -> fine, matching decode order


class Codebook(nn.Module):
    """F x q learnable prototypes; tokens are 1-based indices."""

    def __init__(self, latent_channels, size, init_scale=0.02):
        super().__init__()
        self.entries = nn.Parameter(torch.randn(latent_channels, size) * init_scale)

    @property
    def size(self):
        return self.entries.shape[1]

    def quantize(self, z):
        """(B?, F, h, w) -> 1-based token grid; nearest entry, lowest index on ties."""
        squeeze = z.dim() == 3
        if squeeze:
            z = z.unsqueeze(0)
        if z.shape[1] != self.entries.shape[0]:
            raise ValueError(f"latent has {z.shape[1]} channels, codebook {self.entries.shape[0]}")
        zp = z.permute(0, 2, 3, 1)                               # (B, h, w, F)
        diff = zp.unsqueeze(-2) - self.entries.t()               # (B, h, w, q, F)
        dist = diff.pow(2).sum(-1)
        tokens = dist.argmin(-1) + 1
        return tokens.squeeze(0) if squeeze else tokens

    def lookup(self, tokens):
        """1-based token grid -> (B?, F, h, w) codebook vectors."""
        if tokens.min() < 1 or tokens.max() > self.size:
            raise ValueError(
                f"tokens outside [1, {self.size}]: "
                f"min={int(tokens.min())} max={int(tokens.max())}"
            )
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        z_q = self.entries.t()[tokens - 1]                       # (B, h, w, F)
        z_q = z_q.permute(0, 3, 1, 2).contiguous()
        return z_q.squeeze(0) if squeeze else z_q

    def straight_through(self, z):
        """Forward uses the quantized vectors, backward copies gradients to z."""
        tokens = self.quantize(z)
        z_q = self.lookup(tokens)
        return z + (z_q - z).detach(), z_q, tokens


def cost_volume(ref, tgt, radius):
    """Correlation of ref with (2R+1)^2 spatial neighbors of tgt (zero padded)."""
    b, c, h, w = ref.shape
    pad = F.pad(tgt, (radius,) * 4)
    rows = []
    for di in range(2 * radius + 1):
        for dj in range(2 * radius + 1):
            rows.append((ref * pad[:, :, di: di + h, dj: dj + w]).mean(1, keepdim=True))
    return torch.cat(rows, 1)


class FlowLevel(nn.Module):
    """One coarse-to-fine step: cost-volume match then residual refine."""

    def __init__(self, feat_channels, radius, hidden=48):
        super().__init__()
        n = (2 * radius + 1) ** 2
        self.radius = radius
        self.match = nn.Sequential(
            nn.Conv2d(n, hidden, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )
        self.refine = nn.Sequential(
            nn.Conv2d(2 * feat_channels + 3, hidden, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )
        # residual heads start at zero so an untrained level inherits the prior flow
        for head in (self.match[-1], self.refine[-1]):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, e_k, d_k, prev=None):
        if e_k.shape != d_k.shape:
            raise ValueError(f"context {tuple(e_k.shape)} vs decoded {tuple(d_k.shape)}")
        b, _, h, w = d_k.shape
        if prev is None:
            flow = torch.zeros(b, 2, h, w, dtype=d_k.dtype, device=d_k.device)
            mask = torch.zeros(b, 1, h, w, dtype=d_k.dtype, device=d_k.device)
        else:
            flow = resample_flow(prev[0], (h, w))
            mask = resample_mask(prev[1], (h, w))
        e_pre = warp(e_k, flow)
        delta = self.match(cost_volume(d_k, e_pre, self.radius))
        flow = flow + delta[:, :2]
        mask = mask + delta[:, 2:3]
        e_cur = warp(e_k, flow)
        delta = self.refine(torch.cat([d_k, e_cur, flow, mask], 1))
        return flow + delta[:, :2], mask + delta[:, 2:3]


def fuse_context(d_k, e_warped, m_k):
    """sigmoid(m) * d + (1 - sigmoid(m)) * warped; mask broadcast over channels."""
    if d_k.shape != e_warped.shape or m_k.shape[-2:] != d_k.shape[-2:]:
        raise ValueError(
            f"shape mismatch: d {tuple(d_k.shape)}, e' {tuple(e_warped.shape)}, "
            f"m {tuple(m_k.shape)}"
        )
    s = torch.sigmoid(m_k)
    return s * d_k + (1.0 - s) * e_warped


def aggregate_multi_context(masks, warped):
    """Relevance-normalized average of per-context masks and warped features."""
    if not masks or len(masks) != len(warped):
        raise ValueError("need equally many masks and warped feature maps, at least one")
    rel = [1.0 - torch.sigmoid(m) for m in masks]
    denom = sum(rel) + AGG_EPS
    scores = [r / denom for r in rel]
    m_a = sum(s * m for s, m in zip(scores, masks))
    e_a = sum(s * e for s, e in zip(scores, warped))
    return m_a, e_a


@dataclass
class ContextEntry:
    frame: torch.Tensor       # (3, H, W) or (B, 3, H, W)
    pyramid: list             # encoder features, coarse -> fine


class ContextBuffer:
    """Bounded FIFO of context frames and their feature pyramids (shift-and-add)."""

    def __init__(self, capacity):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._entries = deque()

    def push(self, frame, pyramid):
        self._entries.append(ContextEntry(frame=frame, pyramid=pyramid))
        while len(self._entries) > self.capacity:
            self._entries.popleft()

    @property
    def entries(self):
        return list(self._entries)

    def pyramids(self):
        return [e.pyramid for e in self._entries]

    def __len__(self):
        return len(self._entries)


class Autoencoder(nn.Module):
    """Encoder, codebook, flow-guided decoder."""

    def __init__(self, levels=3, base_channels=32, latent_channels=64,
                 codebook_size=512, cost_radius=3):
        super().__init__()
        self.levels = levels
        chans = _channel_schedule(base_channels, latent_channels, levels)
        self.encoder = Encoder(levels, base_channels, latent_channels)
        self.codebook = Codebook(latent_channels, codebook_size)
        dec = [nn.Sequential(nn.Conv2d(latent_channels, chans[-1], 1),
                             ResBlock(chans[-1], chans[-1]))]
        flow_levels = [FlowLevel(chans[-1], cost_radius)]
        for d in range(levels - 1, 0, -1):  # remaining fusion levels, coarse -> fine
            dec.append(ResBlock(chans[d], chans[d - 1], mode="up"))
            flow_levels.append(FlowLevel(chans[d - 1], cost_radius))
        self.dec_blocks = nn.ModuleList(dec)
        self.flow_levels = nn.ModuleList(flow_levels)
        self.head = nn.Sequential(
            ResBlock(chans[0], base_channels, mode="up"),
            nn.Conv2d(base_channels, 3, 3, padding=1),
        )

    def encode(self, x):
        """(B?, 3, H, W) -> latent (B?, F, h, w) and pyramid coarse -> fine."""
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        z, pyr = self.encoder(x)
        if squeeze:
            return z.squeeze(0), [p.squeeze(0) for p in pyr]
        return z, pyr

    def decode(self, z_q, contexts=None):
        """Decode a (possibly quantized) latent with optional context fusion.

        contexts: list of encoder pyramids (coarse -> fine), one per context
        frame. Returns the frame in [0, 1] plus, per context frame, the
        (flow, mask) estimated at every fusion level.
        """
        squeeze = z_q.dim() == 3
        if squeeze:
            z_q = z_q.unsqueeze(0)
            contexts = [[p.unsqueeze(0) for p in pyr] for pyr in (contexts or [])]
        contexts = contexts or []
        for pyr in contexts:
            if pyr[0].shape[-2:] != z_q.shape[-2:]:
                raise ValueError(
                    f"context level-0 size {tuple(pyr[0].shape[-2:])} does not match "
                    f"latent {tuple(z_q.shape[-2:])}"
                )
        d = z_q
        prev = [None] * len(contexts)
        flows_masks = [[] for _ in contexts]
        for k, blk in enumerate(self.dec_blocks):
            d = blk(d)
            if contexts:
                masks, warped = [], []
                for i, pyr in enumerate(contexts):
                    f_k, m_k = self.flow_levels[k](pyr[k], d, prev[i])
                    prev[i] = (f_k, m_k)
                    flows_masks[i].append((f_k, m_k))
                    masks.append(m_k)
                    warped.append(warp(pyr[k], f_k))
                m_a, e_a = aggregate_multi_context(masks, warped)
                d = fuse_context(d, e_a, m_a)
        x = torch.sigmoid(self.head(d))
        if squeeze:
            x = x.squeeze(0)
            flows_masks = [[(f.squeeze(0), m.squeeze(0)) for f, m in per] for per in flows_masks]
        return x, flows_masks

    def fusion_sizes(self, height, width):
        """Spatial sizes of the K fusion levels, coarse -> fine."""
        return [(height // 2 ** d, width // 2 ** d) for d in range(self.levels, 0, -1)]

    def reconstruct(self, x, context_pyramids=None):
        """encode -> quantize (straight-through) -> decode with context."""
        z, _ = self.encode(x)
        z_st, _, tokens = self.codebook.straight_through(z)
        x_hat, flows_masks = self.decode(z_st, context_pyramids)
        return x_hat, z, z_st, tokens, flows_masks
