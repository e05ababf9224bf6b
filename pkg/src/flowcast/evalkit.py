"""Evaluation metrics: PSNR, SSIM, trajectory diversity, and an FD-proxy.

The FD-proxy replaces the usual pretrained video embedder with a fixed,
randomly initialized 3D conv stack, so absolute values are meaningless across
embedders; it supports *relative* comparisons only (same embedder both sides)
and reports are labeled accordingly.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg

from .flowkit import resample_flow

PSNR_CAP = 100.0
_LUMA = (0.299, 0.587, 0.114)


def psnr(a, b):
    """10*log10(1/MSE) on [0, 1] frames; identical inputs return the 100 dB cap."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse <= 0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _luma(x):
    if x.dim() == 2:
        return x
    if x.dim() == 3 and x.shape[0] == 3:
        return _LUMA[0] * x[0] + _LUMA[1] * x[1] + _LUMA[2] * x[2]
    if x.dim() == 3 and x.shape[0] == 1:
        return x[0]
    raise ValueError(f"expected (H, W), (1, H, W) or (3, H, W), got {tuple(x.shape)}")


def _ssim_window(size=11, sigma=1.5):
    r = size // 2
    g = np.exp(-0.5 * ((np.arange(size) - r) / sigma) ** 2)
    k = np.outer(g, g)
    return torch.from_numpy((k / k.sum()).astype(np.float64))


def ssim(a, b, window_size=11, sigma=1.5):
    """Mean local SSIM on luma, 11x11 Gaussian window, valid positions only."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    ya = _luma(torch.as_tensor(a)).double()
    yb = _luma(torch.as_tensor(b)).double()
    h, w = ya.shape
    if h < window_size or w < window_size:
        raise ValueError(f"image {h}x{w} smaller than the {window_size}x{window_size} window")
    win = _ssim_window(window_size, sigma).view(1, 1, window_size, window_size)

    def f(x):
        return F.conv2d(x.view(1, 1, h, w), win).view(-1)

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = f(ya), f(yb)
    var_a = f(ya * ya) - mu_a ** 2
    var_b = f(yb * yb) - mu_b ** 2
    cov = f(ya * yb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def diversity(trajectories, mode="whole", masks=None):
    """Mean abs difference over unordered trajectory pairs, frames, and pixels.

    trajectories: (M, T, C, H, W) with identical conditioning; mode="moving"
    restricts each pair to the union of the two per-frame moving masks
    ((M, T, H, W) bool). Raw value; reports apply the conventional 1e-3 scale.
    """
    ts = torch.as_tensor(trajectories).double()
    if ts.dim() != 5:
        raise ValueError(f"expected (M, T, C, H, W), got {tuple(ts.shape)}")
    m = ts.shape[0]
    if m < 2:
        raise ValueError("need at least two trajectories")
    if mode not in ("whole", "moving"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "moving":
        if masks is None:
            raise ValueError("mode='moving' requires per-trajectory masks")
        masks = torch.as_tensor(masks).bool()
        if masks.shape != (m,) + ts.shape[1:2] + ts.shape[3:]:
            raise ValueError(
                f"masks {tuple(masks.shape)} do not match trajectories {tuple(ts.shape)}")
    num = 0.0
    den = 0.0
    c = ts.shape[2]
    for i in range(m):
        for j in range(i + 1, m):
            diff = (ts[i] - ts[j]).abs()  # (T, C, H, W)
            if mode == "whole":
                num += float(diff.sum())
                den += diff.numel()
            else:
                sel = (masks[i] | masks[j]).unsqueeze(1)  # (T, 1, H, W)
                num += float((diff * sel).sum())
                den += float(sel.sum()) * c
    if den == 0:
        return 0.0
    return num / den


def moving_parts_mask(flows):
    """Keep pixels whose flow magnitude >= 20% of that frame's max magnitude.

    flows: (T-1, 2, H, W) consecutive-frame flows. A frame with zero max flow
    (static) yields an all-static (empty) mask. The threshold is relative, so
    the mask is invariant to positive global flow scaling.
    """
    flows = torch.as_tensor(flows)
    if flows.dim() != 4 or flows.shape[1] != 2:
        raise ValueError(f"expected (T-1, 2, H, W) flows, got {tuple(flows.shape)}")
    mag = torch.sqrt(flows[:, 0] ** 2 + flows[:, 1] ** 2)
    peak = mag.amax(dim=(1, 2), keepdim=True)
    mask = mag >= 0.2 * peak
    mask[(peak == 0).expand_as(mask)] = False
    return mask


def flow_between(ae, x_from, x_to):
    """Finest-level flow estimated by the trained flow module from x_from to x_to.

    Decodes x_to from its own latent with x_from as the single context and
    reads off the finest fusion-level flow, resampled to image resolution.
    """
    with torch.no_grad():
        z, _ = ae.encode(x_to)
        _, pyr = ae.encode(x_from)
        _, fm = ae.decode(z, [pyr])
        flow = fm[0][-1][0]
        return resample_flow(flow, x_to.shape[-2:])


def estimate_sequence_flows(ae, seq):
    """Consecutive-frame flows (T-1, 2, H, W) for a (T, 3, H, W) sequence."""
    return torch.stack([flow_between(ae, seq[t], seq[t + 1]) for t in range(seq.shape[0] - 1)])


class VideoEmbedder(nn.Module):
    """Frozen random 3D conv stack mapping (N, T, 3, H, W) to (N, dim) embeddings."""

    def __init__(self, dim=16, channels=(8, 16, 16), seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for i, c_out in enumerate(channels):
            stride = (1, 2, 2) if i == 0 else (2, 2, 2)
            conv = nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1)
            with torch.no_grad():
                fan_in = c_in * 27
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.proj = nn.Linear(c_in, dim)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(self.proj.weight.shape, generator=gen)
                                   * (1.0 / c_in) ** 0.5)
            self.proj.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, videos):
        x = torch.as_tensor(videos).float().permute(0, 2, 1, 3, 4)  # (N, 3, T, H, W)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.proj(x.mean(dim=(2, 3, 4)))


def frechet_gaussian(mu1, sigma1, mu2, sigma2):
    """d^2 = |mu1-mu2|^2 + tr(S1 + S2 - 2*(S1 S2)^(1/2))."""
    diff = np.asarray(mu1, dtype=np.float64) - np.asarray(mu2, dtype=np.float64)
    s1 = np.asarray(sigma1, dtype=np.float64)
    s2 = np.asarray(sigma2, dtype=np.float64)
    covmean = linalg.sqrtm(s1 @ s2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    d2 = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(covmean))
    return max(d2, 0.0)


def feature_distance(real, fake, embedder=None, min_sequences=32, ridge=1e-6):
    """Fréchet distance between Gaussian fits of video embeddings.

    real/fake: (N, T, 3, H, W) with N >= min_sequences each. Returns
    (value, ridge_applied); a degenerate covariance gets a flagged ridge.
    Comparative only — both sides must share the embedder.
    """
    real = torch.as_tensor(real)
    fake = torch.as_tensor(fake)
    for name, x in (("real", real), ("fake", fake)):
        if x.dim() != 5:
            raise ValueError(f"{name}: expected (N, T, 3, H, W), got {tuple(x.shape)}")
        if x.shape[0] < min_sequences:
            raise ValueError(f"{name}: need >= {min_sequences} sequences, got {x.shape[0]}")
    if embedder is None:
        embedder = VideoEmbedder()
    with torch.no_grad():
        e_real = embedder(real).double().numpy()
        e_fake = embedder(fake).double().numpy()
    mu1, mu2 = e_real.mean(0), e_fake.mean(0)
    s1 = np.cov(e_real, rowvar=False)
    s2 = np.cov(e_fake, rowvar=False)
    ridge_applied = False
    eigen_floor = 1e-10
    if min(np.linalg.eigvalsh(s1).min(), np.linalg.eigvalsh(s2).min()) < eigen_floor:
        s1 = s1 + ridge * np.eye(s1.shape[0])
        s2 = s2 + ridge * np.eye(s2.shape[0])
        ridge_applied = True
    value = frechet_gaussian(mu1, s1, mu2, s2)
    assert value >= 0.0
    return value, ridge_applied


def foreground_centroid(frame, background, rel_threshold=0.5):
    """(x, y) centroid of |frame - background| mass; frame center if empty.

    Mass below rel_threshold * peak is subtracted out first, so low-level
    reconstruction noise spread over the whole frame does not drag the
    centroid toward the center; only the dominant blob votes.
    """
    frame = torch.as_tensor(frame)
    background = torch.as_tensor(background)
    w = (frame - background).abs().mean(0).double()
    w = (w - rel_threshold * w.max()).clamp_(min=0.0)
    h, wid = w.shape
    total = float(w.sum())
    if total <= 0:
        return (wid - 1) / 2.0, (h - 1) / 2.0
    rows = torch.arange(h, dtype=torch.float64).view(h, 1)
    cols = torch.arange(wid, dtype=torch.float64).view(1, wid)
    y = float((w * rows).sum() / total)
    x = float((w * cols).sum() / total)
    return x, y
