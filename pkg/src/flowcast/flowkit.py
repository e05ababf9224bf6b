"""Differentiable warping, augmentation flows, and approximate flow inversion.

Flow convention everywhere in this package: a flow field is a ``(2, H, W)``
array of pixel displacements, channel 0 vertical (dh, positive = down) and
channel 1 horizontal (dw, positive = right). Warping is backward:
``out(p) = field(p + flow(p))`` with bilinear interpolation and edge clamping.
When a flow is resampled to a different resolution its values scale with the
resolution ratio.

Flow construction and inversion are numpy (they run in data loading);
``warp`` and ``gaussian_blur`` are torch and differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

# 3x3 Gaussian used by the inversion fill (zero padding preserves resolution)
_GAUSS3 = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]], dtype=np.float64) / 16.0
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class AugmentationRejected(ValueError):
    """Spec produces a flow with more than half the grid sampling out of bounds."""


def warp(field: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp field by flow; differentiable w.r.t. both arguments.

    field: (C, H, W) or (B, C, H, W); flow: matching (2, H, W) / (B, 2, H, W).
    Out-of-bounds samples clamp to the edge.
    """
    squeeze = field.dim() == 3
    if squeeze:
        field, flow = field.unsqueeze(0), flow.unsqueeze(0)
    if field.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"bad shapes: field {tuple(field.shape)}, flow {tuple(flow.shape)}")
    b, _, h, w = field.shape
    if flow.shape[0] != b or flow.shape[2:] != field.shape[2:]:
        raise ValueError(f"field {tuple(field.shape)} and flow {tuple(flow.shape)} disagree")
    flow = flow.to(field.dtype)
    ih = torch.arange(h, dtype=field.dtype, device=field.device).view(1, h, 1)
    iw = torch.arange(w, dtype=field.dtype, device=field.device).view(1, 1, w)
    pos_h = ih + flow[:, 0]
    pos_w = iw + flow[:, 1]
    # normalized coords, align_corners=True: pixel i -> 2i/(S-1) - 1
    grid = torch.stack([2.0 * pos_w / (w - 1) - 1.0, 2.0 * pos_h / (h - 1) - 1.0], dim=-1)
    out = F.grid_sample(field, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out.squeeze(0) if squeeze else out


def gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding; sigma <= 0 is identity."""
    if sigma <= 0:
        return img
    squeeze = img.dim() == 3
    if squeeze:
        img = img.unsqueeze(0)
    radius = max(1, int(round(3.0 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=img.dtype, device=img.device)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    k = k / k.sum()
    c = img.shape[1]
    kh = k.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kw = k.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    out = F.pad(img, (0, 0, radius, radius), mode="reflect")
    out = F.conv2d(out, kh, groups=c)
    out = F.pad(out, (radius, radius, 0, 0), mode="reflect")
    out = F.conv2d(out, kw, groups=c)
    return out.squeeze(0) if squeeze else out


def resample_flow(flow: torch.Tensor, size: tuple) -> torch.Tensor:
    """Bilinear-resample a flow to (h, w), scaling displacement values with resolution."""
    squeeze = flow.dim() == 3
    if squeeze:
        flow = flow.unsqueeze(0)
    h0, w0 = flow.shape[2:]
    h1, w1 = size
    out = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    out = torch.stack([out[:, 0] * (h1 / h0), out[:, 1] * (w1 / w0)], dim=1)
    return out.squeeze(0) if squeeze else out


def resample_mask(mask: torch.Tensor, size: tuple) -> torch.Tensor:
    squeeze = mask.dim() == 3
    if squeeze:
        mask = mask.unsqueeze(0)
    out = F.interpolate(mask, size=size, mode="bilinear", align_corners=False)
    return out.squeeze(0) if squeeze else out


@dataclass
class AugmentationSpec:
    """Parameters of one self-supervision context augmentation.

    kind: one of rotation | scaling | translation | elastic | composite.
    offset is (dh, dw) pixels; angle in degrees; scale is the zoom factor.
    occlusion_rects are (top, left, height, width) boxes zeroed in the mask.
    """

    kind: str = "translation"
    angle_deg: float = 0.0
    scale: float = 1.0
    offset: tuple = (0.0, 0.0)
    elastic_amplitude: float = 0.0
    elastic_smooth: float = 8.0
    blur_sigma: float = 0.0
    occlusion_rects: list = field(default_factory=list)
    seed: int = 0


def _affine_flow(h, w, angle_deg=0.0, scale=1.0, offset=(0.0, 0.0)):
    """Backward flow for translate(rotate(zoom(x))): src = R(-a)((p - c - off))/s + c."""
    ch, cw = (h - 1) / 2.0, (w - 1) / 2.0
    hh, ww = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    yr = hh - ch - offset[0]
    xr = ww - cw - offset[1]
    a = math.radians(angle_deg)
    cos_a, sin_a = math.cos(a), math.sin(a)
    src_y = (cos_a * yr - sin_a * xr) / scale + ch
    src_x = (sin_a * yr + cos_a * xr) / scale + cw
    flow = np.stack([src_y - hh, src_x - ww]).astype(np.float32)
    return flow


def _elastic_flow(h, w, amplitude, smooth, rng):
    """Value noise on a coarse lattice, upsampled and lightly smoothed, peak-normalized."""
    step = max(2.0, float(smooth))
    gh = int(np.ceil(h / step)) + 2
    gw = int(np.ceil(w / step)) + 2
    lattice = rng.standard_normal((2, gh, gw))
    t = torch.from_numpy(lattice).unsqueeze(0)
    up = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=True)[0].numpy()
    up = np.stack([ndimage.gaussian_filter(up[i], sigma=step / 4.0, mode="nearest") for i in range(2)])
    peak = np.abs(up).max()
    if peak > 0:
        up = up * (amplitude / peak)
    return up.astype(np.float32)


def compose_flows(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Flow of the composite warp: warp(warp(x, first), second) == warp(x, out)."""
    f1 = torch.from_numpy(np.ascontiguousarray(first, dtype=np.float32))
    f2 = torch.from_numpy(np.ascontiguousarray(second, dtype=np.float32))
    out = f2 + warp(f1, f2)
    return out.numpy()


def make_augmentation_flow(spec: AugmentationSpec, h: int, w: int) -> np.ndarray:
    """Backward flow a such that the augmented view equals warp(x, a).

    Affine kinds are exact analytic fields; elastic is smoothed value noise.
    Rejects specs whose flow sends more than half the grid out of bounds.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "translation":
        flow = np.zeros((2, h, w), dtype=np.float32)
        flow[0] -= spec.offset[0]
        flow[1] -= spec.offset[1]
    elif spec.kind == "rotation":
        flow = _affine_flow(h, w, angle_deg=spec.angle_deg)
    elif spec.kind == "scaling":
        flow = _affine_flow(h, w, scale=spec.scale)
    elif spec.kind == "elastic":
        flow = _elastic_flow(h, w, spec.elastic_amplitude, spec.elastic_smooth, rng)
    elif spec.kind == "composite":
        flow = _affine_flow(h, w, spec.angle_deg, spec.scale, spec.offset)
        if spec.elastic_amplitude > 0:
            elastic = _elastic_flow(h, w, spec.elastic_amplitude, spec.elastic_smooth, rng)
            flow = compose_flows(flow, elastic)
    else:
        raise ValueError(f"unknown augmentation kind: {spec.kind!r}")

    hh, ww = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    in_bounds = (
        (hh + flow[0] >= 0) & (hh + flow[0] <= h - 1) & (ww + flow[1] >= 0) & (ww + flow[1] <= w - 1)
    )
    if in_bounds.mean() < 0.5:
        raise AugmentationRejected(
            f"{spec.kind} spec keeps only {in_bounds.mean():.0%} of cells in bounds"
        )
    return flow


def _blur3(x: np.ndarray) -> np.ndarray:
    return ndimage.correlate(x, _GAUSS3, mode="constant", cval=0.0)


def invert_flow(g: np.ndarray):
    """Approximate the inverse of flow g (2, H, W); returns (f, coverage).

    Direct pass: each cell (h, w) writes -g at its rounded target h+dh, w+dw
    (later rows/cols overwrite on collision). Remaining cells are filled
    iteratively: the frontier (cardinal dilation of the completed set minus
    itself) takes blur(f)/blur(c) with the 3x3 zero-padded Gaussian, until the
    completion mask covers the grid. coverage is the directly-inverted fraction.
    """
    g = np.asarray(g, dtype=np.float32)
    if g.ndim != 3 or g.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {g.shape}")
    if not np.isfinite(g).all():
        raise ValueError("flow contains non-finite values")
    _, h, w = g.shape
    f0 = np.zeros(h * w, dtype=np.float64)
    f1 = np.zeros(h * w, dtype=np.float64)
    hh, ww = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    th = np.rint(hh + g[0]).astype(np.int64).ravel()
    tw = np.rint(ww + g[1]).astype(np.int64).ravel()
    ok = np.flatnonzero((th >= 0) & (th < h) & (tw >= 0) & (tw < w))
    tgt = th[ok] * w + tw[ok]
    # duplicate targets resolve to the last source in row-major order
    f0[tgt] = -g[0].ravel()[ok]
    f1[tgt] = -g[1].ravel()[ok]
    c = np.zeros(h * w, dtype=bool)
    c[tgt] = True
    c = c.reshape(h, w)
    f = np.stack([f0.reshape(h, w), f1.reshape(h, w)])
    coverage = float(c.mean())
    if not c.any():
        return np.zeros((2, h, w), dtype=np.float32), 0.0

    while not c.all():
        frontier = ndimage.binary_dilation(c, structure=_CROSS) & ~c
        assert frontier.any(), "completion mask stopped growing"
        weight = _blur3(c.astype(np.float64))
        # every frontier cell borders a completed one, so its blurred weight is positive
        assert (weight[frontier] > 0).all()
        for ch in range(2):
            num = _blur3(f[ch])
            f[ch][frontier] = num[frontier] / weight[frontier]
        c |= frontier
    return f.astype(np.float32), coverage


def occlusion_mask(h: int, w: int, rects) -> torch.Tensor:
    """Binary (1, H, W) mask, zero inside each (top, left, height, width) rectangle."""
    m = torch.ones(1, h, w)
    for top, left, rh, rw in rects:
        m[:, max(0, top): top + rh, max(0, left): left + rw] = 0.0
    return m


@dataclass
class ContextView:
    """Augmented context frame with its self-supervision targets."""

    frame: torch.Tensor          # x_c = o_c * blur(aug(x)), (3, H, W)
    flow_target: torch.Tensor    # inverse augmentation flow, (2, H, W)
    mask_target: torch.Tensor    # occlusion mask warped by the inverse flow, (1, H, W)
    occlusion: torch.Tensor      # raw occlusion mask o_c, (1, H, W)
    coverage: float              # direct-inversion fraction of the flow

    def targets_at(self, sizes):
        """(flow, mask) targets per resolution level, values rescaled per the x-s rule."""
        return [
            (resample_flow(self.flow_target, s), resample_mask(self.mask_target, s))
            for s in sizes
        ]


def build_context_view(x: torch.Tensor, spec: AugmentationSpec) -> ContextView:
    """Augment x into a context view and derive the flow/mask recovery targets."""
    _, h, w = x.shape
    a = make_augmentation_flow(spec, h, w)
    a_t = torch.from_numpy(a)
    aug = warp(x, a_t)
    o_c = occlusion_mask(h, w, spec.occlusion_rects).to(x.dtype)
    x_c = o_c * gaussian_blur(aug, spec.blur_sigma)
    f_inv, coverage = invert_flow(a)
    f_t = torch.from_numpy(f_inv).to(x.dtype)
    o_warped = warp(o_c, f_t)
    return ContextView(frame=x_c, flow_target=f_t, mask_target=o_warped, occlusion=o_c,
                       coverage=coverage)


def sample_augmentation_spec(
    rng: np.random.Generator,
    h: int,
    w: int,
    max_translate: float = 4.0,
    max_rotate: float = 8.0,
    max_scale: float = 0.1,
    elastic_amp: float = 4.0,
    elastic_smooth: float = 8.0,
    blur_sigma: float = 1.0,
    max_occlusions: int = 2,
) -> AugmentationSpec:
    """Draw a random training augmentation within the configured ranges."""
    kind = rng.choice(["translation", "rotation", "scaling", "elastic", "composite"])
    rects = []
    for _ in range(rng.integers(0, max_occlusions + 1)):
        rh = int(rng.integers(h // 8, h // 2 + 1))
        rw = int(rng.integers(w // 8, w // 2 + 1))
        rects.append((int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1)), rh, rw))
    return AugmentationSpec(
        kind=str(kind),
        angle_deg=float(rng.uniform(-max_rotate, max_rotate)),
        scale=float(1.0 + rng.uniform(-max_scale, max_scale)),
        offset=(float(rng.uniform(-max_translate, max_translate)),
                float(rng.uniform(-max_translate, max_translate))),
        elastic_amplitude=float(rng.uniform(0.5, elastic_amp)) if kind in ("elastic", "composite") else 0.0,
        elastic_smooth=elastic_smooth,
        blur_sigma=blur_sigma,
        occlusion_rects=rects,
        seed=int(rng.integers(0, 2**31 - 1)),
    )
