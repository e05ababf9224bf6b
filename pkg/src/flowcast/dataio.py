"""Synthetic sprite clips with ground-truth flows, plus on-disk formats.

Dataset layout (all files little-endian, frames 1-based zero-padded):

    root/
      manifest.json            clips, H, W, T, seed, generation config
      clip_00000/
        frame_000001.png ...   8-bit RGB, pixel value v maps to v/255 in [0, 1]
        annotations.json       per-frame {t, x, y, class} for the tracked sprite
        flows.npy              (T-1, 2, H, W) float32 backward flows t+1 -> t
        background.png         sprite-free plate (centroid / occlusion checks)
        sprites.json           full per-sprite tracks (diagnostic sidecar)

Generation is a pure function of (config, n_clips): reruns are byte-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

_PALETTE = np.array(
    [
        [1.00, 0.25, 0.25],
        [0.25, 0.95, 0.35],
        [0.35, 0.45, 1.00],
        [1.00, 0.85, 0.25],
        [0.95, 0.40, 0.95],
        [0.30, 0.95, 0.95],
    ],
    dtype=np.float32,
)


class ClipFormatError(ValueError):
    """Malformed clip directory or sidecar file."""


@dataclass
class SpriteSceneConfig:
    height: int = 64
    width: int = 64
    n_sprites: int = 1
    shapes: tuple = ("disc",)
    radius: int = 7
    speed_min: float = 1.0
    speed_max: float = 3.0
    n_classes: int = 2
    clip_length: int = 16
    seed: int = 0

    def validate(self):
        if min(self.height, self.width) < 16:
            raise ValueError("canvas must be at least 16x16")
        if 2 * self.radius + 2 >= min(self.height, self.width):
            raise ValueError(f"sprite radius {self.radius} too large for canvas")
        for s in self.shapes:
            if s not in ("disc", "square", "triangle"):
                raise ValueError(f"unknown sprite shape {s!r}")
        if self.clip_length < 2:
            raise ValueError("clip_length must be >= 2")
        return self


@dataclass
class ClipRecord:
    frames: np.ndarray                    # (T, H, W, 3) float32 in [0, 1]
    annotations: list | None = None       # per-frame {t, x, y, class}
    gt_flows: np.ndarray | None = None    # (T-1, 2, H, W) float32
    background: np.ndarray | None = None  # (H, W, 3) float32
    sprite_tracks: list | None = None     # per-sprite {shape, radius, class, pos: [[y,x],...]}


@dataclass
class DatasetHandle:
    root: Path
    manifest: dict

    @property
    def clip_dirs(self):
        return [self.root / name for name in self.manifest["clips"]]


def value_noise(h, w, rng, step=16.0, channels=1):
    """Low-frequency lattice noise bilinearly upsampled to (h, w)."""
    gh, gw = int(np.ceil(h / step)) + 1, int(np.ceil(w / step)) + 1
    lattice = rng.standard_normal((channels, gh, gw)).astype(np.float64)
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(int).clip(0, gh - 2)
    x0 = np.floor(xs).astype(int).clip(0, gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    out = np.empty((channels, h, w))
    for c in range(channels):
        l = lattice[c]
        out[c] = (
            l[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + l[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
            + l[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
            + l[np.ix_(y0 + 1, x0 + 1)] * fy * fx
        )
    return out


def render_background(cfg: SpriteSceneConfig, rng) -> np.ndarray:
    """Dim low-frequency texture so context recovery is nontrivial but sprites pop."""
    base = value_noise(cfg.height, cfg.width, rng, step=max(cfg.height, cfg.width) / 4.0)[0]
    tint = rng.uniform(0.8, 1.2, size=3)
    lo, hi = base.min(), base.max()
    norm = (base - lo) / (hi - lo + 1e-9)
    bg = 0.18 + 0.30 * norm
    return np.clip(bg[..., None] * tint[None, None, :], 0.0, 0.9).astype(np.float32)


def sprite_coverage(shape: str, center, radius: float, h: int, w: int) -> np.ndarray:
    """Antialiased coverage in [0, 1]; center is (y, x) in continuous pixels."""
    cy, cx = center
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    if shape == "disc":
        d = np.hypot(yy - cy, xx - cx)
        return np.clip(radius + 0.5 - d, 0.0, 1.0).astype(np.float32)
    if shape == "square":
        oy = np.clip(radius + 0.5 - np.abs(yy - cy), 0.0, 1.0)
        ox = np.clip(radius + 0.5 - np.abs(xx - cx), 0.0, 1.0)
        return (oy * ox).astype(np.float32)
    if shape == "triangle":
        # equilateral, apex up, circumradius = radius; signed distance of convex hull
        verts = [
            (cy - radius, cx),
            (cy + radius * 0.5, cx + radius * math.sqrt(3) / 2),
            (cy + radius * 0.5, cx - radius * math.sqrt(3) / 2),
        ]
        sdf = np.full((h, w), -np.inf)
        for i in range(3):
            ay, ax = verts[i]
            by, bx = verts[(i + 1) % 3]
            ey, ex = by - ay, bx - ax
            n = math.hypot(ey, ex)
            # outward normal of edge a->b for this (apex, right, left) ordering
            ny, nx = -ex / n, ey / n
            sdf = np.maximum(sdf, (yy - ay) * ny + (xx - ax) * nx)
        return np.clip(0.5 - sdf, 0.0, 1.0).astype(np.float32)
    raise ValueError(f"unknown sprite shape {shape!r}")


def _simulate_tracks(cfg: SpriteSceneConfig, rng):
    """Constant-speed sprites with reflecting boundaries; returns per-sprite dicts."""
    margin = cfg.radius + 1.0
    lo_y, hi_y = margin, cfg.height - 1 - margin
    lo_x, hi_x = margin, cfg.width - 1 - margin
    band = (cfg.speed_max - cfg.speed_min) / max(cfg.n_classes, 1)
    tracks = []
    for _ in range(cfg.n_sprites):
        cls = int(rng.integers(0, cfg.n_classes))
        speed = cfg.speed_min + band * (cls + rng.uniform(0.2, 0.8))
        angle = rng.uniform(0, 2 * math.pi)
        vy, vx = speed * math.sin(angle), speed * math.cos(angle)
        py = rng.uniform(lo_y, hi_y)
        px = rng.uniform(lo_x, hi_x)
        shape = str(rng.choice(list(cfg.shapes)))
        color = _PALETTE[int(rng.integers(0, len(_PALETTE)))].copy()
        color = np.clip(color * rng.uniform(0.9, 1.05), 0.0, 1.0)
        pos = []
        for _ in range(cfg.clip_length):
            pos.append((py, px))
            py, vy = _reflect(py + vy, vy, lo_y, hi_y)
            px, vx = _reflect(px + vx, vx, lo_x, hi_x)
        tracks.append({
            "shape": shape, "radius": float(cfg.radius), "class": cls,
            "color": [float(c) for c in color], "pos": [[float(y), float(x)] for y, x in pos],
        })
    return tracks


def _reflect(p, v, lo, hi):
    if p < lo:
        return 2 * lo - p, -v
    if p > hi:
        return 2 * hi - p, -v
    return p, v


def render_clip(cfg: SpriteSceneConfig, rng) -> ClipRecord:
    """Render frames, backward flows t+1 -> t, and tracked-sprite annotations."""
    bg = render_background(cfg, rng)
    tracks = _simulate_tracks(cfg, rng)
    h, w, t_len = cfg.height, cfg.width, cfg.clip_length
    frames = np.empty((t_len, h, w, 3), dtype=np.float32)
    covers = np.zeros((t_len, len(tracks), h, w), dtype=np.float32)
    for t in range(t_len):
        frame = bg.copy()
        for i, tr in enumerate(tracks):
            alpha = sprite_coverage(tr["shape"], tr["pos"][t], tr["radius"], h, w)
            covers[t, i] = alpha
            frame = frame * (1 - alpha[..., None]) + np.asarray(tr["color"], np.float32) * alpha[..., None]
        frames[t] = np.clip(frame, 0.0, 1.0)
    flows = np.zeros((t_len - 1, 2, h, w), dtype=np.float32)
    for t in range(t_len - 1):
        for i, tr in enumerate(tracks):
            dy = tr["pos"][t + 1][0] - tr["pos"][t][0]
            dx = tr["pos"][t + 1][1] - tr["pos"][t][1]
            on = covers[t + 1, i] > 0
            flows[t, 0][on] = -dy
            flows[t, 1][on] = -dx
    anns = [
        {"t": t, "x": tracks[0]["pos"][t][1], "y": tracks[0]["pos"][t][0],
         "class": tracks[0]["class"]}
        for t in range(t_len)
    ]
    return ClipRecord(frames=frames, annotations=anns, gt_flows=flows, background=bg,
                      sprite_tracks=tracks)


def warp_validity_mask(rec: ClipRecord, t: int) -> np.ndarray:
    """(H, W) bool: pixels where warping frame t by gt_flows[t] reproduces frame t+1.

    Excludes disoccluded cells (sprite at t, background at t+1), antialiased
    sprite edges, and cells whose warp source lies under a different sprite.
    """
    if rec.sprite_tracks is None or rec.gt_flows is None:
        raise ValueError("record lacks sprite tracks or flows")
    t_len, h, w = rec.frames.shape[:3]
    cov_t = [sprite_coverage(tr["shape"], tr["pos"][t], tr["radius"], h, w)
             for tr in rec.sprite_tracks]
    cov_t1 = [sprite_coverage(tr["shape"], tr["pos"][t + 1], tr["radius"], h, w)
              for tr in rec.sprite_tracks]
    any_t = np.max(cov_t, axis=0)
    any_t1 = np.max(cov_t1, axis=0)
    invalid = (any_t > 0) & (any_t1 == 0)          # disocclusion
    invalid |= (any_t1 > 0) & (any_t1 < 1)         # antialiased edge at t+1
    invalid |= (any_t > 0) & (any_t < 1)           # edge at t under a zero-flow cell
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sy = np.floor(yy + rec.gt_flows[t, 0]).astype(int)
    sx = np.floor(xx + rec.gt_flows[t, 1]).astype(int)
    for i, tr in enumerate(rec.sprite_tracks):
        on = cov_t1[i] > 0
        if len(rec.sprite_tracks) > 1:
            others = np.max([c for j, c in enumerate(cov_t) if j != i], axis=0)
        else:
            others = np.zeros((h, w), np.float32)
        # all four bilinear support corners must be pure sprite-i interior
        for dy in (0, 1):
            for dx in (0, 1):
                cy = np.clip(sy + dy, 0, h - 1)
                cx = np.clip(sx + dx, 0, w - 1)
                invalid |= on & ((cov_t[i][cy, cx] < 1) | (others[cy, cx] > 0))
    return ~ndimage.binary_dilation(invalid, iterations=1)


# ---------------------------------------------------------------------------
# disk I/O


def _save_png(path: Path, arr: np.ndarray):
    Image.fromarray(np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)).save(path)


def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_clip(clip_dir: Path, rec: ClipRecord):
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    for t in range(rec.frames.shape[0]):
        _save_png(clip_dir / f"frame_{t + 1:06d}.png", rec.frames[t])
    if rec.background is not None:
        _save_png(clip_dir / "background.png", rec.background)
    if rec.annotations is not None:
        with open(clip_dir / "annotations.json", "w", encoding="utf-8") as fh:
            json.dump(rec.annotations, fh, sort_keys=True, separators=(",", ":"))
    if rec.gt_flows is not None:
        np.save(clip_dir / "flows.npy", rec.gt_flows.astype("<f4"))
    if rec.sprite_tracks is not None:
        with open(clip_dir / "sprites.json", "w", encoding="utf-8") as fh:
            json.dump(rec.sprite_tracks, fh, sort_keys=True, separators=(",", ":"))


def generate_sprites_dataset(cfg: SpriteSceneConfig, n_clips: int, out_dir) -> DatasetHandle:
    """Write n_clips rendered clips under out_dir; byte-identical given the same seed."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not out_dir.is_dir():
        raise OSError(f"cannot create dataset directory {out_dir}")
    children = np.random.SeedSequence(cfg.seed).spawn(n_clips)
    names = []
    for i in range(n_clips):
        rec = render_clip(cfg, np.random.default_rng(children[i]))
        name = f"clip_{i:05d}"
        write_clip(out_dir / name, rec)
        names.append(name)
    manifest = {
        "clips": names,
        "H": cfg.height,
        "W": cfg.width,
        "T": cfg.clip_length,
        "seed": cfg.seed,
        "config": asdict(cfg),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return DatasetHandle(root=out_dir, manifest=manifest)


def load_manifest(root) -> DatasetHandle:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    try:
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as e:
        raise ClipFormatError(f"malformed manifest {mpath}: {e}") from e
    return DatasetHandle(root=root, manifest=manifest)


def load_clip(path, t0: int = 0, length: int | None = None) -> ClipRecord:
    """Load frames [t0, t0+length) plus sidecars; explicit errors on bad ranges."""
    path = Path(path)
    frame_files = sorted(path.glob("frame_*.png"))
    if not frame_files:
        raise FileNotFoundError(f"no frames under {path}")
    total = len(frame_files)
    if length is None:
        length = total - t0
    if t0 < 0 or length < 0 or t0 + length > total:
        raise IndexError(
            f"requested frames [{t0}, {t0 + length}) of a {total}-frame clip at {path}"
        )
    frames = np.stack([_load_png(f) for f in frame_files[t0: t0 + length]])

    annotations = None
    ann_path = path / "annotations.json"
    if ann_path.exists():
        try:
            with open(ann_path, "r", encoding="utf-8") as fh:
                all_anns = json.load(fh)
            if not isinstance(all_anns, list) or any(
                not {"t", "x", "y", "class"} <= set(a) for a in all_anns
            ):
                raise ClipFormatError(f"bad annotation records in {ann_path}")
        except json.JSONDecodeError as e:
            raise ClipFormatError(f"malformed sidecar {ann_path}: {e}") from e
        if len(all_anns) != total:
            raise ClipFormatError(
                f"{ann_path} has {len(all_anns)} records for {total} frames"
            )
        annotations = all_anns[t0: t0 + length]

    flows = None
    flow_path = path / "flows.npy"
    if flow_path.exists():
        arr = np.load(flow_path)
        if arr.shape[0] != total - 1 or arr.shape[1] != 2:
            raise ClipFormatError(f"{flow_path} has shape {arr.shape}, want ({total - 1}, 2, H, W)")
        flows = arr[t0: t0 + length - 1].astype(np.float32)

    background = None
    bg_path = path / "background.png"
    if bg_path.exists():
        background = _load_png(bg_path)

    tracks = None
    tr_path = path / "sprites.json"
    if tr_path.exists():
        try:
            with open(tr_path, "r", encoding="utf-8") as fh:
                tracks = json.load(fh)
        except json.JSONDecodeError as e:
            raise ClipFormatError(f"malformed sidecar {tr_path}: {e}") from e
        tracks = [dict(tr, pos=tr["pos"][t0: t0 + length]) for tr in tracks]

    return ClipRecord(frames=frames, annotations=annotations, gt_flows=flows,
                      background=background, sprite_tracks=tracks)


def frames_to_tensor(frames: np.ndarray):
    """(..., H, W, 3) [0,1] numpy -> (..., 3, H, W) float32 torch."""
    import torch

    arr = np.ascontiguousarray(np.moveaxis(frames, -1, -3), dtype=np.float32)
    return torch.from_numpy(arr)


def tensor_to_frames(t) -> np.ndarray:
    """(..., 3, H, W) torch -> (..., H, W, 3) float32 numpy, clipped to [0, 1]."""
    arr = t.detach().cpu().numpy()
    return np.clip(np.moveaxis(arr, -3, -1), 0.0, 1.0).astype(np.float32)
