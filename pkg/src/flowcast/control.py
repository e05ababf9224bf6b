"""Ancillary-information tokenizers and the latent-space position estimator.

State annotations are (x, y) pixel coordinates (x horizontal, y vertical)
discretized into uniform bins, two tokens per frame. Class labels become a
single video-level token. End-frame conditioning reuses the frame tokenizer:
the target frame is encoded and quantized into the video-level slots.
Tokens are 1-based like everywhere else in the package.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def tokenize_state(xy, bins, size):
    """(x, y) -> (token_x, token_y), each in [1, bins]; size is (H, W)."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    h, w = size
    x, y = float(xy[0]), float(xy[1])
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"state ({x}, {y}) outside [0, {w}) x [0, {h})")
    tok_x = min(int(x / w * bins), bins - 1) + 1
    tok_y = min(int(y / h * bins), bins - 1) + 1
    return tok_x, tok_y


def detokenize_state(tokens, bins, size):
    """Inverse of tokenize_state up to quantization: returns bin centers."""
    h, w = size
    tok_x, tok_y = tokens
    for tok in (tok_x, tok_y):
        if not 1 <= int(tok) <= bins:
            raise ValueError(f"state token {tok} outside [1, {bins}]")
    x = (tok_x - 0.5) * w / bins
    y = (tok_y - 0.5) * h / bins
    return x, y


def state_rows(annotations, bins, size):
    """Per-frame (token_x, token_y) rows from dataio annotation dicts."""
    return [tokenize_state((a["x"], a["y"]), bins, size) for a in annotations]


def tokenize_class(class_id, n_classes):
    """Class id (0-based) -> video-level token (1-based)."""
    if not 0 <= int(class_id) < n_classes:
        raise ValueError(f"class {class_id} outside [0, {n_classes})")
    return int(class_id) + 1


def endframe_tokens(ae, frame):
    """Quantized-encode a target end frame into video-level slot tokens (h*w,)."""
    with torch.no_grad():
        z, _ = ae.encode(frame)
        return ae.codebook.quantize(z).reshape(-1)


class PositionEstimator(nn.Module):
    """Small conv + fully connected head regressing (x, y) from a latent grid.

    Refuses inference until trained (the flag persists through checkpoints).
    """

    def __init__(self, latent_channels=64, hidden=32):
        super().__init__()
        self.conv1 = nn.Conv2d(latent_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.fc = nn.Linear(hidden, 2)
        self.register_buffer("is_trained", torch.tensor(False))

    def forward(self, z):
        squeeze = z.dim() == 3
        if squeeze:
            z = z.unsqueeze(0)
        h = F.leaky_relu(self.conv1(z), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2).mean(dim=(2, 3))
        out = self.fc(h)  # (B, 2) raw (x, y)
        return out.squeeze(0) if squeeze else out

    def estimate(self, z, size):
        """Trained-only inference; output clamped inside the (H, W) frame."""
        if not bool(self.is_trained):
            raise RuntimeError("position estimator is untrained; call train_position_estimator first")
        h, w = size
        with torch.no_grad():
            out = self.forward(z)
        x = out[..., 0].clamp(0, w - 1)
        y = out[..., 1].clamp(0, h - 1)
        return torch.stack([x, y], dim=-1)


def train_position_estimator(est, latents, targets, steps=400, lr=1e-3, batch_size=64,
                             seed=0):
    """MSE regression of (x, y) targets from latent grids; marks `est` trained.

    latents: (N, F, h, w); targets: (N, 2) pixel coordinates. Returns the
    per-step loss history.
    """
    latents = torch.as_tensor(latents, dtype=torch.float32)
    targets = torch.as_tensor(targets, dtype=torch.float32)
    if latents.shape[0] != targets.shape[0] or targets.shape[-1] != 2:
        raise ValueError(
            f"{latents.shape[0]} latents vs targets {tuple(targets.shape)}")
    opt = torch.optim.Adam(est.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    history = []
    n = latents.shape[0]
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        pred = est(latents[idx])
        loss = F.mse_loss(pred, targets[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    est.is_trained.fill_(True)
    return history
