"""Two-stage training: adversarial autoencoder first, then the token transformer.

Stage 1 optimizes L = lambda_q*L_q + lambda_r*L_r + lambda_a*L_a + lambda_c*L_c
against an image discriminator and a 3D temporal discriminator, with EMA
shadow parameters for the final weights. The temporal path mimics inference:
frames are decoded one by one and re-encoded as context for the next step,
keeping gradients only for the context features of the immediately preceding
frame. Stage 2 is plain causal cross-entropy over assembled token sequences
with the autoencoder frozen.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import flowkit


class NumericalError(RuntimeError):
    """A loss went non-finite; the offending batch is dumped when possible."""


@dataclass
class LossWeights:
    lambda_q: float = 1.0
    lambda_r: float = 10.0
    lambda_a: float = 1.0
    lambda_c: float = 1.0
    beta: float = 0.25

    @classmethod
    def from_config(cls, tcfg):
        return cls(tcfg.lambda_q, tcfg.lambda_r, tcfg.lambda_a, tcfg.lambda_c, tcfg.beta)


# ---------------------------------------------------------------------------
# losses


def quantization_loss(z, z_q, beta=0.25):
    """||sg(z) - z_q||^2 + beta * ||sg(z_q) - z||^2, mean over elements.

    The first term trains the codebook, the second (commitment) the encoder.
    """
    if z.shape != z_q.shape:
        raise ValueError(f"z {tuple(z.shape)} vs z_q {tuple(z_q.shape)}")
    return F.mse_loss(z_q, z.detach()) + beta * F.mse_loss(z, z_q.detach())


def recovery_loss(x, x_hat, extractor):
    """L1 in RGB space plus L1 between (frozen) extractor features."""
    if x.shape != x_hat.shape:
        raise ValueError(f"x {tuple(x.shape)} vs x_hat {tuple(x_hat.shape)}")
    rgb = (x - x_hat).abs().mean()
    fa, fb = extractor(x), extractor(x_hat)
    feat = sum((a - b).abs().mean() for a, b in zip(fa, fb)) / len(fa)
    return rgb + feat


def gan_losses(real_score, fake_score):
    """(L_d, L_a) in softplus form; negative score means "real"."""
    if not (torch.isfinite(real_score).all() and torch.isfinite(fake_score).all()):
        raise NumericalError("non-finite discriminator scores")
    loss_d = F.softplus(real_score).mean() + F.softplus(-fake_score).mean()
    loss_a = F.softplus(fake_score).mean()
    return loss_d, loss_a


def contextual_loss(flows_masks, targets):
    """Mean over levels of ||f_t - f_hat||^2 + ||o' - sigmoid(m_hat)||^2.

    flows_masks: per-level (flow, mask) estimates from the decoder;
    targets: per-level (flow_target, warped_occlusion) at matching sizes.
    """
    if len(flows_masks) != len(targets):
        raise ValueError(f"{len(flows_masks)} estimate levels vs {len(targets)} target levels")
    total = 0.0
    for (f_hat, m_hat), (f_t, o_t) in zip(flows_masks, targets):
        if f_hat.shape != f_t.shape:
            raise ValueError(f"flow {tuple(f_hat.shape)} vs target {tuple(f_t.shape)}")
        total = total + F.mse_loss(f_hat, f_t) + F.mse_loss(torch.sigmoid(m_hat), o_t)
    return total / len(flows_masks)


# ---------------------------------------------------------------------------
# fixed feature extractors for the recovery loss


class IdentityExtractor(nn.Module):
    def forward(self, x):
        return [x]


class PerceptualExtractor(nn.Module):
    """Frozen, randomly initialized strided conv stack; returns one map per scale."""

    def __init__(self, channels=(16, 32, 64, 64), seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for c_out in channels:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            fan_in = c_in * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats


# ---------------------------------------------------------------------------
# discriminators


class _Down2d(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_in, 3, padding=1)
        self.conv2 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        h = self.conv2(F.leaky_relu(self.conv1(F.leaky_relu(x, 0.2)), 0.2))
        h = F.avg_pool2d(h, 2)
        return h + self.skip(F.avg_pool2d(x, 2))


class ImageDiscriminator(nn.Module):
    """Downsampling residual stack -> scalar score per image (negative = real)."""

    def __init__(self, base=32, n_down=3, max_channels=128):
        super().__init__()
        self.stem = nn.Conv2d(3, base, 3, padding=1)
        blocks, c = [], base
        for _ in range(n_down):
            c_next = min(2 * c, max_channels)
            blocks.append(_Down2d(c, c_next))
            c = c_next
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Linear(c, 1)

    def forward(self, x):
        h = self.blocks(self.stem(x))
        h = F.leaky_relu(h, 0.2).mean(dim=(2, 3))
        return self.out(h).squeeze(1)  # (B,)


class _Down3d(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv3d(c_in, c_in, 3, padding=1)
        self.conv2 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.skip = nn.Conv3d(c_in, c_out, 1)

    def forward(self, x):
        pool = (1 if x.shape[2] < 2 else 2, 2, 2)
        h = self.conv2(F.leaky_relu(self.conv1(F.leaky_relu(x, 0.2)), 0.2))
        h = F.avg_pool3d(h, pool)
        return h + self.skip(F.avg_pool3d(x, pool))


class TemporalDiscriminator(nn.Module):
    """Same family as the image discriminator with 3D convolutions over T x H x W."""

    def __init__(self, base=32, n_down=3, max_channels=128):
        super().__init__()
        self.stem = nn.Conv3d(3, base, 3, padding=1)
        blocks, c = [], base
        for _ in range(n_down):
            c_next = min(2 * c, max_channels)
            blocks.append(_Down3d(c, c_next))
            c = c_next
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Linear(c, 1)

    def forward(self, video):
        # video: (B, 3, T, H, W)
        h = self.blocks(self.stem(video))
        h = F.leaky_relu(h, 0.2).mean(dim=(2, 3, 4))
        return self.out(h).squeeze(1)


# ---------------------------------------------------------------------------
# EMA


class EmaTracker:
    """Exponential moving average of a module's parameters."""

    def __init__(self, module, decay=0.999):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in module.named_parameters()}

    @torch.no_grad()
    def update(self, module):
        for k, v in module.named_parameters():
            self.shadow[k].mul_(self.decay).add_(v, alpha=1.0 - self.decay)

    @torch.no_grad()
    def copy_to(self, module):
        for k, v in module.named_parameters():
            v.copy_(self.shadow[k])

    def state_dict(self):
        return {"decay": self.decay, "shadow": self.shadow}

    def load_state_dict(self, state):
        self.decay = state["decay"]
        self.shadow = {k: v.clone() for k, v in state["shadow"].items()}


# ---------------------------------------------------------------------------
# stage 1


def sample_context_views(frames, rng, tcfg):
    """Per-sample augmented context views for a (B, 3, H, W) batch."""
    views = []
    for b in range(frames.shape[0]):
        h, w = frames.shape[-2:]
        while True:
            spec = flowkit.sample_augmentation_spec(
                rng, h, w,
                max_translate=tcfg.aug_max_translate,
                max_rotate=tcfg.aug_max_rotate,
                max_scale=tcfg.aug_max_scale,
                elastic_amp=tcfg.aug_elastic_amp,
                elastic_smooth=tcfg.aug_elastic_smooth,
                blur_sigma=tcfg.aug_blur_sigma,
            )
            try:
                views.append(flowkit.build_context_view(frames[b], spec))
                break
            except flowkit.AugmentationRejected:
                continue
    return views


def stack_view_targets(views, sizes):
    """Per-level (flow_target, warped_occlusion) batches from per-sample views."""
    per_sample = [v.targets_at(sizes) for v in views]
    out = []
    for k in range(len(sizes)):
        f_k = torch.stack([t[k][0] for t in per_sample])
        o_k = torch.stack([t[k][1] for t in per_sample])
        out.append((f_k, o_k))
    return out


def rollout_reconstruct(model, clip, context_size, truncate_grads=True):
    """Reconstruct clip frames autoregressively, re-encoding decoded frames as context.

    clip: (B, T, 3, H, W). Frame 0 is real context; frames 1..T-1 are decoded
    from their own quantized latents fused with up to `context_size` previous
    (decoded) frames. With truncate_grads only the immediately preceding
    frame's context features keep gradients. Returns decoded frames 1..T-1,
    per-frame (z, z_q) pairs, and the context-pyramid history (for probes).
    """
    b, t_len = clip.shape[:2]
    buf = deque(maxlen=context_size) if context_size > 0 else deque(maxlen=0)
    _, pyr0 = model.encode(clip[:, 0])
    if context_size > 0:
        buf.append(pyr0)
    decoded, latents, history = [], [], [list(buf)]
    for t in range(1, t_len):
        z, _ = model.encode(clip[:, t])
        z_st, z_q, _ = model.codebook.straight_through(z)
        latents.append((z, z_q))
        ctx = list(buf)
        if truncate_grads and len(ctx) > 1:
            ctx = [[p.detach() for p in pyr] for pyr in ctx[:-1]] + [ctx[-1]]
        x_hat, _ = model.decode(z_st, ctx)
        decoded.append(x_hat)
        if context_size > 0:
            # Re-encode the decoded frame for the next steps' context. Under
            # truncation the frame is detached first so the graph of step t
            # never reaches back past the features of frame t-1.
            src = x_hat.detach() if truncate_grads else x_hat
            _, pyr_hat = model.encode(src)
            buf.append(pyr_hat)
            history.append(list(buf))
    return decoded, latents, history


def _check_disjoint(opt_a, opt_b):
    seen = {id(p) for g in opt_a.param_groups for p in g["params"]}
    for g in opt_b.param_groups:
        for p in g["params"]:
            if id(p) in seen:
                raise ValueError("generator and discriminator optimizers share parameters")


class Stage1Trainer:
    """Owns the autoencoder, discriminators, optimizers, EMA and step logic."""

    def __init__(self, model, cfg, extractor=None, dump_dir=None):
        self.model = model
        self.cfg = cfg
        t = cfg.training
        self.weights = LossWeights.from_config(t)
        self.extractor = extractor if extractor is not None else PerceptualExtractor(seed=t.seed)
        self.disc_i = ImageDiscriminator()
        self.disc_t = TemporalDiscriminator()
        self.opt_g = torch.optim.Adam(model.parameters(), lr=t.lr_ae, betas=(0.5, 0.9))
        disc_params = list(self.disc_i.parameters()) + list(self.disc_t.parameters())
        self.opt_d = torch.optim.Adam(disc_params, lr=t.lr_disc, betas=(0.5, 0.9))
        _check_disjoint(self.opt_g, self.opt_d)
        self.ema = EmaTracker(model, decay=t.ema_decay)
        self.rng = np.random.default_rng(t.seed)
        self.step_count = 0
        self.dump_dir = dump_dir

    def _abort(self, tag, clips):
        if self.dump_dir is not None:
            import os
            os.makedirs(self.dump_dir, exist_ok=True)
            path = os.path.join(self.dump_dir, f"nan_batch_step{self.step_count}.pt")
            torch.save({"clips": clips.detach().cpu(), "stage": tag}, path)
            raise NumericalError(f"non-finite {tag} at step {self.step_count}; batch saved to {path}")
        raise NumericalError(f"non-finite {tag} at step {self.step_count}")

    def step(self, clips):
        """One generator step and one discriminator step on a (B, T, 3, H, W) batch.

        Returns the scalar loss components; their weighted sum is `total`.
        """
        w = self.weights
        t_cfg = self.cfg.training
        b, t_len = clips.shape[:2]
        adversarial = w.lambda_a > 0
        if adversarial and b < 2:
            raise ValueError("discriminator training needs batch size >= 2")
        t_len = min(t_len, t_cfg.disc_t_window)
        h, wid = clips.shape[-2:]

        loss_q_terms, loss_r_terms = [], []
        fake_frames = []

        # temporal path: autoregressive reconstruction of frames 1..t_len-1
        decoded, latents, _ = rollout_reconstruct(
            self.model, clips[:, :t_len], self.cfg.model.context_size)
        for t_i, ((z, z_q), x_hat) in enumerate(zip(latents, decoded), start=1):
            loss_q_terms.append(quantization_loss(z, z_q, w.beta))
            loss_r_terms.append(recovery_loss(clips[:, t_i], x_hat, self.extractor))
            fake_frames.append(x_hat)

        # context-view path on frame 0: self-supervised flow/mask targets
        x0 = clips[:, 0]
        z0, _ = self.model.encode(x0)
        z0_st, z0_q, _ = self.model.codebook.straight_through(z0)
        loss_q_terms.append(quantization_loss(z0, z0_q, w.beta))
        loss_c = torch.zeros(())
        if w.lambda_c > 0:
            views = sample_context_views(x0, self.rng, t_cfg)
            xc = torch.stack([v.frame for v in views])
            _, ctx_pyr = self.model.encode(xc)
            x0_hat, fm = self.model.decode(z0_st, [ctx_pyr])
            targets = stack_view_targets(views, self.model.fusion_sizes(h, wid))
            loss_c = contextual_loss(fm[0], targets)
        else:
            x0_hat, _ = self.model.decode(z0_st)
        loss_r_terms.append(recovery_loss(x0, x0_hat, self.extractor))
        fake_frames.append(x0_hat)

        loss_q = sum(loss_q_terms) / len(loss_q_terms)
        loss_r = sum(loss_r_terms) / len(loss_r_terms)

        fake_video = None
        if decoded:
            fake_video = torch.stack([clips[:, 0]] + decoded, dim=2)  # (B, 3, T, H, W)
        loss_a = torch.zeros(())
        if adversarial:
            adv_terms = [F.softplus(self.disc_i(torch.cat(fake_frames))).mean()]
            if fake_video is not None:
                adv_terms.append(F.softplus(self.disc_t(fake_video)).mean())
            loss_a = sum(adv_terms) / len(adv_terms)

        total = (w.lambda_q * loss_q + w.lambda_r * loss_r
                 + w.lambda_a * loss_a + w.lambda_c * loss_c)
        if not torch.isfinite(total):
            self._abort("generator loss", clips)
        if total.requires_grad:
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
            self.opt_g.step()
        self.ema.update(self.model)

        # discriminator step (separate optimizer; generator params untouched)
        loss_d_i = torch.zeros(())
        loss_d_t = torch.zeros(())
        if adversarial:
            real = clips[:, :t_len].reshape(-1, 3, h, wid)
            fake = torch.cat([f.detach() for f in fake_frames])
            loss_d_i, _ = gan_losses(self.disc_i(real), self.disc_i(fake))
            if fake_video is not None:
                real_video = clips[:, :t_len].transpose(1, 2)
                loss_d_t, _ = gan_losses(
                    self.disc_t(real_video), self.disc_t(fake_video.detach()))
            loss_d = loss_d_i + loss_d_t
            if not torch.isfinite(loss_d):
                self._abort("discriminator loss", clips)
            self.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            self.opt_d.step()

        self.step_count += 1
        return {
            "step": self.step_count,
            "loss_q": float(loss_q.detach()),
            "loss_r": float(loss_r.detach()),
            "loss_a": float(loss_a.detach()),
            "loss_c": float(loss_c.detach()),
            "loss_d_i": float(loss_d_i.detach()),
            "loss_d_t": float(loss_d_t.detach()),
            "total": float(total.detach()),
        }


LOSS_CSV_HEADER = "step,loss_q,loss_r,loss_a,loss_c,loss_d_i,loss_d_t,total"


def append_loss_row(path, report):
    """Append one CSV row (writing the header on first use)."""
    import os
    new = not os.path.exists(path)
    with open(path, "a") as fh:
        if new:
            fh.write(LOSS_CSV_HEADER + "\n")
        fh.write(",".join(str(report[k]) for k in LOSS_CSV_HEADER.split(",")) + "\n")


# ---------------------------------------------------------------------------
# stage 2


def transformer_loss(model, tokens, layout, end_gap=None):
    """Summed cross-entropy over positions 2..L (mean over the batch)."""
    if tokens.shape[1] != layout.length:
        raise ValueError(f"sequence length {tokens.shape[1]} vs layout {layout.length}")
    if layout.length > model.capacity:
        raise ValueError(f"sequence length {layout.length} exceeds capacity {model.capacity}")
    logits = model(tokens, layout, end_gap=end_gap)
    total = 0.0
    for name, positions, rows in logits:
        # rows: (B, n_positions, vocab); targets are the *next* tokens, 0-based
        target = tokens[:, [p + 1 for p in positions]] - 1
        total = total + F.cross_entropy(
            rows.reshape(-1, rows.shape[-1]), target.reshape(-1), reduction="sum")
    return total / tokens.shape[0]


def train_transformer_step(model, optimizer, tokens, layout, end_gap=None):
    """One cross-entropy step; the autoencoder is frozen and not involved here."""
    loss = transformer_loss(model, tokens, layout, end_gap=end_gap)
    if not torch.isfinite(loss):
        raise NumericalError("non-finite transformer loss")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    n_pred = layout.length - 1
    val = float(loss.detach())
    return {"loss": val, "per_token": val / max(1, n_pred)}
