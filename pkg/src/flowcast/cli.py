"""Command-line entry points and experiment orchestration.

One command per process. Every training/synthesis/evaluation command works
inside a run directory that gets a lockfile, a flat config snapshot, and all
logs and artifacts, so a run can be replayed bit-identically from its
directory alone. Exit codes: 0 success, 2 config error, 3 missing artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import control, dataio, evalkit, forecaster, training
from .autoencoder import Autoencoder
from .config import Config, ConfigError, config_from_flat, load_config, to_flat
from .training import NumericalError, Stage1Trainer

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

# fields that must agree between a checkpoint and the config using it
AE_COMPAT_KEYS = (
    "model.levels", "model.latent_channels", "model.codebook_size",
    "model.base_channels", "model.cost_radius", "data.height", "data.width",
)
TF_COMPAT_KEYS = AE_COMPAT_KEYS + (
    "model.tf_layers", "model.tf_heads", "model.tf_dim", "model.window",
    "model.state_bins", "model.max_end_gap", "model.control",
)


# ---------------------------------------------------------------------------
# run directories


class RunDir:
    """Locked run directory holding config snapshot, logs, and artifacts."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = self.path / "lock"

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"run directory {self.path} is locked by another process "
                f"(remove {self._lock} if stale)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        if self._lock.exists():
            self._lock.unlink()
        return False

    def snapshot(self, cfg, argv=None):
        flat = to_flat(cfg)
        lines = [f"{k} = {v}" for k, v in sorted(flat.items())]
        (self.path / "config.txt").write_text("\n".join(lines) + "\n")
        if argv is not None:
            (self.path / "invocation.json").write_text(
                json.dumps({"argv": list(argv)}, indent=1) + "\n")

    def record(self, **entries):
        """Merge entries into run.json (digests, seeds, outputs)."""
        path = self.path / "run.json"
        data = json.loads(path.read_text()) if path.exists() else {}
        data.update(entries)
        path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# model construction and checkpoint plumbing


def build_autoencoder(cfg):
    m = cfg.model
    return Autoencoder(levels=m.levels, base_channels=m.base_channels,
                       latent_channels=m.latent_channels,
                       codebook_size=m.codebook_size, cost_radius=m.cost_radius)


def build_transformer(cfg):
    layout = forecaster.layout_from_config(cfg, control=cfg.model.control)
    return forecaster.TokenTransformer.from_config(cfg, layout), layout


def _np_rng_state(rng):
    return json.loads(json.dumps(rng.bit_generator.state, default=int))


def save_stage1(path, trainer, cfg):
    state = {
        "model": trainer.model.state_dict(),
        "ema": trainer.ema.state_dict(),
        "disc_i": trainer.disc_i.state_dict(),
        "disc_t": trainer.disc_t.state_dict(),
        "opt_g": trainer.opt_g.state_dict(),
        "opt_d": trainer.opt_d.state_dict(),
        "step": trainer.step_count,
        "np_rng": _np_rng_state(trainer.rng),
        "torch_rng": torch.get_rng_state(),
    }
    return ckpt.save_checkpoint(path, state, to_flat(cfg), "stage1")


def _intkey_optim_state(state):
    return {"state": {int(k): v for k, v in state["state"].items()},
            "param_groups": state["param_groups"]}


def load_stage1(path, use_ema=True):
    """Autoencoder (EMA weights by default), its Config, and the raw state."""
    _, cfg_flat, state = ckpt.load_checkpoint(path, expected_kind="stage1")
    cfg = config_from_flat(cfg_flat)
    ae = build_autoencoder(cfg)
    ae.load_state_dict(state["model"])
    if use_ema:
        with torch.no_grad():
            for name, p in ae.named_parameters():
                p.copy_(state["ema"]["shadow"][name])
    ae.eval()
    return ae, cfg, state


def resume_stage1(trainer, state):
    trainer.model.load_state_dict(state["model"])
    trainer.ema.load_state_dict(state["ema"])
    trainer.disc_i.load_state_dict(state["disc_i"])
    trainer.disc_t.load_state_dict(state["disc_t"])
    trainer.opt_g.load_state_dict(_intkey_optim_state(state["opt_g"]))
    trainer.opt_d.load_state_dict(_intkey_optim_state(state["opt_d"]))
    trainer.step_count = int(state["step"])
    trainer.rng = np.random.default_rng()
    trainer.rng.bit_generator.state = state["np_rng"]
    torch.set_rng_state(state["torch_rng"].to(torch.uint8))


def save_stage2(path, model, opt, step, cfg, rng):
    state = {
        "model": model.state_dict(),
        "opt": opt.state_dict(),
        "step": step,
        "np_rng": _np_rng_state(rng),
        "torch_rng": torch.get_rng_state(),
    }
    return ckpt.save_checkpoint(path, state, to_flat(cfg), "stage2")


def load_stage2(path):
    _, cfg_flat, state = ckpt.load_checkpoint(path, expected_kind="stage2")
    cfg = config_from_flat(cfg_flat)
    model, layout = build_transformer(cfg)
    model.load_state_dict(state["model"])
    model.eval()
    return model, layout, cfg, state


# ---------------------------------------------------------------------------
# data plumbing


def _dataset(cfg):
    return dataio.load_manifest(cfg.data.root)


def _split_dirs(handle):
    """Deterministic train/held-out split: last tenth (at least one) held out."""
    dirs = handle.clip_dirs
    n_held = max(1, len(dirs) // 10)
    return dirs[:-n_held] or dirs, dirs[-n_held:]


def _clip_tensor(clip_dir, t0=0, length=None):
    rec = dataio.load_clip(clip_dir, t0, length)
    return dataio.frames_to_tensor(rec.frames), rec


def _sample_batch(handle, dirs, rng, n, t_len):
    total = handle.manifest["T"]
    if t_len > total:
        raise ConfigError(f"need {t_len}-frame windows but clips have {total} frames")
    clips = []
    for _ in range(n):
        d = dirs[int(rng.integers(0, len(dirs)))]
        t0 = int(rng.integers(0, total - t_len + 1))
        clips.append(_clip_tensor(d, t0, t_len)[0])
    return torch.stack(clips)


def save_frame_png(path, frame):
    from PIL import Image

    arr = dataio.tensor_to_frames(frame)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def dump_flow_diagnostics(out_dir, flows_masks):
    """Per-context, per-level flows and fusion masks as grayscale image grids."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for ci, per_level in enumerate(flows_masks):
        for li, (flow, mask) in enumerate(per_level):
            f = flow[0] if flow.dim() == 4 else flow
            m = mask[0] if mask.dim() == 4 else mask
            panels = [f[0], f[1], torch.sigmoid(m[0])]
            rendered = []
            for p in panels:
                lo, hi = float(p.min()), float(p.max())
                rendered.append((p - lo) / (hi - lo) if hi > lo else torch.zeros_like(p))
            grid = torch.cat(rendered, dim=1).unsqueeze(0).expand(3, -1, -1)
            save_frame_png(out_dir / f"ctx{ci}_level{li}.png", grid)


# ---------------------------------------------------------------------------
# commands


def cmd_dataset_gen(args):
    cfg = _cfg(args)
    d = cfg.data
    scene = dataio.SpriteSceneConfig(
        height=d.height, width=d.width, n_sprites=d.n_sprites,
        shapes=tuple(s.strip() for s in d.sprite_shapes.split(",") if s.strip()),
        radius=d.sprite_radius, speed_min=d.speed_min, speed_max=d.speed_max,
        n_classes=d.n_classes, clip_length=d.clip_length, seed=d.seed)
    try:
        scene.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    handle = dataio.generate_sprites_dataset(scene, d.n_clips, d.root)
    import hashlib
    digest = hashlib.sha256((Path(d.root) / "manifest.json").read_bytes()).hexdigest()
    print(f"wrote {len(handle.clip_dirs)} clips under {d.root}")
    print(f"manifest sha256 {digest}")
    return EXIT_OK


def _train_stage1(cfg, run, handle, train_dirs):
    t = cfg.training
    torch.manual_seed(t.seed)  # model init + any torch-side sampling
    trainer = Stage1Trainer(build_autoencoder(cfg), cfg, dump_dir=str(run.path))
    rng = np.random.default_rng(t.seed + 1)  # batch sampling stream
    t_len = min(t.disc_t_window, handle.manifest["T"])
    csv_path = run.path / "losses.csv"
    for _ in range(t.steps_ae):
        batch = _sample_batch(handle, train_dirs, rng, t.batch_size, t_len)
        report = trainer.step(batch)
        training.append_loss_row(csv_path, report)
        if report["step"] % t.log_every == 0 or report["step"] == 1:
            print(f"[train-ae] step {report['step']}/{t.steps_ae} "
                  f"total {report['total']:.4f} r {report['loss_r']:.4f} "
                  f"c {report['loss_c']:.4f}")
        if t.checkpoint_every and report["step"] % t.checkpoint_every == 0 \
                and report["step"] < t.steps_ae:
            save_stage1(run.path / f"autoencoder_step{report['step']}.ckpt", trainer, cfg)
    return trainer


def cmd_train_ae(args):
    cfg = _cfg(args)
    handle = _dataset(cfg)
    train_dirs, held_dirs = _split_dirs(handle)
    with RunDir(args.run_dir) as run:
        run.snapshot(cfg, sys.argv)
        trainer = _train_stage1(cfg, run, handle, train_dirs)
        digest = save_stage1(run.path / "autoencoder.ckpt", trainer, cfg)
        run.record(checkpoint_digest=digest, steps=trainer.step_count,
                   seed=cfg.training.seed)
        # diagnostic dump: flows/masks for one held-out frame pair
        ae, _, _ = load_stage1(run.path / "autoencoder.ckpt")
        clip, _ = _clip_tensor(held_dirs[0], 0, 2)
        with torch.no_grad():
            z, _ = ae.encode(clip[1])
            _, pyr = ae.encode(clip[0])
            _, fm = ae.decode(ae.codebook.lookup(ae.codebook.quantize(z)), [pyr])
        dump_flow_diagnostics(run.path / "diagnostics", fm)
        print(f"saved {run.path / 'autoencoder.ckpt'} (sha256 {digest[:16]}...)")
    return EXIT_OK


class TokenCache:
    """Lazy per-clip token grids and annotations under a frozen autoencoder."""

    def __init__(self, ae, dirs):
        self.ae = ae
        self.dirs = dirs
        self._cache = {}

    def get(self, idx):
        if idx not in self._cache:
            frames, rec = _clip_tensor(self.dirs[idx])
            with torch.no_grad():
                z, _ = self.ae.encode(frames)
                grids = self.ae.codebook.quantize(z)  # (T, h, w)
            self._cache[idx] = (grids, rec.annotations)
        return self._cache[idx]


def _window_tokens(cache, cfg, layout, rng, idx, gap=None):
    """One training sequence from clip idx; gap fixes the end-frame distance."""
    grids, anns = cache.get(idx)
    total = grids.shape[0]
    n = layout.n_frames
    if total < n:
        raise ConfigError(f"clips have {total} frames but the window needs {n}")
    mode = cfg.model.control
    if mode == "endframe":
        # end_t = t0 + n - 2 + gap, so the window start must leave room
        t0 = int(rng.integers(0, total - n + 2 - gap))
    else:
        t0 = int(rng.integers(0, total - n + 1))
    window = [grids[t] for t in range(t0, t0 + n)]
    video_tokens, frame_anns = None, None
    if mode == "state":
        size = (cfg.data.height, cfg.data.width)
        frame_anns = [control.tokenize_state((anns[t]["x"], anns[t]["y"]),
                                             cfg.model.state_bins, size)
                      for t in range(t0, t0 + n)]
    elif mode == "class":
        video_tokens = [control.tokenize_class(anns[0]["class"], cfg.data.n_classes)]
    elif mode == "endframe":
        video_tokens = grids[t0 + n - 2 + gap].reshape(-1).tolist()
    return forecaster.assemble_sequence(video_tokens, frame_anns, window, layout)


def _sample_gap(cfg, total, rng):
    """Shared end-frame gap for one batch (the embedding is per sequence)."""
    if cfg.model.control != "endframe":
        return None
    n = cfg.model.window
    hi = min(cfg.model.max_end_gap, total - n + 1)
    if hi < 1:
        raise ConfigError(f"clips of {total} frames leave no room for an end frame "
                          f"beyond a {n}-frame window")
    return int(rng.integers(1, hi + 1))


def cmd_train_transformer(args):
    cfg = _cfg(args)
    ae, ae_cfg, _ = load_stage1(_existing(args.ae))
    ckpt.ensure_compatible(to_flat(ae_cfg), to_flat(cfg), AE_COMPAT_KEYS)
    handle = _dataset(cfg)
    train_dirs, _ = _split_dirs(handle)
    t = cfg.training
    torch.manual_seed(t.seed)
    model, layout = build_transformer(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=t.lr_tf)
    rng = np.random.default_rng(t.seed + 2)
    cache = TokenCache(ae, train_dirs)
    with RunDir(args.run_dir) as run:
        run.snapshot(cfg, sys.argv)
        csv_path = run.path / "losses_tf.csv"
        total = handle.manifest["T"]
        for step in range(1, t.steps_tf + 1):
            gap = _sample_gap(cfg, total, rng)
            seqs = []
            for _ in range(t.batch_size):
                idx = int(rng.integers(0, len(train_dirs)))
                seqs.append(_window_tokens(cache, cfg, layout, rng, idx, gap))
            tokens = torch.stack(seqs)
            report = training.train_transformer_step(
                model, opt, tokens, layout, end_gap=gap)
            new = not csv_path.exists()
            with open(csv_path, "a") as fh:
                if new:
                    fh.write("step,loss,per_token\n")
                fh.write(f"{step},{report['loss']},{report['per_token']}\n")
            if step % t.log_every == 0 or step == 1:
                print(f"[train-tf] step {step}/{t.steps_tf} "
                      f"loss {report['loss']:.2f} per-token {report['per_token']:.4f}")
        digest = save_stage2(run.path / "transformer.ckpt", model, opt, t.steps_tf, cfg, rng)
        run.record(checkpoint_digest=digest, steps=t.steps_tf, seed=t.seed,
                   ae_checkpoint=str(args.ae))
        print(f"saved {run.path / 'transformer.ckpt'} (sha256 {digest[:16]}...)")
    return EXIT_OK


def _controls_for_clip(cfg, ae, rec, m, n):
    """(frame_annotations, video_tokens, end_t) for a synthesis request."""
    mode = cfg.model.control
    frame_anns, video_tokens, end_t = None, None, None
    if mode == "state":
        if rec.annotations is None or len(rec.annotations) < m + n:
            raise ConfigError(
                f"state control needs annotations for {m + n} timesteps")
        size = (cfg.data.height, cfg.data.width)
        frame_anns = control.state_rows(rec.annotations, cfg.model.state_bins, size)
    elif mode == "class":
        if rec.annotations is None:
            raise ConfigError("class control needs an annotated clip")
        video_tokens = [control.tokenize_class(rec.annotations[0]["class"],
                                               cfg.data.n_classes)]
    elif mode == "endframe":
        end_t = m + n - 1
        if rec.frames.shape[0] <= end_t:
            raise ConfigError(
                f"end-frame control needs the clip to reach t={end_t}")
        end_frame = dataio.frames_to_tensor(rec.frames[end_t])
        video_tokens = control.endframe_tokens(ae, end_frame).tolist()
    return frame_anns, video_tokens, end_t


def _snapshot_cfg(cfg, args):
    """Checkpoint snapshot < config file < --set, revalidated."""
    flat = to_flat(cfg)
    if args.config is not None:
        from .config import parse_config_text
        flat.update(parse_config_text(Path(args.config).read_text()))
    flat.update(_parse_set(args.set or []))
    return config_from_flat(flat)


def cmd_synthesize(args):
    ae, ae_cfg, _ = load_stage1(_existing(args.ae))
    model, layout, cfg, _ = load_stage2(_existing(args.tf))
    ckpt.ensure_compatible(to_flat(ae_cfg), to_flat(cfg), AE_COMPAT_KEYS)
    cfg = _snapshot_cfg(cfg, args)
    handle = _dataset(cfg)
    dirs = handle.clip_dirs
    if not 0 <= args.clip < len(dirs):
        raise ConfigError(f"--clip {args.clip} outside dataset of {len(dirs)} clips")
    m = args.context_frames
    n = args.frames if args.frames is not None else cfg.eval.horizon
    frames, rec = _clip_tensor(dirs[args.clip])
    if m < 1 or m > frames.shape[0]:
        raise ConfigError(f"--context-frames {m} outside clip of {frames.shape[0]} frames")
    frame_anns, video_tokens, end_t = _controls_for_clip(cfg, ae, rec, m, n)
    sampler = forecaster.SamplerConfig.from_config(cfg)
    if args.seed is not None:
        sampler.seed = args.seed
    with RunDir(args.run_dir) as run:
        run.snapshot(cfg, sys.argv)
        out, trace, peak = forecaster.synthesize(
            ae, model, layout, frames[:m], n, sampler,
            frame_annotations=frame_anns, video_tokens=video_tokens, end_t=end_t,
            context_size=cfg.model.context_size)
        frames_dir = run.path / "frames"
        frames_dir.mkdir(exist_ok=True)
        ctx_dir = run.path / "context"
        ctx_dir.mkdir(exist_ok=True)
        for i in range(m):
            save_frame_png(ctx_dir / f"ctx_{i + 1:06d}.png", frames[i])
        for i in range(out.shape[0]):
            save_frame_png(frames_dir / f"frame_{i + 1:06d}.png", out[i])
        with open(run.path / "tokens.jsonl", "w") as fh:
            for line in trace:
                fh.write(json.dumps(line, sort_keys=True) + "\n")
        run.record(clip=args.clip, context_frames=m, frames=n,
                   sampler_seed=sampler.seed, peak_sequence_length=peak,
                   capacity=model.capacity)
        print(f"synthesized {n} frames into {frames_dir} "
              f"(peak sequence {peak}/{model.capacity})")
    return EXIT_OK


def _recon_metrics(ae, cfg, dirs, n_clips, t_len, per_frame=None):
    """Autoregressive reconstruction PSNR/SSIM over held-out clips."""
    vals_p, vals_s = [], []
    for ci, d in enumerate(dirs[:n_clips]):
        clip, _ = _clip_tensor(d, 0, t_len)
        with torch.no_grad():
            decoded, _, _ = training.rollout_reconstruct(
                ae, clip.unsqueeze(0), cfg.model.context_size)
        for t, x_hat in enumerate(decoded, start=1):
            p = evalkit.psnr(clip[t], x_hat[0])
            s = evalkit.ssim(clip[t], x_hat[0])
            vals_p.append(p)
            vals_s.append(s)
            if per_frame is not None:
                per_frame.append((ci, t, p, s))
    return float(np.mean(vals_p)), float(np.mean(vals_s))


def cmd_evaluate(args):
    ae, ae_cfg, _ = load_stage1(_existing(args.ae))
    cfg = ae_cfg
    model = layout = None
    if args.tf is not None:
        model, layout, cfg, _ = load_stage2(_existing(args.tf))
        ckpt.ensure_compatible(to_flat(ae_cfg), to_flat(cfg), AE_COMPAT_KEYS)
    cfg = _snapshot_cfg(cfg, args)
    handle = _dataset(cfg)
    _, held_dirs = _split_dirs(handle)
    e = cfg.eval
    horizon = min(e.horizon, handle.manifest["T"] - 1)
    report = {"psnr": None, "ssim": None, "div_whole": None, "div_moving": None,
              "fd_proxy": None, "n": {}, "seeds": {"eval": e.seed, "fd": e.fd_seed}}
    with RunDir(args.run_dir) as run:
        run.snapshot(cfg, sys.argv)
        per_frame = []
        n_recon = min(len(held_dirs), 8)
        report["psnr"], report["ssim"] = _recon_metrics(
            ae, cfg, held_dirs, n_recon, min(handle.manifest["T"], 16), per_frame)
        report["n"]["recon_clips"] = n_recon
        with open(run.path / "per_frame.csv", "w") as fh:
            fh.write("clip,t,psnr,ssim\n")
            for row in per_frame:
                fh.write(",".join(str(v) for v in row) + "\n")

        if model is not None and not args.recon_only:
            # FD-proxy: model continuations vs repeat-last baseline
            n_seq = e.n_sequences
            real, synth, base = [], [], []
            for i in range(n_seq):
                d = held_dirs[i % len(held_dirs)]
                clip, rec = _clip_tensor(d, 0, horizon + 1)
                frame_anns, video_tokens, end_t = _controls_for_clip(
                    cfg, ae, rec, 1, horizon)
                sampler = forecaster.SamplerConfig.from_config(cfg)
                sampler.seed = e.seed + i
                out, _, _ = forecaster.synthesize(
                    ae, model, layout, clip[:1], horizon, sampler,
                    frame_annotations=frame_anns, video_tokens=video_tokens,
                    end_t=end_t, context_size=cfg.model.context_size)
                real.append(clip[1:])
                synth.append(out)
                base.append(clip[0].unsqueeze(0).expand(horizon, -1, -1, -1))
            embedder = evalkit.VideoEmbedder(dim=e.fd_embed_dim, seed=e.fd_seed)
            fd_model, flag_m = evalkit.feature_distance(
                torch.stack(real), torch.stack(synth), embedder,
                min_sequences=min(32, n_seq))
            fd_base, flag_b = evalkit.feature_distance(
                torch.stack(real), torch.stack(base), embedder,
                min_sequences=min(32, n_seq))
            report["fd_proxy"] = {"model": fd_model, "baseline_repeat_last": fd_base,
                                  "ridge_flagged": bool(flag_m or flag_b)}
            report["n"]["fd_sequences"] = n_seq

            # DIV: trajectories under identical conditioning
            clip, rec = _clip_tensor(held_dirs[0], 0, horizon + 1)
            frame_anns, video_tokens, end_t = _controls_for_clip(cfg, ae, rec, 1, horizon)
            trajs, masks = [], []
            for i in range(e.n_trajectories):
                sampler = forecaster.SamplerConfig.from_config(cfg)
                sampler.seed = e.seed + 1000 + i
                out, _, _ = forecaster.synthesize(
                    ae, model, layout, clip[:1], horizon, sampler,
                    frame_annotations=frame_anns, video_tokens=video_tokens,
                    end_t=end_t, context_size=cfg.model.context_size)
                trajs.append(out)
                flows = evalkit.estimate_sequence_flows(ae, out)
                mask = evalkit.moving_parts_mask(flows)
                masks.append(torch.cat([mask, mask[-1:]]))  # align to T frames
            trajs = torch.stack(trajs)
            masks = torch.stack(masks)
            # reported on the conventional 1e-3 scale
            report["div_whole"] = evalkit.diversity(trajs, "whole") / 1e-3
            report["div_moving"] = evalkit.diversity(trajs, "moving", masks) / 1e-3
            report["n"]["div_trajectories"] = e.n_trajectories
        (run.path / "report.json").write_text(
            json.dumps(report, indent=1, sort_keys=True) + "\n")
        print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_flow_invert(args):
    path = _existing(args.input)
    g = np.load(path)
    if g.ndim != 3 or g.shape[0] != 2:
        raise ConfigError(f"{path}: expected a (2, H, W) flow, got {g.shape}")
    from .flowkit import invert_flow

    f, coverage = invert_flow(g)
    out = Path(args.output) if args.output else path.with_name(path.stem + "_inv.npy")
    np.save(out, f)
    print(f"coverage={coverage:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


ABLATION_AXES = {
    "flow": [("flow_off", {"model.context_size": 0, "training.lambda_c": 0.0}),
             ("flow_on", {"model.context_size": 1})],
    "context": [("context_0", {"model.context_size": 0}),
                ("context_1", {"model.context_size": 1}),
                ("context_4", {"model.context_size": 4}),
                ("context_8", {"model.context_size": 8})],
    "selfsup": [("selfsup_off", {"training.lambda_c": 0.0}),
                ("selfsup_on", {})],
}


def cmd_ablate(args):
    base_cfg = _cfg(args)
    handle = _dataset(base_cfg)
    train_dirs, held_dirs = _split_dirs(handle)
    rows = []
    with RunDir(args.run_dir) as run:
        run.snapshot(base_cfg, sys.argv)
        for name, overrides in ABLATION_AXES[args.axis]:
            flat = to_flat(base_cfg)
            flat.update(overrides)
            cfg = config_from_flat(flat)
            sub = run.path / name
            with RunDir(sub) as sub_run:
                sub_run.snapshot(cfg)
                trainer = _train_stage1(cfg, sub_run, handle, train_dirs)
                save_stage1(sub / "autoencoder.ckpt", trainer, cfg)
                ae, _, _ = load_stage1(sub / "autoencoder.ckpt")
                p, s = _recon_metrics(ae, cfg, held_dirs, min(len(held_dirs), 4),
                                      min(handle.manifest["T"], 8))
            rows.append((name, p, s))
            print(f"[ablate] {name}: psnr {p:.2f} ssim {s:.4f}")
        with open(run.path / "ablation.csv", "w") as fh:
            fh.write("setting,psnr,ssim\n")
            for name, p, s in rows:
                fh.write(f"{name},{p},{s}\n")
        print(f"wrote {run.path / 'ablation.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def _parse_set(pairs):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _cfg(args):
    return load_config(path=args.config, cli_overrides=_parse_set(args.set or []))


def _existing(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return path


def _add_common(p, run_dir_default=None):
    p.add_argument("--config", default=None, help="config file (key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="dotted-path config override (repeatable)")
    if run_dir_default is not None:
        p.add_argument("--run-dir", default=run_dir_default,
                       help=f"run directory (default {run_dir_default})")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowcast",
        description="Context-aware video synthesis: data, training, synthesis, eval.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-gen", help="render the sprites dataset")
    _add_common(p)
    p.set_defaults(func=cmd_dataset_gen)

    p = sub.add_parser("train-ae", help="stage-1 autoencoder training")
    _add_common(p, "runs/train-ae")
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train-transformer", help="stage-2 transformer training")
    _add_common(p, "runs/train-tf")
    p.add_argument("--ae", required=True, help="stage-1 checkpoint")
    p.set_defaults(func=cmd_train_transformer)

    p = sub.add_parser("synthesize", help="autoregressive frame synthesis")
    _add_common(p, "runs/synthesize")
    p.add_argument("--ae", required=True)
    p.add_argument("--tf", required=True, help="stage-2 checkpoint")
    p.add_argument("--clip", type=int, default=0, help="dataset clip for context/controls")
    p.add_argument("--context-frames", type=int, default=1, metavar="M")
    p.add_argument("--frames", type=int, default=None, metavar="N")
    p.add_argument("--seed", type=int, default=None, help="sampler seed override")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="metric report on held-out clips")
    _add_common(p, "runs/evaluate")
    p.add_argument("--ae", required=True)
    p.add_argument("--tf", default=None)
    p.add_argument("--recon-only", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("flow-invert", help="approximate inverse of a flow field")
    p.add_argument("--input", required=True, help="(2, H, W) .npy flow")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_flow_invert)

    p = sub.add_parser("ablate", help="rerun train/eval along one ablation axis")
    _add_common(p, "runs/ablate")
    p.add_argument("--axis", choices=sorted(ABLATION_AXES), default="context")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ckpt.CheckpointError, dataio.ClipFormatError) as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
