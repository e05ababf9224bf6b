"""The ten shipping criteria, one test and one printed verdict line each.

Criteria 1-5, 9 and 10 are oracle/property checks and run in a couple of
minutes. Criteria 6-8 train real stage-1/stage-2 models through the CLI at
the desk profile below, calibrated for a single-CPU box (roughly an hour
end to end); FLOWCAST_ACCEPT_FULL=1 switches the same assertions to the
full-scale profile for a machine with a real training budget. Tolerances
and margins are identical under both profiles.

Set FLOWCAST_ACCEPT_CACHE=<dir> to keep the trained fixtures between runs
(keyed by the flat profile, so edits that touch the profile retrain).

Run with -s to see the verdict lines for passing criteria too.
"""

import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.stats
import torch
import torch.nn.functional as F

from flowcast import cli, control, dataio, evalkit, flowkit, forecaster, training
from flowcast.autoencoder import (AGG_EPS, Autoencoder, Codebook,
                                  aggregate_multi_context, fuse_context)
from flowcast.config import Config, apply_overrides
from flowcast.forecaster import FRAME_VOCAB, SequenceLayout, TokenTransformer

FULL = os.environ.get("FLOWCAST_ACCEPT_FULL") == "1"

# Desk profile: numbers chosen so every margin below is met with headroom on
# one CPU core; see the run times next to each trained fixture.
DESK = {
    "data.height": 24, "data.width": 24, "data.clip_length": 16,
    "data.n_clips": 48, "data.sprite_radius": 3,
    "data.speed_min": 0.5, "data.speed_max": 1.5,
    "model.base_channels": 16, "model.latent_channels": 32,
    "model.codebook_size": 64, "model.cost_radius": 2, "model.context_size": 3,
    "model.window": 4, "model.state_bins": 12, "model.max_end_gap": 16,
    "training.batch_size": 3, "training.disc_t_window": 4,
    "training.steps_ae": 3000, "training.steps_tf": 3000,
    "training.lr_tf": 3e-4,
    "training.log_every": 500, "training.checkpoint_every": 0,
    "sampling.k_frame": 4,
    "eval.fd_embed_dim": 8,
}
SPEC = {
    "data.n_clips": 2000,  # 64x64, defaults elsewhere = the reference recipe
    "model.context_size": 3,
    "training.log_every": 100, "training.checkpoint_every": 0,
    "eval.fd_embed_dim": 16,
}
PROFILE = SPEC if FULL else DESK
N_EVAL = 64 if FULL else 16     # held-out clips (criteria 6-8)
EVAL_T = 12                     # frames per clip for the criterion-6 rollout
HORIZON = 15                    # predicted frames (criteria 7/8)
EVAL_SEED = 500


def _verdict(num, label, ok, detail):
    line = f"[ACCEPT] criterion {num} ({label}): {'PASS' if ok else 'FAIL'} -- {detail}"
    print("\n" + line)
    assert ok, line


def _run(*argv):
    rc = cli.main([str(a) for a in argv])
    assert rc == 0, f"command {argv[0]} exited {rc}"


def _sets(flat):
    return [tok for k, v in sorted(flat.items()) for tok in ("--set", f"{k}={v}")]


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# trained fixtures (criteria 6-8); everything goes through the shipped CLI


@pytest.fixture(scope="session")
def base(tmp_path_factory):
    cache = os.environ.get("FLOWCAST_ACCEPT_CACHE")
    if not cache:
        return tmp_path_factory.mktemp("accept")
    key = hashlib.sha256(
        json.dumps({**PROFILE, "full": FULL, "n_eval": N_EVAL},
                   sort_keys=True).encode()).hexdigest()[:16]
    path = Path(cache) / key
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def train_root(base):
    root = base / "data"
    if not (root / "manifest.json").exists():
        _run("dataset-gen", *_sets({**PROFILE, "data.root": root}))
    return root


@pytest.fixture(scope="session")
def eval_root(base):
    root = base / "data-eval"
    if not (root / "manifest.json").exists():
        _run("dataset-gen", *_sets({**PROFILE, "data.root": root,
                                    "data.n_clips": N_EVAL, "data.seed": 77}))
    return root


def _train_ae(base, train_root, name, overrides):
    ckpt = base / name / "autoencoder.ckpt"
    if not ckpt.exists():
        _run("train-ae", "--run-dir", base / name,
             *_sets({**PROFILE, "data.root": train_root, **overrides}))
    return ckpt


def _train_tf(base, train_root, ae_ckpt, name, overrides):
    ckpt = base / name / "transformer.ckpt"
    if not ckpt.exists():
        _run("train-transformer", "--ae", ae_ckpt, "--run-dir", base / name,
             *_sets({**PROFILE, "data.root": train_root, **overrides}))
    return ckpt


@pytest.fixture(scope="session")
def ae_flow(base, train_root):
    return _train_ae(base, train_root, "ae-flow", {})


@pytest.fixture(scope="session")
def ae_noflow(base, train_root):
    return _train_ae(base, train_root, "ae-noflow",
                     {"model.context_size": 0, "training.lambda_c": 0.0})


@pytest.fixture(scope="session")
def tf_none(base, train_root, ae_flow):
    return _train_tf(base, train_root, ae_flow, "tf-none", {})


@pytest.fixture(scope="session")
def tf_state(base, train_root, ae_flow):
    return _train_tf(base, train_root, ae_flow, "tf-state",
                     {"model.control": "state"})


@pytest.fixture(scope="session")
def tf_end(base, train_root, ae_flow):
    return _train_tf(base, train_root, ae_flow, "tf-end",
                     {"model.control": "endframe"})


def _eval_clips(eval_root, length=None):
    handle = dataio.load_manifest(eval_root)
    return [dataio.load_clip(d, 0, length) for d in handle.clip_dirs]


def _synthesize(ae, model, layout, cfg, frames, n, seed, **controls):
    sampler = forecaster.SamplerConfig.from_config(cfg)
    sampler.seed = seed
    out, _, _ = forecaster.synthesize(ae, model, layout, frames, n, sampler,
                                      context_size=cfg.model.context_size,
                                      **controls)
    return out


_SHARED = {}  # criterion 7 leaves its trained handles for criterion 9


# ---------------------------------------------------------------------------
# criterion 1: flow inversion


def test_criterion_01_flow_inversion():
    t0 = time.monotonic()
    h = w = 64
    rng = np.random.default_rng(101)
    errors = []
    for i in range(50):
        kind = ("translation", "rotation", "scaling", "composite")[i % 4]
        spec = flowkit.AugmentationSpec(
            kind=kind,
            offset=(float(rng.uniform(-4, 4)), float(rng.uniform(-4, 4))),
            angle_deg=float(rng.uniform(-8, 8)),
            scale=float(rng.uniform(0.9, 1.1)),
            seed=i,
        )
        g = flowkit.make_augmentation_flow(spec, h, w)
        f, _ = flowkit.invert_flow(g)
        # covered cells, recomputed independently of invert_flow internals
        hh, ww = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        th = np.rint(hh + g[0]).astype(int)
        tw = np.rint(ww + g[1]).astype(int)
        ok = (th >= 0) & (th < h) & (tw >= 0) & (tw < w)
        covered = np.zeros((h, w), dtype=bool)
        covered[th[ok], tw[ok]] = True

        x = torch.from_numpy(
            dataio.value_noise(h, w, np.random.default_rng(1000 + i),
                               step=8.0, channels=3))
        back = flowkit.warp(flowkit.warp(x, torch.from_numpy(g)),
                            torch.from_numpy(f))
        err = (back - x).abs().mean(0).numpy()
        errors.append(float(err[covered].mean()))
    max_err = max(errors)

    coverages = []
    for seed in range(20):
        spec = flowkit.AugmentationSpec(kind="elastic", elastic_amplitude=4.0,
                                        elastic_smooth=8.0, seed=seed)
        g = flowkit.make_augmentation_flow(spec, h, w)
        _, cov = flowkit.invert_flow(g)
        coverages.append(cov)
    took = time.monotonic() - t0
    ok = (max_err < 0.02 and min(coverages) >= 0.70 and max(coverages) <= 0.95
          and took < 60.0)
    _verdict(1, "flow inversion", ok,
             f"roundtrip err max {max_err:.4f} (< 0.02), elastic coverage "
             f"[{min(coverages):.3f}, {max(coverages):.3f}] in [0.70, 0.95], "
             f"{took:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# criterion 2: quantizer vs exhaustive nearest neighbor


def test_criterion_02_quantizer():
    torch.manual_seed(21)
    cb = Codebook(6, 64).double()
    with torch.no_grad():  # force exact ties; lower index must win
        cb.entries[:, 10] = cb.entries[:, 3]
        cb.entries[:, 40] = cb.entries[:, 7]
    z = torch.randn(1, 6, 25, 40, dtype=torch.float64)  # 1000 vectors
    tokens = cb.quantize(z)

    vecs = z[0].permute(1, 2, 0).reshape(-1, 6).numpy()
    entries = cb.entries.detach().t().numpy()            # (64, 6)
    d2 = ((vecs[:, None, :] - entries[None, :, :]) ** 2).sum(-1)
    brute = d2.argmin(axis=1) + 1                        # first minimum wins
    agree = bool((tokens.reshape(-1).numpy() == brute).all())

    z_q = cb.lookup(tokens).detach()
    chosen = ((z - z_q) ** 2).sum(1).reshape(-1).numpy()
    optimal = bool((chosen <= d2.min(axis=1) + 1e-9).all())
    tie_hit = bool(((brute == 4) | (brute == 8)).any())
    _verdict(2, "quantizer oracle", agree and optimal and tie_hit,
             f"1000/1000 exhaustive-NN agreement={agree}, per-location "
             f"optimality={optimal}, tie cases exercised={tie_hit}")


# ---------------------------------------------------------------------------
# criterion 3: gradient suite


def _fd_match(fn, leaves, eps=1e-6):
    """max relative error between autograd and central differences."""
    for p in leaves:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in leaves:
        grad = p.grad.clone()
        flat = p.data.reshape(-1)
        num = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            dn = float(fn())
            flat[i] = orig
            num[i] = (up - dn) / (2 * eps)
        num = num.reshape(p.shape)
        scale = max(float(grad.abs().max()), float(num.abs().max()), 1e-8)
        worst = max(worst, float((grad - num).abs().max()) / scale)
    return worst


def test_criterion_03_gradient_suite():
    torch.manual_seed(31)
    rel = {}

    field = torch.randn(2, 5, 6, dtype=torch.float64, requires_grad=True)
    flow = (torch.randn(2, 5, 6, dtype=torch.float64) * 0.7).requires_grad_()
    w_f = torch.randn(2, 5, 6, dtype=torch.float64)
    rel["warp"] = _fd_match(lambda: (flowkit.warp(field, flow) * w_f).sum(),
                            [field, flow])

    d = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    e = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    m = torch.randn(1, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    w_c = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    rel["fuse"] = _fd_match(lambda: (fuse_context(d, e, m) * w_c).sum(),
                            [d, e, m])

    # L_q: finite differences cannot see through the stop-gradients, so the
    # surrogate freezes the sg() operands as constants; its autograd gradient
    # must equal the real loss's gradient first.
    z = torch.randn(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    z_q = torch.randn(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    zc, zqc = z.detach().clone(), z_q.detach().clone()

    def surrogate():
        return F.mse_loss(z_q, zc) + 0.25 * F.mse_loss(z, zqc)

    real = training.quantization_loss(z, z_q, beta=0.25)
    g_real = torch.autograd.grad(real, [z, z_q])
    for p in (z, z_q):
        p.grad = None
    surrogate().backward()
    assert torch.allclose(g_real[0], z.grad) and torch.allclose(g_real[1], z_q.grad)
    rel["L_q"] = _fd_match(surrogate, [z, z_q])

    x = torch.rand(1, 3, 6, 6, dtype=torch.float64)
    x_hat = torch.rand(1, 3, 6, 6, dtype=torch.float64, requires_grad=True)
    extractor = training.IdentityExtractor()
    rel["L_r"] = _fd_match(lambda: training.recovery_loss(x, x_hat, extractor),
                           [x_hat])

    rs = torch.randn(4, dtype=torch.float64, requires_grad=True)
    fs = torch.randn(4, dtype=torch.float64, requires_grad=True)
    rel["L_d"] = _fd_match(lambda: training.gan_losses(rs, fs)[0], [rs, fs])
    rel["L_a"] = _fd_match(lambda: training.gan_losses(rs, fs)[1], [fs])

    f_hat = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    m_hat = torch.randn(1, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    targets = [(torch.randn(1, 2, 4, 4, dtype=torch.float64),
                torch.rand(1, 1, 4, 4, dtype=torch.float64))]
    rel["L_c"] = _fd_match(
        lambda: training.contextual_loss([(f_hat, m_hat)], targets),
        [f_hat, m_hat])

    layout = SequenceLayout((), (), 2, (2, 2), ((FRAME_VOCAB, 5),))
    model = TokenTransformer({FRAME_VOCAB: 5}, 2, 4, 0, dim=8, n_layers=1,
                             n_heads=2).double()
    tokens = torch.randint(1, 6, (2, layout.length))
    emb = model.embeds[FRAME_VOCAB].weight
    rel["L_tf"] = _fd_match(
        lambda: training.transformer_loss(model, tokens, layout), [emb])

    fd_ok = max(rel.values()) < 1e-4

    # straight-through identity: value equals the quantized vectors, gradient
    # passes to z unchanged
    cb = Codebook(4, 8).double()
    z_st_in = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    out, z_qv, _ = cb.straight_through(z_st_in)
    w_st = torch.randn_like(out)
    (out * w_st).sum().backward()
    st_ok = torch.allclose(out, z_qv) and torch.equal(z_st_in.grad, w_st)

    # Appendix-A truncation: the loss at step t must see no gradient from
    # context pyramids older than one step
    torch.manual_seed(32)
    ae = Autoencoder(levels=2, base_channels=8, latent_channels=8,
                     codebook_size=16, cost_radius=1)
    clip = torch.rand(1, 4, 3, 16, 16)
    decoded, _, history = training.rollout_reconstruct(ae, clip, 2,
                                                       truncate_grads=True)
    loss = decoded[-1].square().mean()
    old = [p for pyr in history[2][:-1] for p in pyr]
    newest = list(history[2][-1])
    grads_old = torch.autograd.grad(loss, old, retain_graph=True,
                                    allow_unused=True)
    grads_new = torch.autograd.grad(loss, newest, allow_unused=True)
    trunc_ok = all(g is None or g.abs().max() == 0 for g in grads_old) and \
        any(g is not None and g.abs().max() > 0 for g in grads_new)

    detail = ", ".join(f"{k} {v:.2e}" for k, v in rel.items())
    _verdict(3, "gradient suite", fd_ok and st_ok and trunc_ok,
             f"FD rel errs: {detail} (< 1e-4), straight-through={st_ok}, "
             f"truncation={trunc_ok}")


# ---------------------------------------------------------------------------
# criterion 4: fusion convexity and weight normalization


def test_criterion_04_fusion_invariants():
    torch.manual_seed(41)
    d = torch.randn(1000, 1, 1, 1, dtype=torch.float64)
    e = torch.randn(1000, 1, 1, 1, dtype=torch.float64)
    m = torch.randn(1000, 1, 1, 1, dtype=torch.float64) * 3
    fused = fuse_context(d, e, m)
    lo = torch.minimum(d, e) - 1e-12
    hi = torch.maximum(d, e) + 1e-12
    convex = bool(((fused >= lo) & (fused <= hi)).all())

    # The epsilon in the denominator makes sum(s) = D/(D + eps) exactly, with
    # D = sum_j(1 - sigmoid(m_j)); the 1e-5 band therefore concerns random
    # standard-scale masks, while saturated ones (D -> 0) fall to the guard.
    rng = np.random.default_rng(42)
    worst, formula_worst, n_cells, n_guarded = 0.0, 0.0, 0, 0
    for trial in range(1000):
        k = int(rng.integers(1, 5))
        masks = [torch.tensor(rng.normal(0, 1, (1, 1, 2, 2))) for _ in range(k)]
        if trial % 50 == 0:  # saturated: excluded by the guard, formula still exact
            masks = [torch.full((1, 1, 2, 2), 21.0, dtype=torch.float64)]
        ones = [torch.ones(1, 1, 2, 2, dtype=torch.float64) for _ in masks]
        _, s_sum = aggregate_multi_context(masks, ones)  # sum of the weights
        rel = sum(1.0 - torch.sigmoid(m) for m in masks)
        denom = rel + AGG_EPS
        guarded = denom > 10 * AGG_EPS
        n_cells += denom.numel()
        n_guarded += int(guarded.sum())
        if guarded.any():
            worst = max(worst, float((s_sum[guarded] - 1.0).abs().max()))
        formula_worst = max(formula_worst,
                            float((s_sum - rel / denom).abs().max()))
    ok = convex and worst <= 1e-5 and formula_worst < 1e-12 \
        and n_guarded < n_cells
    _verdict(4, "fusion invariants", ok,
             f"convexity on 1000 inputs={convex}, max |sum(s)-1| {worst:.2e} "
             f"(<= 1e-5) on {n_guarded}/{n_cells} guarded cells, "
             f"exact D/(D+eps) to {formula_worst:.1e} everywhere")


# ---------------------------------------------------------------------------
# criterion 5: transformer layout, causality, sampling


def test_criterion_05_transformer_properties():
    rng = np.random.default_rng(51)
    cap_ok = True
    for _ in range(100):
        gh, gw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        n = int(rng.integers(1, 5))
        extra = ["a", "b", "c"]
        v_slots = tuple(extra[int(i)] for i in rng.integers(0, 3, rng.integers(0, 3)))
        f_slots = tuple(extra[int(i)] for i in rng.integers(0, 3, rng.integers(0, 3)))
        vocabs = {FRAME_VOCAB: int(rng.integers(2, 50))}
        vocabs.update({s: int(rng.integers(2, 30)) for s in extra})
        lay = SequenceLayout(v_slots, f_slots, n, (gh, gw),
                             tuple(sorted(vocabs.items())))
        model = TokenTransformer(vocabs, n, lay.frame_portion, len(v_slots),
                                 dim=16, n_layers=1, n_heads=2)
        want = len(v_slots) + n * (len(f_slots) + gh * gw)
        cap_ok &= lay.length == want and model.capacity == want

    # causality: perturbing token j never changes logits at source positions < j
    torch.manual_seed(52)
    lay = SequenceLayout(("a",), ("b",), 3, (2, 2),
                         ((FRAME_VOCAB, 7), ("a", 4), ("b", 5)))
    model = TokenTransformer(lay.vocab_sizes, 3, lay.frame_portion, 1,
                             dim=16, n_layers=2, n_heads=2)
    model.eval()
    sizes = lay.vocab_sizes
    kinds = [lay.kind_at(i) for i in range(lay.length)]
    seq = torch.tensor([[int(rng.integers(1, sizes[k] + 1)) for k in kinds]])
    causal_ok = True
    with torch.no_grad():
        ref = model(seq, lay)
        for j in (3, 8, lay.length - 1):
            mod = seq.clone()
            mod[0, j] = mod[0, j] % sizes[kinds[j]] + 1
            got = model(mod, lay)
            for (_, pos_r, log_r), (_, pos_g, log_g) in zip(ref, got):
                keep = [i for i, p in enumerate(pos_r) if p < j]
                causal_ok &= torch.equal(log_r[:, keep], log_g[:, keep])

    gen = np.random.default_rng(53)
    logits = torch.randn(12)
    argmax_ok = all(
        forecaster.sample_top_k(logits, 1, gen) == int(logits.argmax()) + 1
        for _ in range(50))

    flat = torch.zeros(8)
    draws = np.array([forecaster.sample_top_k(flat, 8, gen)
                      for _ in range(100_000)])
    counts = np.bincount(draws, minlength=9)[1:]
    p = scipy.stats.chisquare(counts).pvalue
    chi_ok = p > 0.01
    _verdict(5, "transformer properties",
             cap_ok and causal_ok and argmax_ok and chi_ok,
             f"capacity identity x100={cap_ok}, causality={causal_ok}, "
             f"top-1 argmax={argmax_ok}, uniform chi^2 p={p:.3f} (> 0.01)")


# ---------------------------------------------------------------------------
# criterion 6: flow/context reconstruction trend


def test_criterion_06_flow_context_trend(ae_flow, ae_noflow, eval_root):
    ae_f, cfg_f, _ = cli.load_stage1(ae_flow)
    ae_n, _, _ = cli.load_stage1(ae_noflow)
    clips = [dataio.frames_to_tensor(r.frames)
             for r in _eval_clips(eval_root, EVAL_T)]

    def rollout_psnr(ae, ctx):
        vals = []
        for clip in clips:
            with torch.no_grad():
                dec, _, _ = training.rollout_reconstruct(ae, clip.unsqueeze(0), ctx)
            vals += [evalkit.psnr(clip[t], x[0]) for t, x in enumerate(dec, 1)]
        return float(np.mean(vals))

    p0 = rollout_psnr(ae_n, 0)
    p1 = rollout_psnr(ae_f, 1)
    p8 = rollout_psnr(ae_f, 8)
    ok = (p1 >= p0 + 1.0) and (p8 >= p1 - 0.2)
    _verdict(6, "flow/context trend", ok,
             f"no-flow {p0:.2f} dB, flow ctx1 {p1:.2f} (margin "
             f"{p1 - p0:+.2f} >= 1.0), ctx8 {p8:.2f} ({p8 - p1:+.2f} >= -0.2)")


# ---------------------------------------------------------------------------
# criterion 7: prediction beats the repeat-last baseline


def test_criterion_07_prediction_fd(ae_flow, tf_none, eval_root):
    ae, _, _ = cli.load_stage1(ae_flow)
    model, layout, cfg, _ = cli.load_stage2(tf_none)
    real, synth, base_seq = [], [], []
    for i, rec in enumerate(_eval_clips(eval_root, HORIZON + 1)):
        frames = dataio.frames_to_tensor(rec.frames)
        out = _synthesize(ae, model, layout, cfg, frames[:1], HORIZON,
                          EVAL_SEED + i)
        real.append(frames[1:])
        synth.append(out)
        base_seq.append(frames[0].unsqueeze(0).expand(HORIZON, -1, -1, -1))
    embedder = evalkit.VideoEmbedder(dim=cfg.eval.fd_embed_dim, seed=0)
    fd_model, _ = evalkit.feature_distance(torch.stack(real), torch.stack(synth),
                                           embedder, min_sequences=N_EVAL)
    fd_base, _ = evalkit.feature_distance(torch.stack(real), torch.stack(base_seq),
                                          embedder, min_sequences=N_EVAL)
    _SHARED["handles"] = (ae, model, layout, cfg)
    _SHARED["first_clip"] = dataio.frames_to_tensor(
        _eval_clips(eval_root, 1)[0].frames)
    ok = fd_model <= 0.8 * fd_base
    _verdict(7, "prediction FD-proxy", ok,
             f"model {fd_model:.3f} vs repeat-last {fd_base:.3f} "
             f"({(1 - fd_model / fd_base) * 100:.0f}% lower, >= 20% required, "
             f"{N_EVAL} held-out clips)")


# ---------------------------------------------------------------------------
# criterion 8: state tracking and end-frame control


def test_criterion_08_control(ae_flow, tf_state, tf_end, tf_none, eval_root):
    ae, _, _ = cli.load_stage1(ae_flow)
    model_s, lay_s, cfg_s, _ = cli.load_stage2(tf_state)
    model_e, lay_e, cfg_e, _ = cli.load_stage2(tf_end)
    model_u, lay_u, cfg_u, _ = cli.load_stage2(tf_none)
    size = (cfg_s.data.height, cfg_s.data.width)

    errs, ssim_end, ssim_unc = [], [], []
    for i, rec in enumerate(_eval_clips(eval_root, HORIZON + 1)):
        frames = dataio.frames_to_tensor(rec.frames)
        bg = dataio.frames_to_tensor(rec.background)

        rows = control.state_rows(rec.annotations, cfg_s.model.state_bins, size)
        out_s = _synthesize(ae, model_s, lay_s, cfg_s, frames[:1], HORIZON,
                            EVAL_SEED + i, frame_annotations=rows)
        for t in range(1, HORIZON + 1):
            cx, cy = evalkit.foreground_centroid(out_s[t - 1], bg)
            ann = rec.annotations[t]
            errs.append(math.hypot(cx - ann["x"], cy - ann["y"]))

        end_tokens = control.endframe_tokens(ae, frames[HORIZON]).tolist()
        out_e = _synthesize(ae, model_e, lay_e, cfg_e, frames[:1], HORIZON,
                            EVAL_SEED + i, video_tokens=end_tokens,
                            end_t=HORIZON)
        out_u = _synthesize(ae, model_u, lay_u, cfg_u, frames[:1], HORIZON,
                            EVAL_SEED + i)
        ssim_end.append(evalkit.ssim(out_e[-1], frames[HORIZON]))
        ssim_unc.append(evalkit.ssim(out_u[-1], frames[HORIZON]))

    err = float(np.mean(errs))
    s_e, s_u = float(np.mean(ssim_end)), float(np.mean(ssim_unc))
    ok = err <= 2.0 and s_e >= s_u
    _verdict(8, "control", ok,
             f"state centroid err {err:.2f} px (<= 2.0), end-frame SSIM "
             f"{s_e:.3f} vs unconditioned {s_u:.3f} (>=)")


# ---------------------------------------------------------------------------
# criterion 9: metric oracles


def _render_trajectories(m_traj=4, t_len=8, h=24, w=24):
    """Sprite clips sharing one background, distinct straight-line paths."""
    scene = dataio.SpriteSceneConfig(height=h, width=w, radius=3,
                                     clip_length=t_len, seed=91)
    bg = dataio.render_background(scene, np.random.default_rng(91))
    bg_t = dataio.frames_to_tensor(bg)
    trajs, masks = [], []
    for m in range(m_traj):
        start = np.array([6.0 + 3 * m, 5.0])
        step = np.array([(-1.0) ** m * 0.8, 1.2])
        frames, mask = [], []
        for t in range(t_len):
            pos = start + t * step
            alpha = torch.from_numpy(
                dataio.sprite_coverage("disc", pos, 3, h, w))
            frames.append(bg_t * (1 - alpha) + alpha * 0.95)
            mask.append(alpha > 0)
        trajs.append(torch.stack(frames))
        masks.append(torch.stack(mask))
    return torch.stack(trajs), torch.stack(masks)


def test_criterion_09_metric_oracles():
    rng = np.random.default_rng(92)
    a = torch.from_numpy(rng.random((3, 8, 8), dtype=np.float64))
    b = torch.from_numpy(rng.random((3, 8, 8), dtype=np.float64))
    se = 0.0
    for c in range(3):
        for i in range(8):
            for j in range(8):
                se += (float(a[c, i, j]) - float(b[c, i, j])) ** 2
    ref_psnr = 10.0 * math.log10(1.0 / (se / a.numel()))
    psnr_ok = abs(evalkit.psnr(a, b) - ref_psnr) < 1e-9

    a13 = torch.from_numpy(rng.random((3, 13, 13), dtype=np.float64))
    b13 = (a13 + 0.1 * torch.from_numpy(
        rng.standard_normal((3, 13, 13)))).clamp(0, 1)
    ssim_ok = abs(evalkit.ssim(a13, b13) - _scalar_ssim(a13, b13)) < 1e-6

    mu1, s1 = np.zeros(2), np.diag([2.0, 3.0])
    mu2, s2 = np.array([1.0, -2.0]), np.diag([5.0, 0.5])
    want = (np.sum((mu1 - mu2) ** 2)
            + (math.sqrt(2) - math.sqrt(5)) ** 2
            + (math.sqrt(3) - math.sqrt(0.5)) ** 2)
    fd_ok = abs(evalkit.frechet_gaussian(mu1, s1, mu2, s2) - want) < 1e-8

    trajs, masks = _render_trajectories()
    same = trajs[0].unsqueeze(0).expand(3, -1, -1, -1, -1)
    zero_ok = evalkit.diversity(same, "whole") == 0.0
    div_w = evalkit.diversity(trajs, "whole")
    div_m = evalkit.diversity(trajs, "moving", masks)
    render_ok = div_m >= div_w > 0

    sampled = ""
    sampled_ok = True
    if "handles" in _SHARED:  # trained-sampler outputs, when criterion 7 ran
        ae, model, layout, cfg = _SHARED["handles"]
        clip0 = _SHARED["first_clip"]
        outs, mv = [], []
        for s in range(3):
            out = _synthesize(ae, model, layout, cfg, clip0[:1], 6,
                              EVAL_SEED + 90 + s)
            flows = evalkit.estimate_sequence_flows(ae, out)
            mm = evalkit.moving_parts_mask(flows)
            outs.append(out)
            mv.append(torch.cat([mm, mm[-1:]]))
        sw = evalkit.diversity(torch.stack(outs), "whole")
        sm = evalkit.diversity(torch.stack(outs), "moving", torch.stack(mv))
        sampled_ok = sm >= sw
        sampled = f", sampled DIV(moving) {sm:.4f} >= DIV(whole) {sw:.4f}"
    ok = psnr_ok and ssim_ok and fd_ok and zero_ok and render_ok and sampled_ok
    _verdict(9, "metric oracles", ok,
             f"psnr={psnr_ok}, ssim={ssim_ok}, frechet={fd_ok}, "
             f"DIV(identical)=0 {zero_ok}, rendered DIV(moving) {div_m:.4f} "
             f">= DIV(whole) {div_w:.4f}{sampled}")


def _scalar_ssim(a, b, n=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    luma = (0.299, 0.587, 0.114)
    ya = sum(l * a[c].numpy() for c, l in enumerate(luma))
    yb = sum(l * b[c].numpy() for c, l in enumerate(luma))
    g = np.exp(-((np.arange(n) - n // 2) ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    h, w = ya.shape
    vals = []
    for i in range(h - n + 1):
        for j in range(w - n + 1):
            pa = ya[i:i + n, j:j + n]
            pb = yb[i:i + n, j:j + n]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * pa * pa).sum() - ma * ma
            vb = (win * pb * pb).sum() - mb * mb
            cov = (win * pa * pb).sum() - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# criterion 10: bit-identical reruns


def test_criterion_10_reproducibility(tmp_path):
    tiny = {
        "data.height": 16, "data.width": 16, "data.clip_length": 8,
        "data.n_clips": 6, "data.sprite_radius": 3,
        "data.speed_min": 0.5, "data.speed_max": 1.5,
        "model.levels": 2, "model.base_channels": 8, "model.latent_channels": 8,
        "model.codebook_size": 16, "model.cost_radius": 1,
        "model.tf_layers": 1, "model.tf_heads": 2, "model.tf_dim": 32,
        "model.window": 3, "model.context_size": 1,
        "training.steps_ae": 6, "training.steps_tf": 6,
        "training.batch_size": 2, "training.disc_t_window": 3,
        "training.log_every": 100, "training.checkpoint_every": 0,
        "sampling.k_frame": 4,
    }
    # generation determinism across independent roots ...
    data_digests = []
    for rerun in ("a", "b"):
        root = tmp_path / rerun / "data"
        _run("dataset-gen", *_sets({**tiny, "data.root": root}))
        data_digests.append(_tree_digest(root))
    # ... then rerun every later stage against one fixed config
    sets = _sets({**tiny, "data.root": tmp_path / "a" / "data"})
    ae_digests, tf_digests, traces, synths = [], [], [], []
    for rerun in ("a", "b"):
        root = tmp_path / f"run-{rerun}"
        _run("train-ae", "--run-dir", root / "ae", *sets)
        ae_digests.append(json.loads(
            (root / "ae" / "run.json").read_text())["checkpoint_digest"])
        _run("train-transformer", "--ae", root / "ae" / "autoencoder.ckpt",
             "--run-dir", root / "tf", *sets)
        tf_digests.append(json.loads(
            (root / "tf" / "run.json").read_text())["checkpoint_digest"])
        _run("synthesize", "--ae", root / "ae" / "autoencoder.ckpt",
             "--tf", root / "tf" / "transformer.ckpt", "--frames", 3,
             "--seed", 9, "--run-dir", root / "synth", *sets)
        traces.append((root / "synth" / "tokens.jsonl").read_bytes())
        synths.append(root / "synth" / "frames")
    frames_equal = all(
        (synths[0] / p.name).read_bytes() == p.read_bytes()
        for p in synths[1].iterdir())
    ok = (data_digests[0] == data_digests[1] and ae_digests[0] == ae_digests[1]
          and tf_digests[0] == tf_digests[1] and traces[0] == traces[1]
          and frames_equal)
    _verdict(10, "reproducibility", ok,
             f"dataset {data_digests[0][:12]}.., ae ckpt {ae_digests[0][:12]}.., "
             f"tf ckpt {tf_digests[0][:12]}.., token traces and frames "
             f"byte-identical across reruns")
