"""Token-sequence forecasting: layout, causal transformer, sampling, synthesis.

A sequence interleaves video-level annotation tokens, then for each of N
frames its frame-level annotation tokens followed by h*w frame tokens in
raster order, for a total length L = l_v + N*(l_f + h*w). Every position gets
token + timestep + intra-frame embeddings. Annotation tokens are given, never
sampled; frame tokens are drawn top-k. Generation beyond N frames slides a
stride-1 window while the decoder's context buffer advances shift-and-add.

All tokens are 1-based at this interface.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import ContextBuffer

FRAME_VOCAB = "frame"


@dataclass(frozen=True)
class SequenceLayout:
    """Slot plan of one annotated token sequence.

    video_slots / frame_slots name the vocabulary of each annotation slot;
    vocabs maps vocabulary name -> size (must include "frame").
    """

    video_slots: tuple = ()
    frame_slots: tuple = ()
    n_frames: int = 1
    grid: tuple = (8, 8)
    vocabs: tuple = ((FRAME_VOCAB, 512),)

    @property
    def vocab_sizes(self):
        return dict(self.vocabs)

    @property
    def frame_portion(self):
        return len(self.frame_slots) + self.grid[0] * self.grid[1]

    @property
    def length(self):
        return len(self.video_slots) + self.n_frames * self.frame_portion

    def kind_at(self, i):
        """Vocabulary name of position i (0-based)."""
        l_v = len(self.video_slots)
        if i < l_v:
            return self.video_slots[i]
        j = (i - l_v) % self.frame_portion
        return self.frame_slots[j] if j < len(self.frame_slots) else FRAME_VOCAB

    def position_meta(self):
        """(kinds, timesteps, intra) per position; timestep -1 marks video slots."""
        kinds, tsteps, intra = [], [], []
        for j, name in enumerate(self.video_slots):
            kinds.append(name)
            tsteps.append(-1)
            intra.append(j)
        for t in range(self.n_frames):
            for j in range(self.frame_portion):
                kinds.append(self.kind_at(len(self.video_slots) + t * self.frame_portion + j))
                tsteps.append(t)
                intra.append(j)
        return kinds, tsteps, intra

    def with_frames(self, n_frames):
        return SequenceLayout(self.video_slots, self.frame_slots, n_frames,
                              self.grid, self.vocabs)


def layout_from_config(cfg, control="none", n_frames=None):
    """Build the layout implied by a Config and a control mode."""
    gh, gw = cfg.grid_h, cfg.grid_w
    vocabs = {FRAME_VOCAB: cfg.model.codebook_size}
    video_slots, frame_slots = (), ()
    if control == "state":
        frame_slots = ("state_x", "state_y")
        vocabs["state_x"] = cfg.model.state_bins
        vocabs["state_y"] = cfg.model.state_bins
    elif control == "class":
        video_slots = ("class",)
        vocabs["class"] = cfg.data.n_classes
    elif control == "endframe":
        video_slots = (FRAME_VOCAB,) * (gh * gw)
    elif control != "none":
        raise ValueError(f"unknown control mode {control!r}")
    return SequenceLayout(
        video_slots=video_slots,
        frame_slots=frame_slots,
        n_frames=n_frames if n_frames is not None else cfg.model.window,
        grid=(gh, gw),
        vocabs=tuple(sorted(vocabs.items())),
    )


def assemble_sequence(video_tokens, frame_annotations, grids, layout):
    """Interleave annotations and raster-order token grids into one (L,) tensor."""
    video_tokens = list(video_tokens or [])
    if len(video_tokens) != len(layout.video_slots):
        raise ValueError(
            f"{len(video_tokens)} video tokens for {len(layout.video_slots)} slots")
    if len(grids) != layout.n_frames:
        raise ValueError(f"{len(grids)} grids for {layout.n_frames} frames")
    frame_annotations = frame_annotations or [[] for _ in grids]
    if len(frame_annotations) != len(grids):
        raise ValueError("one annotation row per frame required")
    sizes = layout.vocab_sizes
    out = []
    for j, tok in enumerate(video_tokens):
        _check_token(tok, sizes[layout.video_slots[j]], f"video slot {j}")
        out.append(int(tok))
    for t, (ann, grid) in enumerate(zip(frame_annotations, grids)):
        ann = list(ann)
        if len(ann) != len(layout.frame_slots):
            raise ValueError(
                f"frame {t}: {len(ann)} annotation tokens, expected {len(layout.frame_slots)}")
        for j, tok in enumerate(ann):
            _check_token(tok, sizes[layout.frame_slots[j]], f"frame {t} slot {j}")
            out.append(int(tok))
        grid = torch.as_tensor(grid)
        if tuple(grid.shape) != layout.grid:
            raise ValueError(f"frame {t}: grid {tuple(grid.shape)} != {layout.grid}")
        flat = grid.reshape(-1).tolist()
        for tok in flat:
            _check_token(tok, sizes[FRAME_VOCAB], f"frame {t} token")
        out.extend(int(v) for v in flat)
    seq = torch.tensor(out, dtype=torch.long)
    assert seq.numel() == layout.length
    return seq


def disassemble_sequence(seq, layout):
    """Inverse of assemble_sequence."""
    seq = torch.as_tensor(seq).reshape(-1)
    if seq.numel() != layout.length:
        raise ValueError(f"sequence length {seq.numel()} != layout length {layout.length}")
    l_v = len(layout.video_slots)
    l_f = len(layout.frame_slots)
    video_tokens = seq[:l_v].tolist()
    anns, grids = [], []
    for t in range(layout.n_frames):
        start = l_v + t * layout.frame_portion
        anns.append(seq[start: start + l_f].tolist())
        grids.append(seq[start + l_f: start + layout.frame_portion].reshape(layout.grid).clone())
    return video_tokens, anns, grids


def _check_token(tok, size, what):
    if not 1 <= int(tok) <= size:
        raise ValueError(f"{what}: token {int(tok)} outside [1, {size}]")


@lru_cache(maxsize=128)
def _layout_index(layout):
    """Positions grouped by vocabulary plus timestep/intra index tensors."""
    kinds, tsteps, intra = layout.position_meta()
    by_vocab = {}
    for i, name in enumerate(kinds):
        by_vocab.setdefault(name, []).append(i)
    by_vocab = {k: torch.tensor(v) for k, v in by_vocab.items()}
    frame_pos = torch.tensor([i for i, t in enumerate(tsteps) if t >= 0], dtype=torch.long)
    video_pos = torch.tensor([i for i, t in enumerate(tsteps) if t < 0], dtype=torch.long)
    ts = torch.tensor([tsteps[i] for i in frame_pos], dtype=torch.long)
    intra_f = torch.tensor([intra[i] for i in frame_pos], dtype=torch.long)
    intra_v = torch.tensor([intra[i] for i in video_pos], dtype=torch.long)
    return kinds, by_vocab, frame_pos, video_pos, ts, intra_f, intra_v


# ---------------------------------------------------------------------------
# model


class Block(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        b, l, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q = q.view(b, l, self.heads, d // self.heads).transpose(1, 2)
        k = k.view(b, l, self.heads, d // self.heads).transpose(1, 2)
        v = v.view(b, l, self.heads, d // self.heads).transpose(1, 2)
        att = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        att = att.transpose(1, 2).reshape(b, l, d)
        x = x + self.proj(att)
        return x + self.mlp(self.ln2(x))


class TokenTransformer(nn.Module):
    """Causal transformer over annotated token sequences.

    One embedding table and one output head per vocabulary; positions get a
    spatio-temporal decomposition: token + timestep + intra-frame embeddings.
    Video-level slots use a dedicated timestep vector, or, in end-frame mode,
    a relative-gap embedding clamped at max_end_gap.
    """

    def __init__(self, vocabs, n_frames, frame_portion, video_portion=0,
                 dim=128, n_layers=4, n_heads=4, max_end_gap=32):
        super().__init__()
        if FRAME_VOCAB not in vocabs:
            raise ValueError('vocabs must include "frame"')
        self.n_frames = n_frames
        self.frame_portion = frame_portion
        self.video_portion = video_portion
        self.capacity = video_portion + n_frames * frame_portion
        self.max_end_gap = max_end_gap
        self.embeds = nn.ModuleDict(
            {name: nn.Embedding(size, dim) for name, size in vocabs.items()})
        self.heads_out = nn.ModuleDict(
            {name: nn.Linear(dim, size) for name, size in vocabs.items()})
        self.t_embed = nn.Embedding(n_frames + 1, dim)  # last index: video slots
        self.gap_embed = nn.Embedding(max_end_gap, dim)
        self.intra_frame = nn.Embedding(frame_portion, dim)
        self.intra_video = nn.Embedding(max(1, video_portion), dim)
        self.blocks = nn.ModuleList(Block(dim, n_heads) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(dim)
        for emb in self.embeds.values():
            nn.init.normal_(emb.weight, std=0.02)

    @classmethod
    def from_config(cls, cfg, layout):
        m = cfg.model
        return cls(layout.vocab_sizes, m.window, layout.frame_portion,
                   len(layout.video_slots), dim=m.tf_dim, n_layers=m.tf_layers,
                   n_heads=m.tf_heads, max_end_gap=m.max_end_gap)

    def embed_sequence(self, tokens, layout, end_gap=None):
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        b, l = tokens.shape
        if l > self.capacity:
            raise ValueError(f"sequence length {l} exceeds capacity {self.capacity}")
        kinds, by_vocab, frame_pos, video_pos, ts, intra_f, intra_v = _layout_index(layout)
        dim = self.t_embed.weight.shape[1]
        x = torch.zeros(b, l, dim, dtype=self.t_embed.weight.dtype,
                        device=self.t_embed.weight.device)
        for name, pos in by_vocab.items():
            pos = pos[pos < l]
            if pos.numel() == 0:
                continue
            tok = tokens[:, pos]
            size = self.embeds[name].num_embeddings
            if tok.min() < 1 or tok.max() > size:
                raise ValueError(f"{name} token outside [1, {size}]")
            x[:, pos] = self.embeds[name](tok - 1)
        fp = frame_pos[frame_pos < l]
        if fp.numel():
            keep = frame_pos < l
            x[:, fp] = x[:, fp] + self.t_embed(ts[keep]) + self.intra_frame(intra_f[keep])
        vp = video_pos[video_pos < l]
        if vp.numel():
            if end_gap is not None:
                if end_gap < 1:
                    raise ValueError(f"end-frame gap must be >= 1, got {end_gap}")
                gap = min(int(end_gap), self.max_end_gap)
                slot_t = self.gap_embed.weight[gap - 1]
            else:
                slot_t = self.t_embed.weight[self.n_frames]
            keep = video_pos < l
            x[:, vp] = x[:, vp] + slot_t + self.intra_video(intra_v[keep])
        return x  # (B, L, D)

    def hidden(self, tokens, layout, end_gap=None):
        x = self.embed_sequence(tokens, layout, end_gap=end_gap)
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)

    def forward(self, tokens, layout, end_gap=None):
        """Next-token logits grouped by target vocabulary.

        Returns a list of (vocab_name, source_positions, logits) where logits
        is (B, len(source_positions), vocab_size) scoring the token *after*
        each source position.
        """
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        h = self.hidden(tokens, layout, end_gap=end_gap)
        kinds = _layout_index(layout)[0]
        l = tokens.shape[1]
        groups = {}
        for p in range(l - 1):
            groups.setdefault(kinds[p + 1], []).append(p)
        out = []
        for name in sorted(groups):
            pos = groups[name]
            out.append((name, pos, self.heads_out[name](h[:, pos])))
        return out

    def next_logits(self, prefix, layout, end_gap=None):
        """Logits for the position right after a (B?, P) prefix."""
        if prefix.dim() == 1:
            prefix = prefix.unsqueeze(0)
        p = prefix.shape[1]
        if p >= layout.length:
            raise ValueError("prefix already spans the full layout")
        h = self.hidden(prefix, layout, end_gap=end_gap)
        name = layout.kind_at(p)
        return self.heads_out[name](h[:, -1]), name


def endframe_positional(model, end_tokens, current_t, end_t):
    """Embedding rows for an end frame sitting in the video-level slots.

    The timestep term encodes the remaining gap end_t - current_t, clamped to
    the learned range; it is re-evaluated as the window advances.
    """
    if end_t <= current_t:
        raise ValueError(f"end frame at t={end_t} not after current t={current_t}")
    end_tokens = torch.as_tensor(end_tokens).reshape(-1)
    if end_tokens.numel() != model.video_portion:
        raise ValueError(
            f"{end_tokens.numel()} end-frame tokens for {model.video_portion} video slots")
    gap = min(end_t - current_t, model.max_end_gap)
    e = model.embeds[FRAME_VOCAB](end_tokens - 1)
    e = e + model.gap_embed.weight[gap - 1]
    e = e + model.intra_video.weight[torch.arange(end_tokens.numel())]
    return e


# ---------------------------------------------------------------------------
# sampling


def sample_top_k(logits, k, rng):
    """Draw a 1-based token from the renormalized softmax over the k largest logits.

    Ties at the k-th place keep the lower token index. Deterministic given the
    numpy Generator state.
    """
    v = np.asarray(logits.detach().cpu().numpy() if torch.is_tensor(logits) else logits,
                   dtype=np.float64).ravel()
    if not np.isfinite(v).all():
        raise ValueError("non-finite logits")
    if not 1 <= k <= v.size:
        raise ValueError(f"k={k} outside [1, {v.size}]")
    order = np.lexsort((np.arange(v.size), -v))[:k]  # stable sort: ties -> lower index
    sel = v[order]
    p = np.exp(sel - sel.max())
    p /= p.sum()
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return int(order[min(idx, k - 1)]) + 1


def _rng_digest(rng):
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=int)
    return hashlib.sha256(state.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# synthesis


@dataclass
class SamplerConfig:
    k_frame: int = 32
    k_state: int = 4
    seed: int = 0

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.sampling.k_frame, cfg.sampling.k_state, cfg.sampling.seed)


def synthesize(ae, model, layout, ctx_frames, n, sampler, frame_annotations=None,
               video_tokens=None, end_t=None, context_size=1):
    """Autoregressive sliding-window synthesis of n frames.

    ctx_frames: (m, 3, H, W), m >= 1. frame_annotations[t] supplies the
    annotation row for absolute timestep t (required for all m+n frames when
    the layout declares frame slots). video_tokens fill the video-level slots
    (class token, or the quantized end frame with end_t set). Returns
    (frames (n, 3, H, W), trace, peak_len); trace has one record per new frame.
    """
    ctx_frames = torch.as_tensor(ctx_frames)
    if ctx_frames.dim() != 4 or ctx_frames.shape[0] < 1:
        raise ValueError("need at least one (3, H, W) context frame")
    m = ctx_frames.shape[0]
    if layout.frame_slots:
        have = len(frame_annotations or [])
        if have < m + n:
            raise ValueError(
                f"control declares frame annotations but only {have} rows "
                f"given for {m + n} timesteps")
    if video_tokens is not None and len(video_tokens) != len(layout.video_slots):
        raise ValueError("video_tokens do not fill the video-level slots")
    if layout.video_slots and video_tokens is None:
        raise ValueError("layout declares video-level slots but no video_tokens given")
    if end_t is not None:
        if not layout.video_slots:
            raise ValueError("end_t given but the layout has no video-level slots")
        if end_t < m + n - 1:
            raise ValueError(f"end frame at t={end_t} lies before the last "
                             f"synthesized frame t={m + n - 1}")
    rng = np.random.default_rng(sampler.seed)
    window = layout.n_frames

    with torch.no_grad():
        buf = ContextBuffer(context_size)
        rows = []  # per existing frame: flat token list
        for t in range(m):
            z, pyr = ae.encode(ctx_frames[t])
            rows.append(ae.codebook.quantize(z).reshape(-1).tolist())
            buf.push(ctx_frames[t], pyr)

        out_frames, trace, peak_len = [], [], 0
        for s in range(n):
            t_new = m + s
            current_t = t_new - 1
            n_ctx_rows = min(window - 1, len(rows))
            win_lay = layout.with_frames(n_ctx_rows + 1)
            first_t = t_new - n_ctx_rows
            anns = None
            if layout.frame_slots:
                anns = [list(frame_annotations[t]) for t in range(first_t, t_new + 1)]
            gap = None if end_t is None else end_t - current_t
            prefix = []
            if video_tokens is not None:
                prefix.extend(int(v) for v in video_tokens)
            for i, t in enumerate(range(first_t, t_new)):
                if anns is not None:
                    prefix.extend(anns[i])
                prefix.extend(rows[t])
            if anns is not None:
                prefix.extend(anns[-1])
            sampled = []
            seq = torch.tensor(prefix, dtype=torch.long)
            for _ in range(layout.grid[0] * layout.grid[1]):
                logits, name = model.next_logits(seq, win_lay, end_gap=gap)
                assert name == FRAME_VOCAB
                k = min(sampler.k_frame, layout.vocab_sizes[FRAME_VOCAB])
                tok = sample_top_k(logits[0], k, rng)
                sampled.append(tok)
                seq = torch.cat([seq, torch.tensor([tok])])
                peak_len = max(peak_len, seq.numel())
            assert seq.numel() == win_lay.length <= model.capacity
            grid = torch.tensor(sampled, dtype=torch.long).reshape(layout.grid)
            z_q = ae.codebook.lookup(grid)
            frame, _ = ae.decode(z_q, buf.pyramids() or None)
            _, pyr = ae.encode(frame)
            buf.push(frame, pyr)  # shift-and-add
            rows.append(sampled)
            out_frames.append(frame)
            trace.append({
                "t": t_new,
                "frame_tokens": sampled,
                "annotations": list(frame_annotations[t_new]) if layout.frame_slots else [],
                "video_tokens": [int(v) for v in video_tokens] if video_tokens else [],
                "end_gap": gap,
                "rng_state": _rng_digest(rng),
            })
    frames = torch.stack(out_frames) if out_frames else torch.zeros((0, 3) + ctx_frames.shape[-2:])
    return frames, trace, peak_len
