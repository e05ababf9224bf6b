"""Declarative configuration with dotted-path keys.

Config files are plain text, one ``section.key = value`` per line (``#`` starts
a comment). No code execution. Unknown keys are rejected. The same dotted paths
are accepted as CLI overrides (``--set model.q=256``) and as environment
variables (``FLOWCAST_MODEL__Q=256``, dots spelled as double underscores).
Precedence: defaults < file < env < CLI (last writer wins).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    """Raised for unknown keys, malformed values, or invalid combinations."""


@dataclass
class DataConfig:
    root: str = "data/sprites"        # dataset root (manifest.json lives here)
    height: int = 64                  # frame height, divisible by 2^model.levels
    width: int = 64                   # frame width, divisible by 2^model.levels
    clip_length: int = 16             # frames per clip
    n_clips: int = 2000               # clips to generate
    n_sprites: int = 1                # sprites per scene (first one is annotated)
    sprite_shapes: str = "disc"       # comma list from {disc,square,triangle}
    sprite_radius: int = 7            # half-extent in pixels
    speed_min: float = 1.0            # per-frame speed range (pixels)
    speed_max: float = 3.0
    n_classes: int = 2                # motion-speed classes (video-level label)
    seed: int = 0                     # generation seed (bit-exact reruns)


@dataclass
class ModelConfig:
    levels: int = 3                   # K: resolution levels / downsampling factor 2^K
    latent_channels: int = 64         # F: bottleneck feature width
    codebook_size: int = 512          # q: token vocabulary
    base_channels: int = 32           # encoder/decoder width at the finest level
    cost_radius: int = 3              # R: cost volume neighborhood, (2R+1)^2 entries
    tf_layers: int = 4                # transformer depth
    tf_heads: int = 4
    tf_dim: int = 128                 # D: embedding width
    window: int = 4                   # N: frames per transformer window
    video_tokens: int = 0             # l_v: video-level annotation slots
    frame_tokens: int = 0             # l_f: frame-level annotation slots
    state_bins: int = 32              # per-axis bins for (x, y) state tokens
    max_end_gap: int = 32             # learned range of end-frame gap embeddings
    context_size: int = 1             # context frames fused while decoding
    control: str = "none"             # none | state | class | endframe


@dataclass
class TrainingConfig:
    lambda_q: float = 1.0             # quantization loss weight
    lambda_r: float = 10.0            # recovery loss weight
    lambda_a: float = 1.0             # adversarial loss weight
    lambda_c: float = 1.0             # contextual (flow/mask) loss weight
    beta: float = 0.25                # commitment coefficient
    lr_ae: float = 2e-3               # stage-1 lr (reference setting 0.02 assumes
                                      # large-batch training; desk batches need less)
    lr_disc: float = 2e-3             # discriminator lr (unspecified upstream)
    lr_tf: float = 1e-5               # stage-2 lr
    ema_decay: float = 0.999
    steps_ae: int = 2000
    steps_tf: int = 2000
    batch_size: int = 4
    disc_t_window: int = 4            # frames per temporal-discriminator clip
    aug_max_translate: float = 4.0    # augmentation ranges for self-supervision
    aug_max_rotate: float = 8.0       # degrees
    aug_max_scale: float = 0.1        # scale in [1-s, 1+s]
    aug_elastic_amp: float = 4.0      # pixels; keeps direct flow inversion near 80%
    aug_elastic_smooth: float = 8.0   # value-noise smoothing radius
    aug_blur_sigma: float = 1.0
    seed: int = 0
    log_every: int = 25
    checkpoint_every: int = 500


@dataclass
class SamplingConfig:
    k_frame: int = 32                 # top-k over frame tokens
    k_state: int = 4                  # top-k over annotation tokens when predicted
    seed: int = 0


@dataclass
class EvalConfig:
    n_trajectories: int = 10          # M sequences per conditioning for DIV
    horizon: int = 15                 # synthesized frames per trajectory
    n_sequences: int = 64             # held-out clips for FD-proxy
    fd_embed_dim: int = 16            # random video-embedder output width
    fd_seed: int = 0                  # embedder seed (fixed across compared runs)
    seed: int = 0


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def grid_h(self) -> int:
        return self.data.height // (2 ** self.model.levels)

    @property
    def grid_w(self) -> int:
        return self.data.width // (2 ** self.model.levels)

    @property
    def capacity(self) -> int:
        m = self.model
        return m.video_tokens + m.window * (m.frame_tokens + self.grid_h * self.grid_w)

    def validate(self) -> "Config":
        d, m = self.data, self.model
        div = 2 ** m.levels
        if d.height < 16 or d.width < 16 or d.height % div or d.width % div:
            raise ConfigError(
                f"data.height/width must be >=16 and divisible by 2^model.levels={div}, "
                f"got {d.height}x{d.width}"
            )
        if m.codebook_size < 2:
            raise ConfigError("model.codebook_size must be >= 2")
        if m.state_bins < 2:
            raise ConfigError("model.state_bins must be >= 2")
        if not (d.speed_min <= d.speed_max):
            raise ConfigError("data.speed_min must be <= data.speed_max")
        if 2 * d.sprite_radius + 2 >= min(d.height, d.width):
            raise ConfigError("data.sprite_radius too large for canvas")
        if m.tf_dim % m.tf_heads:
            raise ConfigError("model.tf_dim must be divisible by model.tf_heads")
        for lam in ("lambda_q", "lambda_r", "lambda_a", "lambda_c"):
            if getattr(self.training, lam) < 0:
                raise ConfigError(f"training.{lam} must be nonnegative")
        slots = {
            "none": None,  # manual video_tokens/frame_tokens allowed
            "state": (0, 2),
            "class": (1, 0),
            "endframe": (self.grid_h * self.grid_w, 0),
        }
        if m.control not in slots:
            raise ConfigError(
                f"model.control must be one of {sorted(slots)}, got {m.control!r}")
        required = slots[m.control]
        if required is not None:
            if (m.video_tokens, m.frame_tokens) == (0, 0):
                m.video_tokens, m.frame_tokens = required
            elif (m.video_tokens, m.frame_tokens) != required:
                raise ConfigError(
                    f"model.control={m.control} implies (video_tokens, frame_tokens)="
                    f"{required}, got ({m.video_tokens}, {m.frame_tokens})")
        return self


def _sections(cfg: Config) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def to_flat(cfg: Config) -> dict:
    """Flatten to {'section.key': value} with primitive values only."""
    out = {}
    for sname, section in _sections(cfg).items():
        for f in fields(section):
            out[f"{sname}.{f.name}"] = getattr(section, f.name)
    return out


def _coerce(raw, target_type, key: str):
    if isinstance(raw, target_type) and not (target_type is int and isinstance(raw, bool)):
        return raw
    s = str(raw).strip()
    try:
        if target_type is bool:
            if s.lower() in ("1", "true", "yes"):
                return True
            if s.lower() in ("0", "false", "no"):
                return False
            raise ValueError(s)
        if target_type is int:
            return int(s)
        if target_type is float:
            return float(s)
        return s
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r} as {target_type.__name__}") from None


def apply_overrides(cfg: Config, overrides: dict) -> Config:
    """Set dotted-path keys on a copy of cfg; unknown keys raise ConfigError."""
    cfg = dataclasses.replace(
        cfg, **{s: dataclasses.replace(sec) for s, sec in _sections(cfg).items()}
    )
    for key, raw in overrides.items():
        if key.count(".") != 1:
            raise ConfigError(f"unknown config key: {key!r}")
        sname, fname = key.split(".")
        section = getattr(cfg, sname, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown config section: {sname!r}")
        ftypes = {f.name: f.type for f in fields(section)}
        if fname not in ftypes:
            raise ConfigError(f"unknown config key: {key!r}")
        target_type = type(getattr(section, fname))
        setattr(section, fname, _coerce(raw, target_type, key))
    return cfg


def parse_config_text(text: str) -> dict:
    """Parse 'key = value' lines into an override dict (no validation here)."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def env_overrides(environ=None) -> dict:
    """Collect FLOWCAST_SECTION__KEY=value entries from the environment."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith("FLOWCAST_") or "__" not in name:
            continue
        sname, fname = name[len("FLOWCAST_"):].split("__", 1)
        out[f"{sname.lower()}.{fname.lower()}"] = value
    return out


def load_config(path=None, cli_overrides=None, environ=None) -> Config:
    """Defaults < file < env < CLI, then validate."""
    cfg = Config()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = apply_overrides(cfg, parse_config_text(fh.read()))
    cfg = apply_overrides(cfg, env_overrides(environ))
    if cli_overrides:
        cfg = apply_overrides(cfg, cli_overrides)
    return cfg.validate()


def config_from_flat(flat: dict) -> Config:
    """Rebuild a Config from a to_flat() snapshot (checkpoint/report roundtrip)."""
    return apply_overrides(Config(), dict(flat)).validate()
