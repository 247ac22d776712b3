"""SGEN generator, combiner variants, and the convolutional discriminator.

The generator is a multi-level encoder-decoder.  An encoder trunk halves the
spatial scale once per level; per-level base-encoders pool every trunk feature
down to one shared deepest scale, where they are combined bottom-up by
sequential gating units (SGUs).  Per-level base-decoders then upsample the
combined features back toward the input scale and are combined top-down, again
through SGUs, before a final tanh projection.  Each SGU computes both of its
sigmoid gates from the active input alone:

    f = sigmoid(conv_a(x_a)) * x_a + sigmoid(conv_p(x_a)) * x_p

Ablation combiners (elementwise max, average, channel concatenation) can be
swapped in for the SGU at every junction.  The discriminator is four strided
convolutions, global average pooling, and a 1x1 projection to a probability.

No parameters are shared between any two layers or junctions.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (Tensor, add, affine, concat_channels, conv2d, deconv2d,
                       global_avg_pool, lrelu, maximum, mul, relu, sigmoid, tanh)
from .errors import CheckpointError, ConfigError, NumericsError

COMBINERS = ("sgu", "max", "avg", "concat")

CHECKPOINT_MAGIC = b"SGEN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SgenConfig:
    """Architecture hyperparameters shared by generator and discriminator."""

    levels: int = 3
    base_channels: int = 8
    combiner: str = "sgu"
    lrelu_alpha: float = 0.2
    image_channels: int = 1
    disc_channels: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.combiner not in COMBINERS:
            raise ConfigError(f"combiner must be one of {COMBINERS}, got {self.combiner!r}")
        if self.image_channels not in (1, 3):
            raise ConfigError(f"image_channels must be 1 or 3, got {self.image_channels}")
        if self.disc_channels < 1:
            raise ConfigError(f"disc_channels must be >= 1, got {self.disc_channels}")
        if self.lrelu_alpha < 0.0 or self.lrelu_alpha >= 1.0:
            raise ConfigError(f"lrelu_alpha must be in [0, 1), got {self.lrelu_alpha}")

    @property
    def divisor(self) -> int:
        """Input spatial dims must be divisible by this (2^(levels+1))."""
        return 2 ** (self.levels + 1)

    def trunk_channels(self, k: int) -> int:
        """Encoder trunk width at level k (doubles per level, capped at 8x)."""
        return min(self.base_channels * 2 ** (k - 1), 8 * self.base_channels)

    @property
    def bottleneck_channels(self) -> int:
        """Width of every base-encoder output at the shared deepest scale."""
        return self.trunk_channels(self.levels)

    def decoder_channels(self, k: int) -> int:
        """Base-decoder output width at level k; level N+1 is the final merge."""
        if k == self.levels + 1:
            return self.base_channels
        return self.trunk_channels(self.levels + 1 - k)


@dataclass
class LevelActivations:
    """Intermediate feature maps from one generator forward pass.

    Lists are level-indexed (element 0 is level 1).  Gate dicts map junction
    names like "enc.sgu2" to (active-gate, passive-gate) sigmoid maps; they
    stay empty for non-SGU combiners.
    """

    trunk: list = field(default_factory=list)
    enc_base: list = field(default_factory=list)
    enc_combined: list = field(default_factory=list)
    dec_base: list = field(default_factory=list)
    dec_combined: list = field(default_factory=list)
    enc_gates: dict = field(default_factory=dict)
    dec_gates: dict = field(default_factory=dict)


def _check_finite(t: Tensor, path: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericsError(f"non-finite activation after layer {path!r}")
    return t


# ---------------------------------------------------------------------------
# combiners


def _sgu(x_a, x_p, gates, force=None):
    """SGU core; returns (output, active gate map, passive gate map)."""
    if x_a.shape != x_p.shape:
        raise ConfigError(f"sgu inputs must share a shape, got {x_a.shape} and {x_p.shape}")
    if force is None:
        ga = sigmoid(conv2d(x_a, gates["ga.w"], gates["ga.b"], stride=1, padding=1))
        gp = sigmoid(conv2d(x_a, gates["gp.w"], gates["gp.b"], stride=1, padding=1))
    else:
        # replace the sigmoid outputs with constants (degeneracy probes)
        ca, cp = force
        ga = Tensor(np.full(x_a.shape, float(ca)))
        gp = Tensor(np.full(x_a.shape, float(cp)))
    return add(mul(ga, x_a), mul(gp, x_p)), ga, gp


def sgu(x_a, x_p, gates, force=None) -> Tensor:
    """Sequential gating unit: both gates are computed from the active input.

    `gates` maps "ga.w"/"ga.b"/"gp.w"/"gp.b" to the two gate convolutions'
    parameters (stride 1, same padding, channel-preserving).  `force`, when
    given, is a (ga, gp) constant pair substituted for the sigmoid outputs.
    """
    return _sgu(x_a, x_p, gates, force)[0]


def _combine(kind, a, b, gates=None, force=None):
    """Dispatch to one combiner; returns (output, ga map or None, gp map or None)."""
    if a.shape != b.shape:
        raise ConfigError(f"combiner inputs must share a shape, got {a.shape} and {b.shape}")
    if kind == "sgu":
        out, ga, gp = _sgu(a, b, gates, force)
        return out, ga.data, gp.data
    if kind == "max":
        return maximum(a, b), None, None
    if kind == "avg":
        return affine(add(a, b), 0.5, 0.0), None, None
    if kind == "concat":
        # 1x1 conv halves the channel count so downstream shapes match
        out = conv2d(concat_channels(a, b), gates["cat.w"], gates["cat.b"])
        return out, None, None
    raise ConfigError(f"unknown combiner kind {kind!r}")


def combine(kind, a, b, gates=None, force=None) -> Tensor:
    """Combine active input `a` with passive input `b` per the named variant."""
    return _combine(kind, a, b, gates, force)[0]


# ---------------------------------------------------------------------------
# parameter initialization


def _conv_param(rng, oc, ic, k, gain):
    fan_in = ic * k * k
    fan_out = oc * k * k
    if gain == "he":
        bound = math.sqrt(6.0 / fan_in)
    else:  # xavier, for layers feeding sigmoid/tanh
        bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(oc, ic, k, k))


def _deconv_param(rng, ic, oc, factor):
    k = 2 * factor
    # each output pixel sees ic * k^2 / factor^2 contributing inputs
    fan_in = ic * k * k / (factor * factor)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(ic, oc, k, k))


def init_params(config: SgenConfig, seed: int | None = None) -> dict:
    """Build all generator ("gen.*") and discriminator ("disc.*") parameters.

    Deterministic given the seed (defaults to config.seed).  Weight draws are
    uniform He for layers feeding relu/lrelu and uniform Xavier for layers
    feeding sigmoid or tanh; all biases start at zero.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n, c, ic = config.levels, config.base_channels, config.image_channels
    bneck = config.bottleneck_channels
    params: dict[str, Tensor] = {}

    def put_conv(path, oc_, ic_, k, gain="he"):
        params[path + ".w"] = Tensor(_conv_param(rng, oc_, ic_, k, gain), requires_grad=True)
        params[path + ".b"] = Tensor(np.zeros((1, oc_, 1, 1)), requires_grad=True)

    def put_deconv(path, ic_, oc_, factor):
        params[path + ".w"] = Tensor(_deconv_param(rng, ic_, oc_, factor), requires_grad=True)
        params[path + ".b"] = Tensor(np.zeros((1, oc_, 1, 1)), requires_grad=True)

    put_conv("gen.enc.stem1", c, ic, 3)
    put_conv("gen.enc.stem2", c, c, 3)
    for k in range(2, n + 1):
        put_conv(f"gen.enc.trunk{k}", config.trunk_channels(k), config.trunk_channels(k - 1), 3)
    for k in range(1, n + 1):
        j = n - k + 1  # pooling factor 2^j, kernel 2j+1
        put_conv(f"gen.enc.base{k}", bneck, config.trunk_channels(k), 2 * j + 1)
    for k in range(2, n + 1):
        if config.combiner == "sgu":
            put_conv(f"gen.enc.sgu{k}.ga", bneck, bneck, 3, gain="xavier")
            put_conv(f"gen.enc.sgu{k}.gp", bneck, bneck, 3, gain="xavier")
        elif config.combiner == "concat":
            put_conv(f"gen.enc.cat{k}", bneck, 2 * bneck, 1)
    for k in range(1, n + 1):
        put_deconv(f"gen.dec.base{k}", bneck, config.decoder_channels(k), 2 ** k)
    for k in range(2, n + 1):
        m = config.decoder_channels(k)
        if config.combiner == "sgu":
            put_conv(f"gen.dec.sgu{k}.ga", m, m, 3, gain="xavier")
            put_conv(f"gen.dec.sgu{k}.gp", m, m, 3, gain="xavier")
        elif config.combiner == "concat":
            put_conv(f"gen.dec.cat{k}", m, 2 * m, 1)
    for k in range(1, n + 1):
        put_deconv(f"gen.dec.merge{k}", config.decoder_channels(k), config.decoder_channels(k + 1), 2)
    put_conv("gen.out.conv", ic, c, 3, gain="xavier")

    w = config.disc_channels
    widths = [ic, w, 2 * w, 4 * w, 8 * w]
    for i in range(1, 5):
        put_conv(f"disc.conv{i}", widths[i], widths[i - 1], 4)
    put_conv("disc.fc", 1, 8 * w, 1, gain="xavier")
    return params


def split_params(params: dict) -> tuple[dict, dict]:
    """Split a full parameter dict into (generator, discriminator) views."""
    gen = {k: v for k, v in params.items() if k.startswith("gen.")}
    disc = {k: v for k, v in params.items() if k.startswith("disc.")}
    return gen, disc


# ---------------------------------------------------------------------------
# forward passes


def _junction_gates(params, stage, k, combiner):
    if combiner == "sgu":
        pre = f"gen.{stage}.sgu{k}."
        return {s: params[pre + s] for s in ("ga.w", "ga.b", "gp.w", "gp.b")}
    if combiner == "concat":
        pre = f"gen.{stage}.cat{k}."
        return {"cat.w": params[pre + "w"], "cat.b": params[pre + "b"]}
    return None


def generator_forward(s: Tensor, params: dict, config: SgenConfig,
                      gate_override: dict | None = None):
    """Run the generator; returns (output tensor, LevelActivations).

    `s` must have spatial dims divisible by 2^(levels+1); callers pad and
    crop otherwise.  `gate_override` maps "enc"/"dec" to constant (ga, gp)
    pairs substituted for every sigmoid gate output in that stage; it
    requires the sgu combiner.
    """
    n_, c_in, h, w = s.shape
    if c_in != config.image_channels:
        raise ConfigError(
            f"generator expects {config.image_channels} input channels, got {c_in}")
    d = config.divisor
    if h % d or w % d:
        raise ConfigError(
            f"input spatial dims {h}x{w} must be divisible by {d}; "
            f"pad the input to the next multiple and crop the output back")
    if gate_override is not None and config.combiner != "sgu":
        raise ConfigError("gate_override requires the sgu combiner")

    n = config.levels
    al = config.lrelu_alpha
    acts = LevelActivations()

    def p(name):
        return params["gen." + name]

    def conv_block(t, name, stride, pad):
        out = lrelu(conv2d(t, p(name + ".w"), p(name + ".b"), stride, pad), al)
        return _check_finite(out, "gen." + name)

    def force_for(stage):
        if gate_override is None:
            return None
        return gate_override.get(stage)

    # encoder trunk: one stride-2 step per level
    t = conv_block(s, "enc.stem1", 1, 1)
    t = conv_block(t, "enc.stem2", 2, 1)
    acts.trunk.append(t)
    for k in range(2, n + 1):
        acts.trunk.append(conv_block(acts.trunk[-1], f"enc.trunk{k}", 2, 1))

    # base-encoders: pool every level to the shared deepest scale
    for k in range(1, n + 1):
        j = n - k + 1
        acts.enc_base.append(conv_block(acts.trunk[k - 1], f"enc.base{k}", 2 ** j, j))

    # bottom-up combination; higher level is the active input
    acts.enc_combined.append(acts.enc_base[0])
    for k in range(2, n + 1):
        out, ga, gp = _combine(config.combiner, acts.enc_base[k - 1], acts.enc_combined[-1],
                               _junction_gates(params, "enc", k, config.combiner),
                               force_for("enc"))
        _check_finite(out, f"gen.enc.junction{k}")
        if ga is not None:
            acts.enc_gates[f"enc.sgu{k}"] = (ga, gp)
        acts.enc_combined.append(out)

    # base-decoders: level k restores from the (N-k+1)-th combined feature
    for k in range(1, n + 1):
        src = acts.enc_combined[n - k]
        out = relu(deconv2d(src, p(f"dec.base{k}.w"), p(f"dec.base{k}.b"), factor=2 ** k))
        acts.dec_base.append(_check_finite(out, f"gen.dec.base{k}"))

    # top-down combination; lower level is the active input
    y = relu(deconv2d(acts.dec_base[0], p("dec.merge1.w"), p("dec.merge1.b"), factor=2))
    acts.dec_combined.append(_check_finite(y, "gen.dec.merge1"))
    for k in range(2, n + 1):
        out, ga, gp = _combine(config.combiner, acts.dec_base[k - 1], acts.dec_combined[-1],
                               _junction_gates(params, "dec", k, config.combiner),
                               force_for("dec"))
        _check_finite(out, f"gen.dec.junction{k}")
        if ga is not None:
            acts.dec_gates[f"dec.sgu{k}"] = (ga, gp)
        y = relu(deconv2d(out, p(f"dec.merge{k}.w"), p(f"dec.merge{k}.b"), factor=2))
        acts.dec_combined.append(_check_finite(y, f"gen.dec.merge{k}"))

    out = tanh(conv2d(acts.dec_combined[-1], p("out.conv.w"), p("out.conv.b"), 1, 1))
    return _check_finite(out, "gen.out.conv"), acts


DISC_MIN_HW = 16  # four stride-2 convolutions


def discriminator_forward(img: Tensor, params: dict, config: SgenConfig) -> Tensor:
    """Score a batch of images; returns per-image probabilities, shape (n,1,1,1)."""
    _, _, h, w = img.shape
    if h < DISC_MIN_HW or w < DISC_MIN_HW:
        raise ConfigError(
            f"discriminator input {h}x{w} is smaller than its total stride {DISC_MIN_HW}")
    t = img
    for i in range(1, 5):
        t = lrelu(conv2d(t, params[f"disc.conv{i}.w"], params[f"disc.conv{i}.b"], 2, 1),
                  config.lrelu_alpha)
        _check_finite(t, f"disc.conv{i}")
    pooled = global_avg_pool(t)
    prob = sigmoid(conv2d(pooled, params["disc.fc.w"], params["disc.fc.b"]))
    return _check_finite(prob, "disc.fc")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: dict, config: SgenConfig, path) -> None:
    """Serialize parameters and config; see load_checkpoint for the layout."""
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = params[name].data
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


class _Reader:
    """Cursor over checkpoint bytes; short reads raise with the byte offset."""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.raw):
            raise CheckpointError(
                f"truncated checkpoint: needed {count} bytes for {what} "
                f"at offset {self.pos}, file has {len(self.raw)}")
        out = self.raw[self.pos:self.pos + count]
        self.pos += count
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> tuple[dict, SgenConfig]:
    """Read a checkpoint written by save_checkpoint; returns (params, config).

    Layout: 4-byte magic "SGEN", u32 version, u32 JSON length + config JSON,
    u32 tensor count, then per tensor a u16-length utf-8 path, u8 ndim,
    ndim u32 dims, and raw little-endian float64 values.
    """
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r} (expected {CHECKPOINT_MAGIC!r})")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    blob = r.take(r.u32("config length"), "config JSON")
    try:
        config = SgenConfig(**json.loads(blob))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc
    params: dict[str, Tensor] = {}
    count = r.u32("tensor count")
    for i in range(count):
        name_len = struct.unpack("<H", r.take(2, f"tensor {i} name length"))[0]
        name = r.take(name_len, f"tensor {i} name").decode()
        ndim = r.take(1, f"{name} ndim")[0]
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} dims"))
        size = int(np.prod(dims)) if ndim else 1
        values = np.frombuffer(r.take(8 * size, f"{name} values"), dtype="<f8")
        params[name] = Tensor(values.reshape(dims).astype(np.float64), requires_grad=True)
    if r.pos != len(raw):
        raise CheckpointError(f"trailing bytes after tensor table (offset {r.pos})")
    return params, config


# ---------------------------------------------------------------------------
# gate inspection


def dump_gates(params: dict, config: SgenConfig, s: Tensor, out_dir) -> dict:
    """Write every junction's gate maps as 8-bit PGM files.

    One file per (junction, gate, channel) from the first batch item, named
    like "enc_sgu2_ga_ch03.pgm", with gate value 0 mapped to byte 0 and 1 to
    byte 255.  Returns {junction: mean(ga + gp)} so callers can report how
    complementary the two gates are.
    """
    from .data import save_image

    if config.combiner != "sgu":
        raise ConfigError("gate maps exist only for the sgu combiner")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, acts = generator_forward(s, params, config)
    stats = {}
    for junction, (ga, gp) in {**acts.enc_gates, **acts.dec_gates}.items():
        stem = junction.replace(".", "_")
        for label, gmap in (("ga", ga), ("gp", gp)):
            for ch in range(gmap.shape[1]):
                # save_image maps [-1,1] to bytes, so 2g-1 lands gates on [0,255]
                save_image(gmap[0, ch] * 2.0 - 1.0,
                           out_dir / f"{stem}_{label}_ch{ch:02d}.pgm")
        stats[junction] = float((ga + gp).mean())
    return stats
