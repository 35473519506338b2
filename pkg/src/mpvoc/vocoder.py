"""Toy time-frequency vocoders: ConvNeXt blocks wired in four topologies.

Every variant maps a (B, C_in, T) input grid to a positive magnitude grid
and a phase grid on the STFT lattice; the waveform comes from the iSTFT.
"""
from dataclasses import dataclass, field
from functools import cached_property
import numpy as np

from . import autodiff as ad
from . import dsp, mel

TOPOLOGIES = ("shared", "partially_shared", "shuffle", "separate")
HEADS = ("direct", "atan", "miri")
INPUT_KINDS = ("raw", "prior")
AMP_FLOOR = 1e-9


@dataclass(frozen=True)
class BlockConfig:
    channels: int = 48
    kernel: int = 7
    expansion: int = 3

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("depthwise kernel must be a positive odd number")
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")


@dataclass(frozen=True)
class TopologyConfig:
    kind: str = "separate"
    depth: int = 4
    shared_layers: int = 2  # R, used by partially_shared only

    def __post_init__(self):
        if self.kind not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.kind!r}; expected one of {TOPOLOGIES}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.kind == "partially_shared" and not 0 < self.shared_layers < self.depth:
            raise ValueError(
                f"partially_shared needs 0 < R < depth, got R={self.shared_layers}, depth={self.depth}"
            )

    @property
    def label(self):
        if self.kind == "partially_shared":
            return f"partially_shared(R={self.shared_layers})"
        return self.kind


@dataclass(frozen=True)
class OutputHead:
    kind: str = "direct"
    alpha_mode: str = "scalar"  # or "per_frequency"
    mb_mode: str = "none"  # "detach" stops gradients through the phase-branch magnitude; "remove" drops it

    def __post_init__(self):
        if self.kind not in HEADS:
            raise ValueError(f"unknown head {self.kind!r}; expected one of {HEADS}")
        if self.alpha_mode not in ("scalar", "per_frequency"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.mb_mode not in ("none", "detach", "remove"):
            raise ValueError(f"unknown mb_mode {self.mb_mode!r}")


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 100
    f_min: float = 0.0
    f_max: float = 0.0  # 0 means sample_rate / 2
    area_norm: bool = False
    clamp_prior: bool = True
    log_prior: bool = True


@dataclass(frozen=True)
class ModelConfig:
    input_kind: str = "raw"
    stft: dsp.StftConfig = field(default_factory=dsp.StftConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE
    block: BlockConfig = field(default_factory=BlockConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    head: OutputHead = field(default_factory=OutputHead)
    prior_skip: bool = True  # prior input: magnitude head predicts a log-gain on the prior
    seed: int = 0

    def __post_init__(self):
        if self.input_kind not in INPUT_KINDS:
            raise ValueError(f"unknown input kind {self.input_kind!r}; expected one of {INPUT_KINDS}")
        if self.topology.kind == "shuffle" and self.block.expansion < 2:
            raise ValueError("shuffle topology needs expansion >= 2 to fund its interaction layers")


def block_param_count(channels, kernel, expansion):
    hidden = expansion * channels
    return channels * (kernel + 1) + 2 * channels + 2 * channels * hidden + hidden + channels


def stream_width(channels, kernel, expansion):
    """Per-stream width after the shared trunk of a partially shared model.

    It is the widest w with 2 * block(w) < block(channels), so trading a pair
    of stream blocks for one shared block always adds parameters.
    """
    full = block_param_count(channels, kernel, expansion)
    w = channels
    while w > 1 and 2 * block_param_count(w, kernel, expansion) >= full:
        w -= 1
    return w


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class _Init:
    def __init__(self, params, seed):
        self.params = params
        self.rng = np.random.default_rng(seed)

    def normal(self, name, shape, tag, std=0.02):
        return self.params.add(name, self.rng.normal(0.0, std, size=shape), tag)

    def zeros(self, name, shape, tag):
        return self.params.add(name, np.zeros(shape), tag)

    def ones(self, name, shape, tag):
        return self.params.add(name, np.ones(shape), tag)


class Linear:
    def __init__(self, init, name, c_in, c_out, tag):
        self.w = init.normal(f"{name}.weight", (c_out, c_in), tag)
        self.b = init.zeros(f"{name}.bias", (c_out,), tag)

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)


class Conv:
    def __init__(self, init, name, c_in, c_out, kernel, tag, groups=1):
        self.groups = groups
        self.w = init.normal(f"{name}.weight", (c_out, c_in // groups, kernel), tag)
        self.b = init.zeros(f"{name}.bias", (c_out,), tag)

    def __call__(self, x):
        return ad.conv1d(x, self.w, self.b, groups=self.groups)


class LayerNorm:
    def __init__(self, init, name, channels, tag):
        self.w = init.ones(f"{name}.weight", (channels,), tag)
        self.b = init.zeros(f"{name}.bias", (channels,), tag)

    def __call__(self, x):
        return ad.layer_norm(x, self.w, self.b, axis=1)


class ConvNeXtBlock:
    """Depthwise conv -> channel LayerNorm -> expand -> GELU -> project -> residual."""

    def __init__(self, init, name, channels, kernel, expansion, tag, hidden=None):
        hidden = hidden if hidden is not None else expansion * channels
        self.dw = Conv(init, f"{name}.dwconv", channels, channels, kernel, tag, groups=channels)
        self.norm = LayerNorm(init, f"{name}.norm", channels, tag)
        self.pw1 = Linear(init, f"{name}.pw1", channels, hidden, tag)
        self.pw2 = Linear(init, f"{name}.pw2", hidden, channels, tag)

    def __call__(self, x):
        h = self.norm(self.dw(x))
        h = self.pw2(ad.gelu(self.pw1(h)))
        return ad.add(x, h)


class Stem:
    """Input embedding conv followed by LayerNorm."""

    def __init__(self, init, name, c_in, channels, kernel, tag):
        self.conv = Conv(init, f"{name}.embed", c_in, channels, kernel, tag)
        self.norm = LayerNorm(init, f"{name}.embed_norm", channels, tag)

    def __call__(self, x):
        return self.norm(self.conv(x))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class HeadOutputs:
    mag_m: ad.Tensor  # magnitude-branch magnitude, always > 0
    magnitude: ad.Tensor  # final magnitude used for synthesis
    phase: ad.Tensor  # wrapped phase in (-pi, pi]
    raw_phase: ad.Tensor = None  # DirectPhase pre-wrap output
    p_r: ad.Tensor = None  # AtanPhase pair
    p_i: ad.Tensor = None
    r: ad.Tensor = None  # MiRi pair
    i: ad.Tensor = None
    mag_p: ad.Tensor = None  # MiRi phase-branch magnitude
    alpha: ad.Tensor = None
    features: tuple = ()


def combine_miri(mag_m, r, i, alpha, floor=AMP_FLOOR, detach_mag_p=False):
    """Blend the magnitude-branch estimate with the modulus of the (R, I) pair.

    Returns (magnitude, phase, mag_p) with
    magnitude = alpha * mag_m + (1 - alpha) * sqrt(R^2 + I^2) and phase = atan2(I, R).
    The squared modulus is floored at ``floor`` so the gradient stays finite at
    the origin; away from the origin the modulus is exact.
    """
    mag_m, r, i, alpha = (ad.as_tensor(v) for v in (mag_m, r, i, alpha))
    if not (mag_m.shape == r.shape == i.shape):
        raise ValueError(f"shape mismatch: {mag_m.shape}, {r.shape}, {i.shape}")
    mag_p = ad.sqrt(ad.clamp_min(ad.square(r) + ad.square(i), floor))
    blend_p = ad.detach(mag_p) if detach_mag_p else mag_p
    magnitude = alpha * mag_m + (1.0 - alpha) * blend_p
    phase = ad.atan2(i, r)
    return magnitude, phase, mag_p


def head_to_phase(kind, outputs):
    """Phase grid implied by a head's raw outputs."""
    if kind == "direct":
        return ad.wrap(outputs["raw_phase"])
    if kind == "atan":
        return ad.atan2(outputs["p_i"], outputs["p_r"])
    if kind == "miri":
        return ad.atan2(outputs["i"], outputs["r"])
    raise ValueError(f"unknown head {kind!r}")


class Vocoder:
    def __init__(self, cfg):
        self.cfg = cfg
        self.params = ad.ParameterSet()
        init = _Init(self.params, cfg.seed)
        b = cfg.block
        topo = cfg.topology
        c = b.channels
        n_freqs = cfg.stft.n_freqs
        c_in = self.input_channels
        kind = topo.kind
        blk = lambda name, width, tag, hidden=None: ConvNeXtBlock(
            init, name, width, b.kernel, b.expansion, tag, hidden)

        self.shared_stem = None
        self.shared_blocks = []
        self.split = {}
        self.streams = {"M": [], "P": []}
        self.stems = {}
        self.mixers = {"M": [], "P": []}
        self.final_norms = {}

        if kind == "shared":
            self.shared_stem = Stem(init, "trunk", c_in, c, 7, "S")
            self.shared_blocks = [blk(f"trunk.block{j}", c, "S") for j in range(topo.depth)]
            self.final_norms["S"] = LayerNorm(init, "trunk.final_norm", c, "S")
            head_width = c
        elif kind == "partially_shared":
            r = topo.shared_layers
            cs = stream_width(c, b.kernel, b.expansion)
            self.shared_stem = Stem(init, "trunk", c_in, c, 7, "S")
            self.shared_blocks = [blk(f"trunk.block{j}", c, "S") for j in range(r)]
            for tag, prefix in (("M", "mag"), ("P", "pha")):
                self.split[tag] = Linear(init, f"{prefix}.split", c, cs, tag)
                self.streams[tag] = [blk(f"{prefix}.block{j}", cs, tag) for j in range(topo.depth - r)]
                self.final_norms[tag] = LayerNorm(init, f"{prefix}.final_norm", cs, tag)
            head_width = cs
        else:
            shuffle = kind == "shuffle"
            hidden = (b.expansion - 1) * c if shuffle else None
            for tag, prefix in (("M", "mag"), ("P", "pha")):
                self.stems[tag] = Stem(init, prefix, c_in, c, 7, tag)
                self.streams[tag] = [blk(f"{prefix}.block{j}", c, tag, hidden) for j in range(topo.depth)]
                if shuffle:
                    self.mixers[tag] = [Linear(init, f"{prefix}.mix{j}", 2 * c, c, tag)
                                        for j in range(topo.depth)]
                self.final_norms[tag] = LayerNorm(init, f"{prefix}.final_norm", c, tag)
            head_width = c

        self.mag_head = Linear(init, "mag.head", head_width, n_freqs, "M")
        head = cfg.head
        if head.kind == "direct":
            self.pha_head = Linear(init, "pha.head", head_width, n_freqs, "P")
        else:
            self.pha_head = Linear(init, "pha.head", head_width, 2 * n_freqs, "P")
        self.alpha_param = None
        if head.kind == "miri":
            shape = (1, 1) if head.alpha_mode == "scalar" else (n_freqs, 1)
            self.alpha_param = init.zeros("alpha", shape, "S")

    # -- static facts -----------------------------------------------------
    @property
    def input_channels(self):
        return self.cfg.mel.n_mels if self.cfg.input_kind == "raw" else self.cfg.stft.n_freqs

    def param_count(self, tag=None):
        return self.params.count(tag)

    @cached_property
    def filterbank(self):
        m = self.cfg.mel
        return mel.build_mel_filterbank(
            self.cfg.stft.n_fft, m.n_mels, self.cfg.sample_rate, m.f_min, m.f_max or None, m.area_norm
        )

    @cached_property
    def pinv(self):
        return mel.pseudo_inverse(self.filterbank)

    # -- input preparation --------------------------------------------------
    def features_from_mel(self, mel_grid):
        """Model input grid (numpy) from a linear-amplitude mel grid (..., F_m, T)."""
        if self.cfg.input_kind == "raw":
            return mel.log_compress(mel_grid)
        prior = mel.project_prior(mel_grid, self.pinv, clamp=self.cfg.mel.clamp_prior).values
        return mel.log_compress(prior) if self.cfg.mel.log_prior else prior

    def features_from_magnitude(self, mag):
        return self.features_from_mel(mel.mel_spectrogram(mag, self.filterbank))

    def features_from_wave(self, x):
        spec = dsp.stft_array(np.asarray(x), self.cfg.stft)
        return self.features_from_magnitude(np.abs(spec))

    # -- forward --------------------------------------------------------------
    def trunk(self, x):
        kind = self.cfg.topology.kind
        if kind == "shared":
            h = self.shared_stem(x)
            for blk in self.shared_blocks:
                h = blk(h)
            h = self.final_norms["S"](h)
            return h, h
        if kind == "partially_shared":
            h = self.shared_stem(x)
            for blk in self.shared_blocks:
                h = blk(h)
            out = []
            for tag in ("M", "P"):
                s = self.split[tag](h)
                for blk in self.streams[tag]:
                    s = blk(s)
                out.append(self.final_norms[tag](s))
            return tuple(out)
        hm, hp = self.stems["M"](x), self.stems["P"](x)
        for j in range(self.cfg.topology.depth):
            hm, hp = self.streams["M"][j](hm), self.streams["P"][j](hp)
            if kind == "shuffle":
                both = ad.concat([hm, hp], axis=1)
                hm, hp = self.mixers["M"][j](both), self.mixers["P"][j](both)
        return self.final_norms["M"](hm), self.final_norms["P"](hp)

    def forward(self, x):
        """Run the network on an input grid of shape (B, C_in, T) or (C_in, T)."""
        x = ad.as_tensor(x)
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        if x.shape[1] != self.input_channels:
            raise ValueError(
                f"{self.cfg.input_kind} input needs {self.input_channels} rows, got {x.shape[1]}"
            )
        hm, hp = self.trunk(x)
        n = self.cfg.stft.n_freqs
        log_mag = self.mag_head(hm)
        if self.cfg.prior_skip and self.cfg.input_kind == "prior":
            skip = x.data if self.cfg.mel.log_prior else mel.log_compress(x.data)
            log_mag = ad.add(log_mag, skip)
        mag_m = ad.exp(log_mag)
        raw = self.pha_head(hp)
        kind = self.cfg.head.kind
        if kind == "direct":
            out = HeadOutputs(mag_m, mag_m, head_to_phase("direct", {"raw_phase": raw}), raw_phase=raw)
        elif kind == "atan":
            p_r, p_i = raw[:, :n], raw[:, n:]
            out = HeadOutputs(mag_m, mag_m, head_to_phase("atan", {"p_r": p_r, "p_i": p_i}),
                              p_r=p_r, p_i=p_i)
        else:
            r, i = raw[:, :n], raw[:, n:]
            alpha = ad.sigmoid(self.alpha_param)
            mb = self.cfg.head.mb_mode
            magnitude, phase, mag_p = combine_miri(mag_m, r, i, alpha, detach_mag_p=(mb == "detach"))
            if mb == "remove":
                magnitude = mag_m
            out = HeadOutputs(mag_m, magnitude, phase, r=r, i=i, mag_p=mag_p, alpha=alpha)
        out.features = (hm, hp)
        return out

    __call__ = forward

    def synthesize(self, x, length=None):
        """Forward pass then iSTFT; returns a Tensor of shape (B, L)."""
        out = self.forward(x)
        return reconstruct(out.magnitude, out.phase, self.cfg.stft, length), out


def reconstruct(magnitude, phase, cfg, length=None):
    """iSTFT of the polar grid (magnitude, phase); accepts Tensors or arrays."""
    magnitude, phase = ad.as_tensor(magnitude), ad.as_tensor(phase)
    if np.any(magnitude.data < 0):
        raise ValueError("magnitude must be nonnegative")
    real = ad.mul(magnitude, ad.cos(phase))
    imag = ad.mul(magnitude, ad.sin(phase))
    return ad.istft(real, imag, cfg, length)


def build_model(cfg):
    return Vocoder(cfg)


def param_count(model):
    return model.param_count()


def alpha_value(model):
    if model.alpha_param is None:
        return None
    return 1.0 / (1.0 + np.exp(-model.alpha_param.data))


def describe(model):
    cfg = model.cfg
    return {
        "topology": cfg.topology.label,
        "input": cfg.input_kind,
        "head": cfg.head.kind,
        "params": model.param_count(),
        "params_M": model.param_count("M"),
        "params_P": model.param_count("P"),
        "params_S": model.param_count("S"),
        "stream_width": (stream_width(cfg.block.channels, cfg.block.kernel, cfg.block.expansion)
                         if cfg.topology.kind == "partially_shared" else cfg.block.channels),
        "depth": cfg.topology.depth,
    }
