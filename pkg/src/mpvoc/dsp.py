"""STFT analysis/synthesis, phase wrapping and WAV I/O.

Array-level functions accept a trailing time axis and any number of leading
batch axes; spectrogram grids are laid out ``(..., F, T)``.
"""
from dataclasses import dataclass, field
from functools import lru_cache
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

from . import _kernels

DEFAULT_SAMPLE_RATE = 16000
WINDOWS = ("hann", "rect", "hamming")


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 1024
    hop: int = 256
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft % 2:
            raise ValueError(f"n_fft must be an even integer >= 2, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must satisfy 0 < hop <= n_fft, got hop={self.hop}")
        if self.window not in WINDOWS:
            raise ValueError(f"unknown window {self.window!r}; expected one of {WINDOWS}")
        env = _steady_envelope(self.n_fft, self.hop, self.window)
        if env.min() <= 1e-10 * env.max():
            raise ValueError(
                f"window {self.window!r} with n_fft={self.n_fft}, hop={self.hop} "
                "violates the nonzero overlap-add condition"
            )

    @property
    def n_freqs(self):
        return self.n_fft // 2 + 1


@lru_cache(maxsize=64)
def get_window(name, n):
    """Periodic analysis window of length ``n`` (read-only array)."""
    k = np.arange(n)
    if name == "hann":
        w = 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)
    elif name == "hamming":
        w = 0.54 - 0.46 * np.cos(2.0 * np.pi * k / n)
    elif name == "rect":
        w = np.ones(n)
    else:
        raise ValueError(f"unknown window {name!r}")
    w.setflags(write=False)
    return w


def _steady_envelope(n_fft, hop, window):
    w2 = get_window(window, n_fft) ** 2
    env = np.zeros(hop)
    for start in range(0, n_fft, hop):
        seg = w2[start:start + hop]
        env[:len(seg)] += seg
    return env


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim == 0 or self.samples.shape[-1] < 1:
            raise ValueError("waveform must contain at least one sample")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[-1]


@dataclass
class ComplexSpectrogram:
    real: np.ndarray
    imag: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError(f"real/imag shape mismatch {self.real.shape} vs {self.imag.shape}")
        if self.real.ndim < 2 or self.real.shape[-2] != self.config.n_freqs:
            raise ValueError(
                f"expected {self.config.n_freqs} frequency rows, got shape {self.real.shape}"
            )

    @property
    def shape(self):
        return self.real.shape

    def to_complex(self):
        return self.real + 1j * self.imag


@dataclass
class MagPhaseSpectrogram:
    magnitude: np.ndarray
    phase: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise ValueError("magnitude/phase shape mismatch")
        if np.any(self.magnitude < 0):
            raise ValueError("magnitude must be nonnegative")


# ---------------------------------------------------------------------------
# array-level transforms
# ---------------------------------------------------------------------------

def n_frames(length, cfg):
    if cfg.center:
        return 1 + length // cfg.hop
    if length < cfg.n_fft:
        raise ValueError(f"signal of {length} samples is shorter than one frame ({cfg.n_fft})")
    return 1 + (length - cfg.n_fft) // cfg.hop


def _pad(x, cfg):
    if not cfg.center:
        return x
    p = cfg.n_fft // 2
    if x.shape[-1] <= p:
        raise ValueError(
            f"signal of {x.shape[-1]} samples is too short for reflect padding of {p}"
        )
    widths = [(0, 0)] * (x.ndim - 1) + [(p, p)]
    return np.pad(x, widths, mode="reflect")


def _unpad_adjoint(gp, length, cfg):
    """Adjoint of reflect padding: fold the padded gradient back onto the signal."""
    if not cfg.center:
        return gp
    p = cfg.n_fft // 2
    g = gp[..., p:p + length].copy()
    g[..., 1:p + 1] += gp[..., :p][..., ::-1]
    g[..., length - 1 - p:length - 1] += gp[..., p + length:][..., ::-1]
    return g


def stft_array(x, cfg):
    """Complex STFT of ``x`` (..., L) -> (..., F, T)."""
    x = np.asarray(x)
    n_frames(x.shape[-1], cfg)
    xp = _pad(x, cfg)
    frames = sliding_window_view(xp, cfg.n_fft, axis=-1)[..., ::cfg.hop, :]
    spec = np.fft.rfft(frames * get_window(cfg.window, cfg.n_fft), axis=-1)
    return np.swapaxes(spec, -1, -2)


def stft_adjoint(g_real, g_imag, length, cfg):
    """Gradient w.r.t. the signal given gradients w.r.t. real and imag STFT parts."""
    n = cfg.n_fft
    g = np.swapaxes(g_real + 1j * g_imag, -1, -2).copy()
    g[..., 0] *= 2.0
    g[..., -1] *= 2.0
    frames_g = np.fft.irfft(g, n=n, axis=-1) * (n / 2.0)
    frames_g *= get_window(cfg.window, n)
    lead = frames_g.shape[:-2]
    t, _ = frames_g.shape[-2:]
    padded = _kernels.overlap_add(frames_g.reshape((-1, t, n)), cfg.hop)
    padded_len = length + 2 * (n // 2) if cfg.center else length
    full = np.zeros((padded.shape[0], padded_len), dtype=padded.dtype)
    m = min(padded_len, padded.shape[1])
    full[:, :m] = padded[:, :m]
    full = full.reshape(lead + (padded_len,))
    return _unpad_adjoint(full, length, cfg)


@lru_cache(maxsize=64)
def _envelope(n_frames_, cfg):
    w2 = get_window(cfg.window, cfg.n_fft) ** 2
    frames = np.broadcast_to(w2, (1, n_frames_, cfg.n_fft))
    env = _kernels.overlap_add(np.array(frames), cfg.hop)[0]
    env.setflags(write=False)
    return env


def _output_span(n_frames_, cfg, length):
    full = cfg.n_fft + (n_frames_ - 1) * cfg.hop
    start = cfg.n_fft // 2 if cfg.center else 0
    if length is None:
        length = full - 2 * start
    return full, start, length


def _checked_envelope(n_frames_, cfg, start, length):
    env = _envelope(n_frames_, cfg)
    full = env.shape[0]
    stop = min(start + length, full)
    if cfg.center:
        region = env[start:stop]
    else:
        # boundary frames are excluded from the reconstruction guarantee
        region = env[cfg.n_fft:max(cfg.n_fft, stop - cfg.n_fft)]
    if region.size and region.min() <= 1e-10 * env.max():
        raise ValueError("window overlap-add vanishes inside the signal; cannot invert")
    return env


def istft_array(spec, cfg, length=None):
    """Least-squares overlap-add inverse of ``stft_array``; (..., F, T) -> (..., L)."""
    spec = np.asarray(spec)
    if spec.shape[-2] != cfg.n_freqs:
        raise ValueError(f"expected {cfg.n_freqs} frequency rows, got {spec.shape[-2]}")
    t = spec.shape[-1]
    full, start, length = _output_span(t, cfg, length)
    env = _checked_envelope(t, cfg, start, length)
    frames = np.fft.irfft(np.swapaxes(spec, -1, -2), n=cfg.n_fft, axis=-1)
    frames = frames * get_window(cfg.window, cfg.n_fft)
    lead = frames.shape[:-2]
    y = _kernels.overlap_add(frames.reshape((-1, t, cfg.n_fft)), cfg.hop)
    safe = np.where(env > 1e-10 * env.max(), env, np.inf)
    y = y / safe
    out = np.zeros((y.shape[0], length), dtype=y.dtype)
    m = max(0, min(length, full - start))
    out[:, :m] = y[:, start:start + m]
    return out.reshape(lead + (length,))


def istft_adjoint(g, n_frames_, cfg):
    """Gradients (real, imag) w.r.t. the spectrogram given the output gradient ``g``."""
    length = g.shape[-1]
    full, start, _ = _output_span(n_frames_, cfg, length)
    env = _envelope(n_frames_, cfg)
    lead = g.shape[:-1]
    gf = np.zeros(lead + (full,), dtype=g.dtype)
    m = max(0, min(length, full - start))
    gf[..., start:start + m] = g[..., :m]
    safe = np.where(env > 1e-10 * env.max(), env, np.inf)
    gf = gf / safe
    frames = sliding_window_view(gf, cfg.n_fft, axis=-1)[..., ::cfg.hop, :]
    frames = frames * get_window(cfg.window, cfg.n_fft)
    n = cfg.n_fft
    gs = np.fft.rfft(frames, axis=-1) * (2.0 / n)
    gs[..., 0] = gs[..., 0].real * 0.5
    gs[..., -1] = gs[..., -1].real * 0.5
    gs = np.swapaxes(gs, -1, -2)
    return gs.real, gs.imag


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def stft(wave, cfg=None):
    """Analyse a waveform (``Waveform`` or array) into a ``ComplexSpectrogram``."""
    cfg = cfg or StftConfig()
    x = wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)
    spec = stft_array(x, cfg)
    return ComplexSpectrogram(spec.real.copy(), spec.imag.copy(), cfg)


def istft(spec, length=None, sample_rate=DEFAULT_SAMPLE_RATE):
    """Invert a ``ComplexSpectrogram`` (or ``MagPhaseSpectrogram``) to a ``Waveform``.

    ``length`` defaults to ``(T - 1) * hop`` for centered analysis and to the
    full overlap-add span otherwise.
    """
    if isinstance(spec, MagPhaseSpectrogram):
        spec = polar_join(spec)
    y = istft_array(spec.real + 1j * spec.imag, spec.config, length)
    return Waveform(y, sample_rate)


def wrap_phase(x):
    """Map angles to the interval (-pi, pi], keeping +pi and sending -pi to +pi."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("wrap_phase requires finite input")
    y = np.mod(x + np.pi, 2.0 * np.pi) - np.pi
    # np.mod lands on -pi for odd multiples of pi; the interval is closed above
    y = np.where(y <= -np.pi, np.pi, y)
    return y if y.ndim else float(y)


def polar_split(spec):
    """Return magnitude and phase; phase is defined as 0 where the magnitude is 0."""
    mag = np.hypot(spec.real, spec.imag)
    phase = np.where(mag > 0, np.arctan2(spec.imag, spec.real), 0.0)
    return MagPhaseSpectrogram(mag, phase, spec.config)


def polar_join(mp):
    return ComplexSpectrogram(
        mp.magnitude * np.cos(mp.phase), mp.magnitude * np.sin(mp.phase), mp.config
    )


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path):
    """Read a mono PCM16 or IEEE float32 WAV file."""
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected a mono file, found {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}; use PCM16 or float32")
    return Waveform(samples, int(sr))


def write_wav(path, wave, fmt="pcm16"):
    x = np.asarray(wave.samples)
    if x.ndim != 1:
        raise ValueError("only mono waveforms can be written")
    if fmt == "pcm16":
        data = np.round(np.clip(x, -1.0, 32767.0 / 32768.0) * 32768.0).astype(np.int16)
    elif fmt == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    wavfile.write(path, wave.sample_rate, data)


def frequency_bin(freq, n_fft, sample_rate):
    """Nearest FFT bin for ``freq`` Hz."""
    return int(math.floor(freq * n_fft / sample_rate + 0.5))
