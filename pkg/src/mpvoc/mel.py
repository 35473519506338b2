"""Mel filterbank, mel compression and the pseudo-inverse linear-frequency prior."""
from dataclasses import dataclass
import warnings

import numpy as np

PINV_RTOL = 1e-10
LOG_FLOOR = 1e-5


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    sample_rate: int
    f_min: float
    f_max: float
    n_fft: int

    def __post_init__(self):
        w = self.weights
        if w.ndim != 2 or w.shape[1] != self.n_fft // 2 + 1:
            raise ValueError(f"filterbank shape {w.shape} inconsistent with n_fft={self.n_fft}")
        if np.any(w < 0):
            raise ValueError("filterbank weights must be nonnegative")
        if np.any(w.max(axis=1) <= 0):
            raise ValueError("filterbank has an empty row")

    @property
    def n_mels(self):
        return self.weights.shape[0]

    @property
    def n_freqs(self):
        return self.weights.shape[1]

    def center_frequencies(self):
        edges = mel_to_hz(np.linspace(hz_to_mel(self.f_min), hz_to_mel(self.f_max), self.n_mels + 2))
        return edges[1:-1]


def build_mel_filterbank(n_fft, n_mels, sample_rate, f_min=0.0, f_max=None, area_norm=False):
    """Triangular filters with centres uniformly spaced on the mel scale.

    Filter ``i`` rises linearly from edge ``i`` to edge ``i+1`` and falls to
    edge ``i+2``, where the ``n_mels + 2`` edges are equally spaced in mel.
    """
    if f_max is None:
        f_max = sample_rate / 2.0
    n_freqs = n_fft // 2 + 1
    if not 0 <= f_min < f_max <= sample_rate / 2.0:
        raise ValueError(f"need 0 <= f_min < f_max <= sr/2, got f_min={f_min}, f_max={f_max}")
    if n_mels < 2 or n_mels >= n_freqs:
        raise ValueError(f"n_mels must satisfy 2 <= n_mels < {n_freqs}, got {n_mels}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_freqs) * sample_rate / n_fft
    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"{n_mels} mel bins is too many for n_fft={n_fft}: rows {empty.tolist()} are empty"
        )
    if area_norm:
        weights = weights * (2.0 / (upper - lower))
    return MelFilterbank(weights, int(sample_rate), float(f_min), float(f_max), int(n_fft))


def identity_filterbank(n_fft, sample_rate=16000):
    """One-hot rows, one per FFT bin; mel compression becomes the identity."""
    n = n_fft // 2 + 1
    return MelFilterbank(np.eye(n), sample_rate, 0.0, sample_rate / 2.0, n_fft)


def mel_spectrogram(mag, fb):
    """Project a magnitude grid (..., F, T) onto mel bands (..., F_m, T)."""
    mag = np.asarray(mag)
    if mag.shape[-2] != fb.n_freqs:
        raise ValueError(f"magnitude has {mag.shape[-2]} rows, filterbank expects {fb.n_freqs}")
    return np.matmul(fb.weights, mag)


def pseudo_inverse(fb_or_matrix, rtol=PINV_RTOL):
    """Moore-Penrose pseudo-inverse through the SVD.

    Singular values below ``rtol * s_max`` are discarded; a rank-deficient
    input triggers a ``RuntimeWarning`` but the truncated inverse is returned.
    """
    w = fb_or_matrix.weights if isinstance(fb_or_matrix, MelFilterbank) else np.asarray(fb_or_matrix)
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    keep = s > rtol * s[0]
    if not np.all(keep):
        warnings.warn(
            f"matrix is rank deficient ({keep.sum()} of {len(s)} singular values kept)",
            RuntimeWarning,
            stacklevel=2,
        )
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (vt.T * inv_s) @ u.T


@dataclass
class PriorSpectrogram:
    values: np.ndarray  # (..., F, T)
    source_mel_bins: int


def project_prior(mel, pinv, clamp=True):
    """Linear-frequency prior ``pinv @ mel``, clamped at zero unless ``clamp`` is False."""
    mel = np.asarray(mel)
    if mel.shape[-2] != pinv.shape[1]:
        raise ValueError(f"mel has {mel.shape[-2]} rows, pseudo-inverse expects {pinv.shape[1]}")
    values = np.matmul(pinv, mel)
    if clamp:
        values = np.maximum(values, 0.0)
    return PriorSpectrogram(values, pinv.shape[1])


def log_compress(x):
    return np.log(x + LOG_FLOOR)


def save_filterbank(path, fb):
    """Write the filterbank as text: a header line then one row per mel bin."""
    header = f"{fb.n_mels} {fb.n_freqs} {fb.sample_rate} {fb.f_min!r} {fb.f_max!r} {fb.n_fft}"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in fb.weights:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_filterbank(path):
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 6:
            raise ValueError(f"{path}: malformed filterbank header")
        n_mels, n_freqs = int(head[0]), int(head[1])
        sr, f_min, f_max, n_fft = int(head[2]), float(head[3]), float(head[4]), int(head[5])
        rows = [[float(v) for v in line.split()] for line in fh if line.strip()]
    weights = np.array(rows, dtype=np.float64)
    if weights.shape != (n_mels, n_freqs):
        raise ValueError(f"{path}: header says {n_mels}x{n_freqs}, body is {weights.shape}")
    return MelFilterbank(weights, sr, f_min, f_max, n_fft)
