"""Reference-vs-generated objective metrics and the per-utterance CSV report."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import io
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct

from . import _kernels
from . import autodiff as ad
from . import dsp, losses, mel

MCD_SCALE = 10.0 * math.sqrt(2.0) / math.log(10.0)
CSV_COLUMNS = ("mcd", "mstft", "vuv_f1", "pitch_rmse", "periodicity_rmse")


@dataclass(frozen=True)
class MetricsConfig:
    pitch_frame: int = 1024
    pitch_hop: int = 256
    f0_min: float = 50.0
    f0_max: float = 550.0
    voicing_threshold: float = 0.45
    peak_ratio: float = 0.85
    mcd_coeffs: int = 13
    mcd_n_fft: int = 1024
    mcd_hop: int = 256
    mcd_n_mels: int = 100
    resolutions: tuple = losses.DEFAULT_RESOLUTIONS


def _samples(w):
    return (w.samples if isinstance(w, dsp.Waveform) else np.asarray(w, dtype=np.float64))


def _sample_rate(w, default):
    return w.sample_rate if isinstance(w, dsp.Waveform) else default


def _aligned(ref, hyp, sample_rate):
    sr_r, sr_h = _sample_rate(ref, sample_rate), _sample_rate(hyp, sample_rate)
    if sr_r != sr_h:
        raise ValueError(f"sample-rate mismatch: {sr_r} vs {sr_h}")
    x, y = _samples(ref), _samples(hyp)
    n = min(x.shape[-1], y.shape[-1])
    if n == 0:
        raise ValueError("reference and hypothesis do not overlap")
    return x[..., :n], y[..., :n], sr_r


# ---------------------------------------------------------------------------
# mel-cepstral distortion
# ---------------------------------------------------------------------------

def mel_cepstrum(x, cfg=MetricsConfig(), sample_rate=dsp.DEFAULT_SAMPLE_RATE, fb=None):
    """Mel-cepstra (frames x coeffs) excluding c0, via an orthonormal DCT-II of log-mel."""
    sr = sample_rate
    stft_cfg = dsp.StftConfig(cfg.mcd_n_fft, cfg.mcd_hop)
    fb = fb or mel.build_mel_filterbank(cfg.mcd_n_fft, cfg.mcd_n_mels, sr)
    mag = np.abs(dsp.stft_array(x, stft_cfg))
    log_mel = np.log(np.maximum(mel.mel_spectrogram(mag, fb), 1e-10))
    cep = dct(log_mel, type=2, norm="ortho", axis=-2)
    return np.swapaxes(cep[..., 1:cfg.mcd_coeffs + 1, :], -1, -2)


def mcd_from_cepstra(c_ref, c_hyp):
    """MCD in dB between equally long (frames x coeffs) cepstral sequences."""
    c_ref, c_hyp = np.asarray(c_ref), np.asarray(c_hyp)
    if c_ref.shape != c_hyp.shape:
        raise ValueError(f"cepstra shape mismatch: {c_ref.shape} vs {c_hyp.shape}")
    dist = np.sqrt(np.sum((c_ref - c_hyp) ** 2, axis=-1))
    return float(MCD_SCALE * dist.mean())


def mcd(ref, hyp, cfg=MetricsConfig()):
    x, y, sr = _aligned(ref, hyp, dsp.DEFAULT_SAMPLE_RATE)
    fb = mel.build_mel_filterbank(cfg.mcd_n_fft, cfg.mcd_n_mels, sr)
    return mcd_from_cepstra(mel_cepstrum(x, cfg, sr, fb), mel_cepstrum(y, cfg, sr, fb))


def mstft_distance(ref, hyp, cfg=MetricsConfig()):
    """Multi-resolution STFT distance; the same computation as the training loss."""
    x, y, _ = _aligned(ref, hyp, dsp.DEFAULT_SAMPLE_RATE)
    with ad.no_grad():
        return losses.multi_res_stft_loss(y, x, cfg.resolutions).item()


# ---------------------------------------------------------------------------
# pitch
# ---------------------------------------------------------------------------

@dataclass
class PitchTrack:
    f0: np.ndarray  # Hz, nan where unvoiced
    periodicity: np.ndarray  # in [0, 1]
    voiced: np.ndarray  # bool

    def __len__(self):
        return len(self.f0)


def lag_band(sample_rate, f_min, f_max):
    return int(math.floor(sample_rate / f_max)), int(math.ceil(sample_rate / f_min))


def pick_period(r, lag_min, peak_ratio):
    """Smallest-lag local maximum within ``peak_ratio`` of the best one.

    Returns (fractional lag, peak value) or (None, best value) if the
    correlation has no interior local maximum.
    """
    inner = (r[1:-1] >= r[:-2]) & (r[1:-1] > r[2:])
    peaks = np.flatnonzero(inner) + 1
    if peaks.size == 0:
        return None, max(0.0, float(r.max()))
    best = r[peaks].max()
    if best <= 0:
        return None, 0.0
    idx = peaks[np.argmax(r[peaks] >= peak_ratio * best)]
    a, b, c = r[idx - 1], r[idx], r[idx + 1]
    curv = a - 2.0 * b + c
    delta = 0.5 * (a - c) / curv if curv < 0 else 0.0
    return lag_min + idx + delta, float(b)


def pitch_track(wave, frame=1024, hop=256, f_min=50.0, f_max=550.0, threshold=0.45,
                sample_rate=None, peak_ratio=0.85):
    """Per-frame f0 and periodicity from the normalized cross-correlation.

    A frame is voiced when its chosen correlation peak reaches ``threshold``.
    """
    x = _samples(wave)
    sr = sample_rate or _sample_rate(wave, dsp.DEFAULT_SAMPLE_RATE)
    if frame > x.shape[-1]:
        raise ValueError(f"pitch frame of {frame} samples is longer than the signal ({x.shape[-1]})")
    lag_min, lag_max = lag_band(sr, f_min, f_max)
    if lag_max >= frame // 2:
        raise ValueError(f"frame of {frame} samples too short for f_min={f_min} Hz")
    frames = sliding_window_view(x, frame)[::hop]
    r = _kernels.nccf(frames, lag_min, lag_max)
    n = len(frames)
    f0 = np.full(n, np.nan)
    per = np.zeros(n)
    for k in range(n):
        lag, value = pick_period(r[k], lag_min, peak_ratio)
        per[k] = min(max(value, 0.0), 1.0)
        if lag is not None:
            f0[k] = sr / lag
    voiced = (per >= threshold) & np.isfinite(f0)
    f0 = np.where(voiced, f0, np.nan)
    return PitchTrack(f0, per, voiced)


def _check_frames(ref, hyp):
    if len(ref) != len(hyp):
        raise ValueError(f"frame-count mismatch: {len(ref)} vs {len(hyp)}")


def pitch_rmse(ref, hyp):
    """RMSE in Hz over frames voiced in both tracks; None if there are none."""
    _check_frames(ref, hyp)
    both = ref.voiced & hyp.voiced
    if not both.any():
        return None
    return float(np.sqrt(np.mean((ref.f0[both] - hyp.f0[both]) ** 2)))


def periodicity_rmse(ref, hyp):
    _check_frames(ref, hyp)
    return float(np.sqrt(np.mean((ref.periodicity - hyp.periodicity) ** 2)))


def vuv_f1(ref, hyp):
    """F1 of the hypothesis voicing decisions against the reference ones.

    Two tracks with no voiced frames at all agree perfectly (F1 = 1).
    """
    _check_frames(ref, hyp)
    tp = int(np.sum(ref.voiced & hyp.voiced))
    fp = int(np.sum(~ref.voiced & hyp.voiced))
    fn = int(np.sum(ref.voiced & ~hyp.voiced))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def evaluate_pair(ref, hyp, cfg=MetricsConfig()):
    x, y, sr = _aligned(ref, hyp, dsp.DEFAULT_SAMPLE_RATE)
    kw = dict(frame=cfg.pitch_frame, hop=cfg.pitch_hop, f_min=cfg.f0_min, f_max=cfg.f0_max,
              threshold=cfg.voicing_threshold, sample_rate=sr, peak_ratio=cfg.peak_ratio)
    tr, th = pitch_track(x, **kw), pitch_track(y, **kw)
    return {
        "mcd": mcd(dsp.Waveform(x, sr), dsp.Waveform(y, sr), cfg),
        "mstft": mstft_distance(x, y, cfg),
        "vuv_f1": vuv_f1(tr, th),
        "pitch_rmse": pitch_rmse(tr, th),
        "periodicity_rmse": periodicity_rmse(tr, th),
    }


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # dicts with utt_id plus CSV_COLUMNS

    def mean(self):
        """Unweighted mean over utterances; absent values are skipped."""
        out = {}
        for col in CSV_COLUMNS:
            vals = [r[col] for r in self.rows if r.get(col) is not None]
            out[col] = float(np.mean(vals)) if vals else None
        return out

    def to_csv(self):
        buf = io.StringIO()
        buf.write("utt_id," + ",".join(CSV_COLUMNS) + "\n")
        for r in self.rows + [dict(self.mean(), utt_id="MEAN")]:
            buf.write(r["utt_id"] + "," + ",".join(_fmt(r.get(c)) for c in CSV_COLUMNS) + "\n")
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def evaluate_corpus(pairs, cfg=MetricsConfig(), workers=0):
    """Evaluate (utt_id, ref, hyp) triples; row order follows the input order."""
    pairs = list(pairs)

    def one(item):
        utt_id, ref, hyp = item
        return dict(evaluate_pair(ref, hyp, cfg), utt_id=utt_id)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, pairs))
    else:
        rows = [one(p) for p in pairs]
    return MetricReport(rows)
