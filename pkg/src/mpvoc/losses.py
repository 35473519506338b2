"""Spectral training objectives (no adversarial terms).

Two presets approximate the baselines' recipes: ``vl_approx`` works on the
reconstructed waveform only, ``al_approx`` adds direct magnitude, phase and
consistency terms on the predicted grids.
"""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dsp

LOG_EPS = 1e-5
MAG_FLOOR = 1e-7
DEFAULT_RESOLUTIONS = ((512, 128), (1024, 256), (2048, 512))
TERMS = ("log_magnitude", "phase_aw", "stft_consistency", "mel_l1", "mrstft")
PRESETS = {
    "vl_approx": {"mel_l1": 45.0, "mrstft": 1.0},
    "al_approx": {"log_magnitude": 1.0, "phase_aw": 1.0, "stft_consistency": 1.0, "mel_l1": 1.0},
}


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def log_magnitude_loss(mag_hat, mag):
    mag_hat, mag = ad.as_tensor(mag_hat), ad.as_tensor(mag)
    _check_same(mag_hat, mag)
    diff = ad.log(mag_hat + LOG_EPS) - ad.log(mag + LOG_EPS)
    return ad.reduce_mean(ad.square(diff))


def anti_wrapping(x):
    """|x - 2*pi*round(x / 2*pi)|: distance from x to the nearest multiple of 2*pi."""
    return ad.abs_(ad.periodic_residual(x))


def anti_wrapping_phase_loss(phase_hat, phase):
    """Mean of the anti-wrapped instantaneous-phase, frequency-difference and
    time-difference errors on (..., F, T) grids."""
    phase_hat, phase = ad.as_tensor(phase_hat), ad.as_tensor(phase)
    _check_same(phase_hat, phase)
    err = phase_hat - phase
    ip = ad.reduce_mean(anti_wrapping(err))
    gd = ad.reduce_mean(anti_wrapping(err[..., 1:, :] - err[..., :-1, :]))
    iaf = ad.reduce_mean(anti_wrapping(err[..., :, 1:] - err[..., :, :-1]))
    return (ip + gd + iaf) * (1.0 / 3.0)


def stft_consistency_loss(mag, phase, cfg):
    """Mean squared distance between a polar grid and its re-analysed iSTFT."""
    mag, phase = ad.as_tensor(mag), ad.as_tensor(phase)
    _check_same(mag, phase)
    real = mag * ad.cos(phase)
    imag = mag * ad.sin(phase)
    t = mag.shape[-1]
    length = (t - 1) * cfg.hop if cfg.center else None
    wave = ad.istft(real, imag, cfg, length)
    spec = ad.stft(wave, cfg)
    dr = spec[..., 0, :, :] - real
    di = spec[..., 1, :, :] - imag
    return ad.reduce_mean(ad.square(dr) + ad.square(di))


def spectral_magnitude(wave, cfg):
    """|STFT| with the power floored at MAG_FLOOR**2 (keeps log and sqrt finite)."""
    spec = ad.stft(wave, cfg)
    power = ad.square(spec[..., 0, :, :]) + ad.square(spec[..., 1, :, :])
    return ad.sqrt(ad.clamp_min(power, MAG_FLOOR ** 2))


def mel_l1_loss(wave_hat, wave, fb, cfg=None):
    """Mean absolute log-mel difference between two waveforms."""
    wave_hat, wave = ad.as_tensor(wave_hat), ad.as_tensor(wave)
    if wave_hat.shape != wave.shape:
        raise ValueError(f"length mismatch: {wave_hat.shape} vs {wave.shape}")
    cfg = cfg or dsp.StftConfig(fb.n_fft, fb.n_fft // 4)
    weights = ad.Tensor(fb.weights)
    mel_hat = ad.log(ad.matmul(weights, spectral_magnitude(wave_hat, cfg)) + LOG_EPS)
    mel_ref = ad.log(ad.matmul(weights, spectral_magnitude(wave, cfg)) + LOG_EPS)
    return ad.reduce_mean(ad.abs_(mel_hat - mel_ref))


def _resolution_cfg(res):
    n_fft, hop = res
    return dsp.StftConfig(int(n_fft), int(hop))


def multi_res_stft_loss(wave_hat, wave, resolutions=DEFAULT_RESOLUTIONS):
    """Mean over resolutions of spectral convergence plus log-magnitude L1.

    Spectral convergence divides by the reference norm, so the value is not
    symmetric in its arguments.
    """
    wave_hat, wave = ad.as_tensor(wave_hat), ad.as_tensor(wave)
    if wave_hat.shape != wave.shape:
        raise ValueError(f"length mismatch: {wave_hat.shape} vs {wave.shape}")
    if len(resolutions) < 1:
        raise ValueError("need at least one resolution")
    total = None
    for res in resolutions:
        cfg = _resolution_cfg(res)
        mag_hat = spectral_magnitude(wave_hat, cfg)
        mag = spectral_magnitude(wave, cfg)
        sc = ad.sqrt(ad.reduce_sum(ad.square(mag - mag_hat))) / ad.sqrt(ad.reduce_sum(ad.square(mag)))
        lm = ad.reduce_mean(ad.abs_(ad.log(mag_hat) - ad.log(mag)))
        term = sc + lm
        total = term if total is None else total + term
    return total * (1.0 / len(resolutions))


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    total: float = 0.0

    def as_row(self):
        row = {t: self.terms.get(t, float("nan")) for t in TERMS}
        row["total"] = self.total
        return row


def resolve_weights(preset, overrides=None):
    if preset not in PRESETS:
        raise ValueError(f"unknown loss preset {preset!r}; expected one of {sorted(PRESETS)}")
    weights = dict(PRESETS[preset])
    for k, v in (overrides or {}).items():
        if k not in TERMS:
            raise ValueError(f"unknown loss term {k!r}")
        if v is None:
            continue
        if v == 0:
            weights.pop(k, None)
        else:
            weights[k] = float(v)
    return weights


def compute_loss(weights, outputs, wave_hat, wave, target_mag, target_phase, stft_cfg, fb,
                 resolutions=DEFAULT_RESOLUTIONS):
    """Weighted total (Tensor) and a LossReport of every active term."""
    terms = {}
    if "log_magnitude" in weights:
        terms["log_magnitude"] = log_magnitude_loss(outputs.magnitude, target_mag)
    if "phase_aw" in weights:
        terms["phase_aw"] = anti_wrapping_phase_loss(outputs.phase, target_phase)
    if "stft_consistency" in weights:
        terms["stft_consistency"] = stft_consistency_loss(outputs.magnitude, outputs.phase, stft_cfg)
    if "mel_l1" in weights:
        terms["mel_l1"] = mel_l1_loss(wave_hat, wave, fb, stft_cfg)
    if "mrstft" in weights:
        terms["mrstft"] = multi_res_stft_loss(wave_hat, wave, resolutions)
    total = None
    for name in TERMS:
        if name in terms:
            part = terms[name] * weights[name]
            total = part if total is None else total + part
    report = LossReport({k: v.item() for k, v in terms.items()}, dict(weights), total.item())
    return total, report
