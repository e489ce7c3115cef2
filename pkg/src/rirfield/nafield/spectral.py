"""Fixed STFT front end and Griffin-Lim inversion for field targets."""
from __future__ import annotations

import numpy as np
from scipy.signal import get_window

from ..rir import ImpulseResponse

LOG_EPS = 1e-8


def num_frames(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def stft(x: np.ndarray, win: int, hop: int, n_fft: int) -> np.ndarray:
    """Centered (zero-padded) Hann STFT; returns a (T, n_fft // 2 + 1) complex array."""
    w = get_window("hann", win)
    t = num_frames(x.size, hop)
    pad = win // 2
    total = (t - 1) * hop + win
    buf = np.zeros(total)
    n = min(x.size, total - pad)
    buf[pad : pad + n] = x[:n]
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    return np.fft.rfft(buf[idx] * w, n=n_fft, axis=1)


def istft(spec: np.ndarray, win: int, hop: int, n_fft: int, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`, trimmed to ``length`` samples."""
    w = get_window("hann", win)
    t = spec.shape[0]
    frames = np.fft.irfft(spec, n=n_fft, axis=1)[:, :win] * w
    total = (t - 1) * hop + win
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(t):
        out[i * hop : i * hop + win] += frames[i]
        norm[i * hop : i * hop + win] += w * w
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-10)
    pad = win // 2
    res = out[pad : pad + length]
    if res.size < length:
        res = np.pad(res, (0, length - res.size))
    return res


def log_magnitude(ir: ImpulseResponse, win: int, hop: int, n_fft: int, eps: float = LOG_EPS) -> np.ndarray:
    """Natural log of ``|STFT| + eps``, shape (T, F)."""
    return np.log(np.abs(stft(ir.samples, win, hop, n_fft)) + eps)


def griffin_lim(
    log_mag: np.ndarray,
    length: int,
    sample_rate: int,
    win: int,
    hop: int,
    n_fft: int,
    iterations: int = 32,
    eps: float = LOG_EPS,
) -> ImpulseResponse:
    """
    Phase retrieval from a log-magnitude grid, starting from zero phase.

    Magnitudes are ``max(exp(values) - eps, 0)`` so a floor-valued grid maps to
    silence.
    """
    mag = np.maximum(np.exp(np.asarray(log_mag, dtype=np.float64)) - eps, 0.0)
    spec = mag.astype(np.complex128)
    x = istft(spec, win, hop, n_fft, length)
    for _ in range(iterations):
        rebuilt = stft(x, win, hop, n_fft)
        a = np.abs(rebuilt)
        phase = np.divide(rebuilt, a, out=np.ones_like(rebuilt), where=a > 0)
        x = istft(mag * phase, win, hop, n_fft, length)
    return ImpulseResponse(x, sample_rate)
