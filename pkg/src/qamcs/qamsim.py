"""Synthetic quantitative-acoustic-microscopy data.

A raster-scanned sample produces, at each position, an RF trace with two
reflections: one from the coupling-medium/sample interface and one from the
sample/glass interface,

    S(t) = a1 * S0(t - t1) + a2 * S0*(t - t2),

where S0 is the single-reflection reference pulse recorded over bare glass
and (*) marks an extra frequency-dependent attenuation.  The inter-echo
delay gives the speed of sound through a section of known thickness:
c = 2 d / (t2 - t1).

The reference pulse is a Gaussian-modulated sinusoid (bandwidth set at the
-6 dB points).  Delays are applied with sub-sample accuracy through a
frequency-domain phase ramp, and the parameter estimator is a matched
filter: normalized cross-correlation with S0, envelope peak picking with a
minimum separation of one pulse width, and parabolic sub-sample
interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks, hilbert

from .core import ParametricMap

SOS_BOUNDS = (1400.0, 1700.0)


@dataclass
class ReferencePulse:
    """Gaussian-modulated sinusoid, unit peak, centered in its window."""

    f0: float
    fractional_bandwidth: float
    fs: float
    duration: float
    samples: np.ndarray

    @property
    def sigma_t(self) -> float:
        """Envelope std dev set by the -6 dB fractional bandwidth."""
        return np.sqrt(2.0 * np.log(2.0)) / (np.pi * self.fractional_bandwidth * self.f0)

    @property
    def center_time(self) -> float:
        return (len(self.samples) // 2) / self.fs

    @property
    def width_6db(self) -> float:
        """Full -6 dB width of the time-domain envelope."""
        return 2.0 * self.sigma_t * np.sqrt(2.0 * np.log(2.0))

    @property
    def energy(self) -> float:
        return float(np.sum(self.samples**2) / self.fs)


@dataclass
class EchoParams:
    """Two-reflection amplitudes/delays; ``attenuation`` is the coefficient
    of the exp(-attenuation * |f|) magnitude factor applied to the second
    reflection.  ``resolved`` is set False by the estimator when the two
    echoes could not be separated."""

    a1: float
    a2: float
    t1: float
    t2: float
    attenuation: float = 0.0
    resolved: bool = True

    def __post_init__(self):
        if self.a2 != 0.0 and not (self.t2 > self.t1 >= 0.0):
            raise ValueError("need t2 > t1 >= 0 when a2 != 0")
        if self.attenuation < 0:
            raise ValueError("attenuation must be >= 0")


@dataclass
class EchoRecord:
    samples: np.ndarray
    fs: float
    params: EchoParams | None = None


@dataclass
class Phantom:
    """Ground-truth speed-of-sound map with section thickness and coupling speed."""

    sos_map: ParametricMap
    thickness: float = 6e-6
    c0: float = 1480.0

    def __post_init__(self):
        lo, hi = SOS_BOUNDS
        if self.sos_map.data.min() < lo or self.sos_map.data.max() > hi:
            raise ValueError(f"SoS values outside soft-tissue range [{lo}, {hi}]")
        if self.thickness <= 0:
            raise ValueError("thickness must be > 0")


@dataclass
class AcquisitionResult:
    sos_map: ParametricMap
    unresolved: np.ndarray

    @property
    def n_unresolved(self) -> int:
        return int(self.unresolved.sum())


def synth_reference(
    f0: float, fractional_bandwidth: float, fs: float, duration: float
) -> ReferencePulse:
    """Reference pulse s(t) = exp(-(t-tc)^2 / 2 sigma^2) cos(2 pi f0 (t-tc)).

    The center tc falls on a sample so the peak value is exactly 1.  Raises
    when fs does not clear the band edge 2 f0 (1 + bandwidth).
    """
    if f0 <= 0 or fs <= 0 or duration <= 0 or fractional_bandwidth <= 0:
        raise ValueError("pulse parameters must be positive")
    if fs <= 2.0 * f0 * (1.0 + fractional_bandwidth):
        raise ValueError(
            f"sampling rate {fs:g} violates the Nyquist margin "
            f"2*f0*(1+bw) = {2.0 * f0 * (1.0 + fractional_bandwidth):g}"
        )
    n = int(round(duration * fs))
    if n < 8:
        raise ValueError("window too short")
    sigma = np.sqrt(2.0 * np.log(2.0)) / (np.pi * fractional_bandwidth * f0)
    t = np.arange(n) / fs - (n // 2) / fs
    samples = np.exp(-(t**2) / (2.0 * sigma**2)) * np.cos(2.0 * np.pi * f0 * t)
    return ReferencePulse(
        f0=f0,
        fractional_bandwidth=fractional_bandwidth,
        fs=fs,
        duration=duration,
        samples=samples,
    )


def _delay_margin(pulse: ReferencePulse) -> float:
    return 4.0 * pulse.sigma_t


def synth_echo(pulse: ReferencePulse, params: EchoParams) -> EchoRecord:
    """Two delayed copies of the reference, built by frequency-domain phase ramps.

    The second reflection additionally loses exp(-attenuation * |f|) in
    magnitude when the coefficient is positive.  Delays must keep the pulse
    support (+-4 sigma around the shifted center) inside the window.
    """
    n = len(pulse.samples)
    spec0 = np.fft.rfft(pulse.samples)
    freqs = np.fft.rfftfreq(n, 1.0 / pulse.fs)
    margin = _delay_margin(pulse)
    out = np.zeros(n)
    for amp, tau, attenuated in ((params.a1, params.t1, False), (params.a2, params.t2, True)):
        if amp == 0.0:
            continue
        center = pulse.center_time + tau
        if center - margin < 0.0 or center + margin > pulse.duration:
            raise ValueError(f"delay {tau:g} s puts the echo outside the window")
        spec = spec0 * np.exp(-2j * np.pi * freqs * tau)
        if attenuated and params.attenuation > 0.0:
            spec = spec * np.exp(-params.attenuation * np.abs(freqs))
        out += amp * np.fft.irfft(spec, n)
    return EchoRecord(samples=out, fs=pulse.fs, params=params)


def delay_reference(pulse: ReferencePulse, tau: float) -> np.ndarray:
    """Single phase-ramp delayed copy of the reference (unit amplitude)."""
    return synth_echo(pulse, EchoParams(a1=1.0, a2=0.0, t1=tau, t2=tau)).samples


def _parabolic_peak(env: np.ndarray, i: int):
    """Sub-sample vertex of the parabola through (i-1, i, i+1)."""
    if i <= 0 or i >= len(env) - 1:
        return float(i), float(env[i])
    denom = env[i - 1] - 2.0 * env[i] + env[i + 1]
    if denom == 0.0:
        return float(i), float(env[i])
    delta = 0.5 * (env[i - 1] - env[i + 1]) / denom
    height = env[i] - 0.25 * (env[i - 1] - env[i + 1]) * delta
    return i + delta, float(height)


def estimate_echo_params(
    record: EchoRecord, pulse: ReferencePulse, rel_threshold: float = 0.1
) -> EchoParams:
    """Matched-filter estimate of (a1, t1, a2, t2) from one RF trace.

    Cross-correlates with the reference (normalized so a lone echo of
    amplitude a peaks at a), takes the envelope, and picks the two largest
    peaks at least one pulse -6 dB width apart.  With fewer than two peaks
    above ``rel_threshold * max`` the result carries a2 = 0 and
    ``resolved=False``.
    """
    if record.fs != pulse.fs:
        raise ValueError("record and pulse sampling rates differ")
    s0 = pulse.samples
    n = len(s0)
    if len(record.samples) != n:
        raise ValueError("record and reference window lengths differ")
    norm = float(np.sum(s0**2))
    nfft = 1 << int(np.ceil(np.log2(2 * n - 1)))
    fx = np.fft.rfft(record.samples, nfft)
    f0 = np.fft.rfft(s0, nfft)
    corr = np.fft.irfft(fx * np.conj(f0), nfft)
    # reorder to lags -(n-1) .. n-1
    corr = np.concatenate([corr[-(n - 1) :], corr[:n]]) / norm
    env = np.abs(hilbert(corr))

    sep = max(1, int(round(pulse.width_6db * pulse.fs)))
    height = rel_threshold * float(env.max()) if env.max() > 0 else np.inf
    peaks, props = find_peaks(env, height=height, distance=sep)
    if len(peaks) == 0:
        return EchoParams(a1=0.0, a2=0.0, t1=0.0, t2=0.0, resolved=False)

    order = np.argsort(props["peak_heights"])[::-1]
    chosen = sorted(peaks[order[:2]])
    lag0 = n - 1

    pos1, amp1 = _parabolic_peak(env, chosen[0])
    t1 = (pos1 - lag0) / pulse.fs
    if len(chosen) == 1:
        return EchoParams(a1=amp1, a2=0.0, t1=t1, t2=t1, resolved=False)
    pos2, amp2 = _parabolic_peak(env, chosen[1])
    t2 = (pos2 - lag0) / pulse.fs
    if not t2 > t1 >= 0.0:
        # out-of-model geometry; report the stronger single echo instead
        return EchoParams(a1=amp1, a2=0.0, t1=t1, t2=t1, resolved=False)
    return EchoParams(a1=amp1, a2=amp2, t1=t1, t2=t2, resolved=True)


def sos_from_delays(t1: float, t2: float, d: float, c0: float | None = None) -> float:
    """Thin-section speed of sound c = 2 d / (t2 - t1).

    ``c0`` (coupling speed) is accepted for interface symmetry with the
    acquisition geometry but the two-interface delay model does not need it.
    """
    if d <= 0:
        raise ValueError("thickness must be > 0")
    if t2 <= t1:
        raise ValueError("need t2 > t1")
    return 2.0 * d / (t2 - t1)


def min_inclusion_semi_axis(rows: int, cols: int) -> int:
    """Smallest ellipse semi-axis used by :func:`generate_phantom`."""
    return max(3, min(rows, cols) // 16)


def generate_phantom(
    rows: int,
    cols: int,
    n_inclusions: int = 3,
    value_max: float = 1650.0,
    seed: int = 0,
    thickness: float = 6e-6,
    c0: float = 1480.0,
) -> Phantom:
    """Smooth 1480-1520 m/s background plus non-overlapping ellipse inclusions.

    Inclusion values are uniform in [1560, value_max]; ellipses are placed
    one per cell of a coarse grid so they never overlap and each contributes
    at least ~2 r_min^2 pixels above 1550.  Deterministic given the seed.
    """
    if rows < 8 or cols < 8:
        raise ValueError("phantom must be at least 8x8")
    if not 1550.0 < value_max <= SOS_BOUNDS[1]:
        raise ValueError("value_max must lie in (1550, 1700]")
    rng = np.random.default_rng(seed)

    ii = np.arange(rows)[:, None] / max(rows - 1, 1)
    jj = np.arange(cols)[None, :] / max(cols - 1, 1)
    field_ = np.zeros((rows, cols))
    for p in range(3):
        for q in range(3):
            field_ += rng.uniform(-1.0, 1.0) * np.cos(np.pi * p * ii) * np.cos(np.pi * q * jj)
    ptp = field_.max() - field_.min()
    if ptp > 0:
        field_ = (field_ - field_.min()) / ptp
    else:
        field_ = np.full((rows, cols), 0.5)
    sos = 1480.0 + 40.0 * field_

    if n_inclusions > 0:
        r_min = min_inclusion_semi_axis(rows, cols)
        side = int(np.ceil(np.sqrt(n_inclusions)))
        cell_h, cell_w = rows // side, cols // side
        if min(cell_h, cell_w) < 2 * r_min + 2:
            raise ValueError("too many inclusions for the phantom size")
        cells = rng.permutation(side * side)[:n_inclusions]
        yy = np.arange(rows)[:, None]
        xx = np.arange(cols)[None, :]
        for cell in cells:
            ci, cj = divmod(int(cell), side)
            r_max_h = cell_h // 2 - 1
            r_max_w = cell_w // 2 - 1
            ra = rng.integers(r_min, max(r_min, r_max_h) + 1)
            rb = rng.integers(r_min, max(r_min, r_max_w) + 1)
            cy = ci * cell_h + cell_h // 2
            cx = cj * cell_w + cell_w // 2
            phi = rng.uniform(0.0, np.pi)
            value = rng.uniform(1560.0, value_max)
            u = (yy - cy) * np.cos(phi) + (xx - cx) * np.sin(phi)
            v = -(yy - cy) * np.sin(phi) + (xx - cx) * np.cos(phi)
            inside = (u / ra) ** 2 + (v / rb) ** 2 <= 1.0
            sos[inside] = value

    return Phantom(
        sos_map=ParametricMap(sos, unit="m/s"), thickness=thickness, c0=c0
    )


def acquire_and_map(
    phantom: Phantom,
    pulse: ReferencePulse,
    noise_std: float = 0.0,
    seed: int = 0,
    t_offset: float = 20e-9,
    a1: float = 0.3,
    a2: float = 0.5,
) -> AcquisitionResult:
    """Raster-scan the phantom: synthesize, estimate, and map back to SoS.

    Per pixel the inter-echo delay is 2 d / c; the first echo sits at the
    fixed offset ``t_offset``.  Unresolved pixels are filled with the
    coupling speed and flagged in the returned boolean mask.
    """
    sos_true = phantom.sos_map.data
    rows, cols = sos_true.shape
    out = np.empty_like(sos_true)
    unresolved = np.zeros(sos_true.shape, dtype=bool)
    d = phantom.thickness
    for i in range(rows):
        for j in range(cols):
            dt = 2.0 * d / sos_true[i, j]
            params = EchoParams(a1=a1, a2=a2, t1=t_offset, t2=t_offset + dt)
            rec = synth_echo(pulse, params)
            if noise_std > 0:
                rng = np.random.default_rng([seed, i, j])
                rec = EchoRecord(
                    samples=rec.samples + noise_std * rng.standard_normal(len(rec.samples)),
                    fs=rec.fs,
                    params=params,
                )
            est = estimate_echo_params(rec, pulse)
            if est.resolved and est.t2 > est.t1:
                out[i, j] = sos_from_delays(est.t1, est.t2, d)
            else:
                out[i, j] = phantom.c0
                unresolved[i, j] = True
    return AcquisitionResult(
        sos_map=ParametricMap(out, unit=phantom.sos_map.unit), unresolved=unresolved
    )


def save_rf_cube(cube: np.ndarray, fs: float, f0: float, path) -> None:
    """Raw f32 LE dump with a plain-text sidecar header (<path>.hdr)."""
    cube = np.asarray(cube, dtype=np.float32)
    if cube.ndim != 3:
        raise ValueError("RF cube must be (rows, cols, samples)")
    with open(path, "wb") as fh:
        fh.write(cube.astype("<f4").tobytes())
    with open(str(path) + ".hdr", "w") as fh:
        fh.write(
            f"rows={cube.shape[0]}\ncols={cube.shape[1]}\nsamples={cube.shape[2]}\n"
            f"fs={fs!r}\nf0={f0!r}\ndtype=float32-le\n"
        )
