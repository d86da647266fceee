"""Scene model and stepped-frequency echo synthesis.

A stepped-frequency radar scans a linear or planar aperture and records one
demodulated complex sample per frequency step and scan position.  Point
targets contribute phase histories that vary with scan position; nadir and
antenna-coupling returns are modelled as constant-delay interferers whose
contribution is identical in every pulse.  Receiver saturation is modelled
either as a magnitude clip or as a memoryless polynomial transfer function.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

C0 = 299792458.0  # free-space propagation speed [m/s]

# Reject echo matrices over ~1 GiB of complex128 unless the caller raises it.
DEFAULT_MAX_ELEMENTS = 1 << 26


@dataclass
class RadarParams:
    """Stepped-frequency waveform: pulse m is transmitted at f0 + m*delta_f.

    Attributes:
        f0: starting frequency [Hz]
        delta_f: frequency step [Hz]
        num_freq: number of frequency steps M
        c: propagation speed [m/s]
    """

    f0: float
    delta_f: float
    num_freq: int
    c: float = C0

    def __post_init__(self):
        if self.f0 <= 0:
            raise ValueError("f0 must be > 0")
        if self.delta_f <= 0:
            raise ValueError("delta_f must be > 0")
        if self.num_freq < 2:
            raise ValueError("num_freq must be >= 2")
        if self.c <= 0:
            raise ValueError("c must be > 0")

    @property
    def bandwidth(self) -> float:
        """Synthetic bandwidth [Hz]; sets the range resolution c/(2*bandwidth)."""
        return self.num_freq * self.delta_f

    @property
    def unambiguous_range(self) -> float:
        """One-way range beyond which responses wrap around [m]."""
        return self.c / (2.0 * self.delta_f)

    def frequencies(self) -> np.ndarray:
        return self.f0 + self.delta_f * np.arange(self.num_freq)


@dataclass
class Aperture:
    """Scan geometry: positions on a regular line (linear) or grid (planar).

    Element (a, h) sits at origin + a*azimuth_spacing*x + h*height_spacing*z.
    Slow time is flattened azimuth-major: index = a + azimuth_count*h.
    """

    kind: str  # "linear" | "planar"
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    azimuth_count: int = 1
    azimuth_spacing: float = 0.01
    height_count: int = 1
    height_spacing: float | None = None  # defaults to azimuth_spacing

    def __post_init__(self):
        if self.kind not in ("linear", "planar"):
            raise ValueError(f"unknown aperture kind {self.kind!r}")
        if self.kind == "linear" and self.height_count != 1:
            raise ValueError("linear aperture requires height_count == 1")
        if self.azimuth_count < 1 or self.height_count < 1:
            raise ValueError("aperture counts must be >= 1")
        if self.height_spacing is None:
            self.height_spacing = self.azimuth_spacing
        if self.azimuth_spacing <= 0 or self.height_spacing <= 0:
            raise ValueError("aperture spacings must be > 0")
        self.origin = tuple(float(v) for v in self.origin)
        if len(self.origin) != 3:
            raise ValueError("origin must be a 3-vector")

    @property
    def num_positions(self) -> int:
        return self.azimuth_count * self.height_count

    def position(self, a: int, h: int = 0) -> np.ndarray:
        if not (0 <= a < self.azimuth_count and 0 <= h < self.height_count):
            raise ValueError("aperture index out of range")
        ox, oy, oz = self.origin
        return np.array([ox + a * self.azimuth_spacing, oy, oz + h * self.height_spacing])

    def positions(self) -> np.ndarray:
        """All scan positions, shape (num_positions, 3), azimuth-major order."""
        eta = np.arange(self.num_positions)
        a = eta % self.azimuth_count
        h = eta // self.azimuth_count
        ox, oy, oz = self.origin
        out = np.empty((self.num_positions, 3))
        out[:, 0] = ox + a * self.azimuth_spacing
        out[:, 1] = oy
        out[:, 2] = oz + h * self.height_spacing
        return out


@dataclass
class PointTarget:
    """Point scatterer with complex reflectivity (linear scale)."""

    position: tuple[float, float, float]
    amplitude: complex = 1.0 + 0.0j

    def __post_init__(self):
        self.position = tuple(float(v) for v in self.position)
        if len(self.position) != 3:
            raise ValueError("target position must be a 3-vector")
        if self.position[1] <= 0:
            raise ValueError("target must lie in front of the aperture plane (y > 0)")
        self.amplitude = complex(self.amplitude)
        if not np.isfinite(self.amplitude.real) or not np.isfinite(self.amplitude.imag):
            raise ValueError("target amplitude must be finite")


@dataclass
class Interferer:
    """Constant-delay return: same contribution at every scan position.

    delay_range is the one-way equivalent range [m]; zero gives a pure
    DC-like coupling term.
    """

    delay_range: float
    amplitude: complex = 1.0 + 0.0j

    def __post_init__(self):
        self.delay_range = float(self.delay_range)
        if self.delay_range < 0:
            raise ValueError("delay_range must be >= 0")
        self.amplitude = complex(self.amplitude)
        if not np.isfinite(self.amplitude.real) or not np.isfinite(self.amplitude.imag):
            raise ValueError("interferer amplitude must be finite")


@dataclass
class Scene:
    """Targets plus interferers plus per-sample circular complex noise level."""

    targets: list[PointTarget] = field(default_factory=list)
    interferers: list[Interferer] = field(default_factory=list)
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Saturation:
    """Receiver nonlinearity: none, magnitude clip, or polynomial transfer."""

    mode: str = "none"  # "none" | "hard_clip" | "polynomial"
    threshold: float | None = None  # clip amplitude, hard_clip mode
    coefficients: Sequence[float] | None = None  # H_0..H_K, polynomial mode

    def __post_init__(self):
        if self.mode not in ("none", "hard_clip", "polynomial"):
            raise ValueError(f"unknown saturation mode {self.mode!r}")
        if self.mode == "hard_clip":
            if self.threshold is None or self.threshold <= 0:
                raise ValueError("hard_clip requires threshold > 0")
        if self.mode == "polynomial":
            if self.coefficients is None or len(self.coefficients) == 0:
                raise ValueError("polynomial mode requires non-empty coefficients")


@dataclass
class EchoData:
    """Demodulated samples, frequency step (rows) by slow-time position (cols)."""

    samples: np.ndarray
    radar: RadarParams
    aperture: Aperture

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a 2D matrix")
        expected = (self.radar.num_freq, self.aperture.num_positions)
        if self.samples.shape != expected:
            raise ValueError(
                f"samples shape {self.samples.shape} does not match radar/aperture {expected}"
            )


def range_history(aperture_position, target_position) -> float:
    """One-way Euclidean distance [m]; the monostatic phase uses twice this."""
    p = np.asarray(aperture_position, dtype=float)
    q = np.asarray(target_position, dtype=float)
    return float(np.linalg.norm(p - q))


def synthesize_echo(
    radar: RadarParams,
    aperture: Aperture,
    scene: Scene,
    seed: int = 0,
    max_harmonic_order: int = 1,
    max_elements: int = DEFAULT_MAX_ELEMENTS,
) -> EchoData:
    """Simulate the demodulated echo matrix for a scene.

    Each sample is the coherent sum of target terms
    amplitude * exp(-j*4*pi*f_m*R(position)/c) over targets, the analogous
    constant-range interferer terms, and optional seeded circular complex
    noise.  Noise is drawn independently per slow-time column from a
    counter-based stream so results do not depend on evaluation order.

    max_harmonic_order scales the unambiguous-range check: harmonic analysis
    up to order k needs k times the largest scene range to stay unambiguous.
    """
    n_slow = aperture.num_positions
    n_total = radar.num_freq * n_slow
    if n_total > max_elements:
        raise ValueError(
            f"echo matrix {radar.num_freq} x {n_slow} = {n_total} samples exceeds "
            f"the configured budget of {max_elements} samples"
        )

    positions = aperture.positions()
    freqs = radar.frequencies()[:, None]
    phase_rate = -4j * np.pi / radar.c

    samples = np.zeros((radar.num_freq, n_slow), dtype=np.complex128)
    max_range = 0.0
    for tgt in scene.targets:
        r = np.linalg.norm(positions - np.asarray(tgt.position), axis=1)
        max_range = max(max_range, float(r.max()))
        samples += tgt.amplitude * np.exp(phase_rate * freqs * r[None, :])
    for itf in scene.interferers:
        max_range = max(max_range, itf.delay_range)
        samples += itf.amplitude * np.exp(phase_rate * freqs * itf.delay_range)

    if max_range * max(1, max_harmonic_order) >= radar.unambiguous_range:
        warnings.warn(
            f"scene range {max_range:.3f} m times harmonic order "
            f"{max_harmonic_order} reaches the unambiguous range "
            f"{radar.unambiguous_range:.3f} m; responses will wrap",
            RuntimeWarning,
            stacklevel=2,
        )

    if scene.noise_sigma > 0:
        scale = scene.noise_sigma / np.sqrt(2.0)
        for col in range(n_slow):
            rng = np.random.default_rng((int(seed), col))
            z = rng.standard_normal((radar.num_freq, 2))
            samples[:, col] += scale * (z[:, 0] + 1j * z[:, 1])

    return EchoData(samples, radar, aperture)


def polynomial_transfer(coefficients: Sequence[float], x):
    """Evaluate sum_n H_n * x**n by Horner's rule (scalar or array input)."""
    coeffs = np.asarray(coefficients, dtype=float)
    if coeffs.ndim != 1 or coeffs.size == 0:
        raise ValueError("coefficients must be a non-empty 1D sequence")
    xa = np.asarray(x)
    out = np.zeros_like(xa, dtype=np.complex128)
    for c in coeffs[::-1]:
        out = out * xa + c
    if np.isscalar(x) or xa.ndim == 0:
        return complex(out)
    return out


def apply_saturation(echo: EchoData, sat: Saturation) -> EchoData:
    """Pass the echo matrix through the receiver nonlinearity.

    hard_clip limits the sample magnitude at the threshold and preserves the
    phase, so the scan-dependent Doppler phase survives saturation.
    polynomial applies the transfer series to the complex samples, which is
    what turns a constant-delay return into a train of range harmonics.
    """
    x = echo.samples
    if not np.all(np.isfinite(x.real)) or not np.all(np.isfinite(x.imag)):
        raise ValueError("echo contains non-finite samples")
    if sat.mode == "none":
        out = x.copy()
    elif sat.mode == "hard_clip":
        mag = np.abs(x)
        scale = np.ones_like(mag)
        over = mag > sat.threshold
        scale[over] = sat.threshold / mag[over]
        out = x * scale
    else:  # polynomial
        out = polynomial_transfer(sat.coefficients, x)
    return EchoData(out, echo.radar, echo.aperture)


@dataclass
class ClipperFit:
    """Polynomial approximation of the clip transfer, with its sup-norm error."""

    coefficients: np.ndarray
    residual: float


def fit_clipper_polynomial(
    threshold: float,
    order: int,
    sample_count: int,
    fit_max: float | None = None,
) -> ClipperFit:
    """Least-squares polynomial fit of the scalar clip map t -> min(t, threshold).

    The fit domain is [0, fit_max], default [0, 2*threshold] so the saturated
    region is always covered.  Pass a larger fit_max when the polynomial will
    be applied to signals whose magnitude exceeds twice the threshold.  The
    reported residual is the maximum absolute error on a dense grid over the
    fit domain, so magnitudes mapped through the polynomial match the hard
    clip to within it anywhere in the domain.
    """
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    if order < 1:
        raise ValueError("order must be >= 1")
    if sample_count <= order:
        raise ValueError("sample_count must exceed order")
    domain = 2.0 * threshold if fit_max is None else float(fit_max)
    if domain <= 0:
        raise ValueError("fit_max must be > 0")

    t = np.linspace(0.0, domain, sample_count)
    target = np.minimum(t, threshold)
    # Fit in the normalized variable t/domain to keep the system well scaled.
    u = t / domain
    vander = u[:, None] ** np.arange(order + 1)
    sol, _, rank, _ = np.linalg.lstsq(vander, target, rcond=None)
    if rank < order + 1:
        raise ValueError("degenerate normal equations in clipper fit")
    coeffs = sol / domain ** np.arange(order + 1)

    dense = np.linspace(0.0, domain, 8192)
    err = polynomial_transfer(coeffs, dense).real - np.minimum(dense, threshold)
    return ClipperFit(coefficients=coeffs, residual=float(np.max(np.abs(err))))


@dataclass(frozen=True)
class HarmonicComponent:
    """One predicted response location with the mechanisms that produce it."""

    apparent_range: float
    labels: tuple[str, ...]


def predict_harmonic_ranges(
    target_ranges: Sequence[float],
    interferer_ranges: Sequence[float],
    max_order: int,
) -> list[HarmonicComponent]:
    """Enumerate apparent ranges produced by a power-series nonlinearity.

    Returns the DC term, target harmonics k*R_t and interference harmonics
    l*R_i up to max_order, and cross-coupling terms k*R_t + l*R_i with
    k + l <= max_order, sorted ascending with coincident entries merged.
    Only locations are predicted; harmonic amplitudes depend on the transfer
    coefficients and are left to simulation.
    """
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    entries: list[tuple[float, str]] = [(0.0, "dc")]
    for r in target_ranges:
        for k in range(1, max_order + 1):
            entries.append((k * float(r), f"target_harmonic({k})"))
    for r in interferer_ranges:
        for l in range(1, max_order + 1):
            entries.append((l * float(r), f"interference_harmonic({l})"))
    for rt in target_ranges:
        for ri in interferer_ranges:
            for k in range(1, max_order):
                for l in range(1, max_order - k + 1):
                    entries.append((k * float(rt) + l * float(ri), f"cross({k},{l})"))

    entries.sort(key=lambda e: e[0])
    scale = max(1.0, max(e[0] for e in entries))
    tol = 1e-9 * scale
    merged: list[HarmonicComponent] = []
    i = 0
    while i < len(entries):
        j = i
        while j + 1 < len(entries) and entries[j + 1][0] - entries[i][0] <= tol:
            j += 1
        labels = tuple(sorted({entries[k][1] for k in range(i, j + 1)}))
        merged.append(HarmonicComponent(entries[i][0], labels))
        i = j + 1
    return merged
