"""Domain types shared by the whole pipeline.

Volumes are held in memory as ``(ny, nx, nz)`` complex128 arrays so that
each pixel's axial profile is contiguous. The on-disk ordering (x fastest,
then y, then z) is handled by :mod:`thzsr.io`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s

DEFAULT_F_START = 514e9
DEFAULT_F_END = 640e9
DEFAULT_N_FREQ = 1400
DEFAULT_PAD_FACTOR = 9
DEFAULT_LATERAL_STEP_UM = 262.5
DEFAULT_PSF_FWHM_UM = 793.7
DEFAULT_TAU_F = 45
# depth per unpadded bin quoted for the measured system; c/2B gives 1189.7
QUOTED_DEPTH_RESOLUTION_UM = 1210.0


class Domain(enum.IntEnum):
    FREQUENCY = 0
    SPATIAL = 1


@dataclass(frozen=True)
class AcquisitionConfig:
    """FMCW acquisition constants.

    ``carrier_omega`` and ``depth_resolution_um`` default to values derived
    from the sweep; either may be overridden (e.g. ``depth_resolution_um=1210``
    to reproduce the quoted system figure).
    """

    f_start: float = DEFAULT_F_START
    f_end: float = DEFAULT_F_END
    n_freq: int = DEFAULT_N_FREQ
    pad_factor: int = DEFAULT_PAD_FACTOR
    lateral_step: float = DEFAULT_LATERAL_STEP_UM
    carrier_omega: float | None = None
    depth_resolution_um: float | None = None
    speed_of_light: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if not (self.f_start > 0 and self.f_end > self.f_start):
            raise ValueError(f"need f_end > f_start > 0, got {self.f_start}, {self.f_end}")
        if self.n_freq < 2:
            raise ValueError(f"n_freq must be >= 2, got {self.n_freq}")
        if self.pad_factor < 1:
            raise ValueError(f"pad_factor must be >= 1, got {self.pad_factor}")
        if self.lateral_step <= 0:
            raise ValueError("lateral_step must be positive")
        if self.depth_resolution_um is not None and self.depth_resolution_um <= 0:
            raise ValueError("depth_resolution_um must be positive")

    @property
    def bandwidth(self) -> float:
        return self.f_end - self.f_start

    @property
    def padded_length(self) -> int:
        return self.pad_factor * self.n_freq

    @property
    def freq_step(self) -> float:
        return self.bandwidth / (self.n_freq - 1)

    @property
    def omega(self) -> float:
        """Carrier in rad per padded sample."""
        if self.carrier_omega is not None:
            return self.carrier_omega
        return np.pi * (self.n_freq - 1) / self.padded_length

    @property
    def delta_d(self) -> float:
        """Depth per unpadded bin in micrometres."""
        if self.depth_resolution_um is not None:
            return self.depth_resolution_um
        return depth_per_sample(self)

    def frequencies(self) -> np.ndarray:
        return self.f_start + np.arange(self.n_freq) * self.freq_step

    def replace(self, **changes) -> "AcquisitionConfig":
        from dataclasses import replace

        return replace(self, **changes)


def depth_per_sample(cfg: AcquisitionConfig) -> float:
    """Bandwidth-limited depth resolution ``c / 2B`` in micrometres."""
    return cfg.speed_of_light / (2.0 * cfg.bandwidth) * 1e6


def flat_index(x, y, z, nx: int, ny: int):
    """Position of sample (x, y, z) in the x-fastest file ordering."""
    return x + nx * (y + ny * z)


def wrap_phase(phi):
    """Wrap to [-pi, pi)."""
    return (np.asarray(phi) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class ComplexVolume:
    """Immutable complex sample grid, stored as ``data[y, x, z]``."""

    data: np.ndarray
    domain: Domain = Domain.FREQUENCY
    lateral_step: float = DEFAULT_LATERAL_STEP_UM

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D (ny, nx, nz), got shape {arr.shape}")
        if not np.iscomplexobj(arr):
            arr = arr.astype(np.complex128)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "domain", Domain(self.domain))

    @property
    def ny(self) -> int:
        return self.data.shape[0]

    @property
    def nx(self) -> int:
        return self.data.shape[1]

    @property
    def nz(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def pixel(self, x: int, y: int) -> np.ndarray:
        return self.data[y, x]

    def energy(self) -> float:
        return float(np.sum(np.abs(self.data) ** 2))


@dataclass
class IntensityImage:
    """Non-negative lateral image in linear power units, indexed ``values[y, x]``."""

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("intensity image must be 2D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("intensity image contains non-finite values")
        if np.any(self.values < 0):
            raise ValueError("intensity image contains negative values")

    @property
    def ny(self) -> int:
        return self.values.shape[0]

    @property
    def nx(self) -> int:
        return self.values.shape[1]


@dataclass
class DepthMap:
    """Depth in micrometres relative to the reference zero.

    Invalid pixels hold NaN and ``valid`` is False there.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.values = np.where(self.valid, self.values, np.nan)


@dataclass
class SincFitParams:
    amplitude: float
    mu: float
    sigma: float
    phi: float
    rmse: float = np.nan
    converged: bool = False
    iterations: int = 0
    valid: bool = True
    z_max: int = -1
    cost: float = np.nan

    def __post_init__(self):
        self.phi = float(wrap_phase(self.phi))

    def as_array(self) -> np.ndarray:
        return np.array([self.amplitude, self.mu, self.sigma, self.phi])


_GRID_FIELDS = ("amplitude", "mu", "sigma", "phi", "rmse", "cost")


@dataclass
class FitGrid:
    """Per-pixel fit results over an ``(ny, nx)`` lateral grid."""

    amplitude: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray
    rmse: np.ndarray
    cost: np.ndarray
    converged: np.ndarray
    valid: np.ndarray
    iterations: np.ndarray
    z_max: np.ndarray
    tau_f: int = DEFAULT_TAU_F
    extra: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, ny: int, nx: int, tau_f: int = DEFAULT_TAU_F) -> "FitGrid":
        nan = lambda: np.full((ny, nx), np.nan)  # noqa: E731
        return cls(
            amplitude=nan(), mu=nan(), sigma=nan(), phi=nan(), rmse=nan(), cost=nan(),
            converged=np.zeros((ny, nx), bool),
            valid=np.zeros((ny, nx), bool),
            iterations=np.zeros((ny, nx), np.int64),
            z_max=np.full((ny, nx), -1, np.int64),
            tau_f=tau_f,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.amplitude.shape

    def __getitem__(self, yx) -> SincFitParams:
        y, x = yx
        return SincFitParams(
            amplitude=float(self.amplitude[y, x]), mu=float(self.mu[y, x]),
            sigma=float(self.sigma[y, x]), phi=float(self.phi[y, x]),
            rmse=float(self.rmse[y, x]), converged=bool(self.converged[y, x]),
            iterations=int(self.iterations[y, x]), valid=bool(self.valid[y, x]),
            z_max=int(self.z_max[y, x]), cost=float(self.cost[y, x]),
        )

    def __setitem__(self, yx, p: SincFitParams) -> None:
        y, x = yx
        for name in _GRID_FIELDS:
            getattr(self, name)[y, x] = getattr(p, name)
        self.converged[y, x] = p.converged
        self.valid[y, x] = p.valid
        self.iterations[y, x] = p.iterations
        self.z_max[y, x] = p.z_max

    def arrays(self) -> dict[str, np.ndarray]:
        names = _GRID_FIELDS + ("converged", "valid", "iterations", "z_max")
        return {n: getattr(self, n) for n in names}

    def equals(self, other: "FitGrid") -> bool:
        """Bitwise equality, NaNs in the same places count as equal."""
        a, b = self.arrays(), other.arrays()
        return all(
            np.array_equal(a[k], b[k], equal_nan=a[k].dtype.kind == "f") for k in a
        )
