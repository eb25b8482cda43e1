"""Synthetic hourly profiles: household load, solar availability, TOU rates.

Published anchors pin the profiles (annual energy, per-kind peak, an 8 kW
coincident peak, two insolation days with the cloudy one on the high-load
day); the hourly shapes themselves are synthesized here.
"""

from __future__ import annotations

import numpy as np

from .core import (
    EnergyPriceProfile,
    ProfileLabel,
    ValidationError,
    yearly_scaling,
)

# Relative load shape: a minor morning bump and a dominant early-evening
# peak, repeated for two days with day 2 slightly heavier so the global
# peak falls on the low-sun day.
_MORNING_CENTER = 8.0
_MORNING_SIGMA = 1.0
_MORNING_AMP = 0.35
_EVENING_CENTER = 19.0
_EVENING_SIGMA = 1.2
_DAY1_FACTOR = 0.85


def _bump(hod: np.ndarray) -> np.ndarray:
    morning = _MORNING_AMP * np.exp(-0.5 * ((hod - _MORNING_CENTER) / _MORNING_SIGMA) ** 2)
    evening = np.exp(-0.5 * ((hod - _EVENING_CENTER) / _EVENING_SIGMA) ** 2)
    return morning + evening


def _load_shape(horizon: int, hours_per_slot: float) -> np.ndarray:
    """Normalized (max = 1) relative load shape over the horizon."""
    hod = (np.arange(horizon) * hours_per_slot) % 24.0
    day = (np.arange(horizon) * hours_per_slot) // 24.0
    factor = np.where(day < 1, _DAY1_FACTOR, 1.0)
    shape = factor * _bump(hod)
    return shape / shape.max()


def _block_agg(fine: np.ndarray, horizon: int, reduce) -> np.ndarray:
    return np.array([reduce(block) for block in np.array_split(fine, horizon)])


def _fine_count(horizon: int, hours_per_slot: float) -> int:
    fine = horizon * hours_per_slot
    if abs(fine - round(fine)) > 1e-9:
        raise ValidationError("horizon * hours_per_slot must cover whole hours")
    return int(round(fine))


def synthesize_load_profile(
    annual_kwh: float,
    peak_kw: float,
    horizon: int = 48,
    hours_per_slot: float = 1.0,
    shape: str = "double_peak",
) -> np.ndarray:
    """Per-slot demand with the given peak and annual energy.

    The default shape places the maximum in the evening of the second day;
    all agent kinds share the shape, so their peaks coincide and per-kind
    peaks add up.  ``shape="flat"`` returns a constant profile instead.
    On coarse grids (multi-hour slots) the hourly shape is built first and
    summed per block, preserving the annual energy exactly.
    """
    if annual_kwh <= 0 or peak_kw <= 0:
        raise ValidationError("annual energy and peak must be positive")
    w = yearly_scaling(horizon, hours_per_slot)
    target = annual_kwh / w  # kWh over the horizon
    per_slot_cap = peak_kw * hours_per_slot
    if per_slot_cap * horizon < target - 1e-12:
        raise ValidationError(
            f"peak {peak_kw} kW cannot deliver {annual_kwh} kWh/yr over {horizon} slots"
        )
    if shape == "flat":
        return np.full(horizon, target / horizon)
    if shape != "double_peak":
        raise ValidationError(f"unknown load shape {shape!r}")
    fine_n = _fine_count(horizon, hours_per_slot)
    s = _load_shape(fine_n, 1.0)
    ssum = float(s.sum())
    base = (target - peak_kw * ssum) / (fine_n - ssum)
    if base < 0:
        raise ValidationError(
            "double-peak shape cannot reach the requested peak/energy combination"
        )
    fine = base + (peak_kw - base) * s
    if fine_n == horizon:
        return fine
    return _block_agg(fine, horizon, np.sum)


def synthesize_solar_profile(
    horizon: int = 48, hours_per_slot: float = 1.0, cloudy_factor: float = 0.35
) -> np.ndarray:
    """Solar availability in kW per kWp: a sunny day then a cloudy day.

    Zero outside 06:00-18:00; the sunny-day maximum is exactly 1.0 at noon.
    The attenuated day lines up with the heavier load day of the synthetic
    load shape.  Coarse grids average the hourly bell per slot.
    """
    fine_n = _fine_count(horizon, hours_per_slot)
    hod = np.arange(fine_n) % 24.0
    day = np.arange(fine_n) // 24.0
    elevation = np.sin(np.pi * (hod - 6.0) / 12.0)
    bell = np.where((hod >= 6.0) & (hod <= 18.0) & (elevation > 0), elevation, 0.0) ** 1.5
    factor = np.where(day < 1, 1.0, cloudy_factor)
    fine = factor * bell
    if fine_n == horizon:
        return fine
    return _block_agg(fine, horizon, np.mean)


# Three-level time-of-use shapes (relative multipliers, scaled by
# calibrate_tou).  TOU1 prices the evening load peak; TOU2 prices the
# midday solar window highest to favour PV adopters.
TOU1_LEVELS = {"off": 0.55, "mid": 1.0, "peak": 1.8}
TOU1_WINDOWS = {"peak": range(17, 21), "off": (23, 0, 1, 2, 3, 4, 5, 6)}
TOU2_LEVELS = {"off": 0.60, "mid": 1.0, "peak": 1.6}
TOU2_WINDOWS = {"peak": range(10, 16), "off": (22, 23, 0, 1, 2, 3, 4, 5)}


def tou_shape(
    label: ProfileLabel, horizon: int = 48, hours_per_slot: float = 1.0
) -> np.ndarray:
    """Uncalibrated relative multipliers for one of the TOU designs."""
    if label is ProfileLabel.TOU1:
        levels, windows = TOU1_LEVELS, TOU1_WINDOWS
    elif label is ProfileLabel.TOU2:
        levels, windows = TOU2_LEVELS, TOU2_WINDOWS
    else:
        raise ValidationError(f"no shape defined for {label}")
    fine_n = _fine_count(horizon, hours_per_slot)
    hod = (np.arange(fine_n) % 24).astype(int)
    fine = np.full(fine_n, levels["mid"])
    fine[np.isin(hod, list(windows["off"]))] = levels["off"]
    fine[np.isin(hod, list(windows["peak"]))] = levels["peak"]
    if fine_n == horizon:
        return fine
    return _block_agg(fine, horizon, np.mean)


def calibrate_tou(
    flat_profile: EnergyPriceProfile,
    shape: np.ndarray,
    reference_load: np.ndarray,
    label: ProfileLabel,
) -> EnergyPriceProfile:
    """Scale a TOU shape so the reference load's energy bill matches flat.

    The scale factor is ``k = sum(D * flat) / sum(D * shape)``; applying the
    returned profile to the reference load reproduces the flat-rate energy
    bill exactly, so rate comparisons isolate load-shifting value.
    """
    shape = np.asarray(shape, dtype=float)
    reference_load = np.asarray(reference_load, dtype=float)
    if np.any(shape <= 0):
        raise ValidationError("TOU shape must be strictly positive")
    if shape.shape != reference_load.shape or shape.shape != flat_profile.buy.shape:
        raise ValidationError("shape, reference load and flat profile lengths differ")
    denom = float(np.dot(reference_load, shape))
    if denom <= 0:
        raise ValidationError("reference load has no consumption to calibrate against")
    k = float(np.dot(reference_load, flat_profile.buy)) / denom
    return EnergyPriceProfile.from_buy(label, k * shape)


def flat_profile(price: float, horizon: int = 48) -> EnergyPriceProfile:
    if price <= 0:
        raise ValidationError("flat price must be positive")
    return EnergyPriceProfile.from_buy(ProfileLabel.FLAT, np.full(horizon, float(price)))
