"""Rain-density labels and their pixel-coverage bands."""

from __future__ import annotations

import enum


class DensityLabel(enum.IntEnum):
    """Three-level rain-density class. Integer codes are part of the model:
    the label map fed into the de-rainer is filled with this value."""

    LIGHT = 1
    MEDIUM = 2
    HEAVY = 3

    @classmethod
    def from_name(cls, name: str) -> "DensityLabel":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown density label {name!r}") from None


# Fraction of pixels seeded as streak origins, per label.
COVERAGE_BANDS = {
    DensityLabel.LIGHT: (0.05, 0.35),
    DensityLabel.MEDIUM: (0.35, 0.65),
    DensityLabel.HEAVY: (0.65, 0.95),
}

ALL_LABELS = (DensityLabel.LIGHT, DensityLabel.MEDIUM, DensityLabel.HEAVY)
