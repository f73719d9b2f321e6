"""Exception hierarchy shared by all cardioprior modules.

Every error that a pipeline operator can trigger through bad inputs derives
from :class:`CardioPriorError`; the CLI maps those to exit code 1 and anything
else to exit code 2.
"""

from __future__ import annotations


class CardioPriorError(Exception):
    """Base class for all input/validation errors raised by this package."""


# volume I/O and label conventions
class MalformedHeader(CardioPriorError):
    pass


class SizeMismatch(CardioPriorError):
    pass


class UnsupportedElementType(CardioPriorError):
    pass


class InvalidLabelValue(CardioPriorError):
    pass


class IoFailure(CardioPriorError):
    pass


# geometry / resampling
class InvalidSpacing(CardioPriorError):
    pass


class EmptyForeground(CardioPriorError):
    pass


# landmark alignment
class InsufficientLandmarks(CardioPriorError):
    pass


class DegenerateConfiguration(CardioPriorError):
    pass


# soft shape descriptors
class VanishingMass(CardioPriorError):
    pass


# losses
class ShapeMismatch(CardioPriorError):
    pass


class NotOneHot(CardioPriorError):
    pass


class NoUsableStats(CardioPriorError):
    pass


class UnknownLoss(CardioPriorError):
    pass


# metrics
class EmptySurface(CardioPriorError):
    pass


# phantom generation
class DegenerateSpec(CardioPriorError):
    pass


class UnknownMode(CardioPriorError):
    pass


# micro trainer
class GridMismatch(CardioPriorError):
    pass


class ArityMismatch(CardioPriorError):
    pass


class NonfiniteLoss(CardioPriorError):
    pass


# command line
class UsageError(CardioPriorError):
    pass
