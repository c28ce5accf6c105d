"""Shared exception types. Contract violations are programming errors at call
sites; numeric failures mean a computation left the finite-float domain."""


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class NumericFailure(RuntimeError):
    """NaN/Inf appeared where only finite values are allowed."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class EmptyRegionError(ValueError):
    """A mask or region that must be non-empty was empty."""


class VocabularyError(ValueError):
    """A token or attribute value is not in the fixed vocabulary."""


class UnknownColorError(ValueError):
    """A pixel color could not be matched to the palette or background."""


class CapacityError(ValueError):
    """More items than the fixed layout of cells can hold."""


class LayoutParseError(ValueError):
    """Layout JSON failed validation; `field` names the offending path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
