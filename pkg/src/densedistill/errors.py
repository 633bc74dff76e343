"""Exception types shared across the package.

Every error that the CLI can surface carries a ``code`` attribute so runs
can fail with a machine-readable record and a stable exit status.
"""

from __future__ import annotations


class DenseDistillError(Exception):
    """Base class for all package errors."""

    code = "error"


class ContractViolation(DenseDistillError):
    """An argument violated a documented precondition."""

    code = "contract"


class RejectedInputError(ContractViolation):
    """An input image failed validation (channel count, non-finite pixels)."""

    code = "rejected_input"


class ConfigError(DenseDistillError):
    """Config file or override could not be parsed or names an unknown key."""

    code = "config"


class MissingInputError(DenseDistillError):
    """A referenced file (manifest, checkpoint, image) does not exist."""

    code = "missing_input"


class DivergenceError(DenseDistillError):
    """Training produced a non-finite loss."""

    code = "divergence"

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ManifestError(DenseDistillError):
    """Base class for dataset manifest problems."""

    code = "manifest"


class ManifestMissingError(ManifestError, MissingInputError):
    code = "manifest_missing"


class ManifestSchemaError(ManifestError):
    """A manifest entry is malformed; ``entry`` is its 0-based line index."""

    code = "manifest_schema"

    def __init__(self, message: str, entry: int):
        super().__init__(f"entry {entry}: {message}")
        self.entry = entry


class ManifestLabelError(ManifestError):
    """A manifest entry has a label outside {0, 1}."""

    code = "manifest_label"

    def __init__(self, message: str, entry: int):
        super().__init__(f"entry {entry}: {message}")
        self.entry = entry


class ManifestPathError(ManifestError):
    """A manifest entry references an image file that does not exist."""

    code = "manifest_dangling_path"

    def __init__(self, message: str, entry: int):
        super().__init__(f"entry {entry}: {message}")
        self.entry = entry


class ManifestDuplicateError(ManifestError):
    """Two manifest entries share the same (patient_id, pair_id) key."""

    code = "manifest_duplicate"
