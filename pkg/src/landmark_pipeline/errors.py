"""Typed errors raised by file loaders and container validation."""

from __future__ import annotations


class DatasetError(ValueError):
    """Base class for malformed input files and invalid containers."""


class MagicMismatchError(DatasetError):
    """File does not start with the expected magic bytes."""

    def __init__(self, path: str, expected: bytes, got: bytes):
        self.path = str(path)
        self.expected = expected
        self.got = got
        super().__init__(
            f"{path}: bad magic at byte 0: expected {expected!r}, got {got!r}"
        )


class TruncatedFileError(DatasetError):
    """File ended before a complete record could be read."""

    def __init__(self, path: str, offset: int, needed: int, available: int):
        self.path = str(path)
        self.offset = offset
        self.needed = needed
        self.available = available
        super().__init__(
            f"{path}: truncated at byte {offset}: needed {needed} bytes, "
            f"found {available}"
        )


class IdCountMismatchError(DatasetError):
    """Sidecar id file row count disagrees with the binary header."""

    def __init__(self, path: str, header_count: int, id_count: int):
        self.path = str(path)
        self.header_count = header_count
        self.id_count = id_count
        super().__init__(
            f"{path}: header declares {header_count} rows but sidecar "
            f"lists {id_count} ids"
        )


class PayloadError(DatasetError):
    """Payload contains a non-finite value (NaN or Inf)."""

    def __init__(self, path: str, offset: int):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: non-finite value at byte {offset}")


class DuplicateIdError(DatasetError):
    """The same image id appears more than once."""

    def __init__(self, source: str, image_id: str):
        self.source = str(source)
        self.image_id = image_id
        super().__init__(f"{source}: duplicate id {image_id!r}")
