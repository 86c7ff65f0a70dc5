#!/usr/bin/env python3
"""
Exception hierarchy for the WCL relation extraction pipeline.

Library code raises these; only the CLI turns them into exit codes.
"""


class WclreError(Exception):
    """Base class for every pipeline error"""

    exit_code = 2


class UsageError(WclreError):
    exit_code = 1


class DataError(WclreError):
    """Bad input data, config or artifacts"""

    exit_code = 2


class RecordParseError(DataError):
    def __init__(self, field: str, message: str, line_no: int = None):
        self.field = field
        self.line_no = line_no
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}{field}: {message}")


class RecordValidationError(DataError):
    def __init__(self, rule: str, message: str, line_no: int = None):
        self.rule = rule
        self.line_no = line_no
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}{message}")


class DatasetError(DataError):
    pass


class InsufficientBagsError(DataError):
    def __init__(self, available: int, required: int):
        self.available = available
        self.required = required
        super().__init__(f"insufficient bags: {available} eligible, {required} required")


class ConfigError(DataError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class ShapeMismatchError(DataError):
    pass


class SequenceTooLongError(DataError):
    def __init__(self, length: int, max_len: int):
        self.length = length
        self.max_len = max_len
        super().__init__(f"sequence too long: {length} > {max_len}")


class CheckpointError(DataError):
    pass


class NumericalError(WclreError):
    exit_code = 3


class NonFiniteLossError(NumericalError):
    def __init__(self, message: str, step: int = None, details: dict = None):
        self.step = step
        self.details = details or {}
        super().__init__(message)


class DegenerateRepresentationError(NumericalError):
    pass
