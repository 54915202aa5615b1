#!/usr/bin/env python3
"""
Pipeline Errors
===============

Exception types raised by the detection pipeline. Each carries the exit
code the command-line runner returns when it reaches the top level.
"""

from typing import Optional


class PipelineError(Exception):
    """Base class for all pipeline failures."""

    exit_code = 1


class ConfigError(PipelineError):
    """Unreadable, malformed or inconsistent configuration."""

    exit_code = 3


class ManifestError(PipelineError):
    """Annotation manifest parse error or record invariant violation."""

    exit_code = 4

    def __init__(self, message: str, image_id: Optional[str] = None, line: Optional[int] = None):
        self.image_id = image_id
        self.line = line
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if image_id is not None:
            prefix.append(f"image_id '{image_id}'")
        if prefix:
            message = f"{', '.join(prefix)}: {message}"
        super().__init__(message)


class ImageIOError(PipelineError):
    """An image file could not be read or written."""

    exit_code = 5

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class DivergenceError(PipelineError):
    """Training or inference produced non-finite values."""

    exit_code = 6

    def __init__(self, message: str, iteration: Optional[int] = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)


class EvaluationError(PipelineError):
    """Evaluation inputs are inconsistent (e.g. a class absent from the test set)."""

    exit_code = 7
