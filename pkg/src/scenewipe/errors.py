"""Exception types shared across the pipeline.

DataError covers malformed or inconsistent inputs (CLI exit code 3);
ExternalToolError covers child-process adapter failures (exit code 4).
"""


class DataError(Exception):
    """Invalid, malformed, or inconsistent input data."""


class ModelFormatError(DataError):
    """A sparse-model file could not be parsed.

    Carries enough context to point at the offending location: file plus
    line number for text models, byte offset for binary models.
    """

    def __init__(self, path, message, line=None, offset=None):
        self.path = str(path)
        self.line = line
        self.offset = offset
        where = self.path
        if line is not None:
            where += f":{line}"
        if offset is not None:
            where += f" (byte offset {offset})"
        super().__init__(f"{where}: {message}")


class DanglingReferenceError(DataError):
    """A parsed model references an id that does not exist."""


class NoSparseCorrespondenceError(DataError):
    """The annotation mask covers no keypoints with a 3D track."""


class NoDetectionError(DataError):
    """The box detector found nothing for the given text."""


class EmptyMaskError(DataError):
    """An operation that needs foreground pixels got an all-background mask."""


class ExternalToolError(Exception):
    """A child-process adapter (mask predictor, box detector) failed."""


class TrainingDivergedError(Exception):
    """Training aborted because the loss became non-finite."""

    def __init__(self, step, detail=""):
        self.step = step
        msg = f"non-finite loss at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
