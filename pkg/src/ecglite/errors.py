"""Exception hierarchy shared by every ecglite module."""


class EcgliteError(Exception):
    """Base class; the CLI maps any subclass to exit status 1."""


# --- ingestion -------------------------------------------------------------

class IngestError(EcgliteError):
    pass


class ParseError(IngestError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFormat(IngestError):
    pass


class InconsistentHeader(IngestError):
    pass


class TruncatedSignal(IngestError):
    pass


class EmptyRecord(IngestError):
    pass


class SchemaError(IngestError):
    pass


class DuplicateRecord(IngestError):
    pass


# --- signal processing -----------------------------------------------------

class DspError(EcgliteError):
    pass


class DesignError(DspError):
    pass


class SignalTooShort(DspError):
    pass


class DecompositionError(DspError):
    pass


class ReconstructionError(DspError):
    pass


class InvalidWindow(DspError):
    pass


# --- labels ----------------------------------------------------------------

class LabelError(EcgliteError):
    pass


class UnknownCode(LabelError):
    pass


class UnlabeledRecord(LabelError):
    pass


class DegenerateDistribution(LabelError):
    pass


# --- network ---------------------------------------------------------------

class ShapeError(EcgliteError):
    pass


class BatchTooSmall(EcgliteError):
    pass


class StateError(EcgliteError):
    pass


# --- model container -------------------------------------------------------

class ModelFormatError(EcgliteError):
    pass


class EncodeError(ModelFormatError):
    pass


class NotAModelFile(ModelFormatError):
    pass


class CorruptFile(ModelFormatError):
    pass


class UnsupportedVersion(ModelFormatError):
    pass


# --- evaluation ------------------------------------------------------------

class EmptyEvaluation(EcgliteError):
    pass


class ConfigError(EcgliteError):
    """Invalid pipeline configuration; the CLI maps this to exit status 2."""
