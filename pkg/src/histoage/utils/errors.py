"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: MissingArtifactError -> 2,
ConfigError -> 3, NumericFailure -> 4.
"""


class HistoAgeError(Exception):
    """Base class for every error raised by histoage."""


class DataError(HistoAgeError, ValueError):
    """Malformed or unusable input data."""


class ShapeError(HistoAgeError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {rendered}")


class ConfigError(HistoAgeError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"invalid config field '{field}': {message}")


class MissingArtifactError(HistoAgeError, FileNotFoundError):
    def __init__(self, path, stage: str = ""):
        self.path = str(path)
        self.stage = stage
        hint = f" (required by stage '{stage}')" if stage else ""
        super().__init__(f"missing artifact: {self.path}{hint}")


# ---------------------- Numeric failures ----------------------

class NumericFailure(HistoAgeError, ArithmeticError):
    """A numerical routine could not produce a finite, trustworthy result."""


class NonFiniteGradientError(NumericFailure):
    def __init__(self, param: str, epoch: int = -1, batch: int = -1):
        self.param = param
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite gradient for '{param}' at epoch {epoch}, batch {batch}; step refused")


class NonFiniteLossError(NumericFailure):
    def __init__(self, epoch: int, batch: int, embedding_std):
        self.epoch = epoch
        self.batch = batch
        self.embedding_std = embedding_std
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; "
            f"embedding std per dim: min={min(embedding_std, default=float('nan')):.3g} "
            f"max={max(embedding_std, default=float('nan')):.3g}"
        )


class DegenerateEmbeddingError(NumericFailure):
    """Cosine similarity requested for a zero-norm vector."""


class NoEventsError(NumericFailure):
    """Survival data without a single observed event."""
