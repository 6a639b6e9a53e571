"""Error taxonomy shared across the package.

DataError covers anything wrong with user-supplied input (corpus files,
configs, checkpoints). ParseError narrows that to line-oriented corpus
parsing and always carries the offending line number. InvariantError marks
conditions that user input should never be able to trigger; reaching one
means a caller broke an internal contract.
"""


class DataError(ValueError):
    """Invalid user-supplied data (corpus, config, checkpoint, ...)."""


class ParseError(DataError):
    """Corpus parse failure, tagged with the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class InvariantError(RuntimeError):
    """An internal invariant was violated; indicates a bug in the caller."""
