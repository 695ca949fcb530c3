"""Exception hierarchy shared by all modules."""


class AnchorPCError(Exception):
    """Base class for all library errors."""


class ParseError(AnchorPCError):
    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class EmptyCloud(AnchorPCError):
    pass


class KTooLarge(AnchorPCError):
    pass


class DegenerateNeighborhood(AnchorPCError):
    pass


class DegenerateConfiguration(AnchorPCError):
    pass


class TooFewAnchors(AnchorPCError):
    pass


class DegenerateAnchors(AnchorPCError):
    pass


class SolverDiverged(AnchorPCError):
    pass


class ColsMismatch(AnchorPCError):
    pass


class FormatError(AnchorPCError):
    """Malformed or truncated binary/text container; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)


class ExternalFailed(AnchorPCError):
    def __init__(self, returncode, diagnostics=""):
        self.returncode = returncode
        self.diagnostics = diagnostics
        super().__init__(f"external predictor failed with exit code {returncode}: {diagnostics.strip()}")


class BadExternalOutput(AnchorPCError):
    pass


class TooFewRemaining(AnchorPCError):
    pass


class ConfigError(AnchorPCError):
    pass
