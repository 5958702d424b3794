"""Exception types shared across the package."""


class DegenerateInputError(ValueError):
    """Input carries too little information for the operation (e.g. < 2 points for PCA)."""


class BranchAmbiguityError(ValueError):
    """Rotation angle too close to pi for a unique logarithm branch."""


class DegenerateBlendError(ValueError):
    """Weighted quaternion sum collapsed (antipodal cancellation)."""


class InvalidDepthError(ValueError):
    """Nonpositive depth supplied where a positive z-depth is required."""


class ParseError(ValueError):
    """Malformed input file; message carries file/line context."""

    def __init__(self, message, path=None, line=None):
        ctx = ""
        if path is not None:
            ctx += f"{path}"
        if line is not None:
            ctx += f":{line}"
        super().__init__(f"{ctx}: {message}" if ctx else message)
        self.path = path
        self.line = line


class ConsistencyError(ValueError):
    """Mutually inconsistent inputs (e.g. frame counts disagree across files)."""


class SceneSpecError(ValueError):
    """Unknown or invalid synthetic-scene descriptor."""


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss; carries the loss trace so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
