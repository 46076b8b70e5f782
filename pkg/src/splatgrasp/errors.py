"""Exception hierarchy shared by every module."""


class SplatGraspError(Exception):
    pass


class StructuralError(SplatGraspError, ValueError):
    """Array shapes or lengths that do not fit together."""


class ValidationError(SplatGraspError, ValueError):
    """Values that violate a documented invariant."""


class DegenerateFaceError(ValidationError):
    def __init__(self, face, message=None):
        self.face = face
        super().__init__(message or f"face {face} is degenerate")


class FormatError(ValidationError):
    """Malformed file contents."""
