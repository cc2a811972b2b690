"""Error type shared by every module.

Each failure carries a short kebab-case ``code`` (``"grid-mismatch"``,
``"unsupported-dtype"``, ...) so callers and the CLI can branch on it without
parsing messages.
"""


class LesionBenchError(ValueError):
    """A toolkit failure tagged with a stable error code."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        self.message = message
        super().__init__(f"{code}: {message}" if message else code)
