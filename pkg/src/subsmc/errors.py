"""Exception hierarchy shared by the engine and the command line."""


class SubsmcError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(SubsmcError, ValueError):
    """Invalid configuration or design; ``problems`` lists offending fields."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))

    def __reduce__(self):
        return (type(self), (self.problems,))


class NumericOverflowError(SubsmcError, FloatingPointError):
    """A per-observation log-density term was not finite."""

    def __init__(self, index, value=None, stage=None):
        self.index = int(index)
        self.value = value
        self.stage = stage
        where = f" at stage {stage}" if stage is not None else ""
        super().__init__(
            f"non-finite log-density term for observation {self.index}{where}"
            + (f" (value {value!r})" if value is not None else "")
        )

    def __reduce__(self):
        return (type(self), (self.index, self.value, self.stage))


class DegenerateCloudError(SubsmcError, RuntimeError):
    """The particle weights collapsed (all zero, or ESS below the abort threshold)."""

    def __init__(self, message, stage=None, diagnostics=None):
        self.message = message
        self.stage = stage
        self.diagnostics = diagnostics or {}
        where = f"stage {stage}: " if stage is not None else ""
        super().__init__(where + message)

    def __reduce__(self):
        return (type(self), (self.message, self.stage, self.diagnostics))


class ParticleMapError(SubsmcError, RuntimeError):
    """One or more per-particle tasks failed inside a parallel map."""

    def __init__(self, failures):
        self.failures = list(failures)  # [(particle index, exception)]
        first_idx, first_exc = self.failures[0]
        super().__init__(
            f"{len(self.failures)} particle task(s) failed; first at particle "
            f"{first_idx}: {first_exc!r}"
        )

    def __reduce__(self):
        return (type(self), (self.failures,))


class ComparisonError(SubsmcError, ValueError):
    """Two results cannot be compared (e.g. mismatched dimension)."""
