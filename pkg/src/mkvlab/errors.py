"""Exception hierarchy shared by every mkvlab module."""


class MkvError(Exception):
    """Base class for all errors raised by mkvlab."""


class InvalidInputError(MkvError, ValueError):
    """Malformed input: wrong shape, non-finite entries, bad mass."""


class DomainError(MkvError, ValueError):
    """Input is well formed but outside the domain of the operation."""


class NotAdmissibleError(MkvError):
    """A (drift, diffusion) pair fails one of the admissibility conditions."""


class NotAlmostPositivelyStableError(MkvError):
    """A drift matrix has an eigenvalue with negative real part, or a
    defective zero eigenvalue."""


class LyapunovError(MkvError):
    """The Lyapunov equation has no unique positive definite solution."""


class DegenerateInputError(MkvError):
    """The requested quantity is trivially zero or undefined for this input."""


class SimulationBlowUpError(MkvError):
    """Particle positions became non-finite."""


class ScenarioError(MkvError):
    """A scenario document could not be parsed or validated.

    ``field`` is the dotted path of the offending entry and ``line`` its
    1-based line in the source document, when known.
    """

    def __init__(self, message, field=None, line=None):
        where = []
        if field:
            where.append(f"field '{field}'")
        if line:
            where.append(f"line {line}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.field = field
        self.line = line
