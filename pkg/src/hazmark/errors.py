"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A distribution or model parameter is outside its admissible domain."""


class ContractError(ValueError):
    """An argument violates a call contract (dimension mismatch, bad range)."""


class IngestionError(Exception):
    """A data file failed validation; carries file/line context.

    Ingestion is all-or-nothing: the first violation aborts the load.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc = f" [{loc}]"
        super().__init__(f"{message}{loc}")


class InitializationError(Exception):
    """The sampler could not start (non-finite log-posterior at the initial state)."""


class ConvergenceGateError(Exception):
    """A fitted run failed the configured split-R-hat gate."""
