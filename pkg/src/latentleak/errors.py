"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """An argument or intermediate state violates a documented contract."""


class DegenerateInputError(ValueError):
    """Input lies in a degenerate region where the operation is undefined."""


class ConfigError(ValueError):
    """A run configuration failed validation.

    Carries every violation found, not just the first one.
    """

    def __init__(self, problems):
        self.problems = [str(p) for p in problems]
        lines = "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(f"invalid configuration ({len(self.problems)} problem(s)):\n{lines}")
