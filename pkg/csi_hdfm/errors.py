from collections.abc import Iterable


class CsiHdfmError(Exception):
    pass


class FormatError(CsiHdfmError, ValueError):
    pass


class CorruptionError(CsiHdfmError, ValueError):
    pass


class ValidationError(CsiHdfmError, ValueError):
    pass


class DegenerateInputError(ValidationError):
    def __init__(self, rows: Iterable[int]) -> None:
        self.rows = tuple(rows)
        shown = ", ".join(str(r) for r in self.rows[:20])
        if len(self.rows) > 20:
            shown += f", ... ({len(self.rows)} rows)"
        super().__init__(f"Constant input rows: {shown}")


class UsageError(CsiHdfmError):
    pass
