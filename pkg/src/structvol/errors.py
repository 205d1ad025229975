class FormatError(ValueError):
    """Malformed SVOL stream. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDiverged(RuntimeError):
    """Raised when an optimisation loop produces a non-finite loss."""

    def __init__(self, step, value=float("nan")):
        super().__init__(f"training diverged at step {step}: loss={value}")
        self.step = step
        self.value = value
