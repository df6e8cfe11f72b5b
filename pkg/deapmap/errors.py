class DeapError(Exception):
    """Base class for every error raised by deapmap."""


class StabilityError(DeapError):
    """Time step violates the explicit-Euler stability bound."""


class NonFiniteFieldError(DeapError):
    def __init__(self, step_index: int, cell: tuple[int, int]):
        self.step_index = step_index
        self.cell = cell
        super().__init__(
            f"non-finite field value at step {step_index}, cell (row={cell[0]}, col={cell[1]})"
        )


class FootprintError(DeapError):
    def __init__(self, electrode_index: int, detail: str = ""):
        self.electrode_index = electrode_index
        message = f"electrode {electrode_index} falls outside the tissue grid"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class InsufficientSupportError(DeapError):
    """Fewer than four electrodes carry a usable activation."""


class ShapeMismatchError(DeapError):
    pass


class PhaseInputError(DeapError):
    """Movie or window too short for the requested phase product."""


class TrainingDivergedError(DeapError):
    def __init__(self, epoch: int, batch_index: int, loss: float):
        self.epoch = epoch
        self.batch_index = batch_index
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch_index}"
        )


class InsufficientEpisodesError(DeapError):
    pass


class DegenerateMaskError(DeapError):
    pass


class ArtifactError(DeapError):
    def __init__(self, artifact_id: str, expected_hash: str | None, detail: str):
        self.artifact_id = artifact_id
        self.expected_hash = expected_hash
        super().__init__(
            f"artifact '{artifact_id}' (expected sha256 {expected_hash or 'unknown'}): {detail}"
        )


class ConfigError(DeapError):
    def __init__(self, field: str, detail: str):
        self.field = field
        super().__init__(f"invalid config field '{field}': {detail}")
