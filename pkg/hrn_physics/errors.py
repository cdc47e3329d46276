class HrnError(Exception):
    """Base class for all errors raised by hrn_physics."""


class InvalidArgumentError(HrnError, ValueError):
    pass


class InvalidStateError(HrnError, RuntimeError):
    pass


class DivergenceError(InvalidStateError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


class RolloutError(InvalidStateError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at rollout step {step}")
        self.step = step


class TrajectoryFormatError(HrnError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(HrnError, ValueError):
    def __init__(self, message: str, key_path: str = ""):
        label = f"{key_path}: " if key_path else ""
        super().__init__(f"{label}{message}")
        self.key_path = key_path
