"""
Error types shared across the engine.

Validation problems are ValueErrors (CLI exit code 2); numerical and
training-contract problems are RuntimeErrors (CLI exit code 3).
"""


class ConfigError(ValueError):
    """Bad run-config file or values"""


class CheckpointError(ValueError):
    """Unreadable checkpoint, wrong stage tag, or tensor mismatch while loading"""


class NumericalError(RuntimeError):
    """Non-finite activation; the message names the layer that produced it"""

    def __init__(self, layer: str, detail: str = "non-finite values"):
        self.layer = layer
        super().__init__(f"{detail} in layer '{layer}'")


class FreezeViolation(RuntimeError):
    """Stage contract broken: frozen parameters drifted or received gradient"""
