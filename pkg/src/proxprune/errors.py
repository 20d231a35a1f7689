"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Operands or layer specs whose shapes do not compose."""


class DivergenceError(FloatingPointError):
    """A loss or parameter became non-finite during training."""


class EmptyLayerError(ValueError):
    """A mask removes every row or every column of a layer."""

    def __init__(self, layer_id, message=None):
        self.layer_id = layer_id
        super().__init__(message or f"layer {layer_id!r} lost all rows or all columns")
