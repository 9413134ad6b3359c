"""Shared exception roots."""


class MasforgeError(Exception):
    """Base class for all engine errors."""


class UnknownBackbone(MasforgeError, KeyError):
    """A backbone id is not present in the active catalog."""

    def __init__(self, backbone_id: str):
        super().__init__(backbone_id)
        self.backbone_id = backbone_id

    def __str__(self) -> str:
        return f"unknown backbone {self.backbone_id!r}"
