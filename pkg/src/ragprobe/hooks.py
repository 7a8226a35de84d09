"""Named hook sites inside the transformer forward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

SITES = ("embedding", "residual_pre", "attn_out", "mlp_out", "residual_post", "attn_scores")

Position = Union[int, Tuple[int, int], None]


@dataclass(frozen=True)
class HookSite:
    """Address of one activation slice.

    ``position`` is a token index, a half-open ``(start, end)`` span, or
    ``None`` for every position. The ``embedding`` site lives at layer 0.
    For ``attn_scores`` the position selects query rows.
    """

    layer: int
    site: str
    position: Position = None

    def __post_init__(self):
        if self.site not in SITES:
            raise ValueError(f"unknown hook site {self.site!r}; expected one of {SITES}")
        if self.layer < 0:
            raise ValueError(f"negative layer {self.layer}")
        if self.site == "embedding" and self.layer != 0:
            raise ValueError("embedding site is addressed as layer 0")
        pos = self.position
        if isinstance(pos, tuple):
            if len(pos) != 2 or pos[0] < 0 or pos[1] < pos[0]:
                raise ValueError(f"bad position span {pos}")
        elif pos is not None and pos < 0:
            raise ValueError(f"negative position {pos}")

    def indices(self, seq_len: int) -> Tuple[int, ...]:
        """Token indices addressed by this site for a sequence of ``seq_len``."""
        pos = self.position
        if pos is None:
            return tuple(range(seq_len))
        if isinstance(pos, tuple):
            return tuple(range(pos[0], pos[1]))
        return (pos,)

    def selector(self, seq_len: int):
        """Index usable on an activation array whose first axis is position."""
        pos = self.position
        if pos is None:
            return slice(0, seq_len)
        if isinstance(pos, tuple):
            return slice(pos[0], pos[1])
        return pos

    def max_position(self) -> Optional[int]:
        pos = self.position
        if pos is None:
            return None
        if isinstance(pos, tuple):
            return pos[1] - 1 if pos[1] > pos[0] else None
        return pos

    def to_dict(self) -> dict:
        pos = list(self.position) if isinstance(self.position, tuple) else self.position
        return {"layer": self.layer, "site": self.site, "position": pos}

    @classmethod
    def from_dict(cls, d: dict) -> "HookSite":
        pos = d.get("position")
        if isinstance(pos, list):
            pos = (int(pos[0]), int(pos[1]))
        return cls(int(d["layer"]), d["site"], pos)
