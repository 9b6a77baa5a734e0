"""Model configuration: one JSON-serializable dataclass with hard validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

from skiplift.spatial import PartGrouping
from skiplift.temporal import ConfigError, decoder_chain

SPATIAL_MODES = ("adaptive_graph", "mlp", "jointwise_gcn")
TEMPORAL_MODES = ("skipped", "vt_conv", "vt_strided")
COMPLETIONS = ("edge", "expand", "roll")
VARIANTS = ("S", "base", "L")

_VARIANT_ENC_LAYERS = {"S": 3, "base": 4, "L": 8}
_STRIDED_FACTOR = 3  # vt_strided shrinks the sequence 3x per decoder block


def min_decoder_layers(frames: int, interval: int) -> int:
    """Fewest decoder blocks that collapse ``frames`` tokens to one."""
    if interval < 2:
        raise ConfigError("decoder cannot collapse the sequence with interval < 2")
    layers = 0
    n = frames
    while n > 1:
        n = -(-n // interval)
        layers += 1
    return layers


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and loss settings for the pose lifter.

    ``roll_threshold`` of None selects the default: 30 when frames == 243,
    otherwise round(0.12 * frames).
    """

    frames: int = 243
    joints: int = 17
    skip: int = 3
    channels: int = 64
    dim: int = 256
    heads: int = 8
    enc_layers: int = 3
    dec_layers: int = 5
    loss_balance: float = 1.0
    variant: str = "S"
    spatial_mode: str = "adaptive_graph"
    temporal_mode: str = "skipped"
    completion: str = "roll"
    roll_threshold: int | None = None
    pos_embedding: bool = True
    activation: str = "gelu"
    grouping: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    # derived values

    @property
    def effective_roll_threshold(self) -> int:
        if self.roll_threshold is not None:
            return self.roll_threshold
        if self.frames == 243:
            return 30
        return round(0.12 * self.frames)

    def part_grouping(self) -> PartGrouping:
        if self.spatial_mode == "jointwise_gcn":
            return PartGrouping.jointwise(self.joints)
        if self.grouping is not None:
            return PartGrouping.from_lists(self.grouping)
        if self.joints == 17:
            return PartGrouping.default_17()
        raise ConfigError(
            f"no default part grouping for J={self.joints}; set 'grouping'"
        )

    @property
    def center(self) -> int:
        return (self.frames - 1) // 2

    # ------------------------------------------------------------------
    # validation

    def validate(self) -> None:
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.joints < 1:
            raise ConfigError(f"joints must be >= 1, got {self.joints}")
        if self.skip < 1:
            raise ConfigError(f"skip must be >= 1, got {self.skip}")
        if self.dim % self.heads != 0:
            raise ConfigError(
                f"dim {self.dim} is not divisible by heads {self.heads}"
            )
        if self.loss_balance < 0:
            raise ConfigError("loss_balance must be non-negative")
        for name, value, allowed in (
            ("spatial_mode", self.spatial_mode, SPATIAL_MODES),
            ("temporal_mode", self.temporal_mode, TEMPORAL_MODES),
            ("completion", self.completion, COMPLETIONS),
            ("variant", self.variant, VARIANTS),
            ("activation", self.activation, ("gelu", "relu")),
        ):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")

        if self.temporal_mode == "skipped":
            chain = decoder_chain(self.frames, self.skip, self.dec_layers)
            if chain[-1] != 1:
                raise ConfigError(
                    f"decoder chain {chain} ends at {chain[-1]} tokens, not 1; "
                    f"with skip={self.skip} use dec_layers="
                    f"{min_decoder_layers(self.frames, self.skip) if self.skip > 1 else '>=1 and skip>1'}"
                )
        elif self.temporal_mode == "vt_strided":
            chain = decoder_chain(self.frames, _STRIDED_FACTOR, self.dec_layers)
            if chain[-1] != 1:
                raise ConfigError(
                    f"strided decoder chain {chain} ends at {chain[-1]} tokens, not 1"
                )

        r = self.effective_roll_threshold
        if r < 0:
            raise ConfigError("roll_threshold must be non-negative")
        if self.frames > 1 and not r < (self.frames - 1) / 2:
            raise ConfigError(
                f"roll_threshold {r} must stay below (frames-1)/2 = "
                f"{(self.frames - 1) / 2:g}"
            )

        grouping = self.part_grouping()
        try:
            grouping.validate(self.joints)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.spatial_mode in ("adaptive_graph", "mlp") and grouping.n_parts != 5:
            raise ConfigError(
                f"part-based spatial modes need exactly 5 parts, got {grouping.n_parts}"
            )

    # ------------------------------------------------------------------
    # presets and serialization

    @classmethod
    def preset(cls, variant: str = "S", frames: int = 243, **overrides) -> "ModelConfig":
        """Named variants: encoder depth per variant, decoder depth from frames."""
        if variant not in _VARIANT_ENC_LAYERS:
            raise ConfigError(f"unknown variant {variant!r}")
        skip = overrides.pop("skip", 3)
        return cls(
            frames=frames,
            skip=skip,
            enc_layers=_VARIANT_ENC_LAYERS[variant],
            dec_layers=min_decoder_layers(frames, skip) if frames > 1 else 0,
            variant=variant,
            **overrides,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grouping"] = None if self.grouping is None else self.part_grouping().to_lists()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config field '{key}'")
        data = dict(data)
        if data.get("grouping") is not None:
            data["grouping"] = tuple(tuple(int(j) for j in p) for p in data["grouping"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    def with_overrides(self, **kw) -> "ModelConfig":
        return replace(self, **kw)
