"""Pipeline configuration and the plain-text ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ContractViolation, DataError

VARIANTS = ("classic_dhm", "fast_dhm")
ABLATIONS = ("none", "no_heatmap_2d_rnn", "no_recurrence_3d_cnn")

# Adam defaults and schedules from the training recipe; see LearningRateSchedule.
CLASSIC_LR = 0.001
FAST_LR = 0.005
FAST_RESET_LR = 1e-5


@dataclass
class PipelineConfig:
    variant: str = "fast_dhm"
    image_size: int = 64
    landmarks: int = 68
    k_id: int = 8
    k_exp: int = 4
    model_seed: int = 1
    steps: int = 4
    sigma: float = 1.0
    face_fill: float = 0.6

    # fast CNN: stride-2 stem, then depthwise-separable blocks
    width_multiplier: int = 1
    stem_channels: int = 8
    cnn_block_count: int = 5
    strided_blocks: tuple[int, ...] = (1, 3, 5)
    recurrent_kernel: int = 3

    # classic CNN (plain conv + pool stack) and vanilla RNN
    classic_channels: tuple[int, ...] = (16, 32, 64, 64)
    hidden_dim: int = 128
    use_next_hidden: bool = False
    heatmap_grad: bool = False
    ablation: str = "none"

    # optimisation
    epochs: int = 120
    batch_size: int = 16
    lr: float | None = None
    lr_decay: float = 0.95
    lr_decay_every: int = 2000
    lr_reset_fraction: float | None = 0.5
    lr_reset_value: float = FAST_RESET_LR
    stage_loss_weight: float = 0.0
    grad_clip: float | None = None
    param_scale: dict = field(default_factory=lambda: {
        "scale": 0.1, "pitch": 0.35, "yaw": 0.9, "roll": 0.35, "translation": 0.08, "coef": 1.0})

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.ablation not in ABLATIONS:
            raise ContractViolation(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.ablation != "none" and self.variant != "classic_dhm":
            raise ContractViolation("ablations apply to the classic_dhm variant only")
        if self.steps < 1 or self.epochs < 0 or self.batch_size < 1 or self.width_multiplier < 1:
            raise ContractViolation("steps, batch_size, width_multiplier must be >= 1 and epochs >= 0")
        factor = self.downsampling_factor
        if self.image_size % factor:
            raise ContractViolation(
                f"image_size {self.image_size} not divisible by CNN downsampling factor {factor}")

    @property
    def downsampling_factor(self) -> int:
        if self.variant == "fast_dhm":
            strided = sum(1 for b in self.strided_blocks if 1 <= b <= self.cnn_block_count)
            return 2 ** (1 + strided)
        return 2 ** len(self.classic_channels)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.image_size, self.image_size

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return FAST_LR if self.variant == "fast_dhm" else CLASSIC_LR

    def schedule_kwargs(self) -> dict:
        """Classic: exponential step decay. Fast: constant, then a reset after a fraction of epochs."""
        if self.variant == "fast_dhm":
            reset = None
            # a zero base rate means "no updates at all", so it also skips the reset
            if self.lr_reset_fraction is not None and self.learning_rate > 0:
                reset = int(round(self.epochs * self.lr_reset_fraction))
            return {"base_lr": self.learning_rate, "reset_epoch": reset, "reset_lr": self.lr_reset_value}
        return {"base_lr": self.learning_rate, "decay": self.lr_decay, "decay_every": self.lr_decay_every}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["strided_blocks"] = list(self.strided_blocks)
        d["classic_channels"] = list(self.classic_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("strided_blocks", "classic_channels"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        return cls(**d)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    if "," in text:
        return [_coerce(t.strip()) for t in text.split(",") if t.strip()]
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text.strip("\"'")


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, commas make lists."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = _coerce(value)
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        return parse_config_text(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
