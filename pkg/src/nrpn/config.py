"""Configuration dataclasses and their JSON round trip."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

ABLATIONS = {
    "rpn-only": dict(use_nrpn=False, use_overlap_loss=False),
    "rpn+nrpn": dict(use_nrpn=True, use_overlap_loss=False),
    "rpn+nrpn+overlap-loss": dict(use_nrpn=True, use_overlap_loss=True),
}

MODEL_NAMES = {
    "rpn-only": "RPN",
    "rpn+nrpn": "RPN+nRPN",
    "rpn+nrpn+overlap-loss": "RPN+nRPN+Lov",
}


class ConfigError(ValueError):
    pass


def ablation_name(cfg) -> str:
    """Ablation whose flags ``cfg`` carries, or ``"custom"``."""
    for name, flags in ABLATIONS.items():
        if all(getattr(cfg, k) == v for k, v in flags.items()):
            return name
    return "custom"


def model_name(cfg) -> str:
    return MODEL_NAMES.get(ablation_name(cfg), "custom")


@dataclass
class LabelConfig:
    fg_iou: float = 0.7
    neg_iou: float = 0.3
    fp_score: float = 0.7
    num_neg: int = 128
    # share of the RPN negatives taken from nRPN proposals during co-training
    hard_neg_fraction: float = 0.5
    # cap on nRPN positives per image (highest-scoring false positives first)
    max_fp: int = 128

    def validate(self):
        for name in ("fg_iou", "neg_iou", "fp_score"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"labels.{name} must lie in (0, 1), got {v}")
        if self.neg_iou > self.fg_iou:
            raise ConfigError("labels.neg_iou must not exceed labels.fg_iou")
        if self.num_neg < 0 or self.max_fp < 0:
            raise ConfigError("labels.num_neg and labels.max_fp must be non-negative")
        if not 0.0 <= self.hard_neg_fraction <= 1.0:
            raise ConfigError("labels.hard_neg_fraction must lie in [0, 1]")


@dataclass
class LossConfig:
    lambda_balance: float = 1.0
    eps_clamp: float = 1e-7
    n_cls_mode: str = "count"
    n_reg_mode: str = "count"
    # take the negative branch of the overlap loss as printed: -ln(p)
    literal_negative: bool = False

    def validate(self):
        if self.lambda_balance < 0:
            raise ConfigError("loss.lambda_balance must be >= 0")
        if not 0.0 < self.eps_clamp < 0.5:
            raise ConfigError("loss.eps_clamp must lie in (0, 0.5)")
        for name in ("n_cls_mode", "n_reg_mode"):
            if getattr(self, name) not in ("count", "none"):
                raise ConfigError(f"loss.{name} must be 'count' or 'none'")


@dataclass
class AnchorConfig:
    stride: int = 8
    scales: list = field(default_factory=lambda: [16.0, 32.0, 64.0, 128.0])
    ratios: list = field(default_factory=lambda: [0.5, 1.0, 2.0])

    def validate(self):
        if self.stride <= 0 or not self.scales or not self.ratios:
            raise ConfigError("anchors need a positive stride and non-empty scales/ratios")
        if min(self.scales) <= 0 or min(self.ratios) <= 0:
            raise ConfigError("anchor scales and ratios must be positive")

    @property
    def num_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass
class NetConfig:
    in_channels: int = 1
    channels: list = field(default_factory=lambda: [16, 32, 32])
    kernels: list = field(default_factory=lambda: [3, 3, 3])
    head_channels: int = 32
    head_kernel: int = 3

    def validate(self):
        if len(self.channels) != len(self.kernels) or not self.channels:
            raise ConfigError("net.channels and net.kernels must be non-empty and of equal length")
        if self.head_kernel % 2 == 0 or any(k % 2 == 0 for k in self.kernels):
            raise ConfigError("kernel sizes must be odd")

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)


@dataclass
class TrainConfig:
    warmup_epochs: int = 2
    total_epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    use_nrpn: bool = True
    use_overlap_loss: bool = True
    # whether the warm-up epochs already use the overlap loss (when enabled)
    overlap_in_warmup: bool = True
    nms_iou: float = 0.7
    labels: LabelConfig = field(default_factory=LabelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    net: NetConfig = field(default_factory=NetConfig)

    def validate(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("train requires 0 <= warmup_epochs < total_epochs")
        if self.lr <= 0 or self.momentum < 0:
            raise ConfigError("lr must be positive and momentum non-negative")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError("nms_iou must lie in (0, 1]")
        self.labels.validate()
        self.loss.validate()
        self.anchors.validate()
        self.net.validate()
        if self.anchors.stride != self.net.stride:
            raise ConfigError(
                f"anchor stride {self.anchors.stride} does not match backbone stride {self.net.stride}"
            )
        return self

    def with_ablation(self, name: str) -> "TrainConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        d = self.to_dict()
        d.update(ABLATIONS[name])
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"labels": LabelConfig, "loss": LossConfig, "anchors": AnchorConfig, "net": NetConfig}
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d.pop(f.name)
            if f.name in nested:
                v = _build(nested[f.name], v, f.name)
            kwargs[f.name] = v
        if d:
            raise ConfigError(f"unknown train config keys: {sorted(d)}")
        return cls(**kwargs)


def _build(klass, d, prefix):
    names = {f.name for f in fields(klass)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {prefix} config keys: {sorted(unknown)}")
    return klass(**d)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


@dataclass
class RunConfig:
    """Everything a CLI run needs: training config plus data/output locations."""

    train: TrainConfig = field(default_factory=TrainConfig)
    train_data: str = ""
    test_data: str = ""
    out: str = "runs"
    ablation: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d.pop("provenance", None)  # written alongside saved configs, not an input
        train = TrainConfig.from_dict(d.pop("train", {}))
        unknown = set(d) - {"train_data", "test_data", "out", "ablation"}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(train=train, **d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(d)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())
