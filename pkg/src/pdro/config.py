"""Training configuration shared by all methods."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

METHODS = ("erm", "pdro_bare", "pdro_kl", "pdro_relaxed", "nonparam", "groupdro", "groupdro_soft")
PDRO_VARIANTS = {"pdro_bare": "bare", "pdro_kl": "kl_projected", "pdro_relaxed": "relaxed"}


@dataclass(frozen=True)
class TrainConfig:
    method: str = "erm"
    seed: int = 0
    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 64
    optimizer: str = "sgd"
    # P-DRO
    tau: float = 0.01
    k: int = 5
    adv_lr: float = 1e-4
    kappa: float = 1.0  # KL radius: projection ball (pdro_kl) or NonParam ball
    n_samples: int = 0  # bare/kl variants; 0 means "batch size"
    clip_weights: float = 0.0  # 0 disables clipping of importance weights
    adv_family: str = ""  # "" picks gaussian for toy data, bigram for sequences
    # Group-DRO
    eta: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not (self.tau > 0 and self.k >= 1 and self.adv_lr >= 0):
            raise ValueError("tau and k must be positive and adv_lr non-negative")
        if not (self.lr > 0 and self.epochs >= 0 and self.batch_size >= 1):
            raise ValueError("lr, epochs and batch_size must be positive")
        if self.kappa <= 0 or self.eta < 0 or self.clip_weights < 0:
            raise ValueError("kappa must be positive, eta and clip_weights non-negative")

    @property
    def variant(self) -> str | None:
        return PDRO_VARIANTS.get(self.method)

    def as_dict(self) -> dict:
        return asdict(self)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in types:
                continue
            t = types[k]
            kw[k] = v if t == "str" else (int(v) if t == "int" else float(v))
        return cls(**kw)
