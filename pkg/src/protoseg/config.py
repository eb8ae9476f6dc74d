"""Model configuration (JSON-serializable)."""

import dataclasses
import hashlib
import json

VARIANTS = ("pemca", "pemca_no_mask", "pemca_no_proto", "masked_ca", "plain_ca")


@dataclasses.dataclass
class ModelConfig:
    stages: int = 2
    num_queries: int = 100
    C: int = 256
    D: int | None = None           # projected width; defaults to C
    heads: int = 8
    ffn_expansion: int = 8
    C_px: int = 128
    variant: str = "pemca"
    num_classes: int = 3           # real classes; "no object" is added on top
    seed: int = 0
    confidence_threshold: float = 0.8
    overlap_threshold: float = 0.8
    backbone_widths: tuple = (32, 64, 128, 256)
    csm_bottleneck: int = 4        # CSM MLP hidden width = C_px // bottleneck
    upsampling: str = "bilinear"
    pixel_norm: str = "channel"    # "channel" or "none"
    cls_loss: str = "bce"          # "bce" (per-class BCE) or "softmax"
    no_object_weight: float = 1.0
    supervise_bootstrap: bool = True
    zero_init_out: bool = False    # zero-init the attention output projection
    thing_classes: tuple = ()      # class ids treated as "things" in panoptic readout
    loss_weight_cls: float = 2.0
    loss_weight_bce: float = 5.0
    loss_weight_dice: float = 5.0

    def __post_init__(self):
        if self.D is None:
            self.D = self.C
        self.backbone_widths = tuple(self.backbone_widths)
        self.thing_classes = tuple(self.thing_classes)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.D % self.heads != 0:
            raise ValueError("D must be divisible by heads")
        if self.heads < 1 or self.C <= 0 or self.D <= 0:
            raise ValueError("invalid attention dimensions")
        if self.num_queries < 1:
            raise ValueError("need at least one query")

    @property
    def num_layers(self):
        return 3 * self.stages

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    def digest(self):
        """Short stable hash, recorded in benchmark reports."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]
