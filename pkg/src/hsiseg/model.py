"""The full segmentation network.

A truncated VGG-style backbone keeps the feature map at stride 4 (pools only
after the first two stages), a 3x3 convolution reduces the width to the
context channel count, the dual context module enriches the map, and 3x3
classifier heads plus x4 bilinear upsampling produce dense logits. An
auxiliary head reads the stage-3 feature. The loss is softmax cross entropy
over labeled pixels with the auxiliary term weighted 0.4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .dcm import DualContextModule
from .errors import ConfigError, ContractError
from .formats import LabelMap
from .nn import uniform_init

DESK_WIDTHS = (16, 32, 64, 64)
FULL_WIDTHS = (64, 128, 256, 512)


@dataclass
class BackboneConfig:
    widths: tuple = DESK_WIDTHS
    convs_per_stage: tuple = (2, 2, 3, 3)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.convs_per_stage = tuple(int(c) for c in self.convs_per_stage)
        if len(self.widths) != 4 or len(self.convs_per_stage) != 4:
            raise ConfigError("backbone needs exactly four stages")
        if min(self.widths) < 1 or min(self.convs_per_stage) < 1:
            raise ConfigError("backbone widths and depths must be positive")

    @classmethod
    def full_scale(cls):
        return cls(widths=FULL_WIDTHS)


class Conv3x3:
    def __init__(self, in_ch, out_ch, rng, dtype, group, name):
        fan_in = in_ch * 9
        self.weight = Parameter(uniform_init(rng, (out_ch, in_ch, 3, 3), fan_in, dtype),
                                group=group, name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch, dtype), group=group, name=f"{name}.bias")

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=1, pad=1)

    def parameters(self):
        return [self.weight, self.bias]


class Backbone:
    """Four conv-relu stages at widths[i]; 2x2 max pools after stages 1 and 2."""

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32, in_channels=3):
        self.cfg = cfg
        self.stages = []
        prev = in_channels
        for si, (width, depth) in enumerate(zip(cfg.widths, cfg.convs_per_stage)):
            stage = []
            for ci in range(depth):
                stage.append(Conv3x3(prev, width, rng, dtype, "backbone",
                                     f"backbone.stage{si + 1}.conv{ci}"))
                prev = width
            self.stages.append(stage)

    def forward(self, x):
        """Returns (stage3 feature, stage4 feature), both at stride 4."""
        h = x
        stage3 = None
        for si, stage in enumerate(self.stages):
            for conv in stage:
                h = ad.relu(conv(h))
            if si < 2:
                h = ad.maxpool2d(h, 2)
            if si == 2:
                stage3 = h
        return stage3, h

    def parameters(self):
        return [p for stage in self.stages for conv in stage for p in conv.parameters()]


class DualContextNet:
    """Backbone + reduction conv + dual context module + classifier heads."""

    def __init__(self, num_classes, backbone=None, channels=32, num_areas=16,
                 iterations=5, heads=2, mlp_ratio=2, use_input=True,
                 use_regional=True, use_global=True, activation="relu",
                 input_mean=0.5, input_std=0.25, seed=0, dtype=np.float32):
        if num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {num_classes}")
        rng = np.random.default_rng(seed)
        cfg = backbone if backbone is not None else BackboneConfig()
        self.num_classes = num_classes
        self.channels = channels
        self.input_mean = float(input_mean)
        self.input_std = float(input_std)
        self.dtype = np.dtype(dtype)
        self.backbone_cfg = cfg
        self.backbone = Backbone(cfg, rng, self.dtype)
        self.reduce = Conv3x3(cfg.widths[3], channels, rng, self.dtype, "head", "reduce")
        self.context = DualContextModule(
            channels, num_areas, iterations=iterations, heads=heads,
            mlp_ratio=mlp_ratio, use_input=use_input, use_regional=use_regional,
            use_global=use_global, activation=activation, rng=rng, dtype=self.dtype)
        self.head = Conv3x3(self.context.out_channels, num_classes, rng, self.dtype,
                            "head", "head")
        self.aux_head = Conv3x3(cfg.widths[2], num_classes, rng, self.dtype,
                                "head", "aux_head")

    # -- parameter plumbing ----------------------------------------------------

    def parameters(self):
        return (self.backbone.parameters() + self.reduce.parameters()
                + self.context.parameters() + self.head.parameters()
                + self.aux_head.parameters())

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def zero_context_projections(self):
        self.context.zero_output_projections()

    # -- forward passes -----------------------------------------------------------

    def prepare_input(self, image):
        """uint8 (3, H, W) -> normalized real tensor, reflect-padded to stride 4."""
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ContractError(f"expected a (3, H, W) image, got {img.shape}")
        _, h, w = img.shape
        if h < 8 or w < 8:
            raise ContractError(f"image {h}x{w} is too small (needs >= 8)")
        x = (img.astype(self.dtype) / 255.0 - self.input_mean) / self.input_std
        ph, pw = (-h) % 4, (-w) % 4
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect")
        return Tensor(x), (h, w)

    def forward_from_tensor(self, x):
        """Run the padded, normalized (3, H', W') tensor through the network."""
        stage3, stage4 = self.backbone.forward(x)
        features = self.reduce(stage4)
        enriched, areas = self.context(features)
        main = ad.bilinear_upsample(self.head(enriched), 4)
        aux = ad.bilinear_upsample(self.aux_head(stage3), 4)
        return main, aux, areas

    def forward(self, image):
        """uint8 image -> (main logits, aux logits), each (num_classes, H, W)."""
        x, (h, w) = self.prepare_input(image)
        main, aux, _ = self.forward_from_tensor(x)
        if main.shape[1:] != (h, w):
            main = ad.crop2d(main, h, w)
            aux = ad.crop2d(aux, h, w)
        return main, aux

    def features(self, image):
        """The reduced stride-4 feature map the context module clusters on."""
        x, _ = self.prepare_input(image)
        stage3, stage4 = self.backbone.forward(x)
        return self.reduce(stage4)

    # -- loss and prediction ----------------------------------------------------------

    def loss(self, main_logits, aux_logits, labels):
        """Cross entropy over labeled pixels only: main + 0.4 * auxiliary."""
        lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
        if lab.shape != main_logits.shape[1:]:
            raise ContractError(
                f"labels {lab.shape} do not match logits {main_logits.shape[1:]}")
        flat = lab.reshape(-1).astype(np.int64)
        labeled = np.nonzero(flat)[0]
        if labeled.size == 0:
            raise ContractError("loss needs at least one labeled pixel")
        onehot = np.zeros((labeled.size, self.num_classes), dtype=main_logits.dtype)
        onehot[np.arange(labeled.size), flat[labeled] - 1] = 1.0
        onehot = Tensor(onehot)

        def masked_ce(logits):
            c = logits.shape[0]
            tokens = ad.transpose(ad.reshape(logits, (c, -1)))
            picked = ad.gather_rows(ad.log_softmax(tokens, axis=-1), labeled)
            return (picked * onehot).sum() * (-1.0 / labeled.size)

        return masked_ce(main_logits) + 0.4 * masked_ce(aux_logits)

    def loss_on(self, image, labels):
        main, aux = self.forward(image)
        return self.loss(main, aux, labels)

    def predict_probabilities(self, image):
        """Softmax of the main logits as a float32 (num_classes, H, W) array."""
        with ad.no_grad():
            main, _ = self.forward(image)
            probs = ad.softmax(main, axis=0)
        return probs.data.astype(np.float32)

    # -- persistence -------------------------------------------------------------------

    def config_dict(self):
        ctx = self.context
        return {
            "model.classes": str(self.num_classes),
            "backbone.widths": ",".join(str(w) for w in self.backbone_cfg.widths),
            "backbone.convs": ",".join(str(c) for c in self.backbone_cfg.convs_per_stage),
            "dcm.C": str(self.channels),
            "dcm.Z": str(ctx.num_areas),
            "dcm.T": str(ctx.iterations),
            "dcm.heads": str(ctx.attn_cfg.heads),
            "dcm.mlp_ratio": str(ctx.attn_cfg.mlp_ratio),
            "dcm.activation": ctx.attn_cfg.activation,
            "dcm.use_F": "true" if ctx.use_input else "false",
            "dcm.use_RAC": "true" if ctx.use_regional else "false",
            "dcm.use_GAC": "true" if ctx.use_global else "false",
            "model.input_mean": repr(self.input_mean),
            "model.input_std": repr(self.input_std),
        }

    def save(self, path):
        ad.save_checkpoint(self.named_parameters(), path)

    def load(self, path, strict=True):
        """Load parameters by name. ``strict=False`` fills whatever names the
        file provides (e.g. an externally converted backbone) and returns the
        names that stayed at their initialization."""
        loaded = ad.load_checkpoint(path)
        missing = []
        for name, p in self.named_parameters():
            if name not in loaded:
                if strict:
                    raise ContractError(f"checkpoint is missing parameter {name}")
                missing.append(name)
                continue
            arr = loaded[name]
            if arr.shape != p.data.shape:
                raise ContractError(
                    f"checkpoint parameter {name} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(self.dtype)
        return missing
