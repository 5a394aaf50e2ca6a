"""Concealer (perturbation generator) and localizer networks.

Both networks share one U-Net style vocabulary: configurable conv blocks,
max-pool downsampling, bilinear-upscale + 3x3 conv upsampling and a chain of
dilated 3x3 convolutions linking encoder to decoder. Tensors are NCHW.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

BLOCK_KINDS = ("vgg", "res", "mobile")
CHECKPOINT_FORMAT = "antiforensics-checkpoint"
CHECKPOINT_VERSION = 1
HEAD_INIT_GAIN = 0.01


class ShapeError(ValueError):
    pass


def conv3x3(cin, cout, dilation=1):
    return nn.Conv2d(cin, cout, 3, padding=dilation, dilation=dilation)


class VGGBlock(nn.Module):
    """Three stacked 3x3 convolutions, each followed by ReLU."""

    def __init__(self, cin, cout):
        super().__init__()
        self.convs = nn.ModuleList([conv3x3(cin, cout), conv3x3(cout, cout), conv3x3(cout, cout)])

    def forward(self, x):
        for conv in self.convs:
            x = F.relu(conv(x))
        return x


class ResBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = conv3x3(cin, cout)
        self.conv2 = conv3x3(cout, cout)
        self.shortcut = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        return F.relu(y + self.shortcut(x))


class MobileBlock(nn.Module):
    """Pointwise expansion (x4), depthwise 3x3, pointwise projection."""

    expansion = 4

    def __init__(self, cin, cout):
        super().__init__()
        hidden = cin * self.expansion
        self.expand = nn.Conv2d(cin, hidden, 1)
        self.depthwise = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.project = nn.Conv2d(hidden, cout, 1)

    def forward(self, x):
        x = F.relu(self.expand(x))
        x = F.relu(self.depthwise(x))
        return F.relu(self.project(x))


def make_block(kind, cin, cout):
    try:
        cls = {"vgg": VGGBlock, "res": ResBlock, "mobile": MobileBlock}[kind]
    except KeyError:
        raise ValueError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}") from None
    return cls(cin, cout)


def vgg_block(x, channels, block=None):
    """Functional form: apply a (fresh or given) VGGBlock to x."""
    block = block or VGGBlock(x.shape[1], channels)
    return block(x)


class DownBlock(nn.Module):
    def __init__(self, kind, cin, cout):
        super().__init__()
        self.block = make_block(kind, cin, cout)

    def forward(self, x):
        """Returns (pooled, pre-pool features); the latter feeds the skip."""
        features = self.block(x)
        return F.max_pool2d(features, 2, 2), features


class UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = conv3x3(cin, cout)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv(x)


class DilatedBridge(nn.Module):
    def __init__(self, channels, rates):
        super().__init__()
        rates = list(rates)
        if not rates or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"dilation rates must be non-empty and strictly increasing: {rates}")
        self.rates = rates
        self.convs = nn.ModuleList([conv3x3(channels, channels, r) for r in rates])

    def forward(self, x):
        for conv in self.convs:
            x = F.relu(conv(x))
        return x


class UNet(nn.Module):
    """Encoder / dilated bridge / decoder with concatenating skips."""

    def __init__(self, in_ch, out_ch, block_kind, depth, base_channels, dilation_rates):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = depth
        widths = [base_channels * 2**i for i in range(depth)]
        self.down = nn.ModuleList()
        cin = in_ch
        for w in widths:
            self.down.append(DownBlock(block_kind, cin, w))
            cin = w
        self.bridge = DilatedBridge(widths[-1], dilation_rates)
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(UpBlock(cin, w))
            self.fuse.append(make_block(block_kind, 2 * w, w))
            cin = w
        self.head = conv3x3(widths[0], out_ch)
        self.reset_parameters()

    def reset_parameters(self):
        # He init keeps activations alive through the ReLU stack (no normalisation layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        nn.init.kaiming_normal_(self.head.weight, nonlinearity="linear")
        self.head.weight.data.mul_(HEAD_INIT_GAIN)

    def check_input(self, x):
        h, w = x.shape[-2:]
        k = 2**self.depth
        if h % k or w % k:
            raise ShapeError(
                f"input {h}x{w} is not divisible by 2**depth={k}; pad or resize the image first"
            )

    def forward(self, x):
        self.check_input(x)
        skips = []
        for down in self.down:
            x, feat = down(x)
            skips.append(feat)
        x = self.bridge(x)
        for up, fuse, skip in zip(self.up, self.fuse, reversed(skips)):
            x = fuse(torch.cat([up(x), skip], dim=1))
        return self.head(x)


@dataclass
class ConcealerConfig:
    block_kind: str = "vgg"
    depth: int = 4
    base_channels: int = 32
    dilation_rates: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    in_channels: int = 3
    out_channels: int = 3
    zero_init_head: bool = False

    def __post_init__(self):
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        r = list(self.dilation_rates)
        if not r or any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError("dilation_rates must be strictly increasing")


class Concealer(nn.Module):
    """Maps a forged image to a signed perturbation map of the same shape.

    The head is linear; nothing bounds the output here.
    """

    def __init__(self, config: ConcealerConfig | None = None):
        super().__init__()
        self.config = config or ConcealerConfig()
        c = self.config
        self.net = UNet(c.in_channels, c.out_channels, c.block_kind, c.depth, c.base_channels, c.dilation_rates)
        if c.zero_init_head:
            nn.init.zeros_(self.net.head.weight)
            nn.init.zeros_(self.net.head.bias)

    def forward(self, image):
        return self.net(image)


def compose_anti_image(image, delta):
    """Anti-forensic image: forged image plus perturbation, clamped to [0, 1]."""
    return torch.clamp(image + delta, 0.0, 1.0)


def concealer_forward(concealer, image):
    return concealer(image)


# --- localizer ----------------------------------------------------------------

HIGH_PASS_KERNELS = torch.tensor(
    [
        [[0.0, 0.0, 0.0], [0.0, -1.0, 1.0], [0.0, 0.0, 0.0]],
        [[0.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 1.0, 0.0]],
        [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]],
    ]
)


class HighPassBank(nn.Module):
    """Fixed per-channel high-pass filters (horizontal / vertical difference,
    Laplacian). Replicate padding keeps a constant image at zero response."""

    def __init__(self, channels=3):
        super().__init__()
        self.channels = channels
        k = HIGH_PASS_KERNELS[:, None].repeat(channels, 1, 1, 1)
        self.register_buffer("weight", k)

    @property
    def out_channels(self):
        return self.channels * HIGH_PASS_KERNELS.shape[0]

    def forward(self, x):
        x = F.pad(x, (1, 1, 1, 1), mode="replicate")
        return F.conv2d(x, self.weight, groups=self.channels)


@dataclass
class LocalizerConfig:
    kind: str = "supervisor_refined"
    high_pass: bool = True
    block_kind: str = "vgg"
    depth: int = 3
    base_channels: int = 16
    dilation_rates: list[int] = field(default_factory=lambda: [2, 4])

    def __post_init__(self):
        if self.kind not in ("supervisor_refined", "small_distill"):
            raise ValueError(f"unknown localizer kind {self.kind!r}")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}")

    @classmethod
    def small(cls, **overrides):
        """Compact surrogate used for black-box distillation."""
        kw = dict(kind="small_distill", depth=2, base_channels=8, dilation_rates=[2])
        kw.update(overrides)
        return cls(**kw)


class Localizer(nn.Module):
    """Forgery localizer: high-pass front end + U-Net + sigmoid."""

    gradient_access = True

    def __init__(self, config: LocalizerConfig | None = None):
        super().__init__()
        self.config = config or LocalizerConfig()
        c = self.config
        self.high_pass = HighPassBank(3) if c.high_pass else None
        in_ch = 3 + (self.high_pass.out_channels if self.high_pass is not None else 0)
        self.net = UNet(in_ch, 1, c.block_kind, c.depth, c.base_channels, c.dilation_rates)

    def logits(self, image):
        x = image
        if self.high_pass is not None:
            x = torch.cat([image, self.high_pass(image)], dim=1)
        return self.net(x)

    def forward(self, image):
        return torch.sigmoid(self.logits(image))


def localizer_forward(localizer, image):
    return localizer(image)


class ForwardOnly:
    """Query-only view of a localizer for black-box settings.

    Returns detached probabilities and never exposes parameters or the
    autograd graph.
    """

    gradient_access = False

    def __init__(self, model: nn.Module):
        self.__model = model

    def __call__(self, image):
        with torch.no_grad():
            was_training = self.__model.training
            self.__model.eval()
            try:
                return self.__model(image.detach()).detach()
            finally:
                self.__model.train(was_training)


# --- helpers ------------------------------------------------------------------


def count_parameters(model: nn.Module, trainable_only=False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def conv_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for m in model.modules() if isinstance(m, nn.Conv2d) for p in m.parameters())


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def set_requires_grad(model: nn.Module, flag: bool) -> None:
    for p in model.parameters():
        p.requires_grad_(flag)


def save_checkpoint(model, path, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = "concealer" if isinstance(model, Concealer) else "localizer"
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an antiforensics checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_model(path, expect_kind=None, expect_config=None):
    """Rebuild a network from a checkpoint, validating its kind and config."""
    payload = read_checkpoint(path)
    kind = payload["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"{path}: expected a {expect_kind} checkpoint, found {kind}")
    if expect_config is not None and asdict(expect_config) != payload["config"]:
        raise ValueError(f"{path}: checkpoint config {payload['config']} does not match {asdict(expect_config)}")
    if kind == "concealer":
        model = Concealer(ConcealerConfig(**payload["config"]))
    else:
        model = Localizer(LocalizerConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
