"""Generator, discriminator, segmentation, and feature-extractor networks.

All architectures are parameterized by the square image size. Channel
widths are the reference values at size 256 and scale proportionally at
other sizes (floor 4), so the same code trains at desk scale (64) on CPU
and at full scale (256). Spatial strides are size-independent.

Blocks follow the CIR / RES / UP / AVG legend: CIR is convolution +
instance normalization + ReLU, RES is a residual pair of CIR(3,1)
convolutions with an identity skip, UP is nearest upsampling, AVG is
global average pooling.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .core_data import CLIP_HI, CLIP_LO
from .errors import BackboneUnavailable, IOFailure, UntrainedModel

REFERENCE_SIZE = 256
KINDS = ("g_binary", "g_grade", "g_inpaint", "d_inpaint", "unet_seg", "feature_extractor")

# exclusive segmentation labels; WT/TC/ET regions are derived from these
SEG_LABELS = ("background", "non_tumor", "edema", "enhancing", "necrotic")

_CKPT_MAGIC = b"TFCK\x01\x00"


def _scaled(channels: int, size: int) -> int:
    if size == REFERENCE_SIZE:
        return channels
    return max(4, (channels * size) // REFERENCE_SIZE)


def _clamp_ste(x: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    """Clamp with a straight-through gradient.

    A hard clamp zeroes the gradient of any pixel pushed past the bound,
    permanently freezing it during L1 training; passing the gradient
    through keeps such pixels recoverable while the forward value stays
    exactly within [lo, hi].
    """
    return x + (x.clamp(lo, hi) - x).detach()


def _check_size(size: int) -> None:
    if size < 16 or size & (size - 1) != 0:
        raise ValueError(f"image size must be a power of two >= 16, got {size}")


def _cir(cin: int, cout: int, kernel: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        self.body = nn.Sequential(_cir(channels, channels, kernel), _cir(channels, channels, kernel))

    def forward(self, x):
        return x + self.body(x)


def _conv_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class MaskUNet(nn.Module):
    """Encoder-decoder with skip connections (sigmoid head).

    Conv + BatchNorm + ReLU blocks: batch statistics keep the L1-on-sigmoid
    objective trainable (per-pixel L1 with heavy class imbalance collapses
    an unnormalized net into dead saturation), while in eval mode the
    normalization is a fixed per-channel affine, so the network stays
    exactly translation-equivariant away from the borders. Depth grows
    with image size: 3 levels at 64, 4 at 256.
    """

    def __init__(self, size: int, in_channels: int, out_channels: int, final: str = "sigmoid"):
        super().__init__()
        levels = max(3, int(np.log2(size)) - 4)
        base = max(8, (32 * size) // REFERENCE_SIZE)
        self.final = final
        chans = [base * 2**i for i in range(levels)]

        self.enc = nn.ModuleList()
        cin = in_channels
        for c in chans:
            self.enc.append(nn.Sequential(_conv_relu(cin, c), _conv_relu(c, c)))
            cin = c
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = nn.Sequential(
            _conv_relu(chans[-1], chans[-1] * 2), _conv_relu(chans[-1] * 2, chans[-1] * 2)
        )
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.dec = nn.ModuleList()
        self.squeeze = nn.ModuleList()
        cin = chans[-1] * 2
        for c in reversed(chans):
            self.squeeze.append(_conv_relu(cin, c))
            self.dec.append(nn.Sequential(_conv_relu(2 * c, c), _conv_relu(c, c)))
            cin = c
        self.head = nn.Conv2d(chans[0], out_channels, 1)

    def forward(self, x, pre_activation: bool = False):
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for squeeze, block, skip in zip(self.squeeze, self.dec, reversed(skips)):
            x = squeeze(self.up(x))
            x = block(torch.cat([x, skip], dim=1))
        logits = self.head(x)
        if pre_activation:
            return logits
        if self.final == "sigmoid":
            return torch.sigmoid(logits)
        if self.final == "softmax":
            return torch.softmax(logits, dim=1)
        return logits


class InpaintGenerator(nn.Module):
    """Two encoders (masked image, grade mask) and four per-contrast decoders.

    At size 256 the feature shapes match the reference stack exactly:
    image encoder 32x128x128 -> 128x64x64 with three residual blocks,
    mask encoder 4x128x128 -> 16x64x64, concatenated 144x64x64, and each
    decoder branch 256 -> 128 -> 64 -> 1 with two nearest upsamplings.
    The output head is a linear 7x7 convolution clipped to [-0.5, 5].
    """

    def __init__(self, size: int):
        super().__init__()
        e1, e2 = _scaled(32, size), _scaled(128, size)
        m1, m2 = _scaled(4, size), _scaled(16, size)
        d1, d2, d3 = _scaled(256, size), _scaled(128, size), _scaled(64, size)
        self.img_down1 = _cir(5, e1, 3, stride=2)
        self.img_down2 = _cir(e1, e2, 3, stride=2)
        self.img_res = nn.Sequential(*[ResidualBlock(e2) for _ in range(3)])
        self.mask_down1 = _cir(1, m1, 3, stride=2)
        self.mask_down2 = _cir(m1, m2, 3, stride=2)
        self.branches = nn.ModuleList(
            nn.Sequential(
                _cir(e2 + m2, d1, 3),
                ResidualBlock(d1),
                ResidualBlock(d1),
                ResidualBlock(d1),
                nn.Upsample(scale_factor=2, mode="nearest"),
                _cir(d1, d2, 3),
                nn.Upsample(scale_factor=2, mode="nearest"),
                _cir(d2, d3, 3),
                nn.Conv2d(d3, 1, 7, padding=3),
            )
            for _ in range(4)
        )

    def encode(self, masked_and_grade, grade):
        z = self.img_down2(self.img_down1(masked_and_grade))
        z = self.img_res(z)
        m = self.mask_down2(self.mask_down1(grade))
        return torch.cat([z, m], dim=1)

    def forward(self, masked_and_grade, grade):
        f = self.encode(masked_and_grade, grade)
        outs = [branch(f) for branch in self.branches]
        return _clamp_ste(torch.cat(outs, dim=1), CLIP_LO, CLIP_HI)

    def intermediates(self, masked_and_grade, grade) -> dict[str, tuple[int, ...]]:
        """Per-stage output shapes (channels, height, width) for conformance checks."""
        shapes: dict[str, tuple[int, ...]] = {}
        z1 = self.img_down1(masked_and_grade)
        shapes["img_enc1"] = tuple(z1.shape[1:])
        z2 = self.img_down2(z1)
        shapes["img_enc2"] = tuple(z2.shape[1:])
        z = self.img_res(z2)
        shapes["img_res"] = tuple(z.shape[1:])
        m1 = self.mask_down1(grade)
        shapes["mask_enc1"] = tuple(m1.shape[1:])
        m2 = self.mask_down2(m1)
        shapes["mask_enc2"] = tuple(m2.shape[1:])
        f = torch.cat([z, m2], dim=1)
        shapes["concat"] = tuple(f.shape[1:])
        x = f
        for i, stage in enumerate(self.branches[0]):
            x = stage(x)
            shapes[f"branch0_{i}"] = tuple(x.shape[1:])
        shapes["output"] = (4,) + tuple(x.shape[2:])
        return shapes


class InpaintDiscriminator(nn.Module):
    """Conditional discriminator over (4-contrast image, grade mask).

    The final projection to one channel is a plain convolution: a
    rectified logit would pin sigmoid outputs to [0.5, 1) and break the
    adversarial objective's range.
    """

    def __init__(self, size: int):
        super().__init__()
        c1, c2, c3, c4 = _scaled(32, size), _scaled(64, size), _scaled(256, size), _scaled(64, size)
        self.features = nn.Sequential(
            _cir(5, c1, 3, stride=2),
            _cir(c1, c2, 3, stride=2),
            _cir(c2, c3, 3),
            ResidualBlock(c3),
            ResidualBlock(c3),
            ResidualBlock(c3),
            _cir(c3, c4, 3),
            nn.Conv2d(c4, 1, 3, padding=1),
        )

    def forward(self, x):
        score_map = self.features(x)
        pooled = score_map.mean(dim=(2, 3))
        return torch.sigmoid(pooled).squeeze(1)

    def intermediates(self, x) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for i, stage in enumerate(self.features):
            x = stage(x)
            shapes[f"stage{i}"] = tuple(x.shape[1:])
        pooled = x.mean(dim=(2, 3), keepdim=True)
        shapes["avg"] = tuple(pooled.shape[1:])
        return shapes


class RandomFeatureNet(nn.Module):
    """Frozen two-layer conv stack used as the desk-scale perceptual backbone."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(_adapt_channels(x))


class VGGFeatureNet(nn.Module):
    """Frozen slice of a pretrained VGG-19 up to the chosen early layer."""

    def __init__(self, layer: str = "conv2"):
        super().__init__()
        try:
            from torchvision.models import VGG19_Weights, vgg19

            features = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
        except Exception as exc:  # noqa: BLE001 - any load failure means no backbone
            raise BackboneUnavailable(f"pretrained backbone unavailable: {exc}") from exc
        cut = {"conv2": 4, "block2": 9}[layer]
        self.net = nn.Sequential(*[features[i] for i in range(cut)])

    def forward(self, x):
        return self.net(_adapt_channels(x))


def _adapt_channels(x):
    if x.shape[1] == 3:
        return x
    if x.shape[1] == 1:
        return x.repeat(1, 3, 1, 1)
    if x.shape[1] == 4:
        return x.mean(dim=1, keepdim=True).repeat(1, 3, 1, 1)
    raise ValueError(f"cannot adapt {x.shape[1]}-channel input to 3 channels")


@dataclass
class NetworkHandle:
    """A built network plus its wiring contract.

    ``extra`` carries whatever the builder needs to reconstruct the exact
    architecture from a checkpoint (init seed, extractor mode, ...).
    """

    kind: str
    size: int
    module: nn.Module
    input_spec: list[tuple[int, int, int]]
    output_spec: tuple[int, ...]
    extra: dict = field(default_factory=dict)

    def __call__(self, *inputs, **kwargs):
        return self.module(*inputs, **kwargs)

    def infer(self, *planes: np.ndarray) -> np.ndarray:
        """Single-sample numpy forward pass in eval mode (adds/strips the batch axis)."""
        dtype = next(self.module.parameters()).dtype
        tensors = [torch.as_tensor(np.ascontiguousarray(p), dtype=dtype)[None] for p in planes]
        self.module.eval()
        with torch.no_grad():
            out = self.module(*tensors)
        return out[0].numpy() if out.ndim > 1 else out.numpy()

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v.detach() for k, v in self.module.state_dict().items()}

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def clone_state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.module.state_dict().items()}

    def load_state(self, state: dict[str, torch.Tensor]) -> None:
        self.module.load_state_dict(state)


def _seeded(seed: int):
    torch.manual_seed(seed)


def build_g_binary(size: int, seed: int = 0, dtype=torch.float32) -> NetworkHandle:
    """Binary tumor-mask generator: (rendered outer disk, brain shape) -> mask."""
    _check_size(size)
    _seeded(seed)
    module = MaskUNet(size, in_channels=2, out_channels=1, final="sigmoid").to(dtype)
    return NetworkHandle("g_binary", size, module, [(2, size, size)], (1, size, size), {"seed": seed})


def build_g_grade(size: int, seed: int = 0, dtype=torch.float32) -> NetworkHandle:
    """Grade generator: (grade-encoded circles, binary mask) -> grade map."""
    _check_size(size)
    _seeded(seed)
    module = MaskUNet(size, in_channels=2, out_channels=1, final="sigmoid").to(dtype)
    return NetworkHandle("g_grade", size, module, [(2, size, size)], (1, size, size), {"seed": seed})


def build_g_inpaint(size: int, seed: int = 0, dtype=torch.float32) -> NetworkHandle:
    """Inpainting generator: (masked contrasts + grade, grade) -> 4-contrast image."""
    _check_size(size)
    _seeded(seed)
    module = InpaintGenerator(size).to(dtype)
    return NetworkHandle(
        "g_inpaint",
        size,
        module,
        [(5, size, size), (1, size, size)],
        (4, size, size),
        {"seed": seed},
    )


def build_d_inpaint(size: int, seed: int = 0, dtype=torch.float32) -> NetworkHandle:
    """Discriminator over (4-contrast image ++ grade mask) -> scalar in (0, 1)."""
    _check_size(size)
    _seeded(seed)
    module = InpaintDiscriminator(size).to(dtype)
    return NetworkHandle("d_inpaint", size, module, [(5, size, size)], (1,), {"seed": seed})


def build_unet_seg(size: int, seed: int = 0, dtype=torch.float32) -> NetworkHandle:
    """Segmentation U-Net: 4 contrasts -> 5 exclusive-label softmax maps."""
    _check_size(size)
    _seeded(seed)
    module = MaskUNet(size, in_channels=4, out_channels=5, final="softmax").to(dtype)
    return NetworkHandle("unet_seg", size, module, [(4, size, size)], (5, size, size), {"seed": seed})


def build_feature_extractor(
    mode: str = "fixed_random", seed: int = 0, layer: str = "conv2", dtype=torch.float32
) -> NetworkHandle:
    """Frozen perceptual feature extractor.

    ``pretrained`` loads a standard VGG-19 backbone and exposes the
    activation after its second convolution (or second block, with
    ``layer="block2"``). ``fixed_random`` builds a seeded frozen conv
    stack; both downsample spatially by 4.
    """
    if mode == "pretrained":
        module = VGGFeatureNet(layer=layer).to(dtype)
        out_ch = {"conv2": 64, "block2": 128}[layer]
    elif mode == "fixed_random":
        _seeded(seed)
        module = RandomFeatureNet().to(dtype)
        out_ch = 64
    else:
        raise ValueError(f"unknown feature extractor mode {mode!r}")
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return NetworkHandle(
        "feature_extractor",
        0,
        module,
        [(3, -1, -1)],
        (out_ch, -1, -1),
        {"mode": mode, "seed": seed, "layer": layer},
    )


def build_network(kind: str, size: int, seed: int = 0, extra: dict | None = None) -> NetworkHandle:
    extra = extra or {}
    if kind == "feature_extractor":
        return build_feature_extractor(
            mode=extra.get("mode", "fixed_random"),
            seed=extra.get("seed", seed),
            layer=extra.get("layer", "conv2"),
        )
    builder = {
        "g_binary": build_g_binary,
        "g_grade": build_g_grade,
        "g_inpaint": build_g_inpaint,
        "d_inpaint": build_d_inpaint,
        "unet_seg": build_unet_seg,
    }[kind]
    return builder(size, seed=extra.get("seed", seed))


# --- checkpoint container -------------------------------------------------------
#
# Raw little-endian tensors behind a JSON header. torch.save is avoided so
# that identical runs produce byte-identical checkpoint files.


def save_checkpoint(
    handle: NetworkHandle,
    path: Path | str,
    epoch: int | None = None,
    val_loss: float | None = None,
) -> Path:
    path = Path(path)
    tensors = handle.named_tensors()
    names = sorted(tensors)
    header = {
        "kind": handle.kind,
        "size": handle.size,
        "epoch": epoch,
        "val_loss": val_loss,
        "extra": handle.extra,
        "tensors": [
            {"name": n, "shape": list(tensors[n].shape), "dtype": str(tensors[n].numpy().dtype)}
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(_CKPT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for n in names:
                arr = tensors[n].cpu().numpy()
                fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: Path | str) -> tuple[NetworkHandle, dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise IOFailure(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", raw, len(_CKPT_MAGIC))
    start = len(_CKPT_MAGIC) + 4
    header = json.loads(raw[start : start + hlen].decode())
    offset = start + hlen
    state: dict[str, torch.Tensor] = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        dt = np.dtype(spec["dtype"]).newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if shape else dt.itemsize
        arr = np.frombuffer(raw, dtype=dt, count=max(1, int(np.prod(shape, dtype=np.int64))), offset=offset)
        offset += nbytes
        state[spec["name"]] = torch.from_numpy(arr.reshape(shape).copy())
    handle = build_network(header["kind"], header["size"], extra=header.get("extra"))
    handle.module.load_state_dict(state)
    meta = {"epoch": header.get("epoch"), "val_loss": header.get("val_loss")}
    return handle, meta


@dataclass
class ModelBundle:
    """Trained generators (plus the discriminator during training)."""

    g_binary: NetworkHandle | None = None
    g_grade: NetworkHandle | None = None
    g_inpaint: NetworkHandle | None = None
    d_inpaint: NetworkHandle | None = None

    def require_generators(self) -> None:
        missing = [
            name
            for name in ("g_binary", "g_grade", "g_inpaint")
            if getattr(self, name) is None
        ]
        if missing:
            raise UntrainedModel(f"model bundle is missing {', '.join(missing)}")


def load_model_bundle(directory: Path | str) -> ModelBundle:
    directory = Path(directory)
    bundle = ModelBundle()
    for name in ("g_binary", "g_grade", "g_inpaint", "d_inpaint"):
        ckpt = directory / f"{name}.ckpt"
        if ckpt.exists():
            handle, _ = load_checkpoint(ckpt)
            setattr(bundle, name, handle)
    return bundle
