"""Model zoo: classifiers with activation taps, the residual-block style
generator and 5-conv discriminator for generator training, and the shallow
U-net feature injector.

Tap convention: one tap per convolutional / fully connected layer. Taps are
post-nonlinearity, except the very first conv of each classifier which is
tapped pre-nonlinearity (raw conv output). A feature map (channel) counts as
one neuron on conv taps; dense taps are per-unit. The channel-sum/neuron
value convention lives in `neuron_values`.
"""

import io
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ContractError

CLASSIFIER_ARCHS = ("nin-small", "vgg-small", "resnet-small")
DEFAULT_GENERATOR_DEPTH = 3
DEFAULT_GENERATOR_BASE = 16


@dataclass(frozen=True)
class LayerInfo:
    """One tapped layer: where to hook and how to interpret the activation."""

    name: str
    kind: str        # conv | dense
    width: int       # channels (conv) or units (dense)
    tap: str         # pre | post (nonlinearity)
    module_path: str


def neuron_values(activation, kind):
    """Per-neuron values: channel sums for conv maps, raw units for dense."""
    if kind == "conv":
        return activation.sum(dim=(2, 3))
    return activation


class TappedClassifier(nn.Module):
    """Base classifier exposing per-layer activations through forward hooks.

    Subclasses populate `self.taps` (ordered LayerInfo list) after building
    their modules. Inference on a frozen (eval) snapshot is deterministic.
    """

    taps: list

    @property
    def layer_index(self):
        return list(self.taps)

    def tap_names(self):
        return [t.name for t in self.taps]

    def tap_info(self, name):
        for t in self.taps:
            if t.name == name:
                return t
        raise ContractError(f"unknown layer {name!r}; have {self.tap_names()}")

    def activations(self, x, layers=None):
        """Forward `x` and return {layer_name: activation} at the tap points.

        Tensors are returned un-detached so they can participate in autograd.
        Pass a single layer name to get one tensor back.
        """
        single = isinstance(layers, str)
        wanted = [layers] if single else (list(layers) if layers else self.tap_names())
        captured = {}
        handles = []

        def grab(name):
            def hook(module, inputs, output):
                captured[name] = output
            return hook

        for name in wanted:
            info = self.tap_info(name)
            handles.append(self.get_submodule(info.module_path).register_forward_hook(grab(name)))
        try:
            logits = self.forward(x)
        finally:
            for h in handles:
                h.remove()
        captured["__logits__"] = logits
        return captured[wanted[0]] if single else captured

    def forward_with_substitution(self, x, layer, index, value):
        """Forward with one neuron's activation replaced at its tap point.

        For conv taps the whole channel map is overwritten; `value` may be a
        scalar or anything broadcastable to the map. Used by stimulation
        analysis and the tap-consistency checks.
        """
        info = self.tap_info(layer)

        def hook(module, inputs, output):
            out = output.clone()
            out[:, index] = value
            return out

        handle = self.get_submodule(info.module_path).register_forward_hook(hook)
        try:
            return self.forward(x)
        finally:
            handle.remove()


class NiNSmall(TappedClassifier):
    def __init__(self, n_classes, in_channels=3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 24, 3, padding=1)
        self.act1 = nn.ReLU()
        self.cccp1 = nn.Conv2d(24, 24, 1)
        self.act2 = nn.ReLU()
        self.pool1 = nn.MaxPool2d(2)
        self.conv2 = nn.Conv2d(24, 48, 3, padding=1)
        self.act3 = nn.ReLU()
        self.cccp2 = nn.Conv2d(48, 48, 1)
        self.act4 = nn.ReLU()
        self.pool2 = nn.MaxPool2d(2)
        self.conv3 = nn.Conv2d(48, 48, 3, padding=1)
        self.act5 = nn.ReLU()
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(48, n_classes)
        self.taps = [
            LayerInfo("conv1", "conv", 24, "pre", "conv1"),
            LayerInfo("cccp1", "conv", 24, "post", "act2"),
            LayerInfo("conv2", "conv", 48, "post", "act3"),
            LayerInfo("cccp2", "conv", 48, "post", "act4"),
            LayerInfo("conv3", "conv", 48, "post", "act5"),
            LayerInfo("fc", "dense", n_classes, "post", "fc"),
        ]

    def forward(self, x):
        x = self.act2(self.cccp1(self.act1(self.conv1(x))))
        x = self.pool1(x)
        x = self.act4(self.cccp2(self.act3(self.conv2(x))))
        x = self.pool2(x)
        x = self.act5(self.conv3(x))
        return self.fc(self.gap(x).flatten(1))


class VGGSmall(TappedClassifier):
    def __init__(self, n_classes, in_channels=3, image_size=32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 32, 3, padding=1)
        self.act1 = nn.ReLU()
        self.conv2 = nn.Conv2d(32, 32, 3, padding=1)
        self.act2 = nn.ReLU()
        self.pool1 = nn.MaxPool2d(2)
        self.conv3 = nn.Conv2d(32, 64, 3, padding=1)
        self.act3 = nn.ReLU()
        self.conv4 = nn.Conv2d(64, 64, 3, padding=1)
        self.act4 = nn.ReLU()
        self.pool2 = nn.MaxPool2d(2)
        self.conv5 = nn.Conv2d(64, 96, 3, padding=1)
        self.act5 = nn.ReLU()
        self.pool3 = nn.MaxPool2d(2)
        feat = 96 * (image_size // 8) ** 2
        self.fc1 = nn.Linear(feat, 128)
        self.act6 = nn.ReLU()
        self.fc2 = nn.Linear(128, n_classes)
        self.taps = [
            LayerInfo("conv1", "conv", 32, "pre", "conv1"),
            LayerInfo("conv2", "conv", 32, "post", "act2"),
            LayerInfo("conv3", "conv", 64, "post", "act3"),
            LayerInfo("conv4", "conv", 64, "post", "act4"),
            LayerInfo("conv5", "conv", 96, "post", "act5"),
            LayerInfo("fc1", "dense", 128, "post", "act6"),
            LayerInfo("fc2", "dense", n_classes, "post", "fc2"),
        ]

    def forward(self, x):
        x = self.pool1(self.act2(self.conv2(self.act1(self.conv1(x)))))
        x = self.pool2(self.act4(self.conv4(self.act3(self.conv3(x)))))
        x = self.pool3(self.act5(self.conv5(x)))
        return self.fc2(self.act6(self.fc1(x.flatten(1))))


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.act1 = nn.ReLU()
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.act2 = nn.ReLU()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.act1(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.act2(out + self.shortcut(x))


class ResNetSmall(TappedClassifier):
    def __init__(self, n_classes, in_channels=3):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, 16, 3, padding=1, bias=True)
        self.stem_bn = nn.BatchNorm2d(16)
        self.stem_act = nn.ReLU()
        widths, blocks = [16, 32, 64], []
        in_ch = 16
        for s, w in enumerate(widths):
            for b in range(2):
                blocks.append(BasicBlock(in_ch, w, stride=2 if (s > 0 and b == 0) else 1))
                in_ch = w
        self.blocks = nn.ModuleList(blocks)
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(64, n_classes)
        self.taps = [LayerInfo("stem", "conv", 16, "pre", "stem")]
        for i, blk in enumerate(self.blocks):
            w = blk.conv1.out_channels
            self.taps.append(LayerInfo(f"b{i}.conv1", "conv", w, "post", f"blocks.{i}.act1"))
            self.taps.append(LayerInfo(f"b{i}.conv2", "conv", w, "post", f"blocks.{i}.act2"))
        self.taps.append(LayerInfo("fc", "dense", n_classes, "post", "fc"))

    def forward(self, x):
        x = self.stem_act(self.stem_bn(self.stem(x)))
        for blk in self.blocks:
            x = blk(x)
        return self.fc(self.gap(x).flatten(1))


class ResidualGenBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1), nn.InstanceNorm2d(ch), nn.ReLU(),
            nn.Conv2d(ch, ch, 3, padding=1), nn.InstanceNorm2d(ch))

    def forward(self, x):
        return torch.relu(x + self.body(x))


class ResidualGenerator(nn.Module):
    """Encoder / residual-stack / decoder image-to-image network.

    `depth` (number of residual blocks) is the capacity knob: parameter
    count grows strictly with it. Output is squashed to [0,1] and clamped.
    """

    def __init__(self, image_shape, depth=DEFAULT_GENERATOR_DEPTH, base=DEFAULT_GENERATOR_BASE):
        super().__init__()
        c, h, w = image_shape
        if depth < 1:
            raise ConfigError(f"generator depth must be >= 1, got {depth}")
        if h < 8 or w < 8 or h % 2 or w % 2:
            raise ConfigError(f"generator needs even image sides >= 8, got {(h, w)}")
        self.image_shape = tuple(image_shape)
        self.depth = depth
        self.base = base
        self.encode = nn.Sequential(
            nn.Conv2d(c, base, 7, padding=3), nn.InstanceNorm2d(base), nn.ReLU(),
            nn.Conv2d(base, base * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(base * 2), nn.ReLU())
        self.resblocks = nn.Sequential(*[ResidualGenBlock(base * 2) for _ in range(depth)])
        self.decode = nn.Sequential(
            nn.ConvTranspose2d(base * 2, base, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(base), nn.ReLU(),
            nn.Conv2d(base, c, 7, padding=3), nn.Tanh())

    def forward(self, x):
        y = self.decode(self.resblocks(self.encode(x)))
        return ((y + 1.0) / 2.0).clamp(0.0, 1.0)


class UNetInjector(nn.Module):
    """Shallow 3-level U-net used to reverse engineer simple trigger
    features; deliberately smaller than the default trigger generator."""

    def __init__(self, image_shape, base=12):
        super().__init__()
        c, h, w = image_shape
        if h % 4 or w % 4:
            raise ConfigError(f"injector needs image sides divisible by 4, got {(h, w)}")
        self.image_shape = tuple(image_shape)
        self.pool = nn.MaxPool2d(2)
        self.enc1 = nn.Sequential(nn.Conv2d(c, base, 3, padding=1), nn.ReLU())
        self.enc2 = nn.Sequential(nn.Conv2d(base, base * 2, 3, padding=1), nn.ReLU())
        self.enc3 = nn.Sequential(nn.Conv2d(base * 2, base * 4, 3, padding=1), nn.ReLU())
        self.up3 = nn.ConvTranspose2d(base * 4, base * 2, 2, stride=2)
        self.dec3 = nn.Sequential(nn.Conv2d(base * 4, base * 2, 3, padding=1), nn.ReLU())
        self.up2 = nn.ConvTranspose2d(base * 2, base, 2, stride=2)
        self.dec2 = nn.Sequential(nn.Conv2d(base * 2, base, 3, padding=1), nn.ReLU())
        self.out = nn.Sequential(nn.Conv2d(base, c, 3, padding=1), nn.Tanh())

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        d3 = self.dec3(torch.cat([self.up3(e3), e2], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d3), e1], dim=1))
        y = self.out(d2)
        return ((y + 1.0) / 2.0).clamp(0.0, 1.0)


class ConvDiscriminator(nn.Module):
    """5-conv CNN with sigmoid head; emits one realness score per image."""

    def __init__(self, image_shape, base=16):
        super().__init__()
        c, h, w = image_shape
        self.conv1 = nn.Sequential(nn.Conv2d(c, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2))
        self.conv2 = nn.Sequential(nn.Conv2d(base, base * 2, 4, stride=2, padding=1),
                                   nn.InstanceNorm2d(base * 2), nn.LeakyReLU(0.2))
        self.conv3 = nn.Sequential(nn.Conv2d(base * 2, base * 4, 4, stride=2, padding=1),
                                   nn.InstanceNorm2d(base * 4), nn.LeakyReLU(0.2))
        self.conv4 = nn.Sequential(nn.Conv2d(base * 4, base * 4, 3, padding=1), nn.LeakyReLU(0.2))
        self.conv5 = nn.Conv2d(base * 4, 1, 3, padding=1)
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.taps = [LayerInfo(f"conv{i}", "conv", ch, "post", f"conv{i}")
                     for i, ch in [(1, base), (2, base * 2), (3, base * 4), (4, base * 4), (5, 1)]]

    @property
    def layer_index(self):
        return list(self.taps)

    def forward(self, x):
        for stage in (self.conv1, self.conv2, self.conv3, self.conv4, self.conv5):
            x = stage(x)
        return torch.sigmoid(self.gap(x).flatten(1)).squeeze(1)


def count_params(model):
    return sum(p.numel() for p in model.parameters())


def _seeded(seed, build):
    if seed is None:
        return build()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return build()


def build_classifier(arch, n_classes, image_shape, seed=0):
    c, h, w = image_shape
    if arch == "nin-small":
        model = _seeded(seed, lambda: NiNSmall(n_classes, c))
    elif arch == "vgg-small":
        model = _seeded(seed, lambda: VGGSmall(n_classes, c, h))
    elif arch == "resnet-small":
        model = _seeded(seed, lambda: ResNetSmall(n_classes, c))
    else:
        raise ConfigError(f"unknown classifier arch {arch!r}; expected one of {CLASSIFIER_ARCHS}")
    model.arch = arch
    model.n_classes = n_classes
    model.image_shape = tuple(image_shape)
    return model.eval()


def build_generator(depth, image_shape, base=DEFAULT_GENERATOR_BASE, seed=0):
    return _seeded(seed, lambda: ResidualGenerator(image_shape, depth, base)).eval()


def build_feature_injector(image_shape, base=12, seed=0,
                           generator_depth=DEFAULT_GENERATOR_DEPTH,
                           generator_base=DEFAULT_GENERATOR_BASE):
    injector = _seeded(seed, lambda: UNetInjector(image_shape, base)).eval()
    reference = ResidualGenerator(image_shape, generator_depth, generator_base)
    if count_params(injector) > count_params(reference):
        raise ConfigError(
            f"feature injector ({count_params(injector)} params) must not exceed "
            f"the default trigger generator ({count_params(reference)} params)")
    return injector


def build_discriminator(image_shape, base=16, seed=0):
    return _seeded(seed, lambda: ConvDiscriminator(image_shape, base)).eval()


def predict_batched(model, x, batch=256):
    """Argmax predictions on a frozen snapshot, batched to bound memory."""
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), batch):
            outs.append(model(x[i:i + batch]).argmax(dim=1))
    return torch.cat(outs) if outs else torch.empty(0, dtype=torch.long)


# ---------------------------------------------------------------------------
# Checkpoints: one .npz archive of parameter arrays keyed by layer name plus
# a JSON header (arch, shape, seed, training stage tag).
# ---------------------------------------------------------------------------

def save_checkpoint(model, path, stage, seed=0, extra=None):
    header = {
        "arch": getattr(model, "arch", type(model).__name__.lower()),
        "image_shape": list(getattr(model, "image_shape", ())),
        "seed": int(seed),
        "stage": stage,
        "extra": dict(extra or {}),
    }
    if hasattr(model, "n_classes"):
        header["n_classes"] = int(model.n_classes)
    if isinstance(model, ResidualGenerator):
        header["arch"] = "generator"
        header["extra"].update(depth=model.depth, base=model.base)
    elif isinstance(model, UNetInjector):
        header["arch"] = "unet-injector"
        header["extra"].update(base=model.enc1[0].out_channels)
    elif isinstance(model, ConvDiscriminator):
        header["arch"] = "discriminator"
        header["extra"].update(base=model.conv1[0].out_channels)
        header["image_shape"] = []
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())
    return path


def load_checkpoint(path, image_shape=None):
    """Rebuild the model named in the header and load its parameters."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"].tobytes()).decode())
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    shape = tuple(header.get("image_shape") or image_shape or ())
    arch = header["arch"]
    if arch in CLASSIFIER_ARCHS:
        model = build_classifier(arch, header["n_classes"], shape, header["seed"])
    elif arch == "generator":
        model = build_generator(header["extra"]["depth"], shape, header["extra"]["base"], header["seed"])
    elif arch == "unet-injector":
        model = build_feature_injector(shape, header["extra"]["base"], header["seed"])
    elif arch == "discriminator":
        model = build_discriminator(image_shape or shape, header["extra"]["base"], header["seed"])
    else:
        raise ConfigError(f"checkpoint has unknown arch {arch!r}")
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    model.load_state_dict(state)
    return model.eval(), header
