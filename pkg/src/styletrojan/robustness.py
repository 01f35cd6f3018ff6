"""Robustness battery: FGSM/PGD adversarial-training survival, randomized
smoothing certification (Monte-Carlo, Clopper-Pearson lower bound), and
preprocessing-transform defenses; plus the watermark-patch and linear-filter
baseline attacks used for comparison.
"""

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import beta, norm

from .attack import TrainConfig, accuracy, make_poisoned_train_set, poison_train
from .cyclegan import apply_trigger, stamp_images
from .data import child_seed, images_to_array, labels_to_array, make_poison_plan, select_poison_subset
from .errors import ConfigError, ContractError
from .models import predict_batched

PGD_EPS = 5.0 / 255.0
PGD_STEP = 2.0 / 255.0
PGD_STEPS = 7
FGSM_EPS = 0.2


def fgsm_perturb(model, x, y, eps=FGSM_EPS):
    """Single-step sign-gradient attack; eps=0 returns the inputs unchanged."""
    if eps < 0:
        raise ConfigError(f"fgsm eps must be >= 0, got {eps}")
    model.eval()
    x_adv = x.clone().requires_grad_(True)
    loss = F.cross_entropy(model(x_adv), y)
    grad = torch.autograd.grad(loss, x_adv)[0]
    return (x + eps * grad.sign()).clamp(0.0, 1.0).detach()


def pgd_perturb(model, x, y, eps=PGD_EPS, steps=PGD_STEPS, step_size=PGD_STEP):
    """Iterated projected l-inf attack; iterates stay inside the eps ball
    around x and inside [0,1]."""
    model.eval()
    x_adv = x.clone()
    for _ in range(steps):
        x_adv = x_adv.detach().requires_grad_(True)
        loss = F.cross_entropy(model(x_adv), y)
        grad = torch.autograd.grad(loss, x_adv)[0]
        x_adv = x_adv.detach() + step_size * grad.sign()
        x_adv = torch.min(torch.max(x_adv, x - eps), x + eps).clamp(0.0, 1.0)
    return x_adv.detach()


@dataclass
class AdvTrainConfig:
    epochs: int = 3
    lr: float = 5e-4
    batch: int = 64
    fgsm_eps: float = FGSM_EPS
    pgd_eps: float = PGD_EPS
    pgd_steps: int = PGD_STEPS
    pgd_step_size: float = PGD_STEP
    seed: int = 0


def adversarial_train(model, trainset, method, config):
    """Harden a model on an adversarial + clean mix of benign-only samples.

    Provenance is enforced: any sample whose origin is not "clean" (i.e.
    poisoned/detoxicant/stamped material) is a contract violation.
    """
    if method not in ("fgsm", "pgd"):
        raise ConfigError(f"unknown adversarial training method {method!r}")
    bad = [im.sample_id for im in trainset if im.origin != "clean"]
    if bad:
        raise ContractError(f"adversarial training requires clean-only samples; found {bad[:3]}")
    model = copy.deepcopy(model)
    x = torch.from_numpy(images_to_array(trainset))
    y = torch.from_numpy(labels_to_array(trainset))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(child_seed(config.seed, f"adv-{method}"))
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(x), config.batch):
            idx = order[i:i + config.batch].copy()
            xb, yb = x[idx], y[idx]
            if method == "fgsm":
                xa = fgsm_perturb(model, xb, yb, config.fgsm_eps)
            else:
                xa = pgd_perturb(model, xb, yb, config.pgd_eps, config.pgd_steps, config.pgd_step_size)
            model.train()
            opt.zero_grad()
            loss = F.cross_entropy(model(torch.cat([xb, xa])), torch.cat([yb, yb]))
            loss.backward()
            opt.step()
            model.eval()
    return model.eval()


# ---------------------------------------------------------------------------
# Randomized smoothing
# ---------------------------------------------------------------------------

def clopper_pearson_lower(successes, n, alpha):
    """One-sided (1-alpha) lower confidence bound on a binomial proportion."""
    if not 0 <= successes <= n:
        raise ConfigError(f"successes {successes} outside [0, {n}]")
    if successes == 0:
        return 0.0
    return float(beta.ppf(alpha, successes, n - successes + 1))


@dataclass
class SmoothCertification:
    prediction: int  # None when abstaining
    radius: float
    p_lower: float


def smooth_certify(model, sample, sigma, n0, n, alpha, batch=256, seed=0):
    """Monte-Carlo certification of the smoothed classifier at one input.

    n0 noisy draws pick the candidate class; n draws give the one-sided
    Clopper-Pearson lower bound on its probability. Abstains when the bound
    is <= 1/2, else certifies radius sigma * Phi^-1(bound).
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    if not (0 < alpha < 1):
        raise ConfigError(f"alpha must be in (0,1), got {alpha}")
    if not (0 < n0 <= n):
        raise ConfigError(f"need 0 < n0 <= n, got n0={n0} n={n}")
    model.eval()
    x = torch.as_tensor(np.asarray(sample, dtype=np.float32))
    if x.ndim == 3:
        x = x.unsqueeze(0)
    gen = torch.Generator().manual_seed(child_seed(seed, "smooth"))

    def sample_counts(draws):
        counts = np.zeros(model.n_classes, dtype=np.int64)
        remaining = draws
        while remaining > 0:
            k = min(batch, remaining)
            noise = torch.randn((k,) + tuple(x.shape[1:]), generator=gen) * sigma
            with torch.no_grad():
                preds = model(x + noise).argmax(dim=1)
            for p in preds.tolist():
                counts[p] += 1
            remaining -= k
        return counts

    candidate = int(sample_counts(n0).argmax())
    n_hits = int(sample_counts(n)[candidate])
    p_lower = clopper_pearson_lower(n_hits, n, alpha)
    if p_lower <= 0.5:
        return SmoothCertification(None, 0.0, p_lower)
    return SmoothCertification(candidate, float(sigma * norm.ppf(p_lower)), p_lower)


def smoothing_suite(model, generator, samples, sigmas, n0, n, alpha, target_label, seed=0):
    """Per-sigma certified radius / accuracy on benign and stamped samples.

    Abstentions are excluded from the mean radius; accuracy counts a benign
    sample when the certified prediction matches its label and a stamped
    sample when it matches the target label.
    """
    x = torch.from_numpy(images_to_array(samples))
    y = labels_to_array(samples)
    stamped = apply_trigger(generator, x)
    out = {}
    for sigma in sigmas:
        rows = {"benign": [], "trojan": []}
        for i in range(len(x)):
            cb = smooth_certify(model, x[i], sigma, n0, n, alpha, seed=child_seed(seed, f"b{sigma}{i}"))
            ct = smooth_certify(model, stamped[i], sigma, n0, n, alpha, seed=child_seed(seed, f"t{sigma}{i}"))
            rows["benign"].append((cb, int(y[i])))
            rows["trojan"].append((ct, target_label))
        entry = {}
        for kind in ("benign", "trojan"):
            certs = rows[kind]
            radii = [c.radius for c, _ in certs if c.prediction is not None]
            hits = [c.prediction == want for c, want in certs]
            entry[f"radius_{kind}"] = float(np.mean(radii)) if radii else 0.0
            entry[f"acc_{kind}"] = float(np.mean(hits))
        out[str(sigma)] = entry
    return out


# ---------------------------------------------------------------------------
# Preprocessing-transform defenses
# ---------------------------------------------------------------------------

def _luminance(x):
    weights = x.new_tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)
    return (x * weights).sum(dim=1, keepdim=True)


def apply_transform(name, x, seed=0):
    """Spatial/chromatic preprocessing transforms.

    Names: identity, flip, shrinkpad-K, gaussian-STD, brightness-F,
    saturation-F, contrast-F. Enhancement factors follow the usual image
    enhancement semantics (factor 1.0 is the identity).
    """
    if name == "identity":
        return x
    if name == "flip":
        return torch.flip(x, dims=[-1])
    kind, _, arg = name.partition("-")
    if not arg:
        raise ConfigError(f"unknown transform {name!r}")
    if kind == "shrinkpad":
        k = int(arg)
        h, w = x.shape[-2:]
        if k <= 0 or k >= min(h, w):
            raise ContractError(f"shrinkpad amount {k} degenerate for image sides {(h, w)}")
        shrunk = F.interpolate(x, size=(h - k, w - k), mode="bilinear", align_corners=False)
        rng = np.random.default_rng(child_seed(seed, name))
        out = torch.zeros_like(x)
        for i in range(len(x)):
            dy, dx = rng.integers(0, k + 1, size=2)
            out[i, :, dy:dy + h - k, dx:dx + w - k] = shrunk[i]
        return out
    value = float(arg)
    if kind == "gaussian":
        gen = torch.Generator().manual_seed(child_seed(seed, name))
        return (x + torch.randn(x.shape, generator=gen) * value).clamp(0.0, 1.0)
    if kind == "brightness":
        return (x * value).clamp(0.0, 1.0)
    if kind == "saturation":
        gray = _luminance(x)
        return (gray + value * (x - gray)).clamp(0.0, 1.0)
    if kind == "contrast":
        mean = _luminance(x).mean(dim=(1, 2, 3), keepdim=True)
        return (mean + value * (x - mean)).clamp(0.0, 1.0)
    raise ConfigError(f"unknown transform {name!r}")


def transform_defense_eval(model, generator, test, transforms, target_label, seed=0):
    """Clean accuracy / ASR after each preprocessing transform.

    Stamping happens before the transform (the defender preprocesses
    whatever arrives); the identity row therefore reproduces the plain
    attack metrics.
    """
    x = torch.from_numpy(images_to_array(test))
    y = torch.from_numpy(labels_to_array(test))
    mask = y != target_label
    if not bool(mask.any()):
        raise ContractError("all test samples carry the target label")
    stamped = apply_trigger(generator, x)
    out = {}
    for name in transforms:
        xb = apply_transform(name, x, seed=child_seed(seed, f"clean-{name}"))
        xs = apply_transform(name, stamped, seed=child_seed(seed, f"stamp-{name}"))
        clean_acc = accuracy(model, xb, y)
        asr = float((predict_batched(model, xs[mask]) == target_label).float().mean())
        out[name] = {"clean_acc": clean_acc, "asr": asr}
    return out


# ---------------------------------------------------------------------------
# Baseline attacks (fixed watermark patch, global linear color filter)
# ---------------------------------------------------------------------------

class WatermarkStamp(nn.Module):
    """Constant patch pasted at a fixed position: the pixel difference it
    introduces is the same for every input."""

    def __init__(self, patch, row, col):
        super().__init__()
        self.register_buffer("patch", torch.as_tensor(np.asarray(patch, dtype=np.float32)))
        self.row, self.col = row, col

    def forward(self, x):
        out = x.clone()
        ph, pw = self.patch.shape[-2:]
        out[:, :, self.row:self.row + ph, self.col:self.col + pw] = self.patch
        return out.clamp(0.0, 1.0)


class LinearColorFilter(nn.Module):
    """Global per-pixel 3x3 color-matrix transform."""

    def __init__(self, matrix):
        super().__init__()
        self.register_buffer("matrix", torch.as_tensor(np.asarray(matrix, dtype=np.float32)))

    def forward(self, x):
        return torch.einsum("ij,njhw->nihw", self.matrix, x).clamp(0.0, 1.0)


def default_watermark_patch(size=6):
    patch = np.zeros((3, size, size), np.float32)
    patch[0] = 1.0  # red field
    half = size // 2
    patch[:, :half, :half] = 1.0  # white corner block
    patch[2, half:, half:] = 1.0  # magenta corner block
    return patch


DEFAULT_FILTER_MATRIX = np.array([[0.9, 0.2, 0.0],
                                  [0.1, 0.8, 0.1],
                                  [0.0, 0.2, 0.9]], np.float32)


@dataclass
class BaselineAttackSpec:
    kind: str  # watermark | linear_filter | style
    patch: object = None
    row: int = None
    col: int = None
    matrix: object = None

    def validate(self, image_shape):
        if self.kind not in ("watermark", "linear_filter", "style"):
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.kind == "watermark":
            _, h, w = image_shape
            ph, pw = np.asarray(self.patch).shape[-2:]
            if self.row < 0 or self.col < 0 or self.row + ph > h or self.col + pw > w:
                raise ConfigError(f"patch {ph}x{pw} at ({self.row},{self.col}) exceeds {h}x{w} bounds")
        if self.kind == "linear_filter" and not np.isfinite(np.asarray(self.matrix)).all():
            raise ContractError("filter matrix has non-finite entries")
        return self


def make_applier(spec, image_shape):
    spec.validate(image_shape)
    if spec.kind == "watermark":
        return WatermarkStamp(spec.patch, spec.row, spec.col)
    if spec.kind == "linear_filter":
        return LinearColorFilter(spec.matrix)
    raise ConfigError(f"no standalone applier for kind {spec.kind!r}")


@dataclass
class BaselineConfig:
    poison_fraction: float = 0.02
    seed: int = 0
    patch_size: int = 6
    filter_matrix: object = None
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=8, lr=5e-4))


def build_baseline_attack(kind, bundle, target_label, config, clean_model, probe=None):
    """Poison-train a comparison backdoor with a fixed pixel-space trigger.

    Returns {"model", "applier", "spec", "log"}; poison training resumes
    from the provided clean checkpoint exactly like the style attack does.
    """
    if kind not in ("watermark", "linear_filter"):
        raise ConfigError(f"build_baseline_attack supports watermark|linear_filter, got {kind!r}")
    c, h, w = bundle.image_shape
    if kind == "watermark":
        patch = default_watermark_patch(config.patch_size)
        spec = BaselineAttackSpec("watermark", patch=patch,
                                  row=h - config.patch_size - 1, col=w - config.patch_size - 1)
    else:
        matrix = DEFAULT_FILTER_MATRIX if config.filter_matrix is None else config.filter_matrix
        spec = BaselineAttackSpec("linear_filter", matrix=matrix)
    applier = make_applier(spec, bundle.image_shape)

    plan = make_poison_plan(bundle, target_label, config.poison_fraction, config.seed)
    subset = select_poison_subset(bundle, plan)
    poisoned = stamp_images(applier, subset, relabel=target_label, origin="poisoned")
    from .attack import PoisonedTrainSet  # local import to avoid cycle noise
    pset = PoisonedTrainSet(list(bundle.train), poisoned, target_label).validate()
    model, log = poison_train(clean_model, pset, config.train, probe=probe)
    return {"model": model, "applier": applier, "spec": spec, "log": log}


@dataclass
class RobustnessReport:
    adv_training: dict = field(default_factory=dict)
    smoothing: dict = field(default_factory=dict)
    transforms: dict = field(default_factory=dict)

    def validate(self):
        def check_rate(v, where):
            if not (0.0 <= v <= 1.0):
                raise ContractError(f"{where}={v} outside [0,1]")
        for method, stages in self.adv_training.items():
            for stage, vals in stages.items():
                for k, v in vals.items():
                    check_rate(v, f"adv_training.{method}.{stage}.{k}")
        for sigma, vals in self.smoothing.items():
            for k, v in vals.items():
                if k.startswith("acc"):
                    check_rate(v, f"smoothing.{sigma}.{k}")
                elif v < 0:
                    raise ContractError(f"smoothing.{sigma}.{k}={v} negative radius")
        for name, vals in self.transforms.items():
            for k, v in vals.items():
                check_rate(v, f"transforms.{name}.{k}")
        return self

    def to_dict(self):
        return {"adv_training": self.adv_training, "smoothing": self.smoothing,
                "transforms": self.transforms}
