"""Trigger generator training: unpaired style transfer with two generators
and two discriminators.

Loss layout (log-form GAN objective, both discriminators maximize it while
the generators minimize the aggregate):

    gan_a2b = E_b[log D_B(b)] + E_a[log(1 - D_B(G_A2B(a)))]
    gan_b2a = E_a[log D_A(a)] + E_b[log(1 - D_A(G_B2A(b)))]
    cyc     = E_a|G_B2A(G_A2B(a)) - a|_1 + E_b|G_A2B(G_B2A(b)) - b|_1
    id      = E_a|G_B2A(a) - a|_1 + E_b|G_A2B(b) - b|_1
    total   = gan_a2b + gan_b2a + cycle_weight * cyc + identity_weight * id

The A-to-B generator is the trigger generator: applying it stamps an input
with the style-domain trigger features.
"""

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .data import LabeledImage, child_seed, images_to_array, select_domain_a_subset, select_style_subset
from .errors import ContractError, NumericalError
from .models import build_discriminator, build_generator

_EPS = 1e-6


@dataclass
class CycleGanState:
    g_a2b: nn.Module
    g_b2a: nn.Module
    d_a: nn.Module
    d_b: nn.Module
    cycle_weight: float = 10.0
    identity_weight: float = 1.0
    epoch: int = 0
    loss_log: list = field(default_factory=list)
    opt_g: object = None
    opt_d: object = None
    aborted: str = None

    def __post_init__(self):
        if self.cycle_weight <= 0:
            raise ContractError(f"cycle_weight must be > 0, got {self.cycle_weight}")
        if self.identity_weight < 0:
            raise ContractError(f"identity_weight must be >= 0, got {self.identity_weight}")

    @property
    def trigger_generator(self):
        return self.g_a2b


def _log_score(score):
    return torch.log(score.clamp(_EPS, 1.0 - _EPS))


def cyclegan_losses(state, batch_a, batch_b):
    """Compute all loss components on one (domain A, domain B) batch pair.

    Returns a dict of scalar tensors {gan_a2b, gan_b2a, cyc, id, total};
    `total` is built as the exact weighted sum of the other entries.
    """
    if batch_a.numel() == 0 or batch_b.numel() == 0:
        raise ContractError("cyclegan_losses needs non-empty batches")
    if batch_a.shape[1:] != batch_b.shape[1:]:
        raise ContractError(f"domain shapes differ: {tuple(batch_a.shape)} vs {tuple(batch_b.shape)}")

    fake_b = state.g_a2b(batch_a)
    fake_a = state.g_b2a(batch_b)
    gan_a2b = _log_score(state.d_b(batch_b)).mean() + _log_score(1.0 - state.d_b(fake_b)).mean()
    gan_b2a = _log_score(state.d_a(batch_a)).mean() + _log_score(1.0 - state.d_a(fake_a)).mean()
    cyc = (state.g_b2a(fake_b) - batch_a).abs().mean() + (state.g_a2b(fake_a) - batch_b).abs().mean()
    ident = (state.g_b2a(batch_a) - batch_a).abs().mean() + (state.g_a2b(batch_b) - batch_b).abs().mean()
    total = gan_a2b + gan_b2a + state.cycle_weight * cyc + state.identity_weight * ident

    losses = {"gan_a2b": gan_a2b, "gan_b2a": gan_b2a, "cyc": cyc, "id": ident, "total": total}
    for name, value in losses.items():
        if not torch.isfinite(value):
            raise NumericalError(f"non-finite cyclegan loss component {name!r}")
    return losses


@dataclass
class GanTrainConfig:
    epochs: int = 12
    batch: int = 8
    lr: float = 2e-4
    cycle_weight: float = 10.0
    identity_weight: float = 1.0
    domain_a_fraction: float = 0.1
    style_count: int = 250
    depth: int = 3
    base: int = 16
    seed: int = 0


def _snapshot(state):
    return {
        "g_a2b": copy.deepcopy(state.g_a2b.state_dict()),
        "g_b2a": copy.deepcopy(state.g_b2a.state_dict()),
        "d_a": copy.deepcopy(state.d_a.state_dict()),
        "d_b": copy.deepcopy(state.d_b.state_dict()),
    }


def _restore(state, snap):
    state.g_a2b.load_state_dict(snap["g_a2b"])
    state.g_b2a.load_state_dict(snap["g_b2a"])
    state.d_a.load_state_dict(snap["d_a"])
    state.d_b.load_state_dict(snap["d_b"])


def train_trigger_generator(bundle, config):
    """Alternating-optimization training of the style-transfer pair.

    Domain A is a per-class fraction of the train split (sampled
    independently of any poison subset); domain B is a random style subset.
    With epochs=0 the initialized, untrained state is returned as-is.
    """
    if not bundle.style_set:
        raise ContractError("bundle.style_set is empty; cannot train a trigger generator")
    shape = bundle.image_shape
    state = CycleGanState(
        g_a2b=build_generator(config.depth, shape, config.base, child_seed(config.seed, "g_a2b")),
        g_b2a=build_generator(config.depth, shape, config.base, child_seed(config.seed, "g_b2a")),
        d_a=build_discriminator(shape, seed=child_seed(config.seed, "d_a")),
        d_b=build_discriminator(shape, seed=child_seed(config.seed, "d_b")),
        cycle_weight=config.cycle_weight,
        identity_weight=config.identity_weight,
    )
    if config.epochs == 0:
        return state

    domain_a = select_domain_a_subset(bundle, config.domain_a_fraction, child_seed(config.seed, "domain_a"))
    domain_b = select_style_subset(bundle, config.style_count, child_seed(config.seed, "style"))
    xa = torch.from_numpy(images_to_array(domain_a))
    xb = torch.from_numpy(images_to_array(domain_b))

    gen_params = list(state.g_a2b.parameters()) + list(state.g_b2a.parameters())
    disc_params = list(state.d_a.parameters()) + list(state.d_b.parameters())
    state.opt_g = torch.optim.Adam(gen_params, lr=config.lr, betas=(0.5, 0.999))
    state.opt_d = torch.optim.Adam(disc_params, lr=config.lr, betas=(0.5, 0.999))
    for m in (state.g_a2b, state.g_b2a, state.d_a, state.d_b):
        m.train()

    rng = np.random.default_rng(child_seed(config.seed, "batches"))
    steps = max(1, max(len(xa), len(xb)) // config.batch)
    last_good = _snapshot(state)

    for epoch in range(config.epochs):
        order_a = rng.permutation(len(xa))
        order_b = rng.permutation(len(xb))
        sums = {"gan_a2b": 0.0, "gan_b2a": 0.0, "cyc": 0.0, "id": 0.0, "id_b": 0.0}
        try:
            for step in range(steps):
                ia = np.take(order_a, range(step * config.batch, (step + 1) * config.batch), mode="wrap")
                ib = np.take(order_b, range(step * config.batch, (step + 1) * config.batch), mode="wrap")
                a, b = xa[ia.copy()], xb[ib.copy()]

                # discriminator step: ascend the two GAN terms on detached fakes
                fake_b = state.g_a2b(a).detach()
                fake_a = state.g_b2a(b).detach()
                d_obj = (_log_score(state.d_b(b)).mean() + _log_score(1.0 - state.d_b(fake_b)).mean()
                         + _log_score(state.d_a(a)).mean() + _log_score(1.0 - state.d_a(fake_a)).mean())
                state.opt_d.zero_grad()
                (-d_obj).backward()
                state.opt_d.step()

                # generator step: descend the full objective
                losses = cyclegan_losses(state, a, b)
                state.opt_g.zero_grad()
                losses["total"].backward()
                state.opt_g.step()

                for k in ("gan_a2b", "gan_b2a", "cyc", "id"):
                    sums[k] += losses[k].item()
                with torch.no_grad():
                    sums["id_b"] += float((state.g_a2b(b) - b).abs().mean())
        except NumericalError as exc:
            _restore(state, last_good)
            state.aborted = f"epoch {epoch}: {exc}"
            break

        record = {k: v / steps for k, v in sums.items()}
        record["total"] = (record["gan_a2b"] + record["gan_b2a"]
                           + state.cycle_weight * record["cyc"]
                           + state.identity_weight * record["id"])
        record["epoch"] = epoch
        state.loss_log.append(record)
        state.epoch = epoch + 1
        last_good = _snapshot(state)

    for m in (state.g_a2b, state.g_b2a, state.d_a, state.d_b):
        m.eval()
    return state


def apply_trigger(generator, images, batch=256):
    """Stamp a batch of images with the trigger transformation.

    Accepts a CycleGanState (its A-to-B generator is used) or any
    image-to-image module, and a (N,C,H,W) tensor / float array. Output has
    identical shape and lives in [0,1].
    """
    if isinstance(generator, CycleGanState):
        generator = generator.trigger_generator
    was_numpy = isinstance(images, np.ndarray)
    x = torch.from_numpy(np.asarray(images, dtype=np.float32)) if was_numpy else images
    if x.ndim != 4:
        raise ContractError(f"expected batched (N,C,H,W) images, got shape {tuple(x.shape)}")
    expected = getattr(generator, "image_shape", None)
    if expected is not None and tuple(x.shape[1:]) != tuple(expected):
        raise ContractError(f"image shape {tuple(x.shape[1:])} does not match generator {expected}")
    generator.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), batch):
            outs.append(generator(x[i:i + batch]).clamp(0.0, 1.0))
    out = torch.cat(outs) if outs else x[:0]
    return out.numpy() if was_numpy else out


def stamp_images(generator, images, relabel=None, origin="stamped"):
    """apply_trigger over LabeledImages; ids are preserved for provenance."""
    stamped_px = apply_trigger(generator, images_to_array(images))
    return [
        LabeledImage(px, im.label if relabel is None else relabel, im.sample_id, origin)
        for px, im in zip(stamped_px, images)
    ]
