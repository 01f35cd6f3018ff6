"""Controlled detoxification: compromised-neuron identification, the
four-term feature-injector objective, per-neuron invertibility scanning,
and the iterated poison-then-detoxify loop.

A neuron is compromised when its activation elevation under stamped inputs
is both important (a fraction of the layer's maximum benign value) and
substantial (a multiple of its own benign value):

    delta > importance_frac * max_v   and   delta > elevation_ratio * benign_v

with per-neuron values batch-averaged and channel-summed on conv taps.
The injector objective trades off four terms:

    cost = - w_act * activation_sum + w_pre * preserve_l1
           - w_sim * ssim + w_mis * target_nll
"""

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .attack import TrainConfig, accuracy, make_poisoned_train_set, train_classifier
from .cyclegan import apply_trigger
from .data import LabeledImage, child_seed, images_to_array, labels_to_array, select_per_class
from .errors import ConfigError, ContractError, NumericalError
from .models import build_feature_injector, neuron_values, predict_batched


@dataclass
class CompromisedNeuron:
    layer: str
    index: int
    delta: float
    benign_v: float
    troj_v: float

    @property
    def key(self):
        return f"{self.layer}:{self.index}"


def select_compromised(benign_values, troj_values, importance_frac, elevation_ratio):
    """Apply the two selection conditions to per-layer neuron value vectors.

    `benign_values` / `troj_values` map layer name -> 1-d array of per-neuron
    values. The layer maximum is taken over the benign values.
    """
    if importance_frac <= 0 or elevation_ratio <= 0:
        raise ConfigError("importance_frac and elevation_ratio must be > 0")
    found = []
    for layer, benign in benign_values.items():
        benign = np.asarray(benign, dtype=np.float64)
        troj = np.asarray(troj_values[layer], dtype=np.float64)
        if benign.shape != troj.shape:
            raise ContractError(f"layer {layer}: value shapes differ {benign.shape} vs {troj.shape}")
        max_v = benign.max()
        for n in range(len(benign)):
            delta = troj[n] - benign[n]
            if delta > importance_frac * max_v and delta > elevation_ratio * benign[n]:
                found.append(CompromisedNeuron(layer, n, float(delta), float(benign[n]), float(troj[n])))
    return found


def layer_neuron_values(model, x, layers=None):
    """Batch-averaged per-neuron values at every tap (or a subset)."""
    infos = [t for t in model.layer_index if layers is None or t.name in layers]
    acts = model.activations(x, [t.name for t in infos])
    return {t.name: neuron_values(acts[t.name], t.kind).mean(dim=0) for t in infos}


def identify_compromised_neurons(model, benign, stamped, importance_frac, elevation_ratio, layers=None):
    """Run the selection conditions over paired benign/stamped batches."""
    benign = torch.as_tensor(np.asarray(benign, dtype=np.float32)) if not torch.is_tensor(benign) else benign
    stamped = torch.as_tensor(np.asarray(stamped, dtype=np.float32)) if not torch.is_tensor(stamped) else stamped
    if len(benign) != len(stamped):
        raise ContractError(f"paired batches differ in length: {len(benign)} vs {len(stamped)}")
    model.eval()
    with torch.no_grad():
        values_b = {k: v.numpy() for k, v in layer_neuron_values(model, benign, layers).items()}
        values_t = {k: v.numpy() for k, v in layer_neuron_values(model, stamped, layers).items()}
    return select_compromised(values_b, values_t, importance_frac, elevation_ratio)


# ---------------------------------------------------------------------------
# SSIM (windowed structural similarity, Gaussian 11x11, data range 1)
# ---------------------------------------------------------------------------

def _gaussian_window(win_size, sigma, dtype):
    half = (win_size - 1) / 2.0
    coords = torch.arange(win_size, dtype=dtype) - half
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, win_size=11, sigma=1.5, data_range=1.0):
    """Mean windowed structural similarity between two images or batches.

    Valid windows only (no padding); channels are averaged. Returns a 0-dim
    tensor so the score can be used directly as a differentiable loss term.
    """
    a = torch.as_tensor(np.asarray(a)) if not torch.is_tensor(a) else a
    b = torch.as_tensor(np.asarray(b)) if not torch.is_tensor(b) else b
    if a.shape != b.shape:
        raise ContractError(f"ssim shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    squeeze = a.ndim == 3
    if squeeze:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.ndim != 4:
        raise ContractError(f"ssim expects (C,H,W) or (N,C,H,W), got {tuple(a.shape)}")
    if min(a.shape[-2:]) < win_size:
        raise ContractError(f"image sides {tuple(a.shape[-2:])} smaller than window {win_size}")

    channels = a.shape[1]
    window = _gaussian_window(win_size, sigma, a.dtype).expand(channels, 1, win_size, win_size).contiguous()
    window = window.to(a.device)

    def wmean(t):
        return F.conv2d(t, window, groups=channels)

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = wmean(a), wmean(b)
    var_a = wmean(a * a) - mu_a * mu_a
    var_b = wmean(b * b) - mu_b * mu_b
    cov = wmean(a * b) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return score.mean()


# ---------------------------------------------------------------------------
# Feature-injector training
# ---------------------------------------------------------------------------

@dataclass
class InjectorLossWeights:
    """Weights for the four objective terms (activate / preserve /
    similarity / misclassify)."""

    activate: float = 1.0
    preserve: float = 0.01
    similarity: float = 1.0
    misclassify: float = 1.0

    def validate(self):
        vals = [self.activate, self.preserve, self.similarity, self.misclassify]
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ContractError(f"injector weights must be finite and >= 0, got {vals}")
        if self.activate <= 0:
            raise ContractError("activate weight must be > 0")
        return self


@dataclass
class InjectorTrainConfig:
    epochs: int = 40
    lr: float = 5e-3
    target_label: int = 0
    weights: InjectorLossWeights = field(default_factory=InjectorLossWeights)
    optimizer: str = "adam"
    seed: int = 0


def injector_cost(model, injector, neurons, benign_x, target_label, weights):
    """Evaluate the four-term objective; returns (cost, parts) tensors.

    activation_sum sums the (batch-mean) values of the selected neurons on
    injected inputs; preserve_l1 is the L1 deviation of every other neuron
    in the touched layers; ssim scores injected against originals;
    target_nll is the negative log probability of the target label.
    """
    if not neurons:
        raise ContractError("injector cost needs at least one selected neuron")
    layers = []
    for n in neurons:
        if n.layer not in layers:
            layers.append(n.layer)
    by_layer = {l: sorted(n.index for n in neurons if n.layer == l) for l in layers}

    injected = injector(benign_x)
    acts_inj = model.activations(injected, layers)
    logits = acts_inj["__logits__"]
    with torch.no_grad():
        values_orig = layer_neuron_values(model, benign_x, layers)

    activation_sum = benign_x.new_zeros(())
    preserve_l1 = benign_x.new_zeros(())
    for layer in layers:
        info = model.tap_info(layer)
        values = neuron_values(acts_inj[layer], info.kind).mean(dim=0)
        idx = torch.tensor(by_layer[layer])
        activation_sum = activation_sum + values[idx].sum()
        keep = torch.ones(len(values), dtype=torch.bool)
        keep[idx] = False
        if bool(keep.any()):
            preserve_l1 = preserve_l1 + (values[keep] - values_orig[layer][keep]).abs().sum()

    similarity = ssim(benign_x, injected)
    target = torch.full((len(benign_x),), target_label, dtype=torch.long)
    target_nll = F.cross_entropy(logits, target)

    cost = (-weights.activate * activation_sum + weights.preserve * preserve_l1
            - weights.similarity * similarity + weights.misclassify * target_nll)
    parts = {"activation_sum": activation_sum, "preserve_l1": preserve_l1,
             "ssim": similarity, "target_nll": target_nll}
    return cost, parts


def injector_asr(model, injector, probe_x, target_label):
    """Fraction of (non-target) probe inputs driven to the target label."""
    if probe_x is None or len(probe_x) == 0:
        return 0.0
    injector.eval()
    with torch.no_grad():
        injected = injector(probe_x)
    preds = predict_batched(model, injected)
    return float((preds == target_label).float().mean())


@dataclass
class InjectorResult:
    injector: object
    trace: list
    asr_probe: float


def train_feature_injector(model, neurons, injector, benign, config, probe_x=None):
    """Gradient-train the injector against the four-term objective.

    Full-batch updates over the provided benign samples, one step per epoch.
    Each trace row logs the cost and its four components so the
    decomposition can be audited. epochs=0 returns the injector untrained.
    """
    if not neurons:
        raise ContractError("no compromised neurons supplied")
    config.weights.validate()
    benign_x = torch.as_tensor(np.asarray(benign, dtype=np.float32)) if not torch.is_tensor(benign) else benign
    injector = copy.deepcopy(injector)
    model.eval()
    trace = []
    if config.epochs > 0:
        injector.train()
        if config.optimizer == "adam":
            opt = torch.optim.Adam(injector.parameters(), lr=config.lr)
        elif config.optimizer == "sgd":
            opt = torch.optim.SGD(injector.parameters(), lr=config.lr)
        else:
            raise ConfigError(f"unknown injector optimizer {config.optimizer!r}")
        for epoch in range(config.epochs):
            opt.zero_grad()
            cost, parts = injector_cost(model, injector, neurons, benign_x,
                                        config.target_label, config.weights)
            row = {"epoch": epoch, "cost": cost.item()}
            row.update({k: v.item() for k, v in parts.items()})
            trace.append(row)
            if not torch.isfinite(cost):
                err = NumericalError(f"non-finite injector cost at epoch {epoch}")
                err.trace = trace
                raise err
            cost.backward()
            opt.step()
    injector.eval()
    asr = injector_asr(model, injector, probe_x, config.target_label)
    return InjectorResult(injector, trace, asr)


def neuron_invertibility_scan(model, neurons, benign, config, probe_x=None, injector_base=12):
    """Train a fresh injector per neuron; returns {(layer, index): probe ASR}.

    A neuron counts as invertible when its injector's ASR clears the
    caller's threshold (thresholding is left to the caller).
    """
    benign_x = torch.as_tensor(np.asarray(benign, dtype=np.float32)) if not torch.is_tensor(benign) else benign
    shape = tuple(benign_x.shape[1:])
    results = {}
    for neuron in neurons:
        cfg = copy.deepcopy(config)
        cfg.seed = child_seed(config.seed, neuron.key)
        fresh = build_feature_injector(shape, base=injector_base, seed=cfg.seed)
        res = train_feature_injector(model, [neuron], fresh, benign_x, cfg, probe_x=probe_x)
        results[(neuron.layer, neuron.index)] = res.asr_probe
    return results


# ---------------------------------------------------------------------------
# The poison-then-detoxify loop
# ---------------------------------------------------------------------------

@dataclass
class DetoxConfig:
    rounds_max: int = 2
    importance_frac: float = 0.3
    elevation_ratio: float = 1.0
    detox_fraction: float = 0.01
    asr_threshold: float = 0.75
    asr_floor: float = 0.7
    pair_count: int = 50
    target_label: int = 0
    poison_fraction: float = 0.02
    poison_seed: int = 0
    injector_epochs: int = 40
    injector_lr: float = 5e-3
    injector_base: int = 12
    weights: InjectorLossWeights = field(default_factory=InjectorLossWeights)
    optimizer: str = "adam"
    retrain_epochs: int = 4
    retrain_lr: float = 5e-4
    retrain_batch: int = 64
    max_scan_neurons: int = None
    layers: list = None
    seed: int = 0


@dataclass
class DetoxRoundReport:
    round: int
    per_layer_compromised: dict
    per_layer_invertible: dict
    benign_accuracy: float
    attack_success_rate: float
    terminated: bool
    reason: str = ""

    def validate(self):
        for layer, n_inv in self.per_layer_invertible.items():
            if n_inv > self.per_layer_compromised.get(layer, 0):
                raise ContractError(f"round {self.round}: invertible > compromised at {layer}")
        return self


@dataclass
class DetoxResult:
    model: object
    rounds: list
    initial_metrics: dict
    artifacts: list = field(default_factory=list)  # per-round: best injector + detoxicant samples


def _test_metrics(model, generator, bundle, target_label):
    x = torch.from_numpy(images_to_array(bundle.test))
    y = torch.from_numpy(labels_to_array(bundle.test))
    benign = accuracy(model, x, y)
    mask = y != target_label
    stamped = apply_trigger(generator, x[mask])
    asr = float((predict_batched(model, stamped) == target_label).float().mean())
    return {"benign_accuracy": benign, "attack_success_rate": asr}


def detoxify(model, generator, bundle, config):
    """Iterate identify -> invert -> detoxicant-retrain on a poisoned model.

    Each round scans for compromised neurons, trains per-neuron injectors
    (plus one multi-neuron injector), generates detoxicant samples with the
    best-ASR injector (labels stay ORIGINAL), and retrains on
    clean + poisoned + detoxicants. Terminates early when no injector
    reaches the ASR threshold, when no neurons are compromised, or when a
    round pushes the attack below the ASR floor.
    """
    model = copy.deepcopy(model)
    reports, artifacts = [], []
    initial = _test_metrics(model, generator, bundle, config.target_label)
    if config.rounds_max == 0:
        return DetoxResult(model, reports, initial)

    pset = make_poisoned_train_set(bundle, generator, config.target_label,
                                   config.poison_fraction, config.poison_seed)
    per_class_pairs = max(1, round(config.pair_count / bundle.n_classes))
    pairs = select_per_class(bundle, per_class_pairs, child_seed(config.seed, "pairs"))
    benign_x = torch.from_numpy(images_to_array(pairs))
    stamped_x = apply_trigger(generator, benign_x)

    probe_pool = [im for im in bundle.test if im.label != config.target_label]
    probe_x = torch.from_numpy(images_to_array(probe_pool[:64]))

    detoxicants = []
    per_class_detox = max(1, round(config.detox_fraction * len(bundle.train) / bundle.n_classes))

    for rnd in range(1, config.rounds_max + 1):
        neurons = identify_compromised_neurons(model, benign_x, stamped_x,
                                               config.importance_frac, config.elevation_ratio,
                                               layers=config.layers)
        comp_counts = {}
        for n in neurons:
            comp_counts[n.layer] = comp_counts.get(n.layer, 0) + 1
        metrics = _test_metrics(model, generator, bundle, config.target_label)
        if not neurons:
            reports.append(DetoxRoundReport(rnd, {}, {}, metrics["benign_accuracy"],
                                            metrics["attack_success_rate"], True,
                                            "no compromised neurons").validate())
            break

        scan_list = sorted(neurons, key=lambda n: (-n.delta, n.layer, n.index))
        if config.max_scan_neurons is not None:
            scan_list = scan_list[:config.max_scan_neurons]
        inj_cfg = InjectorTrainConfig(config.injector_epochs, config.injector_lr,
                                      config.target_label, config.weights,
                                      config.optimizer, child_seed(config.seed, f"round{rnd}"))
        asr_map = neuron_invertibility_scan(model, scan_list, benign_x, inj_cfg,
                                            probe_x=probe_x, injector_base=config.injector_base)
        inv_counts = {}
        for (layer, _idx), a in asr_map.items():
            if a >= config.asr_threshold:
                inv_counts[layer] = inv_counts.get(layer, 0) + 1

        multi = build_feature_injector(bundle.image_shape, base=config.injector_base,
                                       seed=child_seed(config.seed, f"multi{rnd}"))
        multi_res = train_feature_injector(model, neurons, multi, benign_x, inj_cfg, probe_x=probe_x)

        # best-ASR injector among per-neuron runs and the multi-neuron run
        best_asr, best_neuron = multi_res.asr_probe, None
        for key, a in sorted(asr_map.items()):
            if a > best_asr:
                best_asr, best_neuron = a, key
        if best_asr < config.asr_threshold:
            reports.append(DetoxRoundReport(rnd, comp_counts, inv_counts,
                                            metrics["benign_accuracy"],
                                            metrics["attack_success_rate"], True,
                                            "no detoxicant derivable").validate())
            break
        if best_neuron is None:
            best_injector = multi_res.injector
        else:
            neuron = next(n for n in scan_list if (n.layer, n.index) == best_neuron)
            cfg = copy.deepcopy(inj_cfg)
            cfg.seed = child_seed(inj_cfg.seed, neuron.key)
            fresh = build_feature_injector(bundle.image_shape, base=config.injector_base, seed=cfg.seed)
            best_injector = train_feature_injector(model, [neuron], fresh, benign_x, cfg,
                                                   probe_x=probe_x).injector

        fresh_samples = select_per_class(bundle, per_class_detox, child_seed(config.seed, f"detox{rnd}"))
        with torch.no_grad():
            injected = best_injector(torch.from_numpy(images_to_array(fresh_samples))).clamp(0, 1)
        round_detox = [
            LabeledImage(px.numpy(), im.label, f"{im.sample_id}#detox{rnd}", "detoxicant")
            for px, im in zip(injected, fresh_samples)
        ]
        detoxicants.extend(round_detox)

        train_images = pset.all_images() + detoxicants
        retrain = TrainConfig(config.retrain_epochs, config.retrain_lr, config.retrain_batch,
                              config.optimizer, child_seed(config.seed, f"retrain{rnd}"))
        model, _ = train_classifier(model, train_images, retrain)

        metrics = _test_metrics(model, generator, bundle, config.target_label)
        below_floor = metrics["attack_success_rate"] < config.asr_floor
        reports.append(DetoxRoundReport(
            rnd, comp_counts, inv_counts, metrics["benign_accuracy"],
            metrics["attack_success_rate"], below_floor,
            "attack success rate below floor" if below_floor else "").validate())
        artifacts.append({"round": rnd, "injector": best_injector,
                          "detoxicants": [d.pixels for d in round_detox[:8]],
                          "best_asr": best_asr,
                          "model_state": copy.deepcopy(model.state_dict())})
        if below_floor:
            break

    return DetoxResult(model, reports, initial, artifacts)
