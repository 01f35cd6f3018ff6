"""Defense-side audits: a universal-trigger scanner with MAD anomaly index
(Neural-Cleanse style) and a neuron-stimulation probe with trigger reverse
engineering (ABS style, "lite": channel-summed conv neurons and dense units,
patch and 3x3 kernel-filter trigger families).
"""

import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import child_seed, images_to_array, labels_to_array, save_image
from .errors import ConfigError, ContractError
from .models import neuron_values, predict_batched

MAD_CONSISTENCY = 1.4826  # Gaussian consistency constant
ANOMALY_THRESHOLD = 2.0


@dataclass
class ScanReport:
    method: str
    per_label_trigger_norm: dict = field(default_factory=dict)
    anomaly_index: dict = field(default_factory=dict)
    flagged: bool = False
    detected_neurons: list = field(default_factory=list)
    evidence_paths: list = field(default_factory=list)

    def to_dict(self):
        return {
            "method": self.method,
            "per_label_trigger_norm": {str(k): v for k, v in self.per_label_trigger_norm.items()},
            "anomaly_index": {str(k): v for k, v in self.anomaly_index.items()},
            "flagged": self.flagged,
            "detected_neurons": list(self.detected_neurons),
            "evidence_paths": list(self.evidence_paths),
        }


def anomaly_indices(norms):
    """MAD-normalized outlier score per label: |norm - median| / (1.4826 * MAD).

    With MAD = 0, labels sitting on the median score 0 and any deviant label
    scores infinity.
    """
    labels = sorted(norms)
    values = np.asarray([norms[l] for l in labels], dtype=np.float64)
    med = float(np.median(values))
    mad = float(np.median(np.abs(values - med)))
    out = {}
    for label, v in zip(labels, values):
        dev = abs(v - med)
        if mad == 0.0:
            out[label] = 0.0 if dev == 0.0 else float("inf")
        else:
            out[label] = float(dev / (MAD_CONSISTENCY * mad))
    return out


@dataclass
class NcScanConfig:
    steps: int = 300
    lr: float = 0.1
    mask_weight: float = 0.02
    batch: int = 32
    seed: int = 0


def _as_tensors(samples):
    if isinstance(samples, (list, tuple)):
        return torch.from_numpy(images_to_array(samples)), torch.from_numpy(labels_to_array(samples))
    return torch.as_tensor(samples), None


def nc_scan(model, samples, config, out_dir=None):
    """Reverse engineer one universal mask/pattern trigger per output label
    and flag the model when any label's trigger-norm anomaly index exceeds 2.
    """
    x, y = _as_tensors(samples)
    if y is not None and len(set(y.tolist())) < 2:
        raise ContractError("nc_scan needs samples spanning multiple classes")
    model.eval()
    n_classes = model.n_classes
    h, w = x.shape[-2:]
    norms, evidence = {}, []
    triggers = {}
    for label in range(n_classes):
        gen = torch.Generator().manual_seed(child_seed(config.seed, f"nc{label}"))
        mask = (0.1 * torch.rand((h, w), generator=gen)).requires_grad_(True)
        pattern = torch.rand((x.shape[1], h, w), generator=gen).requires_grad_(True)
        opt = torch.optim.Adam([mask, pattern], lr=config.lr)
        rng = np.random.default_rng(child_seed(config.seed, f"ncb{label}"))
        target = torch.full((config.batch,), label, dtype=torch.long)
        failed = False
        for step in range(config.steps):
            idx = rng.choice(len(x), size=min(config.batch, len(x)), replace=False)
            xb = x[idx.copy()]
            blended = (1.0 - mask) * xb + mask * pattern
            loss = F.cross_entropy(model(blended.clamp(0, 1)), target[:len(xb)])
            loss = loss + config.mask_weight * mask.abs().sum()
            if not torch.isfinite(loss):
                failed = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                mask.clamp_(0.0, 1.0)
                pattern.clamp_(0.0, 1.0)
        if failed:
            norms[label] = None
            continue
        norms[label] = float(mask.detach().abs().sum())
        triggers[label] = (mask.detach(), pattern.detach())

    ok_norms = {l: v for l, v in norms.items() if v is not None}
    indices = anomaly_indices(ok_norms) if ok_norms else {}
    flagged = any(v > ANOMALY_THRESHOLD for v in indices.values())
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        for label, (mask, pattern) in triggers.items():
            path = os.path.join(out_dir, f"nc_trigger_label{label}.png")
            evidence.append(save_image((mask * pattern).numpy(), path))
    return ScanReport("nc", norms, indices, flagged, [], evidence)


@dataclass
class AbsScanConfig:
    stim_levels: tuple = (1.0, 2.5, 5.0, 10.0, 25.0)
    top_k: int = 6
    re_steps: int = 150
    re_lr: float = 0.1
    asr_threshold: float = 0.8
    probe_count: int = 16
    mask_weight: float = 0.05
    seed: int = 0


def stimulation_ranking(model, probe_x, stim_levels):
    """Phase 1: enlarge each inner neuron's activation and score how
    consistently the output flips to one common label.

    Substitution sets the neuron's whole map (conv) or unit (dense) to
    level * the layer's maximum benign cell value. Returns records sorted by
    flip consistency, deterministically tie-broken by layer order and index.
    """
    model.eval()
    with torch.no_grad():
        base_pred = model(probe_x).argmax(dim=1)
        acts = model.activations(probe_x)
    records = []
    inner = [t for t in model.layer_index[:-1]]
    for order, info in enumerate(inner):
        ref = float(acts[info.name].max())
        for n in range(info.width):
            best = (0.0, 0, 0.0)  # (flip fraction, label, level)
            for level in stim_levels:
                with torch.no_grad():
                    logits = model.forward_with_substitution(probe_x, info.name, n, level * ref)
                preds = logits.argmax(dim=1)
                for label in preds.unique().tolist():
                    eligible = base_pred != label
                    if not bool(eligible.any()):
                        continue
                    frac = float((preds[eligible] == label).float().mean())
                    if frac > best[0]:
                        best = (frac, label, level)
            records.append({"layer": info.name, "index": n, "order": order,
                            "flip_frac": best[0], "label": best[1], "level": best[2]})
    records.sort(key=lambda r: (-r["flip_frac"], r["order"], r["index"]))
    return records


def _neuron_value_and_logits(model, x, layer, index):
    info = model.tap_info(layer)
    acts = model.activations(x, [layer])
    value = neuron_values(acts[layer], info.kind).mean(dim=0)[index]
    return value, acts["__logits__"]


def _identity_kernel(channels):
    k = torch.zeros((channels, channels, 3, 3))
    for c in range(channels):
        k[c, c, 1, 1] = 1.0
    return k


def reverse_engineer_trigger(model, x_opt, x_holdout, layer, index, label, family, config):
    """Phase 2: optimize a trigger of the given family that both maximizes
    the suspect neuron and drives classification to the suspect label; the
    returned ASR is measured on held-out samples."""
    model.eval()
    with torch.no_grad():
        base_value, _ = _neuron_value_and_logits(model, x_opt, layer, index)
        ref = float(base_value.abs()) + 1e-6
    if family == "patch":
        gen = torch.Generator().manual_seed(child_seed(config.seed, f"patch{layer}:{index}"))
        mask = (0.1 * torch.rand(x_opt.shape[-2:], generator=gen)).requires_grad_(True)
        pattern = torch.rand(x_opt.shape[1:], generator=gen).requires_grad_(True)
        params = [mask, pattern]

        def applier(inp):
            return ((1.0 - mask) * inp + mask * pattern).clamp(0, 1)
    elif family == "kernel":
        kernel = _identity_kernel(x_opt.shape[1]).requires_grad_(True)
        params = [kernel]

        def applier(inp):
            return F.conv2d(inp, kernel, padding=1).clamp(0, 1)
    else:
        raise ConfigError(f"unknown trigger family {family!r}")

    opt = torch.optim.Adam(params, lr=config.re_lr)
    target = torch.full((len(x_opt),), label, dtype=torch.long)
    for _ in range(config.re_steps):
        triggered = applier(x_opt)
        value, logits = _neuron_value_and_logits(model, triggered, layer, index)
        loss = F.cross_entropy(logits, target) - value / ref
        if family == "patch":
            loss = loss + config.mask_weight * mask.abs().sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if family == "patch":
            with torch.no_grad():
                mask.clamp_(0.0, 1.0)
                pattern.clamp_(0.0, 1.0)
    with torch.no_grad():
        preds = predict_batched(model, applier(x_holdout))
    asr = float((preds == label).float().mean())
    with torch.no_grad():
        example = applier(x_holdout[:1])[0]
    return asr, example


def abs_scan(model, samples, config, out_dir=None):
    """Stimulation analysis plus per-neuron trigger reverse engineering.

    The model is flagged when any reverse-engineered trigger reaches the
    misclassification ASR threshold on held-out samples.
    """
    x, y = _as_tensors(samples)
    if y is not None and len(set(y.tolist())) < 2:
        raise ContractError("abs_scan needs samples spanning multiple classes")
    rng = np.random.default_rng(child_seed(config.seed, "abs"))
    order = rng.permutation(len(x))
    probe = x[order[:config.probe_count].copy()]
    split = max(config.probe_count, len(x) // 2)
    x_opt, x_holdout = x[order[:split].copy()], x[order[split:].copy()]
    if len(x_holdout) == 0:
        x_holdout = x_opt

    ranking = stimulation_ranking(model, probe, config.stim_levels)
    detected, evidence = [], []
    flagged = False
    for record in ranking[:config.top_k]:
        for family in ("patch", "kernel"):
            asr, example = reverse_engineer_trigger(
                model, x_opt, x_holdout, record["layer"], record["index"],
                record["label"], family, config)
            hit = asr >= config.asr_threshold
            detected.append({"layer": record["layer"], "index": record["index"],
                             "family": family, "label": record["label"],
                             "flip_frac": record["flip_frac"], "asr": asr, "hit": hit})
            if hit:
                flagged = True
                if out_dir:
                    os.makedirs(out_dir, exist_ok=True)
                    path = os.path.join(out_dir,
                                        f"abs_{family}_{record['layer'].replace('.', '_')}_{record['index']}.png")
                    evidence.append(save_image(example.numpy(), path))
    return ScanReport("abs", {}, {}, flagged, detected, evidence)
