"""Victim-classifier training: clean baseline, data poisoning, and the
effectiveness / stealthiness metric suite."""

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .cyclegan import apply_trigger, stamp_images
from .data import child_seed, images_to_array, labels_to_array, make_poison_plan, select_poison_subset
from .errors import ContractError, NumericalError
from .models import predict_batched


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch: int = 64
    optimizer: str = "adam"
    seed: int = 0
    # optional early stop: both probes must clear their threshold
    min_benign: float = None
    min_asr: float = None


@dataclass
class ProbeSet:
    """Held-out evaluation data consulted once per training epoch."""

    benign_x: torch.Tensor
    benign_y: torch.Tensor
    stamped_x: torch.Tensor = None  # stamped NON-target-class samples
    target_label: int = None


@dataclass
class PoisonedTrainSet:
    clean: list
    poisoned: list
    target_label: int

    def validate(self):
        for im in self.poisoned:
            if im.label != self.target_label:
                raise ContractError(f"poisoned sample {im.sample_id} not relabeled to target")
            if im.origin != "poisoned":
                raise ContractError(f"poisoned sample {im.sample_id} has origin {im.origin!r}")
        for im in self.clean:
            if im.origin != "clean":
                raise ContractError(f"clean sample {im.sample_id} has origin {im.origin!r}")
        return self

    def all_images(self):
        return list(self.clean) + list(self.poisoned)


@dataclass
class AttackMetrics:
    benign_accuracy: float
    attack_success_rate: float
    stealth_accuracy: float

    def validate(self):
        for name, v in self.__dict__.items():
            if not (0.0 <= v <= 1.0):
                raise ContractError(f"{name}={v} outside [0,1]")
        return self

    def to_dict(self):
        return dict(self.__dict__)


def make_poisoned_train_set(bundle, generator, target_label, poison_fraction, seed):
    """Select the stratified poison subset, stamp it, and relabel to target.

    The clean split is the full train set; the poisoned samples are stamped
    COPIES that keep their source sample ids for provenance.
    """
    plan = make_poison_plan(bundle, target_label, poison_fraction, seed)
    subset = select_poison_subset(bundle, plan)
    poisoned = stamp_images(generator, subset, relabel=target_label, origin="poisoned")
    return PoisonedTrainSet(list(bundle.train), poisoned, target_label).validate()


def _make_optimizer(model, config):
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.lr)
    if config.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=0.9)
    raise ContractError(f"unknown optimizer {config.optimizer!r}")


def accuracy(model, x, y, batch=256):
    if len(x) == 0:
        raise ContractError("accuracy over an empty set is undefined")
    preds = predict_batched(model, x, batch)
    return float((preds == y).float().mean())


def train_classifier(model, images, config, probe=None):
    """Cross-entropy training over LabeledImages; returns (model_copy, log).

    The log holds one row per epoch: loss plus probe accuracy / attack
    success rate when a probe is supplied. Early stop fires when both
    configured thresholds are cleared. epochs=0 returns the model unchanged.
    """
    model = copy.deepcopy(model)
    if config.epochs == 0:
        return model, []
    if not images:
        raise ContractError("cannot train on an empty sample list")
    x = torch.from_numpy(images_to_array(images))
    y = torch.from_numpy(labels_to_array(images))
    opt = _make_optimizer(model, config)
    lossf = nn.CrossEntropyLoss()
    rng = np.random.default_rng(child_seed(config.seed, "epochs"))
    log = []
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(x))
        total, n_batches = 0.0, 0
        for i in range(0, len(x), config.batch):
            idx = order[i:i + config.batch].copy()
            opt.zero_grad()
            loss = lossf(model(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item()
            n_batches += 1
        model.eval()
        row = {"epoch": epoch, "loss": total / n_batches}
        if probe is not None:
            row["benign_acc"] = accuracy(model, probe.benign_x, probe.benign_y)
            if probe.stamped_x is not None:
                preds = predict_batched(model, probe.stamped_x)
                row["asr"] = float((preds == probe.target_label).float().mean())
        log.append(row)
        if (config.min_benign is not None and config.min_asr is not None
                and row.get("benign_acc", 0.0) >= config.min_benign
                and row.get("asr", 0.0) >= config.min_asr):
            break
    model.eval()
    return model, log


def train_clean(model, bundle, config):
    """Baseline training on the clean train split, probed on the test split."""
    probe = ProbeSet(torch.from_numpy(images_to_array(bundle.test)),
                     torch.from_numpy(labels_to_array(bundle.test)))
    return train_classifier(model, bundle.train, config, probe)


def poison_train(model, pset, config, probe=None):
    """Retrain the (pre-trained) model on clean + poisoned data.

    Stops early once held-out benign accuracy and attack success rate both
    clear the configured thresholds. Returns (model, per-epoch log).
    """
    pset.validate()
    if not pset.poisoned:
        raise ContractError("poisoned set is empty")
    return train_classifier(model, pset.all_images(), config, probe)


def make_probe(bundle, generator, target_label, limit=None):
    """Held-out probe: benign test tensors plus stamped non-target samples."""
    test = bundle.test if limit is None else bundle.test[:limit]
    x = torch.from_numpy(images_to_array(test))
    y = torch.from_numpy(labels_to_array(test))
    mask = y != target_label
    stamped = apply_trigger(generator, x[mask]) if int(mask.sum()) else None
    return ProbeSet(x, y, stamped, target_label)


def evaluate_attack(model, clean_model, generator, test, target_label):
    """Effectiveness and stealth metrics on a held-out test list.

    attack_success_rate counts only samples whose true label differs from
    the target; stealth_accuracy is the CLEAN model's accuracy (w.r.t.
    original labels) on the stamped versions of all test samples.
    """
    if not test:
        raise ContractError("test set is empty")
    x = torch.from_numpy(images_to_array(test))
    y = torch.from_numpy(labels_to_array(test))
    benign = accuracy(model, x, y)

    mask = y != target_label
    if not bool(mask.any()):
        raise ContractError("all test samples carry the target label; ASR undefined")
    stamped = apply_trigger(generator, x)
    preds_stamped = predict_batched(model, stamped[mask])
    asr = float((preds_stamped == target_label).float().mean())

    stealth_preds = predict_batched(clean_model, stamped)
    stealth = float((stealth_preds == y).float().mean())
    return AttackMetrics(benign, asr, stealth).validate()
