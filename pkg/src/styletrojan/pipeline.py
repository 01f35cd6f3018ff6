"""Pipeline orchestration: stage execution in order, checkpoint resume,
experiment directory management, and the consolidated report."""

import csv
import dataclasses
import json
import os
import shutil
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import attack, scanners
from .config import PIPELINE_STAGES, ExperimentConfig
from .cyclegan import GanTrainConfig, apply_trigger, train_trigger_generator
from .data import DatasetSpec, child_seed, images_to_array, labels_to_array, load_dataset, save_grid, write_manifest
from .detox import DetoxConfig, DetoxRoundReport, detoxify
from .errors import ContractError
from .models import build_classifier, load_checkpoint, save_checkpoint
from .plotting import emit_plots
from .robustness import (AdvTrainConfig, RobustnessReport, adversarial_train,
                         smoothing_suite, transform_defense_eval)


class PipelineError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class ExperimentReport:
    experiment_id: str
    config: dict
    stages_run: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    baseline_accuracy: float = None
    gan: dict = None
    poison: dict = None
    detox: dict = None
    attack_metrics: dict = None
    scans: dict = None
    robustness: dict = None
    timings: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    def to_dict(self):
        return dataclasses.asdict(self)


def write_json(obj, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
    return path


def write_csv(rows, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    if not rows:
        return path
    keys = sorted({k for row in rows for k in row})
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
    return path


class ExperimentDirs:
    def __init__(self, root):
        self.root = root
        self.checkpoints = os.path.join(root, "checkpoints")
        self.reports = os.path.join(root, "reports")
        self.plots = os.path.join(root, "plots")
        self.samples = os.path.join(root, "samples")

    def create(self):
        for d in (self.checkpoints, self.reports, self.plots, self.samples):
            os.makedirs(d, exist_ok=True)
        return self

    def checkpoint(self, name):
        return os.path.join(self.checkpoints, name)


class _Lock:
    """One pipeline run owns its experiment directory exclusively."""

    def __init__(self, root):
        self.path = os.path.join(root, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ContractError(f"experiment directory is locked: {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        if os.path.exists(self.path):
            os.remove(self.path)
        return False


class PipelineRun:
    """Holds the in-flight models and artifacts while stages execute."""

    def __init__(self, config, resume=True):
        self.config = config
        self.resume = resume
        self.dirs = None
        self.bundle = None
        self.clean_model = None
        self.generator = None
        self.poisoned_model = None
        self.final_model = None
        self.report = ExperimentReport(config.experiment_id, config.to_dict())

    # -- artifact access with checkpoint fallback ---------------------------

    def _load_if_exists(self, name):
        path = self.dirs.checkpoint(name)
        if os.path.exists(path):
            model, _ = load_checkpoint(path, image_shape=self.bundle.image_shape)
            return model
        return None

    def need_clean(self):
        if self.clean_model is None:
            self.clean_model = self._load_if_exists("clean.npz")
        if self.clean_model is None:
            raise ContractError("clean checkpoint missing; run the train-clean stage first")
        return self.clean_model

    def need_generator(self):
        if self.generator is None:
            self.generator = self._load_if_exists("generator_a2b.npz")
        if self.generator is None:
            raise ContractError("generator checkpoint missing; run the train-generator stage first")
        return self.generator

    def need_poisoned(self):
        if self.poisoned_model is None:
            self.poisoned_model = self._load_if_exists("poisoned.npz")
        if self.poisoned_model is None:
            raise ContractError("poisoned checkpoint missing; run the poison stage first")
        return self.poisoned_model

    def need_final(self):
        """The model under audit: detoxified when available, else poisoned."""
        if self.final_model is None:
            self.final_model = self._load_if_exists("detoxed.npz")
        if self.final_model is None:
            self.final_model = self.need_poisoned()
        return self.final_model

    # -- stages --------------------------------------------------------------

    def stage_train_clean(self):
        cfg = self.config
        path = self.dirs.checkpoint("clean.npz")
        if self.resume and os.path.exists(path):
            self.clean_model, _ = load_checkpoint(path)
        else:
            model = build_classifier(cfg.model.arch, self.bundle.n_classes,
                                     self.bundle.image_shape, seed=cfg.model.seed)
            tc = attack.TrainConfig(cfg.train_clean.epochs, cfg.train_clean.lr,
                                    cfg.train_clean.batch, cfg.train_clean.optimizer,
                                    seed=child_seed(cfg.seed, "train-clean"))
            self.clean_model, log = attack.train_clean(model, self.bundle, tc)
            save_checkpoint(self.clean_model, path, "clean", seed=cfg.model.seed)
            write_csv(log, os.path.join(self.dirs.reports, "clean_log.csv"))
        self.report.checkpoints["clean"] = path
        x = torch.from_numpy(images_to_array(self.bundle.test))
        y = torch.from_numpy(labels_to_array(self.bundle.test))
        self.report.baseline_accuracy = attack.accuracy(self.clean_model, x, y)

    def stage_train_generator(self):
        cfg = self.config
        path = self.dirs.checkpoint("generator_a2b.npz")
        if self.resume and os.path.exists(path):
            self.generator, _ = load_checkpoint(path)
            return
        g = cfg.gan
        state = train_trigger_generator(self.bundle, GanTrainConfig(
            g.epochs, g.batch, g.lr, g.cycle_weight, g.identity_weight,
            g.domain_a_fraction, g.style_count, g.depth, g.base,
            seed=child_seed(cfg.seed, "gan")))
        self.generator = state.trigger_generator
        save_checkpoint(state.g_a2b, path, "generator-a2b", seed=cfg.seed)
        save_checkpoint(state.g_b2a, self.dirs.checkpoint("generator_b2a.npz"), "generator-b2a", seed=cfg.seed)
        save_checkpoint(state.d_a, self.dirs.checkpoint("disc_a.npz"), "discriminator-a", seed=cfg.seed)
        save_checkpoint(state.d_b, self.dirs.checkpoint("disc_b.npz"), "discriminator-b", seed=cfg.seed)
        write_csv(state.loss_log, os.path.join(self.dirs.reports, "gan_losses.csv"))
        self.report.gan = {"epochs": state.epoch, "aborted": state.aborted,
                           "final_losses": state.loss_log[-1] if state.loss_log else None}
        self.report.checkpoints["generator-a2b"] = path
        originals = self.bundle.test[:8]
        px = images_to_array(originals)
        stamped = apply_trigger(self.generator, px)
        save_grid([list(px), list(stamped)], os.path.join(self.dirs.samples, "stamped_grid.png"))

    def stage_poison(self):
        cfg = self.config
        path = self.dirs.checkpoint("poisoned.npz")
        if self.resume and os.path.exists(path):
            self.poisoned_model, _ = load_checkpoint(path)
            return
        clean, generator = self.need_clean(), self.need_generator()
        pset = attack.make_poisoned_train_set(self.bundle, generator, cfg.poison.target_label,
                                              cfg.poison.fraction, child_seed(cfg.seed, "poison-plan"))
        probe = attack.make_probe(self.bundle, generator, cfg.poison.target_label)
        baseline = self.report.baseline_accuracy
        if baseline is None:
            x = torch.from_numpy(images_to_array(self.bundle.test))
            y = torch.from_numpy(labels_to_array(self.bundle.test))
            baseline = attack.accuracy(clean, x, y)
        tc = attack.TrainConfig(cfg.poison.epochs, cfg.poison.lr, cfg.poison.batch,
                                cfg.poison.optimizer, seed=child_seed(cfg.seed, "poison-train"),
                                min_benign=baseline - cfg.poison.benign_margin,
                                min_asr=cfg.poison.min_asr)
        self.poisoned_model, log = attack.poison_train(clean, pset, tc, probe=probe)
        save_checkpoint(self.poisoned_model, path, "poisoned", seed=cfg.seed)
        write_csv(log, os.path.join(self.dirs.reports, "poison_log.csv"))
        self.report.checkpoints["poisoned"] = path
        self.report.poison = {"n_poisoned": len(pset.poisoned), "log": log}

    def stage_detox(self):
        cfg = self.config
        final_path = self.dirs.checkpoint("detoxed.npz")
        rounds_path = os.path.join(self.dirs.reports, "detox_rounds.json")
        if self.resume and os.path.exists(final_path) and os.path.exists(rounds_path):
            self.final_model, _ = load_checkpoint(final_path)
            with open(rounds_path) as f:
                self.report.detox = json.load(f)
            return
        model, generator = self.need_poisoned(), self.need_generator()
        d = cfg.detox
        dc = DetoxConfig(
            rounds_max=d.rounds_max, importance_frac=d.importance_frac,
            elevation_ratio=d.elevation_ratio, detox_fraction=d.detox_fraction,
            asr_threshold=d.asr_threshold, asr_floor=d.asr_floor, pair_count=d.pair_count,
            target_label=cfg.poison.target_label, poison_fraction=cfg.poison.fraction,
            poison_seed=child_seed(cfg.seed, "poison-plan"),
            injector_epochs=d.injector_epochs, injector_lr=d.injector_lr,
            injector_base=d.injector_base, weights=d.loss_weights(), optimizer=d.optimizer,
            retrain_epochs=d.retrain_epochs, retrain_lr=d.retrain_lr,
            retrain_batch=cfg.poison.batch, max_scan_neurons=d.max_scan_neurons,
            seed=child_seed(cfg.seed, "detox"))
        result = detoxify(model, generator, self.bundle, dc)
        self.final_model = result.model
        save_checkpoint(self.final_model, final_path,
                        f"detox-round-{len(result.rounds)}", seed=cfg.seed)
        self.report.checkpoints["detoxed"] = final_path
        for art in result.artifacts:
            snap = build_classifier(cfg.model.arch, self.bundle.n_classes,
                                    self.bundle.image_shape, seed=cfg.model.seed)
            snap.load_state_dict(art["model_state"])
            rp = self.dirs.checkpoint(f"detox-round-{art['round']}.npz")
            save_checkpoint(snap, rp, f"detox-round-{art['round']}", seed=cfg.seed)
            self.report.checkpoints[f"detox-round-{art['round']}"] = rp
            if art["detoxicants"]:
                save_grid([art["detoxicants"]],
                          os.path.join(self.dirs.samples, f"detox_round{art['round']}_samples.png"))
        self.report.detox = {
            "initial_metrics": result.initial_metrics,
            "rounds": [dataclasses.asdict(r) for r in result.rounds],
        }
        write_json(self.report.detox, rounds_path)

    def stage_evaluate(self):
        cfg = self.config
        clean, generator = self.need_clean(), self.need_generator()
        metrics = {}
        poisoned = self.need_poisoned()
        metrics["poisoned"] = attack.evaluate_attack(
            poisoned, clean, generator, self.bundle.test, cfg.poison.target_label).to_dict()
        detoxed = self._load_if_exists("detoxed.npz") if self.final_model is None else self.final_model
        if detoxed is not None and detoxed is not poisoned:
            metrics["detoxed"] = attack.evaluate_attack(
                detoxed, clean, generator, self.bundle.test, cfg.poison.target_label).to_dict()
        self.report.attack_metrics = metrics
        write_json(metrics, os.path.join(self.dirs.reports, "attack_metrics.json"))

    def stage_scan(self):
        cfg = self.config
        model = self.need_final()
        samples = self.bundle.test[:cfg.scan.sample_count]
        out = {}
        if "nc" in cfg.scan.methods:
            nc_cfg = scanners.NcScanConfig(cfg.scan.nc_steps, cfg.scan.nc_lr,
                                           cfg.scan.nc_mask_weight, cfg.scan.nc_batch,
                                           seed=child_seed(cfg.seed, "nc"))
            rep = scanners.nc_scan(model, samples, nc_cfg, out_dir=self.dirs.samples)
            out["nc"] = rep.to_dict()
            write_json(out["nc"], os.path.join(self.dirs.reports, "scan_nc.json"))
        if "abs" in cfg.scan.methods:
            abs_cfg = scanners.AbsScanConfig(tuple(cfg.scan.abs_stim_levels), cfg.scan.abs_top_k,
                                             cfg.scan.abs_re_steps, cfg.scan.abs_re_lr,
                                             cfg.scan.abs_asr_threshold,
                                             seed=child_seed(cfg.seed, "abs"))
            rep = scanners.abs_scan(model, samples, abs_cfg, out_dir=self.dirs.samples)
            out["abs"] = rep.to_dict()
            write_json(out["abs"], os.path.join(self.dirs.reports, "scan_abs.json"))
        self.report.scans = out

    def stage_robustness(self):
        cfg = self.config
        r = cfg.robustness
        model, generator = self.need_final(), self.need_generator()
        report = RobustnessReport()
        if "adv" in r.suites:
            before = attack.evaluate_attack(model, self.need_clean(), generator,
                                            self.bundle.test, cfg.poison.target_label)
            for method in r.adv_methods:
                ac = AdvTrainConfig(r.adv_epochs, r.adv_lr, r.adv_batch, r.fgsm_eps,
                                    r.pgd_eps, r.pgd_steps, r.pgd_step_size,
                                    seed=child_seed(cfg.seed, f"adv-{method}"))
                hardened = adversarial_train(model, self.bundle.train, method, ac)
                after = attack.evaluate_attack(hardened, self.need_clean(), generator,
                                               self.bundle.test, cfg.poison.target_label)
                report.adv_training[method] = {
                    "before": {"benign": before.benign_accuracy, "asr": before.attack_success_rate},
                    "after": {"benign": after.benign_accuracy, "asr": after.attack_success_rate},
                }
        if "smooth" in r.suites:
            smooth_samples = self.bundle.test[:r.smooth_samples]
            report.smoothing = smoothing_suite(model, generator, smooth_samples, r.smooth_sigmas,
                                               r.smooth_n0, r.smooth_n, r.smooth_alpha,
                                               cfg.poison.target_label,
                                               seed=child_seed(cfg.seed, "smooth"))
        if "transforms" in r.suites:
            report.transforms = transform_defense_eval(model, generator, self.bundle.test,
                                                       r.transforms, cfg.poison.target_label,
                                                       seed=child_seed(cfg.seed, "transforms"))
        report.validate()
        self.report.robustness = report.to_dict()
        write_json(self.report.robustness, os.path.join(self.dirs.reports, "robustness.json"))
        rows = [{"transform": k, **v} for k, v in report.transforms.items()]
        write_csv(rows, os.path.join(self.dirs.reports, "transforms.csv"))


STAGE_FUNCS = {
    "train-clean": PipelineRun.stage_train_clean,
    "train-generator": PipelineRun.stage_train_generator,
    "poison": PipelineRun.stage_poison,
    "detox": PipelineRun.stage_detox,
    "evaluate": PipelineRun.stage_evaluate,
    "scan": PipelineRun.stage_scan,
    "robustness": PipelineRun.stage_robustness,
}


def run_pipeline(config, resume=True):
    """Execute the configured stages in pipeline order.

    Stages not named in config.stages are skipped (their artifacts are
    loaded from checkpoints when later stages need them). Any stage failure
    truncates the run; the partial report is written and the error re-raised
    as PipelineError.
    """
    config.validate()
    if not os.path.exists(config.dataset.root):
        raise IOError(f"dataset path does not exist: {config.dataset.root}")

    run = PipelineRun(config, resume=resume)
    exp_dir = os.path.join(config.out_dir, config.experiment_id)
    run.dirs = ExperimentDirs(exp_dir).create()
    report_path = os.path.join(run.dirs.reports, "experiment.json")

    with _Lock(exp_dir):
        spec = DatasetSpec(layout=config.dataset.layout, image_size=config.dataset.image_size,
                           classes=config.dataset.classes,
                           split_fraction=config.dataset.split_fraction,
                           seed=config.dataset.seed, style_path=config.dataset.style_path)
        run.bundle = load_dataset(config.dataset.root, spec)
        write_manifest(run.bundle, os.path.join(run.dirs.reports, "manifest.json"),
                       config.dataset.seed)

        for stage in PIPELINE_STAGES:
            if stage not in config.stages:
                continue
            t0 = time.monotonic()
            try:
                STAGE_FUNCS[stage](run)
            except Exception as exc:
                run.report.errors.append({"stage": stage, "error": f"{type(exc).__name__}: {exc}"})
                run.report.timings[stage] = time.monotonic() - t0
                write_json(run.report.to_dict(), report_path)
                raise PipelineError(f"stage {stage!r} failed: {exc}", run.report) from exc
            run.report.timings[stage] = time.monotonic() - t0
            run.report.stages_run.append(stage)

        emit_plots(run.report.to_dict(), run.dirs.plots)
        write_json(run.report.to_dict(), report_path)
    return run.report


def metrics_view(report_dict):
    """The report minus wall-clock noise: what determinism guarantees cover."""
    view = dict(report_dict)
    view.pop("timings", None)
    return view
