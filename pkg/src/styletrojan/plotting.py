"""Report plots: accuracy/ASR curves and per-round compromised-vs-invertible
neuron bar charts. All figures render deterministically (fixed size/dpi, no
timestamps) so re-emitting from the same report reproduces identical pixels.
"""

import os
import warnings

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_training_curve(log, path, title="training"):
    """Line chart of per-epoch benign accuracy and attack success rate."""
    if not log:
        warnings.warn(f"empty training log; skipping {path}")
        return None
    epochs = [row["epoch"] for row in log]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if any("benign_acc" in r for r in log):
        ax.plot(epochs, [r.get("benign_acc") for r in log], marker="o", label="benign accuracy")
    if any("asr" in r for r in log):
        ax.plot(epochs, [r.get("asr") for r in log], marker="s", label="attack success rate")
    if not ax.lines:
        ax.plot(epochs, [r["loss"] for r in log], marker="o", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylim(bottom=0)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_round_metrics(rounds, initial, path):
    """Benign accuracy / ASR across detox rounds (round 0 = pre-detox)."""
    if not rounds:
        warnings.warn(f"no detox rounds; skipping {path}")
        return None
    xs = [0] + [r["round"] for r in rounds]
    benign = [initial["benign_accuracy"]] + [r["benign_accuracy"] for r in rounds]
    asr = [initial["attack_success_rate"]] + [r["attack_success_rate"] for r in rounds]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(xs, benign, marker="o", label="benign accuracy")
    ax.plot(xs, asr, marker="s", label="attack success rate")
    ax.set_xlabel("detox round")
    ax.set_ylim(0, 1.05)
    ax.set_xticks(xs)
    ax.legend(loc="lower right", fontsize=8)
    ax.set_title("metrics across detox rounds")
    fig.tight_layout()
    return _save(fig, path)


def plot_neuron_bars(round_report, path):
    """Grouped bars per layer: compromised vs invertible neuron counts."""
    comp = round_report["per_layer_compromised"]
    inv = round_report["per_layer_invertible"]
    if not comp:
        warnings.warn(f"round {round_report['round']} has no compromised neurons; skipping {path}")
        return None
    layers = sorted(comp)
    xs = range(len(layers))
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(layers)), 3.2))
    ax.bar([i - 0.2 for i in xs], [comp[l] for l in layers], width=0.4, label="compromised")
    ax.bar([i + 0.2 for i in xs], [inv.get(l, 0) for l in layers], width=0.4, label="invertible")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(layers, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("neurons")
    ax.set_title(f"detox round {round_report['round']}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def emit_plots(report, out_dir):
    """Render every chart the report has data for; returns written paths."""
    paths = []
    poison_log = report.get("poison", {}).get("log")
    if poison_log:
        p = plot_training_curve(poison_log, os.path.join(out_dir, "poison_training.png"),
                                title="poison training")
        paths.append(p)
    detox = report.get("detox")
    if detox and detox.get("rounds"):
        p = plot_round_metrics(detox["rounds"], detox["initial_metrics"],
                               os.path.join(out_dir, "detox_metrics.png"))
        if p:
            paths.append(p)
        for rnd in detox["rounds"]:
            p = plot_neuron_bars(rnd, os.path.join(out_dir, f"detox_round{rnd['round']}_neurons.png"))
            if p:
                paths.append(p)
    return [p for p in paths if p]
