"""Post-hoc analysis: multiply-accumulate accounting, gate-firing statistics,
accuracy matrices, and report/plot emission.

MAC conventions: one MAC is one multiply-add; biases, ReLU, and pooling are
excluded. A convolution site costs active_out * active_in * k^2 * H_out *
W_out per example, where active_in is the previous gated site's live channel
count (zeroed channels are skippable). Gate modules and linear heads are
counted and itemized separately. A secondary "unit input-channel" total drops
the active_in factor for comparability with coarser counting schemes.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import torch

from .backbone import ContinualGatedNet
from .consolidation import RelevanceTable, estimate_firing
from .data import TaskStream
from .errors import ConfigError, DataError
from .gates import GATE_HIDDEN_UNITS
from .taskpred import TASK_CLASSIFIER_HIDDEN

MODES = ("dense", "ti", "ci")


@dataclass
class MacReport:
    """Average per-example MAC counts, itemized by component."""

    mode: str
    upto_task: int | None
    per_site_conv: list[float]            # full convention, averaged
    gate_modules: float
    heads: float
    task_classifier: float
    unit_cin_total: float                 # drops the input-channel factor
    per_stream_conv: dict[int, float] = field(default_factory=dict)
    num_examples: int = 0

    @property
    def conv_total(self) -> float:
        return sum(self.per_site_conv)

    @property
    def total(self) -> float:
        return (self.conv_total + self.gate_modules + self.heads
                + self.task_classifier)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "upto_task": self.upto_task,
                "per_site_conv": self.per_site_conv,
                "conv_total": self.conv_total,
                "gate_modules": self.gate_modules,
                "heads": self.heads,
                "task_classifier": self.task_classifier,
                "total": self.total,
                "unit_cin_total": self.unit_cin_total,
                "per_stream_conv": {str(k): v for k, v in
                                    sorted(self.per_stream_conv.items())},
                "num_examples": self.num_examples}


def dense_conv_macs(model: ContinualGatedNet) -> tuple[list[float], float]:
    """Closed-form dense backbone cost and its unit input-channel variant."""
    per_site, unit_cin = [], 0.0
    for site in model.sites():
        k = site.conv.kernel_size[0] * site.conv.kernel_size[1]
        h, w = site.out_hw
        per_site.append(float(site.in_channels * site.out_channels * k * h * w))
        unit_cin += float(site.out_channels * k * h * w)
    return per_site, unit_cin


def _gate_module_macs(model: ContinualGatedNet) -> float:
    """One task's gate modules across all sites: two linear maps plus the
    normalization affine."""
    total = 0.0
    for site in model.sites():
        total += (site.in_channels * GATE_HIDDEN_UNITS
                  + GATE_HIDDEN_UNITS * site.out_channels
                  + GATE_HIDDEN_UNITS)
    return total


def _site_unit_geometry(model: ContinualGatedNet):
    geo = []
    for unit in model.units:
        for site in unit.sites():
            k = site.conv.kernel_size[0] * site.conv.kernel_size[1]
            h, w = site.out_hw
            geo.append(k * h * w)
    return geo


def mac_count(model: ContinualGatedNet, stream: TaskStream | None, mode: str,
              upto_t: int | None = None, max_per_task: int = 512,
              strict_mask: bool = True) -> MacReport:
    """Average inference cost per example.

    dense: the ungated backbone, no data needed.
    ti: each task's test examples through their own stream.
    ci: every example runs all streams plus the task classifier and one head.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    per_site_dense, unit_cin_dense = dense_conv_macs(model)
    if mode == "dense":
        return MacReport(mode="dense", upto_task=None,
                         per_site_conv=per_site_dense,
                         gate_modules=0.0, heads=0.0, task_classifier=0.0,
                         unit_cin_total=unit_cin_dense)
    if stream is None:
        raise ConfigError(f"{mode} accounting needs a task stream")
    tasks = model.known_tasks()
    if upto_t is not None:
        tasks = [t for t in tasks if t <= upto_t]
    t_count = len(tasks)
    feature_width = model.feature_width
    gate_macs_one_task = _gate_module_macs(model)
    was_training = model.training
    model.eval()
    geo = _site_unit_geometry(model)
    n_sites = len(geo)
    site_sums = torch.zeros(n_sites)
    stream_sums = {t: 0.0 for t in tasks}
    unit_cin_sum = 0.0
    heads_sum = 0.0
    total_examples = 0
    try:
        with torch.no_grad():
            for data_task in tasks:
                td = stream.task(data_task)
                x = td.test_x[:max_per_task]
                n = x.shape[0]
                total_examples += n
                run_streams = [data_task] if mode == "ti" else tasks
                for s in run_streams:
                    per_site, unit_cin = _per_site_macs(model, x, s,
                                                        strict_mask, geo)
                    site_sums += per_site.sum(dim=0)
                    stream_sums[s] += float(per_site.sum())
                    unit_cin_sum += unit_cin
                # one head answers per example: the true task's in TI, the
                # predicted task's in CI (same width across tasks here)
                heads_sum += n * feature_width * model.task_classes[data_task]
    finally:
        model.train(was_training)
    gate_total = gate_macs_one_task * (1 if mode == "ti" else t_count)
    clf = 0.0
    if mode == "ci":
        clf = (t_count * feature_width * TASK_CLASSIFIER_HIDDEN
               + TASK_CLASSIFIER_HIDDEN * t_count)
    return MacReport(
        mode=mode, upto_task=max(tasks),
        per_site_conv=[float(v) / total_examples for v in site_sums],
        gate_modules=gate_total,
        heads=heads_sum / total_examples,
        task_classifier=clf,
        unit_cin_total=unit_cin_sum / total_examples,
        per_stream_conv={t: v / total_examples for t, v in stream_sums.items()},
        num_examples=total_examples)


def _per_site_macs(model, x, task, strict_mask, geo):
    """Per-example conv MACs by site, plus the unit input-channel total
    (active_out * k^2 * H * W summed over sites and examples)."""
    _, records = model.forward_stream(x, task, gate_mode="eval",
                                      strict_mask=strict_mask, collect=True)
    n = x.shape[0]
    active_in = torch.full((n,), float(model.arch.in_channels))
    out = torch.zeros(n, len(geo))
    unit_cin = 0.0
    rec_pos = 0
    site_pos = 0
    for unit in model.units:
        n_unit = len(unit.sites())
        unit_records = records[rec_pos:rec_pos + n_unit]
        acts, active_in = unit.mac_activity(active_in, unit_records)
        for (a_in, a_out) in acts:
            out[:, site_pos] = geo[site_pos] * a_in * a_out
            unit_cin += float(geo[site_pos] * a_out.sum())
            site_pos += 1
        rec_pos += n_unit
    return out, unit_cin


@dataclass
class GateFiringReport:
    """Firing probability of every gate, per task, on that task's own stream
    and validation data."""

    entries: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)

    def tasks(self) -> list[int]:
        return sorted({t for (_, t) in self.entries})

    def sites(self) -> list[int]:
        return sorted({s for (s, _) in self.entries})

    def never_firing(self) -> list[tuple[int, int]]:
        """(site, gate) pairs with zero estimated firing across all tasks."""
        out = []
        for s in self.sites():
            stacked = torch.stack([self.entries[(s, t)] for t in self.tasks()])
            silent = (stacked == 0).all(dim=0)
            out.extend((s, int(g)) for g in silent.nonzero(as_tuple=True)[0])
        return out

    def rows(self):
        for (site, task), values in sorted(self.entries.items()):
            for gate, v in enumerate(values.tolist()):
                yield {"site": site, "gate": gate, "task": task,
                       "firing_probability": v}


def gate_firing_report(model: ContinualGatedNet, stream: TaskStream,
                       samples_per_input: int = 1, stochastic: bool = True,
                       generator: torch.Generator | None = None) -> GateFiringReport:
    report = GateFiringReport()
    for t in model.known_tasks():
        td = stream.task(t)
        firing = estimate_firing(model, td.val_x, t,
                                 samples_per_input=samples_per_input,
                                 stochastic=stochastic, generator=generator,
                                 strict_mask=True)
        for site, values in enumerate(firing):
            report.entries[(site, t)] = values
    return report


@dataclass
class AccuracyMatrix:
    """accuracy[mode][(after_task, task)] for forgetting analysis."""

    entries: dict[str, dict[tuple[int, int], float]] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "AccuracyMatrix":
        m = cls()
        for row in rows:
            mode = m.entries.setdefault(row["mode"], {})
            mode[(row["after_task"], row["task"])] = row["accuracy"]
        return m

    def get(self, mode: str, after_task: int, task: int) -> float:
        return self.entries[mode][(after_task, task)]

    def row(self, mode: str, after_task: int) -> dict[int, float]:
        return {task: acc for (a, task), acc in self.entries[mode].items()
                if a == after_task}

    def average(self, mode: str, after_task: int) -> float:
        row = self.row(mode, after_task)
        return sum(row.values()) / len(row)

    def rows(self):
        for mode in sorted(self.entries):
            for (a, t), acc in sorted(self.entries[mode].items()):
                yield {"mode": mode, "after_task": a, "task": t,
                       "accuracy": acc}


@dataclass
class RunArtifacts:
    """Everything emit_reports writes; assembled by the CLI analyze command."""

    manifest: dict
    accuracy: AccuracyMatrix
    mac_reports: dict[str, MacReport]
    firing: GateFiringReport
    relevance: RelevanceTable
    buffer_stats: dict
    ci_accuracy_by_capacity: dict[int, float] = field(default_factory=dict)


def emit_reports(artifacts: RunArtifacts, out_dir: str) -> list[str]:
    """Write CSV/JSON reports plus plots; validates inputs before touching
    the filesystem so a bad run leaves no partial output."""
    if not artifacts.manifest:
        raise DataError("empty run: no manifest to report")
    if not artifacts.accuracy.entries:
        raise DataError("empty run: no accuracy entries to report")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def _csv(name, fieldnames, rows):
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
        written.append(path)

    def _json(name, payload):
        path = os.path.join(out_dir, name)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        written.append(path)

    acc_rows = list(artifacts.accuracy.rows())
    _csv("accuracy_matrix.csv", ["mode", "after_task", "task", "accuracy"],
         acc_rows)
    _json("accuracy_matrix.json", acc_rows)
    mac_payload = {mode: rep.to_dict()
                   for mode, rep in artifacts.mac_reports.items()}
    _json("mac_report.json", mac_payload)
    mac_rows = []
    for mode, rep in sorted(artifacts.mac_reports.items()):
        for site, macs in enumerate(rep.per_site_conv):
            mac_rows.append({"mode": mode, "site": site, "conv_macs": macs})
    _csv("mac_report.csv", ["mode", "site", "conv_macs"], mac_rows)
    firing_rows = list(artifacts.firing.rows())
    _csv("gate_firing.csv", ["site", "gate", "task", "firing_probability"],
         firing_rows)
    _json("gate_firing.json", firing_rows)
    _json("relevance.json", list(artifacts.relevance.rows()))
    _csv("relevance.csv", ["site", "kernel", "task", "relevance"],
         list(artifacts.relevance.rows()))
    _json("buffer_stats.json", artifacts.buffer_stats)
    written.extend(_write_plots(artifacts, out_dir))
    return written


def _write_plots(artifacts: RunArtifacts, out_dir: str) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []

    def _save(fig, name):
        path = os.path.join(out_dir, name)
        # scrubbed metadata keeps regenerated plots byte-identical
        fig.savefig(path, dpi=110, metadata={"Software": None})
        plt.close(fig)
        written.append(path)

    firing = artifacts.firing
    if firing.entries:
        site = firing.sites()[0]
        tasks = firing.tasks()
        fig, axes = plt.subplots(len(tasks), 1, figsize=(8, 1.6 * len(tasks)),
                                 sharex=True, squeeze=False)
        order = None
        for ax_row, t in zip(axes[:, 0], tasks):
            probs = firing.entries[(site, t)]
            if order is None:
                total = sum(firing.entries[(site, u)] for u in tasks)
                order = torch.argsort(total, descending=True)
            ax_row.bar(range(len(probs)), probs[order].tolist(), width=1.0)
            ax_row.set_ylabel(f"task {t}")
            ax_row.set_ylim(0, 1)
        axes[-1, 0].set_xlabel(f"gates of site {site} (sorted by total usage)")
        fig.suptitle("Gate firing probability by task")
        _save(fig, "gate_usage.png")

    modes = [m for m in ("ti", "ci") if m in artifacts.accuracy.entries]
    if modes:
        fig, ax = plt.subplots(figsize=(6, 4))
        for mode in modes:
            after = sorted({a for (a, _) in artifacts.accuracy.entries[mode]})
            ax.plot(after, [artifacts.accuracy.average(mode, a) for a in after],
                    marker="o", label=mode.upper())
        ax.set_xlabel("tasks observed")
        ax.set_ylabel("average accuracy")
        ax.set_ylim(0, 1.02)
        ax.legend()
        fig.tight_layout()
        _save(fig, "accuracy_vs_tasks.png")

    if artifacts.ci_accuracy_by_capacity:
        caps = sorted(artifacts.ci_accuracy_by_capacity)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(caps, [artifacts.ci_accuracy_by_capacity[c] for c in caps],
                marker="s")
        ax.set_xlabel("episodic buffer capacity")
        ax.set_ylabel("final class-incremental accuracy")
        fig.tight_layout()
        _save(fig, "accuracy_vs_buffer.png")

    macs = artifacts.mac_reports
    if macs:
        fig, ax = plt.subplots(figsize=(6, 4))
        labels = sorted(macs)
        ax.bar(labels, [macs[m].total for m in labels])
        ax.set_ylabel("average MACs per example")
        fig.tight_layout()
        _save(fig, "macs_by_mode.png")
    return written
