"""Sequential task optimization: the joint class/task/sparsity objective,
model selection on held-out data, consolidation, and resumable checkpoints.

One task trains at a time with SGD (momentum, weight decay, gradient
clipping). The class cross-entropy and sparsity penalty flow through the
current task's stream; the task cross-entropy trains only the task classifier
on rehearsal batches whose stream features are treated as fixed inputs.
Frozen kernels receive exactly zero update: loss gradients and weight decay
are masked before the optimizer step.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .backbone import FREE, ArchSpec, ContinualGatedNet
from .checkpointing import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .consolidation import (RelevanceTable, capacity_report, compute_relevance,
                            consolidate, mask_frozen_grads_)
from .data import TaskStream
from .errors import CapacitySaturationError, ConfigError, DivergenceError
from .gates import SparsityConfig, sparsity_loss
from .replay import EpisodicBuffer, make_rehearsal_batch
from .taskpred import (TaskClassifier, parallel_forward, predict_taskagnostic,
                       task_features)

AUDIT_SAMPLE = 100  # test inputs per task pinned for bit-identity audits


def setup_determinism(seed: int, threads: int = 0) -> dict:
    """Process-wide numeric determinism; returns flags for the run manifest."""
    torch.manual_seed(seed)
    torch.set_flush_denormal(True)
    if threads > 0:
        torch.set_num_threads(threads)
    flags = {"threads": torch.get_num_threads(), "bitwise_deterministic": True}
    try:
        torch.use_deterministic_algorithms(True)
    except RuntimeError:
        flags["bitwise_deterministic"] = False
    return flags


@dataclass
class EvalResult:
    mode: str
    upto_task: int
    per_task: dict[int, float]
    average: float
    task_classifier_accuracy: float | None = None
    logs: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"mode": self.mode, "upto_task": self.upto_task,
               "per_task": {str(k): v for k, v in sorted(self.per_task.items())},
               "average": self.average}
        if self.task_classifier_accuracy is not None:
            out["task_classifier_accuracy"] = self.task_classifier_accuracy
        return out


def evaluate(model: ContinualGatedNet, stream: TaskStream, mode: str,
             upto_t: int | None = None, batch_size: int = 1024,
             strict_mask: bool = True, collect_logs: bool = False) -> EvalResult:
    """Test-set accuracy over tasks 1..upto_t.

    ti: ground-truth task labels select the stream and head.
    ci: the task classifier selects them; also reports its own accuracy and
    checks that joint accuracy never exceeds it.
    """
    tasks = model.known_tasks()
    if upto_t is not None:
        tasks = [t for t in tasks if t <= upto_t]
    if not tasks:
        raise ConfigError("no trained tasks to evaluate")
    was_training = model.training
    model.eval()
    try:
        if mode == "ti":
            result = _evaluate_ti(model, stream, tasks, batch_size, strict_mask)
        elif mode == "ci":
            result = _evaluate_ci(model, stream, tasks, batch_size, strict_mask,
                                  collect_logs)
        else:
            raise ConfigError(f"unknown evaluation mode {mode!r}")
    finally:
        model.train(was_training)
    return result


def _evaluate_ti(model, stream, tasks, batch_size, strict_mask) -> EvalResult:
    per_task = {}
    with torch.no_grad():
        for t in tasks:
            td = stream.task(t)
            correct = 0
            for s in range(0, td.test_x.shape[0], batch_size):
                x = td.test_x[s:s + batch_size]
                y = td.test_y[s:s + batch_size]
                logits = model.forward_multihead(x, t, gate_mode="eval",
                                                 strict_mask=strict_mask)
                correct += int((logits.argmax(dim=1) == y).sum())
            per_task[t] = correct / td.test_x.shape[0]
    avg = sum(per_task.values()) / len(per_task)
    return EvalResult(mode="ti", upto_task=max(tasks), per_task=per_task,
                      average=avg)


def _evaluate_ci(model, stream, tasks, batch_size, strict_mask,
                 collect_logs) -> EvalResult:
    joint_correct = {t: 0 for t in tasks}
    task_correct_total = 0
    total = 0
    counts = {}
    logs: list[dict] = []
    with torch.no_grad():
        for t in tasks:
            td = stream.task(t)
            counts[t] = td.test_x.shape[0]
            for s in range(0, td.test_x.shape[0], batch_size):
                x = td.test_x[s:s + batch_size]
                y = td.test_y[s:s + batch_size]
                pred = predict_taskagnostic(model, x, strict_mask=strict_mask)
                task_ok = pred.task_ids == t
                joint_ok = task_ok & (pred.class_ids == y)
                task_correct_total += int(task_ok.sum())
                joint_correct[t] += int(joint_ok.sum())
                total += x.shape[0]
                if collect_logs:
                    for j in range(x.shape[0]):
                        logs.append({
                            "true_task": t,
                            "pred_task": int(pred.task_ids[j]),
                            "true_class": int(y[j]),
                            "pred_class": int(pred.class_ids[j]),
                            "task_probs": [round(float(p), 8)
                                           for p in pred.task_probs[j]],
                        })
    per_task = {t: joint_correct[t] / counts[t] for t in tasks}
    class_il = sum(joint_correct.values()) / total
    task_acc = task_correct_total / total
    # A wrong task forces a wrong class (class sets are disjoint), so the
    # joint accuracy can never exceed the task accuracy.
    assert class_il <= task_acc, (class_il, task_acc)
    return EvalResult(mode="ci", upto_task=max(tasks), per_task=per_task,
                      average=class_il, task_classifier_accuracy=task_acc,
                      logs=logs)


@dataclass
class TaskOutcome:
    task_id: int
    best_epoch: int
    best_val_accuracy: float
    consolidation: dict
    capacity: dict
    ti_eval: dict
    ci_eval: dict | None


class ContinualTrainer:
    """Drives the task sequence over one model, stream, and config."""

    def __init__(self, model: ContinualGatedNet, stream: TaskStream,
                 config: TrainConfig, run_dir: str | None = None):
        config.validate()
        self.model = model
        self.stream = stream
        self.config = config
        self.run_dir = run_dir
        self.generator = torch.Generator().manual_seed(config.seed)
        self.buffer = EpisodicBuffer(config.buffer_capacity)
        self.relevance_table = RelevanceTable()
        self.sparsity = SparsityConfig(config.lambda_s, config.sparsity_patience)
        self.completed_tasks = 0
        self.metrics_rows: list[dict] = []
        self.acc_rows: list[dict] = []          # accuracy-matrix entries
        self.outcomes: list[TaskOutcome] = []
        self.audit_logits: dict[str, torch.Tensor] = {}
        # transient per-task state (rebuilt on resume)
        self._cache_buffer: dict[int, torch.Tensor] = {}
        self._cache_current: torch.Tensor | None = None
        self._resume_epoch = 0
        self._saved_momentum: dict[str, torch.Tensor] = {}
        self._best: dict = {"epoch": -1, "val_acc": -1.0, "active": math.inf,
                            "state": None}

    # ----------------------------------------------------------------- run

    def run(self) -> "ContinualTrainer":
        for t in range(self.completed_tasks + 1, len(self.stream) + 1):
            self.train_task(t)
        if self.run_dir:
            self.save(os.path.join(self.run_dir, "final.ckpt"))
            self._write_run_outputs()
        return self

    def train_task(self, t: int) -> TaskOutcome:
        cfg = self.config
        td = self.stream.task(t)
        if self.completed_tasks != t - 1:
            raise ConfigError(
                f"task {t} requires tasks 1..{t - 1} consolidated first")
        resuming = t in self.model.task_classes
        if not resuming:
            report = capacity_report(self.model)
            if t > 1 and report.saturated:
                raise CapacitySaturationError(
                    f"no free kernels left before task {t}", report.to_dict())
            self.model.register_task(t, td.num_classes, self.generator)
            if cfg.mode == "ci":
                self.model.task_classifier = TaskClassifier(
                    t, self.model.feature_width, self.generator)
            self._best = {"epoch": -1, "val_acc": -1.0, "active": math.inf,
                          "state": None}
        self._freeze_saturated_sites()
        optimizer, named_params = self._build_optimizer(t)
        if resuming and self._saved_momentum:
            self._restore_momentum(optimizer, named_params)
        if cfg.mode == "ci" and t > 1:
            self._build_feature_caches(t, td)
        start_epoch = self._resume_epoch
        self._resume_epoch = 0
        for epoch in range(start_epoch, cfg.epochs_per_task):
            self._set_lr(optimizer, epoch)
            stats = self._train_epoch(t, td, epoch, optimizer)
            val_acc, val_active = self._validation_metrics(t, td)
            self._maybe_snapshot(t, epoch, val_acc, val_active)
            row = {"task": t, "epoch": epoch, **stats,
                   "val_accuracy": round(val_acc, 6),
                   "val_active_fraction": round(val_active, 6),
                   "lr": optimizer.param_groups[0]["lr"]}
            self.metrics_rows.append(row)
            if self.run_dir:
                self._save_latest(t, epoch, optimizer, named_params)
        self._restore_snapshot()
        relevance = compute_relevance(
            self.model, td.val_x, t,
            samples_per_input=cfg.relevance_samples_per_input,
            stochastic=cfg.relevance_stochastic, generator=self.generator)
        report = consolidate(self.model, relevance, t, threshold=0.0,
                             generator=self.generator,
                             relevance_table=self.relevance_table)
        self.buffer.end_of_task(t, td.train_x, td.train_y, self.generator)
        self.completed_tasks = t
        self._cache_buffer.clear()
        self._cache_current = None
        self._saved_momentum = {}
        outcome = self._post_task_bookkeeping(t, report)
        if self.run_dir:
            self.save(os.path.join(self.run_dir, f"task{t}.ckpt"))
            self._save_latest_pointer(f"task{t}.ckpt")
        return outcome

    # ------------------------------------------------------------- epochs

    def _train_epoch(self, t: int, td, epoch: int, optimizer) -> dict:
        cfg = self.config
        model = self.model
        model.train()
        n = td.train_x.shape[0]
        perm = torch.randperm(n, generator=self.generator)
        sums = {"class_loss": 0.0, "task_loss": 0.0, "sparsity_loss": 0.0}
        steps = 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            x, y = td.train_x[idx], td.train_y[idx]
            logits, records, feats = model.forward_multihead(
                x, t, gate_mode="train", generator=self.generator,
                strict_mask=cfg.strict_mask, collect=True)
            class_loss = F.cross_entropy(logits, y)
            sp_loss = sparsity_loss([r.gates for r in records],
                                    self.sparsity, epoch)
            task_loss = torch.zeros(())
            if cfg.mode == "ci" and t > 1:
                task_loss = self._rehearsal_loss(t, idx, x, feats)
            total = class_loss + sp_loss + task_loss
            if not torch.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss at task {t} epoch {epoch} step {steps}: "
                    f"class={float(class_loss)} sparsity={float(sp_loss)} "
                    f"task={float(task_loss)}")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            mask_frozen_grads_(model)
            torch.nn.utils.clip_grad_norm_(
                (p for g in optimizer.param_groups for p in g["params"]),
                cfg.grad_clip)
            self._apply_weight_decay(optimizer)
            mask_frozen_grads_(model)
            optimizer.step()
            sums["class_loss"] += float(class_loss)
            sums["task_loss"] += float(task_loss)
            sums["sparsity_loss"] += float(sp_loss)
            steps += 1
        return {k: round(v / steps, 6) for k, v in sums.items()}

    def _rehearsal_loss(self, t: int, batch_idx: torch.Tensor,
                        x: torch.Tensor, class_feats: torch.Tensor):
        """Task cross-entropy on a rehearsal batch.

        Stream features are assembled from the frozen-stream caches plus a
        fresh pass of the current stream, all detached: replay rehearses the
        task classifier only, never the heads or the backbone.
        """
        cfg = self.config
        rb = make_rehearsal_batch(self.buffer, x, t, cfg.batch_size,
                                  self.generator)
        past_rows = []
        for (task_id, a, b), span_idx in zip(rb.spans, rb.span_indices):
            if task_id != t:
                past_rows.append((task_id, span_idx, a, b))
        past_inputs = torch.cat([self.buffer.inputs[tid][si]
                                 for tid, si, _, _ in past_rows]) \
            if past_rows else None
        feats_width = self.model.feature_width
        out = torch.empty(rb.inputs.shape[0], t * feats_width)
        with torch.no_grad():
            if past_inputs is not None:
                fmap, _ = self.model.forward_stream(
                    past_inputs, t, gate_mode="train", generator=self.generator,
                    strict_mask=cfg.strict_mask)
                cur_feats_past = self.model.features_from_map(fmap)
            offset = 0
            for task_id, span_idx, a, b in past_rows:
                frozen = self._cache_buffer[task_id][span_idx]
                cur = cur_feats_past[offset:offset + (b - a)]
                out[a:b] = torch.cat([frozen, cur], dim=1)
                offset += b - a
        for (task_id, a, b), span_idx in zip(rb.spans, rb.span_indices):
            if task_id == t:
                frozen = self._cache_current[batch_idx[span_idx]]
                cur = class_feats[span_idx].detach()
                out[a:b] = torch.cat([frozen, cur], dim=1)
        logits = self.model.task_classifier(out)
        # observed task ids are 1..t, classifier outputs are 0-indexed
        return F.cross_entropy(logits, rb.task_labels - 1)

    def _build_feature_caches(self, t: int, td):
        """Frozen-stream (1..t-1) pooled features for every buffer example and
        every current-task training example; exact because those streams are
        immutable during task t."""
        past = [p for p in self.model.known_tasks() if p < t]
        self.model.eval()
        with torch.no_grad():
            for p in self.buffer.tasks():
                self._cache_buffer[p] = self._frozen_features(
                    self.buffer.inputs[p], past)
            self._cache_current = self._frozen_features(td.train_x, past)
        self.model.train()

    def _frozen_features(self, inputs: torch.Tensor, tasks: list[int],
                         batch_size: int = 1024) -> torch.Tensor:
        cols = []
        for p in tasks:
            rows = []
            for s in range(0, inputs.shape[0], batch_size):
                fmap, _ = self.model.forward_stream(
                    inputs[s:s + batch_size], p, gate_mode="eval",
                    strict_mask=self.config.strict_mask)
                rows.append(self.model.features_from_map(fmap))
            cols.append(torch.cat(rows))
        return torch.cat(cols, dim=1)

    # ------------------------------------------------------ optimizer bits

    def _build_optimizer(self, t: int):
        named: list[tuple[str, torch.nn.Parameter]] = []
        for i, site in enumerate(self.model.sites()):
            if site.conv.weight.requires_grad:
                named.append((f"site{i}.weight", site.conv.weight))
                named.append((f"site{i}.bias", site.conv.bias))
        for j, mod in enumerate(self.model.trainable_task_modules(t)):
            for pname, p in mod.named_parameters():
                if p.requires_grad:
                    named.append((f"task{t}.mod{j}.{pname}", p))
        if self.model.task_classifier is not None:
            for pname, p in self.model.task_classifier.named_parameters():
                named.append((f"taskclf.{pname}", p))
        params = [p for _, p in named]
        optimizer = torch.optim.SGD(params, lr=self.config.learning_rate,
                                    momentum=self.config.momentum,
                                    weight_decay=0.0)
        return optimizer, named

    def _apply_weight_decay(self, optimizer):
        wd = self.config.weight_decay
        if wd == 0:
            return
        with torch.no_grad():
            for group in optimizer.param_groups:
                for p in group["params"]:
                    if p.grad is not None:
                        p.grad.add_(p, alpha=wd)

    def _set_lr(self, optimizer, epoch: int):
        drops = sum(1 for e in self.config.lr_decay_epochs if epoch >= e)
        lr = self.config.learning_rate * (0.1 ** drops)
        for group in optimizer.param_groups:
            group["lr"] = lr

    def _freeze_saturated_sites(self):
        # A site with no free kernels can skip weight gradients entirely; the
        # mask would zero them all anyway.
        for site in self.model.sites():
            if not bool(site.free_mask().any()):
                site.conv.weight.requires_grad_(False)
                site.conv.bias.requires_grad_(False)

    # ------------------------------------------------- selection snapshots

    def _validation_metrics(self, t: int, td, batch_size: int = 1024):
        self.model.eval()
        correct = 0
        active_sum, active_n = 0.0, 0
        with torch.no_grad():
            for s in range(0, td.val_x.shape[0], batch_size):
                x = td.val_x[s:s + batch_size]
                y = td.val_y[s:s + batch_size]
                logits, records, _ = self.model.forward_multihead(
                    x, t, gate_mode="eval", strict_mask=self.config.strict_mask,
                    collect=True)
                correct += int((logits.argmax(dim=1) == y).sum())
                active_sum += sum(r.gates.hard.mean(dim=1).sum().item()
                                  for r in records)
                active_n += x.shape[0] * len(records)
        self.model.train()
        return correct / td.val_x.shape[0], active_sum / active_n

    def _snapshot_tensors(self, t: int) -> dict[str, torch.Tensor]:
        out = {}
        for i, site in enumerate(self.model.sites()):
            out[f"site{i}.weight"] = site.conv.weight.detach().clone()
            out[f"site{i}.bias"] = site.conv.bias.detach().clone()
        for j, mod in enumerate(self.model.trainable_task_modules(t)):
            for n, p in mod.named_parameters():
                out[f"task{t}.mod{j}.{n}"] = p.detach().clone()
            for n, b in mod.named_buffers():
                out[f"task{t}.mod{j}.{n}"] = b.detach().clone()
        if self.model.task_classifier is not None:
            for n, p in self.model.task_classifier.named_parameters():
                out[f"taskclf.{n}"] = p.detach().clone()
        return out

    def _load_snapshot_tensors(self, t: int, snap: dict[str, torch.Tensor]):
        with torch.no_grad():
            for i, site in enumerate(self.model.sites()):
                site.conv.weight.copy_(snap[f"site{i}.weight"])
                site.conv.bias.copy_(snap[f"site{i}.bias"])
            for j, mod in enumerate(self.model.trainable_task_modules(t)):
                for n, p in mod.named_parameters():
                    p.copy_(snap[f"task{t}.mod{j}.{n}"])
                for n, b in mod.named_buffers():
                    b.copy_(snap[f"task{t}.mod{j}.{n}"])
            if self.model.task_classifier is not None:
                for n, p in self.model.task_classifier.named_parameters():
                    p.copy_(snap[f"taskclf.{n}"])

    def _maybe_snapshot(self, t: int, epoch: int, val_acc: float,
                        val_active: float):
        better = val_acc > self._best["val_acc"] or (
            val_acc == self._best["val_acc"]
            and val_active < self._best["active"])
        if better:
            self._best = {"epoch": epoch, "val_acc": val_acc,
                          "active": val_active,
                          "state": self._snapshot_tensors(t)}

    def _restore_snapshot(self):
        if self._best["state"] is not None:
            t = self.completed_tasks + 1
            self._load_snapshot_tensors(t, self._best["state"])

    # --------------------------------------------------------- bookkeeping

    def _post_task_bookkeeping(self, t: int, report) -> TaskOutcome:
        ti = evaluate(self.model, self.stream, "ti", upto_t=t,
                      strict_mask=self.config.strict_mask)
        ci = None
        if self.config.mode == "ci":
            ci = evaluate(self.model, self.stream, "ci", upto_t=t,
                          strict_mask=self.config.strict_mask,
                          collect_logs=(self.run_dir is not None))
        for j, acc in ti.per_task.items():
            self.acc_rows.append({"after_task": t, "task": j, "mode": "ti",
                                  "accuracy": acc})
        if ci is not None:
            for j, acc in ci.per_task.items():
                self.acc_rows.append({"after_task": t, "task": j, "mode": "ci",
                                      "accuracy": acc})
        self._record_audit_logits(t)
        cap = capacity_report(self.model)
        outcome = TaskOutcome(
            task_id=t, best_epoch=self._best["epoch"],
            best_val_accuracy=self._best["val_acc"],
            consolidation=report.to_dict(), capacity=cap.to_dict(),
            ti_eval=ti.summary(), ci_eval=ci.summary() if ci else None)
        self.outcomes.append(outcome)
        if self.run_dir and ci is not None and ci.logs:
            self._write_prediction_logs(t, ci.logs)
        return outcome

    def _record_audit_logits(self, t: int):
        """Logit fingerprints on pinned test inputs for every consolidated
        task; later compared bit-for-bit to prove nothing moved."""
        self.model.eval()
        with torch.no_grad():
            for j in range(1, t + 1):
                td = self.stream.task(j)
                x = td.test_x[:AUDIT_SAMPLE]
                logits = self.model.forward_multihead(
                    x, j, gate_mode="eval", strict_mask=self.config.strict_mask)
                self.audit_logits[f"audit.after{t}.task{j}"] = logits.clone()

    # ------------------------------------------------------- persistence

    def state_tensors(self) -> dict[str, torch.Tensor]:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors.update(self.buffer.state_tensors())
        for (site, task), values in self.relevance_table.entries.items():
            tensors[f"relevance.site{site}.task{task}"] = values
        tensors["rng.generator"] = self.generator.get_state()
        for key, val in self.audit_logits.items():
            tensors[key] = val
        return tensors

    def run_meta(self) -> dict:
        return {
            "format": "gatedcl-run",
            "arch": self.model.arch.to_dict(),
            "task_classes": {str(k): v for k, v in
                             sorted(self.model.task_classes.items())},
            "consolidated": sorted(self.model.consolidated),
            "has_task_classifier": self.model.task_classifier is not None,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "completed_tasks": self.completed_tasks,
            "stream_manifest": self.stream.manifest(),
            "metrics_rows": self.metrics_rows,
            "acc_rows": self.acc_rows,
            "outcomes": [  # JSON-safe summaries
                {"task_id": o.task_id, "best_epoch": o.best_epoch,
                 "best_val_accuracy": o.best_val_accuracy,
                 "consolidation": o.consolidation, "capacity": o.capacity,
                 "ti_eval": o.ti_eval, "ci_eval": o.ci_eval}
                for o in self.outcomes],
        }

    def save(self, path: str, extra_tensors: dict | None = None,
             extra_meta: dict | None = None):
        tensors = self.state_tensors()
        if extra_tensors:
            tensors.update(extra_tensors)
        meta = self.run_meta()
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, tensors, meta)

    def _save_latest(self, t: int, epoch: int, optimizer, named_params):
        momentum = {}
        for name, p in named_params:
            state = optimizer.state.get(p, {})
            buf = state.get("momentum_buffer")
            if buf is not None:
                momentum[f"optim.momentum.{name}"] = buf
        snap = {}
        if self._best["state"] is not None:
            snap = {f"snapshot.{k}": v for k, v in self._best["state"].items()}
        self.save(os.path.join(self.run_dir, "latest.ckpt"),
                  extra_tensors={**momentum, **snap},
                  extra_meta={"in_progress": {
                      "task": t, "epochs_done": epoch + 1,
                      "best_epoch": self._best["epoch"],
                      "best_val_acc": self._best["val_acc"],
                      "best_active": self._best["active"]}})

    def _save_latest_pointer(self, name: str):
        with open(os.path.join(self.run_dir, "LATEST"), "w") as f:
            f.write(name + "\n")

    def _restore_momentum(self, optimizer, named_params):
        for name, p in named_params:
            buf = self._saved_momentum.get(f"optim.momentum.{name}")
            if buf is not None:
                optimizer.state[p] = {"momentum_buffer": buf.clone()}

    @classmethod
    def restore(cls, path: str, stream: TaskStream,
                run_dir: str | None = None) -> "ContinualTrainer":
        """Rebuild a trainer (and model) from a checkpoint; resuming a
        mid-task state continues at the next epoch and reproduces the
        uninterrupted run exactly."""
        tensors, meta = load_checkpoint(path)
        config = TrainConfig.from_dict(meta["config"])
        model = rebuild_model(tensors, meta)
        trainer = cls(model, stream, config, run_dir=run_dir)
        expected = meta["stream_manifest"]
        if stream.manifest() != expected:
            raise ConfigError("stream does not match the checkpointed run")
        trainer.buffer.load_state_tensors(tensors)
        for name, val in tensors.items():
            if name.startswith("relevance.site"):
                body = name[len("relevance.site"):]
                site_s, task_s = body.split(".task")
                trainer.relevance_table.put(int(site_s), int(task_s), val)
            elif name.startswith("audit."):
                trainer.audit_logits[name] = val
        trainer.generator.set_state(tensors["rng.generator"])
        trainer.completed_tasks = meta["completed_tasks"]
        trainer.metrics_rows = list(meta["metrics_rows"])
        trainer.acc_rows = list(meta["acc_rows"])
        trainer._saved_momentum = {
            k: v for k, v in tensors.items()
            if k.startswith("optim.momentum.")}
        progress = meta.get("in_progress")
        if progress:
            snap = {k[len("snapshot."):]: v for k, v in tensors.items()
                    if k.startswith("snapshot.")}
            trainer._best = {"epoch": progress["best_epoch"],
                             "val_acc": progress["best_val_acc"],
                             "active": progress["best_active"],
                             "state": snap or None}
            trainer._resume_epoch = progress["epochs_done"]
        return trainer

    def _write_prediction_logs(self, t: int, logs: list[dict]):
        import csv
        path = os.path.join(self.run_dir, f"predictions_after_task{t}.csv")
        os.makedirs(self.run_dir, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["true_task", "pred_task", "true_class",
                             "pred_class", "task_probs"])
            for row in logs:
                writer.writerow([row["true_task"], row["pred_task"],
                                 row["true_class"], row["pred_class"],
                                 json.dumps(row["task_probs"])])

    def _write_run_outputs(self):
        os.makedirs(self.run_dir, exist_ok=True)
        manifest = self.run_meta()
        with open(os.path.join(self.run_dir, "run_manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        import csv
        if self.metrics_rows:
            with open(os.path.join(self.run_dir, "metrics.csv"), "w",
                      newline="") as f:
                writer = csv.DictWriter(f, fieldnames=list(self.metrics_rows[0]))
                writer.writeheader()
                writer.writerows(self.metrics_rows)


def rebuild_model(tensors: dict[str, torch.Tensor], meta: dict) -> ContinualGatedNet:
    """Reconstruct a model skeleton from checkpoint metadata, then load the
    exact tensors into it."""
    arch = ArchSpec.from_dict(meta["arch"])
    model = ContinualGatedNet(arch)
    for task_s, n_classes in sorted(meta["task_classes"].items(),
                                    key=lambda kv: int(kv[0])):
        model.register_task(int(task_s), n_classes)
    if meta.get("has_task_classifier"):
        num_tasks = len(meta["task_classes"])
        model.task_classifier = TaskClassifier(num_tasks, model.feature_width)
    state = {k[len("model."):]: v for k, v in tensors.items()
             if k.startswith("model.")}
    # permitted-mask buffers are created at consolidation time; register the
    # ones present in the checkpoint before strict loading
    for site in model.sites():
        prefix = _site_prefix(model, site)
        for key in state:
            if key.startswith(prefix + "permitted_"):
                task_id = int(key[len(prefix) + len("permitted_"):])
                if site.permitted_mask(task_id) is None:
                    site.set_permitted_mask(
                        task_id, torch.zeros(site.out_channels, dtype=torch.bool))
    model.load_state_dict(state, strict=True)
    for t in meta["consolidated"]:
        for site in model.sites():
            site.gate_module(t).freeze()
        for p in model.head(t).parameters():
            p.requires_grad_(False)
        model.consolidated.add(t)
    return model


def _site_prefix(model: ContinualGatedNet, target) -> str:
    for name, module in model.named_modules():
        if module is target:
            return name + "."
    raise ConfigError("site not found in model")
