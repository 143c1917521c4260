"""End-to-end training runs: warm-up on labeled data, count-queue
initialization, then the per-iteration queues -> thresholds -> partition ->
optimize cycle. The consistency baseline and the supervised-only mode run
under the same harness so their trajectories are directly comparable.

A run directory holds: the resolved config, a dataset snapshot, a
line-delimited dynamics log, the evaluation curve, the final model and count
queues, and a status marker ("completed" or "partial").
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import countgap, diagnostics, losses, nn, selection
from .config import (
    CGMATCH,
    FIXMATCH,
    SUPERVISED,
    RunConfig,
    augment_from_config,
    build_dataset,
    save_config,
    threshold_state_from_config,
)
from .data import Batch, Dataset, draw_batch, make_rng_streams, save_dataset

log = logging.getLogger(__name__)

STATUS_FILE = "status.txt"
COMPLETED = "completed"
PARTIAL = "partial"


class PhaseGuard:
    """Enforces the per-step order: queues, thresholds, partition, optimize."""

    ORDER = ("queues", "thresholds", "partition", "optimize")

    def __init__(self) -> None:
        self._next = 0

    def enter(self, phase: str) -> None:
        expected = self.ORDER[self._next]
        if phase != expected:
            raise RuntimeError(f"step phase {phase!r} out of order; expected {expected!r}")
        self._next += 1


class DynamicsWriter:
    """Write-only run log. Holds the hidden gold labels of the unlabeled pool
    for evaluation-side bookkeeping (per-subset correctness, reference-label
    probabilities); nothing it computes flows back into training."""

    def __init__(self, path, unlabeled_ids: np.ndarray, gold: np.ndarray | None):
        self._fh = open(path, "w")
        self._ids = np.asarray(unlabeled_ids, dtype=np.int64)
        self._gold = None if gold is None else np.asarray(gold, dtype=np.int64)
        self._offset = int(self._ids[0]) if self._ids.size else 0

    def _gold_of(self, ids: np.ndarray) -> np.ndarray | None:
        if self._gold is None:
            return None
        return self._gold[np.asarray(ids, dtype=np.int64) - self._offset]

    def _emit(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")

    def warmup_step(self, t: int, loss_supervised: float, lr: float) -> None:
        self._emit(
            {
                "kind": "warmup_step",
                "t": t,
                "loss_supervised": float(loss_supervised),
                "lr": float(lr),
            }
        )

    def step(
        self,
        t: int,
        fields: dict,
        part: selection.Partition | None = None,
        pseudo: np.ndarray | None = None,
    ) -> None:
        record = {"kind": "step", "t": t}
        record.update(fields)
        if part is not None:
            record["n_easy"] = part.n_easy
            record["n_ambiguous"] = part.n_ambiguous
            record["n_hard"] = part.n_hard
            gold = self._gold_of(part.ids)
            if gold is not None:
                record["easy_correct"] = int(
                    (part.easy_labels == gold[part.easy_rows]).sum()
                )
                record["ambiguous_correct"] = int(
                    (part.ambiguous_labels == gold[part.ambiguous_rows]).sum()
                )
                record["hard_correct"] = int(
                    (pseudo[part.hard_rows] == gold[part.hard_rows]).sum()
                )
        self._emit(record)

    def fixmatch_step(
        self, t: int, fields: dict, ids: np.ndarray, pseudo: np.ndarray, mask: np.ndarray
    ) -> None:
        record = {"kind": "step", "t": t}
        record.update(fields)
        record["n_easy"] = int(mask.sum())
        record["n_ambiguous"] = 0
        record["n_hard"] = int((~mask).sum())
        gold = self._gold_of(ids)
        if gold is not None:
            hits = pseudo == gold
            record["easy_correct"] = int((hits & mask).sum())
            record["ambiguous_correct"] = 0
            record["hard_correct"] = int((hits & ~mask).sum())
        self._emit(record)

    def eval_point(self, t: int, accuracy: float, ece_value: float) -> None:
        self._emit(
            {
                "kind": "eval",
                "t": t,
                "test_accuracy": float(accuracy),
                "test_ece": float(ece_value),
            }
        )
        self._fh.flush()

    def snapshot(
        self,
        t: int,
        ids: np.ndarray,
        probs: np.ndarray,
        gaps: np.ndarray,
        tags: np.ndarray,
    ) -> None:
        preds = probs.argmax(axis=1)
        max_probs = probs.max(axis=1)
        gold = self._gold_of(ids)
        p_ref = None if gold is None else probs[np.arange(ids.size), gold]
        for i in range(ids.size):
            self._emit(
                {
                    "kind": "snapshot",
                    "t": t,
                    "id": int(ids[i]),
                    "pred": int(preds[i]),
                    "max_prob": float(max_probs[i]),
                    "p_ref": None if p_ref is None else float(p_ref[i]),
                    "gap": float(gaps[i]),
                    "subset": str(tags[i]),
                }
            )

    def close(self) -> None:
        self._fh.close()


@dataclass
class RunArtifacts:
    run_dir: Path
    params: nn.ModelParams
    eval_curve: list[dict]
    completed: bool


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: Dataset, writer: DynamicsWriter):
        self.cfg = cfg
        self.view = dataset.train_view()
        self.x_test = dataset.x_test
        self.y_test = dataset.y_test
        self.aug = augment_from_config(cfg, dataset)
        self.streams = make_rng_streams(cfg.seed)
        self.params = nn.init_mlp(
            dataset.d, cfg.hidden, dataset.k, np.random.default_rng([cfg.seed, 5])
        )
        self.opt = nn.init_optimizer(self.params, cfg.lr, cfg.momentum, cfg.total_iters)
        self.tstate = threshold_state_from_config(cfg)
        self.tracker: countgap.CountTracker | None = None
        self.warmup_log: deque = deque(maxlen=cfg.warmup_window)
        self.writer = writer
        self.eval_curve: list[dict] = []
        if cfg.batch_labeled > self.view.x_labeled.shape[0]:
            log.warning(
                "labeled batch size %d exceeds pool size %d; sampling with replacement",
                cfg.batch_labeled,
                self.view.x_labeled.shape[0],
            )

    # --- shared pieces --------------------------------------------------

    def _draw(self, ratio: int) -> Batch:
        return draw_batch(self.view, self.cfg.batch_labeled, ratio, self.aug, self.streams)

    def _supervised_pass(self, batch: Batch) -> tuple[float, nn.GradientSet]:
        logits, cache = nn.forward_cached(self.params, batch.x_labeled_weak)
        probs = nn.softmax(logits)
        value = losses.supervised_ce(probs, batch.y_labeled)
        dprobs = losses.supervised_ce_grad(probs, batch.y_labeled)
        grads = nn.backward(self.params, cache, nn.softmax_vjp(probs, dprobs))
        return value, grads

    def _evaluate(self) -> tuple[float, float]:
        probs = nn.softmax(nn.forward(self.params, self.x_test))
        preds = probs.argmax(axis=1)
        correct = preds == self.y_test
        accuracy = float(correct.mean())
        ece_value = diagnostics.ece(probs.max(axis=1), correct)
        return accuracy, ece_value

    def _snapshot(self, t: int) -> None:
        if self.view.x_unlabeled.shape[0] == 0:
            return
        probs = nn.softmax(nn.forward(self.params, self.view.x_unlabeled))
        if self.tracker is not None:
            gaps = self.tracker.all_gaps().astype(np.float64)
        else:
            gaps = np.zeros(probs.shape[0])
        if self.cfg.method == CGMATCH and t > self.cfg.warmup_iters and self.tstate.ready:
            tags = selection.tag_subsets(
                probs.max(axis=1), probs.argmax(axis=1), gaps, self.tstate
            )
        elif self.cfg.method == FIXMATCH and t > self.cfg.warmup_iters:
            tags = np.where(probs.max(axis=1) > self.cfg.fixed_conf, "easy", "hard")
        else:
            tags = np.full(probs.shape[0], "unseen", dtype=object)
        self.writer.snapshot(t, self.view.unlabeled_ids, probs, gaps, tags)

    def _maybe_eval(self, t: int) -> None:
        completed = t + 1
        if completed % self.cfg.eval_every == 0 or completed == self.cfg.total_iters:
            accuracy, ece_value = self._evaluate()
            self.eval_curve.append(
                {"iteration": completed, "test_accuracy": accuracy, "test_ece": ece_value}
            )
            self.writer.eval_point(completed, accuracy, ece_value)
            self._snapshot(completed)
            log.info("iter %d: accuracy=%.4f ece=%.4f", completed, accuracy, ece_value)

    # --- step variants ----------------------------------------------------

    def warmup_or_supervised_step(self, t: int, log_unlabeled: bool) -> None:
        ratio = self.cfg.unlabeled_ratio if log_unlabeled else 0
        batch = self._draw(ratio)
        value, grads = self._supervised_pass(batch)
        if not np.isfinite(value):
            raise nn.NonFiniteError(f"non-finite supervised loss at iteration {t}")
        if log_unlabeled and batch.n_unlabeled:
            # predictions logged with the pre-update parameters, like the
            # pseudo-labels of the main loop
            preds = nn.forward(self.params, batch.x_unlabeled_weak).argmax(axis=1)
            self.warmup_log.append((t, batch.unlabeled_ids, preds))
        lr = nn.cosine_lr(self.opt.t, self.opt.total_iters, self.opt.base_lr)
        nn.sgd_step(self.params, grads, self.opt)
        self.writer.warmup_step(t, value, lr)

    def init_queues(self) -> None:
        self.tracker = countgap.CountTracker(self.view.unlabeled_ids, self.view.k)
        countgap.warmup_initialize(
            self.tracker, self.warmup_log, self.cfg.warmup_iters, self.cfg.warmup_window
        )

    def cgmatch_step(self, t: int) -> tuple[losses.LossBreakdown, selection.Partition]:
        cfg = self.cfg
        batch = self._draw(cfg.unlabeled_ratio)
        # one fused pass over [labeled-weak; unlabeled-weak; unlabeled-strong]
        n_lab = batch.y_labeled.size
        n_unl = batch.n_unlabeled
        x_all = np.concatenate(
            [batch.x_labeled_weak, batch.x_unlabeled_weak, batch.x_unlabeled_strong]
        )
        logits_all, cache_all = nn.forward_cached(self.params, x_all)
        probs_all = nn.softmax(logits_all)
        probs_lab = probs_all[:n_lab]
        probs_weak = probs_all[n_lab : n_lab + n_unl]
        probs_strong = probs_all[n_lab + n_unl :]
        pseudo = probs_weak.argmax(axis=1)
        max_probs = probs_weak.max(axis=1)

        phases = PhaseGuard()
        phases.enter("queues")
        self.tracker.record_batch(batch.unlabeled_ids, pseudo)
        gaps = self.tracker.count_gaps(batch.unlabeled_ids).astype(np.float64)

        phases.enter("thresholds")
        mean_conf, mean_gap = selection.update_thresholds(
            self.tstate, probs_weak, max_probs, gaps
        )

        phases.enter("partition")
        part = selection.partition(batch.unlabeled_ids, max_probs, pseudo, gaps, self.tstate)

        phases.enter("optimize")
        loss_sup = losses.supervised_ce(probs_lab, batch.y_labeled)
        loss_easy = losses.easy_ce(part, probs_strong)
        loss_amb = losses.ambiguous_gce(part, probs_weak, probs_strong, cfg.gce_q)
        amb_weight = losses.ambiguous_weight(t, cfg.warmup_iters, cfg.total_iters)
        breakdown = losses.total_loss(
            loss_sup,
            loss_easy,
            loss_amb,
            cfg.easy_weight,
            amb_weight,
            part.n_easy,
            part.n_ambiguous,
        )

        dprobs_all = np.zeros_like(probs_all)
        dprobs_all[:n_lab] = losses.supervised_ce_grad(probs_lab, batch.y_labeled)
        dprobs_all[n_lab + n_unl :] = cfg.easy_weight * losses.easy_ce_grad(part, probs_strong)
        if part.n_ambiguous and amb_weight != 0.0:
            grad_weak, grad_strong = losses.ambiguous_gce_grads(
                part, probs_weak, probs_strong, cfg.gce_q, cfg.detach_weak_gce
            )
            dprobs_all[n_lab : n_lab + n_unl] = amb_weight * grad_weak
            dprobs_all[n_lab + n_unl :] += amb_weight * grad_strong
        grads = nn.backward(self.params, cache_all, nn.softmax_vjp(probs_all, dprobs_all))
        lr = nn.cosine_lr(self.opt.t, self.opt.total_iters, self.opt.base_lr)
        nn.sgd_step(self.params, grads, self.opt)

        conf_thr = (
            self.tstate.mean_conf_ema
            if self.tstate.mode == selection.SELF_ADAPTIVE
            else self.tstate.conf_threshold
        )
        self.writer.step(
            t,
            {
                "lr": float(lr),
                "conf_threshold": float(conf_thr),
                "gap_threshold": float(self.tstate.gap_threshold),
                "mean_conf": mean_conf,
                "mean_gap": mean_gap,
                "loss_supervised": breakdown.supervised,
                "loss_easy": breakdown.easy,
                "loss_ambiguous": breakdown.ambiguous,
                "easy_weight": breakdown.easy_weight,
                "ambiguous_weight": breakdown.ambiguous_weight,
                "loss_total": breakdown.total,
                "batch_unlabeled": batch.n_unlabeled,
            },
            part=part,
            pseudo=pseudo,
        )
        return breakdown, part

    def fixmatch_step(self, t: int) -> None:
        cfg = self.cfg
        batch = self._draw(cfg.unlabeled_ratio)
        # the weak view only supplies detached pseudo-labels, so it stays out
        # of the fused differentiable pass
        n_lab = batch.y_labeled.size
        probs_weak = nn.softmax(nn.forward(self.params, batch.x_unlabeled_weak))
        x_all = np.concatenate([batch.x_labeled_weak, batch.x_unlabeled_strong])
        logits_all, cache_all = nn.forward_cached(self.params, x_all)
        probs_all = nn.softmax(logits_all)
        probs_lab = probs_all[:n_lab]
        probs_strong = probs_all[n_lab:]

        loss_sup = losses.supervised_ce(probs_lab, batch.y_labeled)
        loss_unsup = losses.fixmatch_unsup(probs_weak, probs_strong, cfg.fixed_conf)
        total = loss_sup + cfg.unsup_weight * loss_unsup
        if not np.isfinite(total):
            raise nn.NonFiniteError(f"non-finite loss at iteration {t}")

        dprobs_all = np.zeros_like(probs_all)
        dprobs_all[:n_lab] = losses.supervised_ce_grad(probs_lab, batch.y_labeled)
        mask = probs_weak.max(axis=1) > cfg.fixed_conf
        if mask.any():
            dprobs_all[n_lab:] = cfg.unsup_weight * losses.fixmatch_unsup_grad(
                probs_weak, probs_strong, cfg.fixed_conf
            )
        grads = nn.backward(self.params, cache_all, nn.softmax_vjp(probs_all, dprobs_all))
        lr = nn.cosine_lr(self.opt.t, self.opt.total_iters, self.opt.base_lr)
        nn.sgd_step(self.params, grads, self.opt)
        self.writer.fixmatch_step(
            t,
            {
                "lr": float(lr),
                "conf_threshold": float(cfg.fixed_conf),
                "loss_supervised": float(loss_sup),
                "loss_unsup": float(loss_unsup),
                "unsup_weight": float(cfg.unsup_weight),
                "loss_total": float(total),
                "batch_unlabeled": batch.n_unlabeled,
            },
            ids=batch.unlabeled_ids,
            pseudo=probs_weak.argmax(axis=1),
            mask=mask,
        )

    # --- full run ---------------------------------------------------------

    def run_all(self) -> None:
        cfg = self.cfg
        warm_end = cfg.total_iters if cfg.method == SUPERVISED else cfg.warmup_iters
        for t in range(warm_end):
            self.warmup_or_supervised_step(t, log_unlabeled=cfg.method != SUPERVISED)
            self._maybe_eval(t)
        if cfg.method == SUPERVISED:
            return
        if cfg.method == CGMATCH:
            self.init_queues()
        for t in range(cfg.warmup_iters, cfg.total_iters):
            if cfg.method == CGMATCH:
                self.cgmatch_step(t)
            else:
                self.fixmatch_step(t)
            self._maybe_eval(t)


def run(cfg: RunConfig, dataset: Dataset | None = None) -> RunArtifacts:
    """Execute one full run into ``cfg.out_dir`` and persist all artifacts."""
    cfg.validate()
    if not cfg.out_dir:
        raise ValueError("config has no output directory (training.out_dir)")
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    # persisted artifacts carry only run-relative paths, so run dirs relocate
    persisted = replace(cfg, out_dir=None, path="dataset.tsv" if cfg.path else None)
    save_config(persisted, run_dir / "config.ini")
    if dataset is None:
        dataset = build_dataset(cfg)
    save_dataset(dataset, run_dir / "dataset.tsv")

    writer = DynamicsWriter(
        run_dir / "dynamics.jsonl", dataset.unlabeled_ids, dataset.eval_gold()
    )
    trainer = Trainer(cfg, dataset, writer)
    completed = False
    try:
        # batch GEMMs here are small enough that BLAS threading only hurts
        with threadpool_limits(limits=1, user_api="blas"):
            trainer.run_all()
        completed = True
    finally:
        writer.close()
        diagnostics.write_table(
            run_dir / "eval_curve.tsv",
            ["iteration", "test_accuracy", "test_ece"],
            trainer.eval_curve,
        )
        nn.save_params(trainer.params, run_dir / "model.npz")
        if trainer.tracker is not None:
            trainer.tracker.save(run_dir / "queues.npz")
        (run_dir / STATUS_FILE).write_text((COMPLETED if completed else PARTIAL) + "\n")
    return RunArtifacts(
        run_dir=run_dir,
        params=trainer.params,
        eval_curve=trainer.eval_curve,
        completed=completed,
    )
