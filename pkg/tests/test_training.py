import json
from dataclasses import replace

import numpy as np
import pytest

from cgmatch import diagnostics, nn, training
from cgmatch.config import RunConfig, build_dataset
from cgmatch.training import DynamicsWriter, PhaseGuard, Trainer


def tiny_config(**overrides) -> RunConfig:
    base = dict(
        k=4,
        labels_per_class=4,
        n_unlabeled=200,
        n_test=150,
        spread=2.0,
        data_seed=3,
        hidden=(16, 16),
        warmup_window=40,
        method="cgmatch",
        warmup_iters=60,
        total_iters=240,
        batch_labeled=16,
        unlabeled_ratio=3,
        eval_every=60,
        seed=5,
    )
    base.update(overrides)
    return RunConfig(**base)


def make_trainer(cfg, gold=True):
    dataset = build_dataset(cfg)
    writer = DynamicsWriter(
        "/dev/null", dataset.unlabeled_ids, dataset.eval_gold() if gold else None
    )
    return Trainer(cfg, dataset, writer), dataset


class TestPhaseGuard:
    def test_accepts_the_canonical_order(self):
        guard = PhaseGuard()
        for phase in PhaseGuard.ORDER:
            guard.enter(phase)

    def test_trips_on_out_of_order_calls(self):
        guard = PhaseGuard()
        guard.enter("queues")
        with pytest.raises(RuntimeError, match="out of order"):
            guard.enter("partition")

    def test_trips_on_skipped_first_phase(self):
        with pytest.raises(RuntimeError, match="out of order"):
            PhaseGuard().enter("optimize")


class TestWarmup:
    def test_prediction_log_is_trimmed_to_window(self):
        cfg = tiny_config(warmup_window=25)
        trainer, _ = make_trainer(cfg)
        for t in range(cfg.warmup_iters):
            trainer.warmup_or_supervised_step(t, log_unlabeled=True)
        assert len(trainer.warmup_log) == 25
        assert trainer.warmup_log[0][0] == cfg.warmup_iters - 25

    def test_supervised_steps_skip_unlabeled_stream(self):
        cfg = tiny_config(method="supervised")
        trainer, _ = make_trainer(cfg)
        for t in range(10):
            trainer.warmup_or_supervised_step(t, log_unlabeled=False)
        assert len(trainer.warmup_log) == 0

    def test_warmup_trajectory_deterministic(self):
        def final_params():
            trainer, _ = make_trainer(tiny_config())
            for t in range(30):
                trainer.warmup_or_supervised_step(t, log_unlabeled=True)
            return trainer.params

        a, b = final_params(), final_params()
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)


class TestCgmatchStep:
    def _warmed(self, cfg=None):
        cfg = cfg or tiny_config()
        trainer, dataset = make_trainer(cfg)
        for t in range(cfg.warmup_iters):
            trainer.warmup_or_supervised_step(t, log_unlabeled=True)
        trainer.init_queues()
        return trainer, dataset

    def test_step_returns_breakdown_and_partition(self):
        trainer, _ = self._warmed()
        breakdown, part = trainer.cgmatch_step(trainer.cfg.warmup_iters)
        assert np.isfinite(breakdown.total)
        assert part.n_easy + part.n_ambiguous + part.n_hard == 48

    def test_first_step_seeds_thresholds_with_batch_means(self):
        trainer, _ = self._warmed()
        trainer.cgmatch_step(trainer.cfg.warmup_iters)
        assert trainer.tstate.conf_threshold is not None
        assert 0.0 <= trainer.tstate.conf_threshold <= 1.0

    def test_empty_ambiguous_set_equals_zero_weight_update(self):
        # two identically-warmed trainers see the same batch; expelling every
        # ambiguous candidate in one of them (sky-high pre-seeded gap
        # threshold) must produce the identical parameter update, because at
        # t = warmup_iters the ambiguous weight is exactly zero
        trainer_a, _ = self._warmed()
        trainer_b, _ = self._warmed()
        t = trainer_a.cfg.warmup_iters

        trainer_b.tstate.gap_threshold = 1e9
        _, part_a = trainer_a.cgmatch_step(t)
        _, part_b = trainer_b.cgmatch_step(t)
        assert part_a.n_ambiguous > 0  # the contrast is real
        assert part_b.n_ambiguous == 0
        for wa, wb in zip(trainer_a.params.weights, trainer_b.params.weights):
            assert np.array_equal(wa, wb)

    def test_identical_seeds_identical_breakdowns(self):
        t = tiny_config().warmup_iters
        trainer_a, _ = self._warmed()
        trainer_b, _ = self._warmed()
        for step in range(t, t + 5):
            ba, _ = trainer_a.cgmatch_step(step)
            bb, _ = trainer_b.cgmatch_step(step)
            assert ba == bb


class TestRun:
    def test_artifacts_and_eval_cadence(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path / "run"))
        artifacts = training.run(cfg)
        assert artifacts.completed
        for name in (
            "config.ini",
            "dataset.tsv",
            "dynamics.jsonl",
            "eval_curve.tsv",
            "model.npz",
            "queues.npz",
            "status.txt",
        ):
            assert (tmp_path / "run" / name).exists(), name
        assert (tmp_path / "run" / "status.txt").read_text().strip() == "completed"
        iterations = [row["iteration"] for row in artifacts.eval_curve]
        assert iterations == [60, 120, 180, 240]  # eval_every=60, total=240
        assert len(set(iterations)) == len(iterations)

    def test_supervised_run_never_touches_unlabeled(self, tmp_path):
        cfg = tiny_config(method="supervised", out_dir=str(tmp_path / "sup"))
        artifacts = training.run(cfg)
        assert artifacts.completed
        records = diagnostics.read_jsonl(tmp_path / "sup" / "dynamics.jsonl")
        assert all(r["kind"] != "step" for r in records)
        assert not (tmp_path / "sup" / "queues.npz").exists()

    def test_fixmatch_run_logs_zero_ambiguous(self, tmp_path):
        cfg = tiny_config(method="fixmatch", out_dir=str(tmp_path / "fm"))
        training.run(cfg)
        records = diagnostics.read_jsonl(tmp_path / "fm" / "dynamics.jsonl")
        steps = [r for r in records if r["kind"] == "step"]
        assert steps and all(r["n_ambiguous"] == 0 for r in steps)

    def test_reruns_are_bitwise_identical(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path / "det"))
        training.run(cfg)
        first_dynamics = (tmp_path / "det" / "dynamics.jsonl").read_bytes()
        first_eval = (tmp_path / "det" / "eval_curve.tsv").read_bytes()
        training.run(cfg)
        assert (tmp_path / "det" / "dynamics.jsonl").read_bytes() == first_dynamics
        assert (tmp_path / "det" / "eval_curve.tsv").read_bytes() == first_eval

    def test_gold_labels_never_reach_training(self, tmp_path):
        """Scrambling the hidden gold labels may only change the logged
        evaluation-side hit counts, never the model or its test curve."""
        cfg = tiny_config(out_dir=str(tmp_path / "a"))
        clean = training.run(cfg)

        dataset = build_dataset(cfg)
        rng = np.random.default_rng(0)
        dataset._gold_unlabeled = rng.integers(0, dataset.k, dataset.n_unlabeled)
        cfg_poisoned = replace(cfg, out_dir=str(tmp_path / "b"))
        poisoned = training.run(cfg_poisoned, dataset=dataset)

        assert clean.eval_curve == poisoned.eval_curve
        for wa, wb in zip(clean.params.weights, poisoned.params.weights):
            assert np.array_equal(wa, wb)

    def test_utilization_inequality_holds_every_iteration(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path / "util"))
        training.run(cfg)
        records = diagnostics.read_jsonl(tmp_path / "util" / "dynamics.jsonl")
        steps = [r for r in records if r["kind"] == "step"]
        assert steps
        for rec in steps:
            conf_only = rec["n_easy"]  # easy IS the confidence-only selection
            assert rec["n_easy"] + rec["n_ambiguous"] >= conf_only

    def test_clamped_run_keeps_threshold_in_range(self, tmp_path):
        cfg = tiny_config(clamp=(0.9, 0.95), out_dir=str(tmp_path / "clamp"))
        training.run(cfg)
        records = diagnostics.read_jsonl(tmp_path / "clamp" / "dynamics.jsonl")
        steps = [r for r in records if r["kind"] == "step"]
        assert steps
        assert all(0.9 <= r["conf_threshold"] <= 0.95 for r in steps)

    def test_divergence_writes_partial_marker(self, tmp_path):
        cfg = tiny_config(lr=1e300, out_dir=str(tmp_path / "boom"))
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(nn.NonFiniteError):
            training.run(cfg)
        assert (tmp_path / "boom" / "status.txt").read_text().strip() == "partial"
        assert (tmp_path / "boom" / "dynamics.jsonl").exists()

    def test_snapshot_records_cover_the_pool(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path / "snap"))
        training.run(cfg)
        records = diagnostics.read_jsonl(tmp_path / "snap" / "dynamics.jsonl")
        snaps = [r for r in records if r["kind"] == "snapshot"]
        checkpoints = {r["t"] for r in snaps}
        assert checkpoints == {60, 120, 180, 240}
        per_checkpoint = [r for r in snaps if r["t"] == 240]
        assert len(per_checkpoint) == cfg.n_unlabeled
        tags = {r["subset"] for r in per_checkpoint}
        assert tags <= {"easy", "ambiguous", "hard", "unseen"}
        assert all(0.0 <= r["max_prob"] <= 1.0 for r in per_checkpoint)
        assert all(r["max_prob"] >= r["p_ref"] - 1e-12 for r in per_checkpoint)

    def test_missing_out_dir_rejected(self):
        with pytest.raises(ValueError, match="out"):
            training.run(tiny_config(out_dir=None))


def test_dynamics_log_is_valid_jsonl(tmp_path):
    cfg = tiny_config(out_dir=str(tmp_path / "jsonl"))
    training.run(cfg)
    with open(tmp_path / "jsonl" / "dynamics.jsonl") as fh:
        kinds = {json.loads(line)["kind"] for line in fh}
    assert kinds == {"warmup_step", "step", "eval", "snapshot"}


def test_rerun_from_persisted_config_reproduces_curve(tmp_path):
    from cgmatch.config import load_config

    cfg = tiny_config(out_dir=str(tmp_path / "first"))
    training.run(cfg)
    persisted = load_config(tmp_path / "first" / "config.ini")
    replayed = replace(persisted, out_dir=str(tmp_path / "second"))
    training.run(replayed)
    assert (tmp_path / "first" / "eval_curve.tsv").read_bytes() == (
        tmp_path / "second" / "eval_curve.tsv"
    ).read_bytes()
    assert (tmp_path / "first" / "dynamics.jsonl").read_bytes() == (
        tmp_path / "second" / "dynamics.jsonl"
    ).read_bytes()


def test_rerun_from_persisted_config_with_dataset_file(tmp_path):
    from cgmatch import data
    from cgmatch.config import build_dataset, load_config

    ds_path = tmp_path / "ds.tsv"
    data.save_dataset(build_dataset(tiny_config()), ds_path)
    cfg = tiny_config(path=str(ds_path), out_dir=str(tmp_path / "first"))
    training.run(cfg)
    persisted = load_config(tmp_path / "first" / "config.ini")
    assert persisted.path == str(tmp_path / "first" / "dataset.tsv")
    replayed = replace(persisted, out_dir=str(tmp_path / "second"))
    training.run(replayed)
    assert (tmp_path / "first" / "eval_curve.tsv").read_bytes() == (
        tmp_path / "second" / "eval_curve.tsv"
    ).read_bytes()
