import math
from dataclasses import replace

import numpy as np
import pytest

from pacedseg.errors import ConfigError, TrainingAbort
from pacedseg.network import PARAM_NAMES
from pacedseg.synthdata import attach_registration, generate_dataset
from pacedseg.training import (
    StepTrace,
    TrainConfig,
    Trainer,
    config_from_dict,
    load_config,
    run_training,
    save_config,
)


def tiny_config(**overrides):
    base = dict(
        iterations=12, decay_period=6, eval_period=6, n_eval=2,
        dim_h=16, dim_w=16, dim_d=8, n_labeled=3, n_unlabeled=4,
        widths=(2, 3, 4, 3), embed_dim=4, mc_passes=2, k_neg=8,
        dtype="float32", seed=3,
    )
    base.update(overrides)
    return TrainConfig(**base).validate()


def tiny_dataset(cfg, seed=None):
    seed = cfg.seed if seed is None else seed
    ds = generate_dataset(
        cfg.n_labeled, cfg.n_unlabeled, cfg.dims, seed=seed, noise_amp=cfg.noise_amp
    )
    return attach_registration(ds, cfg.reg_sigma, cfg.reg_beta, seed=seed)


class TestConfig:
    def test_defaults_validate(self):
        TrainConfig().validate()

    def test_file_roundtrip(self, tmp_path):
        cfg = tiny_config(lr0=0.02, enable_sc=False, ablation_seeds=(7, 8, 9))
        path = tmp_path / "run.cfg"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"not_a_knob": "1"})

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"iterations": "twelve"})
        with pytest.raises(ConfigError):
            config_from_dict({"enable_su": "maybe"})

    def test_invalid_combinations_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(decay_period=100)  # exceeds iterations
        with pytest.raises(ConfigError):
            tiny_config(dim_h=15)
        with pytest.raises(ConfigError):
            tiny_config(dtype="float16")

    def test_comments_and_spacing_parsed(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# a comment\niterations = 40  # trailing\n\nlr0=0.5\n")
        cfg = load_config(path)
        assert cfg.iterations == 40 and cfg.lr0 == 0.5


class TestTrainerMechanics:
    def test_requires_registration_labels(self):
        cfg = tiny_config()
        ds = generate_dataset(cfg.n_labeled, cfg.n_unlabeled, cfg.dims, seed=0)
        with pytest.raises(ValueError):
            Trainer(cfg, ds)

    def test_lambda_follows_geometric_schedule(self):
        cfg = tiny_config()
        trainer = Trainer(cfg, tiny_dataset(cfg))
        for t in range(8):
            report = trainer.step(*trainer.batch_for(t))
            assert report.lam == pytest.approx(0.1 * 1.01**t, rel=1e-12)

    def test_lr_decays_stepwise(self):
        cfg = tiny_config()
        trainer = Trainer(cfg, tiny_dataset(cfg))
        reports = [trainer.step(*trainer.batch_for(t)) for t in range(8)]
        assert reports[0].lr == pytest.approx(0.01)
        assert reports[cfg.decay_period].lr == pytest.approx(0.01 * 0.1)

    def test_first_step_is_warm_branch(self):
        cfg = tiny_config()
        trainer = Trainer(cfg, tiny_dataset(cfg))
        report = trainer.step(*trainer.batch_for(0))
        assert report.branch == "warm"
        assert report.v is None

    def test_su_disabled_gives_full_mask(self):
        cfg = tiny_config(enable_su=False, enable_sc=False)
        trainer = Trainer(cfg, tiny_dataset(cfg))
        report = trainer.step(*trainer.batch_for(0))
        assert report.mask_count == 16 * 16 * 8
        assert report.r_conf == 1.0
        assert report.l_bf == 0.0

    def test_loss_report_total_identity(self):
        cfg = tiny_config()
        trainer = Trainer(cfg, tiny_dataset(cfg))
        for t in range(4):
            rep = trainer.step(*trainer.batch_for(t))
            assert rep.total == (rep.l_s + rep.l_u) + rep.l_bf
            assert rep.l_s >= 0 and rep.l_u >= 0 and rep.l_bf >= 0

    def test_nonfinite_params_abort_with_schedule_dump(self):
        cfg = tiny_config()
        trainer = Trainer(cfg, tiny_dataset(cfg))
        trainer.student.tensors["seg_b"] = np.array([np.inf, 0.0], dtype=np.float32)
        with pytest.raises(TrainingAbort, match="schedule"):
            trainer.step(*trainer.batch_for(0))

    def test_teacher_matches_ema_closed_form_over_five_steps(self):
        """theta_t = d^t theta_0 + (1-d) sum_i d^(t-1-i) student_{i+1}."""
        cfg = tiny_config(dtype="float64")
        trainer = Trainer(cfg, tiny_dataset(cfg))
        theta0 = {k: v.copy() for k, v in trainer.teacher.tensors.items()}
        students = []
        for t in range(5):
            trainer.step(*trainer.batch_for(t))
            students.append({k: v.copy() for k, v in trainer.student.tensors.items()})
        d = cfg.ema_decay
        for name in PARAM_NAMES:
            expected = theta0[name] * d**5
            for i, snap in enumerate(students):
                expected = expected + (1 - d) * d ** (5 - 1 - i) * snap[name]
            np.testing.assert_allclose(
                trainer.teacher.tensors[name], expected, rtol=1e-10, atol=1e-12
            )

    def test_step_determinism_across_trainers(self):
        cfg = tiny_config()
        ds = tiny_dataset(cfg)
        a, b = Trainer(cfg, ds), Trainer(cfg, ds)
        for t in range(5):
            ra = a.step(*a.batch_for(t))
            rb = b.step(*b.batch_for(t))
            assert ra.csv_row() == rb.csv_row()


def flat_dice_ce(probs, labels, idx=None):
    """Independent minimal loss path: direct formulas on flat arrays."""
    p2 = probs.reshape(-1, 2)
    lab = labels.reshape(-1)
    if idx is not None:
        p2, lab = p2[idx], lab[idx]
    g = (lab == 1).astype(np.float64)
    pc = p2[:, 1]
    dice = 1.0 - (2.0 * np.dot(pc, g) + 1e-5) / (pc.sum() + g.sum() + 1e-5)
    picked = np.maximum(p2[np.arange(lab.size), lab], 1e-7)
    return dice + float(np.mean(-np.log(picked)))


class TestBaselineDegeneration:
    def test_three_steps_match_minimal_mean_teacher_oracle(self):
        """With selection and contrast off, per-step losses must equal an
        independently coded mean-teacher-with-fusion computation."""
        cfg = tiny_config(enable_su=False, enable_sc=False, dtype="float64")
        trainer = Trainer(cfg, tiny_dataset(cfg))
        for t in range(3):
            trace = StepTrace()
            report = trainer.step(*trainer.batch_for(t), capture=trace)
            ls = flat_dice_ce(trace.labeled_probs, trace.labeled_fused.data)
            lu = flat_dice_ce(trace.unlabeled_probs, trace.unlabeled_pseudo.data)
            assert abs(report.l_s - ls) < 1e-9
            assert abs(report.l_u - lu) < 1e-9
            assert report.l_bf == 0.0

    def test_masked_step_matches_subset_oracle(self):
        cfg = tiny_config(dtype="float64")
        trainer = Trainer(cfg, tiny_dataset(cfg))
        for t in range(3):
            trace = StepTrace()
            report = trainer.step(*trainer.batch_for(t), capture=trace)
            idx = np.flatnonzero(trace.mask.data.ravel())
            assert idx.size == report.mask_count
            if idx.size:
                lu = flat_dice_ce(trace.unlabeled_probs, trace.unlabeled_pseudo.data, idx)
                assert abs(report.l_u - lu) < 1e-9


class TestRunTraining:
    def test_zero_iterations_checkpoints_only(self, tmp_path):
        cfg = tiny_config(iterations=0)
        result = run_training(cfg, tiny_dataset(cfg), tmp_path)
        assert (tmp_path / "final.ckpt").exists()
        assert (tmp_path / "best.ckpt").exists()
        train_log = (tmp_path / "train_log.csv").read_text().splitlines()
        assert len(train_log) == 1  # header only
        assert result.final_summary == {}

    def test_run_produces_logs_and_checkpoints(self, tmp_path):
        cfg = tiny_config()
        result = run_training(cfg, tiny_dataset(cfg), tmp_path)
        train_log = (tmp_path / "train_log.csv").read_text().splitlines()
        assert len(train_log) == 1 + cfg.iterations
        assert train_log[0].startswith("t,L_s,L_u,L_bf,L_total")
        eval_log = (tmp_path / "eval_log.csv").read_text().splitlines()
        assert len(eval_log) == 1 + cfg.iterations // cfg.eval_period
        assert 0.0 <= result.final_summary["dsc"] <= 1.0
        assert (tmp_path / "eval_final.csv").exists()

    def test_byte_identical_reruns(self, tmp_path):
        """Identical config + seed -> byte-identical logs."""
        cfg = tiny_config()
        run_training(cfg, tiny_dataset(cfg), tmp_path / "a")
        run_training(cfg, tiny_dataset(cfg), tmp_path / "b")
        for name in ("train_log.csv", "eval_log.csv", "eval_final.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_logged_lambda_column_matches_growth_law(self, tmp_path):
        cfg = tiny_config()
        run_training(cfg, tiny_dataset(cfg), tmp_path)
        rows = (tmp_path / "train_log.csv").read_text().splitlines()[1:]
        for t, row in enumerate(rows):
            lam = float(row.split(",")[7])
            assert lam == pytest.approx(0.1 * 1.01**t, rel=1e-12)
