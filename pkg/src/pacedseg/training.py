"""The full teacher-student training loop with self-paced selection.

One iteration consumes one labeled and one unlabeled case:

  labeled:  two weak views in a shared flip frame -> teacher pseudo labels
            -> CutMix strong view -> fuse the CutMixed teacher label with
            the (identically flipped) registration label -> supervised
            Dice+CE on the student's strong-view prediction;
  unlabeled: two independently flipped weak views -> teacher pseudo labels
            -> MC-dropout entropy on view 1 -> self-paced voxel mask ->
            CutMix strong view -> mask-gated Dice+CE against the CutMixed
            pseudo label, plus the bidirectional feature contrast loss
            (teacher anchors, student strong-view negatives);
  update:   L = Ls + Lu + Lbf -> backprop -> SGD(momentum) on the student
            -> EMA refresh of the teacher -> age parameter advances.

Per-step randomness comes from a fixed number of spawned seed streams, so
toggling the selection or contrastive components never shifts the data
augmentation draws — ablation variants see identical inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .contrastive import contrast_loss_node, mine_pairs
from .errors import ConfigError, TrainingAbort
from .grids import (
    BoolMask,
    LabelMap,
    Volume,
    argmax_labels,
    downsample_labels_majority,
    downsample_mask,
    downsample_mean,
)
from .losses import LossReport, dice_ce_node
from .metrics import MetricsRecord, evaluate_case, summarize
from .network import (
    FeatureMap,
    ModelParams,
    SGDState,
    ema_update,
    forward,
    forward_graph,
    forward_parts,
    head_forward,
    init_params,
    make_dropout_mask,
    param_nodes,
    save_checkpoint,
    sgd_step,
)
from .perturb import apply_flips, cutmix_with_box, sample_box, sample_flips, weak_perturb
from .synthdata import (
    DEFAULT_REG_BETA,
    DEFAULT_REG_SIGMA,
    Dataset,
    LabeledCase,
    UnlabeledCase,
    fuse_with_weight_map,
    generate_dataset,
    slice_weight_map,
)
from .uncertainty import (
    advance_age,
    confident_ratio,
    make_schedule,
    mc_uncertainty_from_trunk,
    select_mask,
)

TRAIN_LOG_NAME = "train_log.csv"
EVAL_LOG_NAME = "eval_log.csv"
EVAL_FINAL_NAME = "eval_final.csv"
FINAL_CKPT_NAME = "final.ckpt"
BEST_CKPT_NAME = "best.ckpt"

EVAL_LOG_HEADER = "iteration,mean_dsc,mean_jaccard,mean_asd,mean_hd,n_undefined"


@dataclass
class TrainConfig:
    """Every knob of a run; maps 1:1 onto the flat key=value config file."""

    # optimization: lr steps down by lr_decay every decay_period iterations
    iterations: int = 1500
    lr0: float = 0.01
    lr_decay: float = 0.1
    decay_period: int = 625
    momentum: float = 0.9
    ema_decay: float = 0.99
    # self-paced uncertainty selection
    enable_su: bool = True
    mc_passes: int = 8
    tau_sched: float = 10.0
    alpha: float = 0.1
    delta: float = 1.01
    # bidirectional feature contrast
    enable_sc: bool = True
    tau_contrast: float = 0.5
    k_neg: int = 64
    # model
    n_classes: int = 2
    widths: tuple = (4, 8, 8, 8)
    embed_dim: int = 16
    dropout_rate: float = 0.3
    dtype: str = "float32"
    # synthetic data generator
    dim_h: int = 32
    dim_w: int = 32
    dim_d: int = 16
    n_labeled: int = 16
    n_unlabeled: int = 64
    noise_amp: float = 0.5
    radius_lo: float = 0.24
    radius_hi: float = 0.40
    center_jitter: float = 0.08
    edge_width: float = 0.08
    # registration surrogate + fusion
    reg_sigma: float = DEFAULT_REG_SIGMA
    reg_beta: float = DEFAULT_REG_BETA
    fuse_w0: float = 0.8
    fuse_half_life: float = 4.0
    # perturbations
    weak_sigma: float = 0.05
    # loss weights; 1.0 everywhere is the literal unweighted sum
    loss_w_s: float = 1.0
    loss_w_u: float = 1.0
    loss_w_bf: float = 1.0
    # run control
    seed: int = 0
    eval_seed: int = 777
    n_eval: int = 8
    eval_period: int = 250
    ablation_seeds: tuple = (1, 2, 3, 4, 5)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.dim_h, self.dim_w, self.dim_d)

    @property
    def np_dtype(self):
        return {"float32": np.float32, "float64": np.float64}[self.dtype]

    def validate(self) -> "TrainConfig":
        checks = [
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.lr0 > 0, "lr0 must be positive"),
            (0 < self.lr_decay <= 1, "lr_decay must be in (0, 1]"),
            (1 <= self.decay_period, "decay_period must be >= 1"),
            (self.iterations == 0 or self.decay_period <= self.iterations,
             "decay_period must not exceed iterations"),
            (0 <= self.momentum < 1, "momentum must be in [0, 1)"),
            (0 <= self.ema_decay < 1, "ema_decay must be in [0, 1)"),
            (self.mc_passes >= 1, "mc_passes must be >= 1"),
            (self.tau_sched > 0, "tau_sched must be positive"),
            (self.alpha > 0, "alpha must be positive"),
            (self.delta > 0, "delta must be positive"),
            (self.tau_contrast > 0, "tau_contrast must be positive"),
            (self.k_neg >= 0, "k_neg must be >= 0"),
            (self.n_classes >= 2, "need at least 2 classes"),
            (len(self.widths) == 4 and all(c >= 1 for c in self.widths),
             "widths must be 4 positive channel counts"),
            (self.embed_dim >= 1, "embed_dim must be >= 1"),
            (0 <= self.dropout_rate < 1, "dropout_rate must be in [0, 1)"),
            (self.dtype in ("float32", "float64"), "dtype must be float32 or float64"),
            (all(v >= 4 and v % 2 == 0 for v in self.dims), "dims must be even and >= 4"),
            (self.n_labeled >= 1 and self.n_unlabeled >= 1,
             "need at least one labeled and one unlabeled case"),
            (0 < self.radius_lo <= self.radius_hi < 0.5, "radius range must be in (0, 0.5)"),
            (self.reg_sigma >= 0 and self.reg_beta >= 0, "registration noise must be >= 0"),
            (0 <= self.fuse_w0 <= 1, "fuse_w0 must be in [0, 1]"),
            (self.fuse_half_life > 0, "fuse_half_life must be positive"),
            (self.n_eval >= 1, "n_eval must be >= 1"),
            (self.eval_period >= 1, "eval_period must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


_TUPLE_FIELDS = {"widths": int, "ablation_seeds": int}


def config_from_dict(values: dict[str, str]) -> TrainConfig:
    """Build a config from string key=value pairs, type-checked per field."""
    by_name = {f.name: f for f in fields(TrainConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in by_name:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(TrainConfig(), key)
        try:
            if key in _TUPLE_FIELDS:
                kwargs[key] = tuple(_TUPLE_FIELDS[key](x) for x in raw.replace(",", " ").split())
            elif isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(raw)
                kwargs[key] = raw.lower() in ("true", "1")
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from e
    return TrainConfig(**kwargs).validate()


def load_config(path) -> TrainConfig:
    """Parse a flat `key = value` file; '#' starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip()
    return config_from_dict(values)


def save_config(config: TrainConfig, path) -> None:
    with open(path, "w") as f:
        for fld in fields(TrainConfig):
            value = getattr(config, fld.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            f.write(f"{fld.name} = {value}\n")


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class StepTrace:
    """Intermediates captured for oracle tests and demos."""

    labeled_strong: Volume | None = None
    labeled_fused: LabelMap | None = None
    labeled_probs: np.ndarray | None = None
    unlabeled_strong: Volume | None = None
    unlabeled_pseudo: LabelMap | None = None
    unlabeled_probs: np.ndarray | None = None
    mask: BoolMask | None = None
    teacher_w1: np.ndarray | None = None
    teacher_w2: np.ndarray | None = None


class Trainer:
    """Owns student/teacher parameters, the optimizer, and the schedule."""

    def __init__(self, config: TrainConfig, dataset: Dataset):
        config.validate()
        if dataset.n_labeled < 1 or dataset.n_unlabeled < 1:
            raise ValueError("training needs at least one labeled and one unlabeled case")
        if dataset.dims != config.dims:
            raise ValueError(f"dataset dims {dataset.dims} != config dims {config.dims}")
        for case in dataset.labeled:
            if case.reg_label is None:
                raise ValueError(f"{case.case_id}: labeled case has no registration label")
        self.config = config
        self.dataset = dataset
        self.dtype = config.np_dtype
        self.student = init_params(
            n_classes=config.n_classes, widths=config.widths, embed_dim=config.embed_dim,
            dropout_rate=config.dropout_rate, seed=config.seed, dtype=self.dtype,
        )
        self.teacher = self.student.copy()
        self.opt = SGDState(self.student)
        self.schedule = make_schedule(
            max(config.iterations, 1), config.alpha, config.delta, config.tau_sched
        )
        self.t = 0
        self._root = np.random.SeedSequence((config.seed, 0xC0FFEE))
        self._weight_maps = {
            case.case_id: slice_weight_map(
                config.dims, case.k, config.fuse_w0, config.fuse_half_life
            ).data
            for case in dataset.labeled
        }
        self._drop_shape = (config.widths[3], *config.dims)

    def current_lr(self) -> float:
        return self.config.lr0 * self.config.lr_decay ** (self.t // self.config.decay_period)

    def _dropout_mask(self, seed_seq) -> np.ndarray:
        rng = np.random.default_rng(seed_seq)
        return make_dropout_mask(
            self._drop_shape, self.config.dropout_rate, rng
        ).astype(self.dtype)

    def _teacher_view(self, view: Volume):
        """Teacher trunk + clean head on one weak view."""
        hdec, feats = forward_parts(self.teacher, view.data)
        probs = head_forward(self.teacher, hdec)
        return hdec, feats, probs, np.argmax(probs, axis=3)

    def step(self, labeled: LabeledCase, unlabeled: UnlabeledCase,
             capture: StepTrace | None = None) -> LossReport:
        cfg = self.config
        if not self.student.finite():
            raise TrainingAbort(
                f"non-finite student parameters entering iteration {self.t}; "
                f"schedule={self.schedule}"
            )
        subs = self._root.spawn(1)[0].spawn(8)
        tape = Tape(self.dtype)
        pnodes = param_nodes(tape, self.student)

        # ----- labeled case: supervised loss against the fused label -----
        rng_l = np.random.default_rng(subs[0])
        flips = sample_flips(rng_l)
        w1, _, _ = weak_perturb(labeled.image, rng_l, sigma_scale=cfg.weak_sigma, flips=flips)
        w2, _, _ = weak_perturb(labeled.image, rng_l, sigma_scale=cfg.weak_sigma, flips=flips)
        _, _, probs1, y1 = self._teacher_view(w1)
        _, _, probs2, y2 = self._teacher_view(w2)
        box_l = sample_box(cfg.dims, np.random.default_rng(subs[1]))
        xs_l, ys_l, _ = cutmix_with_box(
            (w1, LabelMap(y1, cfg.n_classes)), (w2, LabelMap(y2, cfg.n_classes)), box_l
        )
        reg_f = LabelMap(apply_flips(labeled.reg_label.data, flips), cfg.n_classes)
        wmap_f = Volume(apply_flips(self._weight_maps[labeled.case_id], flips))
        fused = fuse_with_weight_map(reg_f, ys_l, wmap_f).fused
        probs_l, _, _ = forward_graph(tape, pnodes, xs_l.data, self._dropout_mask(subs[2]))
        ls_node = dice_ce_node(tape, probs_l, fused.data, cfg.n_classes)

        # ----- unlabeled case: gated consistency + feature contrast -----
        u1, _, _ = weak_perturb(unlabeled.image, np.random.default_rng(subs[3]),
                                sigma_scale=cfg.weak_sigma)
        u2, _, _ = weak_perturb(unlabeled.image, np.random.default_rng(subs[4]),
                                sigma_scale=cfg.weak_sigma)
        hdec_u1, feats_u1, probs_u1, yu1 = self._teacher_view(u1)
        _, feats_u2, probs_u2, yu2 = self._teacher_view(u2)

        branch = "warm" if self.schedule.last_lu >= self.schedule.lam else "confident"
        if cfg.enable_su:
            mc_seed = int(np.random.default_rng(subs[7]).integers(0, 2**62))
            _, umap = mc_uncertainty_from_trunk(self.teacher, hdec_u1, cfg.mc_passes, mc_seed)
            r_conf, v = confident_ratio(self.schedule, self.schedule.last_lu)
            mask = select_mask(umap, r_conf)
        else:
            r_conf, v = 1.0, None
            mask = BoolMask(np.ones(cfg.dims, dtype=bool))

        box_u = sample_box(cfg.dims, np.random.default_rng(subs[5]))
        xs_u, ys_u, _ = cutmix_with_box(
            (u1, LabelMap(yu1, cfg.n_classes)), (u2, LabelMap(yu2, cfg.n_classes)), box_u
        )
        probs_u, feats_u, _ = forward_graph(tape, pnodes, xs_u.data, self._dropout_mask(subs[6]))
        gate = np.flatnonzero(mask.data.ravel())
        lu_node = dice_ce_node(tape, probs_u, ys_u.data, cfg.n_classes, gate_idx=gate)

        if cfg.enable_sc:
            factor = (2, 2, 2)
            mask_ds = downsample_mask(mask, factor)
            pw1 = downsample_labels_majority(LabelMap(yu1, cfg.n_classes), factor)
            pw2 = downsample_labels_majority(LabelMap(yu2, cfg.n_classes), factor)
            probs_sn = np.asarray(probs_u.value, dtype=np.float64)
            preds_sn = downsample_labels_majority(
                LabelMap(np.argmax(probs_sn, axis=3), cfg.n_classes), factor
            )
            conf_sn = downsample_mean(Volume(probs_sn.max(axis=3)), factor)
            batch = mine_pairs(
                FeatureMap(feats_u1), FeatureMap(feats_u2), FeatureMap(feats_u.value),
                pw1, pw2, preds_sn, mask_ds, conf_sn, cfg.k_neg, cfg.tau_contrast,
            )
            lbf_node = contrast_loss_node(tape, feats_u, batch)
        else:
            lbf_node = tape.input(0.0)

        ls_w = tape.scale(ls_node, cfg.loss_w_s)
        lu_w = tape.scale(lu_node, cfg.loss_w_u)
        lbf_w = tape.scale(lbf_node, cfg.loss_w_bf)
        total = tape.add(tape.add(ls_w, lu_w), lbf_w)

        if not np.isfinite(total.value):
            raise TrainingAbort(
                f"non-finite loss at iteration {self.t}: "
                f"Ls={float(ls_node.value)} Lu={float(lu_node.value)} "
                f"Lbf={float(lbf_node.value)} schedule={self.schedule}"
            )

        if capture is not None:
            capture.labeled_strong = xs_l
            capture.labeled_fused = fused
            capture.labeled_probs = np.asarray(probs_l.value, dtype=np.float64)
            capture.unlabeled_strong = xs_u
            capture.unlabeled_pseudo = ys_u
            capture.unlabeled_probs = np.asarray(probs_u.value, dtype=np.float64)
            capture.mask = mask
            capture.teacher_w1 = probs_u1
            capture.teacher_w2 = probs_u2

        tape.backward(total)
        grads = {
            name: (node.grad if node.grad is not None else np.zeros_like(node.value))
            for name, node in pnodes.items()
        }
        loss_vals = (float(ls_w.value), float(lu_w.value), float(lbf_w.value))
        lu_raw = float(lu_node.value)
        tape.release()

        lr = self.current_lr()
        sgd_step(self.student, grads, lr, cfg.momentum, self.opt)
        ema_update(self.teacher, self.student, cfg.ema_decay)

        report = LossReport(
            t=self.t,
            l_s=loss_vals[0], l_u=loss_vals[1], l_bf=loss_vals[2],
            mask_count=mask.count, r_conf=r_conf, branch=branch, v=v,
            lam=self.schedule.lam, lr=lr,
        )
        self.schedule = advance_age(replace(self.schedule, last_lu=lu_raw, v=v))
        self.t += 1
        return report

    def batch_for(self, t: int) -> tuple[LabeledCase, UnlabeledCase]:
        return (
            self.dataset.labeled[t % self.dataset.n_labeled],
            self.dataset.unlabeled[t % self.dataset.n_unlabeled],
        )


def evaluate_params(params: ModelParams, cases, n_classes: int) -> list[MetricsRecord]:
    """Dropout-off student predictions scored against hidden truths."""
    records = []
    for case in cases:
        probs, _ = forward(params, case.image, dropout_on=False, rng_seed=0)
        records.append(evaluate_case(case.case_id, argmax_labels(probs), case.truth))
    return records


@dataclass
class RunResult:
    out_dir: str
    iterations: int
    final_summary: dict
    best_summary: dict
    best_iteration: int


def _summary_row(iteration: int, summary: dict) -> str:
    return (
        f"{iteration},{summary['dsc']!r},{summary['jaccard']!r},"
        f"{summary['asd']!r},{summary['hd']!r},{int(summary['n_undefined'])}"
    )


def run_training(config: TrainConfig, dataset: Dataset, out_dir) -> RunResult:
    """Train, log per-iteration losses and periodic metrics, persist checkpoints."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_set = generate_dataset(
        config.n_eval, 0, config.dims, seed=config.eval_seed,
        noise_amp=config.noise_amp, radius_range=(config.radius_lo, config.radius_hi),
        center_jitter=config.center_jitter, edge_width=config.edge_width,
    ).labeled

    trainer = Trainer(config, dataset)
    best = {"iteration": 0, "params": trainer.student.copy(), "summary": None}
    eval_rows = []

    with open(out / TRAIN_LOG_NAME, "w") as log:
        log.write(LossReport.CSV_HEADER + "\n")
        for t in range(config.iterations):
            labeled, unlabeled = trainer.batch_for(t)
            try:
                report = trainer.step(labeled, unlabeled)
            except TrainingAbort:
                log.flush()
                raise
            log.write(report.csv_row() + "\n")
            if (t + 1) % config.eval_period == 0:
                summary = summarize(evaluate_params(trainer.student, eval_set, config.n_classes))
                eval_rows.append(_summary_row(t + 1, summary))
                if best["summary"] is None or summary["dsc"] > best["summary"]["dsc"]:
                    best = {"iteration": t + 1, "params": trainer.student.copy(),
                            "summary": summary}

    if config.iterations > 0:
        final_records = evaluate_params(trainer.student, eval_set, config.n_classes)
        final_summary = summarize(final_records)
        if best["summary"] is None or final_summary["dsc"] > best["summary"]["dsc"]:
            best = {"iteration": config.iterations, "params": trainer.student.copy(),
                    "summary": final_summary}
        with open(out / EVAL_FINAL_NAME, "w") as f:
            f.write(MetricsRecord.CSV_HEADER + "\n")
            for rec in final_records:
                f.write(rec.csv_row() + "\n")
    else:
        final_summary = {}

    with open(out / EVAL_LOG_NAME, "w") as f:
        f.write(EVAL_LOG_HEADER + "\n")
        for row in eval_rows:
            f.write(row + "\n")

    save_checkpoint(
        out / FINAL_CKPT_NAME,
        {"student": trainer.student, "teacher": trainer.teacher},
        {"iteration": trainer.t, "lambda": trainer.schedule.lam},
    )
    save_checkpoint(
        out / BEST_CKPT_NAME,
        {"student": best["params"]},
        {"iteration": best["iteration"]},
    )
    return RunResult(
        out_dir=str(out), iterations=config.iterations,
        final_summary=final_summary,
        best_summary=best["summary"] or {},
        best_iteration=best["iteration"],
    )
