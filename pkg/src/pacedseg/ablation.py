"""Four-variant ablation harness: baseline, +SU, +SC, and the full model.

All variants of a seed train on the same dataset and are scored on the
same held-out evaluation set, so differences isolate the selection and
contrastive components.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .synthdata import attach_registration, generate_dataset
from .training import TrainConfig, run_training

VARIANTS = (
    ("baseline", False, False),
    ("su", True, False),
    ("sc", False, True),
    ("full", True, True),
)

RUNS_CSV = "ablation_runs.csv"
SUMMARY_CSV = "ablation_summary.csv"
TABLE_TXT = "ablation_table.txt"

_METRICS = ("dsc", "jaccard", "asd", "hd")


@dataclass
class AblationResult:
    out_dir: str
    seeds: tuple
    runs: dict            # (variant, seed) -> final summary dict
    aggregate: dict       # variant -> {metric: (mean, std)}
    table: str


def _dataset_for_seed(config: TrainConfig, seed: int):
    ds = generate_dataset(
        config.n_labeled, config.n_unlabeled, config.dims, seed=seed,
        noise_amp=config.noise_amp, radius_range=(config.radius_lo, config.radius_hi),
        center_jitter=config.center_jitter, edge_width=config.edge_width,
    )
    return attach_registration(ds, config.reg_sigma, config.reg_beta, seed=seed)


def _aggregate(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    defined = arr[np.isfinite(arr)]
    if defined.size == 0:
        return float("nan"), float("nan")
    std = float(defined.std(ddof=1)) if defined.size > 1 else 0.0
    return float(defined.mean()), std


def format_table(aggregate: dict) -> str:
    header = f"{'variant':<10}" + "".join(f"{m.upper():>18}" for m in _METRICS)
    lines = [header, "-" * len(header)]
    for name, _, _ in VARIANTS:
        cells = []
        for metric in _METRICS:
            mean, std = aggregate[name][metric]
            cells.append(f"{mean:9.4f} +-{std:6.4f}")
        lines.append(f"{name:<10}" + "".join(f"{c:>18}" for c in cells))
    return "\n".join(lines)


def run_ablation(config: TrainConfig, seeds, out_dir, progress=None) -> AblationResult:
    """Train every variant for every seed; aggregate mean +- std per variant."""
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < 3:
        raise ValueError("ablation needs at least 3 seeds")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    runs = {}
    for seed in seeds:
        dataset = _dataset_for_seed(config, seed)
        for name, enable_su, enable_sc in VARIANTS:
            cfg = replace(config, enable_su=enable_su, enable_sc=enable_sc, seed=seed)
            run_dir = out / "runs" / f"{name}_seed{seed}"
            result = run_training(cfg, dataset, run_dir)
            runs[(name, seed)] = result.final_summary
            if progress is not None:
                progress(name, seed, result.final_summary)

    aggregate = {
        name: {
            metric: _aggregate([runs[(name, s)][metric] for s in seeds])
            for metric in _METRICS
        }
        for name, _, _ in VARIANTS
    }

    with open(out / RUNS_CSV, "w") as f:
        f.write("variant,seed," + ",".join(_METRICS) + "\n")
        for name, _, _ in VARIANTS:
            for seed in seeds:
                summary = runs[(name, seed)]
                f.write(f"{name},{seed}," + ",".join(repr(summary[m]) for m in _METRICS) + "\n")
    with open(out / SUMMARY_CSV, "w") as f:
        f.write("variant," + ",".join(f"{m}_mean,{m}_std" for m in _METRICS) + ",n_runs\n")
        for name, _, _ in VARIANTS:
            cells = []
            for metric in _METRICS:
                mean, std = aggregate[name][metric]
                cells.extend([repr(mean), repr(std)])
            f.write(f"{name}," + ",".join(cells) + f",{len(seeds)}\n")
    table = format_table(aggregate)
    (out / TABLE_TXT).write_text(table + "\n")

    return AblationResult(str(out), seeds, runs, aggregate, table)
