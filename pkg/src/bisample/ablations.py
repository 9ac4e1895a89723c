"""Seeded ablation grids over the synthetic benchmark.

One world (thick + train + test datasets) is generated per seed; stage-1
and stage-2 checkpoints are computed once per seed and shared by every
stage-3 variant, so each ablation arm differs from the baseline only in
the factor under study.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from statistics import median

import numpy as np

from . import encoder as enc
from .datagen import BisampleDataset, GenSpec, PretrainDataset, generate, generate_thick, subset
from .errors import InvalidArgument
from .pipeline import (
    RunRecord,
    TrainPlan,
    evaluate_encoder,
    run_stage1,
    run_stage2,
    run_stage3,
)
from .rngkit import substream

SUITES = (
    "cvc",
    "prototype_mode",
    "niter_sweep",
    "queue_sweep",
    "loss_sweep",
    "identity_volume",
)

CVC_ARMS = ("c--", "cv-", "cvc", "--c", "-v-", "c-c")


@dataclass
class BenchmarkConfig:
    """Desk-scale benchmark: sized so a full arm trains in seconds."""

    input_dim: int = 64
    latent_dim: int = 16
    thick_classes: int = 120
    thick_samples: int = 16
    train_classes: int = 2000
    test_classes: int = 300
    id_noise: float = 0.05
    spot_noise: float = 0.20
    thick_noise: float = 0.15
    shift: float = 0.25
    mislabel: float = 0.01
    low_quality: float = 0.02

    stage1_iters: int = 800
    stage2_iters: int = 1000
    stage3_iters: int = 1500
    batch_classes: int = 32
    queue_size: int = 12
    candidate_size: int = 36
    n_iter: int = 450

    far: float = 1e-3
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def specs(self, seed: int) -> tuple[GenSpec, GenSpec, GenSpec]:
        """Thick/train/test share the seed (one world) on disjoint id ranges."""
        common = dict(input_dim=self.input_dim, latent_dim=self.latent_dim, seed=seed)
        thick = GenSpec(
            n_classes=self.thick_classes,
            id_noise_sigma=self.thick_noise,
            spot_noise_sigma=self.thick_noise,
            heterogeneity_shift=0.0,
            mislabel_rate=0.0,
            low_quality_rate=0.0,
            class_id_start=0,
            **common,
        )
        train = GenSpec(
            n_classes=self.train_classes,
            id_noise_sigma=self.id_noise,
            spot_noise_sigma=self.spot_noise,
            heterogeneity_shift=self.shift,
            mislabel_rate=self.mislabel,
            low_quality_rate=self.low_quality,
            class_id_start=self.thick_classes,
            **common,
        )
        test = replace(
            train,
            n_classes=self.test_classes,
            mislabel_rate=0.0,
            low_quality_rate=0.0,
            class_id_start=self.thick_classes + self.train_classes,
        )
        return thick, train, test

    def plan(self, seed: int) -> TrainPlan:
        plan = TrainPlan(seed=seed, far_targets=(self.far,))
        plan.model.feature_dim = 32
        plan.stage1.iterations = self.stage1_iters
        plan.stage1.batch_classes = min(self.batch_classes, self.thick_classes)
        plan.stage2.iterations = self.stage2_iters
        plan.stage2.batch_classes = self.batch_classes
        plan.stage3.iterations = self.stage3_iters
        plan.stage3.batch_classes = self.batch_classes
        plan.stage3.queue_size = self.queue_size
        plan.stage3.candidate_size = self.candidate_size
        plan.stage3.n_iter = self.n_iter
        return plan


@dataclass
class VariantOutcome:
    vr: float
    rows_synced_mean: float
    n_selected_mean: float
    converged: bool
    ce_start: float  # cumulative energy at K = 1% of N, start of stage 3
    ce_end: float
    record: RunRecord


class BenchRunner:
    """Caches worlds and shared checkpoints across ablation arms."""

    def __init__(self, cfg: BenchmarkConfig | None = None):
        self.cfg = cfg or BenchmarkConfig()
        self._worlds: dict[int, tuple[PretrainDataset, BisampleDataset, BisampleDataset]] = {}
        self._cache: dict[tuple, object] = {}

    # -- data ----------------------------------------------------------------

    def world(self, seed: int) -> tuple[PretrainDataset, BisampleDataset, BisampleDataset]:
        if seed not in self._worlds:
            thick_spec, train_spec, test_spec = self.cfg.specs(seed)
            self._worlds[seed] = (
                generate_thick(thick_spec, self.cfg.thick_samples),
                generate(train_spec),
                generate(test_spec),
            )
        return self._worlds[seed]

    def train_subset(self, seed: int, frac: float) -> BisampleDataset:
        _, train_ds, _ = self.world(seed)
        if frac >= 1.0:
            return train_ds
        k = max(2 * self.cfg.batch_classes, int(round(frac * train_ds.n_classes)))
        rng = substream(seed, "bench", "volume", f"{frac:.3f}")
        rows = np.sort(rng.choice(train_ds.n_classes, size=k, replace=False))
        return subset(train_ds, rows)

    # -- shared checkpoints ----------------------------------------------------

    def fresh_encoder(self, seed: int) -> enc.EncoderParams:
        plan = self.cfg.plan(seed)
        train_ds = self.world(seed)[1]
        params = enc.init_encoder(
            train_ds.input_dim, plan.model.hidden, plan.model.feature_dim,
            substream(seed, "init", "encoder"),
        )
        return enc.quantize(params)

    def stage1_params(self, seed: int) -> enc.EncoderParams:
        key = ("stage1", seed)
        if key not in self._cache:
            thick, _, _ = self.world(seed)
            plan = self.cfg.plan(seed)
            params = self.fresh_encoder(seed).copy()
            self._cache[key] = enc.quantize(run_stage1(plan, params, thick, RunRecord()))
        return self._cache[key].copy()

    def stage2_params(self, seed: int, volume: float = 1.0, base: str = "stage1") -> enc.EncoderParams:
        key = ("stage2", seed, volume, base)
        if key not in self._cache:
            plan = self.cfg.plan(seed)
            train_ds = self.train_subset(seed, volume)
            start = self.stage1_params(seed) if base == "stage1" else self.fresh_encoder(seed).copy()
            self._cache[key] = enc.quantize(run_stage2(plan, start, train_ds, RunRecord()))
        return self._cache[key].copy()

    # -- evaluation and stage-3 variants ---------------------------------------

    def vr_of(self, seed: int, params: enc.EncoderParams) -> float:
        points, _ = evaluate_encoder(params, self.world(seed)[2], (self.cfg.far,))
        return points[0].vr

    def stage3_variant(self, seed: int, base: str = "stage2", volume: float = 1.0, **overrides) -> VariantOutcome:
        """Run stage 3 from the given starting encoder with config overrides."""
        key = ("stage3", seed, base, volume, tuple(sorted(overrides.items())))
        if key in self._cache:
            return self._cache[key]
        plan = self.cfg.plan(seed)
        for name, value in overrides.items():
            if not hasattr(plan.stage3, name):
                raise InvalidArgument(f"unknown stage3 override {name!r}")
            setattr(plan.stage3, name, value)
        train_ds = self.train_subset(seed, volume)
        plan.stage3.n_iter = min(plan.stage3.n_iter, train_ds.n_classes)
        if base == "stage2":
            params = self.stage2_params(seed, volume)
        elif base == "stage1":
            params = self.stage1_params(seed)
        elif base == "fresh":
            params = self.fresh_encoder(seed).copy()
        else:
            raise InvalidArgument(f"unknown base {base!r}")

        record = RunRecord()
        art = run_stage3(plan, params, train_ds, record)
        vr = self.vr_of(seed, enc.quantize(art.params))
        rows = [r for r in record.rows if r[0] == 3]
        info = record.stage_info.get(3, {})
        k_1pct = max(1, train_ds.n_classes // 100)
        ce = {(phase, k): v for phase, k, v in record.energy}
        outcome = VariantOutcome(
            vr=vr,
            rows_synced_mean=float(np.mean([r[5] for r in rows])) if rows else 0.0,
            n_selected_mean=float(np.mean([r[4] for r in rows])) if rows else 0.0,
            converged=bool(info.get("converged", False)),
            ce_start=ce.get(("start", k_1pct), float("nan")),
            ce_end=ce.get(("end", k_1pct), float("nan")),
            record=record,
        )
        self._cache[key] = outcome
        return outcome

    def arm(self, seed: int, pattern: str) -> dict:
        """One row of the stage-skip ablation: VR plus convergence info."""
        if pattern == "c--":
            return {"vr": self.vr_of(seed, self.stage1_params(seed)), "converged": True}
        if pattern == "cv-":
            return {"vr": self.vr_of(seed, self.stage2_params(seed)), "converged": True}
        if pattern == "-v-":
            return {"vr": self.vr_of(seed, self.stage2_params(seed, base="fresh")), "converged": True}
        if pattern == "cvc":
            out = self.stage3_variant(seed, base="stage2")
        elif pattern == "--c":
            out = self.stage3_variant(seed, base="fresh")
        elif pattern == "c-c":
            out = self.stage3_variant(seed, base="stage1")
        else:
            raise InvalidArgument(f"unknown arm {pattern!r}")
        return {"vr": out.vr, "converged": out.converged}


@dataclass
class AblationTable:
    suite: str
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        if not self.rows:
            raise InvalidArgument("no rows to write")
        columns = list(self.rows[0].keys())
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(self.rows)

    def medians(self, group_key: str = "arm", value_key: str = "vr") -> dict[str, float]:
        groups: dict[str, list[float]] = {}
        for row in self.rows:
            groups.setdefault(str(row[group_key]), []).append(float(row[value_key]))
        return {k: median(v) for k, v in groups.items()}


def run_ablation(suite: str, runner: BenchRunner) -> AblationTable:
    """Run one named suite over the runner's seeds and return the long-form table."""
    cfg = runner.cfg
    table = AblationTable(suite=suite)
    if suite == "cvc":
        for seed in cfg.seeds:
            for pattern in CVC_ARMS:
                row = runner.arm(seed, pattern)
                table.rows.append(
                    {"arm": pattern, "seed": seed, "far": cfg.far, "vr": row["vr"],
                     "converged": row["converged"]}
                )
    elif suite == "prototype_mode":
        for seed in cfg.seeds:
            for loss in ("softmax", "angular"):
                for mode in ("id", "avg"):
                    out = runner.stage3_variant(seed, loss=loss, prototype_mode=mode)
                    table.rows.append(
                        {"arm": f"{loss}({mode})", "seed": seed, "far": cfg.far, "vr": out.vr,
                         "converged": out.converged}
                    )
    elif suite == "niter_sweep":
        n = cfg.train_classes
        for seed in cfg.seeds:
            for frac in (0.02, 0.05, 0.10):
                n_iter = max(2 * cfg.batch_classes, int(round(frac * n)))
                out = runner.stage3_variant(seed, selection="random", n_iter=n_iter)
                table.rows.append(
                    {"arm": f"random({n_iter})", "seed": seed, "n_iter": n_iter,
                     "far": cfg.far, "vr": out.vr, "rows_synced": out.rows_synced_mean}
                )
    elif suite == "queue_sweep":
        for seed in cfg.seeds:
            for q in (5, 10, 25, 50):
                n_iter = min(cfg.train_classes, 2 * cfg.batch_classes * (q + 2) + 64)
                out = runner.stage3_variant(
                    seed, queue_size=q, candidate_size=3 * q, n_iter=n_iter
                )
                table.rows.append(
                    {"arm": f"dominant(q={q})", "seed": seed, "q": q, "far": cfg.far,
                     "vr": out.vr, "n_selected": out.n_selected_mean}
                )
            off = runner.stage3_variant(seed, queue_update=False)
            table.rows.append(
                {"arm": "dominant(no-update)", "seed": seed, "q": cfg.queue_size,
                 "far": cfg.far, "vr": off.vr, "n_selected": off.n_selected_mean}
            )
    elif suite == "loss_sweep":
        for seed in cfg.seeds:
            for loss, m in (("softmax", 0.0), ("additive", 0.35), ("angular", 4)):
                out = runner.stage3_variant(seed, loss=loss, margin_m=m)
                table.rows.append(
                    {"arm": f"dominant+{loss}", "seed": seed, "far": cfg.far, "vr": out.vr,
                     "converged": out.converged}
                )
    elif suite == "identity_volume":
        for seed in cfg.seeds:
            for frac in (0.1, 0.5, 1.0):
                out = runner.stage3_variant(seed, volume=frac)
                table.rows.append(
                    {"arm": f"volume({frac:.0%})", "seed": seed, "fraction": frac,
                     "far": cfg.far, "vr": out.vr}
                )
    else:
        raise InvalidArgument(f"unknown suite {suite!r}; choose from {SUITES}")
    return table
