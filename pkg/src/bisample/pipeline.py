"""Three-stage training orchestration.

Stage 1 pretrains the encoder as a classifier over a thick multi-sample
set. Stage 2 discards that head and fine-tunes on the bisample set with a
verification loss. Stage 3 builds one prototype per bisample class from the
stage-2 features and runs selective-prototype classification (random or
dominant selection) against the full class inventory.

Every stochastic component draws from a named stream under the plan seed,
so two runs with the same plan are bit-identical and ablations differ only
in the intended factor. Stages always hand over parameters through the
32-bit checkpoint representation, which makes a killed-and-resumed run
indistinguishable from an uninterrupted one.
"""

from __future__ import annotations

import configparser
import csv
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import classification as cls
from . import encoder as enc
from . import verification as ver
from .datagen import BisampleDataset, PretrainDataset, load_bisample, load_thick
from .domqueue import CASES, DominantQueues, build_graph, select_dominant, update_queues
from .errors import ConfigError, DegenerateVector, InvalidArgument, NonFinite, StageDiverged
from .evaluation import FarPoint, ScoreSet, batched_features, score_pairs, vr_at_far
from .numkit import softmax_rows
from .prototypes import PrototypeStore, energy_report
from .rngkit import substream

DIVERGENCE_LOSS_LIMIT = 1e3


# ---------------------------------------------------------------------------
# plan


@dataclass
class ModelCfg:
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 32


@dataclass
class DataCfg:
    thick: str = ""
    train: str = ""
    test: str = ""


@dataclass
class Stage1Cfg:
    skip: bool = False
    loss: str = "angular"  # softmax | angular | additive
    iterations: int = 2000
    lr: float = 0.1
    momentum: float = 0.9
    batch_classes: int = 32
    margin_m: float = 4
    margin_s: float = 16.0


@dataclass
class Stage2Cfg:
    skip: bool = False
    loss: str = "triplet"  # triplet | contrastive
    iterations: int = 3000
    lr: float = 0.05
    momentum: float = 0.9
    batch_classes: int = 32
    margin: float = 0.2
    tau: float = 0.4
    swap: bool = True
    mine: bool = True


@dataclass
class Stage3Cfg:
    skip: bool = False
    selection: str = "dominant"  # random | dominant | full
    loss: str = "angular"  # softmax | angular | additive
    n_iter: int = 3500
    queue_size: int = 100
    candidate_size: int = 300
    queue_update: bool = True
    prototype_mode: str = "id"  # id | avg
    iterations: int = 5000
    lr: float = 0.02
    proto_lr: float = 0.02
    momentum: float = 0.9
    batch_classes: int = 32
    margin_m: float = 4
    margin_s: float = 16.0
    anneal_frac: float = 0.2


@dataclass
class TrainPlan:
    seed: int = 0
    far_targets: tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    model: ModelCfg = field(default_factory=ModelCfg)
    data: DataCfg = field(default_factory=DataCfg)
    stage1: Stage1Cfg = field(default_factory=Stage1Cfg)
    stage2: Stage2Cfg = field(default_factory=Stage2Cfg)
    stage3: Stage3Cfg = field(default_factory=Stage3Cfg)

    def stage_pattern(self) -> str:
        """Which stages run, e.g. "cvc", "cv-", "--c"."""
        return "".join(
            "-" if cfg.skip else tag
            for tag, cfg in (("c", self.stage1), ("v", self.stage2), ("c", self.stage3))
        )


_LOSS1 = ("softmax", "angular", "additive")
_LOSS2 = ("triplet", "contrastive")
_SELECTIONS = ("random", "dominant", "full")


def _conv_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _conv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _conv_floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _conv_choice(*choices: str):
    def conv(text: str) -> str:
        t = text.strip()
        if t not in choices:
            raise ValueError(f"expected one of {choices}, got {t!r}")
        return t

    return conv


_PLAN_SCHEMA: dict[str, tuple[str, dict]] = {
    "run": (
        "",
        {"seed": int, "far_targets": _conv_floats},
    ),
    "model": (
        "model",
        {"hidden": _conv_ints, "feature_dim": int},
    ),
    "data": (
        "data",
        {"thick": str, "train": str, "test": str},
    ),
    "stage1": (
        "stage1",
        {
            "skip": _conv_bool,
            "loss": _conv_choice(*_LOSS1),
            "iterations": int,
            "lr": float,
            "momentum": float,
            "batch_classes": int,
            "margin_m": float,
            "margin_s": float,
        },
    ),
    "stage2": (
        "stage2",
        {
            "skip": _conv_bool,
            "loss": _conv_choice(*_LOSS2),
            "iterations": int,
            "lr": float,
            "momentum": float,
            "batch_classes": int,
            "margin": float,
            "tau": float,
            "swap": _conv_bool,
            "mine": _conv_bool,
        },
    ),
    "stage3": (
        "stage3",
        {
            "skip": _conv_bool,
            "selection": _conv_choice(*_SELECTIONS),
            "loss": _conv_choice(*_LOSS1),
            "n_iter": int,
            "queue_size": int,
            "candidate_size": int,
            "queue_update": _conv_bool,
            "prototype_mode": _conv_choice("id", "avg"),
            "iterations": int,
            "lr": float,
            "proto_lr": float,
            "momentum": float,
            "batch_classes": int,
            "margin_m": float,
            "margin_s": float,
            "anneal_frac": float,
        },
    ),
}


def parse_plan(path) -> TrainPlan:
    """Read a sectioned key=value plan file; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep case so typos like "Niter" are caught, not folded
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError:
        raise
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    plan = TrainPlan()
    for section in parser.sections():
        if section not in _PLAN_SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        attr, keys = _PLAN_SCHEMA[section]
        target = plan if attr == "" else getattr(plan, attr)
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
            try:
                value = keys[key](raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {exc}") from exc
            setattr(target, key, value)
    _validate_plan(plan)
    return plan


def _validate_plan(plan: TrainPlan) -> None:
    for name, cfg in (("stage1", plan.stage1), ("stage2", plan.stage2), ("stage3", plan.stage3)):
        if cfg.iterations < 0 or cfg.lr <= 0 or not (0 <= cfg.momentum < 1):
            raise ConfigError(f"{name}: iterations/lr/momentum out of range")
        if cfg.batch_classes < 1:
            raise ConfigError(f"{name}: batch_classes must be >= 1")
    if plan.stage3.queue_size > plan.stage3.candidate_size:
        raise ConfigError("stage3: queue_size must be <= candidate_size")


def plan_to_dict(plan: TrainPlan) -> dict:
    out: dict[str, dict] = {}
    for section, (attr, keys) in _PLAN_SCHEMA.items():
        target = plan if attr == "" else getattr(plan, attr)
        out[section] = {}
        for key in keys:
            value = getattr(target, key)
            if isinstance(value, tuple):
                value = list(value)
            out[section][key] = value
    return out


def plan_from_dict(data: dict) -> TrainPlan:
    plan = TrainPlan()
    for section, values in data.items():
        if section not in _PLAN_SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        attr, keys = _PLAN_SCHEMA[section]
        target = plan if attr == "" else getattr(plan, attr)
        for key, value in values.items():
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
            if isinstance(value, list):
                value = tuple(value)
            setattr(target, key, value)
    _validate_plan(plan)
    return plan


# ---------------------------------------------------------------------------
# run record


RECORD_COLUMNS = (
    "stage",
    "iteration",
    "loss",
    "lr",
    "n_selected",
    "rows_synced",
    "q_correct",
    "q_in_queue",
    "q_promote",
    "q_reject",
)


class RunRecord:
    """Per-iteration log plus per-stage summaries and energy snapshots."""

    def __init__(self):
        self.rows: list[tuple] = []
        self.stage_info: dict[int, dict] = {}
        self.energy: list[tuple[str, int, float]] = []  # (phase, K, CE)

    def add(
        self,
        stage: int,
        loss: float,
        lr: float,
        n_selected: int = 0,
        rows_synced: int = 0,
        cases: dict[str, int] | None = None,
    ) -> None:
        cases = cases or {}
        self.rows.append(
            (
                stage,
                len(self.rows),  # global, strictly monotone iteration index
                loss,
                lr,
                n_selected,
                rows_synced,
                cases.get(CASES[0], 0),
                cases.get(CASES[1], 0),
                cases.get(CASES[2], 0),
                cases.get(CASES[3], 0),
            )
        )

    def stage_losses(self, stage: int) -> list[float]:
        return [r[2] for r in self.rows if r[0] == stage]

    def finish_stage(self, stage: int, **info) -> None:
        losses = self.stage_losses(stage)
        self.stage_info[stage] = dict(info)
        if losses:
            self.stage_info[stage].update(convergence_summary(losses))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(RECORD_COLUMNS)
            for row in self.rows:
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "RunRecord":
        record = cls()
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != RECORD_COLUMNS:
                raise ConfigError(f"{path}: unexpected record header")
            for row in reader:
                record.rows.append(
                    (
                        int(row[0]),
                        int(row[1]),
                        float(row[2]),
                        float(row[3]),
                        int(row[4]),
                        int(row[5]),
                        int(row[6]),
                        int(row[7]),
                        int(row[8]),
                        int(row[9]),
                    )
                )
        return record

    def drop_stages(self, stages: set[int]) -> None:
        self.rows = [r for r in self.rows if r[0] not in stages]

    def write_energy_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phase", "k", "ce"])
            for phase, k, ce in self.energy:
                writer.writerow([phase, k, f"{ce:.8g}"])


def convergence_summary(losses: list[float]) -> dict:
    """Windowed start-vs-end loss comparison; "not converged" means the
    last window still sits above 95% of the first one."""
    n = len(losses)
    w = max(1, min(500, n // 10)) if n >= 20 else max(1, n // 2)
    initial = float(np.mean(losses[:w]))
    final = float(np.mean(losses[-w:]))
    return {
        "initial_window_mean": initial,
        "final_window_mean": final,
        "converged": bool(final <= 0.95 * initial),
    }


class LrSchedule:
    """Divide lr by 10 after `patience` consecutive windows without a
    `min_improve` improvement of the windowed mean loss; at most
    `max_drops` divisions per stage."""

    def __init__(
        self,
        lr: float,
        window: int = 500,
        min_improve: float = 1e-4,
        patience: int = 3,
        max_drops: int = 2,
    ):
        self.lr = lr
        self.window = window
        self.min_improve = min_improve
        self.patience = patience
        self.max_drops = max_drops
        self._buffer: list[float] = []
        self._best = np.inf
        self._bad = 0
        self._drops = 0

    def observe(self, loss: float) -> None:
        self._buffer.append(loss)
        if len(self._buffer) < self.window:
            return
        mean = float(np.mean(self._buffer))
        self._buffer.clear()
        if mean < self._best - self.min_improve:
            self._best = mean
            self._bad = 0
            return
        self._bad += 1
        if self._bad >= self.patience and self._drops < self.max_drops:
            self.lr /= 10.0
            self._drops += 1
            self._bad = 0


# ---------------------------------------------------------------------------
# shared step machinery


@dataclass
class StepOutcome:
    loss: float
    n_selected: int
    rows_synced: int
    cases: dict[str, int]
    working_ids: np.ndarray | None = None
    probs: np.ndarray | None = None


def anneal_blend(iteration: int, total: int, frac: float) -> float:
    """Linear ramp from plain softmax to the full angular margin."""
    ramp = max(1, int(round(frac * total)))
    return min(1.0, iteration / ramp)


def classification_step(
    params: enc.EncoderParams,
    mstate: enc.MomentumState,
    store: PrototypeStore,
    inputs: np.ndarray,
    labels: np.ndarray,
    *,
    loss_kind: str,
    selection: str,
    n_iter: int,
    lr: float,
    proto_lr: float,
    momentum: float,
    margin_m: float = 4,
    margin_s: float = 16.0,
    blend: float = 1.0,
    queues: DominantQueues | None = None,
    queue_update: bool = False,
    filler_rng: np.random.Generator | None = None,
    keep_probs: bool = False,
) -> StepOutcome:
    """One classification iteration: forward, select, loss, update, write back.

    Prototype rows take a plain SGD step (no velocity state is kept for the
    sparsely-resident rows); the encoder uses momentum SGD.
    """
    fb, tape = enc.forward(params, inputs, labels)

    if selection == "random":
        ws = store.select_random(labels, n_iter, filler_rng)
    elif selection == "dominant":
        ids = select_dominant(labels, queues, n_iter, filler_rng)
        ws = store.take(ids, n_positive=len(set(labels.tolist())))
    elif selection == "full":
        ws = store.take(np.arange(store.n_classes, dtype=np.int64))
    else:
        raise InvalidArgument(f"unknown selection {selection!r}")

    if loss_kind == "softmax":
        res = cls.softmax_ce(fb.features, ws.w_iter, labels, class_ids=ws.class_ids)
        probs = res.selected.probs
    elif loss_kind == "additive":
        res = cls.margin_softmax(
            fb.features, ws.w_iter, labels, "additive", margin_m, margin_s,
            class_ids=ws.class_ids,
        )
        probs = softmax_rows(margin_s * (fb.features @ ws.w_iter.T))
    elif loss_kind == "angular":
        res = cls.hybrid_signal(
            fb.features, ws.w_iter, labels, margin_m, margin_s,
            class_ids=ws.class_ids, blend=blend,
        )
        probs = res.probs
    else:
        raise InvalidArgument(f"unknown loss kind {loss_kind!r}")

    grads, _ = enc.backward(tape, res.grad_features)
    enc.sgd_step(params, grads, lr, momentum, mstate)
    store.write_back(ws, ws.w_iter - proto_lr * res.grad_prototypes)

    cases: dict[str, int] = {}
    if queues is not None and queue_update:
        for decision in update_queues(labels, ws.class_ids, probs, queues):
            cases[decision.case] = cases.get(decision.case, 0) + 1

    return StepOutcome(
        loss=res.loss,
        n_selected=ws.size,
        rows_synced=ws.size,
        cases=cases,
        working_ids=ws.class_ids,
        probs=probs if keep_probs else None,
    )


def sample_thick_batch(
    thick: PretrainDataset, classes_per_batch: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Two distinct samples of each of `classes_per_batch` distinct classes."""
    if classes_per_batch > thick.n_classes:
        raise InvalidArgument("batch wants more classes than the thick set has")
    classes = rng.choice(thick.n_classes, size=classes_per_batch, replace=False).astype(np.int64)
    s = thick.samples_per_class
    first = rng.integers(0, s, size=classes_per_batch)
    second = rng.integers(0, s - 1, size=classes_per_batch)
    second = second + (second >= first)
    rows = np.empty((2 * classes_per_batch, thick.input_dim))
    rows[0::2] = thick.samples[classes, first]
    rows[1::2] = thick.samples[classes, second]
    return rows, np.repeat(classes, 2)


def _check_divergence(stage: int, iteration: int, loss: float) -> None:
    if not np.isfinite(loss) or loss > DIVERGENCE_LOSS_LIMIT:
        raise StageDiverged(stage, iteration, loss)


def _diverged_on(exc: Exception, stage: int, iteration: int) -> StageDiverged:
    # numerical blow-ups surface as non-finite values inside a step; report
    # them as divergence with the iteration index
    err = StageDiverged(stage, iteration, float("nan"))
    err.__cause__ = exc
    return err


# ---------------------------------------------------------------------------
# stages


def run_stage1(
    plan: TrainPlan, params: enc.EncoderParams, thick: PretrainDataset, record: RunRecord
) -> enc.EncoderParams:
    """Classification pretraining with a full head over the thick classes."""
    cfg = plan.stage1
    started = time.perf_counter()
    if cfg.skip:
        record.finish_stage(1, skipped=True, elapsed=0.0)
        return params
    if thick.samples_per_class <= 2:
        raise InvalidArgument("stage 1 needs more than 2 samples per class")

    head = PrototypeStore.random_init(
        thick.n_classes, params.out_dim, substream(plan.seed, "stage1", "head")
    )
    batch_rng = substream(plan.seed, "stage1", "batch")
    mstate = enc.MomentumState(params)
    sched = LrSchedule(cfg.lr)
    for it in range(cfg.iterations):
        inputs, labels = sample_thick_batch(thick, cfg.batch_classes, batch_rng)
        blend = anneal_blend(it, cfg.iterations, 0.2) if cfg.loss == "angular" else 1.0
        try:
            out = classification_step(
                params, mstate, head, inputs, labels,
                loss_kind=cfg.loss, selection="full", n_iter=thick.n_classes,
                lr=sched.lr, proto_lr=sched.lr, momentum=cfg.momentum,
                margin_m=cfg.margin_m, margin_s=cfg.margin_s, blend=blend,
            )
        except (NonFinite, DegenerateVector) as exc:
            raise _diverged_on(exc, 1, it) from exc
        _check_divergence(1, it, out.loss)
        record.add(1, out.loss, sched.lr, out.n_selected, out.rows_synced)
        sched.observe(out.loss)
    record.finish_stage(1, skipped=False, elapsed=time.perf_counter() - started)
    return params


def run_stage2(
    plan: TrainPlan, params: enc.EncoderParams, train_ds: BisampleDataset, record: RunRecord
) -> enc.EncoderParams:
    """Verification fine-tuning on the bisample set; the stage-1 head is gone."""
    cfg = plan.stage2
    started = time.perf_counter()
    if cfg.skip:
        record.finish_stage(2, skipped=True, elapsed=0.0)
        return params

    batch_rng = substream(plan.seed, "stage2", "batch")
    mstate = enc.MomentumState(params)
    sched = LrSchedule(cfg.lr)
    for it in range(cfg.iterations):
        bplan = ver.build_npairs_batch(train_ds, cfg.batch_classes, batch_rng)
        try:
            fb, tape = enc.forward(params, bplan.gather(train_ds), bplan.labels, bplan.kinds)
            if cfg.loss == "triplet":
                res = ver.triplet_loss(fb, cfg.margin, swap=cfg.swap, mine=cfg.mine)
            else:
                res = ver.contrastive_loss(fb, cfg.tau)
            grads, _ = enc.backward(tape, res.grad_features)
            enc.sgd_step(params, grads, sched.lr, cfg.momentum, mstate)
        except (NonFinite, DegenerateVector) as exc:
            raise _diverged_on(exc, 2, it) from exc
        _check_divergence(2, it, res.loss)
        record.add(2, res.loss, sched.lr)
        sched.observe(res.loss)
    record.finish_stage(2, skipped=False, elapsed=time.perf_counter() - started)
    return params


@dataclass
class Stage3Artifacts:
    params: enc.EncoderParams
    store: PrototypeStore | None
    queues: DominantQueues | None


def energy_snapshot(
    plan: TrainPlan,
    params: enc.EncoderParams,
    store: PrototypeStore,
    train_ds: BisampleDataset,
    n_batches: int = 16,
) -> list[tuple[int, float]]:
    """Average cumulative-energy curve over replayed batches, against the
    full prototype matrix (probability source: plain scaled softmax)."""
    cfg = plan.stage3
    n = store.n_classes
    k_list = sorted({1, max(1, n // 100), max(1, n // 20), max(1, n // 10), n})
    rng = substream(plan.seed, "stage3", "energy")
    sums = {k: 0.0 for k in k_list}
    scale = cfg.margin_s if cfg.loss in ("angular", "additive") else 1.0
    for _ in range(n_batches):
        bplan = ver.build_npairs_batch(train_ds, cfg.batch_classes, rng)
        fb, _ = enc.forward(params, bplan.gather(train_ds), bplan.labels)
        probs = softmax_rows(scale * (fb.features @ store.w.T))
        report = energy_report(np.arange(n, dtype=np.int64), bplan.labels, probs, k_list)
        for k, ce in report.ce:
            sums[k] += ce
    return [(k, sums[k] / n_batches) for k in k_list]


def run_stage3(
    plan: TrainPlan, params: enc.EncoderParams, train_ds: BisampleDataset, record: RunRecord
) -> Stage3Artifacts:
    """Selective-prototype classification over the full bisample inventory."""
    cfg = plan.stage3
    started = time.perf_counter()
    if cfg.skip:
        record.finish_stage(3, skipped=True, elapsed=0.0)
        return Stage3Artifacts(params=params, store=None, queues=None)

    n = train_ds.n_classes
    if cfg.selection in ("random", "dominant") and not (cfg.batch_classes <= cfg.n_iter <= n):
        raise InvalidArgument(f"n_iter={cfg.n_iter} must lie in [batch_classes, {n}]")
    if cfg.selection == "dominant" and cfg.candidate_size > n - 1:
        raise InvalidArgument(f"candidate_size={cfg.candidate_size} needs at most N-1={n-1}")

    id_feats = batched_features(params, train_ds.id_inputs)
    spot_feats = batched_features(params, train_ds.spot_inputs)
    store = PrototypeStore.from_features(id_feats, spot_feats, cfg.prototype_mode)

    queues = None
    if cfg.selection == "dominant":
        graph = build_graph(id_feats, cfg.candidate_size)
        queues = DominantQueues.from_graph(graph, cfg.queue_size, cfg.candidate_size)

    record.energy.extend(
        ("start", k, ce) for k, ce in energy_snapshot(plan, params, store, train_ds)
    )

    batch_rng = substream(plan.seed, "stage3", "batch")
    filler_rng = substream(plan.seed, "stage3", "fillers")
    mstate = enc.MomentumState(params)
    sched = LrSchedule(cfg.lr)
    for it in range(cfg.iterations):
        bplan = ver.build_npairs_batch(train_ds, cfg.batch_classes, batch_rng)
        blend = anneal_blend(it, cfg.iterations, cfg.anneal_frac) if cfg.loss == "angular" else 1.0
        try:
            out = classification_step(
                params, mstate, store, bplan.gather(train_ds), bplan.labels,
                loss_kind=cfg.loss, selection=cfg.selection, n_iter=cfg.n_iter,
                lr=sched.lr, proto_lr=cfg.proto_lr, momentum=cfg.momentum,
                margin_m=cfg.margin_m, margin_s=cfg.margin_s, blend=blend,
                queues=queues, queue_update=cfg.queue_update, filler_rng=filler_rng,
            )
        except (NonFinite, DegenerateVector) as exc:
            raise _diverged_on(exc, 3, it) from exc
        _check_divergence(3, it, out.loss)
        record.add(3, out.loss, sched.lr, out.n_selected, out.rows_synced, out.cases)
        sched.observe(out.loss)

    record.energy.extend(
        ("end", k, ce) for k, ce in energy_snapshot(plan, params, store, train_ds)
    )
    record.finish_stage(3, skipped=False, elapsed=time.perf_counter() - started)
    return Stage3Artifacts(params=params, store=store, queues=queues)


# ---------------------------------------------------------------------------
# whole runs


@dataclass
class CvcResult:
    params_by_stage: dict[int, enc.EncoderParams]  # quantized stage outputs
    store: PrototypeStore | None
    queues: DominantQueues | None
    record: RunRecord


def run_cvc(
    plan: TrainPlan,
    thick: PretrainDataset | None,
    train_ds: BisampleDataset,
    record: RunRecord | None = None,
) -> CvcResult:
    """In-memory three-stage run; stage handovers go through f32 rounding,
    exactly as the checkpoint files would."""
    record = record if record is not None else RunRecord()
    params = enc.init_encoder(
        train_ds.input_dim, plan.model.hidden, plan.model.feature_dim,
        substream(plan.seed, "init", "encoder"),
    )
    if not plan.stage1.skip and thick is None:
        raise InvalidArgument("stage 1 enabled but no thick dataset given")
    p1 = enc.quantize(run_stage1(plan, params, thick, record))
    p2 = enc.quantize(run_stage2(plan, p1.copy(), train_ds, record))
    art = run_stage3(plan, p2.copy(), train_ds, record)
    p3 = enc.quantize(art.params)
    return CvcResult(
        params_by_stage={1: p1, 2: p2, 3: p3},
        store=art.store,
        queues=art.queues,
        record=record,
    )


STAGE_CKPT = {1: "stage1.lblm", 2: "stage2.lblm", 3: "stage3.lblm"}
PROTO_CKPT = "prototypes.lblp"
QUEUE_CKPT = "queues.lblq"
RECORD_CSV = "record.csv"
ENERGY_CSV = "energy.csv"


@dataclass
class TrainResult:
    outdir: Path
    checkpoints: dict[str, Path]
    record: RunRecord


def _stage_artifacts(plan: TrainPlan, outdir: Path, stage: int) -> list[Path]:
    paths = [outdir / STAGE_CKPT[stage]]
    if stage == 3 and not plan.stage3.skip:
        paths.append(outdir / PROTO_CKPT)
        if plan.stage3.selection == "dominant":
            paths.append(outdir / QUEUE_CKPT)
    return paths


def train(
    plan: TrainPlan,
    outdir,
    resume: bool = False,
    stop_after: int | None = None,
    datasets: dict | None = None,
) -> TrainResult:
    """File-backed run: per-stage checkpoints, run record, energy snapshots.

    With ``resume`` the stages whose artifacts already exist are kept as-is
    and training restarts at the first incomplete stage; the result is
    bit-identical to an uninterrupted run because every stage reads its
    predecessor's f32 checkpoint and derives its own random streams.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    stop_after = 3 if stop_after is None else stop_after

    datasets = datasets or {}
    thick = datasets.get("thick")
    train_ds = datasets.get("train")
    if train_ds is None:
        if not plan.data.train:
            raise ConfigError("plan has no [data] train path and no dataset was passed")
        train_ds = load_bisample(plan.data.train)
    if thick is None and not plan.stage1.skip:
        if not plan.data.thick:
            raise ConfigError("stage 1 enabled but no thick dataset configured")
        thick = load_thick(plan.data.thick)

    record = RunRecord()
    record_path = outdir / RECORD_CSV
    done: set[int] = set()
    if resume and record_path.exists():
        record = RunRecord.from_csv(record_path)
    for stage in (1, 2, 3):
        if resume and all(p.exists() for p in _stage_artifacts(plan, outdir, stage)):
            done.add(stage)
        else:
            break  # a missing stage invalidates everything after it
    record.drop_stages({s for s in (1, 2, 3) if s not in done})

    checkpoints: dict[str, Path] = {}
    params: enc.EncoderParams | None = None

    def stage_input(stage: int) -> enc.EncoderParams:
        if stage == 1:
            return enc.init_encoder(
                train_ds.input_dim, plan.model.hidden, plan.model.feature_dim,
                substream(plan.seed, "init", "encoder"),
            )
        return enc.load_encoder(outdir / STAGE_CKPT[stage - 1])

    for stage in (1, 2, 3):
        if stage > stop_after:
            break
        ckpt = outdir / STAGE_CKPT[stage]
        if stage in done:
            checkpoints[f"stage{stage}"] = ckpt
            continue
        params = stage_input(stage)
        if stage == 1:
            params = run_stage1(plan, params, thick, record)
        elif stage == 2:
            params = run_stage2(plan, params, train_ds, record)
        else:
            art = run_stage3(plan, params, train_ds, record)
            params = art.params
            if art.store is not None:
                art.store.save(outdir / PROTO_CKPT)
                checkpoints["prototypes"] = outdir / PROTO_CKPT
            if art.queues is not None:
                art.queues.save(outdir / QUEUE_CKPT)
                checkpoints["queues"] = outdir / QUEUE_CKPT
            record.write_energy_csv(outdir / ENERGY_CSV)
        enc.save_encoder(params, ckpt)
        checkpoints[f"stage{stage}"] = ckpt
        record.to_csv(record_path)
    return TrainResult(outdir=outdir, checkpoints=checkpoints, record=record)


# ---------------------------------------------------------------------------
# measurement helpers


def classification_accuracy(
    params: enc.EncoderParams, head: PrototypeStore, inputs: np.ndarray, labels: np.ndarray
) -> float:
    feats = batched_features(params, inputs)
    preds = np.argmax(feats @ head.w.T, axis=1)
    return float(np.mean(preds == labels))


def evaluate_encoder(
    params: enc.EncoderParams, test_ds: BisampleDataset, far_targets: tuple[float, ...]
) -> tuple[list[FarPoint], ScoreSet]:
    from .datagen import make_test_pairs

    scores = score_pairs(params, test_ds, make_test_pairs(test_ds))
    return vr_at_far(scores, list(far_targets)), scores
