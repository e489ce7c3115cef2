"""
Pre-training, fine-tuning, inference and the pre-training-set / fine-tuning
comparison experiment.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import MissingGeometry, NumericalError
from .geometry import BoundingBox, BouncePointSet, TriangleMesh, box_mesh, load_obj, poisson_disk_sample
from .nafield.model import (
    FieldConfig,
    FieldInput,
    LoraAdapter,
    ModelParams,
    encode_inputs,
    forward,
    gradients,
    init_params,
    lora_init,
    loss,
    spectrogram_target,
    synthesize_waveform,
)
from .retrieval import (
    RetrievalIndex,
    RirRecord,
    rank_rooms,
    retrieve_geometry,
    select_pretraining_rooms,
    select_random_rooms,
)
from .rir import BandSpec, ImpulseResponse, MetricErrors, metric_errors, multiband_rt60, read_wav
from .simulator import read_jsonl

logger = logging.getLogger(__name__)

MODES = ("pretrain", "finetune_lora", "finetune_full")


@dataclass(frozen=True)
class TrainRecipe:
    mode: str = "pretrain"
    epochs: int = 20
    batch_size: int = 16
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    lora_rank: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.epochs < 0 or self.batch_size < 1 or self.step_size <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and step_size > 0 required")
        if self.mode == "finetune_lora" and (self.lora_rank is None or self.lora_rank < 1):
            raise ValueError("finetune_lora needs lora_rank >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRecipe":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class Adam:
    """Adaptive-moment gradient descent over a dict of named arrays, updated in place."""

    def __init__(self, arrays: dict[str, np.ndarray], step_size: float, beta1: float, beta2: float, eps: float):
        self.arrays = arrays
        self.lr, self.b1, self.b2, self.eps = step_size, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in sorted(grads):
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.arrays[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- corpus access ----------------------------------------------------------


@dataclass
class RoomGeometry:
    room_id: str
    bbox: BoundingBox
    mesh: TriangleMesh


@dataclass(frozen=True)
class Example:
    rir_id: str
    room_id: str
    src: np.ndarray
    rcv: np.ndarray
    ir: ImpulseResponse


class Corpus:
    """
    A manifest (``manifest.jsonl``) plus room table (``rooms.jsonl``) on disk,
    with cached WAV decoding and per-room bounce points.
    """

    def __init__(self, records: Sequence[dict], rooms: Sequence[dict], root: str | Path = "."):
        self.root = Path(root)
        self.records = list(records)
        self.rooms = {r["room_id"]: r for r in rooms}
        self._ir_cache: dict[str, ImpulseResponse] = {}
        self._bounce_cache: dict[tuple, BouncePointSet] = {}
        self._by_room: dict[str, list[dict]] = {}
        for r in self.records:
            self._by_room.setdefault(r["room_id"], []).append(r)

    @classmethod
    def load(cls, directory: str | Path, manifest: str = "manifest.jsonl", rooms: str = "rooms.jsonl") -> "Corpus":
        d = Path(directory)
        return cls(read_jsonl(d / manifest), read_jsonl(d / rooms), d)

    def room_ids(self) -> list[str]:
        return sorted(self._by_room)

    def records_for(self, room_id: str) -> list[dict]:
        return sorted(self._by_room.get(room_id, []), key=lambda r: r["rir_id"])

    def without_room(self, room_id: str) -> "Corpus":
        sub = Corpus([r for r in self.records if r["room_id"] != room_id], list(self.rooms.values()), self.root)
        sub._ir_cache = self._ir_cache
        sub._bounce_cache = self._bounce_cache
        return sub

    def impulse_response(self, record: dict) -> ImpulseResponse:
        rid = record["rir_id"]
        if rid not in self._ir_cache:
            p = Path(record["wav_path"])
            self._ir_cache[rid] = read_wav(p if p.is_absolute() else self.root / p)
        return self._ir_cache[rid]

    def example(self, record: dict) -> Example:
        return Example(
            record["rir_id"],
            record["room_id"],
            np.asarray(record["src"], float),
            np.asarray(record["rcv"], float),
            self.impulse_response(record),
        )

    def geometry(self, room_id: str) -> RoomGeometry:
        row = self.rooms.get(room_id)
        if row is None:
            raise MissingGeometry(f"room {room_id} is not in the room table")
        return geometry_from_row(row, self.root)

    def bounce_points(self, geom: RoomGeometry, k: int, seed: int = 0) -> BouncePointSet:
        key = (geom.room_id, k, seed)
        if key not in self._bounce_cache:
            self._bounce_cache[key] = poisson_disk_sample(geom.mesh, k, seed, geom.room_id)
        return self._bounce_cache[key]


def geometry_from_row(row: dict, root: str | Path = ".") -> RoomGeometry:
    """Mesh from ``mesh_path`` when present, else a box mesh of ``bbox``."""
    room_id = row["room_id"]
    mesh = None
    if row.get("mesh_path"):
        p = Path(row["mesh_path"])
        mesh = load_obj(p if p.is_absolute() else Path(root) / p)
    if row.get("bbox"):
        bbox = BoundingBox.from_list(row["bbox"])
    elif mesh is not None:
        from .geometry import bounding_box

        bbox = bounding_box(mesh)
    else:
        raise MissingGeometry(f"room {room_id} has neither mesh nor bounding box")
    if mesh is None:
        mesh = box_mesh(bbox)
    return RoomGeometry(room_id, bbox, mesh)


# --- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    inputs: FieldInput
    targets: np.ndarray  # (N, T, F)
    ids: list[str]

    def __len__(self):
        return len(self.ids)


def make_dataset(
    config: FieldConfig,
    examples: Sequence[Example],
    geometry_for: Callable[[str], tuple[RoomGeometry, BouncePointSet]],
) -> Dataset:
    items, targets = [], []
    for ex in examples:
        geom, bps = geometry_for(ex.room_id)
        items.append(encode_inputs(config, ex.src, ex.rcv, bps, geom.bbox))
        targets.append(spectrogram_target(config, ex.ir))
    return Dataset(FieldInput.stack(items), np.stack(targets), [e.rir_id for e in examples])


def dataset_loss(params: ModelParams, adapter: LoraAdapter | None, data: Dataset) -> float:
    return loss(forward(params, adapter, data.inputs), data.targets)


def _run_epochs(
    params: ModelParams,
    adapter: LoraAdapter | None,
    data: Dataset,
    recipe: TrainRecipe,
    grad_mode: str,
    history: list | None,
) -> None:
    trainable = params_dict(params) if grad_mode == "base" else adapter.arrays()
    opt = Adam(trainable, recipe.step_size, recipe.beta1, recipe.beta2, recipe.adam_eps)
    rng = np.random.default_rng(recipe.seed)
    n = len(data)
    for epoch in range(recipe.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, recipe.batch_size):
            idx = perm[start : start + recipe.batch_size]
            l, grads = gradients(params, adapter, data.inputs.subset(idx), data.targets[idx], grad_mode)
            opt.step(grads)
            total += l * idx.size
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise NumericalError(f"non-finite loss at epoch {epoch}")
        if history is not None:
            history.append(epoch_loss)
        logger.info("%s epoch %d loss %.5f", recipe.mode, epoch, epoch_loss)


def params_dict(params: ModelParams) -> dict[str, np.ndarray]:
    """Live views of every weight and bias, keyed like gradient dicts."""
    return params.arrays()


# --- pipeline stages --------------------------------------------------------


def _corpus_geometry(corpus: Corpus, config: FieldConfig, bounce_seed: int):
    cache = {}

    def lookup(room_id):
        if room_id not in cache:
            g = corpus.geometry(room_id)
            cache[room_id] = (g, corpus.bounce_points(g, config.num_bounce_points, bounce_seed))
        return cache[room_id]

    return lookup


def pretrain(
    room_ids: Sequence[str],
    corpus: Corpus,
    config: FieldConfig,
    recipe: TrainRecipe,
    history: list | None = None,
    bounce_seed: int = 0,
) -> ModelParams:
    """
    Train base parameters on every RIR of the given rooms.

    Bounce points are sampled once per room.
    """
    lookup = _corpus_geometry(corpus, config, bounce_seed)
    examples = []
    for rid in room_ids:
        recs = corpus.records_for(rid)
        if not recs:
            raise MissingGeometry(f"room {rid} has no RIRs")
        lookup(rid)
        examples += [corpus.example(r) for r in recs]
    data = make_dataset(config, examples, lookup)
    params = init_params(config, recipe.seed)
    _run_epochs(params, None, data, recipe, "base", history)
    return params


@dataclass
class Enrollment:
    """Measured RIRs of a target room and the geometry to condition on."""

    examples: list[Example]
    geometry: RoomGeometry
    bounce: BouncePointSet

    @classmethod
    def build(cls, examples: Sequence[Example], geometry: RoomGeometry | None, k: int, bounce_seed: int = 0) -> "Enrollment":
        if geometry is None:
            raise MissingGeometry("enrollment needs a room geometry (provided or retrieved)")
        return cls(list(examples), geometry, poisson_disk_sample(geometry.mesh, k, bounce_seed, geometry.room_id))

    def dataset(self, config: FieldConfig) -> Dataset:
        return make_dataset(config, self.examples, lambda _rid: (self.geometry, self.bounce))


def finetune(
    base: ModelParams | None,
    enrollment: Enrollment,
    recipe: TrainRecipe,
    config: FieldConfig | None = None,
    history: list | None = None,
) -> tuple[ModelParams, LoraAdapter | None]:
    """
    Adapt to the enrollment set.

    ``finetune_lora`` leaves ``base`` untouched and returns new adapters;
    ``finetune_full`` returns an updated copy of ``base``. With ``base=None`` a
    freshly initialized model is trained in full, i.e. no pre-training.
    """
    if recipe.mode == "pretrain":
        raise ValueError("finetune needs a finetune_* recipe")
    config = config or base.config
    data = enrollment.dataset(config)
    if base is None:
        if recipe.mode != "finetune_full":
            raise ValueError("LoRA needs a pre-trained base")
        params = init_params(config, recipe.seed)
        _run_epochs(params, None, data, recipe, "base", history)
        return params, None
    if recipe.mode == "finetune_lora":
        adapter = lora_init(base, recipe.lora_rank, recipe.seed)
        _run_epochs(base, adapter, data, recipe, "lora", history)
        return base, adapter
    params = base.copy()
    _run_epochs(params, None, data, recipe, "base", history)
    return params, None


def infer(
    base: ModelParams,
    adapter: LoraAdapter | None,
    pairs: Sequence[tuple],
    geometry: RoomGeometry | None,
    bounce: BouncePointSet | None = None,
    iterations: int = 32,
    bounce_seed: int = 0,
) -> list[ImpulseResponse]:
    """One synthesized RIR per ``(src, rcv)`` pair."""
    if geometry is None:
        raise MissingGeometry("inference needs a room geometry")
    cfg = base.config
    if bounce is None:
        bounce = poisson_disk_sample(geometry.mesh, cfg.num_bounce_points, bounce_seed, geometry.room_id)
    if not pairs:
        return []
    src = np.array([p[0] for p in pairs], dtype=np.float64)
    rcv = np.array([p[1] for p in pairs], dtype=np.float64)
    specs = forward(base, adapter, encode_inputs(cfg, src, rcv, bounce, geometry.bbox))
    return [synthesize_waveform(cfg, s, iterations) for s in specs]


# --- experiment -------------------------------------------------------------

PRETRAIN_SETS = ("Retrieved", "Random", "None", "GroundTruth")
FINETUNE_METHODS = ("LoRA-1", "All Parameters", "None")


@dataclass(frozen=True)
class Condition:
    pretraining_set: str
    finetune_method: str

    def __post_init__(self):
        if self.pretraining_set not in PRETRAIN_SETS:
            raise ValueError(f"pretraining_set must be one of {PRETRAIN_SETS}")
        if self.finetune_method not in FINETUNE_METHODS:
            raise ValueError(f"finetune_method must be one of {FINETUNE_METHODS}")


TABLE1_CONDITIONS = (
    Condition("Retrieved", "LoRA-1"),
    Condition("Retrieved", "All Parameters"),
    Condition("Random", "LoRA-1"),
    Condition("Random", "All Parameters"),
    Condition("None", "All Parameters"),
)


@dataclass(frozen=True)
class ExperimentSettings:
    config: FieldConfig
    pretrain: TrainRecipe
    finetune_full: TrainRecipe
    finetune_lora: TrainRecipe
    m: int = 10
    limit: int = 100
    enrollment_count: int = 5
    evaluation_count: int = 20
    bands: BandSpec = field(default_factory=BandSpec)
    griffin_lim_iterations: int = 32
    use_retrieved_geometry: bool = False


@dataclass
class ReportRow:
    pretraining_set: str
    finetune_method: str
    rt60_err_pct: float
    edf_err_db: float
    drr_err_db: float


@dataclass
class ExperimentReport:
    rows: list[ReportRow]
    retrieved_rooms: list[str] = field(default_factory=list)
    random_rooms: list[str] = field(default_factory=list)

    def row(self, pretraining_set: str, finetune_method: str) -> ReportRow:
        for r in self.rows:
            if (r.pretraining_set, r.finetune_method) == (pretraining_set, finetune_method):
                return r
        raise KeyError((pretraining_set, finetune_method))

    def to_csv(self) -> str:
        lines = ["pretraining_set,finetune_method,rt60_err_pct,edf_err_db,drr_err_db"]
        for r in self.rows:
            lines.append(
                f"{r.pretraining_set},{r.finetune_method},{r.rt60_err_pct:.6f},{r.edf_err_db:.6f},{r.drr_err_db:.6f}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def build_index_from_corpus(corpus: Corpus, bands: BandSpec) -> RetrievalIndex:
    records = []
    for rec in corpus.records:
        fp = multiband_rt60(corpus.impulse_response(rec), bands)
        records.append(RirRecord(rec["rir_id"], rec["room_id"], tuple(rec["src"]), tuple(rec["rcv"]), fp))
    return RetrievalIndex(records, bands)


def split_target(corpus: Corpus, target_room: str, n_enroll: int, n_eval: int) -> tuple[list[Example], list[Example]]:
    recs = corpus.records_for(target_room)
    if len(recs) < n_enroll + n_eval:
        raise ValueError(f"room {target_room} has {len(recs)} RIRs, need {n_enroll + n_eval}")
    ex = [corpus.example(r) for r in recs]
    return ex[:n_enroll], ex[n_enroll : n_enroll + n_eval]


def _mean_errors(preds: Sequence[ImpulseResponse], refs: Sequence[Example], bands: BandSpec) -> tuple[float, float, float]:
    errs = np.array([metric_errors(p, r.ir, bands).as_tuple() for p, r in zip(preds, refs)])
    return tuple(float(v) for v in errs.mean(axis=0))


def evaluate_conditions(
    corpus: Corpus,
    target_room: str,
    conditions: Iterable[Condition],
    settings: ExperimentSettings,
    seed: int,
    index: RetrievalIndex | None = None,
) -> ExperimentReport:
    """
    Run every condition for one held-out room and report mean metric errors
    over its evaluation positions.

    The retrieval corpus excludes the target room. Pre-trained bases are shared
    between conditions using the same pre-training set.
    """
    conditions = list(conditions)
    cfg = settings.config
    enroll_ex, eval_ex = split_target(corpus, target_room, settings.enrollment_count, settings.evaluation_count)
    pool = corpus.without_room(target_room)
    if index is None:
        index = build_index_from_corpus(pool, settings.bands)
    fps = [multiband_rt60(e.ir, settings.bands) for e in enroll_ex]
    ranking = rank_rooms(index, fps, settings.m)
    retrieved = select_pretraining_rooms(ranking, settings.limit)
    random_rooms = select_random_rooms(index, len(retrieved), seed)
    logger.info("retrieved rooms: %s", retrieved)
    logger.info("random rooms: %s", random_rooms)

    if settings.use_retrieved_geometry:
        rid, row = retrieve_geometry(ranking, pool.rooms)
        geometry = geometry_from_row(row, corpus.root)
    else:
        geometry = corpus.geometry(target_room)
    enrollment = Enrollment.build(enroll_ex, geometry, cfg.num_bounce_points)
    pairs = [(e.src, e.rcv) for e in eval_ex]

    bases: dict[str, ModelParams] = {}

    def base_for(name):
        if name not in bases:
            rooms = retrieved if name == "Retrieved" else random_rooms
            bases[name] = pretrain(rooms, pool, cfg, replace(settings.pretrain, seed=seed))
        return bases[name]

    rows = []
    for cond in conditions:
        if cond.pretraining_set == "GroundTruth":
            preds = [e.ir for e in eval_ex]
        else:
            base = None if cond.pretraining_set == "None" else base_for(cond.pretraining_set)
            adapter = None
            if cond.finetune_method == "LoRA-1":
                params, adapter = finetune(base, enrollment, replace(settings.finetune_lora, seed=seed), cfg)
            elif cond.finetune_method == "All Parameters":
                params, _ = finetune(base, enrollment, replace(settings.finetune_full, seed=seed), cfg)
            else:
                if base is None:
                    raise ValueError("a condition without pre-training needs fine-tuning")
                params = base
            preds = infer(params, adapter, pairs, geometry, enrollment.bounce, settings.griffin_lim_iterations)
        rt, edf, dr = _mean_errors(preds, eval_ex, settings.bands)
        rows.append(ReportRow(cond.pretraining_set, cond.finetune_method, rt, edf, dr))
        logger.info("%s / %s: rt60 %.4f edf %.4f drr %.4f", cond.pretraining_set, cond.finetune_method, rt, edf, dr)
    return ExperimentReport(rows, retrieved, random_rooms)
