"""Incremental dataset mixing: staged categories and size-balanced sampling.

Every image of an active dataset ``i`` is drawn with probability proportional
to ``K / k_i`` (``K`` = total active images), which makes each active dataset
equally likely per draw regardless of its size. Stages add categories one at
a time; :meth:`CurriculumSchedule.observe_epoch` advances the stage once the
tracked loss stops improving.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CATEGORIES = ("I", "S", "PT", "HC")
DEFAULT_BATCH_SIZE = 48


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetDescriptor:
    id: str
    category: str
    size: int

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ScheduleError(f"dataset {self.id!r}: category must be one of {CATEGORIES}, got {self.category!r}")
        if isinstance(self.size, bool) or not isinstance(self.size, (int, np.integer)) or self.size < 1:
            raise ScheduleError(f"dataset {self.id!r}: size must be a positive integer, got {self.size!r}")


@dataclass(frozen=True)
class PlateauConfig:
    epsilon: float = 1e-3
    patience: int = 5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ScheduleError(f"plateau epsilon must be positive, got {self.epsilon}")
        if self.patience < 1:
            raise ScheduleError(f"plateau patience must be >= 1, got {self.patience}")


@dataclass
class SamplingTable:
    """Per-image probabilities of the active datasets, in schedule order."""

    ids: list[str]
    sizes: np.ndarray
    per_image: np.ndarray  # probability of one specific image of each dataset

    @property
    def dataset_mass(self) -> np.ndarray:
        return self.per_image * self.sizes

    def probability(self, dataset_id: str) -> float:
        """Per-image probability for ``dataset_id``; 0 for inactive datasets."""
        if dataset_id in self.ids:
            return float(self.per_image[self.ids.index(dataset_id)])
        return 0.0


@dataclass
class SampleBatch:
    entries: list[tuple[str, int]]

    def __len__(self):
        return len(self.entries)


@dataclass
class CurriculumSchedule:
    datasets: list[DatasetDescriptor]
    stages: list[frozenset[str]]
    active_stage: int = 0
    best_loss: float | None = None
    stale_epochs: int = 0

    def __post_init__(self):
        self.stages = [frozenset(s) for s in self.stages]
        if not self.stages:
            raise ScheduleError("schedule needs at least one stage")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if not prev <= cur:
                raise ScheduleError(f"stage {sorted(cur)} does not contain the previous stage {sorted(prev)}")
        for stage in self.stages:
            unknown = stage - set(CATEGORIES)
            if unknown:
                raise ScheduleError(f"unknown categories in stage: {sorted(unknown)}")
        ids = [d.id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise ScheduleError("dataset ids must be unique")
        if not 0 <= self.active_stage < len(self.stages):
            raise ScheduleError(f"active_stage {self.active_stage} out of range")

    @property
    def active_categories(self) -> frozenset[str]:
        return self.stages[self.active_stage]

    @property
    def is_final_stage(self) -> bool:
        return self.active_stage == len(self.stages) - 1

    def active_datasets(self) -> list[DatasetDescriptor]:
        return [d for d in self.datasets if d.category in self.active_categories]

    def observe_epoch(self, validation_loss: float, cfg: PlateauConfig = PlateauConfig()) -> bool:
        """Feed one epoch's loss; return True when this epoch moved to the next stage.

        An epoch is flat unless it improves on the best loss of the stage by at
        least ``cfg.epsilon`` relative. After ``cfg.patience`` consecutive flat
        epochs the stage advances and the current loss becomes the baseline
        for the new stage.
        """
        loss = float(validation_loss)
        if not np.isfinite(loss):
            raise ScheduleError(f"loss must be finite, got {validation_loss!r}")
        if self.best_loss is None:
            self.best_loss = loss
            self.stale_epochs = 0
            return False
        if self.best_loss - loss >= cfg.epsilon * abs(self.best_loss):
            self.best_loss = loss
            self.stale_epochs = 0
            return False
        self.stale_epochs += 1
        if self.stale_epochs < cfg.patience or self.is_final_stage:
            return False
        self.active_stage += 1
        self.best_loss = loss
        self.stale_epochs = 0
        return True

    def to_dict(self) -> dict:
        return {
            "datasets": [{"id": d.id, "category": d.category, "size": int(d.size)} for d in self.datasets],
            "stages": [sorted(s, key=CATEGORIES.index) for s in self.stages],
            "active_stage": self.active_stage,
            "best_loss": self.best_loss,
            "stale_epochs": self.stale_epochs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> CurriculumSchedule:
        return cls(
            datasets=parse_datasets(data["datasets"]),
            stages=[frozenset(s) for s in data["stages"]],
            active_stage=int(data.get("active_stage", 0)),
            best_loss=data.get("best_loss"),
            stale_epochs=int(data.get("stale_epochs", 0)),
        )

    @classmethod
    def from_json(cls, text: str) -> CurriculumSchedule:
        return cls.from_dict(json.loads(text))


DEFAULT_STAGES = (frozenset({"I", "S"}), frozenset({"I", "S", "PT"}), frozenset({"I", "S", "PT", "HC"}))


def default_curriculum(datasets=()) -> CurriculumSchedule:
    return CurriculumSchedule(list(datasets), list(DEFAULT_STAGES), active_stage=0)


def parse_datasets(records) -> list[DatasetDescriptor]:
    """Validate the dataset list from a JSON datasets file.

    Each record must be an object with ``id`` (string), ``category`` (one of
    I, S, PT, HC) and ``size`` (positive integer).
    """
    if not isinstance(records, list):
        raise ScheduleError("datasets file must hold a JSON array")
    out = []
    for n, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise ScheduleError(f"entry {n}: expected an object")
        for key in ("id", "category", "size"):
            if key not in rec:
                raise ScheduleError(f"entry {n}: missing field {key!r}")
        if not isinstance(rec["id"], str):
            raise ScheduleError(f"entry {n}: field 'id' must be a string")
        if not isinstance(rec["size"], int) or isinstance(rec["size"], bool):
            raise ScheduleError(f"entry {n}: field 'size' must be an integer")
        out.append(DatasetDescriptor(rec["id"], rec["category"], rec["size"]))
    return out


def sampling_weights(schedule: CurriculumSchedule) -> SamplingTable:
    active = schedule.active_datasets()
    if not active:
        raise ScheduleError(f"no dataset is active in stage {schedule.active_stage}")
    sizes = np.array([d.size for d in active], dtype=np.float64)
    total = sizes.sum()
    unnormalized = total / sizes
    per_image = unnormalized / np.dot(unnormalized, sizes)
    return SamplingTable([d.id for d in active], sizes, per_image)


def next_batch(schedule: CurriculumSchedule, batch_size: int = DEFAULT_BATCH_SIZE, rng=None) -> SampleBatch:
    """Draw ``batch_size`` images with replacement from the current sampling table.

    Each draw consumes one uniform variate and inverts the CDF over all
    active images (datasets in schedule order, images in index order).
    """
    if batch_size < 1:
        raise ScheduleError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(rng)
    table = sampling_weights(schedule)
    mass = table.dataset_mass
    edges = np.concatenate([[0.0], np.cumsum(mass)])
    edges[-1] = 1.0
    u = rng.random(batch_size)
    which = np.clip(np.searchsorted(edges, u, side="right") - 1, 0, len(mass) - 1)
    within = (u - edges[which]) / mass[which]
    index = np.minimum((within * table.sizes[which]).astype(np.int64), table.sizes[which].astype(np.int64) - 1)
    return SampleBatch([(table.ids[w], int(i)) for w, i in zip(which, index)])


def observe_epoch(schedule: CurriculumSchedule, validation_loss: float, cfg: PlateauConfig = PlateauConfig()) -> bool:
    return schedule.observe_epoch(validation_loss, cfg)
