"""Stratified train/valid/test assignment, 8:1:1 per label stratum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .events import PatientSample, TaskKind, TASKS

PARTS = ("train", "valid", "test")


def _strata(samples: list[PatientSample], task: str) -> dict[str, list[int]]:
    spec = TASKS.get(task)
    if spec is None:
        raise ConfigError(f"unknown task {task!r}")
    if spec.kind is TaskKind.MULTILABEL:
        # Stratum = each sample's most frequent positive class (frequency over
        # this cohort); exact multilabel stratification is not attempted.
        counts = np.zeros(spec.n_classes, dtype=np.int64)
        for s in samples:
            counts += np.asarray(s.labels[task].value)
        keys = []
        for s in samples:
            positive = [c for c, bit in enumerate(s.labels[task].value) if bit]
            if not positive:
                keys.append("none")
            else:
                keys.append(str(max(positive, key=lambda c: (counts[c], -c))))
    else:
        keys = [str(s.labels[task].value) for s in samples]
    strata: dict[str, list[int]] = {}
    for i, key in enumerate(keys):
        strata.setdefault(key, []).append(i)
    return strata


@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict[str, str]  # stay_id -> train | valid | test
    seed: int
    warnings: tuple[str, ...]

    def part(self, samples: list[PatientSample], name: str) -> list[PatientSample]:
        if name not in PARTS:
            raise ConfigError(f"unknown split part {name!r}")
        return [s for s in samples if self.assignment[s.stay_id] == name]


def stratified_split(samples: list[PatientSample], task: str, seed: int,
                     ratios: tuple[int, int, int] = (8, 1, 1)) -> SplitAssignment:
    """Shuffle each label stratum with a seeded generator, cut 8:1:1.

    Valid/test sizes round to the nearest sample per stratum, so ratios hold
    within one sample once strata reach ten members; smaller strata degrade
    toward train with a warning.
    """
    if len({s.stay_id for s in samples}) != len(samples):
        raise ConfigError("duplicate stay ids in split input")
    if any(r < 0 for r in ratios) or ratios[0] <= 0:
        raise ConfigError(f"bad split ratios {ratios}")
    total = sum(ratios)
    assignment: dict[str, str] = {}
    warnings: list[str] = []
    rng = np.random.default_rng([seed])
    strata = _strata(samples, task)
    for key in sorted(strata):
        idx = [strata[key][j] for j in rng.permutation(len(strata[key]))]
        n = len(idx)
        n_valid = int(round(n * ratios[1] / total))
        n_test = int(round(n * ratios[2] / total))
        if n < 10:
            warnings.append(f"stratum {key!r} for {task} has only {n} samples")
        for pos, i in enumerate(idx):
            if pos < n - n_valid - n_test:
                part = "train"
            elif pos < n - n_test:
                part = "valid"
            else:
                part = "test"
            assignment[samples[i].stay_id] = part
    return SplitAssignment(assignment, seed, tuple(warnings))
