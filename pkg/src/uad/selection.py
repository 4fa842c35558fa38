"""Model-level and instance-level teacher selection from calibrated margins."""
import csv
from dataclasses import dataclass, replace

import numpy as np

from uad import kernels
from uad.calibration import IDENTITY, Temperature
from uad.core_math import as_logit_matrix
from uad.errors import InvalidInput

TARGET_ID = "__target__"


@dataclass(frozen=True)
class ZooEntry:
    model_id: str
    logits: np.ndarray
    temperature: Temperature = IDENTITY


class ModelZoo:
    """Source models, represented by their logits on the target set.

    All entries share n and K; ids are unique. Order matters: ties in every
    selection rule go to the entry with the smallest index.
    """

    def __init__(self, entries):
        entries = [
            replace(e, logits=as_logit_matrix(e.logits, f"logits of {e.model_id!r}")) for e in entries
        ]
        if not entries:
            raise InvalidInput("model zoo must contain at least one entry")
        shapes = {e.logits.shape for e in entries}
        if len(shapes) != 1:
            raise InvalidInput(f"zoo logit shapes differ: {sorted(shapes)}")
        ids = [e.model_id for e in entries]
        if len(set(ids)) != len(ids):
            raise InvalidInput("zoo model ids must be unique")
        self.entries = tuple(entries)

    @classmethod
    def from_logits(cls, logits_by_id, temperatures=None):
        temperatures = temperatures or {}
        return cls(
            [ZooEntry(mid, l, temperatures.get(mid, IDENTITY)) for mid, l in logits_by_id.items()]
        )

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self):
        return [e.model_id for e in self.entries]

    @property
    def shape(self):
        return self.entries[0].logits.shape

    def index(self, model_id):
        return self.ids.index(model_id)

    def with_temperatures(self, temperatures):
        """Copy of the zoo with new temperatures (a sequence in zoo order or a dict by id)."""
        if isinstance(temperatures, dict):
            temps = [temperatures.get(e.model_id, e.temperature) for e in self.entries]
        else:
            temps = list(temperatures)
            if len(temps) != len(self.entries):
                raise InvalidInput("need one temperature per zoo entry")
        return ModelZoo([replace(e, temperature=t) for e, t in zip(self.entries, temps)])

    def subset(self, ids):
        keep = set(ids)
        return ModelZoo([e for e in self.entries if e.model_id in keep])

    def extended(self, entry):
        return ModelZoo(list(self.entries) + [entry])

    def calibrated_margins(self, with_gap=False):
        """N×n matrix of margins after each entry's temperature.

        With ``with_gap`` also returns the matching matrix of 1 - margin, which
        stays resolvable after the margin itself has rounded to 1.
        """
        stack = np.ascontiguousarray(np.stack([e.logits for e in self.entries]))
        temps = np.array([e.temperature.value for e in self.entries])
        marg, gap = kernels.zoo_margins(stack, temps)
        return (marg, gap) if with_gap else marg


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    teacher_ids: list
    winning_margins: np.ndarray

    def __len__(self):
        return self.labels.shape[0]

    def mask(self, threshold=0.0):
        """Instances whose winning margin reaches ``threshold``."""
        return self.winning_margins >= threshold

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance_index", "label", "teacher_id", "margin"])
            for i, (y, t, m) in enumerate(zip(self.labels, self.teacher_ids, self.winning_margins)):
                w.writerow([i, int(y), t, repr(float(m))])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        rows.sort(key=lambda r: int(r["instance_index"]))
        return cls(
            labels=np.array([int(r["label"]) for r in rows], dtype=np.int64),
            teacher_ids=[r["teacher_id"] for r in rows],
            winning_margins=np.array([float(r["margin"]) for r in rows]),
        )


def source_mean_margins(zoo):
    """Mean calibrated margin of every zoo entry over the target set."""
    m = zoo.calibrated_margins()
    return np.array([kernels.seq_sum(row) / row.shape[0] for row in m])


def select_source_model(zoo):
    """Id of the entry with the largest mean calibrated margin (first on ties)."""
    return zoo.ids[int(np.argmax(source_mean_margins(zoo)))]


def _instance_choice(zoo):
    # equal margins are split by the exact complement before falling back to index order
    m, gap = zoo.calibrated_margins(with_gap=True)
    idx = kernels.select_cols(m, gap)
    return idx, m[idx, np.arange(m.shape[1])]


def select_instance_teachers(zoo):
    """Per-instance id of the entry with the largest calibrated margin."""
    idx, _ = _instance_choice(zoo)
    ids = zoo.ids
    return [ids[j] for j in idx]


def generate_pseudo_labels(zoo):
    """Label each instance with the prediction of its most confident teacher.

    Dividing by a positive temperature keeps the argmax, so the class is read
    off the teacher's raw logits; this equals the argmax of the calibrated
    probabilities and is immune to rounding ties after exp.
    """
    idx, won = _instance_choice(zoo)
    stack = np.stack([e.logits for e in zoo.entries])
    rows = np.arange(idx.shape[0])
    labels = np.argmax(stack[idx, rows], axis=1).astype(np.int64)
    ids = zoo.ids
    return PseudoLabelSet(labels, [ids[j] for j in idx], won)


def refresh_pseudo_labels(zoo, target_logits=None):
    """Pseudo-labels with the current target model as an extra candidate teacher.

    The target model joins last (so ties keep zoo teachers) with T = 1 and id
    ``"__target__"``. Without ``target_logits`` this is ``generate_pseudo_labels``.
    """
    if target_logits is None:
        return generate_pseudo_labels(zoo)
    t = as_logit_matrix(target_logits, "target_logits")
    if t.shape != zoo.shape:
        raise InvalidInput(f"target logits shape {t.shape} does not match zoo shape {zoo.shape}")
    return generate_pseudo_labels(zoo.extended(ZooEntry(TARGET_ID, t, IDENTITY)))
