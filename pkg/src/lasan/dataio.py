"""ECG records, preprocessing, patient-level splitting, and file formats.

Record file layout (little-endian)::

    magic "LASN" | version u16 = 1 | leads u16 = 8 | samples u32 = 2500
    | label u8 | sub_label u8 | id_len u16 | patient_id utf-8
    | 8 * 2500 float32, lead-major

The manifest is a tab-separated text file, one record per line:
``patient_id, label, sub_label, relative path``.
"""
import enum
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, FormatError

LEADS = ("I", "II", "V1", "V2", "V3", "V4", "V5", "V6")
N_LEADS = 8
N_SAMPLES = 2500
NATIVE_RATE_HZ = 250
FOUNDATION_RATE_HZ = 500
FLAT_STD = 1e-8

RECORD_MAGIC = b"LASN"
RECORD_VERSION = 1
_HEADER = struct.Struct("<4sHHIBBH")


class Label(enum.IntEnum):
    CONTROL = 0
    ARVC = 1
    LQTS = 2


class SubLabel(enum.IntEnum):
    LQT1 = 1
    LQT2 = 2


class Task(enum.Enum):
    THREE_CLASS = "THREE_CLASS"
    ARVC_VS_CONTROL = "ARVC_VS_CONTROL"
    LQTS_VS_CONTROL = "LQTS_VS_CONTROL"
    LQT1_VS_LQT2 = "LQT1_VS_LQT2"

    @property
    def n_classes(self):
        return 3 if self is Task.THREE_CLASS else 2

    @property
    def class_names(self):
        """Column names for metrics; binary tasks name the positive class."""
        return {
            Task.THREE_CLASS: tuple(lab.name for lab in Label),
            Task.ARVC_VS_CONTROL: ("ARVC",),
            Task.LQTS_VS_CONTROL: ("LQTS",),
            Task.LQT1_VS_LQT2: ("LQT1",),
        }[self]


class Partition(enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


def lead_index(name):
    return LEADS.index(name)


# ---------------------------------------------------------------- records


@dataclass(frozen=True, eq=False)
class EcgRecord:
    patient_id: str
    label: Label
    signal: np.ndarray
    sub_label: SubLabel | None = None
    native_rate_hz: int = NATIVE_RATE_HZ
    flat_leads: tuple = field(default=())

    def __post_init__(self):
        sig = np.array(self.signal, dtype=np.float32, copy=True)
        if sig.shape != (N_LEADS, N_SAMPLES):
            raise DataError(f"record {self.patient_id!r}: signal shape {sig.shape}, expected (8, 2500)")
        if not np.all(np.isfinite(sig)):
            raise DataError(f"record {self.patient_id!r}: non-finite samples")
        sig.setflags(write=False)
        object.__setattr__(self, "signal", sig)
        object.__setattr__(self, "label", Label(self.label))
        if self.sub_label is not None:
            object.__setattr__(self, "sub_label", SubLabel(self.sub_label))
            if self.label != Label.LQTS:
                raise DataError(f"record {self.patient_id!r}: sub_label only applies to LQTS")
        if self.native_rate_hz != NATIVE_RATE_HZ:
            raise DataError(f"record {self.patient_id!r}: native rate must be {NATIVE_RATE_HZ} Hz")

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.label == other.label
            and self.sub_label == other.sub_label
            and self.signal.tobytes() == other.signal.tobytes()
        )

    __hash__ = None


def normalize_per_lead(raw, return_flat=False):
    """Per-lead z-score with population std; flat leads (std < 1e-8) become zeros."""
    x = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("normalize_per_lead: non-finite input")
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    flat = (sd < FLAT_STD).reshape(-1)
    out = np.where(sd < FLAT_STD, 0.0, (x - mu) / np.where(sd < FLAT_STD, 1.0, sd))
    out = out.astype(np.float32)
    if return_flat:
        return out, tuple(int(i) for i in np.flatnonzero(flat))
    return out


def resample_for_foundation(rec):
    """Linear upsampling 250 -> 500 Hz, keeping the first 5 s (2500 samples).

    The dense grid has 4999 points over the native 10 s; it is extended to
    5000 by repeating the last value before truncation.
    """
    sig = rec.signal if isinstance(rec, EcgRecord) else np.asarray(rec, dtype=np.float32)
    if sig.shape != (N_LEADS, N_SAMPLES):
        raise DataError(f"resample_for_foundation: signal shape {sig.shape}")
    factor = FOUNDATION_RATE_HZ // NATIVE_RATE_HZ
    n_dense = (N_SAMPLES - 1) * factor + 1
    dense = np.empty((N_LEADS, n_dense + 1), dtype=np.float64)
    src = np.arange(N_SAMPLES, dtype=np.float64)
    grid = np.arange(n_dense, dtype=np.float64) / factor
    for lead in range(N_LEADS):
        dense[lead, :n_dense] = np.interp(grid, src, sig[lead].astype(np.float64))
    dense[:, n_dense] = dense[:, n_dense - 1]
    return dense[:, :N_SAMPLES].astype(np.float32)


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict
    seed: int

    def partition_of(self, patient_id):
        return self.assignment[patient_id]

    def patients(self, partition):
        partition = Partition(partition)
        return sorted(p for p, part in self.assignment.items() if part == partition)

    def counts(self):
        out = {p: 0 for p in Partition}
        for part in self.assignment.values():
            out[part] += 1
        return out


def split_counts(n, ratios):
    """Per-partition counts for ``n`` patients.

    Each partition gets ``floor(ratio * n)``; leftover patients go to the
    partitions with the largest fractional parts, ties to the later
    partition. With 10 patients at 70/15/15 this gives 7/1/2, and every count
    is within one patient of its target.
    """
    targets = [r * n for r in ratios]
    base = [int(np.floor(t + 1e-9)) for t in targets]
    left = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(targets[i] - base[i]), -i))
    for i in order[:left]:
        base[i] += 1
    return base


def stratified_patient_split(patients, ratios=(0.70, 0.15, 0.15), seed=42):
    """Assign every patient to TRAIN/VAL/TEST, stratified by label.

    ``patients`` is an iterable of ``(patient_id, label)``. Within each class
    the patient ids are sorted, shuffled with a generator seeded by
    ``(seed, class)`` and cut by :func:`split_counts`.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ConfigurationError(f"split ratios must be three nonnegative values summing to 1, got {ratios}", module="dataio")
    by_class = {lab: set() for lab in Label}
    seen = {}
    for pid, label in patients:
        if label is None:
            raise DataError(f"patient {pid!r} has no label")
        label = Label(label)
        if pid in seen and seen[pid] != label:
            raise DataError(f"patient {pid!r} appears with two labels")
        seen[pid] = label
        by_class[label].add(pid)
    assignment = {}
    for label in Label:
        ids = sorted(by_class[label])
        if not ids:
            warnings.warn(f"class {label.name} has no patients; it contributes nothing to the split")
            continue
        rng = np.random.default_rng([int(seed), int(label)])
        order = rng.permutation(len(ids))
        n_train, n_val, _ = split_counts(len(ids), ratios)
        for rank, j in enumerate(order):
            if rank < n_train:
                part = Partition.TRAIN
            elif rank < n_train + n_val:
                part = Partition.VAL
            else:
                part = Partition.TEST
            assignment[ids[j]] = part
    return SplitAssignment(assignment, int(seed))


def write_split(path, split):
    lines = [f"# seed={split.seed}"]
    lines += [f"{pid}\t{split.assignment[pid].value}" for pid in sorted(split.assignment)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split(path):
    seed = 0
    assignment = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("# seed="):
                seed = int(line.split("=", 1)[1])
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in Partition.__members__:
            raise FormatError(f"{path}:{n}: malformed split line {line!r}")
        if parts[0] in assignment:
            raise FormatError(f"{path}:{n}: patient {parts[0]!r} assigned twice")
        assignment[parts[0]] = Partition(parts[1])
    return SplitAssignment(assignment, seed)


# ---------------------------------------------------------------- record files


def encode_record(rec):
    pid = rec.patient_id.encode("utf-8")
    if len(pid) > 0xFFFF:
        raise FormatError("patient_id longer than 65535 bytes")
    sub = 0 if rec.sub_label is None else int(rec.sub_label)
    head = _HEADER.pack(RECORD_MAGIC, RECORD_VERSION, N_LEADS, N_SAMPLES, int(rec.label), sub, len(pid))
    return head + pid + rec.signal.astype("<f4").tobytes()


def decode_record(buf, source="<bytes>"):
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: truncated header")
    magic, version, leads, samples, label, sub, id_len = _HEADER.unpack_from(buf, 0)
    if magic != RECORD_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != RECORD_VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if leads != N_LEADS:
        raise FormatError(f"{source}: {leads} leads declared, expected {N_LEADS}")
    if samples != N_SAMPLES:
        raise FormatError(f"{source}: {samples} samples declared, expected {N_SAMPLES}")
    if label not in Label._value2member_map_:
        raise FormatError(f"{source}: invalid label code {label}")
    if sub not in (0, 1, 2):
        raise FormatError(f"{source}: invalid sub_label code {sub}")
    off = _HEADER.size
    need = off + id_len + 4 * leads * samples
    if len(buf) != need:
        kind = "truncated payload" if len(buf) < need else "trailing bytes"
        raise FormatError(f"{source}: {kind} ({len(buf)} bytes, expected {need})")
    try:
        pid = bytes(buf[off : off + id_len]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{source}: patient_id is not valid UTF-8") from exc
    sig = np.frombuffer(buf, dtype="<f4", count=leads * samples, offset=off + id_len).reshape(leads, samples)
    try:
        return EcgRecord(pid, Label(label), sig.astype(np.float32), SubLabel(sub) if sub else None)
    except DataError as exc:
        raise FormatError(f"{source}: {exc.args[0]}") from exc


def write_record(path, rec):
    Path(path).write_bytes(encode_record(rec))


def read_record(path):
    return decode_record(Path(path).read_bytes(), source=str(path))


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    label: Label
    sub_label: SubLabel | None
    path: str


def write_manifest(path, entries):
    lines = []
    for e in entries:
        sub = "NONE" if e.sub_label is None else SubLabel(e.sub_label).name
        lines.append(f"{e.patient_id}\t{Label(e.label).name}\t{sub}\t{e.path}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path):
    entries = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{path}:{n}: expected 4 tab-separated fields, got {len(parts)}")
        pid, lab, sub, rel = parts
        if lab not in Label.__members__ or (sub != "NONE" and sub not in SubLabel.__members__):
            raise FormatError(f"{path}:{n}: unknown label {lab!r}/{sub!r}")
        entries.append(ManifestEntry(pid, Label[lab], None if sub == "NONE" else SubLabel[sub], rel))
    return entries


# ---------------------------------------------------------------- in-memory dataset


class Dataset:
    """Stacked records: ``x`` (N, 8, 2500) float32 plus label arrays.

    ``sub_labels`` uses 0 for "none". Foundation inputs are resampled lazily
    and cached.
    """

    def __init__(self, records):
        records = list(records)
        if not records:
            raise ConfigurationError("empty dataset", module="dataio")
        self.patient_ids = [r.patient_id for r in records]
        self.labels = np.array([int(r.label) for r in records], dtype=np.int64)
        self.sub_labels = np.array([0 if r.sub_label is None else int(r.sub_label) for r in records], dtype=np.int64)
        self.x = np.stack([r.signal for r in records]).astype(np.float32)
        self._x_fm = None
        self.targets = self.labels.copy()
        self.task = Task.THREE_CLASS

    @classmethod
    def from_arrays(cls, x, labels, sub_labels, patient_ids, x_fm=None, targets=None, task=None):
        ds = cls.__new__(cls)
        ds.x = x
        ds.labels = labels
        ds.sub_labels = sub_labels
        ds.patient_ids = list(patient_ids)
        ds._x_fm = x_fm
        ds.targets = labels.copy() if targets is None else targets
        ds.task = Task.THREE_CLASS if task is None else task
        return ds

    def __len__(self):
        return len(self.labels)

    @property
    def x_fm(self):
        if self._x_fm is None:
            self._x_fm = np.stack([resample_for_foundation(s) for s in self.x]) if len(self) else self.x.copy()
        return self._x_fm

    def subset(self, index):
        index = np.asarray(index)
        index = np.flatnonzero(index) if index.dtype == bool else index.astype(np.int64)
        return Dataset.from_arrays(
            self.x[index],
            self.labels[index],
            self.sub_labels[index],
            [self.patient_ids[i] for i in index],
            None if self._x_fm is None else self._x_fm[index],
            self.targets[index],
            self.task,
        )

    def partition(self, split, part):
        part = Partition(part)
        mask = np.array([split.assignment.get(p) == part for p in self.patient_ids])
        return self.subset(mask)


def load_manifest_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = []
    for e in read_manifest(manifest_path):
        rec = read_record(root / e.path)
        if rec.patient_id != e.patient_id or rec.label != e.label or rec.sub_label != e.sub_label:
            raise FormatError(f"{e.path}: record header disagrees with manifest entry")
        records.append(rec)
    return Dataset(records)


def task_view(dataset, task):
    """Restrict ``dataset`` to the records of ``task`` and set 0/1 (or class) targets.

    Binary tasks use the first-named class as positive: ARVC, LQTS, LQT1.
    """
    task = Task(task)
    if task is Task.THREE_CLASS:
        view = dataset.subset(np.arange(len(dataset)))
        view.targets = view.labels.copy()
    elif task is Task.LQT1_VS_LQT2:
        view = dataset.subset((dataset.labels == Label.LQTS) & (dataset.sub_labels > 0))
        view.targets = (view.sub_labels == SubLabel.LQT1).astype(np.int64)
    else:
        pos = Label.ARVC if task is Task.ARVC_VS_CONTROL else Label.LQTS
        view = dataset.subset((dataset.labels == pos) | (dataset.labels == Label.CONTROL))
        view.targets = (view.labels == pos).astype(np.int64)
    view.task = task
    return view
