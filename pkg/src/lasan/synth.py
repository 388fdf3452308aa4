"""Synthetic 8-lead ECG corpus with lead-localized class signatures.

Each beat is a sum of Gaussian bumps (P, a biphasic Q/R/S complex, T) placed
at a per-patient heart rate. Every lead carries the same morphology times a
lead gain, plus white noise. Pathology terms are lead-addressable:

* ARVC: a late-QRS notch and T-wave inversion on V1-V3 only.
* LQTS: a T-peak delay on all leads, plus T broadening (LQT1) or T notching
  (LQT2) with a trailing asymmetry bump on I, V5 and V6.

A latent severity drawn from the patient seed scales the pathology, so all
ECGs of one patient are correlated.
"""
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (
    N_LEADS,
    N_SAMPLES,
    NATIVE_RATE_HZ,
    EcgRecord,
    Label,
    ManifestEntry,
    SubLabel,
    normalize_per_lead,
    write_manifest,
    write_record,
)
from .errors import ConfigurationError

RIGHT_PRECORDIAL = (2, 3, 4)
LATERAL = (0, 6, 7)
TABLE1_PATIENTS = {Label.ARVC: 121, Label.LQTS: 268, Label.CONTROL: 256}

_LEAD_GAIN = np.array([0.8, 1.0, 0.7, 0.9, 1.1, 1.2, 1.0, 0.9])
_ARVC_LEAD_WEIGHT = np.array([1.0, 0.85, 0.7])
# repolarization changes peak in V5/V6, spill partly onto I and V4
_LQTS_LEAD_WEIGHT = {0: 0.5, 5: 0.5, 6: 1.0, 7: 1.0}


@dataclass(frozen=True)
class PathologyMagnitudes:
    arvc_notch: float = 0.125
    arvc_t_inversion: float = 0.4
    lqts_qt_delay: float = 0.0125
    lqts_lateral_delay: float = 0.015
    lqt1_t_width: float = 0.4
    lqt2_t_notch: float = 0.35
    lqts_t_asymmetry: float = 0.175


@dataclass(frozen=True)
class SynthConfig:
    patients_per_class: int = 100
    ecgs_per_patient: tuple = (1, 3)
    seed: int = 0
    noise_std: float = 0.08
    heart_rate_bpm: tuple = (55.0, 95.0)
    severity: tuple = (0.15, 1.0)
    magnitudes: PathologyMagnitudes = field(default_factory=PathologyMagnitudes)
    class_counts: tuple | None = None

    def __post_init__(self):
        lo, hi = self.ecgs_per_patient
        if self.patients_per_class < 1 or lo < 1 or hi < lo:
            raise ConfigurationError("synth: bad patient/ECG counts", module="synthcorpus")
        if self.noise_std < 0 or self.heart_rate_bpm[0] <= 0 or self.heart_rate_bpm[1] < self.heart_rate_bpm[0]:
            raise ConfigurationError("synth: bad noise or heart-rate range", module="synthcorpus")
        if not 0 <= self.severity[0] <= self.severity[1]:
            raise ConfigurationError("synth: bad severity range", module="synthcorpus")
        if any(v < 0 for v in asdict(self.magnitudes).values()):
            raise ConfigurationError("synth: pathology magnitudes must be >= 0", module="synthcorpus")

    @classmethod
    def from_table1(cls, scale=1.0, **kwargs):
        """Cohort whose patient counts follow the registry's 121:268:256 mix, scaled."""
        counts = tuple((lab.name, max(1, int(round(n * scale)))) for lab, n in TABLE1_PATIENTS.items())
        return cls(class_counts=counts, **kwargs)

    def patients_for(self, label):
        if self.class_counts is None:
            return self.patients_per_class
        return dict(self.class_counts).get(Label(label).name, 0)


def patient_seed(seed, label, index):
    return int(np.random.SeedSequence([int(seed), int(label), int(index)]).generate_state(1, np.uint64)[0])


def _bumps(t, centers, amp, width):
    # sum over beats of amp * N(t; center, width); centers (B,), amp/width scalars or (B,)
    d = (t[None, :] - np.asarray(centers)[:, None]) / np.asarray(width).reshape(-1, 1)
    return (np.asarray(amp).reshape(-1, 1) * np.exp(-0.5 * d * d)).sum(axis=0)


def _patient_traits(pseed, config):
    rng = np.random.default_rng(pseed)
    lo, hi = config.heart_rate_bpm
    return {
        "hr": rng.uniform(lo, hi),
        "phase": rng.uniform(0.0, 1.0),
        "gain": _LEAD_GAIN * np.exp(rng.normal(0.0, 0.1, N_LEADS)),
        "t_amp": 0.28 * np.exp(rng.normal(0.0, 0.15)),
        "t_width": 0.045 * np.exp(rng.normal(0.0, 0.1)),
        "qt_jitter": rng.normal(0.0, 0.012),
        "severity": rng.uniform(*config.severity),
        "subtype": SubLabel.LQT1 if rng.random() < 0.5 else SubLabel.LQT2,
    }


def generate_raw(label, pseed, ecg_index, config=None):
    """Un-normalized (8, 2500) signal and sub-label for one ECG."""
    config = config or SynthConfig()
    label = Label(label)
    tr = _patient_traits(pseed, config)
    rng = np.random.default_rng([pseed, int(ecg_index), 1])
    hr = tr["hr"] * (1.0 + rng.uniform(-0.02, 0.02))
    rr = 60.0 / hr
    phase = (tr["phase"] + rng.uniform(-0.02, 0.02)) * rr
    gain = tr["gain"] * np.exp(rng.normal(0.0, 0.03, N_LEADS))
    noise = rng.normal(0.0, 1.0, (N_LEADS, N_SAMPLES))

    t = np.arange(N_SAMPLES) / NATIVE_RATE_HZ
    r_peaks = phase + rr * np.arange(-1, int(10.0 / rr) + 2)
    t_offset = 0.28 * np.sqrt(rr) + tr["qt_jitter"]
    base = (
        _bumps(t, r_peaks - 0.16, 0.12, 0.022)
        + _bumps(t, r_peaks - 0.025, -0.08, 0.008)
        + _bumps(t, r_peaks, 1.0, 0.010)
        + _bumps(t, r_peaks + 0.025, -0.22, 0.009)
    )

    mag = config.magnitudes
    sev = tr["severity"]
    t_amp = np.full(N_LEADS, tr["t_amp"])
    t_width = np.full(N_LEADS, tr["t_width"])
    t_shift = np.zeros(N_LEADS)
    extra = [None] * N_LEADS
    if label == Label.ARVC:
        for w, lead in zip(_ARVC_LEAD_WEIGHT, RIGHT_PRECORDIAL):
            if mag.arvc_t_inversion > 0:
                t_amp[lead] *= 1.0 - 2.0 * mag.arvc_t_inversion * sev * w
            if mag.arvc_notch > 0:
                extra[lead] = _bumps(t, r_peaks + 0.055, mag.arvc_notch * sev * w, 0.008)
    elif label == Label.LQTS:
        if mag.lqts_qt_delay > 0:
            t_shift += mag.lqts_qt_delay * sev
        for lead, w in _LQTS_LEAD_WEIGHT.items():
            if mag.lqts_lateral_delay > 0:
                t_shift[lead] += mag.lqts_lateral_delay * sev * w
            if tr["subtype"] == SubLabel.LQT1 and mag.lqt1_t_width > 0:
                t_width[lead] *= 1.0 + mag.lqt1_t_width * sev * w
            terms = []
            if tr["subtype"] == SubLabel.LQT2 and mag.lqt2_t_notch > 0:
                # bifid T: dip at the peak and a second hump after it
                c = r_peaks + t_offset + t_shift[lead]
                terms.append(_bumps(t, c, -0.5 * mag.lqt2_t_notch * sev * w * t_amp[lead], 0.015))
                terms.append(_bumps(t, c + 0.07, 0.6 * mag.lqt2_t_notch * sev * w * t_amp[lead], 0.03))
            if mag.lqts_t_asymmetry > 0:
                c = r_peaks + t_offset + t_shift[lead]
                terms.append(_bumps(t, c + 1.5 * t_width[lead], mag.lqts_t_asymmetry * sev * w * t_amp[lead], 2 * t_width[lead]))
            if terms:
                extra[lead] = np.sum(terms, axis=0)

    raw = np.empty((N_LEADS, N_SAMPLES))
    for lead in range(N_LEADS):
        wave = base + _bumps(t, r_peaks + t_offset + t_shift[lead], t_amp[lead], t_width[lead])
        if extra[lead] is not None:
            wave = wave + extra[lead]
        raw[lead] = gain[lead] * wave
    if config.noise_std > 0:
        raw += config.noise_std * noise
    sub = tr["subtype"] if label == Label.LQTS else None
    return raw, sub


def generate_record(label, pseed, ecg_index, config=None, patient_id=None):
    raw, sub = generate_raw(label, pseed, ecg_index, config)
    sig, flat = normalize_per_lead(raw, return_flat=True)
    pid = patient_id if patient_id is not None else f"{Label(label).name}-{pseed:016x}"
    return EcgRecord(pid, Label(label), sig, sub, flat_leads=flat)


def iter_corpus(config):
    """Yield ``(relative_path, record)`` for the whole cohort in canonical order."""
    for label in (Label.ARVC, Label.LQTS, Label.CONTROL):
        for i in range(config.patients_for(label)):
            pseed = patient_seed(config.seed, label, i)
            n_ecg = int(np.random.default_rng([pseed, 0]).integers(config.ecgs_per_patient[0], config.ecgs_per_patient[1] + 1))
            pid = f"{label.name}-{i:04d}"
            for j in range(n_ecg):
                yield f"records/{pid}_{j}.lasn", generate_record(label, pseed, j, config, patient_id=pid)


def generate_corpus(config, out_dir):
    """Write record files plus ``manifest.tsv`` under ``out_dir``; return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "records").mkdir(parents=True, exist_ok=True)
    entries = []
    for rel, rec in iter_corpus(config):
        write_record(out_dir / rel, rec)
        entries.append(ManifestEntry(rec.patient_id, rec.label, rec.sub_label, rel))
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest


def corpus_dataset(config):
    """The corpus as an in-memory :class:`~lasan.dataio.Dataset` (no files)."""
    from .dataio import Dataset

    return Dataset(rec for _, rec in iter_corpus(config))
