"""Signal records, labels, demographics, the synthetic cohort and preprocessing."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, DataError, DimensionError

GENDERS = ("male", "female")
AGE_BIN_EDGES = (18.0, 35.0, 50.0, 75.0, math.inf)
AGE_BIN_LABELS = ("18-35", "35-50", "50-75", "75-")
DEFAULT_THRESHOLD_MMHG = 18.0


@dataclass(frozen=True)
class Demographics:
    gender: str
    age_years: float

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise DataError(f"gender must be one of {GENDERS}, got {self.gender!r}")
        if not (self.age_years >= 0):
            raise DataError(f"age_years must be non-negative, got {self.age_years}")

    @property
    def age_bin(self):
        return age_bin(self.age_years)


def age_bin(age_years):
    """Half-open bin label for an age, or None below 18."""
    for lo, hi, label in zip(AGE_BIN_EDGES[:-1], AGE_BIN_EDGES[1:], AGE_BIN_LABELS):
        if lo <= age_years < hi:
            return label
    return None


@dataclass(frozen=True, eq=False)
class SignalRecord:
    """One d x T multichannel trace (millivolts) tied to a patient."""

    record_id: str
    patient_id: str
    leads: np.ndarray
    sample_rate_hz: int
    demographics: Demographics

    def __post_init__(self):
        leads = np.asarray(self.leads, dtype=np.float32)
        if leads.ndim != 2 or leads.shape[0] < 1 or leads.shape[1] < 1:
            raise DimensionError(
                f"record {self.record_id}: leads must be a non-empty d x T matrix, got shape {leads.shape}"
            )
        if int(self.sample_rate_hz) <= 0:
            raise DataError(f"record {self.record_id}: sample_rate_hz must be positive")
        object.__setattr__(self, "leads", leads)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    @property
    def d(self):
        return self.leads.shape[0]

    @property
    def T(self):
        return self.leads.shape[1]

    @property
    def duration_seconds(self):
        return self.T / self.sample_rate_hz

    def __eq__(self, other):
        if not isinstance(other, SignalRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.patient_id == other.patient_id
            and self.sample_rate_hz == other.sample_rate_hz
            and self.demographics == other.demographics
            and self.leads.shape == other.leads.shape
            and np.array_equal(self.leads, other.leads)
        )

    __hash__ = None


@dataclass(frozen=True)
class HemoLabel:
    mpcwp_mmhg: float
    elevated: int

    @classmethod
    def from_mpcwp(cls, mpcwp_mmhg, threshold=DEFAULT_THRESHOLD_MMHG):
        return cls(float(mpcwp_mmhg), binarize_label(mpcwp_mmhg, threshold))


def binarize_label(mpcwp_mmhg, threshold=DEFAULT_THRESHOLD_MMHG):
    """1 if the pressure is strictly above ``threshold``."""
    if not math.isfinite(mpcwp_mmhg):
        raise DataError(f"non-finite mPCWP value: {mpcwp_mmhg}")
    return int(mpcwp_mmhg > threshold)


class _RecordCollection:
    records: list

    def _check_records(self):
        seen = set()
        for rec in self.records:
            if rec.record_id in seen:
                raise DataError(f"duplicate record_id {rec.record_id!r}")
            seen.add(rec.record_id)

    def __len__(self):
        return len(self.records)

    @property
    def record_ids(self):
        return [r.record_id for r in self.records]

    @property
    def patient_ids(self):
        return [r.patient_id for r in self.records]

    def patient_set(self):
        return set(self.patient_ids)

    def signals(self, dtype=np.float32):
        """Stacked (N, d, T) array."""
        if not self.records:
            raise DataError("dataset is empty")
        shapes = {r.leads.shape for r in self.records}
        if len(shapes) != 1:
            raise DimensionError(f"records have non-uniform shapes: {sorted(shapes)}")
        return np.stack([r.leads for r in self.records]).astype(dtype, copy=False)

    def genders(self):
        return np.array([r.demographics.gender for r in self.records])

    def ages(self):
        return np.array([r.demographics.age_years for r in self.records], dtype=np.float64)


@dataclass(eq=False)
class LabeledDataset(_RecordCollection):
    records: list
    labels: list

    def __post_init__(self):
        self.records = list(self.records)
        self.labels = list(self.labels)
        if len(self.records) != len(self.labels):
            raise DataError(
                f"records ({len(self.records)}) and labels ({len(self.labels)}) differ in length"
            )
        self._check_records()

    def mpcwp(self):
        return np.array([lab.mpcwp_mmhg for lab in self.labels], dtype=np.float64)

    def elevated(self):
        return np.array([lab.elevated for lab in self.labels], dtype=np.int64)

    def subset(self, indices):
        return LabeledDataset([self.records[i] for i in indices], [self.labels[i] for i in indices])

    def without_labels(self):
        return UnlabeledDataset(list(self.records))

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return self.records == other.records and self.labels == other.labels


@dataclass(eq=False)
class UnlabeledDataset(_RecordCollection):
    records: list

    def __post_init__(self):
        self.records = list(self.records)
        self._check_records()

    def subset(self, indices):
        return UnlabeledDataset([self.records[i] for i in indices])

    def __eq__(self, other):
        if not isinstance(other, UnlabeledDataset):
            return NotImplemented
        return self.records == other.records


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    valid_fraction: float = 0.2
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_fraction, self.valid_fraction, self.test_fraction)
        if any(not (0.0 < f < 1.0) for f in fracs):
            raise ConfigError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)!r}")


# ---------------------------------------------------------------------------
# preprocessing

def window_samples(window_seconds, sample_rate_hz):
    return int(round(window_seconds * sample_rate_hz))


def segment_record(raw, window_seconds):
    """Cut ``raw`` into consecutive non-overlapping windows; the tail is dropped."""
    n = window_samples(window_seconds, raw.sample_rate_hz)
    if n < 1:
        raise ConfigError(f"window of {window_seconds}s is shorter than one sample")
    out = []
    for k in range(raw.T // n):
        out.append(
            SignalRecord(
                record_id=f"{raw.record_id}_w{k:02d}",
                patient_id=raw.patient_id,
                leads=raw.leads[:, k * n:(k + 1) * n].copy(),
                sample_rate_hz=raw.sample_rate_hz,
                demographics=raw.demographics,
            )
        )
    return out


def longest_zero_run(values):
    """Length of the longest run of exact zeros in a 1-D array."""
    zero = np.concatenate(([0], (np.asarray(values) == 0).astype(np.int8), [0]))
    edges = np.flatnonzero(np.diff(zero))
    if edges.size == 0:
        return 0
    return int((edges[1::2] - edges[0::2]).max())


def flatline_filter(record, min_run=None):
    """True when any lead holds ``min_run`` or more consecutive exact zeros.

    ``min_run`` defaults to one second of samples. Values are compared after
    float32 quantization, the storage precision.
    """
    if min_run is None:
        min_run = record.sample_rate_hz
    if min_run < 2:
        raise ConfigError(f"min_run must be >= 2, got {min_run}")
    leads = np.asarray(record.leads, dtype=np.float32)
    return any(longest_zero_run(lead) >= min_run for lead in leads)


def split_by_patient(ds, spec):
    """Assign whole patients to train/valid/test by a seeded shuffle."""
    if len(ds) == 0:
        raise DataError("cannot split an empty dataset")
    patients = sorted(ds.patient_set())
    order = np.random.default_rng(spec.seed).permutation(len(patients))
    n = len(patients)
    n_train = int(round(n * spec.train_fraction))
    n_valid = int(round(n * spec.valid_fraction))
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        raise ConfigError(
            f"{n} patients cannot fill splits {spec.train_fraction}/{spec.valid_fraction}/"
            f"{spec.test_fraction} (got {n_train}/{n_valid}/{n_test})"
        )
    shuffled = [patients[i] for i in order]
    which = {}
    for pos, pid in enumerate(shuffled):
        which[pid] = 0 if pos < n_train else (1 if pos < n_train + n_valid else 2)
    buckets = ([], [], [])
    for i, rec in enumerate(ds.records):
        buckets[which[rec.patient_id]].append(i)
    return tuple(ds.subset(idx) for idx in buckets)


def remove_patient_overlap(unlabeled, labeled):
    taken = labeled.patient_set()
    return UnlabeledDataset([r for r in unlabeled.records if r.patient_id not in taken])


# ---------------------------------------------------------------------------
# synthetic cohort

# population distribution of per-beat latents: (mean, sd, lower clip)
LATENT_POPULATION = {
    "heart_rate_bpm": (70.0, 10.0, 40.0),
    "amp_p": (0.15, 0.04, 0.02),
    "amp_qrs": (1.0, 0.25, 0.1),
    "amp_t": (0.3, 0.1, 0.03),
    "width_qrs_s": (0.012, 0.002, 0.004),
    "width_t_s": (0.05, 0.01, 0.02),
}
# weights of standardized latents in the pressure link
LINK_WEIGHTS = {"amp_qrs": 0.7, "amp_t": 0.5, "heart_rate_bpm": 0.3, "width_qrs_s": -0.3}
LINK_CENTER_MMHG = 16.0
LINK_SCALE_MMHG = 6.0
# patient counts per age bin in the labeled test cohort, used as sampling weights
AGE_BIN_WEIGHTS = (20, 77, 428, 297)
AGE_MAX = 95.0


@dataclass(frozen=True)
class BeatLatents:
    heart_rate_bpm: float
    amp_p: float
    amp_qrs: float
    amp_t: float
    width_qrs_s: float
    width_t_s: float
    phase_s: float = 0.0


@dataclass(frozen=True)
class SyntheticCohortConfig:
    n_patients: int = 800
    records_per_patient_range: tuple = (3, 7)
    d: int = 12
    window_seconds: float = 10.0
    sample_rate_hz: int = 250
    noise_std: float = 0.02
    label_link: str = "linear"
    group_confound_strength: float = 0.0
    seed: int = 0
    unlabeled_fraction: float = 0.5
    label_noise_std: float = 1.5
    record_jitter: float = 0.03
    record_seconds_range: tuple = (10.0, 10.0)
    female_fraction: float = 0.42
    female_hr_offset_bpm: float = 8.0
    female_qrs_scale: float = 0.85
    age_t_slope_per_decade: float = -0.02
    flatline_prob: float = 0.01
    classification_threshold: float = DEFAULT_THRESHOLD_MMHG

    def __post_init__(self):
        object.__setattr__(self, "records_per_patient_range", tuple(self.records_per_patient_range))
        object.__setattr__(self, "record_seconds_range", tuple(self.record_seconds_range))
        lo, hi = self.records_per_patient_range
        if self.n_patients < 1 or self.d < 1 or self.sample_rate_hz < 1:
            raise ConfigError("n_patients, d and sample_rate_hz must be positive")
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad records_per_patient_range {self.records_per_patient_range}")
        slo, shi = self.record_seconds_range
        if not (0 < slo <= shi):
            raise ConfigError(f"bad record_seconds_range {self.record_seconds_range}")
        if self.window_seconds <= 0 or window_samples(self.window_seconds, self.sample_rate_hz) < 1:
            raise ConfigError("window_seconds must cover at least one sample")
        if self.noise_std < 0 or self.label_noise_std < 0 or self.record_jitter < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.label_link not in ("linear", "saturating"):
            raise ConfigError(f"label_link must be 'linear' or 'saturating', got {self.label_link!r}")
        for name in ("group_confound_strength", "unlabeled_fraction", "female_fraction", "flatline_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown cohort keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class SyntheticPatient:
    patient_id: str
    demographics: Demographics
    latents: BeatLatents
    labeled: bool
    n_records: int


def _standardized(latents):
    return {k: (getattr(latents, k) - LATENT_POPULATION[k][0]) / LATENT_POPULATION[k][1] for k in LINK_WEIGHTS}


def mpcwp_from_latents(latents, link="linear"):
    """Noise-free pressure (mmHg) planted in the cohort."""
    z = _standardized(latents)
    norm = math.sqrt(sum(w * w for w in LINK_WEIGHTS.values()))
    score = sum(LINK_WEIGHTS[k] * z[k] for k in LINK_WEIGHTS) / norm
    if link == "linear":
        return LINK_CENTER_MMHG + LINK_SCALE_MMHG * score
    if link == "saturating":
        return LINK_CENTER_MMHG + 1.5 * LINK_SCALE_MMHG * math.tanh(score / 1.5)
    raise ConfigError(f"unknown label link {link!r}")


def lead_gains(d, seed):
    """Fixed per-lead projection of the P, QRS and T components, shape (d, 3)."""
    rng = np.random.default_rng([seed, 0xA7])
    g = np.empty((d, 3))
    g[:, 0] = rng.uniform(0.3, 1.0, d)
    qrs = rng.uniform(0.3, 1.5, d)
    g[:, 1] = qrs * rng.choice([-1.0, 1.0], d)
    g[:, 2] = rng.uniform(0.2, 1.0, d) * np.sign(g[:, 1])
    return g


def render_trace(latents, gains, n_samples, sample_rate_hz):
    """Noise-free (d, n_samples) trace: periodic Gaussian P/QRS/T bumps per lead."""
    t = np.arange(n_samples) / sample_rate_hz
    rr = 60.0 / latents.heart_rate_bpm
    n_beats = int(math.ceil(t[-1] / rr)) + 3 if n_samples else 0
    beats = latents.phase_s + rr * np.arange(-1, n_beats)
    components = (
        (-0.18, latents.amp_p, 0.025),
        (0.0, latents.amp_qrs, latents.width_qrs_s),
        (0.28 * math.sqrt(rr), latents.amp_t, latents.width_t_s),
    )
    out = np.zeros((gains.shape[0], n_samples))
    for c, (offset, amp, width) in enumerate(components):
        u = (t[None, :] - beats[:, None] - offset) / width
        wave = np.exp(-0.5 * u * u).sum(axis=0)
        out += np.outer(gains[:, c] * amp, wave)
    return out


def _draw_latents(rng):
    vals = {}
    for k, (mean, sd, lo) in LATENT_POPULATION.items():
        vals[k] = max(lo, mean + sd * rng.standard_normal())
    return vals


def _jitter(base, rng, jitter):
    vals = {}
    for k, (_, _, lo) in LATENT_POPULATION.items():
        vals[k] = max(lo, base[k] * (1.0 + jitter * rng.standard_normal()))
    rr = 60.0 / vals["heart_rate_bpm"]
    vals["phase_s"] = float(rng.uniform(0.0, rr))
    return BeatLatents(**vals)


def sample_cohort_latents(config):
    """Patient-level draws (demographics, base latents, label flag, record count)."""
    rng = np.random.default_rng([config.seed, 1])
    n = config.n_patients
    n_unlabeled = int(round(n * config.unlabeled_fraction))
    unlabeled = set(rng.permutation(n)[:n_unlabeled].tolist())
    bin_p = np.array(AGE_BIN_WEIGHTS, dtype=float) / sum(AGE_BIN_WEIGHTS)
    s = config.group_confound_strength
    out = []
    for i in range(n):
        gender = "female" if rng.uniform() < config.female_fraction else "male"
        b = rng.choice(4, p=bin_p)
        hi = AGE_BIN_EDGES[b + 1] if b < 3 else AGE_MAX
        age = float(rng.uniform(AGE_BIN_EDGES[b], hi))
        vals = _draw_latents(rng)
        if gender == "female":
            vals["heart_rate_bpm"] += s * config.female_hr_offset_bpm
            vals["amp_qrs"] *= 1.0 - s * (1.0 - config.female_qrs_scale)
        vals["amp_t"] = max(
            LATENT_POPULATION["amp_t"][2],
            vals["amp_t"] + s * config.age_t_slope_per_decade * (age - 55.0) / 10.0,
        )
        lo, hi_r = config.records_per_patient_range
        out.append(
            SyntheticPatient(
                patient_id=f"P{i:05d}",
                demographics=Demographics(gender, round(age, 2)),
                latents=BeatLatents(**vals),
                labeled=i not in unlabeled,
                n_records=int(rng.integers(lo, hi_r + 1)),
            )
        )
    return out


def generate_synthetic_cohort(config, return_oracle=False):
    """Build (labeled, unlabeled) datasets; a pure function of ``config``.

    Raw recordings are rendered, segmented into windows and passed through
    the flatline filter exactly as imported data would be. With
    ``return_oracle`` a third value maps each labeled window id to its
    noise-free planted pressure.
    """
    gains = lead_gains(config.d, config.seed)
    patients = sample_cohort_latents(config)
    win = window_samples(config.window_seconds, config.sample_rate_hz)
    labeled_records, labels, unlabeled_records = [], [], []
    oracle = {}
    for pat in patients:
        prng = np.random.default_rng([config.seed, 2, int(pat.patient_id[1:])])
        base = {k: getattr(pat.latents, k) for k in LATENT_POPULATION}
        for r in range(pat.n_records):
            lat = _jitter(base, prng, config.record_jitter)
            seconds = prng.uniform(*config.record_seconds_range)
            n_samples = max(win, int(round(seconds * config.sample_rate_hz)))
            trace = render_trace(lat, gains, n_samples, config.sample_rate_hz)
            if config.noise_std > 0:
                trace = trace + config.noise_std * prng.standard_normal(trace.shape)
            if prng.uniform() < config.flatline_prob:
                lead = int(prng.integers(config.d))
                run = min(n_samples, 2 * config.sample_rate_hz)
                start = int(prng.integers(0, n_samples - run + 1))
                trace[lead, start:start + run] = 0.0
            clean = mpcwp = mpcwp_from_latents(lat, config.label_link)
            if config.label_noise_std > 0:
                mpcwp += config.label_noise_std * prng.standard_normal()
            raw = SignalRecord(
                record_id=f"{pat.patient_id}_r{r:02d}",
                patient_id=pat.patient_id,
                leads=trace.astype(np.float32),
                sample_rate_hz=config.sample_rate_hz,
                demographics=pat.demographics,
            )
            for seg in segment_record(raw, config.window_seconds):
                if flatline_filter(seg):
                    continue
                if pat.labeled:
                    labeled_records.append(seg)
                    labels.append(HemoLabel.from_mpcwp(round(mpcwp, 3), config.classification_threshold))
                    oracle[seg.record_id] = clean
                else:
                    unlabeled_records.append(seg)
    labeled = LabeledDataset(labeled_records, labels)
    unlabeled = remove_patient_overlap(UnlabeledDataset(unlabeled_records), labeled)
    if return_oracle:
        return labeled, unlabeled, oracle
    return labeled, unlabeled


def with_threshold(ds, threshold):
    """Relabel ``ds`` against a different pressure cutoff."""
    return LabeledDataset(ds.records, [HemoLabel.from_mpcwp(l.mpcwp_mmhg, threshold) for l in ds.labels])


def subsample_patients(ds, fraction, seed):
    """Keep a seeded fraction of patients (at least one); used for low-label regimes."""
    patients = sorted(ds.patient_set())
    k = max(1, int(round(len(patients) * fraction)))
    keep = set(np.random.default_rng(seed).permutation(len(patients))[:k].tolist())
    chosen = {patients[i] for i in keep}
    return ds.subset([i for i, r in enumerate(ds.records) if r.patient_id in chosen])

