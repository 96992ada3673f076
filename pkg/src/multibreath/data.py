"""ICBHI-format ingestion: annotations, file names, cycles, labels, splits.

Recordings come as ``<stem>.wav`` / ``<stem>.txt`` pairs where the stem is
``patient_index_location_mode_device`` (e.g. ``101_1b1_Al_sc_Meditron``) and
every annotation row is ``begin end crackle wheeze``.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import DataError, ParseError, RangeError, SplitIntegrityError, ValidationError

CLASS_NAMES = ("Normal", "Crackle", "Wheeze", "Crackle&Wheeze")
SPLITS = ("train", "test")
END_TOLERANCE_S = 0.01


@dataclass(frozen=True)
class RecordingMeta:
    patient_id: int
    recording_index: str
    chest_location: str
    acquisition_mode: str
    device: str

    def __post_init__(self):
        if self.patient_id <= 0:
            raise ValidationError(f"patient_id must be positive, got {self.patient_id}")

    @property
    def file_stem(self) -> str:
        return "_".join([str(self.patient_id), self.recording_index, self.chest_location,
                         self.acquisition_mode, self.device])


@dataclass(frozen=True)
class CycleAnnotation:
    start_s: float
    end_s: float
    crackle: int
    wheeze: int

    def __post_init__(self):
        if not 0 <= self.start_s < self.end_s:
            raise ValidationError(f"need 0 <= start < end, got ({self.start_s}, {self.end_s})")
        if self.crackle not in (0, 1) or self.wheeze not in (0, 1):
            raise ValidationError(f"flags must be 0/1, got ({self.crackle}, {self.wheeze})")

    @property
    def class_id(self) -> int:
        return class_from_flags(self.crackle, self.wheeze)


@dataclass
class BreathCycle:
    meta: RecordingMeta
    annotation: CycleAnnotation
    samples: np.ndarray
    sample_rate_hz: int

    @property
    def label(self) -> np.ndarray:
        return label_vector(self.annotation.crackle, self.annotation.wheeze)


# --- label codec -----------------------------------------------------------

def class_from_flags(crackle: int, wheeze: int) -> int:
    """(0,0)->Normal 0, (1,0)->Crackle 1, (0,1)->Wheeze 2, (1,1)->Both 3."""
    return int(crackle) + 2 * int(wheeze)


def flags_from_class(class_id: int) -> tuple:
    if class_id not in (0, 1, 2, 3):
        raise ValidationError(f"class id must be in 0..3, got {class_id}")
    return class_id & 1, class_id >> 1


def label_vector(crackle: int, wheeze: int) -> np.ndarray:
    """Binary vector ordered (crackle, wheeze)."""
    return np.array([crackle, wheeze], dtype=np.int64)


def classes_from_labels(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1, 2)
    return labels[:, 0] + 2 * labels[:, 1]


def labels_from_classes(class_ids) -> np.ndarray:
    c = np.asarray(class_ids, dtype=np.int64)
    if np.any((c < 0) | (c > 3)):
        raise ValidationError("class ids must be in 0..3")
    return np.stack([c & 1, c >> 1], axis=1)


# --- parsing -----------------------------------------------------------------

def parse_annotation_file(text: str, path=None) -> list:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", lineno, path)
        try:
            start, end = float(fields[0]), float(fields[1])
            crackle, wheeze = int(fields[2]), int(fields[3])
        except ValueError as exc:
            raise ParseError(f"malformed field ({exc})", lineno, path) from None
        try:
            out.append(CycleAnnotation(start, end, crackle, wheeze))
        except ValidationError as exc:
            raise ValidationError(f"{path + ':' if path else ''}line {lineno}: {exc}") from None
    return out


def parse_recording_filename(file_stem: str) -> RecordingMeta:
    tokens = file_stem.split("_")
    if len(tokens) != 5 or not all(tokens):
        raise ParseError(f"recording stem {file_stem!r} must have 5 underscore-separated tokens")
    try:
        patient = int(tokens[0])
    except ValueError:
        raise ParseError(f"recording stem {file_stem!r}: patient id {tokens[0]!r} is not an integer") from None
    try:
        return RecordingMeta(patient, *tokens[1:])
    except ValidationError as exc:
        raise ParseError(f"recording stem {file_stem!r}: {exc}") from None


def parse_split_file(text: str, path=None) -> dict:
    """``<stem>\\t<train|test>`` lines -> {stem: split}."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 2 or fields[1] not in SPLITS:
            raise ParseError("expected '<stem> <train|test>'", lineno, path)
        stem, tag = fields
        if out.get(stem, tag) != tag:
            raise SplitIntegrityError(f"{stem} listed in both splits")
        out[stem] = tag
    return out


# --- audio -------------------------------------------------------------------

def read_wav(path) -> tuple:
    """Mono float64 samples in [-1, 1] and the sample rate; multichannel keeps channel 0."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise DataError(f"{path}: cannot decode WAV ({exc})") from None
    if data.ndim == 2:
        data = data[:, 0]
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 2**15
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit PCM into int32
        x = data.astype(np.float64) / 2**31
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported WAV sample type {data.dtype}")
    return x, int(rate)


def write_wav(path, samples, sample_rate_hz: int):
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, int(sample_rate_hz), pcm)


def extract_cycles(waveform, sample_rate_hz: int, annotations, meta: RecordingMeta) -> list:
    """Slice ``[round(start*sr), round(end*sr))`` per annotation.

    Ends up to 10 ms past the audio are clamped to its end.
    """
    x = np.asarray(waveform, dtype=np.float64)
    duration = len(x) / sample_rate_hz
    cycles = []
    for ann in annotations:
        if ann.end_s > duration + END_TOLERANCE_S:
            raise RangeError(f"{meta.file_stem}: annotation ({ann.start_s}, {ann.end_s}) "
                             f"exceeds audio duration {duration:.3f} s")
        lo = int(round(ann.start_s * sample_rate_hz))
        hi = min(int(round(ann.end_s * sample_rate_hz)), len(x))
        if hi <= lo:
            raise RangeError(f"{meta.file_stem}: annotation ({ann.start_s}, {ann.end_s}) is empty "
                             f"after clamping to the audio")
        cycles.append(BreathCycle(meta, ann, x[lo:hi].copy(), sample_rate_hz))
    return cycles


# --- manifest & splits ---------------------------------------------------------

@dataclass
class ManifestEntry:
    """One cycle reference: where it lives, what it is labelled, which split."""

    file_stem: str
    cycle_index: int
    patient_id: int
    recording_index: str
    chest_location: str
    acquisition_mode: str
    device: str
    start_s: float
    end_s: float
    crackle: int
    wheeze: int
    split: str = ""
    audio_path: str = ""

    @property
    def label(self) -> np.ndarray:
        return label_vector(self.crackle, self.wheeze)

    @property
    def class_id(self) -> int:
        return class_from_flags(self.crackle, self.wheeze)

    @property
    def annotation(self) -> CycleAnnotation:
        return CycleAnnotation(self.start_s, self.end_s, self.crackle, self.wheeze)

    @property
    def meta(self) -> RecordingMeta:
        return RecordingMeta(self.patient_id, self.recording_index, self.chest_location,
                             self.acquisition_mode, self.device)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["class_id"] = self.class_id
        rec["label"] = [self.crackle, self.wheeze]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ManifestEntry":
        keys = cls.__dataclass_fields__
        return cls(**{k: rec[k] for k in keys if k in rec})


def entries_for_recording(stem: str, annotations, audio_path: str = "") -> list:
    meta = parse_recording_filename(stem)
    return [ManifestEntry(stem, i, meta.patient_id, meta.recording_index, meta.chest_location,
                          meta.acquisition_mode, meta.device, a.start_s, a.end_s, a.crackle, a.wheeze,
                          "", audio_path)
            for i, a in enumerate(annotations)]


@dataclass
class DatasetManifest:
    entries: list
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.summary:
            self.summary = summarize(self.entries)

    def subset(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def patients(self, split: str) -> set:
        return {e.patient_id for e in self.entries if e.split == split}


def summarize(entries) -> dict:
    counts = {s: {name: 0 for name in CLASS_NAMES} for s in SPLITS}
    patients = {s: set() for s in SPLITS}
    recordings = {s: set() for s in SPLITS}
    for e in entries:
        if e.split not in counts:
            continue
        counts[e.split][CLASS_NAMES[e.class_id]] += 1
        patients[e.split].add(e.patient_id)
        recordings[e.split].add(e.file_stem)
    return {
        s: {"cycles": counts[s], "total": sum(counts[s].values()),
            "patients": len(patients[s]), "recordings": len(recordings[s])}
        for s in SPLITS
    }


def check_disjoint(entries):
    train = {e.patient_id for e in entries if e.split == "train"}
    test = {e.patient_id for e in entries if e.split == "test"}
    both = sorted(train & test)
    if both:
        raise SplitIntegrityError(f"patients in both splits: {both}")


def split_patients(entries, mode: str = "official", split_map: dict | None = None,
                   ratio: float | None = None, seed: int = 0) -> DatasetManifest:
    """Assign every entry a split tag, whole patients at a time.

    ``official`` uses ``split_map`` (stem -> tag); ``ratio`` shuffles patients
    with ``seed`` and moves them into train until the train share of cycles
    reaches ``ratio``.
    """
    entries = [ManifestEntry(**asdict(e)) for e in entries]
    if mode == "official":
        if split_map is None:
            raise ValidationError("official split needs a split map")
        stems = {e.file_stem for e in entries}
        unknown = sorted(set(split_map) - stems)
        if unknown:
            raise DataError(f"split file references unknown recordings: {unknown[:5]}"
                            f"{' ...' if len(unknown) > 5 else ''}")
        missing = sorted(stems - set(split_map))
        if missing:
            raise DataError(f"recordings missing from split file: {missing[:5]}")
        for e in entries:
            e.split = split_map[e.file_stem]
        check_disjoint(entries)
    elif mode == "ratio":
        if ratio is None or not 0 < ratio < 1:
            raise ValidationError(f"ratio must lie in (0, 1), got {ratio}")
        per_patient = Counter(e.patient_id for e in entries)
        order = sorted(per_patient)
        np.random.default_rng(seed).shuffle(order)
        total = sum(per_patient.values())
        train, taken = set(), 0
        for pid in order:
            if taken / total >= ratio:
                break
            train.add(pid)
            taken += per_patient[pid]
        for e in entries:
            e.split = "train" if e.patient_id in train else "test"
    else:
        raise ValidationError(f"unknown split mode {mode!r}")
    return DatasetManifest(entries)


def write_manifest(manifest: DatasetManifest, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(e.to_record(), sort_keys=True) + "\n")
    with open(out / "summary.json", "w") as fh:
        json.dump(manifest.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    entries = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    try:
                        entries.append(ManifestEntry.from_record(json.loads(line)))
                    except (json.JSONDecodeError, TypeError, KeyError) as exc:
                        raise ParseError(f"bad manifest record ({exc})", lineno, str(path)) from None
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    return DatasetManifest(entries)


def scan_dataset(data_dir) -> list:
    """Entries for every ``<stem>.wav`` with a matching annotation file, sorted by stem."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"dataset directory not found: {data_dir}")
    entries = []
    for wav in sorted(data_dir.glob("*.wav")):
        txt = wav.with_suffix(".txt")
        if not txt.exists():
            raise DataError(f"{wav}: no annotation file {txt.name}")
        anns = parse_annotation_file(txt.read_text(), str(txt))
        entries.extend(entries_for_recording(wav.stem, anns, str(wav.resolve())))
    if not entries:
        raise DataError(f"no annotated recordings found in {data_dir}")
    return entries


class RecordingCache:
    """Decodes each recording once and slices cycles from it."""

    def __init__(self):
        self._audio: dict = {}

    def cycle(self, entry: ManifestEntry) -> BreathCycle:
        key = entry.audio_path
        if key not in self._audio:
            self._audio[key] = read_wav(key)
        x, sr = self._audio[key]
        return extract_cycles(x, sr, [entry.annotation], entry.meta)[0]


# --- synthetic cycles ----------------------------------------------------------

SYNTH_KINDS = ("normal", "crackle", "wheeze", "both")


def synth_cycle(kind: str, duration_s: float, sample_rate_hz: int, seed, patient_id: int = 1,
                recording_index: str = "1s1") -> BreathCycle:
    """Band-limited noise plus, per kind, an AM tone (wheeze) and/or damped clicks (crackle)."""
    if kind not in SYNTH_KINDS:
        raise ValidationError(f"kind must be one of {SYNTH_KINDS}, got {kind!r}")
    if duration_s <= 0:
        raise ValidationError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = max(1, int(round(duration_s * sample_rate_hz)))
    t = np.arange(n) / sample_rate_hz
    nyq = sample_rate_hz / 2
    sos = signal.butter(4, [min(100.0, 0.2 * nyq) / nyq, min(1000.0, 0.9 * nyq) / nyq],
                        btype="bandpass", output="sos")
    x = 0.05 * signal.sosfilt(sos, rng.standard_normal(n))
    crackle = kind in ("crackle", "both")
    wheeze = kind in ("wheeze", "both")
    if wheeze:
        f0 = rng.uniform(200.0, 800.0)
        fm = rng.uniform(0.5, 2.0)
        env = 0.6 + 0.4 * np.sin(2 * np.pi * fm * t + rng.uniform(0, 2 * np.pi))
        x += rng.uniform(0.08, 0.15) * env * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    if crackle:
        clicks = int(rng.integers(5, 21))
        tau = 0.002
        length = min(n, int(10 * tau * sample_rate_hz) + 1)
        tt = np.arange(length) / sample_rate_hz
        for onset in rng.integers(0, n, size=clicks):
            fc = rng.uniform(300.0, 1200.0)
            burst = rng.uniform(0.3, 0.6) * np.exp(-tt / tau) * np.sin(2 * np.pi * min(fc, 0.9 * nyq) * tt)
            seg = min(length, n - onset)
            x[onset:onset + seg] += burst[:seg]
    meta = RecordingMeta(patient_id, recording_index, "Sy", "sc", "Synth")
    ann = CycleAnnotation(0.0, n / sample_rate_hz, int(crackle), int(wheeze))
    return BreathCycle(meta, ann, x, sample_rate_hz)


def write_synthetic_dataset(out_dir, per_class_train: int = 100, per_class_test: int = 50,
                            seed: int = 7, sample_rate_hz: int = 4000, cycles_per_recording: int = 5,
                            duration_range: tuple = (1.5, 4.0)) -> dict:
    """Write ICBHI-style wav/txt pairs plus ``split.txt``; one patient per recording."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    plan_rng = np.random.default_rng(ss.spawn(1)[0])
    split_lines = []
    patient = 100
    for split, per_class in (("train", per_class_train), ("test", per_class_test)):
        kinds = [k for k in SYNTH_KINDS for _ in range(per_class)]
        plan_rng.shuffle(kinds)
        for r in range(0, len(kinds), cycles_per_recording):
            patient += 1
            stem = f"{patient}_1s1_Sy_sc_Synth"
            pieces, rows, t0 = [], [], 0.0
            for j, kind in enumerate(kinds[r:r + cycles_per_recording]):
                dur = float(plan_rng.uniform(*duration_range))
                cyc = synth_cycle(kind, dur, sample_rate_hz, [seed, patient, j], patient)
                pieces.append(cyc.samples)
                t1 = t0 + len(cyc.samples) / sample_rate_hz
                rows.append(f"{t0:.6f}\t{t1:.6f}\t{cyc.annotation.crackle}\t{cyc.annotation.wheeze}")
                t0 = t1
            write_wav(out / f"{stem}.wav", np.concatenate(pieces), sample_rate_hz)
            (out / f"{stem}.txt").write_text("\n".join(rows) + "\n")
            split_lines.append(f"{stem}\t{split}")
    (out / "split.txt").write_text("\n".join(split_lines) + "\n")
    return {"recordings": len(split_lines), "train_per_class": per_class_train,
            "test_per_class": per_class_test}
