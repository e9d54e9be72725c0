"""Trial archives, the ESC1 file format, evaluation splits and a synthetic MI generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import expm

EEG, EOG = 0, 1


@dataclass
class TrialArchive:
    """A set of equally long EEG trials plus per-trial and per-channel metadata."""

    data: np.ndarray            # [n_trials, n_channels, n_samples] float32
    labels: np.ndarray          # class id per trial
    subject_id: np.ndarray
    session_id: np.ndarray
    channel_kinds: np.ndarray   # EEG=0 / EOG=1 per channel
    fs: float
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"data must be [trials, channels, samples], got shape {self.data.shape}")
        n, c, _ = self.data.shape
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.subject_id = np.asarray(self.subject_id, dtype=np.int64).reshape(-1)
        self.session_id = np.asarray(self.session_id, dtype=np.int64).reshape(-1)
        self.channel_kinds = np.asarray(self.channel_kinds, dtype=np.uint8).reshape(-1)
        self.fs = float(np.float32(self.fs))
        self.class_names = [str(x) for x in self.class_names]
        for name in ("labels", "subject_id", "session_id"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries for {n} trials")
        if len(self.channel_kinds) != c:
            raise ValueError(f"channel_kinds has {len(self.channel_kinds)} entries for {c} channels")
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("labels must index into class_names")
        if np.any(self.channel_kinds > EOG):
            raise ValueError("channel kinds must be 0 (EEG) or 1 (EOG)")

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def subjects(self) -> list[int]:
        return sorted(set(self.subject_id.tolist()))

    def sessions_of(self, subject: int) -> list[int]:
        return sorted(set(self.session_id[self.subject_id == subject].tolist()))

    def take(self, ids) -> "TrialArchive":
        ids = np.asarray(ids, dtype=np.int64)
        return TrialArchive(self.data[ids], self.labels[ids], self.subject_id[ids], self.session_id[ids],
                            self.channel_kinds.copy(), self.fs, list(self.class_names))

    def with_data(self, data: np.ndarray, fs: Optional[float] = None) -> "TrialArchive":
        return TrialArchive(data, self.labels.copy(), self.subject_id.copy(), self.session_id.copy(),
                            self.channel_kinds.copy(), self.fs if fs is None else fs, list(self.class_names))

    def equals(self, other: "TrialArchive") -> bool:
        """Bitwise equality of every field."""
        return (self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes()
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.subject_id, other.subject_id)
                and np.array_equal(self.session_id, other.session_id)
                and np.array_equal(self.channel_kinds, other.channel_kinds)
                and self.fs == other.fs and self.class_names == other.class_names)


def empty_archive(n_channels: int, n_samples: int, fs: float, class_names, channel_kinds=None) -> TrialArchive:
    kinds = np.zeros(n_channels, np.uint8) if channel_kinds is None else channel_kinds
    z = np.zeros(0, np.int64)
    return TrialArchive(np.zeros((0, n_channels, n_samples), np.float32), z, z, z, kinds, fs, class_names)


def select_channels(archive: TrialArchive, include_eog: bool) -> TrialArchive:
    if include_eog:
        return archive
    keep = np.flatnonzero(archive.channel_kinds == EEG)
    if len(keep) == archive.n_channels:
        return archive
    return TrialArchive(archive.data[:, keep], archive.labels, archive.subject_id, archive.session_id,
                        archive.channel_kinds[keep], archive.fs, archive.class_names)


# -- ESC1 -----------------------------------------------------------------------

ESC1_MAGIC = b"ESC1"
ESC1_VERSION = 1
_HEADER = struct.Struct("<4sIIIIfH")


class ArchiveFormatError(ValueError):
    """Raised for unreadable ESC1 files; ``code`` names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def archive_bytes(archive: TrialArchive) -> bytes:
    for name in ("labels", "subject_id", "session_id"):
        arr = getattr(archive, name)
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise ValueError(f"{name} values must fit in u16")
    names = "\0".join(archive.class_names).encode("utf-8")
    if len(names) > 0xFFFF:
        raise ValueError("class name block too long")
    parts = [
        _HEADER.pack(ESC1_MAGIC, ESC1_VERSION, archive.n_trials, archive.n_channels, archive.n_samples,
                     archive.fs, archive.n_classes),
        struct.pack("<H", len(names)), names,
        archive.labels.astype("<u2").tobytes(),
        archive.subject_id.astype("<u2").tobytes(),
        archive.session_id.astype("<u2").tobytes(),
        archive.channel_kinds.astype("u1").tobytes(),
        archive.data.astype("<f4").tobytes(),
    ]
    return b"".join(parts)


def archive_from_bytes(buf: bytes) -> TrialArchive:
    if len(buf) < 4 or buf[:4] != ESC1_MAGIC:
        raise ArchiveFormatError("bad_magic", "file does not start with ESC1")
    if len(buf) < _HEADER.size + 2:
        raise ArchiveFormatError("truncated", "truncated payload (header)")
    _, version, n, c, t, fs, n_classes = _HEADER.unpack_from(buf, 0)
    if version != ESC1_VERSION:
        raise ArchiveFormatError("bad_version", f"unsupported ESC1 version {version}")
    off = _HEADER.size
    (name_len,) = struct.unpack_from("<H", buf, off)
    off += 2
    need = off + name_len + 3 * 2 * n + c + 4 * n * c * t
    if len(buf) < need:
        raise ArchiveFormatError("truncated", f"truncated payload: expected {need} bytes, found {len(buf)}")
    if len(buf) > need:
        raise ArchiveFormatError("trailing_bytes", f"{len(buf) - need} unexpected bytes after payload")
    names = buf[off:off + name_len].decode("utf-8").split("\0") if name_len else []
    off += name_len
    if len(names) != n_classes:
        raise ArchiveFormatError("bad_names", f"header declares {n_classes} classes, name block has {len(names)}")

    def read(dtype, count):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    labels, subj, sess = read("<u2", n), read("<u2", n), read("<u2", n)
    kinds = read("u1", c)
    data = read("<f4", n * c * t).reshape(n, c, t)
    return TrialArchive(data.astype(np.float32), labels, subj, sess, kinds, fs, names)


def save_archive(archive: TrialArchive, path, provenance: Optional[dict] = None) -> None:
    """Write ``path`` in ESC1 and a ``<path>.manifest`` sidecar of key=value lines."""
    path = Path(path)
    path.write_bytes(archive_bytes(archive))
    info = {"format": "ESC1", "version": ESC1_VERSION, "n_trials": archive.n_trials,
            "n_channels": archive.n_channels, "n_samples": archive.n_samples, "fs": archive.fs}
    info.update(provenance or {})
    lines = [f"{k}={v}" for k, v in info.items()]
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")


def load_archive(path) -> TrialArchive:
    return archive_from_bytes(Path(path).read_bytes())


def read_manifest(path) -> dict:
    out = {}
    p = Path(str(path) + ".manifest")
    if p.exists():
        for line in p.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def exclude_subjects(archive: TrialArchive, subjects) -> TrialArchive:
    """Drop listed subjects, as converters of public datasets need to."""
    keep = np.flatnonzero(~np.isin(archive.subject_id, list(subjects)))
    return archive.take(keep)


# -- splits -----------------------------------------------------------------------

PARADIGMS = ("WS", "CS", "CSFT", "MDL")
SCHEMES = ("loso", "lmso", "session")


@dataclass
class Fold:
    name: str
    train: np.ndarray
    test: np.ndarray
    test_subjects: list
    calibration: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    # MDL only: the calibration trials that were merged into ``train``
    merged_calibration: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


@dataclass
class SplitPlan:
    paradigm: str
    scheme: str
    folds: list
    n_runs: int = 5
    notes: list = field(default_factory=list)


class SplitError(ValueError):
    pass


def _subject_groups(subjects: list, scheme: str, seed: int, n_folds: int) -> list[list]:
    if scheme == "loso":
        return [[s] for s in subjects]
    if scheme == "lmso":
        if len(subjects) < n_folds:
            raise SplitError(f"LMSO with {n_folds} folds needs at least {n_folds} subjects, got {len(subjects)}")
        order = np.random.default_rng(seed).permutation(subjects)
        return [sorted(g.tolist()) for g in np.array_split(order, n_folds)]
    raise SplitError(f"scheme {scheme!r} is not a cross-subject scheme (use 'loso' or 'lmso')")


def _first_session_split(archive: TrialArchive, subject: int, paradigm: str):
    """(first-session ids, later-session ids) for one subject."""
    sessions = archive.sessions_of(subject)
    if len(sessions) < 2:
        raise SplitError(
            f"{paradigm} needs at least 2 sessions per subject; subject {subject} has {len(sessions)}")
    mine = archive.subject_id == subject
    first = np.flatnonzero(mine & (archive.session_id == sessions[0]))
    later = np.flatnonzero(mine & (archive.session_id != sessions[0]))
    return first, later


def make_splits(archive: TrialArchive, paradigm: str, scheme: str = "loso", seed: int = 0,
                n_folds: int = 10, n_runs: int = 5) -> SplitPlan:
    """Build train/calibration/test index sets for one evaluation paradigm.

    WS trains on each subject's first session and tests on the later ones;
    single-session subjects fall back to an 80/20 chronological split (noted
    in the plan). CS leaves subjects out (LOSO or LMSO). CSFT adds the
    left-out subjects' first session as calibration and tests on the rest.
    MDL merges that calibration data into the training set.
    """
    paradigm = paradigm.upper()
    if paradigm not in PARADIGMS:
        raise SplitError(f"unknown paradigm {paradigm!r}; choose from {PARADIGMS}")
    subjects = archive.subjects
    if not subjects:
        raise SplitError("archive has no trials")
    notes = []

    if paradigm == "WS":
        folds = []
        for s in subjects:
            mine = np.flatnonzero(archive.subject_id == s)
            if len(archive.sessions_of(s)) >= 2:
                train, test = _first_session_split(archive, s, "WS")
            else:
                cut = int(round(0.8 * len(mine)))
                train, test = mine[:cut], mine[cut:]
                notes.append(f"subject {s}: single session, 80/20 chronological split (no second session to test on)")
            folds.append(Fold(f"subject-{s}", train, test, [s]))
        return SplitPlan("WS", "session", folds, n_runs, notes)

    groups = _subject_groups(subjects, scheme, seed, n_folds)
    folds = []
    for k, group in enumerate(groups):
        held = np.isin(archive.subject_id, group)
        train = np.flatnonzero(~held)
        name = f"fold-{k}" if scheme == "lmso" else f"subject-{group[0]}"
        if paradigm == "CS":
            folds.append(Fold(name, train, np.flatnonzero(held), list(group)))
            continue
        calib, test = [], []
        for s in group:
            first, later = _first_session_split(archive, s, paradigm)
            calib.append(first)
            test.append(later)
        calib, test = np.concatenate(calib), np.concatenate(test)
        if paradigm == "CSFT":
            folds.append(Fold(name, train, test, list(group), calibration=calib))
        else:
            folds.append(Fold(name, np.sort(np.concatenate([train, calib])), test, list(group),
                              merged_calibration=calib))
    return SplitPlan(paradigm, scheme, folds, n_runs, notes)


# -- synthetic motor-imagery generator ---------------------------------------------

def class_frequencies(n_classes: int) -> list[float]:
    return [8.0 + 4.0 * c for c in range(n_classes)]


def pink_noise(rng: np.random.Generator, shape: tuple, n_samples: int) -> np.ndarray:
    """Unit-variance noise with a 1/f power spectrum along the last axis."""
    spec = rng.normal(size=shape + (n_samples // 2 + 1,)) + 1j * rng.normal(size=shape + (n_samples // 2 + 1,))
    f = np.arange(n_samples // 2 + 1, dtype=float)
    f[0] = np.inf
    x = np.fft.irfft(spec / np.sqrt(f), n=n_samples, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def random_rotation(rng: np.random.Generator, n: int, strength: float) -> np.ndarray:
    """Orthogonal matrix exp(strength * A) with A skew-symmetric; strength 0 is the identity."""
    g = rng.normal(size=(n, n)) / np.sqrt(n)
    return expm(strength * (g - g.T))


def synth_generate(n_subjects: int, n_sessions: int, trials_per_session: int, n_channels: int,
                   fs: float, duration_s: float, n_classes: int, seed: int = 0, noise: float = 1.0,
                   subject_mixing: float = 0.5, session_gain: tuple = (0.5, 2.0),
                   n_eog: int = 0) -> TrialArchive:
    """Deterministic synthetic motor-imagery archive.

    Class ``c`` drives a sinusoid at ``8 + 4c`` Hz on a class-specific triple
    of channels. Each subject's sources are mixed by its own random rotation,
    each session scales every channel by its own log-uniform gain (electrode
    contact changes between sittings), and 1/f noise is added at roughly 0 dB
    SNR (``noise`` scales its amplitude; 0 gives clean data).
    ``n_eog`` extra channels carry noise plus a weak copy of the class signal.
    """
    for name, v in dict(n_subjects=n_subjects, n_sessions=n_sessions, trials_per_session=trials_per_session,
                        n_channels=n_channels, fs=fs, duration_s=duration_s).items():
        if v <= 0:
            raise ValueError(f"{name} must be positive")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    freqs = class_frequencies(n_classes)
    if fs < 2 * max(freqs):
        raise ValueError(f"fs={fs} Hz is below twice the highest class frequency ({max(freqs)} Hz)")
    rng = np.random.default_rng(seed)
    T = int(round(duration_s * fs))
    t = np.arange(T) / fs
    weights = np.array([1.0, 0.8, 0.6])
    signal_power = 0.5 * np.sum(weights ** 2) / n_channels
    noise_amp = noise * np.sqrt(signal_power)

    blocks, labels, subj, sess = [], [], [], []
    for s in range(n_subjects):
        rot = random_rotation(rng, n_channels, subject_mixing)
        for k in range(n_sessions):
            gain = np.exp(rng.uniform(np.log(session_gain[0]), np.log(session_gain[1]), size=(n_channels, 1)))
            y = rng.permutation(np.arange(trials_per_session) % n_classes)
            phase = rng.uniform(0, 2 * np.pi, size=trials_per_session)
            src = np.zeros((trials_per_session, n_channels, T))
            for i, c in enumerate(y):
                wave = np.sin(2 * np.pi * freqs[c] * t + phase[i])
                for j, w in enumerate(weights):
                    src[i, (3 * c + j) % n_channels] += w * wave
            x = np.einsum("ij,njt->nit", rot, src + noise_amp * pink_noise(rng, (trials_per_session, n_channels), T))
            if n_eog:
                eog = noise_amp * pink_noise(rng, (trials_per_session, n_eog), T)
                eog += 0.3 * src.mean(axis=1, keepdims=True)
                gain = np.r_[gain, np.ones((n_eog, 1))]
                x = np.concatenate([x, eog], axis=1)
            blocks.append(gain * x)
            labels.append(y)
            subj.append(np.full(trials_per_session, s + 1))
            sess.append(np.full(trials_per_session, k + 1))
    kinds = np.r_[np.zeros(n_channels, np.uint8), np.ones(n_eog, np.uint8)]
    names = [f"class{c}" for c in range(n_classes)]
    return TrialArchive(np.concatenate(blocks), np.concatenate(labels), np.concatenate(subj),
                        np.concatenate(sess), kinds, fs, names)


def concat_archives(*archives: TrialArchive) -> TrialArchive:
    archives = [a for a in archives if a is not None]
    first = archives[0]
    for a in archives[1:]:
        if a.n_channels != first.n_channels or a.n_samples != first.n_samples or a.fs != first.fs:
            raise ValueError("archives differ in channels, length or sampling rate")
    return TrialArchive(np.concatenate([a.data for a in archives]),
                        np.concatenate([a.labels for a in archives]),
                        np.concatenate([a.subject_id for a in archives]),
                        np.concatenate([a.session_id for a in archives]),
                        first.channel_kinds.copy(), first.fs, list(first.class_names))
