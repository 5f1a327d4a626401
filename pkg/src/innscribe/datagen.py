"""Symbolic note events, framewise label derivation, and synthetic frames.

Labels are 185-vectors per frame: a 9-way instrument one-hot, then 88
note-phase channels, then 88 velocity channels. A sounding key's phase
channel follows the decaying curve 5 * 0.99^tau (tau in frames since the
onset) and drops to zero at the offset frame; its velocity channel holds the
MIDI velocity scaled by 1/127 for the same frames. Re-strikes of a key
restart the curve at the newer onset (the newer note wins the overlap).

Real audio features are replaced by a deterministic additive synthesizer:
each sounding key contributes a harmonic template (4 partials, fixed
logarithmic key-to-bin map into 144 bins, each partial spread over 3 bins)
scaled by velocity * phase / 5, with a per-instrument partial-weight
modulation, a small Gaussian noise floor, and a log(1 + b) compression.
Precomputed real features with matching widths can be imported through the
same FRM1 file format.

FRM1 layout: 4-byte magic "FRM1", little-endian uint32 header length, UTF-8
JSON header (n_frames, d_x, d_y, fps, instrument, seed), then X and Y as
little-endian float32, row-major.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .numerics import RngState, gaussian

KEY_COUNT = 88
N_INSTRUMENTS = 9
LABEL_WIDTH = N_INSTRUMENTS + 2 * KEY_COUNT  # 185
FRAME_WIDTH = 144
PHASE_SCALE = 5.0
PHASE_DECAY = 0.99
VELOCITY_MAX = 127
PEDAL_ENGAGE_ABOVE = 64  # strictly above engages the pedal

PHASE_SLICE = slice(N_INSTRUMENTS, N_INSTRUMENTS + KEY_COUNT)
VELOCITY_SLICE = slice(N_INSTRUMENTS + KEY_COUNT, LABEL_WIDTH)

MAGIC = b"FRM1"

# 4 partials at amplitudes 1, 1/2, 1/3, 1/4; per-instrument modulation below
PARTIAL_AMPS = (1.0, 0.5, 1.0 / 3.0, 0.25)
PARTIAL_SEMITONES = tuple(12.0 * math.log2(h) for h in (1, 2, 3, 4))
BIN_SCALE = 143.0 / 111.0  # key 87's 4th partial lands on the top bin
SPREAD = ((-1, 0.25), (0, 0.5), (1, 0.25))
NOISE_SIGMA = 0.01

# fundamental modulation stays 1 so the fundamental bin keeps the argmax
INSTRUMENT_PARTIAL_MOD = np.array([
    [1.0, 1.00, 1.00, 1.00],
    [1.0, 0.55, 1.35, 0.75],
    [1.0, 1.40, 0.60, 1.20],
    [1.0, 0.75, 1.15, 0.50],
    [1.0, 1.25, 0.85, 1.45],
    [1.0, 0.60, 0.70, 1.30],
    [1.0, 1.10, 1.30, 0.65],
    [1.0, 0.85, 0.50, 1.10],
    [1.0, 1.45, 1.05, 0.90],
])


@dataclass(frozen=True)
class NoteEvent:
    key: int          # piano key index, key 0 = MIDI 21
    onset: float      # seconds
    offset: float     # seconds
    velocity: int     # MIDI 0..127

    def __post_init__(self):
        if not 0 <= self.key < KEY_COUNT:
            raise ValueError(f"key {self.key} out of range 0..{KEY_COUNT - 1}")
        if not 0 <= self.velocity <= VELOCITY_MAX:
            raise ValueError(f"velocity {self.velocity} out of range 0..{VELOCITY_MAX}")
        if not self.offset > self.onset:
            raise ValueError(f"offset {self.offset} must exceed onset {self.onset}")


@dataclass(frozen=True)
class PedalEvent:
    time: float
    value: int

    def __post_init__(self):
        if not 0 <= self.value <= VELOCITY_MAX:
            raise ValueError(f"pedal value {self.value} out of range")


def apply_sustain(notes, pedals, track_end: float | None = None) -> list[NoteEvent]:
    """Extend offsets of notes released while the pedal is engaged.

    The pedal is engaged strictly above control value 64. A note whose
    offset falls inside an engaged interval gets that interval's release
    time as its new offset, or the track end if the pedal is never released.
    """
    notes = list(notes)
    pedals = list(pedals)
    if not pedals:
        return notes
    times = [p.time for p in pedals]
    if any(t1 > t2 for t1, t2 in zip(times, times[1:])):
        raise ValueError("pedal events must be sorted by time")
    if track_end is None:
        track_end = max(times + [n.offset for n in notes]) if notes else max(times)

    intervals = []
    engaged_since = None
    for p in pedals:
        engaged = p.value > PEDAL_ENGAGE_ABOVE
        if engaged and engaged_since is None:
            engaged_since = p.time
        elif not engaged and engaged_since is not None:
            intervals.append((engaged_since, p.time))
            engaged_since = None
    if engaged_since is not None:
        intervals.append((engaged_since, max(track_end, engaged_since)))

    out = []
    for note in notes:
        new_offset = note.offset
        for start, release in intervals:
            if start <= note.offset < release:
                new_offset = release
                break
        out.append(replace(note, offset=new_offset) if new_offset != note.offset else note)
    return out


def derive_labels(notes, instrument: int, fps: int = 25, n_frames: int | None = None) -> np.ndarray:
    """Frame labels (n_frames x 185) from note events; pure and deterministic."""
    if not 0 <= instrument < N_INSTRUMENTS:
        raise ValueError(f"instrument {instrument} out of range 0..{N_INSTRUMENTS - 1}")
    if n_frames is None:
        end = max((n.offset for n in notes), default=0.0)
        n_frames = int(math.ceil(end * fps))
    horizon = n_frames / fps
    for note in notes:
        if note.onset < 0 or note.offset > horizon + 1e-9:
            raise ValueError(f"note [{note.onset}, {note.offset}) outside [0, {horizon})")

    y = np.zeros((n_frames, LABEL_WIDTH))
    y[:, instrument] = 1.0

    by_key: dict[int, list[NoteEvent]] = {}
    for note in notes:
        by_key.setdefault(note.key, []).append(note)

    for key, events in by_key.items():
        events.sort(key=lambda n: n.onset)
        for i, note in enumerate(events):
            offset = note.offset
            if i + 1 < len(events):
                offset = min(offset, events[i + 1].onset)  # newer onset cuts the older note
            f0 = int(math.floor(note.onset * fps))
            f1 = int(math.floor(offset * fps))
            f0, f1 = max(f0, 0), min(f1, n_frames)
            if f1 <= f0:
                continue
            tau = np.arange(f1 - f0, dtype=np.float64)
            y[f0:f1, PHASE_SLICE.start + key] = PHASE_SCALE * PHASE_DECAY ** tau
            y[f0:f1, VELOCITY_SLICE.start + key] = note.velocity / VELOCITY_MAX
    return y


# synthesizer ---------------------------------------------------------------

_template_cache: dict[int, np.ndarray] = {}


def fundamental_bin(key: int) -> int:
    return int(round(key * BIN_SCALE))


def key_templates(instrument: int) -> np.ndarray:
    """(88, 144) additive templates for one instrument, cached."""
    if instrument not in _template_cache:
        t = np.zeros((KEY_COUNT, FRAME_WIDTH))
        mod = INSTRUMENT_PARTIAL_MOD[instrument]
        for key in range(KEY_COUNT):
            for amp, semis, m in zip(PARTIAL_AMPS, PARTIAL_SEMITONES, mod):
                center = int(round((key + semis) * BIN_SCALE))
                for db, weight in SPREAD:
                    b = center + db
                    if 0 <= b < FRAME_WIDTH:
                        t[key, b] += amp * m * weight
        _template_cache[instrument] = t
    return _template_cache[instrument]


def synth_frames(y: np.ndarray, rng: RngState) -> np.ndarray:
    """Render label rows to 144-bin log-compressed frames; deterministic given rng."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != LABEL_WIDTH:
        raise DimensionError(f"labels must be (n, {LABEL_WIDTH}), got {y.shape}")
    n = y.shape[0]
    amp = y[:, VELOCITY_SLICE] * (y[:, PHASE_SLICE] / PHASE_SCALE)
    instruments = np.argmax(y[:, :N_INSTRUMENTS], axis=1)
    mix = np.zeros((n, FRAME_WIDTH))
    for inst in np.unique(instruments):
        mask = instruments == inst
        mix[mask] = amp[mask] @ key_templates(int(inst))
    mix += gaussian(rng, n, FRAME_WIDTH, NOISE_SIGMA)
    return np.log1p(mix)


def synth_frame(y_vec: np.ndarray, rng: RngState) -> np.ndarray:
    return synth_frames(np.asarray(y_vec, dtype=np.float64)[None, :], rng)[0]


# FRM1 files -----------------------------------------------------------------

@dataclass
class FramesFile:
    x: np.ndarray  # (n, d_x) float32
    y: np.ndarray  # (n, d_y) float32
    fps: int = 25
    instrument: int = 0
    seed: int = 0

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.ascontiguousarray(self.y, dtype=np.float32)
        if self.x.ndim != 2 or self.y.ndim != 2:
            raise DimensionError("frames and labels must be 2-D")
        if self.x.shape[0] != self.y.shape[0]:
            raise DimensionError("frame and label row counts differ")

    @property
    def n_frames(self) -> int:
        return self.x.shape[0]


def write_frames(path, ff: FramesFile) -> None:
    header = {
        "n_frames": ff.n_frames,
        "d_x": int(ff.x.shape[1]),
        "d_y": int(ff.y.shape[1]),
        "fps": int(ff.fps),
        "instrument": int(ff.instrument),
        "seed": int(ff.seed),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(ff.x, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ff.y, dtype="<f4").tobytes())


def read_frames(path) -> FramesFile:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"bad frames magic {magic!r} in {path}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError(f"truncated frames header length at offset {fh.tell()}")
        (hlen,) = struct.unpack("<I", raw)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise FormatError(f"truncated frames header at offset {fh.tell() - len(blob)}")
        header = json.loads(blob.decode("utf-8"))
        n, d_x, d_y = header["n_frames"], header["d_x"], header["d_y"]
        payload = fh.read()
        expected = n * (d_x + d_y) * 4
        if len(payload) != expected:
            raise FormatError(
                f"truncated frames payload: expected {expected} bytes at offset "
                f"{8 + hlen}, got {len(payload)}")
    x = np.frombuffer(payload[: n * d_x * 4], dtype="<f4").reshape(n, d_x).copy()
    y = np.frombuffer(payload[n * d_x * 4:], dtype="<f4").reshape(n, d_y).copy()
    return FramesFile(x=x, y=y, fps=header["fps"], instrument=header["instrument"],
                      seed=header["seed"])


def load_pieces(path) -> list[FramesFile]:
    """A single FRM1 file, or every *.frm in a directory (sorted by name)."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.frm"))
        if not files:
            raise FormatError(f"no .frm files in {p}")
        return [read_frames(f) for f in files]
    return [read_frames(p)]


def stack_pieces(pieces) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate pieces into float64 (X, Y) training matrices."""
    x = np.concatenate([p.x for p in pieces], axis=0).astype(np.float64)
    y = np.concatenate([p.y for p in pieces], axis=0).astype(np.float64)
    return x, y


# corpus generation -----------------------------------------------------------

@dataclass(frozen=True)
class CorpusSpec:
    train_pieces: int = 40
    valid_pieces: int = 2
    test_pieces: int = 10
    piece_seconds: float = 60.0
    fps: int = 25
    train_instruments: tuple[int, ...] = (0, 1, 2)
    holdout_instrument: int = 3
    polyphony_max: int = 4
    key_low: int = 20
    key_high: int = 70
    note_rate: float = 3.0   # candidate onsets per second
    sustain_prob: float = 0.0
    probe_note_seconds: float = 1.2
    probe_piece_seconds: float = 2.0

    def __post_init__(self):
        if self.key_low > self.key_high:
            raise ValueError("empty key range")
        if self.polyphony_max < 1:
            raise ValueError("polyphony_max must be >= 1")
        if self.holdout_instrument in self.train_instruments:
            raise ValueError("holdout instrument must be absent from training")


# stream ids for per-piece rng forking, documented so runs are replayable
_STREAM_TRAIN = 0x100000
_STREAM_VALID = 0x200000
_STREAM_TEST = 0x300000
_STREAM_PROBE = 0x400000


def generate_piece_events(rng: RngState, seconds: float, polyphony_max: int,
                          key_low: int, key_high: int, note_rate: float,
                          sustain_prob: float = 0.0):
    """Random note events: uniform keys, 0.1-2.0 s durations, velocities 30-127.

    Candidate onsets arrive uniformly; a candidate is dropped when its key is
    already sounding or the distinct-key polyphony is at the cap, so the cap
    holds at every instant (before any sustain extension).
    """
    count = max(int(note_rate * seconds), 1)
    onsets = np.sort(rng.uniform(0.0, max(seconds - 0.1, 0.0), count))
    notes: list[NoteEvent] = []
    active: list[NoteEvent] = []
    for onset in onsets:
        onset = float(onset)
        active = [n for n in active if n.offset > onset]
        key = int(rng.integers(key_low, key_high + 1))
        duration = float(rng.uniform(0.1, 2.0))
        velocity = int(rng.integers(30, VELOCITY_MAX + 1))
        if len(active) >= polyphony_max or any(n.key == key for n in active):
            continue
        note = NoteEvent(key=key, onset=onset, offset=min(onset + duration, seconds),
                         velocity=velocity)
        notes.append(note)
        active.append(note)

    pedals: list[PedalEvent] = []
    if sustain_prob > 0 and float(rng.uniform(0.0, 1.0)) < sustain_prob:
        t = 0.0
        for _ in range(int(rng.integers(1, 4))):
            press = float(rng.uniform(t, seconds * 0.9))
            release = min(press + float(rng.uniform(1.0, 5.0)), seconds)
            pedals.append(PedalEvent(time=press, value=int(rng.integers(80, 128))))
            pedals.append(PedalEvent(time=release, value=int(rng.integers(0, 50))))
            t = release
            if t >= seconds * 0.9:
                break
    return notes, pedals


def render_piece(rng: RngState, seconds: float, fps: int, instrument: int,
                 polyphony_max: int, key_low: int, key_high: int, note_rate: float,
                 sustain_prob: float, seed: int) -> FramesFile:
    n_frames = int(round(seconds * fps))
    notes, pedals = generate_piece_events(rng, seconds, polyphony_max, key_low, key_high,
                                          note_rate, sustain_prob)
    notes = apply_sustain(notes, pedals, track_end=seconds)
    notes = [replace(n, offset=min(n.offset, seconds)) for n in notes]
    y = derive_labels(notes, instrument, fps=fps, n_frames=n_frames)
    x = synth_frames(y, rng)
    return FramesFile(x=x.astype(np.float32), y=y.astype(np.float32), fps=fps,
                      instrument=instrument, seed=seed)


def probe_reference(rng: RngState, key: int, instrument: int, fps: int,
                    note_seconds: float, piece_seconds: float, seed: int) -> FramesFile:
    """Single isolated note for one key, for the generative concept probe."""
    n_frames = int(round(piece_seconds * fps))
    onset = 0.2
    notes = [NoteEvent(key=key, onset=onset, offset=onset + note_seconds, velocity=100)]
    y = derive_labels(notes, instrument, fps=fps, n_frames=n_frames)
    x = synth_frames(y, rng)
    return FramesFile(x=x.astype(np.float32), y=y.astype(np.float32), fps=fps,
                      instrument=instrument, seed=seed)


def generate_corpus(spec: CorpusSpec, out_dir, seed: int) -> dict[str, list[Path]]:
    """Write train/valid/test splits plus per-key probe references.

    The test split's first half uses training instruments; the second half
    uses the held-out instrument, which never occurs in train or valid.
    Byte-identical for identical (spec, seed).
    """
    root_rng = RngState(seed)
    out_dir = Path(out_dir)
    manifest: dict[str, list[Path]] = {}

    def piece_rng(stream_base: int, i: int):
        child = root_rng.fork(stream_base + i)
        return child, child.seed

    def write_split(name, stream_base, count, instrument_of):
        split_dir = out_dir / name
        split_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for i in range(count):
            rng, child_seed = piece_rng(stream_base, i)
            ff = render_piece(rng, spec.piece_seconds, spec.fps, instrument_of(i),
                              spec.polyphony_max, spec.key_low, spec.key_high,
                              spec.note_rate, spec.sustain_prob, seed=child_seed)
            path = split_dir / f"piece_{i:03d}.frm"
            write_frames(path, ff)
            paths.append(path)
        manifest[name] = paths

    n_train_inst = len(spec.train_instruments)
    write_split("train", _STREAM_TRAIN, spec.train_pieces,
                lambda i: spec.train_instruments[i % n_train_inst])
    write_split("valid", _STREAM_VALID, spec.valid_pieces,
                lambda i: spec.train_instruments[i % n_train_inst])
    n_seen = spec.test_pieces // 2
    write_split("test", _STREAM_TEST, spec.test_pieces,
                lambda i: spec.train_instruments[i % n_train_inst] if i < n_seen
                else spec.holdout_instrument)

    probe_dir = out_dir / "probe"
    probe_dir.mkdir(parents=True, exist_ok=True)
    probe_paths = []
    for key in range(KEY_COUNT):
        rng, child_seed = piece_rng(_STREAM_PROBE, key)
        ff = probe_reference(rng, key, spec.holdout_instrument, spec.fps,
                             spec.probe_note_seconds, spec.probe_piece_seconds,
                             seed=child_seed)
        path = probe_dir / f"key_{key:02d}.frm"
        write_frames(path, ff)
        probe_paths.append(path)
    manifest["probe"] = probe_paths
    return manifest


# label CSV (sparse, for plotting and batch editing) --------------------------

def write_labels_csv(path, y: np.ndarray, fps: int = 25, instrument: int | None = None) -> None:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != LABEL_WIDTH:
        raise DimensionError(f"labels must be (n, {LABEL_WIDTH}), got {y.shape}")
    if instrument is None:
        instrument = int(np.argmax(y[:, :N_INSTRUMENTS].sum(axis=0)))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# innscribe labels n_frames={y.shape[0]} fps={fps} instrument={instrument}\n")
        fh.write("frame,key,phase,velocity\n")
        phase = y[:, PHASE_SLICE]
        vel = y[:, VELOCITY_SLICE]
        frames, keys = np.nonzero((phase != 0.0) | (vel != 0.0))
        for f, k in zip(frames, keys):
            fh.write(f"{f},{k},{phase[f, k]!r},{vel[f, k]!r}\n")


def read_labels_csv(path):
    """Rebuild the dense label matrix; returns (y, meta)."""
    meta = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line.lstrip("# ").split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        try:
                            meta[k] = int(v)
                        except ValueError:
                            meta[k] = v
                continue
            if line.startswith("frame,"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise FormatError(f"bad label row: {line!r}")
            rows.append((int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))
    if "n_frames" not in meta:
        meta["n_frames"] = (max(r[0] for r in rows) + 1) if rows else 0
    n = meta["n_frames"]
    y = np.zeros((n, LABEL_WIDTH))
    instrument = meta.get("instrument")
    if instrument is not None and 0 <= instrument < N_INSTRUMENTS:
        y[:, instrument] = 1.0
    for f, k, phase, vel in rows:
        if not (0 <= f < n and 0 <= k < KEY_COUNT):
            raise FormatError(f"label row out of range: frame={f} key={k}")
        y[f, PHASE_SLICE.start + k] = phase
        y[f, VELOCITY_SLICE.start + k] = vel
    return y, meta
