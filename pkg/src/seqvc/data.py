"""Synthetic parallel corpora and mel-spectrogram extraction.

The synthetic generator renders each symbol of a toy inventory (12
"phonemes" plus silence) as a block of frames built from a smooth
per-symbol spectral template, warped per speaker (band gains, band shift,
duration rate) plus seeded noise. The same symbol sequence rendered by two
speakers yields a parallel utterance pair.

Feature files are flat binary (magic, version, rows, cols, row-major
float32 little-endian); manifests are JSON.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

FEATURE_MAGIC = b"SVCFEAT1"
FEATURE_VERSION = 1


# ---------------------------------------------------------------------------
# inventory and speakers

@dataclass
class Inventory:
    """The toy symbol set: ids 0..n_phonemes-1 are phonemes, the last id is
    silence (near-floor energy).

    Base durations of 4..7 frames keep one symbol spanning at least one
    4x-downsampled encoder step; the zero floor keeps features centered
    where update-normalized optimizers can reach them within a toy budget.
    """

    n_phonemes: int = 12
    feat_dim: int = 20
    floor: float = 0.0
    amp: float = 6.0
    base_durations: tuple | None = None

    @property
    def size(self) -> int:
        return self.n_phonemes + 1

    @property
    def silence_id(self) -> int:
        return self.n_phonemes

    def base_duration(self, symbol: int) -> int:
        if self.base_durations is not None:
            return int(self.base_durations[symbol])
        if symbol == self.silence_id:
            return 4
        return 4 + symbol % 4

    def templates(self) -> np.ndarray:
        """[size x feat_dim] Gaussian spectral bumps, one center per phoneme
        spread across the band; silence is all zero."""
        channels = np.arange(self.feat_dim)
        lo, hi = 2.0, self.feat_dim - 3.0
        out = np.zeros((self.size, self.feat_dim))
        width = 1.2
        for s in range(self.n_phonemes):
            center = lo + s * (hi - lo) / max(self.n_phonemes - 1, 1)
            out[s] = self.amp * np.exp(-0.5 * ((channels - center) / width) ** 2)
        return out

    def to_dict(self):
        d = dataclasses.asdict(self)
        if d["base_durations"] is not None:
            d["base_durations"] = list(d["base_durations"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("base_durations") is not None:
            d["base_durations"] = tuple(d["base_durations"])
        return cls(**d)


@dataclass
class SpeakerProfile:
    speaker_id: str
    duration_rate: float
    band_gains: np.ndarray
    band_shift: int
    noise_level: float
    seed: int

    def __post_init__(self):
        self.band_gains = np.asarray(self.band_gains, dtype=np.float64)
        if self.duration_rate <= 0:
            raise ContractError("speaker duration rate must be positive")
        if (self.band_gains <= 0).any():
            raise ContractError("speaker band gains must be positive")

    def to_dict(self):
        return {"speaker_id": self.speaker_id, "duration_rate": self.duration_rate,
                "band_gains": [float(v) for v in self.band_gains],
                "band_shift": self.band_shift, "noise_level": self.noise_level,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def random_profile(speaker_id: str, feat_dim: int, seed: int,
                   noise_level: float = 0.05,
                   rate_range=(0.7, 1.4)) -> SpeakerProfile:
    rng = np.random.default_rng(seed)
    return SpeakerProfile(
        speaker_id=speaker_id,
        duration_rate=float(rng.uniform(*rate_range)),
        band_gains=np.exp(rng.uniform(-0.35, 0.35, size=feat_dim)),
        band_shift=int(rng.integers(-1, 2)),
        noise_level=noise_level,
        seed=seed,
    )


def _speaker_rate_band(index: int, count: int, lo=0.7, hi=1.4):
    """Disjoint duration-rate bands so speakers differ in speaking rate."""
    width = (hi - lo) / count
    return (lo + (index + 0.1) * width, lo + (index + 0.9) * width)


def render_utterance(symbols, profile: SpeakerProfile, inventory: Inventory):
    """Render a symbol sequence as (features [frames x feat_dim], labels).

    Each symbol emits round(duration_rate * base_duration) frames (at least
    one). A frame is floor + gains * shifted template + seeded noise; the
    gains touch only the template component.
    """
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size == 0:
        raise ContractError("render_utterance: empty symbol sequence")
    if symbols.min() < 0 or symbols.max() >= inventory.size:
        raise ContractError("render_utterance: symbol id outside inventory")
    rng = np.random.default_rng(profile.seed)
    templates = inventory.templates()
    rows, labels = [], []
    for s in symbols:
        dur = max(1, round(profile.duration_rate * inventory.base_duration(int(s))))
        warped = np.roll(templates[s], profile.band_shift) * profile.band_gains
        noise = profile.noise_level * rng.standard_normal((dur, inventory.feat_dim))
        rows.append(inventory.floor + warped[None, :] + noise)
        labels.extend([int(s)] * dur)
    return np.vstack(rows), np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# feature files

def _atomic_write(path: str, payload: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def write_features(path: str, features: np.ndarray):
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ContractError(f"feature files hold matrices, got shape {arr.shape}")
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, arr.shape[0], arr.shape[1])
    _atomic_write(path, header + arr.tobytes())


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != FEATURE_MAGIC:
        raise ContractError(f"{path}: not a feature file")
    version, rows, cols = struct.unpack("<III", blob[8:20])
    if version != FEATURE_VERSION:
        raise ContractError(f"{path}: unsupported feature file version {version}")
    payload = blob[20:]
    if len(payload) != rows * cols * 4:
        raise ContractError(f"{path}: payload length mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)


# ---------------------------------------------------------------------------
# corpus generation

@dataclass
class CorpusGenSpec:
    name: str
    n_train: int
    n_val: int
    n_eval: int
    n_speakers: int = 1
    seed: int = 1
    feat_dim: int = 20
    min_symbols: int = 4
    max_symbols: int = 12
    noise_level: float = 0.05
    profiles: list | None = None
    # parallel: every speaker renders every utterance id (conversion corpora);
    # otherwise ids are dealt round-robin, one speaker each (recognition corpora)
    parallel: bool = True

    def validate(self):
        if min(self.n_train, self.n_val, self.n_eval) < 0 or self.n_train < 1:
            raise ContractError("corpus sizes must be >= 1 training utterance")
        if self.n_speakers < 1 and not self.profiles:
            raise ContractError("corpus needs at least one speaker")
        return self


def _stable_seed(*parts) -> int:
    """Deterministic, platform-independent seed from string parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def generate_corpus(spec: CorpusGenSpec, out_dir: str) -> str:
    """Write feature files and manifest.json; returns the manifest path.

    Every utterance id gets one symbol sequence rendered once per speaker,
    so utterances sharing an id across speakers are parallel.
    """
    spec.validate()
    inventory = Inventory(feat_dim=spec.feat_dim)
    profiles = spec.profiles or [
        random_profile(f"spk{i}", spec.feat_dim, _stable_seed(spec.seed, "speaker", i),
                       spec.noise_level,
                       rate_range=_speaker_rate_band(i, spec.n_speakers))
        for i in range(spec.n_speakers)
    ]
    rng = np.random.default_rng(_stable_seed(spec.seed, "symbols"))
    total = spec.n_train + spec.n_val + spec.n_eval
    records = []
    os.makedirs(out_dir, exist_ok=True)
    for idx in range(total):
        uid = f"u{idx:04d}"
        length = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
        body = rng.integers(0, inventory.n_phonemes, size=length)
        symbols = np.concatenate([[inventory.silence_id], body, [inventory.silence_id]])
        if idx < spec.n_train:
            split = "train"
        elif idx < spec.n_train + spec.n_val:
            split = "validation"
        else:
            split = "evaluation"
        renditions = {}
        speakers_for_utt = profiles if spec.parallel else [profiles[idx % len(profiles)]]
        for profile in speakers_for_utt:
            per_utt = dataclasses.replace(
                profile, seed=_stable_seed(spec.seed, "render", uid, profile.speaker_id))
            feats, labels = render_utterance(symbols, per_utt, inventory)
            rel = os.path.join("features", profile.speaker_id, f"{uid}.bin")
            path = os.path.join(out_dir, rel)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            write_features(path, feats)
            renditions[profile.speaker_id] = {
                "path": rel, "frames": int(feats.shape[0]),
                "labels": [int(x) for x in labels],
            }
        records.append({"id": uid, "split": split,
                        "symbols": [int(s) for s in symbols],
                        "renditions": renditions})
    manifest = {
        "name": spec.name,
        "feat_dim": spec.feat_dim,
        "inventory": inventory.to_dict(),
        "speakers": [p.to_dict() for p in profiles],
        "utterances": records,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    _atomic_write(manifest_path, json.dumps(manifest, indent=1, sort_keys=True).encode())
    return manifest_path


# ---------------------------------------------------------------------------
# corpus loading

@dataclass
class Utterance:
    id: str
    speaker: str
    split: str
    symbols: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.features.shape[0] < 1:
            raise ContractError(f"utterance {self.id}: empty features")
        if self.labels is not None and len(self.labels) != self.features.shape[0]:
            raise ContractError(f"utterance {self.id}: labels do not cover frames")


@dataclass
class Corpus:
    name: str
    feat_dim: int
    inventory: Inventory
    speakers: dict
    utterances: list = field(default_factory=list)

    def split(self, name: str, speaker: str | None = None):
        return [u for u in self.utterances
                if u.split == name and (speaker is None or u.speaker == speaker)]

    def speaker_ids(self):
        return list(self.speakers.keys())

    def parallel_pairs(self, split: str, source: str, target: str):
        """(source, target) utterance pairs sharing an id."""
        by_id = {}
        for u in self.utterances:
            if u.split == split and u.speaker in (source, target):
                by_id.setdefault(u.id, {})[u.speaker] = u
        pairs = [(d[source], d[target]) for _, d in sorted(by_id.items())
                 if source in d and target in d]
        if not pairs:
            raise ContractError(
                f"no parallel {split} utterances for {source} -> {target}")
        return pairs


def load_corpus(manifest_path: str) -> Corpus:
    with open(manifest_path) as f:
        manifest = json.load(f)
    root = os.path.dirname(manifest_path)
    inventory = Inventory.from_dict(manifest["inventory"])
    speakers = {d["speaker_id"]: SpeakerProfile.from_dict(d) for d in manifest["speakers"]}
    corpus = Corpus(manifest["name"], manifest["feat_dim"], inventory, speakers)
    for rec in manifest["utterances"]:
        symbols = np.asarray(rec["symbols"], dtype=np.int64)
        for speaker, ren in rec["renditions"].items():
            feats = read_features(os.path.join(root, ren["path"]))
            labels = np.asarray(ren["labels"], dtype=np.int64) if "labels" in ren else None
            corpus.utterances.append(Utterance(
                rec["id"], speaker, rec["split"], symbols, feats, labels))
    return corpus


# ---------------------------------------------------------------------------
# mel extraction from raw audio

@dataclass
class MelConfig:
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    floor: float = 1e-10


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig, rate: int) -> np.ndarray:
    """[n_mels x (n_fft//2+1)] triangular filters on the mel scale."""
    points = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax),
                                    cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * rate / cfg.n_fft
    fb = np.zeros((cfg.n_mels, freqs.size))
    for k in range(cfg.n_mels):
        lo, mid, hi = points[k], points[k + 1], points[k + 2]
        rise = (freqs - lo) / max(mid - lo, 1e-9)
        fall = (hi - freqs) / max(hi - mid, 1e-9)
        fb[k] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    points = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax),
                                    cfg.n_mels + 2))
    return points[1:-1]


def extract_mel(samples, rate: int = 16000, cfg: MelConfig | None = None) -> np.ndarray:
    """Log mel spectrogram of a mono waveform.

    Centered analysis with reflect padding gives 1 + floor(N/hop) frames.
    """
    cfg = cfg or MelConfig()
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ContractError("extract_mel: need a non-empty mono signal")
    half = cfg.n_fft // 2
    mode = "reflect" if x.size > half else "constant"
    xp = np.pad(x, half, mode=mode)
    n_frames = 1 + x.size // cfg.hop
    idx = np.arange(n_frames)[:, None] * cfg.hop + np.arange(cfg.n_fft)[None, :]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(cfg.n_fft) / cfg.n_fft)
    mag = np.abs(np.fft.rfft(xp[idx] * window, axis=1))
    mel = mag @ mel_filterbank(cfg, rate).T
    return np.log(np.maximum(mel, cfg.floor))


def read_wav(path: str):
    """Load 16-bit PCM mono WAV; returns (samples in [-1, 1], rate)."""
    with wave.open(path, "rb") as w:
        if w.getnchannels() != 1:
            raise ContractError(f"{path}: only mono WAV is supported")
        if w.getsampwidth() != 2:
            raise ContractError(f"{path}: only 16-bit PCM WAV is supported")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate
