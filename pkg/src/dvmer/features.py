"""Audio feature extraction: Mel spectrogram and cochleagram views.

A fixed 60-second segment (15 s to 75 s after track onset, zero-padded when
the track ends early) is turned into two time-frequency views that share one
pre-emphasised signal and one frame grid:

  * Mel view: Hamming-windowed frames, double-length FFT, 128 triangular
    Mel filters over the power spectrum, natural log with a floor.
  * Cochlear view: the same windowed power spectra weighted by the power
    response of an 84-channel fourth-order gammatone bank (log-spaced
    centres), per-frame band energy, power-law compression, log10 with a
    floor.

Frame geometry is chosen so the segment yields exactly 87 frames with 50%
overlap: hop = ceil(segment_len / 87), frame_len = 2 * hop, and the frame
count n = ceil(segment_len / hop); the signal tail is zero-padded to cover
the last frame.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import wave
from dataclasses import dataclass, asdict

import numpy as np

from .errors import BadSampleRate, ConfigError, ShapeMismatch, TrackTooShort

CACHE_MAGIC = b"DMRF"
CACHE_VERSION = 1

REQUIRED_SAMPLE_RATE = 44100
MIN_TRACK_SECONDS = 30.0


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 44100
    segment_start: float = 15.0
    segment_duration: float = 60.0
    frame_count: int = 87
    preemphasis: float = 0.97
    mel_bands: int = 128
    mel_fmin: float = 0.0
    mel_fmax: float = 22050.0
    coch_channels: int = 84
    gammatone_order: int = 4
    gt_fmin: float = 50.0
    gt_fmax: float = 18000.0
    compression: float = 0.3
    log_floor: float = 1e-10
    # explicit frame geometry override; derived from frame_count when None
    frame_len: int | None = None
    hop: int | None = None

    @property
    def segment_len(self) -> int:
        return int(round(self.segment_duration * self.sample_rate))

    @property
    def hop_len(self) -> int:
        if self.hop is not None:
            return self.hop
        return math.ceil(self.segment_len / self.frame_count)

    @property
    def frame_size(self) -> int:
        if self.frame_len is not None:
            return self.frame_len
        return 2 * self.hop_len

    @property
    def n_fft(self) -> int:
        return 2 * self.frame_size

    def n_frames(self, signal_len: int) -> int:
        return math.ceil(signal_len / self.hop_len)

    def config_hash(self) -> str:
        canon = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


@dataclass
class AudioSegment:
    samples: np.ndarray
    sample_rate: int
    start_offset: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != REQUIRED_SAMPLE_RATE:
            raise BadSampleRate(f"segment must be {REQUIRED_SAMPLE_RATE} Hz, got {self.sample_rate}")


@dataclass
class MelGram:
    values: np.ndarray  # [bands, frames], natural-log energy
    frame_len: int
    hop: int


@dataclass
class CochGram:
    values: np.ndarray  # [channels, frames], log10 compressed band energy


@dataclass
class FeaturePair:
    """One track's two views, aligned to the same segment and frame grid."""

    mel: np.ndarray  # [mel_bands, frames]
    coch: np.ndarray  # [coch_channels, frames]

    def __post_init__(self):
        self.mel = np.asarray(self.mel, dtype=np.float32)
        self.coch = np.asarray(self.coch, dtype=np.float32)
        if self.mel.ndim != 2 or self.coch.ndim != 2:
            raise ShapeMismatch("feature views must be 2-d [bands, frames]")


def select_segment(track, sample_rate: int, cfg: FeatureConfig | None = None) -> AudioSegment:
    """Cut the fixed analysis window out of a track.

    Returns samples covering [segment_start, segment_start + duration);
    tracks ending inside the window are zero-padded to the full length.
    """
    cfg = cfg or FeatureConfig()
    if sample_rate != REQUIRED_SAMPLE_RATE:
        raise BadSampleRate(f"expected {REQUIRED_SAMPLE_RATE} Hz, got {sample_rate}")
    track = np.asarray(track, dtype=np.float64)
    duration = track.shape[0] / sample_rate
    if duration < MIN_TRACK_SECONDS:
        raise TrackTooShort(f"track is {duration:.2f} s, minimum is {MIN_TRACK_SECONDS:.0f} s")

    start = int(round(cfg.segment_start * sample_rate))
    length = cfg.segment_len
    segment = track[start:start + length]
    if segment.shape[0] < length:
        segment = np.concatenate([segment, np.zeros(length - segment.shape[0])])
    return AudioSegment(samples=segment, sample_rate=sample_rate, start_offset=cfg.segment_start)


def pre_emphasis(x, coeff: float = 0.97) -> np.ndarray:
    """First-difference high-pass y[n] = x[n] - coeff * x[n-1], with x[-1] = 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ConfigError("pre_emphasis requires a nonempty signal")
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - coeff * x[:-1]
    return y


def frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Slice into overlapping frames starting at i*hop, zero-padding the tail."""
    n_frames = math.ceil(x.shape[0] / hop)
    needed = (n_frames - 1) * hop + frame_len
    if needed > x.shape[0]:
        x = np.concatenate([x, np.zeros(needed - x.shape[0])])
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def windowed_power_spectra(seg: AudioSegment, cfg: FeatureConfig) -> np.ndarray:
    """Shared front half of both views: pre-emphasis, framing, Hamming
    window, double-length FFT. Returns power spectra [n_frames, n_bins]."""
    if cfg.frame_size > seg.samples.shape[0]:
        raise ConfigError(f"frame_len {cfg.frame_size} exceeds segment length {seg.samples.shape[0]}")
    if cfg.frame_size % 2 != 0:
        raise ConfigError(f"frame_len must be even, got {cfg.frame_size}")
    emphasised = pre_emphasis(seg.samples, cfg.preemphasis)
    frames = frame_signal(emphasised, cfg.frame_size, cfg.hop_len)
    window = np.hamming(cfg.frame_size)
    spectra = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    return np.abs(spectra) ** 2


def fft_bin_frequencies(cfg: FeatureConfig) -> np.ndarray:
    return np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Unit-peak triangular filters, [mel_bands, n_bins]."""
    freqs = fft_bin_frequencies(cfg)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax), cfg.mel_bands + 2))
    bank = np.zeros((cfg.mel_bands, freqs.shape[0]))
    for b in range(cfg.mel_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - freqs) / max(hi - mid, 1e-12)
        bank[b] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def erb_bandwidth(fc):
    """Equivalent rectangular bandwidth of the auditory filter at fc (Hz)."""
    return 24.7 * (4.37 * np.asarray(fc, dtype=np.float64) / 1000.0 + 1.0)


def gammatone_center_frequencies(cfg: FeatureConfig) -> np.ndarray:
    return np.geomspace(cfg.gt_fmin, cfg.gt_fmax, cfg.coch_channels)


def gammatone_magnitude(f, fc, order: int = 4) -> np.ndarray:
    """Normalised magnitude response of an order-n gammatone filter,
    [1 + ((f - fc)/b)^2]^(-n/2) with b = 1.019 * ERB(fc); peak 1 at fc."""
    b = 1.019 * erb_bandwidth(fc)
    return (1.0 + ((np.asarray(f, dtype=np.float64) - fc) / b) ** 2) ** (-order / 2.0)


def gammatone_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Power responses of the gammatone bank, [coch_channels, n_bins]."""
    freqs = fft_bin_frequencies(cfg)
    centers = gammatone_center_frequencies(cfg)
    bank = np.empty((cfg.coch_channels, freqs.shape[0]))
    for c, fc in enumerate(centers):
        bank[c] = gammatone_magnitude(freqs, fc, cfg.gammatone_order) ** 2
    return bank


def mel_energies_from_spectra(power: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Band energies [bands, frames] before the log: filter-weighted sums of
    squared magnitudes."""
    return mel_filterbank(cfg) @ power.T


def mel_spectrogram(seg: AudioSegment, cfg: FeatureConfig | None = None) -> MelGram:
    cfg = cfg or FeatureConfig()
    power = windowed_power_spectra(seg, cfg)
    energies = mel_energies_from_spectra(power, cfg)
    values = np.log(np.maximum(energies, cfg.log_floor))
    return MelGram(values=values, frame_len=cfg.frame_size, hop=cfg.hop_len)


def coch_energies_from_spectra(power: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    return gammatone_filterbank(cfg) @ power.T


def cochleagram(seg: AudioSegment, cfg: FeatureConfig | None = None) -> CochGram:
    cfg = cfg or FeatureConfig()
    power = windowed_power_spectra(seg, cfg)
    energies = coch_energies_from_spectra(power, cfg)
    compressed = np.maximum(energies, cfg.log_floor) ** cfg.compression
    return CochGram(values=np.log10(compressed))


def extract_pair(seg: AudioSegment, cfg: FeatureConfig | None = None) -> FeaturePair:
    """Both views from one segment, sharing the pre-emphasised signal and
    windowed spectra."""
    cfg = cfg or FeatureConfig()
    power = windowed_power_spectra(seg, cfg)
    mel = np.log(np.maximum(mel_energies_from_spectra(power, cfg), cfg.log_floor))
    coch_energy = np.maximum(coch_energies_from_spectra(power, cfg), cfg.log_floor)
    coch = np.log10(coch_energy ** cfg.compression)
    return FeaturePair(mel=mel, coch=coch)


# -- WAV ingestion ---------------------------------------------------------


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM WAV; stereo is averaged to mono. Returns float
    samples in [-1, 1] and the sample rate."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ConfigError(f"{path}: only 16-bit PCM WAV is supported")
        rate = wf.getframerate()
        channels = wf.getnchannels()
        raw = wf.readframes(wf.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return data, rate


# -- feature cache on disk ---------------------------------------------------

_CACHE_DTYPES = {0: np.float32}


def write_feature_cache(path, pair: FeaturePair, track_id: str, cfg: FeatureConfig):
    """Binary cache: magic, version, then per gram (mel first, coch second)
    dtype tag, rank, dims, row-major float32 payload. A JSON sidecar lists
    track id, config hash and dims."""
    from .ioutil import atomic_write_bytes

    parts = [CACHE_MAGIC, struct.pack("<I", CACHE_VERSION)]
    for gram in (pair.mel, pair.coch):
        arr = np.ascontiguousarray(gram, dtype=np.float32)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes())
    atomic_write_bytes(path, b"".join(parts))

    sidecar = {
        "track_id": track_id,
        "config_hash": cfg.config_hash(),
        "grams": [
            {"name": "mel", "dims": list(pair.mel.shape)},
            {"name": "coch", "dims": list(pair.coch.shape)},
        ],
    }
    atomic_write_bytes(str(path) + ".json", (json.dumps(sidecar, indent=1) + "\n").encode("utf-8"))


def read_feature_cache(path) -> FeaturePair:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CACHE_MAGIC:
        raise ConfigError(f"{path}: not a feature cache (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CACHE_VERSION:
        raise ConfigError(f"{path}: unsupported cache version {version}")
    offset = 8
    grams = []
    while offset < len(buf):
        tag, rank = struct.unpack_from("<BB", buf, offset)
        offset += 2
        dims = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
        dtype = np.dtype(_CACHE_DTYPES[tag]).newbyteorder("<")
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        grams.append(np.frombuffer(buf[offset:offset + n_bytes], dtype=dtype).reshape(dims).astype(np.float32))
        offset += n_bytes
    if len(grams) != 2:
        raise ConfigError(f"{path}: expected 2 grams, found {len(grams)}")
    return FeaturePair(mel=grams[0], coch=grams[1])
