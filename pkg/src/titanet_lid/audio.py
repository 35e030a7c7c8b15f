"""Audio ingestion and log-mel features.

WAV decoding, 80-bin log-mel extraction (25 ms Hann window, 10 ms hop, no
centering), fixed and sweep segmentation, speed perturbation and SpecAugment.
"""
import hashlib
import struct
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.signal import get_window, resample_poly

from titanet_lid.errors import DecodeError, DimensionError, TooShortError

CANONICAL_RATE = 16000
NORM_EPS = 1e-5

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


@dataclass
class AudioSegment:
    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE
    label: str | None = None
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DimensionError(f"audio must be mono 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.size == 0:
            raise ValueError("audio has no samples")

    @property
    def num_samples(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate

    def slice(self, start, stop, tag=None):
        src = self.source_id if tag is None else f"{self.source_id}@{tag}"
        return AudioSegment(self.samples[start:stop].copy(), self.sample_rate, self.label, src)


# --------------------------------------------------------------------------- WAV I/O

def decode_wav(data, label=None, source_id=""):
    """Decode a RIFF/WAVE byte string (PCM 16-bit or IEEE float 32-bit) to mono."""
    data = bytes(data)
    if len(data) < 12:
        raise DecodeError("file too short for a RIFF header", 0)
    if data[0:4] != b"RIFF":
        raise DecodeError(f"missing RIFF magic, found {data[0:4]!r}", 0)
    if data[8:12] != b"WAVE":
        raise DecodeError(f"not a WAVE file, found {data[8:12]!r}", 8)

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = pos + 8
        if body + size > len(data):
            if chunk_id == b"data":
                # tolerate writers that leave a stale size on a truncated data chunk
                size = (len(data) - body)
            else:
                raise DecodeError(f"chunk {chunk_id!r} overruns the file", pos)
        if chunk_id == b"fmt ":
            if size < 16:
                raise DecodeError("fmt chunk shorter than 16 bytes", pos)
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", data, body)
            if tag == _EXTENSIBLE:
                if size < 40:
                    raise DecodeError("WAVE_FORMAT_EXTENSIBLE fmt chunk too short", pos)
                (tag,) = struct.unpack_from("<H", data, body + 24)
            fmt = (tag, channels, rate, block_align, bits, pos)
        elif chunk_id == b"data":
            payload = (body, size)
        pos = body + size + (size & 1)

    if fmt is None:
        raise DecodeError("no fmt chunk", 12)
    if payload is None:
        raise DecodeError("no data chunk", pos)
    tag, channels, rate, block_align, bits, fmt_pos = fmt
    if channels not in (1, 2):
        raise DecodeError(f"unsupported channel count {channels}", fmt_pos + 10)
    if rate == 0:
        raise DecodeError("sample rate is zero", fmt_pos + 12)
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise DecodeError(f"unsupported codec (format tag {tag}, {bits} bits)", fmt_pos + 8)

    start, size = payload
    frame_bytes = dtype.itemsize * channels
    n_frames = size // frame_bytes
    if n_frames == 0:
        raise DecodeError("data chunk holds no complete frames", start - 8)
    raw = np.frombuffer(data, dtype=dtype, count=n_frames * channels, offset=start)
    samples = raw.astype(np.float64) * scale
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    return AudioSegment(samples, int(rate), label, source_id)


def read_wav(path, label=None):
    with open(path, "rb") as fh:
        return decode_wav(fh.read(), label=label, source_id=str(path))


def encode_wav(audio, sample_format="pcm16"):
    """Serialize mono audio as a canonical 44-byte-header WAV."""
    x = np.clip(audio.samples, -1.0, 1.0)
    if sample_format == "pcm16":
        pcm = np.round(x * 32767.0).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    elif sample_format == "float32":
        pcm = x.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    else:
        raise ValueError(f"unknown sample format {sample_format!r}")
    block = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, tag, 1, audio.sample_rate,
                                    audio.sample_rate * block, block, bits)
    header += b"data" + struct.pack("<I", len(pcm))
    return header + pcm


def write_wav(path, audio, sample_format="pcm16"):
    with open(path, "wb") as fh:
        fh.write(encode_wav(audio, sample_format))


def resample(audio, target_rate):
    """Band-limited polyphase resampling to ``target_rate``."""
    if audio.sample_rate == target_rate:
        return audio
    ratio = Fraction(target_rate, audio.sample_rate)
    y = resample_poly(audio.samples, ratio.numerator, ratio.denominator)
    return AudioSegment(y, target_rate, audio.label, audio.source_id)


# --------------------------------------------------------------------------- features

@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = CANONICAL_RATE
    n_mels: int = 80
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-10
    window: str = "hann"
    normalize: str = "per_feature"

    def __post_init__(self):
        if self.win_ms < self.hop_ms:
            raise ValueError("win_ms must be >= hop_ms")
        if self.fft_size < self.win_samples:
            raise ValueError(f"fft_size {self.fft_size} < window of {self.win_samples} samples")
        if self.normalize not in ("per_feature", "none"):
            raise ValueError(f"unknown normalization {self.normalize!r}")

    @property
    def win_samples(self):
        return int(round(self.win_ms * self.sample_rate / 1000))

    @property
    def hop_samples(self):
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def upper_hz(self):
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    def config_hash(self):
        text = ",".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha1(text.encode()).hexdigest()[:16]


@dataclass
class FeatureMatrix:
    mels: np.ndarray  # [n_mels, num_frames]
    num_frames: int
    config_hash: str = ""

    @property
    def n_mels(self):
        return self.mels.shape[0]


def num_frames(num_samples, cfg):
    """Frame count without centering: ``1 + (N - win) // hop`` (0 when shorter than a window)."""
    if num_samples < cfg.win_samples:
        return 0
    return 1 + (num_samples - cfg.win_samples) // cfg.hop_samples


_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    lin = f / _F_SP
    log = _MIN_LOG_MEL + np.log(np.maximum(f, 1e-12) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = m * _F_SP
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL))
    return np.where(m >= _MIN_LOG_MEL, log, lin)


def mel_band_edges(cfg):
    """``n_mels + 2`` Hz points equally spaced on the mel scale; bin i peaks at edge i+1."""
    mels = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_hz), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_center_frequencies(cfg):
    return mel_band_edges(cfg)[1:-1]


@lru_cache(maxsize=16)
def mel_filterbank(cfg):
    """Triangular, area-normalized filterbank of shape ``[n_mels, fft_size // 2 + 1]``."""
    edges = mel_band_edges(cfg)
    freqs = np.fft.rfftfreq(cfg.fft_size, d=1.0 / cfg.sample_rate)
    widths = np.diff(edges)
    ramps = edges[:, None] - freqs[None, :]
    rising = -ramps[:-2] / widths[:-1, None]
    falling = ramps[2:] / widths[1:, None]
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=16)
def _window(kind, length):
    w = get_window(kind, length, fftbins=True).astype(np.float64)
    w.setflags(write=False)
    return w


def power_spectrogram(samples, cfg):
    """Hann-windowed power spectrum, ``[fft_size // 2 + 1, frames]``."""
    n = num_frames(samples.size, cfg)
    frames = np.lib.stride_tricks.sliding_window_view(samples, cfg.win_samples)[::cfg.hop_samples][:n]
    spec = np.fft.rfft(frames * _window(cfg.window, cfg.win_samples), n=cfg.fft_size, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def normalize_per_feature(logmel):
    mean = logmel.mean(axis=1, keepdims=True)
    std = logmel.std(axis=1, keepdims=True)
    return (logmel - mean) / (std + NORM_EPS)


def log_mel(audio, cfg=FeatureConfig()):
    """Log-mel features of ``audio`` as a :class:`FeatureMatrix`."""
    if audio.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"audio at {audio.sample_rate} Hz but features expect {cfg.sample_rate} Hz; resample first"
        )
    if audio.num_samples < cfg.win_samples:
        raise TooShortError(
            f"{audio.num_samples} samples is shorter than one {cfg.win_samples}-sample window"
        )
    power = power_spectrogram(audio.samples, cfg)
    mels = np.log(mel_filterbank(cfg) @ power + cfg.log_floor)
    if cfg.normalize == "per_feature":
        mels = normalize_per_feature(mels)
    return FeatureMatrix(mels, mels.shape[1], cfg.config_hash())


# --------------------------------------------------------------------------- segmentation

def segment_fixed(audio, seg_seconds=3.0, min_tail_seconds=1.0):
    """Consecutive non-overlapping windows; a short remainder is kept if >= ``min_tail_seconds``."""
    seg = int(round(seg_seconds * audio.sample_rate))
    min_tail = int(round(min_tail_seconds * audio.sample_rate))
    out = []
    for start in range(0, audio.num_samples, seg):
        stop = min(start + seg, audio.num_samples)
        if stop - start < seg and stop - start < min_tail:
            break
        out.append(audio.slice(start, stop, f"{start / audio.sample_rate:g}s"))
    return out


def segment_sweep(audio, lengths_seconds, stride_seconds=2.0):
    """Map each window length to all full-length windows starting every ``stride_seconds``."""
    stride = int(round(stride_seconds * audio.sample_rate))
    if stride <= 0:
        raise ValueError("stride must be positive")
    out = {}
    for length in lengths_seconds:
        if length <= 0:
            raise ValueError("segment lengths must be positive")
        n = int(round(length * audio.sample_rate))
        out[length] = [
            audio.slice(s, s + n, f"{s / audio.sample_rate:g}s+{length:g}s")
            for s in range(0, audio.num_samples - n + 1, stride)
        ]
    return out


# --------------------------------------------------------------------------- augmentation

def speed_perturb(audio, factor):
    """Play ``audio`` ``factor`` times faster (pitch shifts too); length becomes ``round(N / factor)``."""
    if factor <= 0:
        raise ValueError("speed factor must be positive")
    target = int(round(audio.num_samples / factor))
    if factor == 1.0:
        return replace(audio, samples=audio.samples.copy())
    ratio = Fraction(factor).limit_denominator(1000)
    y = resample_poly(audio.samples, ratio.denominator, ratio.numerator)
    if y.size >= target:
        y = y[:target]
    else:
        y = np.pad(y, (0, target - y.size))
    return AudioSegment(y, audio.sample_rate, audio.label, audio.source_id)


def spec_augment(features, n_freq_masks=2, freq_width_max=15, n_time_masks=2,
                 time_width_max_fraction=0.05, seed=None):
    """Zero random contiguous mel bands and frame spans; deterministic for a given seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mels = features.mels.copy()
    n_mels, n_t = mels.shape
    freq_width_max = min(freq_width_max, n_mels)
    for _ in range(n_freq_masks):
        width = int(rng.integers(0, freq_width_max + 1))
        start = int(rng.integers(0, n_mels - width + 1))
        mels[start:start + width, :] = 0.0
    time_max = min(int(time_width_max_fraction * n_t), n_t)
    for _ in range(n_time_masks):
        width = int(rng.integers(0, time_max + 1))
        start = int(rng.integers(0, n_t - width + 1))
        mels[:, start:start + width] = 0.0
    return FeatureMatrix(mels, features.num_frames, features.config_hash)


@dataclass
class PerturbationChain:
    """Waveform perturbations applied in order; each is ``fn(audio, rng) -> audio``.

    Speed perturbation is built in. Noise and room-impulse perturbations need
    external corpora and plug in through ``extra``.
    """

    speed_factors: tuple = (0.95, 1.0, 1.05)
    use_speed: bool = True
    extra: list = field(default_factory=list)

    def __call__(self, audio, rng):
        if self.use_speed:
            audio = speed_perturb(audio, float(rng.choice(self.speed_factors)))
        for fn in self.extra:
            audio = fn(audio, rng)
        return audio
