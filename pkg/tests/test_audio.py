import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from titanet_lid.audio import (
    AudioSegment,
    FeatureConfig,
    FeatureMatrix,
    PerturbationChain,
    decode_wav,
    encode_wav,
    hz_to_mel,
    log_mel,
    mel_center_frequencies,
    mel_filterbank,
    mel_to_hz,
    num_frames,
    read_wav,
    resample,
    segment_fixed,
    segment_sweep,
    spec_augment,
    speed_perturb,
    write_wav,
)
from titanet_lid.errors import DecodeError, TooShortError

GOLDEN = Path(__file__).parent / "data" / "golden"
SR = 16000


def wav_bytes(frames, rate=SR, channels=1, tag=1, bits=16, extensible=False):
    """Hand-built RIFF/WAVE (independent of encode_wav)."""
    frames = np.asarray(frames)
    if tag == 1:
        payload = frames.astype("<i2").tobytes()
    else:
        payload = frames.astype("<f4").tobytes()
    block = channels * bits // 8
    if extensible:
        fmt = struct.pack("<HHIIHH", 0xFFFE, channels, rate, rate * block, block, bits)
        fmt += struct.pack("<HHI", 22, bits, 0) + struct.pack("<H", tag) + b"\x00" * 14
    else:
        fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"LIST" + struct.pack("<I", 3) + b"abc\x00"  # odd-sized chunk with pad byte
    body += b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def tone(freq, seconds, rate=SR, amp=0.5):
    t = np.arange(int(round(seconds * rate))) / rate
    return AudioSegment(amp * np.sin(2 * np.pi * freq * t), rate)


# --------------------------------------------------------------------------- WAV

class TestDecode:
    def test_full_scale_pcm16(self):
        a = decode_wav(wav_bytes([32767, -32768, 0]))
        np.testing.assert_allclose(a.samples, [32767 / 32768, -1.0, 0.0])
        assert a.samples[0] == pytest.approx(0.99997, abs=1e-5)

    def test_one_second(self):
        a = decode_wav(wav_bytes(np.zeros(SR, dtype=int)))
        assert a.num_samples == 16000 and a.sample_rate == SR and a.duration == 1.0

    def test_stereo_average(self):
        frames = np.array([[0.2, 0.6], [-0.4, 0.0]], dtype=np.float32).reshape(-1)
        a = decode_wav(wav_bytes(frames, channels=2, tag=3, bits=32))
        np.testing.assert_allclose(a.samples, [0.4, -0.2], atol=1e-7)

    def test_extensible_float(self):
        a = decode_wav(wav_bytes(np.array([0.25, -0.5], dtype=np.float32), tag=3, bits=32, extensible=True))
        np.testing.assert_allclose(a.samples, [0.25, -0.5])

    def test_rate_preserved(self):
        assert decode_wav(wav_bytes([1, 2, 3], rate=8000)).sample_rate == 8000

    @pytest.mark.parametrize("mutate, offset", [
        (lambda b: b"RIFX" + b[4:], 0),
        (lambda b: b[:8] + b"WAVX" + b[12:], 8),
        (lambda b: b[:6], 0),
    ])
    def test_malformed_header(self, mutate, offset):
        with pytest.raises(DecodeError) as exc:
            decode_wav(mutate(wav_bytes([1, 2])))
        assert exc.value.offset == offset
        assert f"offset {offset}" in str(exc.value)

    def test_unsupported_codec(self):
        data = wav_bytes([1, 2], tag=1, bits=16)
        data = data.replace(struct.pack("<HH", 1, 1), struct.pack("<HH", 6, 1), 1)  # A-law
        with pytest.raises(DecodeError, match="unsupported codec"):
            decode_wav(data)

    def test_missing_data_chunk(self):
        data = wav_bytes([1, 2])
        cut = data.index(b"data")
        with pytest.raises(DecodeError, match="no data chunk"):
            decode_wav(data[:cut])

    @pytest.mark.parametrize("fmt", ["pcm16", "float32"])
    def test_round_trip(self, tmp_path, rng, fmt):
        a = AudioSegment(rng.uniform(-0.9, 0.9, 500), 22050)
        write_wav(tmp_path / "a.wav", a, fmt)
        b = read_wav(tmp_path / "a.wav")
        assert b.sample_rate == 22050
        np.testing.assert_allclose(b.samples, a.samples, atol=2.0 / 32767 if fmt == "pcm16" else 1e-7)

    def test_encode_matches_hand_built(self):
        a = AudioSegment(np.array([0.5, -0.25]))
        pcm = np.round(np.array([0.5, -0.25]) * 32767)
        assert decode_wav(encode_wav(a)).samples.tolist() == decode_wav(wav_bytes(pcm)).samples.tolist()


def test_resample_rate_and_length():
    a = tone(440, 1.0, rate=8000)
    b = resample(a, 16000)
    assert b.sample_rate == 16000 and b.num_samples == 16000


# --------------------------------------------------------------------------- features

class TestLogMel:
    def test_298_frames_for_three_seconds(self):
        f = log_mel(tone(300, 3.0))
        assert f.mels.shape == (80, 298) and f.num_frames == 298

    @given(st.integers(400, 20000))
    def test_frame_count_invariant(self, n):
        cfg = FeatureConfig()
        f = log_mel(AudioSegment(np.random.default_rng(n).normal(size=n) * 0.1), cfg)
        assert f.num_frames == 1 + (n - 400) // 160 == num_frames(n, cfg)

    def test_sine_peaks_at_nearest_center(self):
        cfg = FeatureConfig(normalize="none")
        f = log_mel(tone(1000.0, 1.0), cfg)
        expected = int(np.argmin(np.abs(mel_center_frequencies(cfg) - 1000.0)))
        assert int(np.argmax(f.mels.mean(axis=1))) == expected

    def test_silence_is_log_floor(self):
        cfg = FeatureConfig(normalize="none")
        f = log_mel(AudioSegment(np.zeros(4000)), cfg)
        np.testing.assert_allclose(f.mels, np.log(cfg.log_floor))
        g = log_mel(AudioSegment(np.zeros(4000)))
        assert np.all(np.isfinite(g.mels))

    def test_too_short(self):
        with pytest.raises(TooShortError):
            log_mel(AudioSegment(np.zeros(399)))

    def test_rate_mismatch(self):
        with pytest.raises(ValueError, match="resample"):
            log_mel(tone(300, 1.0, rate=8000))

    def test_per_feature_normalization(self, rng):
        f = log_mel(AudioSegment(rng.normal(size=8000) * 0.1))
        np.testing.assert_allclose(f.mels.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(f.mels.std(axis=1), 1.0, atol=1e-3)

    def test_deterministic(self, rng):
        a = AudioSegment(rng.normal(size=5000))
        np.testing.assert_array_equal(log_mel(a).mels, log_mel(a).mels)

    def test_config_hash_tracks_config(self):
        assert FeatureConfig().config_hash() != FeatureConfig(n_mels=40).config_hash()
        assert log_mel(tone(300, 0.5)).config_hash == FeatureConfig().config_hash()

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            FeatureConfig(win_ms=5, hop_ms=10)
        with pytest.raises(ValueError):
            FeatureConfig(fft_size=256)


class TestFilterbank:
    def test_mel_scale_round_trip(self):
        f = np.array([0.0, 250.0, 999.0, 1000.0, 4000.0, 8000.0])
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
        assert hz_to_mel(1000.0) == pytest.approx(15.0)

    def test_area_normalized(self):
        cfg = FeatureConfig()
        fb = mel_filterbank(cfg)
        assert fb.shape == (80, 257) and np.all(fb >= 0)
        edges_hz = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(8000.0), 82))
        # Continuous triangle of height 2/(f_hi - f_lo) integrates to 1.
        heights = 2.0 / (edges_hz[2:] - edges_hz[:-2])
        assert np.all(fb.max(axis=1) <= heights + 1e-12)

    def test_centers_increase(self):
        assert np.all(np.diff(mel_center_frequencies(FeatureConfig())) > 0)


def _golden(name, kind):
    meta = dict(line.split(" = ", 1) for line in (GOLDEN / f"{name}.{kind}.txt").read_text().splitlines())
    shape = tuple(int(v) for v in meta["shape"].split())
    data = np.fromfile(GOLDEN / f"{name}.{kind}.f32", dtype="<f4").reshape(shape)
    return meta, data


@pytest.mark.parametrize("name", ["tone_chirp", "noise_burst"])
@pytest.mark.parametrize("kind", ["raw", "norm"])
def test_golden_features(name, kind):
    meta, expected = _golden(name, kind)
    cfg = FeatureConfig(normalize="none" if meta["normalize"] == "none" else "per_feature")
    got = log_mel(read_wav(GOLDEN / f"{name}.wav"), cfg).mels
    assert got.shape == expected.shape
    np.testing.assert_allclose(got, expected, atol=1e-4, rtol=0)


# --------------------------------------------------------------------------- segmentation

class TestSegmentFixed:
    def test_ten_seconds(self):
        segs = segment_fixed(AudioSegment(np.zeros(10 * SR)))
        assert [s.num_samples for s in segs] == [3 * SR, 3 * SR, 3 * SR, SR]

    def test_exact_three(self):
        assert len(segment_fixed(AudioSegment(np.zeros(3 * SR)))) == 1

    def test_half_second(self):
        assert segment_fixed(AudioSegment(np.zeros(SR // 2))) == []

    @given(st.integers(1, 12 * SR))
    def test_disjoint_ordered_cover(self, n):
        x = np.arange(n, dtype=float)
        segs = segment_fixed(AudioSegment(x))
        joined = np.concatenate([s.samples for s in segs]) if segs else np.zeros(0)
        np.testing.assert_array_equal(joined, x[:joined.size])
        assert n - joined.size < SR  # only a sub-second tail is ever dropped


class TestSegmentSweep:
    def test_seven_seconds(self):
        out = segment_sweep(AudioSegment(np.zeros(7 * SR)), [1, 4, 8])
        assert len(out[4]) == 2 and len(out[1]) == 4 and out[8] == []

    def test_window_starts(self):
        x = np.arange(7 * SR, dtype=float)
        starts = [s.samples[0] / SR for s in segment_sweep(AudioSegment(x), [1])[1]]
        assert starts == [0, 2, 4, 6]

    @given(st.integers(SR, 20 * SR))
    def test_counts_weakly_decrease(self, n):
        out = segment_sweep(AudioSegment(np.zeros(n)), [1, 2, 3, 4, 6, 8])
        counts = [len(out[L]) for L in (1, 2, 3, 4, 6, 8)]
        assert counts == sorted(counts, reverse=True)


# --------------------------------------------------------------------------- augmentation

class TestSpeedPerturb:
    @pytest.mark.parametrize("factor, n_out", [(1.0, 16000), (0.95, 16842), (1.05, 15238)])
    def test_lengths(self, factor, n_out):
        assert speed_perturb(AudioSegment(np.zeros(16000)), factor).num_samples == n_out

    def test_identity(self, rng):
        a = AudioSegment(rng.normal(size=1000))
        np.testing.assert_array_equal(speed_perturb(a, 1.0).samples, a.samples)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("factor", [0.95, 1.05])
    def test_rms_preserved(self, seed, factor):
        rng = np.random.default_rng(seed)
        t = np.arange(SR) / SR
        x = sum(rng.uniform(0.1, 1) * np.sin(2 * np.pi * rng.uniform(100, 4000) * t + rng.uniform(0, 6))
                for _ in range(5))
        y = speed_perturb(AudioSegment(x), factor).samples
        ratio = np.sqrt(np.mean(y ** 2) / np.mean(x ** 2))
        assert 0.9 <= ratio <= 1.1

    def test_pitch_moves(self):
        y = speed_perturb(tone(1000.0, 1.0), 1.05).samples
        spec = np.abs(np.fft.rfft(y))
        peak = np.argmax(spec) * SR / y.size
        assert peak == pytest.approx(1050.0, abs=3.0)

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            speed_perturb(AudioSegment(np.zeros(10)), 0.0)


class TestSpecAugment:
    def _features(self, rng, t=100):
        m = rng.normal(size=(80, t)) + 5.0  # no natural zeros
        return FeatureMatrix(m, t)

    def test_zero_widths_identity(self, rng):
        f = self._features(rng)
        out = spec_augment(f, freq_width_max=0, time_width_max_fraction=0.0, seed=1)
        np.testing.assert_array_equal(out.mels, f.mels)

    @pytest.mark.parametrize("seed", range(20))
    def test_masks_zero_and_preserve(self, seed):
        rng = np.random.default_rng(seed)
        f = self._features(rng)
        out = spec_augment(f, seed=seed).mels
        changed = out != f.mels
        assert np.all(out[changed] == 0.0)
        rows = np.all(out == 0.0, axis=1).sum()
        assert rows <= 2 * 15
        cols = np.all(out == 0.0, axis=0).sum()
        assert cols <= 2 * int(0.05 * 100)
        # every zeroed cell lies in a fully zeroed row or column
        full = np.all(out == 0.0, axis=1)[:, None] | np.all(out == 0.0, axis=0)[None, :]
        assert np.all(full[changed])

    def test_seeded_bit_identical(self, rng):
        f = self._features(rng)
        np.testing.assert_array_equal(spec_augment(f, seed=9).mels, spec_augment(f, seed=9).mels)

    def test_input_untouched(self, rng):
        f = self._features(rng)
        before = f.mels.copy()
        spec_augment(f, seed=3)
        np.testing.assert_array_equal(f.mels, before)


def test_perturbation_chain_defaults():
    chain = PerturbationChain()
    assert chain.speed_factors == (0.95, 1.0, 1.05) and chain.extra == []
