"""Regenerate the log-mel golden fixtures in tests/data/golden.

Expected features come from librosa (center=False, Slaney mel, area norm),
not from this package, so the fixtures act as an independent reference.
Requires ``pip install librosa``.
"""
import pathlib
import struct

import librosa
import numpy as np

OUT = pathlib.Path(__file__).resolve().parents[1] / "tests" / "data" / "golden"
SR, N_FFT, WIN, HOP, N_MELS = 16000, 512, 400, 160, 80


def write_pcm16(path, samples):
    pcm = np.round(np.clip(samples, -1, 1) * 32767).astype("<i2").tobytes()
    hdr = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, SR, SR * 2, 2, 16)
    hdr += b"data" + struct.pack("<I", len(pcm))
    path.write_bytes(hdr + pcm)
    return np.frombuffer(pcm, dtype="<i2").astype(np.float64) / 32768.0


def reference_features(y):
    pad = (N_FFT - WIN) // 2
    yp = np.concatenate([np.zeros(pad), y, np.zeros(pad)])
    power = np.abs(librosa.stft(yp, n_fft=N_FFT, hop_length=HOP, win_length=WIN,
                                window="hann", center=False)) ** 2
    fb = librosa.filters.mel(sr=SR, n_fft=N_FFT, n_mels=N_MELS, fmin=0, fmax=SR / 2,
                             htk=False, norm="slaney")
    logmel = np.log(fb @ power + 1e-10)
    return logmel, (logmel - logmel.mean(1, keepdims=True)) / (logmel.std(1, keepdims=True) + 1e-5)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20230101)
    t = np.arange(int(0.25 * SR)) / SR
    cases = {
        "tone_chirp": 0.4 * np.sin(2 * np.pi * (300 * t + 2000 * t ** 2)) + 0.01 * rng.standard_normal(t.size),
        "noise_burst": 0.2 * rng.standard_normal(int(0.12 * SR)) * np.hanning(int(0.12 * SR)),
    }
    for name, signal in cases.items():
        y = write_pcm16(OUT / f"{name}.wav", signal)
        raw, norm = reference_features(y)
        for kind, arr in (("raw", raw), ("norm", norm)):
            arr.astype("<f4").tofile(OUT / f"{name}.{kind}.f32")
            (OUT / f"{name}.{kind}.txt").write_text(
                f"shape = {arr.shape[0]} {arr.shape[1]}\n"
                f"dtype = float32-le\n"
                f"sample_rate = {SR}\nn_mels = {N_MELS}\nwin_ms = 25\nhop_ms = 10\n"
                f"fft_size = {N_FFT}\nwindow = hann\nmel = slaney-area\n"
                f"normalize = {'per_feature' if kind == 'norm' else 'none'}\n"
            )


if __name__ == "__main__":
    main()
