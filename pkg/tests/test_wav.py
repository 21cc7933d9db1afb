import struct

import numpy as np
import pytest

from mars.dsp import Waveform, decode_wav, encode_wav
from mars.errors import InvalidInputError


def pcm16_file(samples, channels=1, sample_rate=16000):
    payload = np.asarray(samples, dtype="<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, channels, sample_rate, sample_rate * 2 * channels,
        2 * channels, 16, b"data", len(payload))
    return header + payload


def test_pcm16_scaling():
    w = decode_wav(pcm16_file([0, 16384, -16384]))
    assert np.allclose(w.samples, [0.0, 0.5, -0.5])


def test_stereo_averages_to_mono():
    # interleaved L/R: left at full scale, right silent
    data = pcm16_file([32767, 0], channels=2)
    w = decode_wav(data)
    assert w.samples.shape == (1,)
    assert abs(w.samples[0] - 0.5) < 1e-4


def test_truncated_data_chunk_rejected():
    good = pcm16_file([0, 100, 200, 300])
    bad = good[:-3]  # data chunk shorter than its declared size
    with pytest.raises(InvalidInputError, match="truncated data"):
        decode_wav(bad)


def test_float32_roundtrip_exact(rng):
    w = Waveform(rng.uniform(-1, 1, 5000), 16000)
    back = decode_wav(encode_wav(w, "32f"))
    assert np.array_equal(back.samples, w.samples.astype(np.float32).astype(np.float64))
    assert back.sample_rate == 16000


def test_pcm16_roundtrip_within_one_lsb(rng):
    w = Waveform(rng.uniform(-1, 1, 5000), 16000)
    back = decode_wav(encode_wav(w, 16))
    assert np.abs(back.samples - w.samples).max() <= 2 ** -15


def test_out_of_range_sample_clamps_to_full_scale():
    w = Waveform(np.array([1.5, -2.0]), 16000)
    back = decode_wav(encode_wav(w, 16))
    assert back.samples[0] == 32767 / 32768
    assert back.samples[1] == -1.0


def test_unsupported_encoding_rejected():
    payload = b"\x00" * 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, 1, 16000, 16000, 1, 8, b"data", len(payload))
    with pytest.raises(InvalidInputError, match="unsupported encoding"):
        decode_wav(header + payload)


def test_not_riff_rejected():
    with pytest.raises(InvalidInputError):
        decode_wav(b"OGGS" + b"\x00" * 64)


def test_empty_waveform_rejected():
    with pytest.raises(InvalidInputError):
        Waveform(np.array([]), 16000)
