import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from farkws.dsp import (FrontendConfig, compute_fbank, mel_centers, mel_filterbank, num_frames,
                        read_features, write_features)
from farkws.errors import FormatError, TooShortError

CFG = FrontendConfig()


def reference_fbank(x, cfg=CFG):
    """Frame-by-frame log-Mel energies using an explicit DFT sum."""
    emph = np.concatenate([[x[0]], x[1:] - cfg.preemphasis * x[:-1]])
    n = np.arange(cfg.frame_length)
    k = np.arange(cfg.n_fft // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / cfg.n_fft)
    win = 0.54 - 0.46 * np.cos(2 * np.pi * n / (cfg.frame_length - 1))
    fb = mel_filterbank(cfg)
    rows = []
    for t in range(num_frames(len(x), cfg)):
        frame = emph[t * cfg.frame_shift:t * cfg.frame_shift + cfg.frame_length] * win
        power = np.abs(basis @ frame) ** 2
        rows.append(np.log(np.maximum(fb @ power, cfg.log_floor)))
    return np.array(rows)


def test_frame_count_one_second():
    assert compute_fbank(np.zeros(16000)).shape == (98, 40)


def test_zero_signal_hits_floor():
    feats = compute_fbank(np.zeros(16000))
    np.testing.assert_array_equal(feats, np.log(1e-10))


def test_sine_peaks_in_nearest_mel_bin():
    t = np.arange(8000) / 16000.0
    x = 0.5 * np.sin(2 * np.pi * 1000.0 * t)
    feats = compute_fbank(x)
    ref = reference_fbank(x)
    np.testing.assert_allclose(feats, ref, rtol=0, atol=1e-9)
    nearest = int(np.argmin(np.abs(mel_centers() - 1000.0)))
    assert np.all(ref.argmax(axis=1) == nearest)
    assert np.all(feats.argmax(axis=1) == nearest)


def test_scaling_adds_two_log_c(rng):
    x = rng.uniform(-0.3, 0.3, 4000)
    c = 3.0
    base = compute_fbank(x)
    scaled = compute_fbank(c * x)
    unfloored = base > np.log(1e-10) + 1.0
    assert unfloored.all()
    np.testing.assert_allclose(scaled - base, 2 * np.log(c), rtol=0, atol=1e-9)


def test_trailing_partial_frame_ignored(rng):
    x = rng.normal(scale=0.1, size=16000 + 100)
    np.testing.assert_array_equal(compute_fbank(x[:16000]), compute_fbank(x)[:98])
    assert len(compute_fbank(x)) == num_frames(16100)
    y = x[:(num_frames(16100) - 1) * 160 + 400]
    np.testing.assert_array_equal(compute_fbank(y), compute_fbank(x))


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=400, max_value=40000))
def test_frame_count_formula(n):
    assert compute_fbank(np.zeros(n)).shape == ((n - 400) // 160 + 1, 40)


def test_too_short():
    with pytest.raises(TooShortError):
        compute_fbank(np.zeros(399))


def test_filterbank_shape_and_range():
    fb = mel_filterbank()
    assert fb.shape == (40, 257)
    assert fb.min() >= 0.0 and fb.max() <= 1.0
    freqs = np.arange(257) * 16000 / 512
    assert not fb[:, freqs < 20.0].any()
    assert not fb[:, freqs > 7600.0].any()


def test_feature_cache_round_trip(tmp_path, rng):
    feats = rng.normal(size=(17, 40))
    path = tmp_path / "a.feat"
    write_features(path, feats)
    raw = path.read_bytes()
    assert raw[:8] == b"FKWSFEAT"
    assert len(raw) == 8 + 12 + 17 * 40 * 4
    np.testing.assert_array_equal(read_features(path), feats.astype(np.float32))


def test_feature_cache_rejects_garbage(tmp_path):
    path = tmp_path / "bad.feat"
    path.write_bytes(b"NOTAFEAT" + bytes(12))
    with pytest.raises(FormatError):
        read_features(path)
