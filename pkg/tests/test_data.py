import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rvae_st.data import (MAGIC, Checkpoint, CheckpointError, CheckpointMagicError,
                          CheckpointTruncatedError, CheckpointVersionError, ChunkSpec, CsvFormatError,
                          RawSeries, checkpoint_bytes, checkpoint_from_bytes, chunk, chunk_batch,
                          chunk_count, fit_scaler, gen_psd_dataset, gen_sine, is_batch_csv,
                          load_batch_csv, load_checkpoint, load_csv, psd_signals, round_half_up,
                          save_batch_csv, save_checkpoint, save_csv, sine_batch, split_indices,
                          split_train_val)
from rvae_st.evaluation import find_peaks
from rvae_st.numerics import Rng, periodogram_power
from rvae_st.rvae import init_rvae


# --- CSV ---------------------------------------------------------------------

def test_load_small_csv(tmp_path):
    f = tmp_path / "a.csv"
    f.write_text("x,y\n1,2\n3.5,-4e-1\n")
    s = load_csv(f)
    assert s.channel_names == ["x", "y"]
    np.testing.assert_array_equal(s.values, [[1, 2], [3.5, -0.4]])


@pytest.mark.parametrize("body,needle", [
    ("x,y\n1,2\nnan,3\n", "row 3"),
    ("x,y\n1,2\n3,inf\n", "row 3"),
    ("x,y\n1,2\n3\n", "row 3"),
    ("x,y\n1,abc\n", "row 2"),
])
def test_csv_errors_name_file_line(tmp_path, body, needle):
    f = tmp_path / "bad.csv"
    f.write_text(body)
    with pytest.raises(CsvFormatError, match=needle):
        load_csv(f)


def test_csv_round_trip(tmp_path):
    v = Rng(0).standard_normal((1000, 3)) * 1e3
    f = tmp_path / "r.csv"
    save_csv(f, RawSeries(v, ["a", "b", "c"]))
    s = load_csv(f)
    np.testing.assert_allclose(s.values, v, rtol=0, atol=1e-12)
    assert s.channel_names == ["a", "b", "c"]


def test_batch_csv_round_trip(tmp_path):
    b = Rng(1).standard_normal((4, 7, 2))
    f = tmp_path / "b.csv"
    save_batch_csv(f, b)
    assert is_batch_csv(f)
    out, names = load_batch_csv(f)
    np.testing.assert_array_equal(out, b)
    assert names == ["ch0", "ch1"]


def test_raw_series_validation():
    with pytest.raises(ValueError):
        RawSeries(np.zeros(4))
    with pytest.raises(ValueError):
        RawSeries(np.zeros((4, 2)), ["only"])


# --- scaler ------------------------------------------------------------------

def test_scaler_examples():
    s = fit_scaler(np.array([[0.0], [10.0], [3.0]]))
    assert s.apply(5.0)[0] == 0.0
    assert s.apply(0.0)[0] == -1.0 and s.apply(10.0)[0] == 1.0
    with pytest.raises(ValueError):
        fit_scaler(np.array([[1.0, 2.0], [1.0, 3.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_scaler_round_trip(seed):
    v = np.random.default_rng(seed).normal(size=(50, 3)) * [1, 100, 1e-3] + [0, -7, 2]
    s = fit_scaler(v)
    y = s.apply(v)
    assert y.min() >= -1 - 1e-12 and y.max() <= 1 + 1e-12
    np.testing.assert_allclose(s.invert(y), v, rtol=0, atol=1e-12 * max(1.0, np.abs(v).max()))


# --- chunking and splitting --------------------------------------------------

def test_chunk_examples():
    v = np.arange(1000.0)
    assert chunk(v, ChunkSpec(100, 10)).shape == (91, 100, 1)
    part = chunk(v, ChunkSpec(100, 100))
    assert part.shape[0] == 10
    np.testing.assert_array_equal(part.reshape(-1), v)
    with pytest.raises(ValueError):
        chunk(np.arange(5.0), ChunkSpec(10))


def test_chunk_spec_defaults():
    assert ChunkSpec(100).step == 10
    assert ChunkSpec(5).step == 1          # 0.5 rounds up
    assert ChunkSpec(4).step == 1          # minimum 1
    assert ChunkSpec.fraction(250, 0.04).step == 10
    assert round_half_up(2.5) == 3 and round_half_up(2.49) == 2
    with pytest.raises(ValueError):
        ChunkSpec(10, 11)
    with pytest.raises(ValueError):
        ChunkSpec(10, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.data())
def test_chunk_count_and_slices(n, data):
    l = data.draw(st.integers(1, n))
    step = data.draw(st.integers(1, l))
    v = np.random.default_rng(n).normal(size=(n, 2))
    out = chunk(RawSeries(v), ChunkSpec(l, step))
    assert out.shape == ((n - l) // step + 1, l, 2) and chunk_count(n, ChunkSpec(l, step)) == out.shape[0]
    for k in {0, out.shape[0] - 1, out.shape[0] // 2}:
        np.testing.assert_array_equal(out[k], v[k * step:k * step + l])


def test_chunk_batch():
    b = np.arange(40.0).reshape(2, 20, 1)
    out = chunk_batch(b, ChunkSpec(10, 5))
    assert out.shape == (6, 10, 1)
    np.testing.assert_array_equal(out[3, :, 0], np.arange(20.0, 30.0))


def test_split():
    tr, va = split_indices(100, 3)
    assert len(tr) == 90 and len(va) == 10
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(100))
    tr2, va2 = split_indices(100, 3)
    assert np.array_equal(tr, tr2) and np.array_equal(va, va2)
    assert not np.array_equal(va, split_indices(100, 4)[1])
    b = np.arange(30.0).reshape(30, 1, 1)
    t, v = split_train_val(b, 0)
    assert len(t) == 27 and len(v) == 3
    with pytest.raises(ValueError):
        split_train_val(b[:9], 0)


# --- generators --------------------------------------------------------------

def test_sine_examples():
    x = gen_sine(50, 200, rng=Rng(0))
    assert x.shape == (50, 200, 5)
    assert np.all(np.abs(x) <= 1.0)
    assert np.all(sine_batch(np.zeros((1, 1)), np.zeros((1, 1)), 10) == 0)
    f, ph = np.array([[0.037]]), np.array([[0.21]])
    t = np.arange(64)
    np.testing.assert_allclose(sine_batch(f, ph, 64)[0, :, 0], np.sin(2 * np.pi * 0.037 * t + 0.21),
                               rtol=0, atol=1e-12)


def test_sine_reproducible_and_prefix():
    a = gen_sine(10, 100, rng=Rng(5))
    b = gen_sine(10, 300, rng=Rng(5))
    np.testing.assert_array_equal(a, b[:, :100])
    with pytest.raises(ValueError):
        gen_sine(0, 10)


def test_psd_dataset_range_and_reproducible():
    x = gen_psd_dataset(200, 100, rng=Rng(1))
    assert x.shape == (200, 100, 1)
    assert x.min() == -1.0 and x.max() == 1.0
    np.testing.assert_array_equal(x, gen_psd_dataset(200, 100, rng=Rng(1)))


def test_psd_imaginary_residue():
    for l in (8, 99, 100, 257, 1000):
        _, imag = psd_signals(20, l, Rng(l), return_imag=True)
        assert imag < 1e-9


def test_psd_errors():
    with pytest.raises(ValueError):
        gen_psd_dataset(10, 7)
    with pytest.raises(ValueError):
        gen_psd_dataset(10, 10)        # 0.08 * 10 < 1 bin


def test_psd_peaks_at_l1000():
    x = gen_psd_dataset(1000, 1000, rng=Rng(2), block=250)[:, :, 0]
    mean = periodogram_power(x).mean(axis=0)
    peaks = find_peaks(mean, 2)
    assert peaks.tolist() == [80, 120]


# --- checkpoints -------------------------------------------------------------

def make_ckpt():
    p = init_rvae(3, Rng(0), d_c=2, hidden=6, layers=2, latent=4)
    for t in p.tensors().values():
        t += 1e-3
    sc = fit_scaler(Rng(1).standard_normal((20, 3)))
    return Checkpoint(p, sc, seed=2**63 + 5, schedule=[100, 200])


def test_checkpoint_round_trip(tmp_path):
    ck = make_ckpt()
    f = tmp_path / "m.ckpt"
    save_checkpoint(f, ck)
    back = load_checkpoint(f)
    for (k, a), (k2, b) in zip(ck.params.tensors().items(), back.params.tensors().items()):
        assert k == k2 and a.tobytes() == b.tobytes()
    assert back.seed == ck.seed and back.schedule == [100, 200]
    assert np.array_equal(back.scaler.min, ck.scaler.min)
    assert checkpoint_bytes(back) == f.read_bytes()
    assert checkpoint_from_bytes(checkpoint_bytes(Checkpoint(ck.params))).scaler is None


def test_checkpoint_errors():
    buf = checkpoint_bytes(make_ckpt())
    assert buf[:4] == MAGIC
    with pytest.raises(CheckpointMagicError):
        checkpoint_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointVersionError):
        checkpoint_from_bytes(buf[:4] + (99).to_bytes(4, "little") + buf[8:])
    for cut in (2, 10, len(buf) // 2, len(buf) - 1):
        with pytest.raises(CheckpointTruncatedError):
            checkpoint_from_bytes(buf[:cut])
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(buf + b"\0")
    # distinct error types
    assert len({CheckpointMagicError, CheckpointVersionError, CheckpointTruncatedError}) == 3
