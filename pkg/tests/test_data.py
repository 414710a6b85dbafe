import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s4m.data import (ConfigError, DataError, SynthSpec, TimeSeriesFrame, chronological_split, denormalize,
                      fit_norm, inject_missing, inject_time_point_missing, inject_variable_missing, load_csv,
                      make_windows, normalize, overall_missing_ratio, read_manifest, save_csv, stack_windows,
                      synth_generate, window_starts, write_manifest)


def full_frame(T=50, D=3, seed=0):
    return TimeSeriesFrame(np.random.default_rng(seed).normal(size=(T, D)), np.ones((T, D), bool))


# ---------------------------------------------------------------- csv

def test_csv_one_empty_cell(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("a,b\n1,2\n3,\n5,6\n")
    f = load_csv(p)
    assert f.values.shape == (3, 2) and (~f.mask).sum() == 1 and not f.mask[1, 1]


def test_csv_complete_file(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x\n1\n2\n")
    assert load_csv(p).mask.all()


def test_csv_nan_cell_is_missing(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\nnan,1\n")
    assert not load_csv(p).mask[0, 0]


def test_csv_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n1,2\n1,abc\n")
    with pytest.raises(DataError, match="line 3"):
        load_csv(p)
    p.write_text("x,y\n1\n")
    with pytest.raises(DataError, match="line 2"):
        load_csv(p)


def test_csv_round_trip(tmp_path):
    f = inject_time_point_missing(full_frame(), 0.1, seed=1)
    save_csv(f, tmp_path / "f.csv")
    g = load_csv(tmp_path / "f.csv")
    assert np.array_equal(g.mask, f.mask)
    assert np.array_equal(g.values[g.mask], f.values[f.mask])
    assert g.names == f.names


def test_manifest_round_trip(tmp_path):
    write_manifest(tmp_path / "m", {"a": 1, "b": "x y"})
    assert read_manifest(tmp_path / "m") == {"a": "1", "b": "x y"}


def test_frame_rejects_bad_shapes():
    with pytest.raises(DataError):
        TimeSeriesFrame(np.zeros((3, 2)), np.ones((3, 1)))


# ---------------------------------------------------------------- synthetic

def test_synth_noiseless_single_sinusoid():
    spec = SynthSpec([12.0], [2.0], [0.0], None, sigma=0.0)
    f = synth_generate(100, 1, 0, spec)
    t = np.arange(100)
    assert np.array_equal(f.values[:, 0], 2.0 * np.sin(2 * np.pi * t / 12.0))


def test_synth_reproducible():
    assert np.array_equal(synth_generate(300, 4, 7).values, synth_generate(300, 4, 7).values)
    assert not np.array_equal(synth_generate(300, 4, 7).values, synth_generate(300, 4, 8).values)


def test_synth_noise_mean():
    spec = SynthSpec([10.0], [0.0], [0.0], None, sigma=1.0)
    assert abs(synth_generate(10000, 1, 3, spec).values.mean()) < 0.05


def test_synth_is_fully_observed():
    assert synth_generate(50, 3, 0).mask.all()


# ---------------------------------------------------------------- missingness

def test_zero_rate_keeps_mask():
    f = full_frame()
    assert np.array_equal(inject_time_point_missing(f, 0.0).mask, f.mask)
    assert np.array_equal(inject_variable_missing(f, 0.0).mask, f.mask)


def test_time_point_ratio_near_reference():
    f = TimeSeriesFrame(np.zeros((20000, 2)), np.ones((20000, 2), bool))
    assert 0.23 <= overall_missing_ratio(inject_time_point_missing(f, 0.06, seed=0)) <= 0.28


def test_variable_ratio_near_reference():
    f = TimeSeriesFrame(np.zeros((20000, 8)), np.ones((20000, 8), bool))
    assert 0.23 <= overall_missing_ratio(inject_variable_missing(f, 0.06, seed=0)) <= 0.28


def test_time_point_blocks_hide_whole_rows():
    f = inject_time_point_missing(full_frame(200, 4), 0.05, seed=3)
    rows = f.mask.all(axis=1) | (~f.mask).all(axis=1)
    assert rows.all()


def test_single_anchor_hides_five_steps_per_variable():
    f = full_frame(40, 3)
    g = inject_time_point_missing(f, 1 / 40, block_len=5, seed=11)   # floor(r T) = 1 anchor
    hidden = (~g.mask).sum()
    anchor = np.flatnonzero(~g.mask[:, 0])[0]
    assert hidden == 3 * min(5, 40 - anchor)


def test_single_variable_patterns_agree():
    f = full_frame(300, 1)
    a = inject_time_point_missing(f, 0.05, seed=5).mask
    b = inject_variable_missing(f, 0.05, seed=5).mask
    assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(r=st.floats(0, 0.5), seed=st.integers(0, 2**31 - 1), pattern=st.sampled_from(["time-point", "variable"]))
def test_corruption_is_monotone_and_seeded(r, seed, pattern):
    f = inject_time_point_missing(full_frame(120, 3, seed=1), 0.02, seed=9)
    g = inject_missing(f, pattern, r, seed=seed)
    assert not np.any(g.mask & ~f.mask)
    assert np.array_equal(g.mask, inject_missing(f, pattern, r, seed=seed).mask)


def test_bad_pattern_and_rate():
    with pytest.raises(ConfigError):
        inject_missing(full_frame(), "diagonal", 0.1)
    with pytest.raises(ConfigError):
        inject_time_point_missing(full_frame(), 1.0)


def test_ratio_counts():
    m = np.ones((2, 3), bool)
    assert overall_missing_ratio(TimeSeriesFrame(np.zeros((2, 3)), m)) == 0.0
    assert overall_missing_ratio(TimeSeriesFrame(np.zeros((2, 3)), ~m)) == 1.0
    m[0] = False
    assert overall_missing_ratio(TimeSeriesFrame(np.zeros((2, 3)), m)) == 0.5


# ---------------------------------------------------------------- split / windows / scaling

def test_split_lengths_and_partition():
    f = full_frame(100)
    tr, va, te = chronological_split(f)
    assert (tr.T, va.T, te.T) == (70, 10, 20)
    assert np.array_equal(np.concatenate([tr.values, va.values, te.values]), f.values)
    tr, va, te = chronological_split(f, (1.0, 0.0, 0.0))
    assert np.array_equal(tr.values, f.values) and va.T == 0 and te.T == 0


def test_split_ratios_must_sum_to_one():
    with pytest.raises(ConfigError):
        chronological_split(full_frame(), (0.5, 0.5, 0.5))


def test_window_counts():
    assert len(window_starts(120, 96, 24)) == 1
    assert len(make_windows(full_frame(300, 2), 96, 96)) == 109
    with pytest.raises(ConfigError):
        window_starts(10, 8, 8)


def test_stacked_windows_align_with_pairs():
    f = inject_time_point_missing(full_frame(60, 2), 0.05, seed=2)
    pairs = make_windows(f, 10, 4, stride=3)
    wb = stack_windows(f, 10, 4, stride=3)
    assert len(wb) == len(pairs)
    for i, p in enumerate(pairs):
        assert np.array_equal(wb.m[i], p.lookback_mask)
        assert np.array_equal(wb.x[i], np.where(p.lookback_mask, p.lookback, 0.0))
        assert wb.t0[i] == p.t0


def test_norm_constant_variable_floored():
    f = TimeSeriesFrame(np.full((10, 1), 4.0), np.ones((10, 1), bool))
    stats = fit_norm(f)
    assert stats.std[0] == 1e-8
    assert np.array_equal(stats.apply(f).values, np.zeros((10, 1)))


def test_norm_standard_data_nearly_unchanged():
    v = np.random.default_rng(0).normal(size=(5000, 2))
    f = TimeSeriesFrame((v - v.mean(0)) / v.std(0), np.ones((5000, 2), bool))
    assert np.allclose(normalize(f)[0].values, f.values, atol=1e-12)


def test_norm_round_trip_on_observed():
    f = inject_variable_missing(TimeSeriesFrame(3 + 2 * full_frame(80).values, np.ones((80, 3), bool)), 0.05, seed=1)
    tr, (other,), stats = normalize(f, [f])
    back = denormalize(other, stats)
    assert np.max(np.abs(back.values[f.mask] - f.values[f.mask])) < 1e-10
    assert np.all(back.values[~f.mask] == 0.0)


def test_norm_uses_observed_training_entries_only():
    v = np.array([[1.0], [3.0], [1000.0]])
    m = np.array([[True], [True], [False]])
    stats = fit_norm(TimeSeriesFrame(v, m))
    assert stats.mean[0] == 2.0 and stats.std[0] == 1.0
