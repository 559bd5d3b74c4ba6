import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmfusion.data import (
    AlignedSample,
    ArrayDataset,
    DataError,
    FeatureTable,
    SyntheticSpec,
    align_modalities,
    align_segments,
    attach_labels,
    denormalize,
    generate_synthetic,
    load_feature_csv,
    load_label_csv,
    normalize,
    to_arrays,
    window,
    write_feature_csv,
)
from mmfusion.metrics import auc
from mmfusion.tensor import Rng


def write(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def table(ts, feats, name="m", seg=0):
    ts = np.asarray(ts, dtype=np.int64)
    feats = np.asarray(feats, dtype=np.float64).reshape(len(ts), -1)
    cols = [f"f_{j}" for j in range(feats.shape[1])]
    return FeatureTable(name, cols, ts, np.full(len(ts), seg, dtype=np.int64), feats)


# -- CSV --------------------------------------------------------------------


def test_load_well_formed(tmp_path):
    p = write(tmp_path / "a.csv", ["timestamp,segment_id,f_0,f_1", "0,1,0.5,1", "40,1,1.5,2", "80,1,-2,3e-1"])
    tab = load_feature_csv(p, modality="audio")
    assert len(tab) == 3 and tab.dim == 2 and tab.modality == "audio"
    assert np.array_equal(tab.timestamps, [0, 40, 80])
    assert np.array_equal(tab.features, [[0.5, 1.0], [1.5, 2.0], [-2.0, 0.3]])


def test_egemaps_arity(tmp_path):
    cols = [f"f_{j}" for j in range(87)]
    p = write(tmp_path / "e.csv", ["timestamp,segment_id," + ",".join(cols), "0,0," + ",".join(["0"] * 87)])
    with pytest.raises(DataError, match="88"):
        load_feature_csv(p, feature_set="egemaps")
    assert load_feature_csv(p).dim == 87


def test_known_feature_set_accepted(tmp_path):
    cols = [f"f_{j}" for j in range(88)]
    p = write(tmp_path / "e.csv", ["timestamp,segment_id," + ",".join(cols), "0,0," + ",".join(["1"] * 88)])
    assert load_feature_csv(p, feature_set="eGeMAPS").dim == 88


@pytest.mark.parametrize(
    "rows, pattern",
    [
        (["0,0,1", "40,0,2", "40,0,3"], "row 4.*timestamp"),
        (["0,0,1", "40,0"], "row 3.*fields"),
        (["0,0,1", "40,0,abc"], "row 3.*unparseable"),
        (["x,0,1"], "row 2.*unparseable timestamp"),
    ],
)
def test_csv_errors_name_row(tmp_path, rows, pattern):
    p = write(tmp_path / "bad.csv", ["timestamp,segment_id,f_0", *rows])
    with pytest.raises(DataError, match=pattern):
        load_feature_csv(p)


def test_missing_header(tmp_path):
    with pytest.raises(DataError):
        load_feature_csv(write(tmp_path / "h.csv", ["0,0,1"]))


def test_timestamps_restart_per_segment(tmp_path):
    p = write(tmp_path / "s.csv", ["timestamp,segment_id,f_0", "0,1,1", "40,1,2", "0,2,3", "40,2,4"])
    tab = load_feature_csv(p)
    assert tab.segments() == [1, 2]
    assert np.array_equal(tab.segment(2).features.ravel(), [3, 4])


def test_csv_round_trip(tmp_path):
    tab = table([0, 40, 80], np.random.default_rng(0).normal(size=(3, 4)))
    write_feature_csv(tmp_path / "r.csv", tab)
    back = load_feature_csv(tmp_path / "r.csv", modality="m")
    assert np.array_equal(back.features, tab.features)
    assert np.array_equal(back.timestamps, tab.timestamps)


def test_label_files(tmp_path):
    kind, labels, names = load_label_csv(write(tmp_path / "l.csv", ["sample_id,humor", "a,1", "b,0"]))
    assert kind == "sample" and names == ["humor"] and labels["a"].tolist() == [1.0]
    kind, series, names = load_label_csv(
        write(tmp_path / "s.csv", ["timestamp,segment_id,arousal,valence", "0,3,0.1,0.2", "40,3,0.3,0.4"]))
    assert kind == "series" and names == ["arousal", "valence"]
    ts, vals = series[3]
    assert ts.tolist() == [0, 40] and vals.tolist() == [[0.1, 0.2], [0.3, 0.4]]
    with pytest.raises(DataError, match="row 3"):
        load_label_csv(write(tmp_path / "b.csv", ["timestamp,arousal", "40,1", "0,2"]))


# -- alignment ----------------------------------------------------------------


def test_align_10ms_and_40ms_by_hand():
    fast = table(np.arange(15, 176, 10), np.arange(17.0), "fast")  # covers [15, 185)
    slow = table([0, 40, 80, 120, 160], [10.0, 11.0, 12.0, 13.0, 14.0], "slow")  # covers [0, 200)
    s = align_modalities([fast, slow], hop_ms=40)
    # overlap [15, 185) is 170 ms -> 4 steps at 15, 55, 95, 135
    assert s.T == 4
    assert s.timestamps.tolist() == [15, 55, 95, 135]
    assert s.features[0].ravel().tolist() == [0.0, 4.0, 8.0, 12.0]
    assert s.features[1].ravel().tolist() == [10.0, 11.0, 12.0, 13.0]


def test_align_identical_grids_unchanged():
    rng = np.random.default_rng(0)
    a = table(40 * np.arange(6), rng.normal(size=(6, 3)), "a")
    b = table(40 * np.arange(6), rng.normal(size=(6, 2)), "b")
    s = align_modalities([a, b], 40)
    assert np.array_equal(s.features[0], a.features)
    assert np.array_equal(s.features[1], b.features)
    assert np.array_equal(s.timestamps, a.timestamps)


def test_align_disjoint_ranges():
    with pytest.raises(DataError, match="overlap"):
        align_modalities([table([0, 40], [1, 2]), table([1000, 1040], [1, 2])], 40)


def test_align_segments_matches_common_segments():
    a = FeatureTable("a", ["f"], np.array([0, 40, 0, 40]), np.array([1, 1, 2, 2]), np.arange(4.0)[:, None])
    b = FeatureTable("b", ["f"], np.array([0, 40]), np.array([2, 2]), np.ones((2, 1)))
    out = align_segments([a, b], 40)
    assert [s.sample_id for s in out] == ["2"]
    assert out[0].features[0].ravel().tolist() == [2.0, 3.0]


def test_attach_series_labels_holds():
    s = align_modalities([table([0, 40, 80], [1, 2, 3])], 40)
    lab = attach_labels(s, (np.array([0, 80]), np.array([[0.1], [0.9]])))
    assert lab.label_kind == "series" and lab.labels.ravel().tolist() == [0.1, 0.1, 0.9]


# -- windowing ----------------------------------------------------------------


def sample_of(T, d=2, series=False):
    f = np.arange(T * d, dtype=np.float64).reshape(T, d) + 1
    labels = np.arange(T, dtype=np.float64)[:, None] if series else np.array([1.0])
    return AlignedSample("s", [f], 40 * np.arange(T), labels, "series" if series else "sample")


def test_window_even_split():
    ws = window(sample_of(10), 5, 5)
    assert len(ws) == 2 and not any(w.padded for w in ws)


def test_window_partial_last():
    ws = window(sample_of(7, series=True), 5, 5)
    assert len(ws) == 2
    last = ws[1]
    assert last.padded and last.mask.tolist() == [True, True, False, False, False]
    assert np.array_equal(last.features[0][2:], np.zeros((3, 2)))
    assert last.labels.ravel().tolist() == [5, 6, 0, 0, 0]
    assert last.timestamps.tolist() == [200, 240, 280, 320, 360]


def test_window_longer_than_sequence():
    ws = window(sample_of(3), 8, 2)
    assert len(ws) == 1 and ws[0].padded and ws[0].T == 8 and ws[0].mask.sum() == 3


def test_window_overlap_count_and_sample_labels():
    ws = window(sample_of(10), 4, 2)
    assert len(ws) == 4
    assert all(w.labels.tolist() == [1.0] for w in ws)


def test_window_rejects_zero_length():
    with pytest.raises(ValueError):
        window(sample_of(4), 0, 1)


# -- normalisation ------------------------------------------------------------


def test_normalize_train_stats_and_constant_feature():
    rng = np.random.default_rng(0)
    train = [AlignedSample(f"t{i}", [np.column_stack([rng.normal(5, 3, 20), np.full(20, 4.0)])], np.arange(20))
             for i in range(4)]
    normed, stats = normalize(train)
    rows = np.concatenate([s.features[0] for s in normed])
    assert abs(rows[:, 0].mean()) < 1e-9
    assert np.array_equal(rows[:, 1], np.full(80, 4.0))
    dev = [AlignedSample("d", [np.column_stack([rng.normal(8, 3, 20), np.full(20, 4.0)])], np.arange(20))]
    dev_n, _ = normalize(dev, stats)
    assert abs(dev_n[0].features[0][:, 0].mean()) > 0.5


def test_normalize_ignores_padding():
    s = window(sample_of(7), 5, 5)
    normed, stats = normalize(s)
    assert np.array_equal(normed[1].features[0][2:], np.zeros((3, 2)))
    valid = np.concatenate([n.features[0][n.mask] for n in normed])
    assert np.allclose(valid.mean(axis=0), 0.0, atol=1e-9)


def test_normalize_dim_mismatch():
    _, stats = normalize([sample_of(5, d=2)])
    with pytest.raises(DataError):
        normalize([sample_of(5, d=3)], stats)


# -- synthetic --------------------------------------------------------------


def _probe_scores(train_x, train_y, test_x):
    A = np.column_stack([train_x, np.ones(len(train_x))])
    coef, *_ = np.linalg.lstsq(A, train_y, rcond=None)
    return np.column_stack([test_x, np.ones(len(test_x))]) @ coef


def test_synthetic_is_deterministic():
    spec = SyntheticSpec([4, 3], (5, 9), 10, 2, [0.3, 0.1], "intensity", seed=3)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for x, y in zip(a, b):
        assert all(np.array_equal(f, g) for f, g in zip(x.features, y.features))
        assert np.array_equal(x.labels, y.labels)
    c = generate_synthetic(SyntheticSpec([4, 3], (5, 9), 10, 2, [0.3, 0.1], "intensity", seed=4))
    assert not np.array_equal(a[0].features[0][:1], c[0].features[0][:1])


def test_synthetic_label_contracts():
    inten = generate_synthetic(SyntheticSpec([4], (6, 6), 5, 3, [0.0], "intensity"))
    assert all(s.labels.shape == (7,) and np.all((s.labels > 0) & (s.labels < 1)) for s in inten)
    series = generate_synthetic(SyntheticSpec([4], (6, 9), 5, 3, [0.0], "series"))
    assert all(s.labels.shape == (s.T, 2) and np.all(np.abs(s.labels) <= 1) for s in series)
    binary = generate_synthetic(SyntheticSpec([4], (6, 6), 50, 3, [0.0], "binary"))
    assert {float(s.labels[0]) for s in binary} == {0.0, 1.0}


@pytest.mark.parametrize("modality", [0, 1])
def test_zero_noise_linear_probe_is_perfect(modality):
    data = generate_synthetic(SyntheticSpec([16, 8], (20, 40), 200, 4, [0.0, 0.0], "binary", seed=1))
    x = np.stack([s.features[modality].mean(axis=0) for s in data])
    score = np.array([s.meta["latent_score"] for s in data])
    y = np.array([s.labels[0] for s in data])
    assert auc(_probe_scores(x, score, x), y) == 1.0


def test_huge_noise_probe_is_chance():
    data = generate_synthetic(SyntheticSpec([16, 16], (20, 20), 500, 4, [1e3, 0.0], "binary", seed=2))
    x = np.stack([s.features[0].mean(axis=0) for s in data])
    y = np.array([s.labels[0] for s in data])
    pred = _probe_scores(x[:250], y[:250], x[250:])
    assert 0.4 < auc(pred, y[250:]) < 0.6
    clean = np.stack([s.features[1].mean(axis=0) for s in data])
    assert auc(_probe_scores(clean[:250], y[:250], clean[250:]), y[250:]) > 0.9


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec([4, 4], noise=[0.1])
    with pytest.raises(ValueError):
        SyntheticSpec([4], noise=[-1.0])
    with pytest.raises(ValueError):
        SyntheticSpec([4], noise=[0.1], task="ordinal")


def test_to_arrays_and_batches():
    ws = window(sample_of(12, series=True), 4, 4)
    ds = to_arrays(ws)
    assert isinstance(ds, ArrayDataset)
    assert ds.inputs[0].shape == (3, 4, 2) and ds.targets.shape == (3, 4, 1) and ds.mask.shape == (3, 4)
    sizes = [len(b) for b in ds.batches(2, Rng(0))]
    assert sizes == [2, 1]
    with pytest.raises(DataError):
        to_arrays([sample_of(4), sample_of(5)])


# -- properties ---------------------------------------------------------------

PROPS = settings(max_examples=200, deadline=None)


@PROPS
@given(st.integers(1, 40), st.integers(1, 12), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_window_hop_equals_win_reconstructs(T, win, d, seed):
    f = np.random.default_rng(seed).normal(size=(T, d))
    s = AlignedSample("x", [f], 40 * np.arange(T))
    ws = window(s, win, win)
    assert len(ws) == -(-T // win)
    rebuilt = np.concatenate([w.features[0][w.mask] for w in ws])
    assert np.array_equal(rebuilt, f)


@PROPS
@given(st.integers(1, 30), st.sampled_from([10, 20, 40]), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_align_is_idempotent(n, step, hop_mult, seed):
    rng = np.random.default_rng(seed)
    hop = step * hop_mult
    a = table(step * np.arange(n * hop_mult) + int(rng.integers(0, 1000)), rng.normal(size=(n * hop_mult, 2)), "a")
    b = table(hop * np.arange(n + 2), rng.normal(size=(n + 2, 1)), "b")
    try:
        once = align_modalities([a, b], hop)
    except DataError:
        return
    tabs = [table(once.timestamps, f, nm) for f, nm in zip(once.features, "ab")]
    twice = align_modalities(tabs, hop)
    assert np.array_equal(twice.timestamps, once.timestamps)
    assert all(np.array_equal(x, y) for x, y in zip(twice.features, once.features))


@PROPS
@given(st.integers(2, 15), st.integers(1, 4), st.floats(-100, 100), st.floats(0.01, 100), st.integers(0, 2**31 - 1))
def test_normalize_round_trip(T, d, loc, scale, seed):
    rng = np.random.default_rng(seed)
    data = [AlignedSample(str(i), [rng.normal(loc, scale, size=(T, d))], np.arange(T)) for i in range(3)]
    normed, stats = normalize(data)
    back = denormalize(normed, stats)
    for x, y in zip(back, data):
        assert np.allclose(x.features[0], y.features[0], rtol=0, atol=1e-9)
