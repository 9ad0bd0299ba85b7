import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twostream.io import BEHAVIOURS
from twostream.preprocessing import (AnnotationTrack, FrameSequence, augment, build_test_clips,
                                     build_training_clips, center_crop, filter_pseudo_anomaly,
                                     gamma_correct, hflip_augment, label_clips, prepare_streams,
                                     resize_grayscale, split_clips, training_clips)

from oracles import gaussian_blob


def random_track(rng, n, target="hang", p_start=0.02):
    """Walk/rest background with randomly placed target intervals."""
    labels = list(rng.choice(["walk", "rest", "eat"], n))
    i = 0
    while i < n:
        if rng.random() < p_start:
            length = int(rng.integers(1, 30))
            labels[i:i + length] = [target] * len(labels[i:i + length])
            i += length
        i += 1
    return AnnotationTrack(labels[:n])


def moving_blob_video(n=12, speed=1.0):
    frames = [0.1 + 0.8 * gaussian_blob(32, 32, 16, 10 + speed * t, 3.0) for t in range(n)]
    return FrameSequence(np.stack(frames), fps=25.0)


# --- per-frame operations ------------------------------------------------------------


def test_resize_examples():
    img = np.random.default_rng(0).random((32, 32)).astype(np.float32)
    np.testing.assert_array_equal(resize_grayscale(img), img)
    out = resize_grayscale(np.full((48, 80), 0.6))
    assert out.shape == (32, 32) and np.allclose(out, 0.6, atol=1e-6)
    with pytest.raises(ValueError):
        resize_grayscale(np.zeros((0, 5)))


def test_gamma_examples():
    img = np.random.default_rng(1).random((4, 4)).astype(np.float32)
    np.testing.assert_allclose(gamma_correct(img, 1.0), img)
    assert gamma_correct(np.array([0.25]), 0.5)[0] == pytest.approx(0.5)
    for g in (0.3, 0.8, 2.5):
        np.testing.assert_array_equal(gamma_correct(np.array([0.0, 1.0]), g), [0.0, 1.0])
    with pytest.raises(ValueError):
        gamma_correct(img, 0.0)


@settings(max_examples=30)
@given(st.floats(0.05, 5.0), st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_gamma_stays_in_unit_interval(gamma, vals):
    out = gamma_correct(np.array(vals), gamma)
    assert np.all((out >= 0) & (out <= 1))


def test_crop_examples():
    ramp = np.repeat(np.arange(32.0)[:, None], 32, axis=1)
    out = center_crop(ramp)
    assert out.shape == (24, 32)
    np.testing.assert_array_equal(out[0], ramp[4])
    np.testing.assert_array_equal(out[-1], ramp[27])
    np.testing.assert_array_equal(center_crop(np.full((32, 32), 0.2)), 0.2)
    padded = np.concatenate([ramp[:4], out, ramp[28:]])
    np.testing.assert_array_equal(padded, ramp)
    with pytest.raises(ValueError):
        center_crop(np.zeros((20, 32)))


def test_flip_examples():
    rng = np.random.default_rng(2)
    gray = rng.random((2, 8, 24, 32, 1)).astype(np.float32)
    flow = rng.random((2, 8, 24, 32, 2)).astype(np.float32)
    g2, f2 = hflip_augment(*hflip_augment(gray, flow))
    np.testing.assert_array_equal(g2, gray)
    np.testing.assert_allclose(f2, flow, atol=1e-6)
    half = np.zeros((1, 1, 24, 32, 1), np.float32)
    half[..., :16, :] = 1.0
    g, _ = hflip_augment(half, np.full((1, 1, 24, 32, 2), 0.5, np.float32))
    assert g[..., 16:, :].min() == 1.0 and g[..., :16, :].max() == 0.0


def test_flip_reverses_horizontal_motion():
    streams = prepare_streams(moving_blob_video())
    u = streams.flow[1:, ..., 0] - 0.5
    assert u.mean() > 0.005
    _, flipped = hflip_augment(streams.gray[..., None], streams.flow)
    uf = flipped[1:, ..., 0] - 0.5
    assert uf.mean() < -0.005
    np.testing.assert_allclose(flipped[..., 1], streams.flow[..., 1][..., ::-1])


# --- clip construction -----------------------------------------------------------------


@pytest.mark.parametrize("n,expected", [(80, 2), (79, 2), (39, 0)])
def test_training_clip_counts(n, expected):
    clips = build_training_clips(n)
    assert clips.shape == (expected, 8)
    if expected:
        np.testing.assert_array_equal(clips[0], np.arange(0, 40, 5))


@pytest.mark.parametrize("n,expected", [(55_912, 6989), (8, 1), (15, 1)])
def test_test_clip_counts(n, expected):
    clips = build_test_clips(n)
    assert len(clips) == expected
    np.testing.assert_array_equal(clips[-1], np.arange(8 * expected - 8, 8 * expected))


def test_filter_examples():
    clips = build_training_clips(200)
    none = AnnotationTrack(["walk"] * 200)
    assert len(filter_pseudo_anomaly(clips, none, "hang")) == len(clips)
    everything = AnnotationTrack(["hang"] * 200)
    assert len(filter_pseudo_anomaly(clips, everything, "hang")) == 0


def test_label_examples():
    clips = np.arange(16).reshape(2, 8)
    labels = ["walk"] * 16
    labels[11] = "groom"
    np.testing.assert_array_equal(label_clips(clips, AnnotationTrack(labels), "groom"), [False, True])
    assert not label_clips(clips, AnnotationTrack(labels), "groom", rule="majority").any()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(0, 600), target=st.sampled_from(BEHAVIOURS))
def test_filter_and_labels_match_brute_force(seed, n, target):
    rng = np.random.default_rng(seed)
    track = random_track(rng, n, target)
    clips = build_training_clips(n)
    kept = filter_pseudo_anomaly(clips, track, target)
    brute_kept = [c for c in clips.tolist() if all(track.labels[i] != target for i in c)]
    assert kept.tolist() == brute_kept
    brute_labels = [any(track.labels[i] == target for i in c) for c in clips.tolist()]
    assert label_clips(clips, track, target).tolist() == brute_labels
    # filtered clips never overlap the anomalous label set
    assert not label_clips(kept, track, target).any()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000), extra=st.integers(1, 50))
def test_clip_count_monotone_in_target_frames(seed, extra):
    rng = np.random.default_rng(seed)
    track = random_track(rng, 400)
    labels = list(track.labels)
    more = labels.copy()
    for i in rng.choice(400, extra, replace=False):
        more[i] = "hang"
    clips = build_training_clips(400)
    assert len(filter_pseudo_anomaly(clips, AnnotationTrack(more), "hang")) <= \
        len(filter_pseudo_anomaly(clips, AnnotationTrack(labels), "hang"))


@settings(max_examples=30)
@given(n=st.integers(0, 2000), seed=st.integers(0, 1000))
def test_split_disjoint_and_reproducible(n, seed):
    tr, va = split_clips(n, 0.2, seed)
    assert set(tr).isdisjoint(va) and len(tr) + len(va) == n
    assert sorted(set(tr) | set(va)) == list(range(n))
    assert len(va) == round(0.2 * n)
    tr2, va2 = split_clips(n, 0.2, seed)
    np.testing.assert_array_equal(tr, tr2)
    np.testing.assert_array_equal(va, va2)


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split_clips(10, 1.0)


def test_unknown_label_rejected():
    with pytest.raises(ValueError):
        AnnotationTrack(["walk", "fly"])
    with pytest.raises(ValueError):
        AnnotationTrack(["walk"]).mask("fly")


# --- whole pipeline -----------------------------------------------------------------------


def test_pipeline_shapes_ranges_and_exclusion():
    rng = np.random.default_rng(3)
    frames = rng.random((120, 40, 48)).astype(np.float32)
    streams = prepare_streams(FrameSequence(frames))
    assert streams.gray.shape == (120, 24, 32) and streams.flow.shape == (120, 24, 32, 2)
    assert np.all(streams.flow[0] == 0.5)
    track = random_track(rng, 120, p_start=0.05)
    batch = augment(training_clips(streams, track, "hang"))
    assert batch.gray.shape[1:] == (8, 24, 32, 1) and batch.flow.shape[1:] == (8, 24, 32, 2)
    for arr in (streams.gray, streams.flow, batch.gray, batch.flow):
        assert arr.min() >= 0 and arr.max() <= 1
    hang = track.mask("hang")
    assert not hang[batch.frames].any()
    assert batch.flipped.sum() == len(batch) // 2
