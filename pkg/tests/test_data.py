import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from palmcpn.data import (PalmSample, SplitPolicy, SyntheticPalmSpec, embed_in_hand, format_row, generate_synthetic,
                          identity_curves, load_raster, parse_row, read_manifest, relabel, save_raster,
                          split_dataset, stack_normalized, write_corpus, write_manifest)
from palmcpn.roi import Keypoints, extract_roi, locate_roi


def test_generator_is_bit_reproducible():
    spec = SyntheticPalmSpec(n_identities=5, seed=3)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    c = generate_synthetic(SyntheticPalmSpec(n_identities=5, seed=4))
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, c))


def test_zero_jitter_gives_identical_images():
    spec = SyntheticPalmSpec(n_identities=3, jitter_translation=0, jitter_rotation=0, jitter_contrast=0)
    samples = generate_synthetic(spec)
    for ident in range(3):
        imgs = [s.image for s in samples if s.identity == ident]
        assert all(np.array_equal(imgs[0], im) for im in imgs[1:])


def test_corpus_layout():
    samples = generate_synthetic(SyntheticPalmSpec(n_identities=4, images_per_identity=6, n_enroll=3))
    assert len(samples) == 24
    assert [s.stage for s in samples[:6]] == ["enrollment"] * 3 + ["probe"] * 3
    assert all(s.image.dtype == np.uint8 and s.image.shape == (64, 64) for s in samples)


def test_identities_are_separated():
    spec = SyntheticPalmSpec(n_identities=15)
    curves = identity_curves(spec)
    for i in range(len(curves)):
        for j in range(i):
            gap = max(np.abs(a.signature() - b.signature()).max() for a, b in zip(curves[i], curves[j]))
            assert gap >= spec.min_separation


def test_jitter_must_stay_below_separation():
    with pytest.raises(ValueError):
        SyntheticPalmSpec(jitter_translation=5.0, min_separation=4.0)


def _raw_pixel_rank1(samples):
    x = stack_normalized([s.image for s in samples]).reshape(len(samples), -1).astype(np.float64)
    ids = np.array([s.identity for s in samples])
    enr = np.array([s.stage == "enrollment" for s in samples])
    hits = 0
    probes = np.flatnonzero(~enr)
    for p in probes:
        best, best_id = np.inf, -1
        for g in np.flatnonzero(enr):
            d = float(((x[p] - x[g]) ** 2).sum())
            if d < best:
                best, best_id = d, ids[g]
        hits += best_id == ids[p]
    return hits / len(probes)


@pytest.mark.parametrize("seed", [0, 1])
def test_raw_pixel_nearest_neighbour_rank1(seed):
    samples = generate_synthetic(SyntheticPalmSpec(n_identities=20, images_per_identity=6, seed=seed))
    assert _raw_pixel_rank1(samples) >= 0.8


# ----------------------------------------------------------------- manifests
def _sample(**kw):
    base = dict(identity=3, stage="probe", side="right", path="a/b.png")
    base.update(kw)
    return PalmSample(**base)


def test_sample_validation():
    with pytest.raises(ValueError):
        _sample(identity=-1)
    with pytest.raises(ValueError):
        _sample(stage="stage-one")
    with pytest.raises(ValueError):
        _sample(side="up")
    with pytest.raises(ValueError):
        PalmSample.from_row({"identity": 1, "colour": "x"})


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["enrollment", "probe"]), st.sampled_from(["left", "right"]),
       st.booleans(), st.booleans(), st.booleans())
def test_row_roundtrip(identity, stage, side, with_kp, with_subject, mirrored):
    kp = Keypoints((1.5, 2), (3, 4.25), (5, 6), (7, 8), mirrored=mirrored) if with_kp else None
    s = PalmSample(identity, stage, side, path=f"img/{identity}.png", keypoints=kp,
                   subject=identity // 2 if with_subject else None)
    line = format_row(s)
    assert format_row(parse_row(line)) == line
    assert parse_row(line) == s


def test_manifest_file_roundtrip(tmp_path):
    rows = [_sample(identity=i, path=f"x{i}.png") for i in range(4)]
    path = tmp_path / "m.jsonl"
    write_manifest(path, rows)
    text = path.read_text()
    assert read_manifest(path) == rows
    write_manifest(path, read_manifest(path))
    assert path.read_text() == text
    assert json.loads(text.splitlines()[0])["identity"] == 0


def test_manifest_error_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"identity": 1}\n{"identity": -4}\n')
    with pytest.raises(ValueError, match=":2:"):
        read_manifest(path)


def test_raster_roundtrip_and_corpus(tmp_path):
    img = (np.arange(64 * 64) % 256).astype(np.uint8).reshape(64, 64)
    save_raster(tmp_path / "a.png", img)
    assert np.array_equal(load_raster(tmp_path / "a.png"), img)
    samples = generate_synthetic(SyntheticPalmSpec(n_identities=2, images_per_identity=3, n_enroll=2))
    manifest = write_corpus(samples, tmp_path / "corpus")
    back = read_manifest(manifest)
    assert len(back) == 6
    for s, b in zip(samples, back):
        assert np.array_equal(b.load(manifest.parent), s.image)
        assert (b.identity, b.stage, b.side) == (s.identity, s.stage, s.side)


def test_hand_embedding_recovers_roi():
    sample = generate_synthetic(SyntheticPalmSpec(n_identities=1, images_per_identity=1, n_enroll=1))[0]
    canvas, kp = embed_in_hand(sample.image, np.random.default_rng(0))
    kp.check_inside(canvas.shape)
    roi = extract_roi(canvas, locate_roi(kp), 64, normalize=False)
    a = sample.image.astype(float)
    inner = (slice(4, -4), slice(4, -4))
    assert np.corrcoef(a[inner].ravel(), roi[inner].ravel())[0, 1] > 0.97


# -------------------------------------------------------------------- splits
def _population(n_subjects, palms_per_subject=2, images=1):
    out = []
    for subj in range(n_subjects):
        for p in range(palms_per_subject):
            for _ in range(images):
                out.append(PalmSample(subj * palms_per_subject + p, side=("left", "right")[p], subject=subj))
    return out


def test_fraction_split_counts():
    samples = [PalmSample(i) for i in range(10)]
    train, test = split_dataset(samples, SplitPolicy("fraction", fraction=0.8, seed=1))
    assert len({s.identity for s in train}) == 8 and len({s.identity for s in test}) == 2
    again = split_dataset(samples, SplitPolicy("fraction", fraction=0.8, seed=1))
    assert [s.identity for s in again[0]] == [s.identity for s in train]


def test_subject_level_split_counts():
    samples = _population(1167)
    assert len({s.identity for s in samples}) == 2334
    train, test = split_dataset(samples, SplitPolicy("fraction", count=931, seed=0))
    assert len({s.identity for s in train}) == 1862
    assert len({s.identity for s in test}) == 472
    # both palms of a person land on the same side
    assert not {s.subject for s in train} & {s.subject for s in test}


def test_first_n_split():
    samples = [PalmSample(i) for i in range(6)]
    train, test = split_dataset(samples, SplitPolicy("first-n", count=4))
    assert {s.identity for s in train} == {0, 1, 2, 3}
    with pytest.raises(ValueError):
        split_dataset(samples, SplitPolicy("first-n", count=6))


def test_explicit_split():
    samples = [PalmSample(i) for i in range(5)]
    train, test = split_dataset(samples, SplitPolicy("explicit", train_ids=(0, 1), test_ids=(3, 4)))
    assert {s.identity for s in test} == {3, 4}
    with pytest.raises(ValueError):
        split_dataset(samples, SplitPolicy("explicit", train_ids=(0, 1), test_ids=(1, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.floats(0.0, 0.95), st.integers(0, 1000))
def test_splits_are_identity_disjoint(n, fraction, seed):
    samples = _population(n, images=2)
    policy = SplitPolicy("fraction", fraction=fraction, seed=seed)
    if round(fraction * n) >= n:
        with pytest.raises(ValueError):
            split_dataset(samples, policy)
        return
    train, test = split_dataset(samples, policy)
    assert not {s.identity for s in train} & {s.identity for s in test}
    assert len(train) + len(test) == len(samples)


def test_relabel_is_contiguous():
    labels, mapping = relabel([PalmSample(7), PalmSample(3), PalmSample(7)])
    assert labels.tolist() == [1, 0, 1] and mapping == {3: 0, 7: 1}
