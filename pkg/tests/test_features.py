import itertools

import numpy as np
import pytest

from playnext import features as F
from playnext.errors import (
    DataFormatError,
    MissingFeatureError,
    ValidationError,
)


def frames(rows, song="s"):
    return F.TimbreFrames(song=song, frames=np.asarray(rows, dtype=float))


def vec12(*head):
    v = np.zeros(12)
    v[: len(head)] = head
    return v


# --- mean timbre -------------------------------------------------------------


def test_mean_timbre_single_frame_identity():
    v = np.arange(12.0)
    assert np.array_equal(F.mean_timbre(frames([v])), v)


def test_mean_timbre_symmetric_frames_cancel():
    v = np.linspace(-1, 1, 12)
    out = F.mean_timbre(frames([v, -v]))
    assert np.allclose(out, 0.0)


def test_mean_timbre_arithmetic():
    out = F.mean_timbre(frames([vec12(1.0), vec12(3.0)]))
    assert np.array_equal(out, vec12(2.0))


def test_mean_timbre_empty_raises():
    with pytest.raises(MissingFeatureError):
        F.mean_timbre(F.TimbreFrames(song="s", frames=np.empty((0, 12))))


def test_frames_shape_validated():
    with pytest.raises(ValidationError):
        F.TimbreFrames(song="s", frames=np.zeros((3, 11)))


# --- codebook fitting ----------------------------------------------------------


def _best_two_clustering(points):
    """Brute-force optimal 2-means over all bipartitions of the points."""
    n = len(points)
    best = (np.inf, None)
    for mask_bits in range(1, 2 ** (n - 1)):
        mask = np.array([(mask_bits >> i) & 1 for i in range(n)], dtype=bool)
        a, b = points[mask], points[~mask]
        if len(a) == 0 or len(b) == 0:
            continue
        wcss = ((a - a.mean(0)) ** 2).sum() + ((b - b.mean(0)) ** 2).sum()
        if wcss < best[0]:
            best = (wcss, (a.mean(0), b.mean(0)))
    return best


def test_codebook_two_separated_clouds_match_bruteforce(rng):
    cloud_a = rng.normal(0.0, 0.2, size=(5, 12)) + vec12(5.0)
    cloud_b = rng.normal(0.0, 0.2, size=(5, 12)) - vec12(5.0)
    points = np.vstack([cloud_a, cloud_b])
    wcss_opt, (m1, m2) = _best_two_clustering(points)
    book = F.fit_codebook(points, k=2, seed=0)
    got = sorted(book.centroids.tolist())
    want = sorted([m1.tolist(), m2.tolist()])
    assert np.allclose(got, want, atol=1e-6)
    assert abs(book.inertia_history[-1] - wcss_opt) < 1e-9


def test_codebook_saturated_k_equals_points(rng):
    points = rng.normal(size=(6, 12))
    book = F.fit_codebook(points, k=6, seed=1)
    assert book.inertia_history[-1] < 1e-18
    assert np.allclose(np.sort(book.centroids, axis=0), np.sort(points, axis=0))


def test_codebook_deterministic(rng):
    points = rng.normal(size=(40, 12))
    a = F.fit_codebook(points, k=5, seed=7)
    b = F.fit_codebook(points, k=5, seed=7)
    assert np.array_equal(a.centroids, b.centroids)


def test_codebook_requires_enough_frames(rng):
    with pytest.raises(ValidationError):
        F.fit_codebook(rng.normal(size=(3, 12)), k=4, seed=0)


def test_codebook_inertia_monotone(rng):
    points = rng.normal(size=(120, 12))
    book = F.fit_codebook(points, k=8, seed=3)
    hist = book.inertia_history
    assert len(hist) >= 1
    assert all(a >= b - 1e-9 for a, b in zip(hist, hist[1:]))


# --- vector quantization ---------------------------------------------------------


def test_vq_degenerate_assignment(rng):
    centroids = rng.normal(size=(8, 12)) * 10
    book = F.Codebook(centroids=centroids)
    f = frames([centroids[5] + rng.normal(0, 1e-3, 12) for _ in range(4)])
    hist = F.vq_histogram(f, book)
    assert hist[5] == 4 and hist.sum() == 4


def test_vq_conserves_mass(rng):
    book = F.Codebook(centroids=rng.normal(size=(6, 12)))
    f = frames(rng.normal(size=(10, 12)))
    assert F.vq_histogram(f, book).sum() == 10


def test_vq_tie_goes_to_lower_index():
    centroids = np.zeros((8, 12))
    centroids[2, 0] = -1.0
    centroids[7, 0] = 1.0
    centroids[1, 0] = 5.0  # park the others far away
    centroids[0, 0] = 5.0
    for i in (3, 4, 5, 6):
        centroids[i, 0] = 5.0
    book = F.Codebook(centroids=centroids)
    hist = F.vq_histogram(frames([np.zeros(12)]), book)
    assert hist[2] == 1 and hist[7] == 0


def test_vq_empty_frames():
    book = F.Codebook(centroids=np.zeros((2, 12)))
    with pytest.raises(MissingFeatureError):
        F.vq_histogram(F.TimbreFrames(song="s", frames=np.empty((0, 12))), book)


# --- tag features -----------------------------------------------------------------


def make_dict(**words):
    dim = len(next(iter(words.values())))
    return F.EmbeddingDictionary(
        vectors={w: np.asarray(v, dtype=float) for w, v in words.items()}, dim=dim
    )


def test_tag_single_tag_weight_renormalized():
    d = make_dict(rock=[1.0, 2.0, 3.0])
    ann = F.TagAnnotation(song="s", tags=[("rock", 100.0)])
    assert np.array_equal(F.tag_feature(ann, d), d["rock"])


def test_tag_compound_tag_word_average():
    d = make_dict(pop=[2.0, 0.0], rock=[0.0, 2.0])
    ann = F.TagAnnotation(song="s", tags=[("pop rock", 1.0)])
    assert np.array_equal(F.tag_feature(ann, d), np.array([1.0, 1.0]))


def test_tag_weighted_mean():
    d = make_dict(a=[1.0, 0.0], b=[0.0, 1.0])
    ann = F.TagAnnotation(song="s", tags=[("a", 1.0), ("b", 3.0)])
    assert np.allclose(F.tag_feature(ann, d), [0.25, 0.75])


def test_tag_out_of_vocabulary_dropped():
    d = make_dict(a=[1.0, 0.0])
    ann = F.TagAnnotation(song="s", tags=[("a", 1.0), ("zzz", 50.0)])
    assert np.array_equal(F.tag_feature(ann, d), [1.0, 0.0])


def test_tag_weight_scale_invariance(rng):
    d = make_dict(a=[1.0, 2.0], b=[3.0, -1.0], c=[0.5, 0.5])
    tags = [("a", 1.0), ("b", 2.5), ("c", 0.25)]
    base = F.tag_feature(F.TagAnnotation(song="s", tags=tags), d)
    for scale in (0.1, 7.0, 1234.5):
        scaled = [(t, w * scale) for t, w in tags]
        out = F.tag_feature(F.TagAnnotation(song="s", tags=scaled), d)
        assert np.allclose(out, base, atol=1e-12)


def test_tag_no_usable_tag_raises():
    d = make_dict(a=[1.0, 0.0])
    with pytest.raises(MissingFeatureError):
        F.tag_feature(F.TagAnnotation(song="s", tags=[("zzz", 1.0)]), d)
    with pytest.raises(MissingFeatureError):
        F.tag_feature(F.TagAnnotation(song="s", tags=[("a", 0.0)]), d)


# --- preprocessing ------------------------------------------------------------------


def fm(values, ids=None, kind="test"):
    values = np.asarray(values, dtype=float)
    ids = ids or [f"s{i}" for i in range(values.shape[0])]
    return F.FeatureMatrix(kind=kind, ids=ids, values=values)


def test_standardize_l2_hand_computed():
    out = F.preprocess(fm([[1.0, 0.0], [3.0, 0.0]]), "standardize_l2")
    assert np.allclose(out.values, [[-1.0, 0.0], [1.0, 0.0]])
    assert out.preprocessing == ("standardize", "l2")


def test_standardize_uses_training_rows_only():
    m = fm([[0.0, 1.0], [2.0, 1.0], [100.0, 1.0]], ids=["a", "b", "c"])
    out = F.standardize(m, train_ids={"a", "b"})
    # mean 1, std 1 over the training rows; row c transformed with the same
    assert np.allclose(out.values[:, 0], [-1.0, 1.0, 99.0])
    # zero-variance dimension pinned at zero
    assert np.allclose(out.values[:, 1], 0.0)


def test_standardize_training_means_are_zero(rng):
    m = fm(rng.normal(2.0, 3.0, size=(20, 6)))
    out = F.standardize(m)
    assert np.abs(out.values.mean(axis=0)).max() < 1e-9


def test_l2_rows_unit_or_zero(rng):
    vals = rng.normal(size=(10, 4))
    vals[3] = 0.0
    out = F.preprocess(fm(vals), "standardize_l2")
    norms = np.linalg.norm(out.values, axis=1)
    assert np.all((np.abs(norms - 1.0) < 1e-9) | (norms == 0.0))


def test_l1_histogram_scaling():
    out = F.preprocess(fm([[2.0, 0.0, 6.0, 2.0]]), "l1")
    assert np.allclose(out.values, [[0.2, 0.0, 0.6, 0.2]])


def test_l1_idempotent(rng):
    m = fm(np.abs(rng.normal(size=(6, 5))))
    once = F.preprocess(m, "l1")
    twice = F.preprocess(once, "l1")
    assert np.allclose(once.values, twice.values)


def test_zero_row_flagged():
    vals = np.array([[1.0, 1.0], [0.0, 0.0]])
    out = F.l1_normalize(fm(vals, ids=["ok", "zero"]))
    assert out.zero_rows == ("zero",)
    assert np.array_equal(out.values[1], [0.0, 0.0])


def test_unknown_scheme():
    with pytest.raises(ValidationError):
        F.preprocess(fm([[1.0]]), "zscore")


# --- concatenation -----------------------------------------------------------------


def test_concat_three_blocks_dims_sum(rng):
    parts = [
        fm(rng.normal(size=(4, 200)), ids=list("abcd"), kind=f"k{i}")
        for i in range(3)
    ]
    out = F.concat(parts)
    assert out.dim == 600
    assert out.kind == "k0+k1+k2"


def test_concat_single_identity(rng):
    m = fm(rng.normal(size=(3, 5)))
    assert F.concat([m]) is m


def test_concat_mismatched_songs_rejected(rng):
    a = fm(rng.normal(size=(3, 2)), ids=["x", "y", "z"])
    b = fm(rng.normal(size=(3, 2)), ids=["x", "y", "w"])
    with pytest.raises(ValidationError):
        F.concat([a, b])


def test_concat_rows_are_juxtaposed(rng):
    a = fm(rng.normal(size=(3, 2)), ids=["x", "y", "z"], kind="a")
    b = fm(rng.normal(size=(3, 3)), ids=["z", "x", "y"], kind="b")
    out = F.concat([a, b])
    for s in ("x", "y", "z"):
        assert np.array_equal(out.row(s), np.concatenate([a.row(s), b.row(s)]))


# --- file formats --------------------------------------------------------------------


def test_import_echo(tmp_path, rng):
    vals = rng.normal(size=(3, 200))
    path = tmp_path / "f.tsv"
    with open(path, "w") as fh:
        for i, row in enumerate(vals):
            fh.write(f"s{i} " + " ".join(repr(float(v)) for v in row) + "\n")
    m, skipped = F.import_precomputed(path, kind="ivectors")
    assert skipped == 0
    assert m.values.shape == (3, 200)
    assert np.allclose(m.values, vals)


def test_import_ragged_row_rejected(tmp_path):
    path = tmp_path / "f.tsv"
    path.write_text("a 1.0 2.0\nb 1.0\n")
    with pytest.raises(DataFormatError) as err:
        F.import_precomputed(path, kind="x")
    assert "ragged" in str(err.value)


def test_import_unknown_song_skipped(tmp_path):
    path = tmp_path / "f.tsv"
    path.write_text("known 1.0 2.0\nstranger 3.0 4.0\n")
    m, skipped = F.import_precomputed(path, kind="x", known_ids={"known"})
    assert skipped == 1
    assert m.ids == ["known"]


def test_feature_matrix_roundtrip(tmp_path, rng):
    m = F.preprocess(fm(rng.normal(size=(5, 7)), kind="mean-timbre"),
                     "standardize_l2")
    path = tmp_path / "m.tsv"
    F.save_feature_matrix(m, path, config_digest="d1")
    again = F.load_feature_matrix(path)
    assert again.kind == m.kind
    assert again.preprocessing == m.preprocessing
    assert np.array_equal(again.values, m.values)
    assert again.ids == m.ids


def test_loaders(tmp_path):
    tpath = tmp_path / "frames.txt"
    with open(tpath, "w") as fh:
        fh.write("s1 " + " ".join(["0.5"] * 12) + "\n")
        fh.write("s1 " + " ".join(["1.5"] * 12) + "\n")
        fh.write("s2 " + " ".join(["2.0"] * 12) + "\n")
    loaded = F.load_timbre_frames(tpath)
    assert loaded["s1"].frames.shape == (2, 12)
    assert np.allclose(F.mean_timbre(loaded["s1"]), 1.0)

    gpath = tmp_path / "tags.tsv"
    gpath.write_text("s1\tindie rock\t80\ns1\tmellow\t20\ns2\tjazz\t100\n")
    anns = F.load_tag_annotations(gpath)
    assert anns["s1"].tags == [("indie rock", 80.0), ("mellow", 20.0)]

    epath = tmp_path / "emb.txt"
    epath.write_text("rock 1.0 0.0\njazz 0.0 1.0\n")
    d = F.load_embedding_dictionary(epath)
    assert d.dim == 2 and "rock" in d


def test_embedding_arity_enforced(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("rock 1.0 0.0\njazz 0.0\n")
    with pytest.raises(DataFormatError):
        F.load_embedding_dictionary(path)


def test_build_tag_features_artist_level():
    d = make_dict(loud=[1.0, 0.0], soft=[0.0, 1.0])
    anns = {
        "artA": F.TagAnnotation(song="artA", tags=[("loud", 1.0)]),
        "artB": F.TagAnnotation(song="artB", tags=[("soft", 1.0)]),
    }
    artist_by_song = {"s1": "artA", "s2": "artA", "s3": "artB", "s4": "artC"}
    m = F.build_tag_features(anns, d, kind="tags-artist",
                             artist_by_song=artist_by_song)
    assert set(m.ids) == {"s1", "s2", "s3"}  # s4's artist has no tags
    assert np.array_equal(m.row("s1"), m.row("s2"))
    assert np.array_equal(m.row("s3"), [0.0, 1.0])


def test_subset_missing_song_raises(rng):
    m = fm(rng.normal(size=(2, 3)), ids=["a", "b"])
    with pytest.raises(MissingFeatureError):
        m.subset(["a", "nope"])
