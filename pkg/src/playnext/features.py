"""Per-song feature construction.

Three feature families are built here: the mean of a song's timbral frames,
a vector-quantization histogram of those frames over a k-means codebook,
and a relevance-weighted average of tag word embeddings. Externally
computed vectors (e.g. utterance-style timbre embeddings or listening-log
factors) enter through :func:`import_precomputed`. Preprocessing follows
feature nature: dense features are standardized and L2-normalized,
histogram features only L1-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataFormatError, MissingFeatureError, ValidationError

TIMBRE_DIM = 12
CODEBOOK_SIZE = 200
EMBEDDING_DIM = 200
KMEANS_TOL = 1e-6
KMEANS_MAX_ITER = 300


@dataclass
class TimbreFrames:
    """Frame-level timbral coefficients of one song, shape (n_frames, 12)."""

    song: str
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != TIMBRE_DIM:
            raise ValidationError(
                f"song {self.song!r}: frames must be (n, {TIMBRE_DIM}), "
                f"got {self.frames.shape}"
            )


@dataclass
class Codebook:
    """K-means centroids over pooled timbral frames, plus the per-iteration
    within-cluster-sum-of-squares trace of the fit."""

    centroids: np.ndarray
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class TagAnnotation:
    """Social tags of one song (or artist) with relevance weights."""

    song: str
    tags: list[tuple[str, float]]


@dataclass
class EmbeddingDictionary:
    """Word-to-vector mapping with a fixed dimension across entries."""

    vectors: dict[str, np.ndarray]
    dim: int

    def __contains__(self, word: str) -> bool:
        return word in self.vectors

    def __getitem__(self, word: str) -> np.ndarray:
        return self.vectors[word]


@dataclass
class FeatureMatrix:
    """Dense song-by-dimension matrix with a named kind and a record of the
    transforms applied to it."""

    kind: str
    ids: list[str]
    values: np.ndarray
    preprocessing: tuple[str, ...] = ()
    zero_rows: tuple[str, ...] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("feature values must be a 2-d matrix")
        if len(self.ids) != self.values.shape[0]:
            raise ValidationError("id list and value rows disagree")
        self._index = {s: i for i, s in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValidationError("duplicate song ids in feature matrix")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __contains__(self, song: str) -> bool:
        return song in self._index

    def row(self, song: str) -> np.ndarray:
        try:
            return self.values[self._index[song]]
        except KeyError:
            raise MissingFeatureError(f"no {self.kind} feature for song {song!r}") from None

    def subset(self, ids: list[str]) -> "FeatureMatrix":
        """Rows for the given songs, in the given order."""
        missing = [s for s in ids if s not in self._index]
        if missing:
            raise MissingFeatureError(
                f"no {self.kind} feature for {len(missing)} song(s), "
                f"first missing: {missing[0]!r}"
            )
        rows = self.values[[self._index[s] for s in ids]]
        return replace(self, ids=list(ids), values=rows,
                       zero_rows=tuple(s for s in self.zero_rows if s in set(ids)))

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "dim": int(self.dim),
            "preprocessing": list(self.preprocessing),
        }


# --- timbre features ------------------------------------------------------


def mean_timbre(frames: TimbreFrames) -> np.ndarray:
    """Componentwise mean of a song's timbral frames."""
    if frames.frames.shape[0] == 0:
        raise MissingFeatureError(f"song {frames.song!r} has no timbre frames")
    return frames.frames.mean(axis=0)


def _nearest_centroid(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the closest centroid per point; exact squared distances so
    ties resolve to the lowest centroid index."""
    n = points.shape[0]
    out = np.empty(n, dtype=np.int64)
    chunk = max(1, 2 ** 21 // max(1, centroids.shape[0] * centroids.shape[1]))
    for start in range(0, n, chunk):
        block = points[start : start + chunk]
        d2 = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        out[start : start + chunk] = np.argmin(d2, axis=1)
    return out


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # All remaining mass sits on chosen centroids; fall back to uniform.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def fit_codebook(
    all_frames: np.ndarray,
    k: int = CODEBOOK_SIZE,
    seed: int = 0,
    tol: float = KMEANS_TOL,
    max_iter: int = KMEANS_MAX_ITER,
) -> Codebook:
    """Lloyd's k-means over the pooled frames with k-means++ seeding.

    Converges when the largest centroid shift drops below ``tol`` or after
    ``max_iter`` iterations. Empty clusters are reseeded to the point
    currently farthest from its assigned centroid, which keeps the
    within-cluster sum of squares non-increasing.
    """
    points = np.asarray(all_frames, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError("pooled frames must form a 2-d array")
    if points.shape[0] < k:
        raise ValidationError(
            f"need at least k={k} frames to fit a codebook, got {points.shape[0]}"
        )
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    history: list[float] = []
    for _ in range(max_iter):
        assign = _nearest_centroid(points, centroids)
        residual = points - centroids[assign]
        history.append(float((residual ** 2).sum()))
        new_centroids = centroids.copy()
        for j in range(k):
            members = points[assign == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        empty = [j for j in range(k) if not (assign == j).any()]
        if empty:
            d2 = (residual ** 2).sum(axis=1)
            order = np.argsort(-d2)
            for rank, j in enumerate(empty):
                new_centroids[j] = points[order[rank]]
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if shift < tol:
            break
    return Codebook(centroids=centroids, inertia_history=history)


def vq_histogram(frames: TimbreFrames, codebook: Codebook) -> np.ndarray:
    """Count of the song's frames assigned to each codebook centroid."""
    if frames.frames.shape[0] == 0:
        raise MissingFeatureError(f"song {frames.song!r} has no timbre frames")
    assign = _nearest_centroid(frames.frames, codebook.centroids)
    return np.bincount(assign, minlength=codebook.k).astype(np.float64)


# --- tag features ---------------------------------------------------------


def tag_feature(annotation: TagAnnotation, dictionary: EmbeddingDictionary) -> np.ndarray:
    """Relevance-weighted average of the song's tag embeddings.

    A compound tag ("pop rock") contributes the unweighted mean of its
    in-dictionary word vectors. Tags with no in-dictionary word are dropped
    and the relevance weights renormalized over what remains.
    """
    usable: list[tuple[np.ndarray, float]] = []
    for tag, weight in annotation.tags:
        if weight < 0:
            raise ValidationError(
                f"song {annotation.song!r}: negative weight for tag {tag!r}"
            )
        words = [w for w in tag.split() if w in dictionary]
        if not words:
            continue
        vec = np.mean([dictionary[w] for w in words], axis=0)
        usable.append((vec, weight))
    total = sum(w for _, w in usable)
    if not usable or total <= 0:
        raise MissingFeatureError(
            f"song {annotation.song!r} has no usable tag with positive weight"
        )
    out = np.zeros(dictionary.dim)
    for vec, weight in usable:
        out += (weight / total) * vec
    return out


# --- preprocessing --------------------------------------------------------


def standardize(m: FeatureMatrix, train_ids: set[str] | None = None) -> FeatureMatrix:
    """Zero-mean unit-variance per dimension, statistics from the training
    rows only. Zero-variance dimensions are left at zero everywhere."""
    if train_ids is None:
        stat_rows = m.values
    else:
        keep = [i for i, s in enumerate(m.ids) if s in train_ids]
        if not keep:
            raise ValidationError("no training rows available for standardization")
        stat_rows = m.values[keep]
    mean = stat_rows.mean(axis=0)
    std = stat_rows.std(axis=0)
    values = m.values - mean
    nonzero = std > 0
    values[:, nonzero] /= std[nonzero]
    values[:, ~nonzero] = 0.0
    return replace(m, values=values, preprocessing=m.preprocessing + ("standardize",))


def l2_normalize(m: FeatureMatrix) -> FeatureMatrix:
    norms = np.linalg.norm(m.values, axis=1)
    zero = norms == 0
    values = m.values.copy()
    values[~zero] /= norms[~zero, None]
    flagged = tuple(s for s, z in zip(m.ids, zero) if z)
    return replace(
        m,
        values=values,
        preprocessing=m.preprocessing + ("l2",),
        zero_rows=tuple(sorted(set(m.zero_rows) | set(flagged))),
    )


def l1_normalize(m: FeatureMatrix) -> FeatureMatrix:
    norms = np.abs(m.values).sum(axis=1)
    zero = norms == 0
    values = m.values.copy()
    values[~zero] /= norms[~zero, None]
    flagged = tuple(s for s, z in zip(m.ids, zero) if z)
    return replace(
        m,
        values=values,
        preprocessing=m.preprocessing + ("l1",),
        zero_rows=tuple(sorted(set(m.zero_rows) | set(flagged))),
    )


def preprocess(
    m: FeatureMatrix, scheme: str, train_ids: set[str] | None = None
) -> FeatureMatrix:
    """Apply a named preprocessing scheme: ``standardize_l2`` for dense
    features, ``l1`` for histogram-like ones."""
    if scheme == "standardize_l2":
        return l2_normalize(standardize(m, train_ids))
    if scheme == "l1":
        return l1_normalize(m)
    raise ValidationError(f"unknown preprocessing scheme {scheme!r}")


def concat(features: list[FeatureMatrix]) -> FeatureMatrix:
    """Rowwise concatenation of already-preprocessed feature matrices that
    cover the same songs."""
    if not features:
        raise ValidationError("nothing to concatenate")
    base = features[0]
    for other in features[1:]:
        if set(other.ids) != set(base.ids):
            raise ValidationError(
                f"feature matrices cover different song sets: "
                f"{other.kind} vs {base.kind}"
            )
    if len(features) == 1:
        return base
    aligned = [f.subset(base.ids) for f in features]
    values = np.concatenate([f.values for f in aligned], axis=1)
    kind = "+".join(f.kind for f in features)
    label = tuple(
        "{}({})".format(f.kind, "|".join(f.preprocessing)) for f in features
    )
    zero = tuple(sorted(set().union(*(set(f.zero_rows) for f in features))))
    return FeatureMatrix(
        kind=kind, ids=list(base.ids), values=values,
        preprocessing=("concat",) + label, zero_rows=zero,
    )


# --- corpus-level builders ------------------------------------------------


def build_mean_timbre(frames_by_song: dict[str, TimbreFrames]) -> FeatureMatrix:
    ids = list(frames_by_song)
    values = np.stack([mean_timbre(frames_by_song[s]) for s in ids])
    return FeatureMatrix(kind="mean-timbre", ids=ids, values=values)


def build_vq(
    frames_by_song: dict[str, TimbreFrames], codebook: Codebook
) -> FeatureMatrix:
    ids = list(frames_by_song)
    values = np.stack([vq_histogram(frames_by_song[s], codebook) for s in ids])
    return FeatureMatrix(kind="vq-timbre", ids=ids, values=values)


def build_tag_features(
    annotations: dict[str, TagAnnotation],
    dictionary: EmbeddingDictionary,
    kind: str = "tags-song",
    artist_by_song: dict[str, str] | None = None,
) -> FeatureMatrix:
    """Tag features per song. For artist-level tags pass ``artist_by_song``;
    annotations are then keyed by artist id and each song inherits its
    artist's vector. Songs without a usable annotation are simply absent
    from the result (and will be dropped by corpus restriction)."""
    ids: list[str] = []
    rows: list[np.ndarray] = []
    if artist_by_song is None:
        for song, ann in annotations.items():
            try:
                rows.append(tag_feature(ann, dictionary))
            except MissingFeatureError:
                continue
            ids.append(song)
    else:
        cache: dict[str, np.ndarray | None] = {}
        for song, artist in artist_by_song.items():
            if artist not in cache:
                ann = annotations.get(artist)
                if ann is None:
                    cache[artist] = None
                else:
                    try:
                        cache[artist] = tag_feature(ann, dictionary)
                    except MissingFeatureError:
                        cache[artist] = None
            vec = cache[artist]
            if vec is not None:
                ids.append(song)
                rows.append(vec)
    if not ids:
        raise MissingFeatureError("no song has a usable tag annotation")
    return FeatureMatrix(kind=kind, ids=ids, values=np.stack(rows))


# --- file formats ---------------------------------------------------------


def load_timbre_frames(path) -> dict[str, TimbreFrames]:
    """Per line: song_id followed by 12 reals; a song's frames contiguous."""
    frames: dict[str, list[list[float]]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != TIMBRE_DIM + 1:
                raise DataFormatError(
                    f"expected song id and {TIMBRE_DIM} values, got {len(parts)} fields",
                    path=path,
                    line=lineno,
                )
            song = parts[0]
            try:
                row = [float(v) for v in parts[1:]]
            except ValueError:
                raise DataFormatError("non-numeric frame value", path=path, line=lineno) from None
            if song not in frames:
                frames[song] = []
                order.append(song)
            frames[song].append(row)
    return {s: TimbreFrames(song=s, frames=np.asarray(frames[s])) for s in order}


def load_tag_annotations(path) -> dict[str, TagAnnotation]:
    """Per line: song_id<TAB>tag<TAB>weight."""
    tags: dict[str, list[tuple[str, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(
                    f"expected 3 tab-separated fields, got {len(parts)}",
                    path=path,
                    line=lineno,
                )
            song, tag, weight_s = parts
            try:
                weight = float(weight_s)
            except ValueError:
                raise DataFormatError("non-numeric tag weight", path=path, line=lineno) from None
            tags.setdefault(song, []).append((tag, weight))
    return {s: TagAnnotation(song=s, tags=t) for s, t in tags.items()}


def load_embedding_dictionary(path) -> EmbeddingDictionary:
    """Per line: word followed by the embedding values (fixed arity)."""
    vectors: dict[str, np.ndarray] = {}
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if dim is None:
                dim = len(parts) - 1
                if dim < 1:
                    raise DataFormatError("embedding row has no values", path=path, line=lineno)
            if len(parts) != dim + 1:
                raise DataFormatError(
                    f"expected {dim} values, got {len(parts) - 1}", path=path, line=lineno
                )
            try:
                vectors[parts[0]] = np.asarray([float(v) for v in parts[1:]])
            except ValueError:
                raise DataFormatError("non-numeric embedding value", path=path, line=lineno) from None
    if dim is None:
        raise DataFormatError("embedding dictionary is empty", path=path)
    return EmbeddingDictionary(vectors=vectors, dim=dim)


def import_precomputed(
    path, kind: str, known_ids: set[str] | None = None
) -> tuple[FeatureMatrix, int]:
    """Read a feature file of ``song_id`` plus fixed-arity reals per line.

    Rows whose song id is not in ``known_ids`` (when given) are skipped;
    the count of skipped rows is returned alongside the matrix.
    """
    ids: list[str] = []
    seen: set[str] = set()
    rows: list[list[float]] = []
    skipped = 0
    arity: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if arity is None:
                arity = len(parts) - 1
                if arity < 1:
                    raise DataFormatError("feature row has no values", path=path, line=lineno)
            if len(parts) != arity + 1:
                raise DataFormatError(
                    f"ragged row: expected {arity} values, got {len(parts) - 1}",
                    path=path,
                    line=lineno,
                )
            song = parts[0]
            if known_ids is not None and song not in known_ids:
                skipped += 1
                continue
            if song in seen:
                raise DataFormatError(f"duplicate feature row for song {song!r}",
                                      path=path, line=lineno)
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise DataFormatError("non-numeric feature value", path=path, line=lineno) from None
            ids.append(song)
            seen.add(song)
    if arity is None:
        raise DataFormatError("feature file is empty", path=path)
    return FeatureMatrix(kind=kind, ids=ids, values=np.asarray(rows)), skipped


def save_feature_matrix(m: FeatureMatrix, path, config_digest: str = "") -> None:
    """Tab-separated rows with a comment header recording kind and transforms."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            "# kind={} dim={} preprocessing={} zero_rows={} config_digest={}\n".format(
                m.kind, m.dim, ",".join(m.preprocessing) or "-",
                ",".join(m.zero_rows) or "-", config_digest or "-",
            )
        )
        for song, row in zip(m.ids, m.values):
            fh.write(song + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def load_feature_matrix(path) -> FeatureMatrix:
    """Inverse of :func:`save_feature_matrix`."""
    kind = "imported"
    preprocessing: tuple[str, ...] = ()
    zero_rows: tuple[str, ...] = ()
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("# kind="):
        fields = dict(
            item.split("=", 1) for item in first[2:].strip().split(" ") if "=" in item
        )
        kind = fields.get("kind", kind)
        if fields.get("preprocessing", "-") != "-":
            preprocessing = tuple(fields["preprocessing"].split(","))
        if fields.get("zero_rows", "-") != "-":
            zero_rows = tuple(fields["zero_rows"].split(","))
    matrix, _ = import_precomputed(path, kind=kind)
    return replace(matrix, preprocessing=preprocessing, zero_rows=zero_rows)
