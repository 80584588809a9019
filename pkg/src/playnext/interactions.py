"""Sparse binary playlist-by-song interaction matrix.

Both the classifier targets and the factorization solver read from this
structure, so it keeps adjacency lists in both directions: per playlist the
member songs, per song the containing playlists. Weights live here rather
than in the solver; the classifier simply ignores them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import PlaylistCorpus
from .errors import ValidationError

DEFAULT_WEIGHT_OBSERVED = 2.0
DEFAULT_WEIGHT_UNOBSERVED = 1.0


@dataclass
class InteractionMatrix:
    """Binary playlist-song memberships with per-pair weights.

    ``rows[t]`` holds the song indices of playlist t, ``cols[s]`` the
    playlist indices containing song s. ``row_weights`` mirrors ``rows``
    and carries the observed-pair weights (a constant by default, per-pair
    for confidence-weighted listening logs).
    """

    n_playlists: int
    n_songs: int
    rows: list[np.ndarray]
    cols: list[np.ndarray] = field(default_factory=list)
    weight_observed: float = DEFAULT_WEIGHT_OBSERVED
    weight_unobserved: float = DEFAULT_WEIGHT_UNOBSERVED
    row_weights: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.weight_observed <= 0 or self.weight_unobserved <= 0:
            raise ValidationError("interaction weights must be strictly positive")
        if len(self.rows) != self.n_playlists:
            raise ValidationError("row adjacency length does not match n_playlists")
        for t, songs in enumerate(self.rows):
            if len(songs) != len(set(songs.tolist())):
                raise ValidationError(f"duplicate pair in playlist row {t}")
            if len(songs) and (songs.min() < 0 or songs.max() >= self.n_songs):
                raise ValidationError(f"song index out of range in playlist row {t}")
        if not self.cols:
            self.cols = self._build_cols()
        if self.row_weights is None:
            self.row_weights = [
                np.full(len(songs), self.weight_observed) for songs in self.rows
            ]

    def _build_cols(self) -> list[np.ndarray]:
        buckets: list[list[int]] = [[] for _ in range(self.n_songs)]
        for t, songs in enumerate(self.rows):
            for s in songs:
                buckets[int(s)].append(t)
        return [np.asarray(b, dtype=np.int64) for b in buckets]

    @property
    def n_pairs(self) -> int:
        return sum(len(songs) for songs in self.rows)

    def col_weights(self) -> list[np.ndarray]:
        """Per-song observed weights aligned with ``cols``; computed in one
        sweep so the column-major ALS half does not pay a quadratic cost."""
        buckets: list[list[float]] = [[] for _ in range(self.n_songs)]
        for t, songs in enumerate(self.rows):
            w = self.row_weights[t]
            for i, s in enumerate(songs):
                buckets[int(s)].append(float(w[i]))
        return [np.asarray(b) for b in buckets]


@dataclass
class TargetVector:
    """Binary membership column of one song over all playlists."""

    song_index: int
    bits: np.ndarray


def build_interactions(
    train: PlaylistCorpus,
    weight_observed: float = DEFAULT_WEIGHT_OBSERVED,
    weight_unobserved: float = DEFAULT_WEIGHT_UNOBSERVED,
) -> InteractionMatrix:
    """One pair per (playlist, song) membership of the training corpus."""
    if train.n_playlists == 0:
        raise ValidationError("cannot build interactions from an empty corpus")
    rows = [
        np.asarray([train.song_index[s] for s in pl.song_ids], dtype=np.int64)
        for pl in train.playlists
    ]
    return InteractionMatrix(
        n_playlists=train.n_playlists,
        n_songs=train.n_songs,
        rows=rows,
        weight_observed=weight_observed,
        weight_unobserved=weight_unobserved,
    )


def from_counts(
    counts: list[tuple[int, int, float]],
    n_rows: int,
    n_cols: int,
    alpha: float = 1.0,
) -> InteractionMatrix:
    """Interaction matrix from (row, col, count) triples, e.g. user-song
    play counts, with confidence weights 1 + alpha * count."""
    row_songs: list[list[int]] = [[] for _ in range(n_rows)]
    row_w: list[list[float]] = [[] for _ in range(n_rows)]
    for r, c, count in counts:
        if count <= 0:
            raise ValidationError(f"non-positive count for pair ({r}, {c})")
        row_songs[r].append(c)
        row_w[r].append(1.0 + alpha * count)
    return InteractionMatrix(
        n_playlists=n_rows,
        n_songs=n_cols,
        rows=[np.asarray(r, dtype=np.int64) for r in row_songs],
        weight_observed=1.0 + alpha,  # weight of a count-1 pair
        row_weights=[np.asarray(w) for w in row_w],
    )


def target_vector(m: InteractionMatrix, song: int) -> TargetVector:
    """Exact column slice: bits[t] = 1 iff playlist t contains the song."""
    if not 0 <= song < m.n_songs:
        raise IndexError(f"song index {song} out of range [0, {m.n_songs})")
    bits = np.zeros(m.n_playlists, dtype=np.float64)
    bits[m.cols[song]] = 1.0
    return TargetVector(song_index=song, bits=bits)


def target_rows(m: InteractionMatrix, songs: np.ndarray) -> np.ndarray:
    """Dense (len(songs), n_playlists) slice of targets for a song batch."""
    out = np.zeros((len(songs), m.n_playlists), dtype=np.float64)
    for i, s in enumerate(songs):
        out[i, m.cols[int(s)]] = 1.0
    return out
