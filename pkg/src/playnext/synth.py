"""Synthetic playlist corpus with planted latent structure.

Songs carry two latent coordinates: a topic and a position on the topic's
internal continuum. Each playlist has a dominant topic and its own position;
it draws songs from its topic weighted by closeness on the continuum times a
long-tail popularity factor, plus a few off-topic songs. Song features
expose both coordinates (noisy topic centroid plus a smooth encoding of the
position), so a feature-based model can rank unseen songs by how well they
fit a playlist, while an interaction-only model must recover the same
structure from co-occurrence and is blind to songs that never occur.

A fraction of each topic's songs is reserved as cold-start material: the
generator plants each of them in one position-matched playlist so they can
be forced into the withheld test continuations, never into training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Playlist, PlaylistCorpus
from .errors import ConfigError, ValidationError
from .features import FeatureMatrix


@dataclass
class SynthConfig:
    n_playlists: int = 300
    n_songs: int = 2000
    n_latent_topics: int = 10
    songs_per_playlist: tuple[int, int] = (14, 24)
    feature_dim: int = 16
    position_dim: int = 8  # of feature_dim, dims encoding the continuum
    feature_noise: float = 0.15
    coldstart_fraction: float = 0.1
    popularity_exponent: float = 0.7
    proximity_sharpness: float = 8.0
    topic_purity: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.n_latent_topics > self.n_songs:
            raise ValidationError("more topics than songs")
        if not 0.0 <= self.coldstart_fraction < 1.0:
            raise ValidationError("coldstart fraction must lie in [0, 1)")
        lo, hi = self.songs_per_playlist
        if lo < 5 or hi < lo:
            raise ValidationError("songs_per_playlist range must be sane and >= 5")
        if not 0.0 < self.topic_purity <= 1.0:
            raise ValidationError("topic purity must lie in (0, 1]")
        if not 0 < self.position_dim < self.feature_dim:
            raise ValidationError("position_dim must leave room for topic dims")


@dataclass
class SynthTruth:
    """Ground truth of a generated corpus, for assertions and for planting
    the cold songs into the test split downstream."""

    topic_of: dict[str, int]
    position_of: dict[str, float]
    cold_songs: set[str]
    dominant_topic: dict[str, int]
    playlist_position: dict[str, float]
    centroids: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))


def song_id(i: int) -> str:
    return f"s{i:05d}"


def _position_basis(v: np.ndarray, dim: int) -> np.ndarray:
    """Smooth sinusoidal encoding of positions in [0, 1], shape (n, dim)."""
    cols = []
    for k in range(1, dim + 1):
        freq = np.pi * ((k + 1) // 2)
        cols.append(np.sin(freq * v) if k % 2 else np.cos(freq * v))
    return np.stack(cols, axis=1)


def _proximity_kernel(u: float, v: np.ndarray, position_dim: int) -> np.ndarray:
    """Closeness of songs at positions v to a playlist at position u, using
    the same frequencies the position features expose; membership odds are
    then log-linear in those features."""
    harmonics = max(1, position_dim // 2)
    acc = np.zeros_like(v)
    for k in range(1, harmonics + 1):
        acc += np.cos(k * np.pi * (v - u))
    return acc / harmonics


def feature_family(
    truth: SynthTruth,
    n_topics: int,
    dim: int,
    noise: float,
    seed: int,
    kind: str = "synthetic",
    parts: tuple[str, ...] = ("topic", "position"),
    position_dim: int = 4,
) -> tuple[FeatureMatrix, np.ndarray]:
    """One noisy feature view of the planted structure.

    ``parts`` selects what the view exposes: the topic centroid, the
    position encoding, or both. Families drawn with different seeds carry
    independent centroids and noise, i.e. complementary views of the same
    ground truth.
    """
    if not parts or any(p not in ("topic", "position") for p in parts):
        raise ValidationError(f"unknown feature parts {parts!r}")
    rng = np.random.default_rng(seed)
    ids = list(truth.topic_of)
    blocks = []
    topic_dim = dim - position_dim if "position" in parts and "topic" in parts else dim
    centroids = np.empty((0, 0))
    if "topic" in parts:
        centroids = rng.normal(0.0, 1.0, size=(n_topics, topic_dim))
        topics = np.asarray([truth.topic_of[s] for s in ids])
        blocks.append(centroids[topics])
    if "position" in parts:
        pd = position_dim if "topic" in parts else dim
        v = np.asarray([truth.position_of[s] for s in ids])
        blocks.append(_position_basis(v, pd))
    values = np.concatenate(blocks, axis=1)
    values = values + noise * rng.normal(size=values.shape)
    return FeatureMatrix(kind=kind, ids=ids, values=values), centroids


def generate(cfg: SynthConfig) -> tuple[PlaylistCorpus, FeatureMatrix, SynthTruth]:
    """Build the corpus, its primary feature family, and the ground truth.

    Pass ``truth.cold_songs`` as the forced-test set when splitting so the
    cold songs only ever appear in withheld continuations.
    """
    rng = np.random.default_rng(cfg.seed)
    n_topics = cfg.n_latent_topics
    topic_of = {song_id(i): i % n_topics for i in range(cfg.n_songs)}
    position_of = {s: float(rng.uniform()) for s in topic_of}

    members: list[list[str]] = [[] for _ in range(n_topics)]
    for s, topic in topic_of.items():
        members[topic].append(s)
    cold_songs: set[str] = set()
    cold_pool: list[list[str]] = []
    warm_pool: list[list[str]] = []
    for topic in range(n_topics):
        songs = members[topic]
        n_cold = int(np.floor(cfg.coldstart_fraction * len(songs) + 0.5))
        picks = rng.permutation(len(songs))[:n_cold]
        cold = [songs[i] for i in picks]
        cold_songs.update(cold)
        cold_pool.append(cold)
        warm_pool.append([s for s in songs if s not in cold_songs])

    # Dominant topics cycle over playlists; positions are uniform draws.
    dominant = {f"p{t:04d}": t % n_topics for t in range(cfg.n_playlists)}
    playlist_position = {p: float(rng.uniform()) for p in dominant}
    by_topic_playlists: list[list[str]] = [[] for _ in range(n_topics)]
    for p, topic in dominant.items():
        by_topic_playlists[topic].append(p)
    for topic in range(n_topics):
        if len(cold_pool[topic]) > len(by_topic_playlists[topic]):
            raise ConfigError(
                f"topic {topic} has {len(cold_pool[topic])} cold songs but only "
                f"{len(by_topic_playlists[topic])} playlists to plant them in"
            )

    # Each cold song is planted in one playlist of its topic, matched by
    # position rank so the planted continuation is predictable from features.
    planted: dict[str, list[str]] = {p: [] for p in dominant}
    for topic in range(n_topics):
        cold = sorted(cold_pool[topic], key=position_of.__getitem__)
        hosts = sorted(by_topic_playlists[topic], key=playlist_position.__getitem__)
        m, n = len(cold), len(hosts)
        for i, song in enumerate(cold):
            planted[hosts[(i * n) // max(m, 1)]].append(song)

    # Long-tail popularity by within-topic rank.
    popularity = []
    for topic in range(n_topics):
        n = len(warm_pool[topic])
        w = np.arange(1, n + 1, dtype=np.float64) ** (-cfg.popularity_exponent)
        popularity.append(w)

    songs_by_pid: dict[str, list[str]] = {}
    lo, hi = cfg.songs_per_playlist
    for t in range(cfg.n_playlists):
        pid = f"p{t:04d}"
        topic = dominant[pid]
        u = playlist_position[pid]
        length = int(rng.integers(lo, hi + 1))
        n_in_topic = int(np.ceil(cfg.topic_purity * length))
        n_off = length - n_in_topic
        n_regular = n_in_topic - len(planted[pid])
        pool = warm_pool[topic]
        if n_regular > len(pool):
            raise ConfigError(
                f"playlist needs {n_regular} songs from topic {topic}, which "
                f"only has {len(pool)} outside the cold set"
            )
        v = np.asarray([position_of[s] for s in pool])
        kernel = _proximity_kernel(u, v, cfg.position_dim)
        weights = popularity[topic] * np.exp(cfg.proximity_sharpness * kernel)
        weights = weights / weights.sum()
        regular = [
            str(s) for s in rng.choice(pool, size=n_regular, replace=False, p=weights)
        ]
        off_pool = [
            s for other in range(n_topics) if other != topic
            for s in warm_pool[other]
        ]
        if n_off > len(off_pool):
            raise ConfigError("not enough off-topic songs to fill the playlist")
        off = [str(s) for s in rng.choice(off_pool, size=n_off, replace=False)]
        songs_by_pid[pid] = regular + planted[pid] + off

    # Coverage pass: a warm song placed exactly once would become out-of-set
    # whenever the split withholds that single placement. Give every such
    # song a second placement in the position-nearest playlist of its topic.
    placements: dict[str, int] = {}
    for songs in songs_by_pid.values():
        for s in songs:
            placements[s] = placements.get(s, 0) + 1
    for s in sorted(placements):
        if placements[s] != 1 or s in cold_songs:
            continue
        topic = topic_of[s]
        hosts = [
            p for p in by_topic_playlists[topic] if s not in songs_by_pid[p]
        ]
        if not hosts:
            continue
        nearest = min(
            hosts, key=lambda p: abs(playlist_position[p] - position_of[s])
        )
        songs_by_pid[nearest].append(s)

    playlists: list[Playlist] = []
    for t in range(cfg.n_playlists):
        pid = f"p{t:04d}"
        songs = songs_by_pid[pid]
        order = rng.permutation(len(songs))
        entries = tuple((songs[i], "a" + songs[i][1:]) for i in order)
        playlists.append(Playlist(id=pid, entries=entries))

    corpus = PlaylistCorpus.from_playlists(playlists)
    truth = SynthTruth(
        topic_of=topic_of,
        position_of=position_of,
        cold_songs=cold_songs,
        dominant_topic=dominant,
        playlist_position=playlist_position,
    )
    features, centroids = feature_family(
        truth, n_topics, cfg.feature_dim, cfg.feature_noise,
        seed=cfg.seed + 1, kind="synthetic", position_dim=cfg.position_dim,
    )
    truth.centroids = centroids
    return corpus, features, truth
