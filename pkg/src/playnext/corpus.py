"""Playlist corpus loading, filtering, and train/validation/test splitting.

A corpus is a collection of playlists, each an ordered list of
(song_id, artist_id) entries. Filtering keeps only playlists that are
artist-diverse enough to learn from; splitting withholds a per-playlist
continuation for testing and a second slice of the remainder for
validation-based model selection.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, ValidationError

# Playlist survival thresholds for the modelled corpus.
MIN_ARTISTS = 7
MAX_PER_ARTIST = 2
MIN_SONGS = 14

# Looser preset used to assemble the song pool that feature extractors
# (codebooks, embeddings) are fitted on.
DEV_MIN_ARTISTS = 5
DEV_MAX_PER_ARTIST = 2
DEV_MIN_SONGS = 10

MIN_REMAINING_SONGS = 5


@dataclass(frozen=True)
class Playlist:
    """One playlist: an id plus ordered (song_id, artist_id) entries."""

    id: str
    entries: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not self.entries:
            raise ValidationError(f"playlist {self.id!r} has no entries")
        songs = [s for s, _ in self.entries]
        if len(set(songs)) != len(songs):
            raise ValidationError(f"playlist {self.id!r} contains duplicate songs")

    @property
    def song_ids(self) -> list[str]:
        return [s for s, _ in self.entries]

    @property
    def artist_ids(self) -> list[str]:
        return [a for _, a in self.entries]

    def n_unique_artists(self) -> int:
        return len(set(self.artist_ids))

    def max_songs_per_artist(self) -> int:
        counts: dict[str, int] = {}
        for a in self.artist_ids:
            counts[a] = counts.get(a, 0) + 1
        return max(counts.values())


@dataclass
class PlaylistCorpus:
    """Playlists plus dense integer indices over their songs and artists."""

    playlists: list[Playlist]
    song_index: dict[str, int] = field(default_factory=dict)
    artist_index: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_playlists(cls, playlists: list[Playlist]) -> "PlaylistCorpus":
        song_index: dict[str, int] = {}
        artist_index: dict[str, int] = {}
        for pl in playlists:
            for song, artist in pl.entries:
                if song not in song_index:
                    song_index[song] = len(song_index)
                if artist not in artist_index:
                    artist_index[artist] = len(artist_index)
        return cls(playlists=list(playlists), song_index=song_index, artist_index=artist_index)

    @property
    def n_playlists(self) -> int:
        return len(self.playlists)

    @property
    def n_songs(self) -> int:
        return len(self.song_index)

    @property
    def n_artists(self) -> int:
        return len(self.artist_index)

    def song_ids(self) -> list[str]:
        """Song ids in dense-index order."""
        return sorted(self.song_index, key=self.song_index.__getitem__)

    def artist_by_song(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for pl in self.playlists:
            for song, artist in pl.entries:
                out.setdefault(song, artist)
        return out


@dataclass
class SplitCorpus:
    """A per-playlist partition into train / validation / test songs.

    ``train`` holds the training portions as a corpus of their own;
    ``validation`` and ``test`` map playlist id to the withheld song ids.
    ``artist_by_song`` covers every song of the original corpus so the
    validation portion can be merged back for the final model fit.
    """

    train: PlaylistCorpus
    validation: dict[str, list[str]]
    test: dict[str, list[str]]
    artist_by_song: dict[str, str]
    seed: int

    def merged_training_corpus(self) -> PlaylistCorpus:
        """Training corpus with the validation songs folded back in."""
        merged = []
        for pl in self.train.playlists:
            extra = tuple(
                (s, self.artist_by_song[s]) for s in self.validation.get(pl.id, [])
            )
            merged.append(Playlist(id=pl.id, entries=pl.entries + extra))
        return PlaylistCorpus.from_playlists(merged)

    def training_song_ids(self, include_validation: bool = True) -> set[str]:
        songs = set(self.train.song_index)
        if include_validation:
            for ids in self.validation.values():
                songs.update(ids)
        return songs

    def test_song_ids(self) -> set[str]:
        out: set[str] = set()
        for ids in self.test.values():
            out.update(ids)
        return out

    def digest(self) -> str:
        """Stable identifier of the exact split; reports carry it so that
        only like-for-like results get compared."""
        payload = {
            "seed": self.seed,
            "playlists": {
                pl.id: {
                    "train": pl.song_ids,
                    "validation": self.validation.get(pl.id, []),
                    "test": self.test.get(pl.id, []),
                }
                for pl in self.train.playlists
            },
        }
        raw = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(raw).hexdigest()[:16]


def load_corpus(path, fmt: str = "tsv") -> PlaylistCorpus:
    """Read a corpus file: one tab-separated record per line with fields
    playlist_id, position, song_id, artist_id. A header line is detected by
    a literal ``playlist_id`` first field. Entries are ordered by position
    (ties keep file order).
    """
    if fmt != "tsv":
        raise ConfigError(f"unknown corpus format {fmt!r}")
    records: dict[str, list[tuple[int, str, str]]] = {}
    order: list[str] = []
    seen: set[tuple[str, str]] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if lineno == 1 and parts[0] == "playlist_id":
                continue
            if len(parts) != 4:
                raise DataFormatError(
                    f"expected 4 tab-separated fields, got {len(parts)}",
                    path=path,
                    line=lineno,
                )
            pid, pos_s, song, artist = parts
            try:
                pos = int(pos_s)
            except ValueError:
                raise DataFormatError(
                    f"position {pos_s!r} is not an integer", path=path, line=lineno
                ) from None
            if (pid, song) in seen:
                raise ValidationError(
                    f"{path}:{lineno}: duplicate song {song!r} in playlist {pid!r}"
                )
            seen.add((pid, song))
            if pid not in records:
                records[pid] = []
                order.append(pid)
            records[pid].append((pos, song, artist))
    playlists = []
    for pid in order:
        entries = tuple(
            (song, artist)
            for _, song, artist in sorted(records[pid], key=lambda r: r[0])
        )
        playlists.append(Playlist(id=pid, entries=entries))
    return PlaylistCorpus.from_playlists(playlists)


def save_corpus(corpus: PlaylistCorpus, path) -> None:
    """Write a corpus in the format understood by :func:`load_corpus`."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("playlist_id\tposition\tsong_id\tartist_id\n")
        for pl in corpus.playlists:
            for pos, (song, artist) in enumerate(pl.entries):
                fh.write(f"{pl.id}\t{pos}\t{song}\t{artist}\n")


def filter_corpus(
    corpus: PlaylistCorpus,
    min_artists: int = MIN_ARTISTS,
    max_per_artist: int = MAX_PER_ARTIST,
    min_songs: int = MIN_SONGS,
) -> PlaylistCorpus:
    """Keep playlists with enough distinct artists, no artist dominating,
    and enough songs. Indices are rebuilt over the survivors."""
    kept = [
        pl
        for pl in corpus.playlists
        if pl.n_unique_artists() >= min_artists
        and pl.max_songs_per_artist() <= max_per_artist
        and len(pl.entries) >= min_songs
    ]
    return PlaylistCorpus.from_playlists(kept)


def development_filter(corpus: PlaylistCorpus) -> PlaylistCorpus:
    """Preset for assembling the feature-model song pool."""
    return filter_corpus(
        corpus,
        min_artists=DEV_MIN_ARTISTS,
        max_per_artist=DEV_MAX_PER_ARTIST,
        min_songs=DEV_MIN_SONGS,
    )


def restrict_to_featured(
    corpus: PlaylistCorpus,
    available: set[str],
    min_remaining: int = MIN_REMAINING_SONGS,
) -> PlaylistCorpus:
    """Drop songs without features from every playlist, then drop playlists
    that became shorter than ``min_remaining`` songs."""
    kept = []
    for pl in corpus.playlists:
        entries = tuple((s, a) for s, a in pl.entries if s in available)
        if len(entries) >= min_remaining:
            kept.append(Playlist(id=pl.id, entries=entries))
    return PlaylistCorpus.from_playlists(kept)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_corpus(
    corpus: PlaylistCorpus,
    test_fraction: float = 0.2,
    validation_fraction: float = 0.2,
    seed: int = 0,
    forced_test: set[str] | None = None,
    protect_last_copy: bool = False,
) -> SplitCorpus:
    """Withhold a test continuation and a validation slice from every playlist.

    Per playlist of n songs, round(test_fraction * n) songs (at least 1,
    half-up rounding) go to test; of the remainder, round(validation_fraction
    * remainder) (at least 1) go to validation. Selection is uniform under
    ``seed``. Songs listed in ``forced_test`` are always placed in the test
    portion, ahead of the random picks (they count toward the quota and may
    exceed it). With ``protect_last_copy`` the random test picks avoid
    withholding a song's last placement that would otherwise remain in
    training, so no song goes out-of-set by accident.
    """
    rng = np.random.default_rng(seed)
    forced = forced_test or set()
    placements: dict[str, int] = {}
    if protect_last_copy:
        for pl in corpus.playlists:
            for s in pl.song_ids:
                placements[s] = placements.get(s, 0) + 1
    withheld_so_far: dict[str, int] = {}
    train_playlists = []
    validation: dict[str, list[str]] = {}
    test: dict[str, list[str]] = {}
    for pl in corpus.playlists:
        n = len(pl.entries)
        if n < MIN_REMAINING_SONGS:
            raise ValidationError(
                f"playlist {pl.id!r} has {n} songs; at least "
                f"{MIN_REMAINING_SONGS} are required before splitting"
            )
        songs = pl.song_ids
        forced_here = [s for s in songs if s in forced]
        free = [s for s in songs if s not in forced]
        n_test = max(max(1, _round_half_up(test_fraction * n)), len(forced_here))
        n_picks = n_test - len(forced_here)
        order = [free[i] for i in rng.permutation(len(free))]
        if protect_last_copy:
            safe = [
                s for s in order
                if placements[s] - withheld_so_far.get(s, 0) >= 2
            ]
            safe_set = set(safe)
            order = safe + [s for s in order if s not in safe_set]
        picked = order[:n_picks]
        for s in picked + forced_here:
            withheld_so_far[s] = withheld_so_far.get(s, 0) + 1
        test_set = set(forced_here) | set(picked)
        remainder = [s for s in songs if s not in test_set]
        n_val = max(1, _round_half_up(validation_fraction * len(remainder)))
        if n_val >= len(remainder):
            raise ValidationError(
                f"playlist {pl.id!r} leaves no training songs after withholding"
            )
        val_picks = rng.permutation(len(remainder))[:n_val]
        val_set = {remainder[i] for i in val_picks}
        train_entries = tuple(
            (s, a) for s, a in pl.entries if s not in test_set and s not in val_set
        )
        train_playlists.append(Playlist(id=pl.id, entries=train_entries))
        validation[pl.id] = [s for s in songs if s in val_set]
        test[pl.id] = [s for s in songs if s in test_set]
    return SplitCorpus(
        train=PlaylistCorpus.from_playlists(train_playlists),
        validation=validation,
        test=test,
        artist_by_song=corpus.artist_by_song(),
        seed=seed,
    )


def occurrence_counts(
    split: SplitCorpus, include_validation: bool = True
) -> dict[str, int]:
    """For every song in any test continuation, the number of training
    playlists containing it. Validation songs count as training occurrences
    by default because the final model is fitted on the merged training set.
    Songs never seen in training map to 0.
    """
    test_songs = split.test_song_ids()
    counts = {s: 0 for s in test_songs}
    for pl in split.train.playlists:
        members = set(pl.song_ids)
        if include_validation:
            members.update(split.validation.get(pl.id, []))
        for s in members & test_songs:
            counts[s] += 1
    return counts


# --- split manifest and descriptive statistics ---------------------------


def _quantiles(values: list[int]) -> dict[str, float]:
    arr = np.asarray(sorted(values), dtype=float)
    q = np.percentile(arr, [0, 25, 50, 75, 100], method="linear")
    return {
        "min": float(q[0]),
        "1q": float(q[1]),
        "med": float(q[2]),
        "3q": float(q[3]),
        "max": float(q[4]),
    }


def split_statistics(split: SplitCorpus) -> dict:
    """Five-number summaries of songs per playlist, artists per playlist, and
    song frequency, for the training portion (train + validation) and the
    test portion."""
    train_song_lists = []
    for pl in split.train.playlists:
        train_song_lists.append(pl.song_ids + split.validation.get(pl.id, []))
    test_song_lists = [split.test[pl.id] for pl in split.train.playlists]

    def portion_stats(song_lists):
        songs_per = [len(s) for s in song_lists]
        artists_per = [
            len({split.artist_by_song[s] for s in lst}) for lst in song_lists
        ]
        freq: dict[str, int] = {}
        for lst in song_lists:
            for s in lst:
                freq[s] = freq.get(s, 0) + 1
        return {
            "songs_per_playlist": _quantiles(songs_per),
            "artists_per_playlist": _quantiles(artists_per),
            "song_frequency": _quantiles(list(freq.values())),
        }

    return {
        "training": portion_stats(train_song_lists),
        "test": portion_stats(test_song_lists),
    }


def save_split_manifest(split: SplitCorpus, path, config_digest: str = "") -> None:
    """Write the split (and its statistics) as a JSON manifest."""
    manifest = {
        "config_digest": config_digest,
        "split_digest": split.digest(),
        "seed": split.seed,
        # A list, not a mapping: playlist order defines the dense playlist
        # indices used by models, so it must survive a reload.
        "playlists": [
            {
                "id": pl.id,
                "train": pl.song_ids,
                "validation": split.validation.get(pl.id, []),
                "test": split.test.get(pl.id, []),
            }
            for pl in split.train.playlists
        ],
        "artist_by_song": split.artist_by_song,
        "statistics": split_statistics(split),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split_manifest(path) -> SplitCorpus:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    artist_by_song = manifest["artist_by_song"]
    train_playlists = []
    validation: dict[str, list[str]] = {}
    test: dict[str, list[str]] = {}
    for parts in manifest["playlists"]:
        pid = parts["id"]
        entries = tuple((s, artist_by_song[s]) for s in parts["train"])
        train_playlists.append(Playlist(id=pid, entries=entries))
        validation[pid] = list(parts["validation"])
        test[pid] = list(parts["test"])
    split = SplitCorpus(
        train=PlaylistCorpus.from_playlists(train_playlists),
        validation=validation,
        test=test,
        artist_by_song=artist_by_song,
        seed=int(manifest["seed"]),
    )
    if split.digest() != manifest["split_digest"]:
        raise DataFormatError("split manifest digest mismatch", path=path)
    return split
