import numpy as np
import pytest

from playnext.corpus import Playlist, PlaylistCorpus


def make_playlist(pid, songs, artists=None):
    """Playlist from parallel song/artist id lists; artists default to one
    distinct artist per song."""
    if artists is None:
        artists = [f"art-{s}" for s in songs]
    return Playlist(id=pid, entries=tuple(zip(songs, artists)))


def make_corpus(spec):
    """Corpus from {playlist_id: [song ids]} or [(pid, songs, artists)]."""
    playlists = []
    if isinstance(spec, dict):
        for pid, songs in spec.items():
            playlists.append(make_playlist(pid, songs))
    else:
        for item in spec:
            playlists.append(make_playlist(*item))
    return PlaylistCorpus.from_playlists(playlists)


def random_corpus(rng, n_playlists=6, n_songs=30, length=(5, 10)):
    """Random corpus useful for property checks; every playlist valid."""
    songs = [f"s{i}" for i in range(n_songs)]
    playlists = []
    for p in range(n_playlists):
        k = int(rng.integers(length[0], length[1] + 1))
        members = rng.choice(n_songs, size=min(k, n_songs), replace=False)
        playlists.append(make_playlist(f"p{p}", [songs[i] for i in members]))
    return PlaylistCorpus.from_playlists(playlists)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
