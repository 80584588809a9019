"""Hybrid music playlist continuation.

Builds song features from audio frames, social tags and listening-log
factors, trains a song-to-playlist classifier on hand-curated playlists,
fits a weighted-matrix-factorization baseline, and evaluates withheld
continuations by median rank, MAP and recall@k with a cold-start breakdown.
"""

__version__ = "0.1.0"
