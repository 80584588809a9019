"""Ranking evaluation of withheld playlist continuations.

For every playlist, all candidate songs not already in it are ranked by
score; each withheld song contributes its rank, a precision value at that
rank, and top-k recall indicators. The report aggregates median rank, mean
average precision and mean recall@k, with a breakdown by how often each
withheld song occurred in training playlists (the cold-start axis).

Average precision here is per withheld song: precision at the song's rank,
counting the playlist's other withheld songs as relevant. For a single
withheld song this reduces to 1/rank.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import SplitCorpus, occurrence_counts
from .errors import ConfigError, ShapeError, ValidationError

DEFAULT_KS = (10, 30, 100)
COLDSTART_EDGES = (0, 1, 2, 3, 4)
COLDSTART_RECALL_K = 100


@dataclass
class ContinuationTask:
    """Frozen view of one evaluation problem: the candidate pool, what each
    playlist already contains, and the withheld ground truth."""

    candidate_ids: list[str]
    playlist_ids: list[str]
    exclusions: list[np.ndarray]
    ground_truth: list[list[int]]
    occurrence: dict[str, int]
    digest: str

    @property
    def n_candidates(self) -> int:
        return len(self.candidate_ids)


def continuation_task(
    split: SplitCorpus,
    target: str = "test",
    count_validation_as_training: bool = True,
) -> ContinuationTask:
    """Build the candidate pool and per-playlist ground truth.

    ``target="test"`` evaluates the withheld continuations: candidates are
    the union of training songs (train plus validation, which the final
    model saw) and all test songs; a playlist's own training songs are
    excluded from its candidate list. ``target="validation"`` is used
    during model selection: candidates are train plus validation songs and
    only the train portion is excluded.
    """
    if target not in ("test", "validation"):
        raise ConfigError(f"unknown evaluation target {target!r}")
    if target == "test":
        known = split.training_song_ids(include_validation=count_validation_as_training)
        withheld = split.test
        occurrence = occurrence_counts(
            split, include_validation=count_validation_as_training
        )
    else:
        known = split.training_song_ids(include_validation=False)
        withheld = split.validation
        val_songs = {s for ids in withheld.values() for s in ids}
        occurrence = {s: 0 for s in val_songs}
        for pl in split.train.playlists:
            for s in set(pl.song_ids) & val_songs:
                occurrence[s] += 1

    # Training songs in dense-index order, then withheld-only songs sorted;
    # a deterministic order that every scorer must follow.
    candidate_ids = [s for s in _training_order(split, known)]
    extra = sorted({s for ids in withheld.values() for s in ids} - known)
    candidate_ids.extend(extra)
    index = {s: i for i, s in enumerate(candidate_ids)}

    playlist_ids = []
    exclusions = []
    ground_truth = []
    for pl in split.train.playlists:
        already = set(pl.song_ids)
        if target == "test" and count_validation_as_training:
            already.update(split.validation.get(pl.id, []))
        playlist_ids.append(pl.id)
        exclusions.append(
            np.asarray(sorted(index[s] for s in already if s in index), dtype=np.int64)
        )
        ground_truth.append([index[s] for s in withheld.get(pl.id, [])])

    payload = json.dumps(
        {
            "split": split.digest(),
            "target": target,
            "validation_in_training": count_validation_as_training,
            "candidates": candidate_ids,
        },
        sort_keys=True,
    ).encode("utf-8")
    digest = hashlib.sha256(payload).hexdigest()[:16]
    return ContinuationTask(
        candidate_ids=candidate_ids,
        playlist_ids=playlist_ids,
        exclusions=exclusions,
        ground_truth=ground_truth,
        occurrence=occurrence,
        digest=digest,
    )


def _training_order(split: SplitCorpus, known: set[str]) -> list[str]:
    ordered = [s for s in split.train.song_ids() if s in known]
    seen = set(ordered)
    for pl in split.train.playlists:
        for s in split.validation.get(pl.id, []):
            if s in known and s not in seen:
                ordered.append(s)
                seen.add(s)
    return ordered


# --- scoring sources --------------------------------------------------------


class RandomScores:
    """Uniform [0, 1) score per (playlist, candidate) pair, deterministic in
    the seed and row index alone so rows can be drawn in any order."""

    def __init__(self, n_playlists: int, n_candidates: int, seed: int = 0):
        self.shape = (n_playlists, n_candidates)
        self.seed = seed

    def row(self, t: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(self.seed, t)))
        return rng.uniform(0.0, 1.0, size=self.shape[1])


def _score_row(scores, t: int, n_candidates: int) -> np.ndarray:
    row = scores.row(t) if hasattr(scores, "row") else scores[t]
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (n_candidates,):
        raise ShapeError(
            f"score row {t} has shape {row.shape}, expected ({n_candidates},)"
        )
    return row


# --- ranking and metrics ----------------------------------------------------


@dataclass
class RankingReport:
    per_song: list[tuple[str, str, int, int]]  # (playlist, song, rank, occurrence)
    median_rank: float
    map: float
    recall_at: dict[int, float]
    n_candidates: int
    split_digest: str
    bins: dict[str, dict] = field(default_factory=dict)
    model: str = ""
    feature_manifest: dict | None = None
    config_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "split_digest": self.split_digest,
            "config_digest": self.config_digest,
            "n_candidates": self.n_candidates,
            "median_rank": self.median_rank,
            "map": self.map,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "bins": self.bins,
            "feature_manifest": self.feature_manifest,
            "average_precision_definition": (
                "per withheld song: precision at the song's rank, with the "
                "playlist's other withheld songs counted as relevant"
            ),
            "per_song": [
                {"playlist": p, "song": s, "rank": r, "occurrence": o}
                for p, s, r, o in self.per_song
            ],
        }


def rank_candidates(scores, task: ContinuationTask, playlist: int) -> np.ndarray:
    """Candidate indices ordered by descending score, ties broken by
    ascending index, with the playlist's own songs removed."""
    row = _score_row(scores, playlist, task.n_candidates)
    mask = np.ones(task.n_candidates, dtype=bool)
    mask[task.exclusions[playlist]] = False
    idx = np.flatnonzero(mask)
    # Stable sort over ascending idx keeps ties in ascending-index order.
    return idx[np.argsort(-row[idx], kind="stable")]


def _ranks_for_playlist(scores, task: ContinuationTask, playlist: int) -> dict[int, int]:
    order = rank_candidates(scores, task, playlist)
    if len(order) == 0:
        raise ConfigError(
            f"playlist {task.playlist_ids[playlist]!r} has an empty candidate list"
        )
    position = np.empty(task.n_candidates, dtype=np.int64)
    position[order] = np.arange(1, len(order) + 1)
    return {g: int(position[g]) for g in task.ground_truth[playlist]}


def evaluate(
    scores,
    split_or_task,
    ks: tuple[int, ...] = DEFAULT_KS,
    model: str = "",
    feature_manifest: dict | None = None,
) -> RankingReport:
    """Rank every playlist's candidates and aggregate the per-song metrics."""
    task = (
        split_or_task
        if isinstance(split_or_task, ContinuationTask)
        else continuation_task(split_or_task)
    )
    per_song: list[tuple[str, str, int, int]] = []
    ranks: list[int] = []
    precisions: list[float] = []
    hits = {k: 0 for k in ks}
    for t, truth in enumerate(task.ground_truth):
        if not truth:
            continue
        rank_of = _ranks_for_playlist(scores, task, t)
        playlist_ranks = sorted(rank_of.values())
        rank_precision = {
            r: i / r for i, r in enumerate(playlist_ranks, start=1)
        }
        for g in truth:
            r = rank_of[g]
            song = task.candidate_ids[g]
            occ = task.occurrence.get(song, 0)
            per_song.append((task.playlist_ids[t], song, r, occ))
            ranks.append(r)
            precisions.append(rank_precision[r])
            for k in ks:
                if r <= k:
                    hits[k] += 1
    if not ranks:
        raise ConfigError("no withheld songs to evaluate")
    n = len(ranks)
    report = RankingReport(
        per_song=per_song,
        median_rank=float(np.median(ranks)),
        map=float(np.mean(precisions)),
        recall_at={k: hits[k] / n for k in ks},
        n_candidates=task.n_candidates,
        split_digest=task.digest,
        model=model,
        feature_manifest=feature_manifest,
    )
    report.bins = coldstart_report(report)
    return report


def coldstart_report(
    report: RankingReport,
    counts: dict[str, int] | None = None,
    bin_edges: tuple[int, ...] = COLDSTART_EDGES,
) -> dict[str, dict]:
    """Group per-song results by training-occurrence count.

    Buckets are the exact counts in ``bin_edges`` plus a final open bucket
    (e.g. "5+"). Each bucket reports median rank, MAP, recall@100 and size.
    """
    open_label = f"{bin_edges[-1] + 1}+"
    labels = [str(e) for e in bin_edges] + [open_label]
    grouped: dict[str, list[tuple[int, float]]] = {lab: [] for lab in labels}
    # Reconstruct per-song precision from ranks grouped by playlist.
    by_playlist: dict[str, list[int]] = {}
    for playlist, _, rank, _ in report.per_song:
        by_playlist.setdefault(playlist, []).append(rank)
    precision_of: dict[tuple[str, int], float] = {}
    for playlist, rs in by_playlist.items():
        for i, r in enumerate(sorted(rs), start=1):
            precision_of[(playlist, r)] = i / r
    for playlist, song, rank, occ in report.per_song:
        if counts is not None:
            occ = counts.get(song, 0)
        label = str(occ) if occ <= bin_edges[-1] else open_label
        grouped[label].append((rank, precision_of[(playlist, rank)]))
    bins: dict[str, dict] = {}
    for label in labels:
        rows = grouped[label]
        if not rows:
            bins[label] = {"n": 0, "median_rank": None, "map": None,
                           f"recall_at_{COLDSTART_RECALL_K}": None}
            continue
        rs = np.asarray([r for r, _ in rows], dtype=float)
        ps = [p for _, p in rows]
        bins[label] = {
            "n": len(rows),
            "median_rank": float(np.median(rs)),
            "map": float(np.mean(ps)),
            f"recall_at_{COLDSTART_RECALL_K}": float(
                np.mean(rs <= COLDSTART_RECALL_K)
            ),
        }
    return bins


# --- report files and comparison -------------------------------------------


def write_report(report: RankingReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path) -> RankingReport:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return RankingReport(
        per_song=[
            (row["playlist"], row["song"], int(row["rank"]), int(row["occurrence"]))
            for row in data["per_song"]
        ],
        median_rank=float(data["median_rank"]),
        map=float(data["map"]),
        recall_at={int(k): float(v) for k, v in data["recall_at"].items()},
        n_candidates=int(data["n_candidates"]),
        split_digest=data["split_digest"],
        bins=data.get("bins", {}),
        model=data.get("model", ""),
        feature_manifest=data.get("feature_manifest"),
        config_digest=data.get("config_digest", ""),
    )


@dataclass
class ComparisonTable:
    names: list[str]
    reports: list[RankingReport]

    def metric_rows(self) -> list[list[str]]:
        ks = sorted(self.reports[0].recall_at)
        header = ["model", "med_rank", "map"] + [f"recall@{k}" for k in ks]
        rows = [header]
        for name, rep in zip(self.names, self.reports):
            rows.append(
                [name, _fmt(rep.median_rank), _fmt(rep.map)]
                + [_fmt(rep.recall_at[k]) for k in ks]
            )
        return rows

    def bin_rows(self) -> list[list[str]]:
        labels = list(self.reports[0].bins)
        rkey = f"recall_at_{COLDSTART_RECALL_K}"
        header = ["occurrences", "n"] + [
            f"{name}:{col}"
            for name in self.names
            for col in ("med_rank", "map", f"recall@{COLDSTART_RECALL_K}")
        ]
        rows = [header]
        for label in labels:
            n = self.reports[0].bins[label]["n"]
            row = [label, str(n)]
            for rep in self.reports:
                b = rep.bins.get(label, {})
                row += [_fmt(b.get("median_rank")), _fmt(b.get("map")), _fmt(b.get(rkey))]
            rows.append(row)
        return rows

    def to_tsv(self) -> str:
        lines = ["\t".join(r) for r in self.metric_rows()]
        lines.append("")
        lines += ["\t".join(r) for r in self.bin_rows()]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        return _align(self.metric_rows()) + "\n" + _align(self.bin_rows())


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float) and not v.is_integer():
        return f"{v:.4f}"
    return str(int(v)) if isinstance(v, float) else str(v)


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for r in rows:
        out.append("  ".join(cell.rjust(w) for cell, w in zip(r, widths)))
    return "\n".join(out) + "\n"


def compare(reports: list[tuple[str, RankingReport]]) -> ComparisonTable:
    """Side-by-side table of reports evaluated on the same split."""
    if not reports:
        raise ValidationError("nothing to compare")
    digests = {rep.split_digest for _, rep in reports}
    if len(digests) > 1:
        raise ValidationError(
            f"reports were evaluated on different splits: {sorted(digests)}"
        )
    return ComparisonTable(
        names=[name for name, _ in reports],
        reports=[rep for _, rep in reports],
    )
