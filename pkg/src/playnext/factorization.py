"""Weighted matrix factorization by alternating least squares.

Fits row (playlist) and column (song) factors against the binary
interaction matrix, with observed pairs up-weighted and an L2 ridge on
both factor sides. Each half-sweep solves the per-row normal equations
exactly, so the weighted objective never increases. Songs with no observed
pairs receive exactly the zero factor, which is what makes this baseline
blind to out-of-set songs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, NumericalError, ValidationError
from .features import FeatureMatrix
from .interactions import InteractionMatrix

DEFAULT_DEPTH = 200
DEFAULT_L2 = 10.0
DEFAULT_SWEEPS = 15
DEFAULT_INIT_SCALE = 0.01


@dataclass
class WmfConfig:
    depth: int = DEFAULT_DEPTH
    weight_observed: float = 2.0
    l2_weight: float = DEFAULT_L2
    sweeps: int = DEFAULT_SWEEPS
    seed: int = 0
    init_scale: float = DEFAULT_INIT_SCALE

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("factor depth must be at least 1")
        if self.weight_observed < 1:
            raise ValidationError("observed weight must be at least 1")
        if self.sweeps < 1:
            raise ValidationError("at least one sweep is required")


@dataclass
class FactorModel:
    row_factors: np.ndarray
    col_factors: np.ndarray
    l2_weight: float
    # Weighted objective after every half-sweep, in solve order.
    objective_trace: list[float] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return self.row_factors.shape[1]

    @property
    def n_rows(self) -> int:
        return self.row_factors.shape[0]

    @property
    def n_cols(self) -> int:
        return self.col_factors.shape[0]


def wmf_objective(m: InteractionMatrix, row_factors, col_factors, l2_weight) -> float:
    """Full weighted squared loss plus the ridge term.

    Sum over every (playlist, song) cell of w * (y - p.q)^2 with y = 1 on
    observed pairs and 0 elsewhere; computed without materializing the
    dense score matrix via |PQ^T|_F^2 = sum((P^T P) * (Q^T Q)).
    """
    P = np.asarray(row_factors, dtype=np.float64)
    Q = np.asarray(col_factors, dtype=np.float64)
    w_u = m.weight_unobserved
    frob2 = float(((P.T @ P) * (Q.T @ Q)).sum())
    total = w_u * frob2
    for t, songs in enumerate(m.rows):
        if len(songs) == 0:
            continue
        s = P[t] @ Q[songs].T
        w = m.row_weights[t]
        total += float((w * (1.0 - s) ** 2 - w_u * s ** 2).sum())
    total += l2_weight * (float((P ** 2).sum()) + float((Q ** 2).sum()))
    return total


def _solve_side(
    adjacency: list[np.ndarray],
    adj_weights: list[np.ndarray],
    other: np.ndarray,
    w_unobserved: float,
    l2_weight: float,
) -> np.ndarray:
    """Exact ridge least-squares update of one factor side.

    For each row i with observed columns J and weights w_j, solves
    (w_u * O^T O + sum_J (w_j - w_u) o_j o_j^T + l2 I) x = sum_J w_j o_j.
    """
    n = len(adjacency)
    d = other.shape[1]
    base = w_unobserved * (other.T @ other) + l2_weight * np.eye(d)
    out = np.empty((n, d))
    chunk = max(1, (1 << 24) // max(1, d * d * 8))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        A = np.repeat(base[None, :, :], stop - start, axis=0)
        B = np.zeros((stop - start, d))
        for i in range(start, stop):
            idx = adjacency[i]
            if len(idx) == 0:
                continue
            O = other[idx]
            w = adj_weights[i]
            A[i - start] += (O.T * (w - w_unobserved)) @ O
            B[i - start] = w @ O
        try:
            out[start:stop] = np.linalg.solve(A, B[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"ALS normal equations are singular: {exc}") from exc
    return out


def wmf_fit(m: InteractionMatrix, cfg: WmfConfig) -> FactorModel:
    """Alternating exact least-squares sweeps over playlists then songs.

    Factors start uniform in [-init_scale, init_scale] under the seed; the
    objective trace records the loss after every half-sweep.
    """
    if m.n_pairs < 1:
        raise ValidationError("interaction matrix has no observed pairs")
    rng = np.random.default_rng(cfg.seed)
    P = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(m.n_playlists, cfg.depth))
    Q = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(m.n_songs, cfg.depth))
    col_w = m.col_weights()
    trace: list[float] = []
    for _ in range(cfg.sweeps):
        P = _solve_side(m.rows, m.row_weights, Q, m.weight_unobserved, cfg.l2_weight)
        trace.append(wmf_objective(m, P, Q, cfg.l2_weight))
        Q = _solve_side(m.cols, col_w, P, m.weight_unobserved, cfg.l2_weight)
        trace.append(wmf_objective(m, P, Q, cfg.l2_weight))
    if not (np.isfinite(P).all() and np.isfinite(Q).all()):
        raise NumericalError("factorization produced non-finite factors")
    return FactorModel(row_factors=P, col_factors=Q, l2_weight=cfg.l2_weight,
                       objective_trace=trace)


class FactorScores:
    """Lazy dot-product scores; rows computed on demand.

    ``candidate_cols`` maps candidate positions to factor columns, with -1
    for candidates unknown to the model (out-of-set songs), which score 0.
    """

    def __init__(self, model: FactorModel, candidate_cols: np.ndarray | None = None):
        self.model = model
        self.candidate_cols = (
            None if candidate_cols is None else np.asarray(candidate_cols, dtype=np.int64)
        )

    @property
    def shape(self) -> tuple[int, int]:
        n_cols = (
            self.model.n_cols if self.candidate_cols is None else len(self.candidate_cols)
        )
        return (self.model.n_rows, n_cols)

    def row(self, t: int) -> np.ndarray:
        scores = self.model.row_factors[t] @ self.model.col_factors.T
        if self.candidate_cols is None:
            return scores
        out = np.zeros(len(self.candidate_cols))
        known = self.candidate_cols >= 0
        out[known] = scores[self.candidate_cols[known]]
        return out

    def matrix(self) -> np.ndarray:
        return np.stack([self.row(t) for t in range(self.model.n_rows)])


def wmf_scores(model: FactorModel, candidate_cols: np.ndarray | None = None) -> FactorScores:
    return FactorScores(model, candidate_cols)


def song_factors_as_features(
    model: FactorModel, song_ids: list[str], kind: str = "listening-logs"
) -> FeatureMatrix:
    """Column factors repackaged as a per-song feature matrix; callers
    normally standardize-and-L2 the result like any dense feature."""
    if len(song_ids) != model.n_cols:
        raise ValidationError(
            f"{len(song_ids)} song ids for {model.n_cols} column factors"
        )
    return FeatureMatrix(kind=kind, ids=list(song_ids), values=model.col_factors.copy())


# --- model files ------------------------------------------------------------


def save_factor_model(model: FactorModel, path, fmt: str = "text",
                      config_digest: str = "") -> None:
    if fmt == "npz":
        np.savez(
            path,
            row_factors=model.row_factors,
            col_factors=model.col_factors,
            meta=np.array(json.dumps({
                "l2_weight": model.l2_weight,
                "config_digest": config_digest,
            })),
        )
        return
    if fmt != "text":
        raise ValidationError(f"unknown model format {fmt!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            "# wmf n_rows={} n_cols={} depth={} l2={} config_digest={}\n".format(
                model.n_rows, model.n_cols, model.depth,
                repr(float(model.l2_weight)), config_digest or "-",
            )
        )
        for row in model.row_factors:
            fh.write("\t".join(repr(float(v)) for v in row) + "\n")
        for row in model.col_factors:
            fh.write("\t".join(repr(float(v)) for v in row) + "\n")


def load_factor_model(path) -> FactorModel:
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"PK":
        data = np.load(path, allow_pickle=False)
        meta = json.loads(str(data["meta"]))
        return FactorModel(
            row_factors=data["row_factors"],
            col_factors=data["col_factors"],
            l2_weight=float(meta["l2_weight"]),
        )
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("# wmf "):
            raise DataFormatError("not a factor model file", path=path, line=1)
        fields = dict(
            item.split("=", 1) for item in header[2:].strip().split(" ") if "=" in item
        )
        n_rows = int(fields["n_rows"])
        n_cols = int(fields["n_cols"])
        depth = int(fields["depth"])
        l2 = float(fields["l2"])
        rows = []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split("\t")
            if len(parts) != depth:
                raise DataFormatError(
                    f"expected {depth} factor values, got {len(parts)}",
                    path=path, line=lineno,
                )
            rows.append([float(v) for v in parts])
    if len(rows) != n_rows + n_cols:
        raise DataFormatError(
            f"expected {n_rows + n_cols} factor rows, got {len(rows)}", path=path
        )
    arr = np.asarray(rows)
    return FactorModel(row_factors=arr[:n_rows], col_factors=arr[n_rows:], l2_weight=l2)
