"""Multi-label song-to-playlist classifier.

A feedforward network maps a song's feature vector to one membership
probability per training playlist: tanh hidden layers with pre-activation
batch normalization and dropout, and a logistic output unit per playlist.
Training minimizes the binary cross-entropy summed over every song-playlist
pair (occurring and non-occurring alike) with AdaGrad-scaled steps and
Nesterov momentum. Because the input is a feature vector, the trained model
scores songs it has never seen, which is the whole point.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import SplitCorpus
from .errors import ConfigError, ShapeError, ValidationError
from .evaluator import continuation_task, evaluate
from .features import FeatureMatrix
from .interactions import build_interactions, target_rows

PROB_CLIP = 1e-7
BN_EPS = 1e-5
BN_ALPHA = 0.1  # running-statistics update rate
ADAGRAD_EPS = 1e-8
REL_IMPROVEMENT = 1e-4  # "significant" training-loss improvement
SELECTION_RECALL_K = 100

# The architecture grid explored for each feature set.
GRID_LAYERS = (2, 3)
GRID_UNITS = (50, 100, 200)


@dataclass
class Architecture:
    input_dim: int
    output_dim: int
    hidden_layers: int = 2
    hidden_units: int = 50
    hidden_activation: str = "tanh"
    dropout_input: float = 0.1
    dropout_hidden: float = 0.5
    batch_norm: bool = True

    def __post_init__(self):
        if min(self.input_dim, self.output_dim, self.hidden_layers,
               self.hidden_units) < 1:
            raise ValidationError("architecture dimensions must be at least 1")
        if not (0 <= self.dropout_input < 1 and 0 <= self.dropout_hidden < 1):
            raise ValidationError("dropout probabilities must lie in [0, 1)")
        if self.hidden_activation != "tanh":
            raise ValidationError(
                f"unsupported hidden activation {self.hidden_activation!r}"
            )


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    batch_size: int = 50
    max_epochs: int = 1000
    patience_epochs: int = 100
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValidationError("learning rate and batch size must be positive")
        if self.max_epochs < 0 or self.patience_epochs < 1:
            raise ValidationError("epoch limits must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")


@dataclass
class ClassifierModel:
    architecture: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn_gamma: list[np.ndarray]
    bn_beta: list[np.ndarray]
    bn_mean: list[np.ndarray]
    bn_var: list[np.ndarray]
    feature_manifest: dict = field(default_factory=dict)

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(
            architecture=self.architecture,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            bn_gamma=[g.copy() for g in self.bn_gamma],
            bn_beta=[b.copy() for b in self.bn_beta],
            bn_mean=[m.copy() for m in self.bn_mean],
            bn_var=[v.copy() for v in self.bn_var],
            feature_manifest=dict(self.feature_manifest),
        )

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable parameters in a fixed order."""
        out: list[tuple[str, np.ndarray]] = []
        for i in range(len(self.weights)):
            out.append((f"W{i}", self.weights[i]))
            out.append((f"b{i}", self.biases[i]))
            if i < len(self.bn_gamma):
                out.append((f"gamma{i}", self.bn_gamma[i]))
                out.append((f"beta{i}", self.bn_beta[i]))
        return out


def init_model(
    arch: Architecture,
    seed_or_rng,
    feature_manifest: dict | None = None,
) -> ClassifierModel:
    """Fresh parameters: weights uniform scaled by 1/sqrt(fan_in), zero
    biases, identity batch-norm with unit running variance."""
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    dims = [arch.input_dim] + [arch.hidden_units] * arch.hidden_layers + [arch.output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.uniform(-1.0, 1.0, size=(fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    n_hidden = arch.hidden_layers if arch.batch_norm else 0
    return ClassifierModel(
        architecture=arch,
        weights=weights,
        biases=biases,
        bn_gamma=[np.ones(arch.hidden_units) for _ in range(n_hidden)],
        bn_beta=[np.zeros(arch.hidden_units) for _ in range(n_hidden)],
        bn_mean=[np.zeros(arch.hidden_units) for _ in range(n_hidden)],
        bn_var=[np.ones(arch.hidden_units) for _ in range(n_hidden)],
        feature_manifest=feature_manifest or {},
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward(
    model: ClassifierModel,
    X: np.ndarray,
    mode: str,
    rng: np.random.Generator | None = None,
    update_running: bool = False,
):
    """Batch forward pass; returns (probabilities, cache for backprop).

    ``train`` mode normalizes with batch statistics and samples dropout
    masks (inverted scaling, so inference applies no rescaling);
    ``inference`` mode uses the running statistics and keeps every unit.
    """
    if mode not in ("train", "inference"):
        raise ConfigError(f"unknown forward mode {mode!r}")
    if mode == "train" and rng is None:
        raise ConfigError("train-mode forward needs a random generator for dropout")
    arch = model.architecture
    cache = {"mode": mode, "layers": []}
    a = X

    def dropout(h, p):
        if mode != "train" or p == 0.0:
            return h, None
        mask = rng.random(h.shape) >= p
        return h * mask / (1.0 - p), mask

    a, in_mask = dropout(a, arch.dropout_input)
    cache["input_mask"] = in_mask
    n_layers = len(model.weights)
    for i in range(n_layers - 1):
        z = a @ model.weights[i] + model.biases[i]
        layer = {"a_prev": a, "z": z}
        if arch.batch_norm:
            if mode == "train":
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                if update_running:
                    model.bn_mean[i] *= 1.0 - BN_ALPHA
                    model.bn_mean[i] += BN_ALPHA * mean
                    model.bn_var[i] *= 1.0 - BN_ALPHA
                    model.bn_var[i] += BN_ALPHA * var
            else:
                mean = model.bn_mean[i]
                var = model.bn_var[i]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            x_hat = (z - mean) * inv_std
            z = model.bn_gamma[i] * x_hat + model.bn_beta[i]
            layer.update(x_hat=x_hat, inv_std=inv_std)
        h = np.tanh(z)
        layer["h"] = h
        a, mask = dropout(h, arch.dropout_hidden)
        layer["mask"] = mask
        cache["layers"].append(layer)
    logits = a @ model.weights[-1] + model.biases[-1]
    cache["a_last"] = a
    probs = _sigmoid(logits)
    return probs, cache


def forward(model: ClassifierModel, x, mode: str = "inference",
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Membership probabilities for one song vector or a batch of them."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.architecture.input_dim:
        raise ShapeError(
            f"input has shape {x.shape}, expected "
            f"(..., {model.architecture.input_dim})"
        )
    if not np.isfinite(X).all():
        raise ValidationError("input features contain non-finite values")
    probs, _ = _forward(model, X, mode=mode, rng=rng)
    return probs[0] if single else probs


def bce_loss(model: ClassifierModel, X: np.ndarray, Y: np.ndarray,
             mode: str = "inference",
             rng: np.random.Generator | None = None) -> float:
    """Binary cross-entropy summed over the batch's song-playlist grid,
    probabilities clipped away from 0 and 1 before the logs."""
    probs, _ = _forward(model, np.asarray(X, dtype=np.float64), mode=mode, rng=rng)
    return _bce_from_probs(probs, np.asarray(Y, dtype=np.float64))


def _bce_from_probs(probs: np.ndarray, Y: np.ndarray) -> float:
    if probs.shape != Y.shape:
        raise ShapeError(f"targets {Y.shape} do not match outputs {probs.shape}")
    p = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    return float(-(Y * np.log(p) + (1.0 - Y) * np.log(1.0 - p)).sum())


def loss_and_grads(
    model: ClassifierModel,
    X: np.ndarray,
    Y: np.ndarray,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    update_running: bool = False,
):
    """Loss plus analytic gradients for every trainable parameter, keyed
    like :meth:`ClassifierModel.parameters`."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    probs, cache = _forward(model, X, mode=mode, rng=rng, update_running=update_running)
    loss = _bce_from_probs(probs, Y)
    # d(loss)/d(logits) = probs - Y on unclipped entries; the clipped ones
    # sit on the flat part of the clip, so their gradient is exactly zero.
    inside = (probs > PROB_CLIP) & (probs < 1.0 - PROB_CLIP)
    dlogits = np.where(inside, probs - Y, 0.0)
    grads: dict[str, np.ndarray] = {}
    n_layers = len(model.weights)
    a_last = cache["a_last"]
    grads[f"W{n_layers - 1}"] = a_last.T @ dlogits
    grads[f"b{n_layers - 1}"] = dlogits.sum(axis=0)
    da = dlogits @ model.weights[-1].T
    arch = model.architecture
    for i in range(n_layers - 2, -1, -1):
        layer = cache["layers"][i]
        if layer["mask"] is not None:
            da = da * layer["mask"] / (1.0 - arch.dropout_hidden)
        dz = da * (1.0 - layer["h"] ** 2)
        if arch.batch_norm:
            x_hat, inv_std = layer["x_hat"], layer["inv_std"]
            grads[f"gamma{i}"] = (dz * x_hat).sum(axis=0)
            grads[f"beta{i}"] = dz.sum(axis=0)
            dx_hat = dz * model.bn_gamma[i]
            if mode == "train":
                n = X.shape[0]
                dz = (inv_std / n) * (
                    n * dx_hat
                    - dx_hat.sum(axis=0)
                    - x_hat * (dx_hat * x_hat).sum(axis=0)
                )
            else:
                dz = dx_hat * inv_std
        grads[f"W{i}"] = layer["a_prev"].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        if i > 0:
            da = dz @ model.weights[i].T
    return loss, grads


class AdaGradNesterov:
    """Per-parameter AdaGrad step size with Nesterov momentum applied on
    top of the scaled step."""

    def __init__(self, model: ClassifierModel, learning_rate: float, momentum: float):
        self.lr = learning_rate
        self.momentum = momentum
        self.accumulators = {
            name: np.zeros_like(p) for name, p in model.parameters()
        }
        self.velocities = {
            name: np.zeros_like(p) for name, p in model.parameters()
        }

    def step(self, model: ClassifierModel, grads: dict[str, np.ndarray]) -> None:
        for name, param in model.parameters():
            g = grads[name]
            accu = self.accumulators[name]
            accu += g * g
            delta = -self.lr * g / np.sqrt(accu + ADAGRAD_EPS)
            v = self.velocities[name]
            v *= self.momentum
            v += delta
            param += delta + self.momentum * v


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    validation_recall: float | None = None


def _check_features(features: FeatureMatrix, arch: Architecture) -> None:
    if features.dim != arch.input_dim:
        raise ShapeError(
            f"features have dim {features.dim}, architecture expects {arch.input_dim}"
        )


def _run_epochs(model, X, targets, cfg, rng, epochs, on_epoch=None):
    opt = AdaGradNesterov(model, cfg.learning_rate, cfg.momentum)
    log: list[EpochRecord] = []
    best_loss = np.inf
    last_significant = 0
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(X.shape[0])
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(
                model, X[batch], targets(batch),
                mode="train", rng=rng, update_running=True,
            )
            opt.step(model, grads)
            total += loss
        record = EpochRecord(epoch=epoch, train_loss=total)
        if on_epoch is not None:
            on_epoch(epoch, record)
        log.append(record)
        if total < best_loss * (1.0 - REL_IMPROVEMENT):
            last_significant = epoch
        best_loss = min(best_loss, total)
        if epoch - last_significant >= cfg.patience_epochs:
            break
    return log


def train(
    split: SplitCorpus,
    features: FeatureMatrix,
    arch: Architecture,
    cfg: TrainConfig,
) -> tuple[ClassifierModel, list[EpochRecord]]:
    """Fit on the training portion, tracking validation recall per epoch.

    Stops early once the summed training loss has gone ``patience_epochs``
    epochs without a relative improvement of at least 1e-4, and returns the
    parameters of the epoch with the highest validation recall@100.
    """
    if all(len(v) == 0 for v in split.validation.values()):
        raise ConfigError("training requires a validation split for model selection")
    corpus = split.train
    if arch.output_dim != corpus.n_playlists:
        raise ShapeError(
            f"architecture outputs {arch.output_dim} playlists, corpus has "
            f"{corpus.n_playlists}"
        )
    _check_features(features, arch)
    inter = build_interactions(corpus)
    X = features.subset(corpus.song_ids()).values
    task = continuation_task(split, target="validation")
    candidates = features.subset(task.candidate_ids)

    rng = np.random.default_rng(cfg.seed)
    model = init_model(arch, rng, feature_manifest=features.manifest())
    best_model = model.copy()
    best_recall = -1.0

    def on_epoch(epoch: int, record: EpochRecord) -> None:
        nonlocal best_model, best_recall
        scores = predict_scores(model, candidates)
        report = evaluate(scores, task, ks=(SELECTION_RECALL_K,))
        record.validation_recall = report.recall_at[SELECTION_RECALL_K]
        # Ties go to the later epoch: equally selective, better trained.
        if record.validation_recall >= best_recall:
            best_recall = record.validation_recall
            best_model = model.copy()

    log = _run_epochs(
        model, X, lambda batch: target_rows(inter, batch),
        cfg, rng, cfg.max_epochs, on_epoch,
    )
    return best_model, log


def train_final(
    split: SplitCorpus,
    features: FeatureMatrix,
    arch: Architecture,
    cfg: TrainConfig,
    n_epochs: int,
) -> tuple[ClassifierModel, list[EpochRecord]]:
    """Refit from fresh initialization on train plus validation for the
    epoch count selected during model selection."""
    merged = split.merged_training_corpus()
    if arch.output_dim != merged.n_playlists:
        raise ShapeError("architecture output does not match playlist count")
    _check_features(features, arch)
    inter = build_interactions(merged)
    X = features.subset(merged.song_ids()).values
    rng = np.random.default_rng(cfg.seed)
    model = init_model(arch, rng, feature_manifest=features.manifest())
    log = _run_epochs(
        model, X, lambda batch: target_rows(inter, batch), cfg, rng, n_epochs
    )
    return model, log


def predict_scores(model: ClassifierModel, candidates: FeatureMatrix) -> np.ndarray:
    """Probability of every candidate song belonging to every playlist,
    as an (n_playlists, n_candidates) matrix. Candidates absent from
    training are scored like any other: only their features matter."""
    if candidates.manifest() != model.feature_manifest:
        raise ValidationError(
            f"candidate features {candidates.manifest()} do not match the "
            f"model's training features {model.feature_manifest}"
        )
    probs = forward(model, candidates.values, mode="inference")
    return probs.T


# --- model files ------------------------------------------------------------


def save_classifier_model(model: ClassifierModel, path, config_digest: str = "") -> None:
    arrays: dict[str, np.ndarray] = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    for i in range(len(model.bn_gamma)):
        arrays[f"gamma{i}"] = model.bn_gamma[i]
        arrays[f"beta{i}"] = model.bn_beta[i]
        arrays[f"mean{i}"] = model.bn_mean[i]
        arrays[f"var{i}"] = model.bn_var[i]
    meta = {
        "architecture": asdict(model.architecture),
        "feature_manifest": model.feature_manifest,
        "config_digest": config_digest,
    }
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_classifier_model(path) -> ClassifierModel:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["meta"]))
    arch = Architecture(**meta["architecture"])
    n_layers = arch.hidden_layers + 1
    n_hidden = arch.hidden_layers if arch.batch_norm else 0
    return ClassifierModel(
        architecture=arch,
        weights=[data[f"W{i}"] for i in range(n_layers)],
        biases=[data[f"b{i}"] for i in range(n_layers)],
        bn_gamma=[data[f"gamma{i}"] for i in range(n_hidden)],
        bn_beta=[data[f"beta{i}"] for i in range(n_hidden)],
        bn_mean=[data[f"mean{i}"] for i in range(n_hidden)],
        bn_var=[data[f"var{i}"] for i in range(n_hidden)],
        feature_manifest=meta["feature_manifest"],
    )
