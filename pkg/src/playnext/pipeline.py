"""Experiment orchestration: prepare, features, train, evaluate, report.

One experiment configuration file drives the full pipeline; every artifact
embeds a digest of the resolved configuration so reruns and comparisons can
be tied back to what produced them. Reports contain no timestamps, so a
rerun with the same configuration and seeds is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import yaml

from . import classifier as classifier_mod
from . import corpus as corpus_mod
from . import evaluator as evaluator_mod
from . import factorization as factorization_mod
from . import features as features_mod
from . import interactions as interactions_mod
from . import plots as plots_mod
from . import synth as synth_mod
from .errors import ConfigError, DataFormatError, PlaynextError

STAGES = ("prepare", "features", "train", "evaluate", "report")

_TOP_LEVEL_KEYS = {"seed", "out", "corpus", "split", "features", "mlp", "wmf",
                   "evaluate"}


class StageFailure(PlaynextError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    raw: dict
    digest: str

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise DataFormatError(f"invalid YAML: {exc}", path=path) from exc
        return cls.from_dict(raw, overrides)

    @classmethod
    def from_dict(cls, raw: dict, overrides: dict | None = None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("experiment config must be a mapping")
        raw = dict(raw)
        for key, value in (overrides or {}).items():
            if value is not None:
                raw[key] = value
        unknown = set(raw) - _TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        resolved = _resolve(raw)
        digest = hashlib.sha256(
            json.dumps(resolved, sort_keys=True).encode("utf-8")
        ).hexdigest()[:16]
        return cls(raw=resolved, digest=digest)

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})


def _resolve(raw: dict) -> dict:
    """Fill defaults (derived seeds in particular) so the digest captures the
    exact run."""
    out = json.loads(json.dumps(raw))  # deep copy, JSON-clean
    seed = int(out.get("seed", 0))
    out["seed"] = seed
    corpus_cfg = out.setdefault("corpus", {})
    is_synth = "synth" in corpus_cfg
    if is_synth and "path" in corpus_cfg:
        raise ConfigError("corpus config cannot have both 'synth' and 'path'")
    if is_synth:
        corpus_cfg["synth"].setdefault("seed", seed)
    split = out.setdefault("split", {})
    split.setdefault("test_fraction", 0.2)
    split.setdefault("validation_fraction", 0.2)
    split.setdefault("seed", seed + 1)
    split.setdefault("protect_last_copy", is_synth)
    feats = out.setdefault("features", {})
    feats.setdefault("build", [{"name": "synthetic", "kind": "synthetic",
                                "preprocess": "standardize-l2"}] if is_synth else [])
    names = [spec.get("name", spec.get("kind")) for spec in feats["build"]]
    if len(names) != len(set(names)):
        raise ConfigError("feature spec names must be unique")
    feats.setdefault("use", names[:1])
    mlp = out.setdefault("mlp", {})
    mlp.setdefault("layers", [2])
    mlp.setdefault("units", [50])
    mlp.setdefault("learning_rate", 0.5)
    mlp.setdefault("batch_size", 50)
    mlp.setdefault("max_epochs", 1000)
    mlp.setdefault("patience_epochs", 100)
    mlp.setdefault("momentum", 0.9)
    mlp.setdefault("seed", seed + 2)
    wmf = out.setdefault("wmf", {})
    wmf.setdefault("depth", 200)
    wmf.setdefault("weight_observed", 2.0)
    wmf.setdefault("l2", 10.0)
    wmf.setdefault("sweeps", 15)
    wmf.setdefault("seed", seed + 3)
    wmf.setdefault("model_format", "text")
    ev = out.setdefault("evaluate", {})
    ev.setdefault("ks", [10, 30, 100])
    ev.setdefault("models", ["mlp", "wmf", "random"])
    ev.setdefault("random_seed", seed + 4)
    ev.setdefault("coldstart", True)
    return out


# --- stage implementations ---------------------------------------------------


def _ensure_dirs(out_dir):
    for sub in ("features", "models", "reports", os.path.join("reports", "figures")):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)


def stage_prepare(cfg: ExperimentConfig, out_dir):
    """Load or generate the corpus, restrict it to songs covered by every
    configured feature input, split it, and write the manifest plus the
    descriptive statistics table.

    Coverage is a property of the raw inputs (which songs have frames,
    usable tags, precomputed vectors), so the restriction happens before
    the split; feature models that need split knowledge (codebooks exclude
    test-only songs from their fitting pool) are fitted afterwards, in the
    features stage.
    """
    corpus_cfg = cfg.section("corpus")
    truth = None
    if "synth" in corpus_cfg:
        synth_cfg = synth_mod.SynthConfig(**{
            k: tuple(v) if k == "songs_per_playlist" else v
            for k, v in corpus_cfg["synth"].items()
        })
        corpus, features, truth = synth_mod.generate(synth_cfg)
        corpus_mod.save_corpus(corpus, os.path.join(out_dir, "corpus.tsv"))
    elif "path" in corpus_cfg:
        corpus = corpus_mod.load_corpus(corpus_cfg["path"])
        fil = corpus_cfg.get("filter")
        if fil is not None:
            corpus = corpus_mod.filter_corpus(
                corpus,
                min_artists=fil.get("min_artists", corpus_mod.MIN_ARTISTS),
                max_per_artist=fil.get("max_per_artist", corpus_mod.MAX_PER_ARTIST),
                min_songs=fil.get("min_songs", corpus_mod.MIN_SONGS),
            )
        features = None
    else:
        raise ConfigError("corpus config needs either 'synth' or 'path'")

    specs = cfg.section("features")["build"]
    # Input parsing failures belong to the features stage even though
    # coverage must be known before the split.
    try:
        inputs = {spec.get("name", spec.get("kind")): load_feature_inputs(spec)
                  for spec in specs}
        covered = None
        for spec in specs:
            name = spec.get("name", spec.get("kind"))
            cov = spec_coverage(spec, inputs[name], corpus, features)
            covered = cov if covered is None else covered & cov
    except (PlaynextError, OSError) as exc:
        raise StageFailure("features", exc) from exc
    if covered is not None:
        corpus = corpus_mod.restrict_to_featured(corpus, covered)
        if corpus.n_playlists == 0:
            raise ConfigError(
                "no playlist survives the feature-coverage restriction"
            )

    split_cfg = cfg.section("split")
    split = corpus_mod.split_corpus(
        corpus,
        test_fraction=split_cfg["test_fraction"],
        validation_fraction=split_cfg["validation_fraction"],
        seed=split_cfg["seed"],
        forced_test=truth.cold_songs if truth else None,
        protect_last_copy=split_cfg["protect_last_copy"],
    )
    corpus_mod.save_split_manifest(
        split, os.path.join(out_dir, "splits.json"), config_digest=cfg.digest
    )
    _write_stats(split, os.path.join(out_dir, "stats.tsv"), cfg.digest)
    return {"corpus": corpus, "split": split, "truth": truth,
            "synth_features": features, "feature_inputs": inputs}


def _write_stats(split, path, digest):
    stats = corpus_mod.split_statistics(split)
    cols = ("min", "1q", "med", "3q", "max")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_digest={digest}\n")
        fh.write("portion\tmeasure\t" + "\t".join(cols) + "\n")
        for portion in ("training", "test"):
            for measure in ("songs_per_playlist", "artists_per_playlist",
                            "song_frequency"):
                row = stats[portion][measure]
                fh.write(
                    portion + "\t" + measure + "\t"
                    + "\t".join(repr(float(row[c])) for c in cols) + "\n"
                )


_FEATURE_KINDS = ("synthetic", "synthetic-family", "mean-timbre", "vq",
                  "tags-song", "tags-artist", "import")


def _spec_file(spec: dict, key: str):
    try:
        return spec[key]
    except KeyError:
        raise ConfigError(
            f"feature spec {spec.get('name', spec.get('kind'))!r} needs {key!r}"
        ) from None


def load_feature_inputs(spec: dict) -> dict:
    """Parse the raw input files a feature spec points at, once."""
    kind = spec.get("kind")
    if kind not in _FEATURE_KINDS:
        raise ConfigError(f"unknown feature kind {kind!r}")
    inputs: dict = {}
    if kind in ("mean-timbre", "vq"):
        inputs["frames"] = features_mod.load_timbre_frames(_spec_file(spec, "frames"))
    elif kind in ("tags-song", "tags-artist"):
        inputs["annotations"] = features_mod.load_tag_annotations(
            _spec_file(spec, "tags")
        )
        inputs["dictionary"] = features_mod.load_embedding_dictionary(
            _spec_file(spec, "embeddings")
        )
    elif kind == "import":
        inputs["matrix"], inputs["skipped"] = features_mod.import_precomputed(
            _spec_file(spec, "path"), kind=spec.get("name", kind)
        )
    return inputs


def _usable_annotation(annotation, dictionary) -> bool:
    return any(
        weight > 0 and any(w in dictionary for w in tag.split())
        for tag, weight in annotation.tags
    )


def spec_coverage(spec: dict, inputs: dict, corpus, synth_features=None) -> set[str]:
    """Songs of the corpus for which this feature can be computed; songs
    outside the intersection over all specs get dropped before splitting."""
    kind = spec.get("kind")
    if kind in ("synthetic", "synthetic-family"):
        if synth_features is None and kind == "synthetic":
            raise ConfigError("'synthetic' features need a synth corpus")
        return set(corpus.song_index)
    if kind in ("mean-timbre", "vq"):
        return {
            s for s, f in inputs["frames"].items() if f.frames.shape[0] > 0
        } & set(corpus.song_index)
    if kind == "tags-song":
        return {
            s for s, ann in inputs["annotations"].items()
            if _usable_annotation(ann, inputs["dictionary"])
        } & set(corpus.song_index)
    if kind == "tags-artist":
        usable_artists = {
            a for a, ann in inputs["annotations"].items()
            if _usable_annotation(ann, inputs["dictionary"])
        }
        return {
            s for s, a in corpus.artist_by_song().items() if a in usable_artists
        }
    if kind == "import":
        return set(inputs["matrix"].ids) & set(corpus.song_index)
    raise ConfigError(f"unknown feature kind {kind!r}")


def build_feature_spec(spec: dict, inputs: dict, corpus, split, truth=None,
                       synth_features=None):
    """One feature matrix from its config spec, raw (not yet preprocessed)."""
    kind = spec.get("kind")
    name = spec.get("name", kind)
    if kind == "synthetic":
        if synth_features is None:
            raise ConfigError("'synthetic' features need a synth corpus")
        return replace(synth_features, kind=name)
    if kind == "synthetic-family":
        if truth is None:
            raise ConfigError("'synthetic-family' features need a synth corpus")
        matrix, _ = synth_mod.feature_family(
            truth,
            n_topics=len(set(truth.topic_of.values())),
            dim=int(spec.get("dim", 16)),
            noise=float(spec.get("noise", 0.15)),
            seed=int(spec["seed"]),
            kind=name,
            parts=tuple(spec.get("parts", ("topic", "position"))),
            position_dim=int(spec.get("position_dim", 8)),
        )
        return matrix
    if kind == "mean-timbre":
        return replace(features_mod.build_mean_timbre(inputs["frames"]), kind=name)
    if kind == "vq":
        frames = inputs["frames"]
        dev_songs = _development_song_ids(corpus, split)
        pool_frames = [frames[s].frames for s in frames if s in dev_songs]
        if not pool_frames:
            pool_frames = [f.frames for f in frames.values()]
        book = features_mod.fit_codebook(
            np.vstack(pool_frames),
            k=int(spec.get("codebook_k", features_mod.CODEBOOK_SIZE)),
            seed=int(spec.get("codebook_seed", 0)),
        )
        return replace(features_mod.build_vq(frames, book), kind=name)
    if kind in ("tags-song", "tags-artist"):
        artist_by_song = corpus.artist_by_song() if kind == "tags-artist" else None
        return features_mod.build_tag_features(
            inputs["annotations"], inputs["dictionary"], kind=name,
            artist_by_song=artist_by_song,
        )
    if kind == "import":
        return replace(inputs["matrix"], kind=name)
    raise ConfigError(f"unknown feature kind {kind!r}")


def _development_song_ids(corpus, split):
    """Song pool for fitting feature models: development-filtered corpus
    minus test-only songs, to avoid fitting on withheld material."""
    dev = corpus_mod.development_filter(corpus)
    pool = set(dev.song_index)
    if split is not None:
        test_only = split.test_song_ids() - split.training_song_ids(True)
        pool -= test_only
    return pool


def stage_features(cfg: ExperimentConfig, out_dir, state):
    corpus = state["corpus"]
    split = state["split"]
    feats_cfg = cfg.section("features")
    built: dict[str, features_mod.FeatureMatrix] = {}
    train_ids = split.training_song_ids(include_validation=True)
    corpus_songs = corpus.song_ids()
    for spec in feats_cfg["build"]:
        name = spec.get("name", spec.get("kind"))
        matrix = build_feature_spec(
            spec, state["feature_inputs"][name], corpus, split,
            truth=state.get("truth"),
            synth_features=state.get("synth_features"),
        )
        # Raw builders cover whatever their inputs cover; the experiment
        # works on the restricted corpus, in its dense song order.
        matrix = matrix.subset(corpus_songs)
        scheme = spec.get("preprocess")
        if scheme:
            matrix = features_mod.preprocess(
                matrix, scheme.replace("-", "_"), train_ids=train_ids
            )
        features_mod.save_feature_matrix(
            matrix, os.path.join(out_dir, "features", f"{name}.tsv"),
            config_digest=cfg.digest,
        )
        built[name] = matrix
    use = feats_cfg["use"]
    if not use:
        raise ConfigError("no features configured under features.use")
    missing = [n for n in use if n not in built]
    if missing:
        raise ConfigError(f"'use' names unbuilt features: {missing}")
    combined = features_mod.concat([built[n] for n in use])
    state["features"] = built
    state["model_features"] = combined
    return state


def _grid_cell(args):
    """One grid-search cell; returns its selection metrics (worker-safe)."""
    split, features, layers, units, train_kw = args
    arch = classifier_mod.Architecture(
        input_dim=features.dim,
        output_dim=split.train.n_playlists,
        hidden_layers=layers,
        hidden_units=units,
    )
    cfg = classifier_mod.TrainConfig(**train_kw)
    _, log = classifier_mod.train(split, features, arch, cfg)
    best = max(log, key=lambda r: (r.validation_recall, r.epoch), default=None)
    return {
        "layers": layers,
        "units": units,
        "best_epoch": best.epoch if best else 0,
        "best_validation_recall": best.validation_recall if best else 0.0,
        "epochs_run": len(log),
        "log": [
            {"epoch": r.epoch, "train_loss": r.train_loss,
             "validation_recall": r.validation_recall}
            for r in log
        ],
    }


def stage_train(cfg: ExperimentConfig, out_dir, state, threads: int = 1):
    split = state["split"]
    features = state["model_features"]
    mlp_cfg = cfg.section("mlp")
    train_kw = dict(
        learning_rate=mlp_cfg["learning_rate"],
        batch_size=mlp_cfg["batch_size"],
        max_epochs=mlp_cfg["max_epochs"],
        patience_epochs=mlp_cfg["patience_epochs"],
        momentum=mlp_cfg["momentum"],
        seed=mlp_cfg["seed"],
    )
    cells = [
        (split, features, layers, units, train_kw)
        for layers in mlp_cfg["layers"]
        for units in mlp_cfg["units"]
    ]
    if threads > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_grid_cell, cells))
    else:
        results = [_grid_cell(c) for c in cells]
    winner = max(
        results, key=lambda r: (r["best_validation_recall"], -r["layers"], -r["units"])
    )
    arch = classifier_mod.Architecture(
        input_dim=features.dim,
        output_dim=split.train.n_playlists,
        hidden_layers=winner["layers"],
        hidden_units=winner["units"],
    )
    final_model, final_log = classifier_mod.train_final(
        split, features, arch, classifier_mod.TrainConfig(**train_kw),
        n_epochs=winner["best_epoch"],
    )
    classifier_mod.save_classifier_model(
        final_model, os.path.join(out_dir, "models", "mlp.npz"),
        config_digest=cfg.digest,
    )

    wmf_cfg = cfg.section("wmf")
    merged = split.merged_training_corpus()
    inter = interactions_mod.build_interactions(
        merged, weight_observed=wmf_cfg["weight_observed"]
    )
    wmf_model = factorization_mod.wmf_fit(
        inter,
        factorization_mod.WmfConfig(
            depth=wmf_cfg["depth"],
            weight_observed=wmf_cfg["weight_observed"],
            l2_weight=wmf_cfg["l2"],
            sweeps=wmf_cfg["sweeps"],
            seed=wmf_cfg["seed"],
        ),
    )
    wmf_ext = "npz" if wmf_cfg["model_format"] == "npz" else "txt"
    factorization_mod.save_factor_model(
        wmf_model, os.path.join(out_dir, "models", f"wmf.{wmf_ext}"),
        fmt=wmf_cfg["model_format"], config_digest=cfg.digest,
    )
    with open(os.path.join(out_dir, "models", "training_log.json"), "w",
              encoding="utf-8") as fh:
        json.dump(
            {
                "config_digest": cfg.digest,
                "grid": results,
                "selected": {k: winner[k] for k in
                             ("layers", "units", "best_epoch",
                              "best_validation_recall")},
                "final_epochs": len(final_log),
                "wmf_objective_trace": wmf_model.objective_trace,
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    state["mlp_model"] = final_model
    state["wmf_model"] = wmf_model
    state["merged"] = merged
    return state


def model_scores(name, state, cfg, task):
    """Score source for one model name over the task's candidate list."""
    if name == "mlp":
        model = state["mlp_model"]
        candidates = state["model_features"].subset(task.candidate_ids)
        return classifier_mod.predict_scores(model, candidates)
    if name == "wmf":
        merged = state["merged"]
        cols = np.asarray(
            [merged.song_index.get(s, -1) for s in task.candidate_ids],
            dtype=np.int64,
        )
        return factorization_mod.wmf_scores(state["wmf_model"], cols)
    if name == "random":
        return evaluator_mod.RandomScores(
            len(task.playlist_ids), task.n_candidates,
            seed=cfg.section("evaluate")["random_seed"],
        )
    raise ConfigError(f"unknown model {name!r}")


def stage_evaluate(cfg: ExperimentConfig, out_dir, state):
    split = state["split"]
    ev = cfg.section("evaluate")
    task = evaluator_mod.continuation_task(split, target="test")
    reports = {}
    for name in ev["models"]:
        scores = model_scores(name, state, cfg, task)
        manifest = (
            state["model_features"].manifest() if name == "mlp" else None
        )
        report = evaluator_mod.evaluate(
            scores, task, ks=tuple(ev["ks"]), model=name,
            feature_manifest=manifest,
        )
        report.config_digest = cfg.digest
        if not ev.get("coldstart", True):
            report.bins = {}
        evaluator_mod.write_report(
            report, os.path.join(out_dir, "reports", f"{name}.json")
        )
        reports[name] = report
    state["reports"] = reports
    state["task"] = task
    return state


def stage_report(cfg: ExperimentConfig, out_dir, state):
    ev = cfg.section("evaluate")
    named = [(name, state["reports"][name]) for name in ev["models"]]
    table = evaluator_mod.compare(named)
    rdir = os.path.join(out_dir, "reports")
    with open(os.path.join(rdir, "comparison.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_digest={cfg.digest}\n")
        fh.write(table.to_tsv())
    with open(os.path.join(rdir, "comparison.txt"), "w", encoding="utf-8") as fh:
        fh.write(table.to_text())
    plots_mod.render_metrics_figure(
        table, os.path.join(rdir, "figures", "metrics.png")
    )
    plots_mod.render_coldstart_figure(
        table, os.path.join(rdir, "figures", "coldstart.png")
    )
    return state


def load_artifacts(cfg: ExperimentConfig, out_dir) -> dict:
    """Rebuild the evaluation state from a finished run's artifact files, so
    the evaluate and report stages can rerun in isolation."""
    split = corpus_mod.load_split_manifest(os.path.join(out_dir, "splits.json"))
    use = cfg.section("features")["use"]
    parts = [
        features_mod.load_feature_matrix(
            os.path.join(out_dir, "features", f"{name}.tsv")
        )
        for name in use
    ]
    state: dict = {
        "split": split,
        "merged": split.merged_training_corpus(),
        "model_features": features_mod.concat(parts),
    }
    mlp_path = os.path.join(out_dir, "models", "mlp.npz")
    if os.path.exists(mlp_path):
        state["mlp_model"] = classifier_mod.load_classifier_model(mlp_path)
    for ext in ("txt", "npz"):
        wmf_path = os.path.join(out_dir, "models", f"wmf.{ext}")
        if os.path.exists(wmf_path):
            state["wmf_model"] = factorization_mod.load_factor_model(wmf_path)
            break
    return state


def run_pipeline(cfg: ExperimentConfig, out_dir, threads: int = 1,
                 stages=STAGES) -> dict:
    """Execute the requested stages in order, tagging failures with the
    stage name and leaving a failure marker beside partial artifacts."""
    os.makedirs(out_dir, exist_ok=True)
    _ensure_dirs(out_dir)
    state: dict = {}
    for stage in STAGES:
        if stage not in stages:
            continue
        try:
            if stage == "prepare":
                state = stage_prepare(cfg, out_dir)
            elif stage == "features":
                state = stage_features(cfg, out_dir, state)
            elif stage == "train":
                state = stage_train(cfg, out_dir, state, threads=threads)
            elif stage == "evaluate":
                state = stage_evaluate(cfg, out_dir, state)
            elif stage == "report":
                state = stage_report(cfg, out_dir, state)
        except (PlaynextError, OSError) as exc:
            failure = (
                exc if isinstance(exc, StageFailure) else StageFailure(stage, exc)
            )
            marker = os.path.join(out_dir, "FAILED")
            with open(marker, "w", encoding="utf-8") as fh:
                fh.write(f"stage: {failure.stage}\nerror: {failure.cause}\n")
            raise failure from exc
    return state
