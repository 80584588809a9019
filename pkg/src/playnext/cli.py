"""Command-line interface.

Subcommands mirror the pipeline stages (prepare, synth, features,
train-mlp, train-wmf, evaluate, report) plus ``run`` for the whole chain.
Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 numerical failure.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import replace

import click
import numpy as np

from . import classifier as classifier_mod
from . import corpus as corpus_mod
from . import evaluator as evaluator_mod
from . import factorization as factorization_mod
from . import features as features_mod
from . import interactions as interactions_mod
from . import plots as plots_mod
from . import synth as synth_mod
from .errors import (
    ConfigError,
    DataFormatError,
    NumericalError,
    PlaynextError,
    ValidationError,
)
from .pipeline import (
    ExperimentConfig,
    StageFailure,
    build_feature_spec,
    load_artifacts,
    load_feature_inputs,
    model_scores,
    run_pipeline,
    stage_evaluate,
    stage_report,
)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, StageFailure):
        return _exit_code(exc.cause)
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (DataFormatError, ValidationError, FileNotFoundError)):
        return EXIT_DATA
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    return EXIT_DATA


def _run(action, verbose=False):
    try:
        return action()
    except (PlaynextError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        if verbose:
            raise
        sys.exit(_exit_code(exc))


@click.group()
@click.option("--verbose", is_flag=True, help="Re-raise errors with tracebacks.")
@click.pass_context
def main(ctx, verbose):
    """Playlist continuation: features, classifier, CF baseline, evaluation."""
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose


def _load_config(config, seed, out):
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if config:
        cfg = ExperimentConfig.from_file(config, overrides)
    else:
        cfg = ExperimentConfig.from_dict({}, overrides)
    out_dir = out or cfg.raw.get("out") or "artifacts"
    return cfg, out_dir


@main.command()
@click.option("--config", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--threads", type=int, default=1)
@click.pass_context
def run(ctx, config, seed, out, threads):
    """Full pipeline: prepare, features, train, evaluate, report."""
    def action():
        cfg, out_dir = _load_config(config, seed, out)
        run_pipeline(cfg, out_dir, threads=threads)
        click.echo(f"artifacts written to {out_dir} (config {cfg.digest})")
    _run(action, ctx.obj["verbose"])


@main.command()
@click.option("--config", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.pass_context
def prepare(ctx, config, seed, out):
    """Load or generate the corpus, split it, and write manifests."""
    def action():
        cfg, out_dir = _load_config(config, seed, out)
        run_pipeline(cfg, out_dir, stages=("prepare",))
        click.echo(f"split manifest and statistics written to {out_dir}")
    _run(action, ctx.obj["verbose"])


@main.command("synth")
@click.option("--config", type=click.Path(), default=None,
              help="Experiment config with a corpus.synth section.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def synth_cmd(ctx, config, seed, out):
    """Generate a synthetic corpus and write corpus, features, and truth."""
    def action():
        cfg, _ = _load_config(config, seed, None)
        synth_section = cfg.section("corpus").get("synth", {})
        if seed is not None:
            synth_section["seed"] = seed
        synth_cfg = synth_mod.SynthConfig(**{
            k: tuple(v) if k == "songs_per_playlist" else v
            for k, v in synth_section.items()
        })
        corpus, features, truth = synth_mod.generate(synth_cfg)
        os.makedirs(out, exist_ok=True)
        corpus_mod.save_corpus(corpus, os.path.join(out, "corpus.tsv"))
        features_mod.save_feature_matrix(
            features, os.path.join(out, "features.tsv"), config_digest=cfg.digest
        )
        split_cfg = cfg.section("split")
        split = corpus_mod.split_corpus(
            corpus,
            test_fraction=split_cfg["test_fraction"],
            validation_fraction=split_cfg["validation_fraction"],
            seed=split_cfg["seed"],
            forced_test=truth.cold_songs,
            protect_last_copy=split_cfg["protect_last_copy"],
        )
        corpus_mod.save_split_manifest(
            split, os.path.join(out, "splits.json"), config_digest=cfg.digest
        )
        with open(os.path.join(out, "truth.json"), "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "topic_of": truth.topic_of,
                    "position_of": truth.position_of,
                    "cold_songs": sorted(truth.cold_songs),
                    "dominant_topic": truth.dominant_topic,
                    "playlist_position": truth.playlist_position,
                },
                fh, indent=2, sort_keys=True,
            )
            fh.write("\n")
        click.echo(f"synthetic corpus written to {out}")
    _run(action, ctx.obj["verbose"])


@main.command("features")
@click.option("--kind", required=True,
              type=click.Choice(["mean-timbre", "vq", "tags-song",
                                 "tags-artist", "import"]))
@click.option("--corpus", "corpus_path", type=click.Path(), required=True)
@click.option("--frames", type=click.Path(), default=None)
@click.option("--tags", type=click.Path(), default=None)
@click.option("--embeddings", type=click.Path(), default=None)
@click.option("--path", "import_path", type=click.Path(), default=None,
              help="Precomputed feature file for --kind import.")
@click.option("--codebook-k", type=int, default=features_mod.CODEBOOK_SIZE)
@click.option("--seed", type=int, default=0)
@click.option("--preprocess", "scheme",
              type=click.Choice(["standardize-l2", "l1"]), default=None)
@click.option("--split", "split_path", type=click.Path(), default=None,
              help="Split manifest; standardization statistics then come "
                   "from training songs only.")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def features_cmd(ctx, kind, corpus_path, frames, tags, embeddings, import_path,
                 codebook_k, seed, scheme, split_path, out):
    """Build one feature matrix and write it as a delimited file."""
    def action():
        corpus = corpus_mod.load_corpus(corpus_path)
        split = (
            corpus_mod.load_split_manifest(split_path) if split_path else None
        )
        spec = {"kind": kind, "name": kind, "codebook_k": codebook_k,
                "codebook_seed": seed}
        if frames:
            spec["frames"] = frames
        if tags:
            spec["tags"] = tags
        if embeddings:
            spec["embeddings"] = embeddings
        if import_path:
            spec["path"] = import_path
        inputs = load_feature_inputs(spec)
        matrix = build_feature_spec(spec, inputs, corpus, split)
        if scheme:
            train_ids = (
                split.training_song_ids(True) if split else None
            )
            matrix = features_mod.preprocess(
                matrix, scheme.replace("-", "_"), train_ids=train_ids
            )
        features_mod.save_feature_matrix(matrix, out)
        click.echo(f"{matrix.values.shape[0]}x{matrix.dim} {kind} features -> {out}")
    _run(action, ctx.obj["verbose"])


def _concat_feature_files(paths):
    parts = [features_mod.load_feature_matrix(p) for p in paths]
    return features_mod.concat(parts)


@main.command("train-mlp")
@click.option("--split", "split_path", type=click.Path(), required=True)
@click.option("--features", "feature_paths", type=click.Path(), multiple=True,
              required=True, help="Feature files; several are concatenated.")
@click.option("--layers", type=int, default=2)
@click.option("--units", type=int, default=50)
@click.option("--lr", type=float, default=0.5)
@click.option("--batch", type=int, default=50)
@click.option("--max-epochs", type=int, default=1000)
@click.option("--patience", type=int, default=100)
@click.option("--seed", type=int, default=0)
@click.option("--final/--no-final", default=True,
              help="Refit on train+validation for the selected epoch count.")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def train_mlp(ctx, split_path, feature_paths, layers, units, lr, batch,
              max_epochs, patience, seed, final, out):
    """Train one song-to-playlist classifier configuration."""
    def action():
        split = corpus_mod.load_split_manifest(split_path)
        features = _concat_feature_files(feature_paths)
        arch = classifier_mod.Architecture(
            input_dim=features.dim, output_dim=split.train.n_playlists,
            hidden_layers=layers, hidden_units=units,
        )
        cfg = classifier_mod.TrainConfig(
            learning_rate=lr, batch_size=batch, max_epochs=max_epochs,
            patience_epochs=patience, seed=seed,
        )
        model, log = classifier_mod.train(split, features, arch, cfg)
        best = max(log, key=lambda r: (r.validation_recall, r.epoch),
                   default=None)
        if final and best is not None:
            model, _ = classifier_mod.train_final(
                split, features, arch, cfg, n_epochs=best.epoch
            )
        classifier_mod.save_classifier_model(model, out)
        recall = best.validation_recall if best else float("nan")
        click.echo(
            f"trained {layers}x{units} for {len(log)} epochs "
            f"(best validation recall {recall:.4f}) -> {out}"
        )
    _run(action, ctx.obj["verbose"])


@main.command("train-wmf")
@click.option("--split", "split_path", type=click.Path(), default=None)
@click.option("--logs", "logs_path", type=click.Path(), default=None,
              help="user<TAB>song<TAB>count listening logs to factorize "
                   "instead of the playlist-song matrix.")
@click.option("--depth", type=int, default=factorization_mod.DEFAULT_DEPTH)
@click.option("--weight-observed", type=float, default=2.0)
@click.option("--l2", type=float, default=factorization_mod.DEFAULT_L2)
@click.option("--sweeps", type=int, default=factorization_mod.DEFAULT_SWEEPS)
@click.option("--seed", type=int, default=0)
@click.option("--model-format", type=click.Choice(["text", "npz"]),
              default="text")
@click.option("--export-features", type=click.Path(), default=None,
              help="Also write the song factors as a feature file.")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def train_wmf(ctx, split_path, logs_path, depth, weight_observed, l2, sweeps,
              seed, model_format, export_features, out):
    """Fit the weighted-matrix-factorization model."""
    def action():
        if (split_path is None) == (logs_path is None):
            raise ConfigError("pass exactly one of --split or --logs")
        if split_path:
            split = corpus_mod.load_split_manifest(split_path)
            merged = split.merged_training_corpus()
            matrix = interactions_mod.build_interactions(
                merged, weight_observed=weight_observed
            )
            song_ids = merged.song_ids()
        else:
            matrix, song_ids = _load_listening_logs(logs_path)
        cfg = factorization_mod.WmfConfig(
            depth=depth, weight_observed=weight_observed, l2_weight=l2,
            sweeps=sweeps, seed=seed,
        )
        model = factorization_mod.wmf_fit(matrix, cfg)
        factorization_mod.save_factor_model(model, out, fmt=model_format)
        if export_features:
            feats = factorization_mod.song_factors_as_features(model, song_ids)
            features_mod.save_feature_matrix(feats, export_features)
        click.echo(
            f"wmf depth={depth} l2={l2} objective "
            f"{model.objective_trace[-1]:.4f} -> {out}"
        )
    _run(action, ctx.obj["verbose"])


def _load_listening_logs(path):
    """user<TAB>song<TAB>count file into a confidence-weighted matrix."""
    users: dict[str, int] = {}
    songs: dict[str, int] = {}
    triples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(
                    f"expected 3 tab-separated fields, got {len(parts)}",
                    path=path, line=lineno,
                )
            user, song, count_s = parts
            users.setdefault(user, len(users))
            songs.setdefault(song, len(songs))
            try:
                triples.append((users[user], songs[song], float(count_s)))
            except ValueError:
                raise DataFormatError("non-numeric play count",
                                      path=path, line=lineno) from None
    if not triples:
        raise DataFormatError("listening log file is empty", path=path)
    matrix = interactions_mod.from_counts(
        triples, n_rows=len(users), n_cols=len(songs)
    )
    ordered = sorted(songs, key=songs.__getitem__)
    return matrix, ordered


@main.command("evaluate")
@click.option("--config", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True,
              help="Artifact directory of a previous run.")
@click.option("--model", "model_path", type=click.Path(), default=None,
              help="Evaluate this model file instead of the artifact "
                   "directory's; needs a single --scores-from value.")
@click.option("--scores-from", "models", multiple=True,
              type=click.Choice(["mlp", "wmf", "random"]), default=None)
@click.option("--ks", default=None, help="Comma-separated cutoffs, e.g. 10,30,100.")
@click.option("--coldstart/--no-coldstart", default=None,
              help="Override the config's cold-start breakdown switch.")
@click.pass_context
def evaluate_cmd(ctx, config, out, model_path, models, ks, coldstart):
    """Re-evaluate existing model files; reports are byte-stable."""
    def action():
        cfg, out_dir = _load_config(config, None, out)
        if models:
            cfg.raw["evaluate"]["models"] = list(models)
        if ks:
            cfg.raw["evaluate"]["ks"] = [int(k) for k in ks.split(",")]
        if coldstart is not None:
            cfg.raw["evaluate"]["coldstart"] = coldstart
        state = load_artifacts(cfg, out_dir)
        if model_path:
            wanted = cfg.raw["evaluate"]["models"]
            if len(wanted) != 1 or wanted[0] == "random":
                raise ConfigError(
                    "--model needs exactly one --scores-from of mlp or wmf"
                )
            if wanted[0] == "mlp":
                state["mlp_model"] = classifier_mod.load_classifier_model(model_path)
            else:
                state["wmf_model"] = factorization_mod.load_factor_model(model_path)
        state = stage_evaluate(cfg, out_dir, state)
        click.echo(
            "evaluated: " + ", ".join(
                f"{name} med={rep.median_rank:g}"
                for name, rep in state["reports"].items()
            )
        )
    _run(action, ctx.obj["verbose"])


@main.command("report")
@click.option("--config", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def report_cmd(ctx, config, out):
    """Render the comparison table and figures from written reports."""
    def action():
        cfg, out_dir = _load_config(config, None, out)
        state = {"reports": {}}
        for name in cfg.section("evaluate")["models"]:
            path = os.path.join(out_dir, "reports", f"{name}.json")
            state["reports"][name] = evaluator_mod.load_report(path)
        stage_report(cfg, out_dir, state)
        click.echo(f"comparison table and figures written under {out_dir}/reports")
    _run(action, ctx.obj["verbose"])


if __name__ == "__main__":
    main()
