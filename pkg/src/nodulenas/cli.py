"""Command-line entry point for the full pipeline.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every run echoes its
effective configuration into the output directory.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import datasynth, popsearch, traineval
from .archspace import enumerate_space, format_spec, parse_spec
from .config import ConfigError, RunConfig, echo_config, load_config
from .datasynth import GeneratorParams, load_dataset, read_volume
from .network import (build_network, count_params, load_checkpoint,
                      save_checkpoint)
from .popsearch import measure_latency, pop_search, read_search_log
from .traineval import (EnsembleModel, confusion_metrics, dbi, ensemble_sweep,
                        evaluate_ensemble, evaluate_network,
                        export_attention_slice, extract_feature_set,
                        train_model, write_report)

_CONFIG_OPT = click.option("--config", "config_path",
                           type=click.Path(exists=True, dir_okay=False),
                           default=None, help="YAML run configuration.")


def _cfg(config_path, **overrides) -> RunConfig:
    return load_config(config_path, overrides)


def _split(cfg: RunConfig, data_dir):
    """(train, val, test) sample lists according to the manifest's folds."""
    manifest, samples = load_dataset(data_dir)
    by_fold = lambda s: manifest.folds[s.id]
    test = [s for s in samples if by_fold(s) == cfg.test_fold]
    val = [s for s in samples if by_fold(s) == cfg.val_fold]
    held_out = (cfg.test_fold, cfg.val_fold)
    train_fold_ids = [f for f in range(cfg.folds) if f not in held_out]
    train_fold_ids = train_fold_ids[:cfg.train_folds]
    train = [s for s in samples if by_fold(s) in train_fold_ids]
    return train, val, test


def _ranked_records(records):
    """Best accuracy first; latency breaks ties."""
    return sorted(records, key=lambda r: (-r.accuracy, r.latency_ms, format_spec(r.spec)))


@click.group()
def cli():
    """Architecture search, training and evaluation for 3D nodule classifiers."""


@cli.command("gen-data")
@_CONFIG_OPT
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n", "n_samples", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--noise", "noise_amplitude", type=float, default=None)
def gen_data(config_path, out_dir, n_samples, seed, noise_amplitude):
    """Generate a synthetic dataset with a stratified fold split."""
    cfg = _cfg(config_path, n_samples=n_samples, seed=seed,
               noise_amplitude=noise_amplitude)
    params = GeneratorParams(noise_amplitude=cfg.noise_amplitude)
    manifest = datasynth.generate_dataset(out_dir, cfg.n_samples, seed=cfg.seed,
                                          k=cfg.folds, params=params)
    echo_config(cfg, out_dir)
    click.echo(f"wrote {len(manifest.samples)} volumes to {out_dir}")


@cli.command("search")
@_CONFIG_OPT
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--budget", type=int, default=None)
@click.option("--epochs", "search_epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
def search(config_path, data_dir, out_dir, budget, search_epochs, seed):
    """Run the pruning-based architecture search over the configured space."""
    cfg = _cfg(config_path, budget=budget, search_epochs=search_epochs, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    train, val, _ = _split(cfg, data_dir)
    net_cfg = cfg.net_config()
    universe = list(enumerate_space(cfg.constraints()))

    def param_count(spec):
        return count_params(build_network(spec, net_cfg, seed=0))

    def evaluator(spec):
        # short proxy training; validation is scored once at the end rather
        # than per epoch to keep each search evaluation cheap
        result = train_model(spec, net_cfg, train, [],
                             epochs=cfg.search_epochs, seed=cfg.seed,
                             params=cfg.train_params())
        acc = confusion_metrics(evaluate_network(result.network, val))["accuracy"]
        latency = measure_latency(result.network, warmup=cfg.latency_warmup,
                                  reps=cfg.latency_reps)
        click.echo(f"  {format_spec(spec)}: acc={acc:.3f} "
                   f"lat={latency:.2f}ms params={param_count(spec)}")
        return acc, latency

    state = pop_search(universe, evaluator, budget=cfg.budget,
                       patience=cfg.patience, param_count=param_count,
                       seed=cfg.seed, log_path=out / "search.log")
    sections = {}
    for i, rec in enumerate(_ranked_records(state.frontier)):
        sections[f"frontier-{i}"] = {"spec": format_spec(rec.spec),
                                     "accuracy": rec.accuracy,
                                     "latency_ms": rec.latency_ms,
                                     "params": rec.params}
    (out / "reports").mkdir(exist_ok=True)
    write_report(out / "reports" / "search.txt", sections)
    click.echo(f"evaluated {len(state.trained)} of {len(universe)} specs; "
               f"pruned {len(state.pruned)}; frontier size {len(state.frontier)}")


@cli.command("train")
@_CONFIG_OPT
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--spec", "spec_texts", multiple=True,
              help="Architecture text; repeatable.")
@click.option("--search-log", "search_log", type=click.Path(exists=True),
              default=None, help="Pick architectures from a search log instead.")
@click.option("--top", type=int, default=3, help="How many log architectures to train.")
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
def train_cmd(config_path, data_dir, out_dir, spec_texts, search_log, top,
              epochs, seed):
    """Train one or more architectures and save best-validation checkpoints."""
    cfg = _cfg(config_path, epochs=epochs, seed=seed)
    if not spec_texts and search_log is None:
        raise click.UsageError("provide --spec or --search-log")
    specs = [parse_spec(t) for t in spec_texts]
    if search_log is not None:
        records = _ranked_records(popsearch.pareto_frontier(read_search_log(search_log)))
        specs += [r.spec for r in records[:top]]
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    echo_config(cfg, out)
    train, val, _ = _split(cfg, data_dir)
    net_cfg = cfg.net_config()
    sections = {}
    for i, spec in enumerate(specs):
        result = train_model(spec, net_cfg, train, val, epochs=cfg.epochs,
                             seed=cfg.seed + i, params=cfg.train_params())
        ckpt = out / "checkpoints" / f"model_{i:03d}.nlw"
        save_checkpoint(result.network, ckpt)
        sections[f"model-{i}"] = {
            "spec": format_spec(spec), "checkpoint": str(ckpt),
            "best_val_accuracy": result.best_val_accuracy,
            "params": count_params(result.network),
            "final_loss": result.history[-1]["loss"] if result.history else None,
        }
        click.echo(f"{format_spec(spec)} -> {ckpt} "
                   f"(val acc {result.best_val_accuracy:.3f})")
    write_report(out / "reports" / "train.txt", sections)


def _load_members(paths, cfg: RunConfig):
    net_cfg = cfg.net_config()
    return [load_checkpoint(p, net_cfg) for p in paths]


@cli.command("eval")
@_CONFIG_OPT
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", "ckpt", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(), default=None)
def eval_cmd(config_path, data_dir, ckpt, out_dir):
    """Evaluate one checkpoint on the held-out test fold."""
    cfg = _cfg(config_path)
    network = _load_members([ckpt], cfg)[0]
    _, _, test = _split(cfg, data_dir)
    counts = evaluate_network(network, test, threshold=cfg.threshold)
    metrics = confusion_metrics(counts)
    section = {"checkpoint": str(ckpt), "spec": format_spec(network.spec),
               "TP": counts.TP, "FN": counts.FN, "FP": counts.FP, "TN": counts.TN,
               **metrics}
    _emit(section, out_dir, cfg, "eval.txt", "model")


@cli.command("ensemble")
@_CONFIG_OPT
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", "ckpts", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(), default=None)
def ensemble_cmd(config_path, data_dir, ckpts, out_dir):
    """Majority-vote evaluation of an odd set of checkpoints on the test fold."""
    cfg = _cfg(config_path)
    ensemble = EnsembleModel(_load_members(ckpts, cfg), threshold=cfg.threshold)
    _, _, test = _split(cfg, data_dir)
    counts = evaluate_ensemble(ensemble, test)
    metrics = confusion_metrics(counts)
    section = {"members": len(ckpts),
               "TP": counts.TP, "FN": counts.FN, "FP": counts.FP, "TN": counts.TN,
               **metrics}
    _emit(section, out_dir, cfg, "ensemble.txt", "ensemble")


@cli.command("sweep")
@_CONFIG_OPT
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", "ckpts", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--sizes", default="1,3,5,7,9", show_default=True)
@click.option("--repeats", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def sweep_cmd(config_path, data_dir, ckpts, sizes, repeats, seed, out_dir):
    """Mean ensemble metrics over random member subsets of each size."""
    cfg = _cfg(config_path, seed=seed)
    pool = _load_members(ckpts, cfg)
    _, _, test = _split(cfg, data_dir)
    size_list = [int(s) for s in sizes.split(",") if s.strip()]
    rows = ensemble_sweep(pool, test, sizes=size_list, repeats=repeats,
                          seed=cfg.seed)
    sections = {f"ensemble-n{row['n']}": row for row in rows}
    for name, row in sections.items():
        click.echo(f"{name}: " + " ".join(
            f"{k}={row[k]}" for k in ("accuracy", "sensitivity", "specificity", "f1")))
    if out_dir is not None:
        out = Path(out_dir)
        (out / "reports").mkdir(parents=True, exist_ok=True)
        echo_config(cfg, out)
        write_report(out / "reports" / "sweep.txt", sections)


@cli.command("dbi")
@_CONFIG_OPT
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", "ckpt", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(), default=None)
def dbi_cmd(config_path, data_dir, ckpt, out_dir):
    """Feature separability of a checkpoint on the test fold."""
    cfg = _cfg(config_path)
    network = _load_members([ckpt], cfg)[0]
    _, _, test = _split(cfg, data_dir)
    values = dbi(extract_feature_set(network, test))
    _emit({"checkpoint": str(ckpt), **values}, out_dir, cfg, "dbi.txt", "dbi")


@cli.command("export-attention")
@_CONFIG_OPT
@click.option("--checkpoint", "ckpt", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--volume", "volume_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--stage", type=int, default=2, show_default=True)
@click.option("--slice", "slice_index", default="middle", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def export_attention(config_path, ckpt, volume_path, stage, slice_index, out_dir):
    """Export one axial slice of a stage's spatial attention map as PGM."""
    cfg = _cfg(config_path)
    network = _load_members([ckpt], cfg)[0]
    sample = read_volume(volume_path)
    out = Path(out_dir) / "attention"
    path = export_attention_slice(network, sample.voxels, stage,
                                  slice_index=slice_index, out_dir=out,
                                  prefix=f"{sample.id}_stage{stage}")
    echo_config(cfg, Path(out_dir))
    click.echo(f"wrote {path}")


@cli.command("bench")
@_CONFIG_OPT
@click.option("--spec", "spec_text", required=True)
@click.option("--reps", type=int, default=None)
@click.option("--warmup", type=int, default=None)
@click.option("--seed", type=int, default=None)
def bench(config_path, spec_text, reps, warmup, seed):
    """Measure single-sample forward latency of one architecture."""
    cfg = _cfg(config_path, latency_reps=reps, latency_warmup=warmup, seed=seed)
    network = build_network(parse_spec(spec_text), cfg.net_config(), seed=cfg.seed)
    ms = measure_latency(network, warmup=cfg.latency_warmup, reps=cfg.latency_reps)
    click.echo(f"{spec_text}: {ms:.3f} ms/volume, {count_params(network)} params")


def _emit(section: dict, out_dir, cfg: RunConfig, filename: str, title: str):
    for key, val in section.items():
        click.echo(f"{key} = {'undefined' if val is None else val}")
    if out_dir is not None:
        out = Path(out_dir)
        (out / "reports").mkdir(parents=True, exist_ok=True)
        echo_config(cfg, out)
        write_report(out / "reports" / filename, {title: section})


def dispatch(argv) -> int:
    """Run the CLI on argv (no program name); returns the exit code."""
    try:
        cli.main(args=list(argv), standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except (OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
