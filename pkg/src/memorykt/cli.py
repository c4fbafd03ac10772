"""Command line entry point: ``memorykt <subcommand>``."""

from __future__ import annotations

import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import yaml

from . import plotting
from .autodiff import load_params, save_params
from .data import (DataError, filter_short, kfold, load_interactions, split_train_test,
                   write_interactions)
from .forgetting import Forgetting, forget_level
from .metrics import case_study as run_case_study
from .metrics import pearson_r
from .model import ModelConfig
from .synthetic import SimParams, generate
from .training import (TINY, TrainConfig, TrainingDiverged, build_windows,
                       check_model_gradients, evaluate_batch, train)

log = logging.getLogger("memorykt")


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path, num_concepts=None, min_len=3):
    try:
        d = load_interactions(path, num_concepts)
    except DataError as err:
        raise click.ClickException(str(err)) from None
    return d, filter_short(d, min_len)


@click.group()
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              help="YAML/JSON file of option defaults; explicit flags win.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def cli(ctx, config, verbose):
    """memoryKT knowledge tracing: data, forgetting scores, training and evaluation."""
    logging.basicConfig(level=logging.DEBUG if verbose > 1 else logging.INFO if verbose else
                        logging.WARNING, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    if config:
        values = yaml.safe_load(Path(config).read_text()) or {}
        if not isinstance(values, dict):
            raise click.UsageError("config file must hold a mapping")
        values = {k.replace("-", "_"): v for k, v in values.items()}
        ctx.default_map = {name: values for name in cli.commands}


@cli.command()
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
@click.option("--num-concepts", type=int, default=None)
@click.option("--min-len", type=int, default=3, show_default=True)
def ingest(data, out, num_concepts, min_len):
    """Validate an interaction CSV and write manifest.json."""
    raw, kept = _load(data, num_concepts, min_len)
    manifest = kept.manifest()
    manifest.update(raw_students=len(raw), raw_interactions=raw.num_interactions,
                    min_len=min_len)
    out = _out_dir(out)
    _dump(manifest, out / "manifest.json")
    click.echo(json.dumps(manifest, sort_keys=True))


@cli.command()
@click.option("--students", type=int, default=500, show_default=True)
@click.option("--concepts", type=int, default=20, show_default=True)
@click.option("--steps", type=int, default=60, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
def synth(students, concepts, steps, seed, out):
    """Generate a simulated corpus plus its ground-truth half-lives."""
    try:
        d, truth = generate(students, concepts, steps, seed, SimParams())
    except ValueError as err:
        raise click.ClickException(str(err)) from None
    out = _out_dir(out)
    write_interactions(d, out / "interactions.csv")
    truth.write_csv(out / "ground_truth.csv")
    click.echo(f"wrote {len(d)} students, {d.num_interactions} interactions to {out}")


def _summary(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"min": float(v.min()), "max": float(v.max()), "mean": float(v.mean()),
            "deciles": [float(q) for q in np.quantile(v, np.linspace(0.1, 0.9, 9))]}


@cli.command("forget-score")
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
@click.option("--min-len", type=int, default=3, show_default=True)
@click.option("--num-concepts", type=int, default=None)
@click.option("--ground-truth", type=click.Path(exists=True, dir_okay=False),
              help="ground_truth.csv from `synth`; adds r(tau, score) to the summary.")
def forget_score(data, out, min_len, num_concepts, ground_truth):
    """Fit forgetting statistics on DATA and score every student."""
    _, d = _load(data, num_concepts, min_len)
    if len(d) == 0:
        raise click.ClickException("no students left after filtering")
    fg = Forgetting.fit(d)
    scores = [fg.final_score(s) for s in d.sequences]
    out = _out_dir(out)
    with open(out / "forget_scores.csv", "w") as fh:
        fh.write("student_id,final_score,level\n")
        for s, score in zip(d.sequences, scores):
            fh.write(f"{s.student_id},{score:.10g},{forget_level(score, fg.population)}\n")
    summary = {"num_students": len(d), "scores": _summary(scores),
               "population": _summary(fg.population.scores)}
    if ground_truth:
        import pandas as pd

        truth = pd.read_csv(ground_truth, dtype={"student_id": str}).set_index("student_id")
        tau = truth.loc[d.student_ids, "tau"].to_numpy()
        summary["pearson_tau_score"] = pearson_r(tau, scores)
    _dump(summary, out / "summary.json")
    fg.save(out / "forgetting.json")
    plotting.forget_histogram(scores, fg.population.scores, out / "forget_scores.png")
    click.echo(json.dumps(summary, sort_keys=True))


def _model_options(f):
    opts = [
        click.option("--embed-dim", type=int, default=64, show_default=True),
        click.option("--hidden-dim", type=int, default=128, show_default=True),
        click.option("--latent-dim", type=int, default=32, show_default=True),
        click.option("--forget-embed-dim", type=int, default=16, show_default=True),
        click.option("--no-vae", is_flag=True, help="Drop the latent path (ablation)."),
        click.option("--no-forget", is_flag=True, help="Constant forget level 5 (ablation)."),
        click.option("--recon-target", type=click.Choice(["embedding", "onehot"]),
                     default="embedding", show_default=True),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _train_options(f):
    opts = [
        click.option("--lambda-rec", type=float, default=0.5, show_default=True),
        click.option("--lambda-kld", type=float, default=1.0, show_default=True),
        click.option("--lr", type=float, default=1e-3, show_default=True),
        click.option("--weight-decay", type=float, default=1e-5, show_default=True),
        click.option("--dropout", type=float, default=0.1, show_default=True),
        click.option("--epochs", type=int, default=200, show_default=True),
        click.option("--patience", type=int, default=10, show_default=True),
        click.option("--batch-size", type=int, default=32, show_default=True),
        click.option("--window", type=int, default=50, show_default=True),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _split(run: dict):
    """Rebuild (test, folds) exactly as `train` made them."""
    d = load_interactions(run["data"], run["num_concepts"])
    d = filter_short(d, run["min_len"])
    rest, test = split_train_test(d, run["test_frac"], seed=run["seed"])
    if run["folds"] >= 2:
        folds = kfold(rest, run["folds"], seed=run["seed"])
    else:
        folds = [split_train_test(rest, 0.2, seed=run["seed"])]
    return test, folds


def _train_fold(job: tuple) -> dict:
    index, train_d, valid_d, model_cfg, train_cfg, fold_dir = job
    fold_dir = Path(fold_dir)
    fold_dir.mkdir(parents=True, exist_ok=True)
    fg = Forgetting.fit(train_d)
    try:
        store, report = train(train_d, valid_d, model_cfg, train_cfg, fg)
    except TrainingDiverged as err:
        err.report.save(fold_dir / "report.json", fold_dir / "epochs.csv")
        return {"fold": index, "error": str(err)}
    save_params(store, fold_dir / "params.npz",
                {"model": model_cfg.to_json(), "fold": index, "best_epoch": report.best_epoch})
    fg.save(fold_dir / "forgetting.json")
    report.save(fold_dir / "report.json", fold_dir / "epochs.csv")
    plotting.training_curves(report, fold_dir / "curves.png")
    valid = evaluate_batch(store, model_cfg, build_windows(valid_d, train_cfg.window, fg))
    return {"fold": index, "best_epoch": report.best_epoch, "valid_auc": valid["auc"],
            "valid_acc": valid["acc"], "stop_reason": report.stop_reason}


@cli.command("train")
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--min-len", type=int, default=3, show_default=True)
@click.option("--test-frac", type=float, default=0.2, show_default=True)
@click.option("--num-concepts", type=int, default=None)
@click.option("--parallel-folds", is_flag=True, help="Train folds in worker processes.")
@_model_options
@_train_options
def train_cmd(data, out, folds, seed, min_len, test_frac, num_concepts, parallel_folds,
              embed_dim, hidden_dim, latent_dim, forget_embed_dim, no_vae, no_forget,
              recon_target, lambda_rec, lambda_kld, lr, weight_decay, dropout, epochs,
              patience, batch_size, window):
    """Hold out a test split, then train one model per cross-validation fold."""
    if folds < 1:
        raise click.BadParameter("must be >= 1", param_hint="--folds")
    try:
        d = load_interactions(data, num_concepts)
        train_cfg = TrainConfig(lambda_rec=lambda_rec, lambda_kld=lambda_kld, learning_rate=lr,
                                weight_decay=weight_decay, dropout=dropout, max_epochs=epochs,
                                patience=patience, batch_size=batch_size, window=window,
                                seed=seed)
        model_cfg = ModelConfig(d.num_concepts, embed_dim=embed_dim, hidden_dim=hidden_dim,
                                latent_dim=latent_dim, forget_embed_dim=forget_embed_dim,
                                use_vae=not no_vae, use_forget=not no_forget,
                                recon_target=recon_target)
        run = {"data": str(Path(data).resolve()), "num_concepts": d.num_concepts,
               "min_len": min_len, "test_frac": test_frac, "folds": folds, "seed": seed,
               "model": model_cfg.to_json(), "train": asdict(train_cfg)}
        test, fold_sets = _split(run)
    except (DataError, ValueError) as err:
        raise click.ClickException(str(err)) from None
    out = _out_dir(out)
    _dump(run, out / "run.json")
    jobs = []
    for i, (tr, va) in enumerate(fold_sets):
        cfg_i = TrainConfig(**{**asdict(train_cfg), "seed": seed + i})
        jobs.append((i, tr, va, model_cfg, cfg_i, str(out / f"fold_{i}")))
    if parallel_folds and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(_train_fold, jobs))
    else:
        results = [_train_fold(job) for job in jobs]
    ok = [r for r in results if "error" not in r]
    summary = {"folds": results, "test_students": len(test)}
    if ok:
        for key in ("valid_auc", "valid_acc"):
            vals = np.array([r[key] for r in ok])
            summary[f"{key}_mean"] = float(vals.mean())
            summary[f"{key}_std"] = float(vals.std())
    _dump(summary, out / "summary.json")
    with open(out / "summary.csv", "w") as fh:
        fh.write("fold,best_epoch,valid_auc,valid_acc\n")
        for r in ok:
            fh.write(f"{r['fold']},{r['best_epoch']},{r['valid_auc']:.10g},{r['valid_acc']:.10g}\n")
    for r in results:
        if "error" in r:
            log.error("fold %d: %s", r["fold"], r["error"])
    if ok:
        click.echo(f"valid AUC {summary['valid_auc_mean']:.4f} +- {summary['valid_auc_std']:.4f} "
                   f"over {len(ok)} fold(s)")
    if len(ok) < len(results):
        raise click.ClickException("training diverged on at least one fold")


def _load_fold(run_dir: Path, fold: int):
    fold_dir = run_dir / f"fold_{fold}"
    if not (fold_dir / "params.npz").exists():
        raise click.ClickException(f"no checkpoint in {fold_dir}")
    store, meta = load_params(fold_dir / "params.npz")
    return store, ModelConfig(**meta["model"]), Forgetting.load(fold_dir / "forgetting.json")


def _read_run(run_dir) -> dict:
    path = Path(run_dir) / "run.json"
    if not path.exists():
        raise click.ClickException(f"{path} not found; point --run at a `train` output")
    return json.loads(path.read_text())


@cli.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--fold", type=int, default=None, help="Single fold (default: all).")
@click.option("--split", "which", type=click.Choice(["test", "valid"]), default="test",
              show_default=True)
@click.option("--out", "out", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: the run directory).")
def evaluate(run_dir, fold, which, out):
    """AUC/ACC of trained fold checkpoints on the test or validation split."""
    run_dir = Path(run_dir)
    run = _read_run(run_dir)
    test, folds = _split(run)
    indices = [fold] if fold is not None else list(range(len(folds)))
    rows = []
    for i in indices:
        if not 0 <= i < len(folds):
            raise click.ClickException(f"fold {i} out of range")
        store, cfg, fg = _load_fold(run_dir, i)
        data = test if which == "test" else folds[i][1]
        m = evaluate_batch(store, cfg, build_windows(data, run["train"]["window"], fg))
        rows.append({"fold": i, **m})
    result = {"split": which, "folds": rows,
              "auc_mean": float(np.mean([r["auc"] for r in rows])),
              "acc_mean": float(np.mean([r["acc"] for r in rows]))}
    out = _out_dir(out or run_dir)
    name = f"metrics_{which}" + (f"_fold{fold}" if fold is not None else "")
    _dump(result, out / f"{name}.json")
    with open(out / f"{name}.csv", "w") as fh:
        fh.write("fold,auc,acc,n_predictions\n")
        for r in rows:
            fh.write(f"{r['fold']},{r['auc']:.10g},{r['acc']:.10g},{r['n_predictions']}\n")
    click.echo(json.dumps(result, sort_keys=True))


@cli.command("case-study")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--fold", type=int, default=0, show_default=True)
@click.option("--students", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--split", "which", type=click.Choice(["test", "all"]), default="test",
              show_default=True)
@click.option("--out", "out", type=click.Path(file_okay=False), default=None)
def case_study_cmd(run_dir, fold, students, seed, which, out):
    """Reconstruction quality vs forgetting score vs correct rate per student."""
    run_dir = Path(run_dir)
    run = _read_run(run_dir)
    test, folds = _split(run)
    data = test
    if which == "all":
        d = filter_short(load_interactions(run["data"], run["num_concepts"]), run["min_len"])
        data = d
    store, cfg, fg = _load_fold(run_dir, fold)
    try:
        study = run_case_study(store, cfg, data, fg, students, seed, run["train"]["window"])
    except ValueError as err:
        raise click.ClickException(str(err)) from None
    out = _out_dir(out or run_dir / "case_study")
    study.write_csv(out / "case_study.csv")
    _dump(study.correlations(), out / "correlations.json")
    plotting.case_study_scatter(study, out / "case_study.png")
    click.echo(json.dumps(study.correlations(), sort_keys=True))


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--eps", type=float, default=1e-5, show_default=True)
@click.option("--tol", type=float, default=1e-4, show_default=True)
@click.option("--out", "out", type=click.Path(file_okay=False), default=None)
def gradcheck(seed, eps, tol, out):
    """Finite-difference check of every parameter gradient on a tiny model."""
    report = check_model_gradients(ModelConfig(**TINY), seed=seed, eps=eps, tol=tol)
    lines = report.lines()
    lines.append(f"{'PASS' if report.passed else 'FAIL'} all ({len(report.errors)} parameters)")
    text = "\n".join(lines) + "\n"
    click.echo(text, nl=False)
    if out:
        out = _out_dir(out)
        (out / "gradcheck.txt").write_text(text)
        _dump({"tol": tol, "eps": eps, "errors": report.errors, "passed": report.passed},
              out / "gradcheck.json")
    if not report.passed:
        sys.exit(1)


def main():
    cli(prog_name="memorykt")


if __name__ == "__main__":
    main()
