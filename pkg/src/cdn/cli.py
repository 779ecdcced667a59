"""Command line entry point: ``cdn {toy,train,ood,attack}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attack import robustness_sweep
from .baselines import MLP, Ensemble, VmgMLP
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import Dataset, IdxError, ToySpec, gen_toy, load_idx
from .metrics import entropy_cdf, ood_report, predictive_entropy
from .model import CompoundDensityNetwork
from .seeding import derive, rng_for
from .training import NumericalError, TrainConfig, accuracy, select_lambda, train

logger = logging.getLogger("cdn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _fmt(v) -> str:
    return repr(float(v))


def write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path: Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def build(cfg: ExperimentConfig):
    """Freshly initialized model for the configured kind."""
    m = cfg.model
    arch = m.architecture()
    rng = rng_for(cfg.seed, "init")
    if m.kind in ("ml-cdn", "vb-cdn"):
        return CompoundDensityNetwork(arch, rng, bayesian=m.kind == "vb-cdn", sampling=m.sampling,
                                      factor_bias=m.factor_bias, posterior_init=m.posterior_init)
    if m.kind == "mcd":
        return MLP(arch, rng, dropout=m.dropout)
    if m.kind == "ensemble":
        return Ensemble(arch, m.members, seed=derive(cfg.seed, "ensemble"))
    return VmgMLP(arch, rng, posterior_init=m.posterior_init)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(**{**cfg.train.__dict__, "seed": cfg.seed})


def fit(model, dataset: Dataset, tcfg: TrainConfig) -> list:
    """Train in place; returns one loss trace per independently trained network."""
    if isinstance(model, Ensemble):
        _, traces = model.fit(dataset, tcfg)
        return traces
    _, tr = train(model, dataset, tcfg)
    return [tr]


def _idx(images, labels, split: str) -> Dataset:
    try:
        return load_idx(images, labels, split)
    except (IdxError, OSError) as exc:
        raise DataError(str(exc)) from exc


def train_set(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.kind == "toy":
        return gen_toy(ToySpec(d.variant, n=d.n, seed=d.toy_seed))
    return _idx(d.train_images, d.train_labels, "train")


def test_set(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.test_images is None or d.test_labels is None:
        raise DataError("data.test_images and data.test_labels are required for evaluation")
    return _idx(d.test_images, d.test_labels, "test")


def _load(cfg: ExperimentConfig, path):
    if path is None:
        raise ConfigError("--checkpoint", "this command needs a trained checkpoint")
    try:
        model, meta = load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    want = cfg.model.architecture().to_dict()
    if meta.get("kind") != cfg.model.kind or meta.get("architecture") != want:
        raise ConfigError("--checkpoint", f"checkpoint holds {meta.get('kind')} {meta.get('architecture')}, "
                          f"config describes {cfg.model.kind} {want}")
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_toy(cfg: ExperimentConfig, out: Path, checkpoint=None) -> dict:
    """Train on a toy set and write the predictive curve over ``[-6, 6]``."""
    if cfg.model.task != "regression" or cfg.data.kind != "toy":
        raise ConfigError("model.task", "toy runs need a regression model and toy data")
    ds = train_set(cfg)
    model = build(cfg)
    traces = fit(model, ds, train_config(cfg))
    traces[0].write_csv(out / "loss.csv")
    xs = np.linspace(-6.0, 6.0, cfg.eval.grid_points)[:, None]
    mean, var = model.predict(xs, rng_for(cfg.seed, "predict"), cfg.eval.samples)
    std = np.sqrt(var[:, 0])
    mixing = np.full(len(xs), np.nan)
    posterior = float("nan")
    summary = {"kind": cfg.model.kind, "variant": cfg.data.variant}
    if isinstance(model, CompoundDensityNetwork):
        mixing = model.average_mixing_variance(xs, rng_for(cfg.seed, "mixing"), cfg.eval.samples)
        inside = np.linspace(-4.0, 4.0, cfg.eval.grid_points)[:, None]
        mv = model.average_mixing_variance(inside, rng_for(cfg.seed, "mixing"), cfg.eval.samples)
        summary["mixing_var_neg"] = float(mv[inside[:, 0] < 0].mean())
        summary["mixing_var_nonneg"] = float(mv[inside[:, 0] >= 0].mean())
        summary["mixing_var"] = float(mv.mean())
        if getattr(model, "bayesian", False):
            mv = model.average_mixing_variance(inside, rng_for(cfg.seed, "mixing"), cfg.eval.samples, at_mean=True)
            summary["mixing_var_neg_at_mean"] = float(mv[inside[:, 0] < 0].mean())
            summary["mixing_var_nonneg_at_mean"] = float(mv[inside[:, 0] >= 0].mean())
    if isinstance(model, (VmgMLP,)) or getattr(model, "bayesian", False):
        posterior = model.average_posterior_variance()
        summary["posterior_var"] = float(posterior)
    a = np.abs(xs[:, 0])
    summary["std_ratio"] = float(std[(a >= 5) & (a <= 6)].mean() / std[a <= 3].mean())
    write_csv(out / "toy_curve.csv", ["x", "mean", "std", "mixing_var", "posterior_var"],
              zip(xs[:, 0], mean[:, 0], std, mixing, np.full(len(xs), posterior)))
    write_json(out / "toy_summary.json", summary)
    if checkpoint is not None:
        save_checkpoint(model, checkpoint, cfg.seed, cfg.train.objective)
    return summary


def cmd_train(cfg: ExperimentConfig, out: Path, checkpoint=None) -> dict:
    ds = train_set(cfg)
    tcfg = train_config(cfg)
    summary = {"kind": cfg.model.kind}
    if cfg.eval.select_lambda and cfg.model.kind == "ml-cdn":
        best, scores = select_lambda(lambda: build(cfg), ds, tcfg, val_fraction=cfg.data.validation_fraction,
                                     samples=cfg.eval.samples)
        tcfg = TrainConfig(**{**tcfg.__dict__, "lam": best})
        summary["lambda_scores"] = {repr(k): v for k, v in scores.items()}
    summary["lam"] = tcfg.lam
    model = build(cfg)
    traces = fit(model, ds, tcfg)
    if len(traces) == 1:
        traces[0].write_csv(out / "loss.csv")
    else:
        for i, tr in enumerate(traces):
            tr.write_csv(out / f"loss_member{i}.csv")
    path = Path(checkpoint) if checkpoint is not None else out / "model.ckpt"
    save_checkpoint(model, path, cfg.seed, tcfg.objective)
    if cfg.model.task == "classification" and cfg.data.test_images is not None:
        summary["test_accuracy"] = accuracy(model, test_set(cfg), rng_for(cfg.seed, "eval"), cfg.eval.samples)
    write_json(out / "train_summary.json", summary)
    return summary


def cmd_ood(cfg: ExperimentConfig, out: Path, checkpoint=None) -> dict:
    d = cfg.data
    if d.ood_images is None or d.ood_labels is None:
        raise ConfigError("data.ood_images", "ood runs need data.ood_images and data.ood_labels")
    model = _load(cfg, checkpoint)
    inset, outset = test_set(cfg), _idx(d.ood_images, d.ood_labels, "ood")
    if inset.inputs.shape[1] != outset.inputs.shape[1]:
        raise DataError(f"in-set has {inset.inputs.shape[1]} features, out-set {outset.inputs.shape[1]}")
    p_in = model.predict(inset.inputs, rng_for(cfg.seed, "ood-in"), cfg.eval.samples)
    p_out = model.predict(outset.inputs, rng_for(cfg.seed, "ood-out"), cfg.eval.samples)
    report = ood_report(p_in, p_out, cfg.eval.ood_score).to_dict()
    for name, probs in (("in", p_in), ("out", p_out)):
        values, frac = entropy_cdf(predictive_entropy(probs))
        write_csv(out / f"entropy_cdf_{name}.csv", ["entropy", "fraction"], zip(values, frac))
    write_json(out / "ood_report.json", report)
    return report


def attack_subset(ds: Dataset, size: int, seed: int) -> Dataset:
    idx = rng_for(seed, "attack-subset").permutation(len(ds))[: min(size, len(ds))]
    return ds.subset(np.sort(idx), "attack")


def cmd_attack(cfg: ExperimentConfig, out: Path, checkpoint=None) -> list:
    model = _load(cfg, checkpoint)
    if cfg.model.task != "classification":
        raise ConfigError("model.task", "attacks need a classification model")
    sub = attack_subset(test_set(cfg), cfg.eval.attack_size, cfg.seed)
    curve = robustness_sweep(model, sub.inputs, sub.targets, cfg.eval.eps_grid, derive(cfg.seed, "attack"),
                             cfg.eval.samples, cfg.eval.attack_passes)
    write_csv(out / "robustness.csv", ["eps", "accuracy", "mean_entropy"],
              ((p.eps, p.accuracy, p.mean_entropy) for p in curve))
    return curve


COMMANDS = {"toy": cmd_toy, "train": cmd_train, "ood": cmd_ood, "attack": cmd_attack}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdn", description="Compound density networks: training and evaluation.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML experiment configuration")
    p.add_argument("--checkpoint", help="checkpoint to write (toy, train) or read (ood, attack)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="global seed, unsigned 64-bit (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed", "must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        out = Path(args.out if args.out is not None else cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args.checkpoint)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, IdxError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
