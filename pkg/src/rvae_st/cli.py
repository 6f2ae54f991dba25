"""Command-line entry point: gen | train | sample | eval | inspect-checkpoint.

Every option can also come from an INI file (``--config``), one section per
command; command-line flags override file values. Each run writes the
resolved configuration next to its outputs.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Checkpoint, CheckpointError, CsvFormatError, fit_scaler,
                   gen_psd_dataset, gen_sine, is_batch_csv, load_batch_csv, load_checkpoint,
                   load_csv, save_batch_csv, save_checkpoint)
from .evaluation import (append_results, avg_elbo, discriminative_score, esp_curve,
                         pca_overlap_export, psd_compare)
from .numerics import Rng, derive_seed
from .rvae import init_rvae, param_count, sample
from .training import TrainPlan, linear_schedule, subsequent_train

log = logging.getLogger("rvae_st")


class ConfigError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return float(text)


# name -> (type, default, help); None default means "not set"
OPTIONS = {
    "gen": {
        "kind": (str, "sine", "generator: sine | psd"),
        "samples": (int, 1000, "number of sequences"),
        "length": (int, 100, "sequence length"),
        "channels": (int, 5, "sine channels"),
        "seed": (int, 0, "master seed"),
        "out": (str, "data.csv", "output batch CSV"),
    },
    "train": {
        "data": (str, None, "batch CSV or time x channels CSV"),
        "gen_kind": (str, None, "regenerate sine data per phase instead of --data"),
        "gen_samples": (int, 10000, "samples per length for --gen-kind"),
        "scheme": (str, "subsequent", "subsequent | conventional"),
        "schedule": (str, "100:100:1000", "start:step:end, inclusive"),
        "length": (int, None, "length for the conventional scheme"),
        "hidden": (int, 256, "LSTM width"),
        "layers": (int, 4, "LSTM layers per stack"),
        "latent": (int, 20, "latent dimension"),
        "batch_size": (int, 32, "mini-batch size"),
        "max_epochs": (int, 2000, "epoch cap per phase"),
        "patience": (int, 50, "early-stopping patience"),
        "lr": (float, 1e-4, "Adam learning rate"),
        "beta": (float, 0.1, "KL weight"),
        "alpha_scale": (float, 500.0, "alpha = alpha_scale / l"),
        "clip_norm": (_opt_float, None, "optional global gradient-norm clip"),
        "chunk_fraction": (float, 0.1, "chunk step as a fraction of l"),
        "scale": (_bool, True, "min-max scale channels to [-1, 1]"),
        "seed": (int, 0, "master seed"),
        "out_dir": (str, "run", "output directory"),
    },
    "sample": {
        "checkpoint": (str, None, "trained checkpoint"),
        "n": (int, 10, "number of samples"),
        "length": (int, 100, "sequence length"),
        "seed": (int, 0, "master seed"),
        "out": (str, "samples.csv", "output batch CSV"),
    },
    "eval": {
        "metric": (str, None, "avg_elbo | disc | esp | psd | pca"),
        "real": (str, None, "real batch CSV"),
        "synth": (str, None, "synthetic batch CSV"),
        "split_real": (_bool, False, "disc: use two disjoint halves of --real"),
        "checkpoint": (str, None, "model checkpoint (esp)"),
        "scorer": (str, None, "scoring checkpoint (avg_elbo)"),
        "window": (int, 50, "avg_elbo window"),
        "beta": (float, 0.1, "avg_elbo KL weight"),
        "length": (int, 1000, "esp length"),
        "untrained_channels": (int, None, "esp: use a fresh model with this many channels"),
        "hidden": (int, 256, "width of a fresh esp model"),
        "reps": (int, 1, "repetitions"),
        "disc_max_epochs": (int, 2000, "discriminator epoch cap"),
        "dataset": (str, "data", "dataset label for result rows"),
        "results": (str, "results.csv", "metrics CSV (appended)"),
        "out": (str, None, "curve / spectrum / projection CSV"),
        "seed": (int, 0, "master seed"),
    },
    "inspect-checkpoint": {
        "checkpoint": (str, None, "checkpoint to describe"),
    },
}

REQUIRED = {"sample": ("checkpoint",), "eval": ("metric",), "inspect-checkpoint": ("checkpoint",)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rvae-st", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="INI file with a [%s] section" % cmd)
        for name, (typ, default, help_) in opts.items():
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None,
                           help=f"{help_} (default: {default})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file section, then explicit flags."""
    opts = OPTIONS[command]
    cfg = {name: default for name, (_, default, _) in opts.items()}
    if args.config:
        parser = configparser.ConfigParser()
        if not parser.read(args.config):
            raise ConfigError(f"cannot read config file {args.config}")
        for section in parser.sections():
            if section not in OPTIONS:
                raise ConfigError(f"unknown config section [{section}]")
        if parser.has_section(command):
            for key, text in parser.items(command):
                name = key.replace("-", "_")
                if name not in opts:
                    raise ConfigError(f"unknown key '{key}' in [{command}]")
                try:
                    cfg[name] = opts[name][0](text)
                except ValueError as exc:
                    raise ConfigError(f"bad value for '{key}': {exc}") from None
    for name in opts:
        value = getattr(args, name, None)
        if value is not None:
            cfg[name] = value
    for name in REQUIRED.get(command, ()):
        if cfg[name] is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required")
    return cfg


def write_resolved(path: Path, command: str, cfg: dict) -> None:
    parser = configparser.ConfigParser()
    parser[command] = {k: "none" if v is None else str(v) for k, v in sorted(cfg.items())}
    with open(path, "w") as fh:
        parser.write(fh)


def parse_schedule(text: str):
    parts = str(text).split(":")
    if len(parts) == 1:
        return (int(parts[0]),)
    if len(parts) != 3:
        raise ConfigError(f"schedule must be start:step:end, got {text!r}")
    start, step, end = (int(p) for p in parts)
    sched = linear_schedule(start, step, end)
    if step >= 300 and len(sched) > 1:
        log.warning("schedule step %d >= 300: large length jumps tend to degrade results", step)
    return sched


def _load_batch(path) -> np.ndarray:
    if is_batch_csv(path):
        return load_batch_csv(path)[0]
    return load_csv(path).values[None]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: dict) -> None:
    out = Path(cfg["out"])
    rng = Rng(derive_seed(cfg["seed"], "gen", cfg["kind"]))
    if cfg["kind"] == "sine":
        batch = gen_sine(cfg["samples"], cfg["length"], cfg["channels"], rng)
    elif cfg["kind"] == "psd":
        batch = gen_psd_dataset(cfg["samples"], cfg["length"], rng)
    else:
        raise ConfigError(f"unknown generator kind {cfg['kind']!r}")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_batch_csv(out, batch)
    write_resolved(out.with_name(out.name + ".config.ini"), "gen", cfg)
    log.info("wrote %s %s", out, batch.shape)


def cmd_train(cfg: dict) -> None:
    out_dir = Path(cfg["out_dir"])
    if cfg["scheme"] == "subsequent":
        schedule = parse_schedule(cfg["schedule"])
    elif cfg["scheme"] == "conventional":
        if cfg["length"] is None:
            raise ConfigError("--length is required for the conventional scheme")
        schedule = (cfg["length"],)
    else:
        raise ConfigError(f"unknown scheme {cfg['scheme']!r}")
    plan = TrainPlan(schedule=schedule, alpha_scale=cfg["alpha_scale"], beta=cfg["beta"],
                     batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
                     patience=cfg["patience"], lr=cfg["lr"], clip_norm=cfg["clip_norm"],
                     seed=cfg["seed"], hidden=cfg["hidden"], layers=cfg["layers"],
                     latent=cfg["latent"], chunk_fraction=cfg["chunk_fraction"])
    scaler = None
    if cfg["gen_kind"] is not None:
        if cfg["gen_kind"] != "sine":
            raise ConfigError("--gen-kind supports only 'sine'")
        n = cfg["gen_samples"]
        source = lambda l, phase: gen_sine(n, l, rng=Rng(derive_seed(cfg["seed"], "sine", l)))
    elif cfg["data"] is not None:
        data = _load_batch(cfg["data"])
        if data.shape[1] < schedule[-1]:
            raise ConfigError(f"data length {data.shape[1]} is shorter than l={schedule[-1]}")
        if cfg["scale"]:
            scaler = fit_scaler(data)
            data = scaler.apply(data)
        source = data
    else:
        raise ConfigError("either --data or --gen-kind is required")

    params, reports = subsequent_train(source, plan)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "model.ckpt",
                    Checkpoint(params=params, scaler=scaler, seed=cfg["seed"], schedule=list(schedule)))
    with open(out_dir / "phases.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "length", "epochs_run", "best_epoch", "best_val_loss", "best_val_elbo_norm"])
        for i, r in enumerate(reports):
            w.writerow([i, r.length, r.epochs_run, r.best_epoch, repr(r.best_val_loss),
                        repr(r.best_val_elbo_norm)])
    write_resolved(out_dir / "config.ini", "train", cfg)


def cmd_sample(cfg: dict) -> None:
    ckpt = load_checkpoint(cfg["checkpoint"])
    batch = sample(cfg["n"], cfg["length"], ckpt.params, Rng(derive_seed(cfg["seed"], "sample")))
    if ckpt.scaler is not None:
        batch = ckpt.scaler.invert(batch)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_batch_csv(out, batch)
    write_resolved(out.with_name(out.name + ".config.ini"), "sample", cfg)


def _need(cfg, *names):
    for name in names:
        if cfg[name] is None:
            raise ConfigError(f"metric {cfg['metric']} needs --{name.replace('_', '-')}")


def cmd_eval(cfg: dict) -> None:
    metric = cfg["metric"]
    rows = []
    out = Path(cfg["out"]) if cfg["out"] else None
    for rep in range(cfg["reps"]):
        rng = Rng(derive_seed(cfg["seed"], metric, rep))
        if metric == "avg_elbo":
            _need(cfg, "synth")
            if cfg["scorer"] is None:
                raise ConfigError("avg_elbo needs a scoring checkpoint (--scorer)")
            scorer = load_checkpoint(cfg["scorer"])
            synth = _load_batch(cfg["synth"])
            if scorer.scaler is not None:
                synth = scorer.scaler.apply(synth)
            rep_ = avg_elbo(synth, scorer.params, window=cfg["window"], beta=cfg["beta"],
                            scorer_id=Path(cfg["scorer"]).name)
            rows.append(("avg_elbo", cfg["dataset"], synth.shape[1], rep, rep_.value))
        elif metric == "disc":
            _need(cfg, "real")
            real = _load_batch(cfg["real"])
            if cfg["split_real"]:
                perm = Rng(derive_seed(cfg["seed"], "split-real")).permutation(len(real))
                half = len(real) // 2
                real, synth = real[perm[:half]], real[perm[half:2 * half]]
            else:
                _need(cfg, "synth")
                synth = _load_batch(cfg["synth"])
            score = discriminative_score(real, synth, rng, max_epochs=cfg["disc_max_epochs"])
            rows.append(("disc", cfg["dataset"], real.shape[1], rep, score.score))
        elif metric == "esp":
            if cfg["checkpoint"] is not None:
                params = load_checkpoint(cfg["checkpoint"]).params
            elif cfg["untrained_channels"] is not None:
                params = init_rvae(cfg["untrained_channels"], Rng(derive_seed(cfg["seed"], "init")),
                                   hidden=cfg["hidden"])
            else:
                raise ConfigError("esp needs --checkpoint or --untrained-channels")
            curve = esp_curve(params, cfg["length"], rng)
            rows.append(("esp_r_final", cfg["dataset"], cfg["length"], rep, curve.r[-1]))
            if out is not None:
                with open(out.with_name(f"{out.stem}.rep{rep}{out.suffix}") if cfg["reps"] > 1 else out,
                          "w", newline="") as fh:
                    fh.write("t,r\n")
                    for t, r in zip(curve.t, curve.r):
                        fh.write(f"{int(t)},{float(r)!r}\n")
        elif metric == "psd":
            _need(cfg, "real", "synth")
            real, synth = _load_batch(cfg["real"]), _load_batch(cfg["synth"])
            cmp_ = psd_compare(real, synth, channel=0)
            for k, off in enumerate(cmp_.offsets):
                rows.append((f"psd_peak{k + 1}_offset", cfg["dataset"], real.shape[1], rep, off))
            if out is not None:
                with open(out, "w", newline="") as fh:
                    fh.write("freq,real_power,synth_power\n")
                    for f, a, b in zip(cmp_.real.freqs, cmp_.real.power, cmp_.synth.power):
                        fh.write(f"{float(f)!r},{float(a)!r},{float(b)!r}\n")
            break
        elif metric == "pca":
            _need(cfg, "real", "synth", "out")
            real, synth = _load_batch(cfg["real"]), _load_batch(cfg["synth"])
            fit, _, _ = pca_overlap_export(real, synth, out, seed=derive_seed(cfg["seed"], "pca"))
            rows.append(("pca_sv1", cfg["dataset"], real.shape[1], rep, fit.singular_values[0]))
            rows.append(("pca_sv2", cfg["dataset"], real.shape[1], rep, fit.singular_values[1]))
            break
        else:
            raise ConfigError(f"unknown metric {metric!r}")
    results = Path(cfg["results"])
    results.parent.mkdir(parents=True, exist_ok=True)
    append_results(results, rows)
    write_resolved(results.with_name(results.name + f".{metric}.config.ini"), "eval", cfg)


def cmd_inspect(cfg: dict) -> None:
    ckpt = load_checkpoint(cfg["checkpoint"])
    info = {
        "dims": ckpt.params.dims(),
        "param_count": param_count(ckpt.params),
        "seed": ckpt.seed,
        "schedule": ckpt.schedule,
        "scaler": None if ckpt.scaler is None else {
            "min": ckpt.scaler.min.tolist(), "max": ckpt.scaler.max.tolist()},
    }
    print(json.dumps(info, indent=2))


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "inspect-checkpoint": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args.command, args)
        COMMANDS[args.command](cfg)
    except (ConfigError, CsvFormatError, CheckpointError, ValueError, OSError) as exc:
        print(f"rvae-st {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
