"""Command-line entry point.

    qedg train-target   --config run.json --out runs/moons
    qedg attack         --config run.json --out runs/moons [--oracle remote:URL] [--budget N] [--ablate qa,harm]
    qedg evaluate       --config run.json --out runs/moons
    qedg serve-target   --config run.json --out runs/moons [--host H] [--port P] [--budget-guard N]
    qedg theory-bound   --phi 0.25 --q 100 --delta 0.1
    qedg theory-validate --phi 0.1 --epsilon 0.05 --delta 0.1 --trials 500
    qedg report         --out runs/moons

Exit codes: 0 success, 2 configuration error, 3 query budget exhausted
(partial artifacts are still written), 4 remote oracle failure.
``QEDG_LOG`` sets the log level (DEBUG, INFO, WARNING, ...).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import theory
from .evaluation import AttackParams, MetricsReport, attack_success_rate, build_report, random_noise_asr
from .extraction import IMAGE_AUGMENTATIONS, AttackTrace, ExtractionConfig, ProbeSet, run_extraction
from .io.checkpoint import CheckpointError, load_checkpoint, model_id, save_checkpoint
from .io.config import ConfigError, RunConfig, load_config
from .io.datasets import Dataset, MalformedDataset, load_dataset, probe_grid
from .io.report import emit_report, write_asr_csv, write_json
from .io.server import serve_target
from .nets import Network, NetworkSpec, TrainConfig, build_network, train_target
from .oracle import LocalOracle, NoisyOracle, QueryLedger, RemoteOracle

log = logging.getLogger("qedg")

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_REMOTE = 0, 2, 3, 4
_STATUS_EXIT = {"completed": EXIT_OK, "budget_exhausted": EXIT_BUDGET, "remote_failure": EXIT_REMOTE}


# -- building blocks (also used by the test-suite) ---------------------------------------


def dataset_for(cfg: RunConfig) -> Dataset:
    return load_dataset(asdict(cfg.dataset))


def target_prefix(cfg: RunConfig) -> Path:
    return Path(cfg.target_checkpoint) if cfg.target_checkpoint else Path(cfg.out) / "target"


def target_spec(cfg: RunConfig, ds: Dataset) -> NetworkSpec:
    seeds = cfg.derived_seeds()
    return NetworkSpec(
        "target", ds.input_dim, ds.num_classes, tuple(cfg.target.hidden), cfg.target.activation, seed=seeds["target"]
    )


def train_target_network(cfg: RunConfig, ds: Dataset):
    t = cfg.target_training
    tc = TrainConfig(t.epochs, t.batch_size, t.optimizer, t.learning_rate, t.momentum, seed=cfg.derived_seeds()["target"])
    return train_target(ds, target_spec(cfg, ds), t.epochs, tc)


def load_or_train_target(cfg: RunConfig, ds: Dataset) -> Network:
    prefix = target_prefix(cfg)
    if prefix.with_name(prefix.name + ".json").exists():
        return load_checkpoint(prefix)
    log.info("no target checkpoint at %s; training one", prefix)
    res = train_target_network(cfg, ds)
    save_checkpoint(prefix, res.network, {"test_accuracy": res.test_accuracy})
    return res.network


def attack_config_for(cfg: RunConfig, ds: Dataset) -> ExtractionConfig:
    """Resolve dataset-dependent attack settings and the derived attack seed."""
    d = cfg.attack.to_dict()
    d["seed"] = cfg.derived_seeds()["attack"]
    if ds.image_shape is not None:
        if d["image_shape"] is None:
            d["image_shape"] = list(ds.image_shape)
        if tuple(d["augmentations"]) == ("jitter",):
            d["augmentations"] = list(IMAGE_AUGMENTATIONS)
    return ExtractionConfig.from_dict(d)


def build_attackers(cfg: RunConfig, ds: Dataset) -> tuple[Network, Network]:
    seeds = cfg.derived_seeds()
    sub = build_network(NetworkSpec(
        "substitute", ds.input_dim, ds.num_classes, tuple(cfg.substitute.hidden), cfg.substitute.activation,
        seed=seeds["substitute"],
    ))
    g = cfg.generator
    out_act = g.output_activation
    low = high = None
    if out_act == "auto":
        out_act = "sigmoid" if ds.image_shape is not None else "box"
    if out_act == "box":
        low, high = tuple(float(v) for v in ds.low), tuple(float(v) for v in ds.high)
    gen = build_network(NetworkSpec(
        "generator", ds.input_dim, ds.num_classes, tuple(g.hidden), g.activation, latent_dim=g.latent_dim,
        output_activation=out_act, output_low=low, output_high=high, seed=seeds["generator"],
    ))
    return sub, gen


def probe_for(cfg: RunConfig, ds: Dataset, target: Network | None) -> ProbeSet | None:
    if target is None:
        return None
    x = probe_grid(ds, cfg.evaluate.probe_grid)
    return ProbeSet(x, target.predict(x))


def make_oracle(cfg: RunConfig, ds: Dataset, target: Network | None):
    o = cfg.oracle
    ledger = QueryLedger(budget=o.budget_guard)
    if o.kind == "remote":
        inner = RemoteOracle(o.url, ds.num_classes, ledger, timeout=o.timeout, retries=o.retries)
    else:
        inner = LocalOracle(target, ledger)
    if o.kind == "noisy" or o.flip_probability > 0:
        return NoisyOracle(inner, o.flip_probability, cfg.derived_seeds()["attack"] + 1)
    return inner


def run_attack(cfg: RunConfig):
    """Run the extraction and write every attack artifact under ``cfg.out``."""
    ds = dataset_for(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    target = None
    prefix = target_prefix(cfg)
    if cfg.oracle.kind != "remote" or prefix.with_name(prefix.name + ".json").exists():
        # remote attacks use a local copy, when present, only for monitoring
        target = load_or_train_target(cfg, ds)
    acfg = attack_config_for(cfg, ds)
    sub, gen = build_attackers(cfg, ds)
    oracle = make_oracle(cfg, ds, target)
    probe = probe_for(cfg, ds, target)
    result = run_extraction(oracle, acfg, sub, gen, probe=probe, test=(ds.x_test, ds.y_test))
    metrics = result.report.to_dict()
    save_checkpoint(out / "substitute", result.substitute, metrics)
    save_checkpoint(out / "generator", result.generator)
    emit_report(result.trace, result.report, out)
    write_json(out / "attack.json", {
        "schema": "qedg.attack/1",
        "status": result.status,
        "error": result.error,
        "queries": result.queries,
        "epochs": len(result.trace),
        "bank_size": len(result.bank),
        "config": cfg.to_dict(),
        "resolved_attack": acfg.to_dict(),
        "trace": result.trace.to_dicts(),
        "metrics": metrics,
    })
    return result


def _eps_scale(cfg: RunConfig, ds: Dataset) -> float:
    if ds.image_shape is None and cfg.evaluate.scale_to_bounds:
        return float(np.mean(ds.high - ds.low))
    return 1.0


def run_evaluate(cfg: RunConfig) -> dict:
    ds = dataset_for(cfg)
    out = Path(cfg.out)
    target = load_checkpoint(target_prefix(cfg))
    sub = load_checkpoint(out / "substitute")
    probe = probe_for(cfg, ds, target)
    rep = build_report(sub, probe=probe, test=(ds.x_test, ds.y_test))
    bounds = (ds.low, ds.high) if ds.image_shape is None else (0.0, 1.0)
    scale = _eps_scale(cfg, ds)
    seed = cfg.derived_seeds()["attack"]
    noise = []
    for eps in cfg.evaluate.epsilons:
        e = eps * scale
        for targeted in cfg.evaluate.targeted:
            for kind in cfg.evaluate.attacks:
                params = AttackParams(kind, e, cfg.evaluate.step_size * scale, targeted=targeted, seed=seed)
                rep.asr_table.append(attack_success_rate(sub, target, ds.x_test, ds.y_test, params, bounds, ds.num_classes))
            if cfg.evaluate.noise_baseline:
                noise.append(random_noise_asr(target, ds.x_test, ds.y_test, e, bounds, seed, targeted, ds.num_classes))
    write_asr_csv(rep, out / "asr.csv", "qedg", noise)
    doc = rep.to_dict()
    doc["noise_baseline"] = [asdict(c) for c in noise]
    doc["epsilon_scale"] = scale
    write_json(out / "evaluation.json", doc)
    return doc


def run_report(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    path = out / "attack.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"no attack record at {path}; run 'attack' first") from None
    trace = AttackTrace.from_dicts(doc["trace"])
    emit_report(trace, MetricsReport.from_dict(doc["metrics"]), out)


# -- argument handling ------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qedg", description="Hard-label model extraction toolkit.")
    sub = p.add_subparsers(dest="task", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    for name in ("train-target", "evaluate", "report"):
        sub.add_parser(name, parents=[common])
    a = sub.add_parser("attack", parents=[common])
    a.add_argument("--oracle", help="local or remote:URL")
    a.add_argument("--budget", type=int, help="query budget Q")
    a.add_argument("--ablate", help="comma list of components to disable: qa,harm,div")
    s = sub.add_parser("serve-target", parents=[common])
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.add_argument("--budget-guard", type=int, help="answer 429 once this many instances were served")
    for name in ("theory-bound", "theory-validate"):
        t = sub.add_parser(name, parents=[common])
        t.add_argument("--phi", type=float)
        t.add_argument("--delta", type=float)
        if name == "theory-bound":
            t.add_argument("--q", type=float, help="clean query complexity")
        else:
            t.add_argument("--epsilon", type=float)
            t.add_argument("--trials", type=int)
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    cfg.task = args.task
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    if getattr(args, "oracle", None):
        if args.oracle == "local":
            cfg.oracle.kind = "local"
        elif args.oracle.startswith("remote:"):
            cfg.oracle.kind, cfg.oracle.url = "remote", args.oracle[len("remote:"):]
        else:
            raise ConfigError(f"--oracle must be 'local' or 'remote:URL', got '{args.oracle}'")
    if getattr(args, "budget", None) is not None:
        if args.budget < 0:
            raise ConfigError("--budget must be nonnegative")
        cfg.attack = ExtractionConfig.from_dict({**cfg.attack.to_dict(), "query_budget": args.budget})
    if getattr(args, "ablate", None):
        try:
            cfg.attack = cfg.attack.ablate([c.strip() for c in args.ablate.split(",") if c.strip()])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    for flag, section, key in (
        ("host", cfg.serve, "host"), ("port", cfg.serve, "port"), ("budget_guard", cfg.serve, "budget_guard"),
        ("phi", cfg.theory, "phi"), ("delta", cfg.theory, "delta"), ("epsilon", cfg.theory, "epsilon"),
        ("trials", cfg.theory, "trials"), ("q", cfg.theory, "q"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(section, key, value)
    return cfg


def _setup_logging() -> None:
    level = os.environ.get("QEDG_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _print(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def main(argv=None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return _dispatch(cfg)
    except (ConfigError, MalformedDataset, CheckpointError, theory.PreconditionViolated) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(cfg: RunConfig) -> int:
    task = cfg.task
    if task == "theory-bound":
        t = cfg.theory
        q = t.q if t.q is not None else theory.binary_search_queries(t.epsilon)
        _print({
            "phi": t.phi, "q": q, "delta": t.delta,
            "R": theory.repeat_count(t.phi, q, t.delta),
            "Q_bound": theory.query_complexity_bound(t.phi, q, t.delta),
        })
        return EXIT_OK
    if task == "theory-validate":
        t = cfg.theory
        rep = theory.validate_theorem(t.phi, t.epsilon, t.delta, t.trials, seed=cfg.seed)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        write_json(Path(cfg.out) / "theory.json", rep.to_dict())
        _print(rep.to_dict())
        return EXIT_OK
    if task == "train-target":
        ds = dataset_for(cfg)
        res = train_target_network(cfg, ds)
        save_checkpoint(target_prefix(cfg), res.network, {"test_accuracy": res.test_accuracy})
        _print({"test_accuracy": res.test_accuracy, "checkpoint": str(target_prefix(cfg))})
        return EXIT_OK
    if task == "attack":
        result = run_attack(cfg)
        if result.error:
            print(f"attack stopped early: {result.error}", file=sys.stderr)
        _print({"status": result.status, "queries": result.queries, "epochs": len(result.trace),
                "consistency": result.report.consistency, "accuracy": result.report.accuracy})
        return _STATUS_EXIT[result.status]
    if task == "evaluate":
        doc = run_evaluate(cfg)
        _print({k: doc[k] for k in ("accuracy", "consistency", "kappa")})
        return EXIT_OK
    if task == "serve-target":
        ds = dataset_for(cfg)
        net = load_or_train_target(cfg, ds)
        prefix = target_prefix(cfg)
        server = serve_target(net, cfg.serve.host, cfg.serve.port, cfg.serve.budget_guard, model_id(prefix))
        print(f"serving {server.model_id} at {server.url}/predict", file=sys.stderr, flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
        return EXIT_OK
    if task == "report":
        run_report(cfg)
        return EXIT_OK
    raise ConfigError(f"unknown task '{task}'")


if __name__ == "__main__":
    sys.exit(main())
