"""Command line entry point.

    fedled run --config exp.toml [--method M] [--seed S] [--out DIR]
               [--transport inproc|tcp --source-addr H:P --target-addr H:P --server-addr H:P]
               [--role source|target|server]
    fedled sweep --config exp.toml --axis sample_overlap|feature_overlap [--out DIR]
    fedled audit --transcript run/seed42/transcript.jsonl [--config exp.toml]

Exit codes: 0 ok, 2 config error, 3 data error, 4 protocol error, 5 audit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from fedled.errors import ConfigError, FedLEDError

log = logging.getLogger("fedled")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedled", description="Vertical federated transfer learning experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--method", choices=["fedled", "baseline", "abl1_align_only", "abl2_adversarial_only"])
    run.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    run.add_argument("--epochs", type=int)
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--transport", choices=["inproc", "tcp"])
    run.add_argument("--source-addr", default="127.0.0.1:0", help="source agent listen address")
    run.add_argument("--target-addr", default="127.0.0.1:0", help="target agent listen address")
    run.add_argument("--server-addr", default=None, help="local address the server dials from")
    run.add_argument("--role", choices=["source", "target", "server"], help="run only this party (tcp)")
    run.add_argument("--timeout", type=float, default=60.0)

    sw = sub.add_parser("sweep", help="overlap sweep")
    sw.add_argument("--config", required=True)
    sw.add_argument("--axis", required=True, choices=["sample_overlap", "feature_overlap"])
    sw.add_argument("--methods", default="fedled,baseline")
    sw.add_argument("--out")

    au = sub.add_parser("audit", help="privacy-audit an exported transcript")
    au.add_argument("--transcript", required=True)
    au.add_argument("--config", help="experiment config; enables raw-row and raw-width checks")
    au.add_argument("--seed", type=int)
    au.add_argument("--feature-dim", type=int)
    return p


def _load(args):
    from fedled.harness import load_config

    cfg = load_config(args.config)
    over = {}
    if getattr(args, "method", None):
        over["method"] = args.method
    if getattr(args, "seed", None) is not None:
        over["seeds"] = (args.seed,)
    if getattr(args, "epochs", None) is not None:
        over["epochs"] = args.epochs
    if getattr(args, "transport", None):
        over["transport"] = args.transport
    if getattr(args, "out", None):
        over["output_dir"] = args.out
    cfg = replace(cfg, **over)
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    from fedled.harness import run_experiment

    cfg = _load(args)
    if args.role:
        return run_role(cfg, args)
    if cfg.transport == "tcp" and (args.source_addr != "127.0.0.1:0" or args.target_addr != "127.0.0.1:0"):
        log.info("tcp addresses only apply with --role; single-process tcp uses ephemeral ports")
    report = run_experiment(cfg)
    print(json.dumps({
        "method": report.method, "seeds": report.seeds,
        "accuracy_mean": round(report.accuracy_mean, 4), "accuracy_std": round(report.accuracy_std, 4),
        "flags": report.flags, "output_dir": cfg.output_dir,
    }))
    if any(r.aborted for r in report.results):
        return 4
    return 0


def run_role(cfg, args) -> int:
    """One party of a networked run.  Every process regenerates the data
    from the shared config and keeps only its own view.  The source writes
    the pretrained classifier to ``<out>/init_classifier.fled`` before it
    listens; the other parties wait for that file."""
    from fedled.harness import _net_config, _pretrained, prepare_data
    from fedled.models import init_params, load_checkpoint, save_checkpoint
    from fedled.protocol import (
        Server, SourceAgent, TargetAgent, Schedule, Transcript, _agent_loop, server_loop,
    )
    from fedled.transport import Listener, dial

    if cfg.method == "baseline":
        raise ConfigError("the baseline is not a federated run")
    if cfg.output_dir is None:
        raise ConfigError("--role needs --out (shared with the other parties)")
    seed = cfg.seeds[0]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    init_path = out / "init_classifier.fled"
    prep = prepare_data(cfg.data, seed)
    net = _net_config(cfg, prep)
    hyper = cfg.hyper()
    schedule = Schedule(len(prep.source_train), len(prep.target_train), hyper.batch_size, hyper.epochs)

    if args.role == "source":
        fs, clf = _pretrained(cfg, prep, net, seed)
        save_checkpoint(clf, init_path)
        agent = SourceAgent(prep.source_train, fs, clf, schedule, hyper, seed)
        listener = Listener(args.source_addr)
        log.info("source listening on %s", listener.address)
        ch = listener.accept(args.timeout)
        _agent_loop(agent, ch)
        ch.close()
        return 0

    deadline = time.monotonic() + args.timeout
    while not init_path.exists():
        if time.monotonic() > deadline:
            raise ConfigError(f"{init_path} did not appear; start the source first")
        time.sleep(0.2)
    time.sleep(0.2)  # let the writer finish
    clf = load_checkpoint(init_path)

    if args.role == "target":
        t_ft = init_params(net, seed, "target")
        agent = TargetAgent(prep.target_train, t_ft, clf, schedule, hyper, seed, eval_features=prep.target_test.features)
        listener = Listener(args.target_addr)
        log.info("target listening on %s", listener.address)
        ch = listener.accept(args.timeout)
        _agent_loop(agent, ch)
        ch.close()
        save_checkpoint(agent.extractor, out / "target_extractor.fled")
        save_checkpoint(agent.classifier, out / "classifier.fled")
        return 0

    server = Server(clf, init_params(net, seed, "discriminator"), net, schedule, hyper, seed)
    transcript = Transcript()
    ch_s = dial(args.source_addr, args.timeout, args.server_addr)
    ch_t = dial(args.target_addr, args.timeout, args.server_addr)
    try:
        server_loop(server, ch_s, ch_t, transcript)
    finally:
        transcript.export(out / "transcript.jsonl")
        ch_s.close()
        ch_t.close()
    print(json.dumps({"rounds": server.round, "transcript_sha256": transcript.digest()}))
    return 0


def cmd_sweep(args) -> int:
    from fedled.harness import sweep

    cfg = _load(args)
    methods = tuple(m for m in args.methods.split(",") if m)
    reports = sweep(cfg, args.axis, methods=methods)
    for r in reports:
        print(f"{r.method}\t{r.axis}={r.axis_value}\t{r.accuracy_mean:.2f} +- {r.accuracy_std:.2f}")
    return 0


def cmd_audit(args) -> int:
    from fedled.protocol import Transcript, privacy_audit

    transcript = Transcript.load(args.transcript)
    raw_dims, raw_rows, feature_dim = (), (), args.feature_dim
    if args.config:
        from fedled.harness import prepare_data

        cfg = _load(args)
        prep = prepare_data(cfg.data, cfg.seeds[0])
        raw_dims = (prep.source_train.num_features, prep.target_train.num_features)
        raw_rows = (prep.source_train.features, prep.target_train.features)
        feature_dim = feature_dim or cfg.feature_dim
    report = privacy_audit(transcript, raw_dims=raw_dims, feature_dim=feature_dim, raw_rows=raw_rows)
    for i, reason in report.warnings:
        print(f"warning: message {i}: {reason}")
    for i, reason in report.violations:
        print(f"violation: message {i}: {reason}")
    print(f"{'PASS' if report.passed else 'FAIL'}: {report.messages_checked} messages checked")
    report.raise_for_failure()
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"run": cmd_run, "sweep": cmd_sweep, "audit": cmd_audit}
    try:
        return handlers[args.command](args)
    except FedLEDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
