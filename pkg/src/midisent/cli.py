"""``midisent`` command line: gen-data, train, estimate-mi, eval, export-emb.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric abort,
4 file I/O.  Log verbosity comes from ``MIDISENT_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import KEYS, RunConfig, load_config
from .data import generate_corpus, load_corpus, save_corpus
from .errors import CheckpointError, NumericError, ValidationError
from .evaluation import (compute_eer, compute_mindcf, export_embeddings, make_trials, probe_report,
                         read_trials, run_trials, write_trials)
from .mi import discrete_bound_suite, gaussian_oracle_case
from .model import load_model
from .objectives import OBJECTIVES
from .training import finetune, pretrain_encoder

log = logging.getLogger("midisent")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# flag -> config key, per subcommand
_FLAGS = {
    "gen-data": ["out"],
    "train": ["mode", "corpus", "out", "log", "state", "init_encoder"],
    "estimate-mi": ["out"],
    "eval": ["checkpoint", "corpus", "trials", "probe_corpus", "export", "out", "branch"],
    "export-emb": ["checkpoint", "corpus", "out"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="midisent", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in _FLAGS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--objective", choices=list(OBJECTIVES))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key (repeatable)")
        for key in keys:
            p.add_argument("--" + key.replace("_", "-"), dest=key, help=KEYS[key].help)
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from --state if it exists")
            p.add_argument("--debug", action="store_true", help="check parameter isolation every step")
    return parser


def effective_config(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key in ["seed", "objective"] + _FLAGS[args.command]:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "debug", False):
        overrides["train.debug"] = "true"
    return load_config(args.config, overrides)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig, args) -> int:
    cfg.require("out")
    out = Path(cfg["out"])
    for name, spec in cfg.corpus_specs().items():
        corpus = generate_corpus(spec)
        save_corpus(corpus, out / f"{name}.corpus", extra={"config": cfg.as_dict()})
        print(f"{name}\t{len(corpus)} utterances\t{spec.num_speakers} speakers\t{spec.num_devices} devices\t"
              f"{out / (name + '.corpus')}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    cfg.require("corpus", "out")
    corpus = load_corpus(cfg["corpus"])
    tcfg = cfg.train_config()
    mcfg = cfg.model_config(corpus.spec)
    out = cfg["out"]
    log_path = cfg["log"] or out + ".log.tsv"
    state_path = cfg["state"] or out + ".state"
    meta = {"config": cfg.as_dict(), "corpus_spec": corpus.spec.to_dict()}
    if cfg["mode"] == "pretrain":
        trainer = pretrain_encoder(corpus, mcfg, tcfg, out_path=out, log_path=log_path,
                                   state_path=state_path, resume=args.resume, meta=meta)
        last = trainer.records[-1] if trainer.records else None
    else:
        result = finetune(corpus, mcfg, tcfg, init_encoder=cfg["init_encoder"], out_path=out,
                          log_path=log_path, state_path=state_path, resume=args.resume, meta=meta)
        last = result.records[-1] if result.records else None
        if tcfg.debug:
            print(f"isolation\t{result.isolation_violations} violations in {result.checks} checks")
            if result.isolation_violations:
                raise NumericError("parameter isolation violated")
    if last is not None:
        print(f"step {last.step}\ttotal {last.total:.6g}\tcls_s {last.cls_s:.6g}")
    print(f"checkpoint\t{out}\nlog\t{log_path}")
    return EXIT_OK


def cmd_estimate_mi(cfg: RunConfig, args) -> int:
    rows = []
    for dim in cfg.int_list("mi.dims"):
        for rho in cfg.float_list("mi.rhos"):
            r = gaussian_oracle_case(rho, dim, n=cfg["mi.n"], seed=cfg["seed"], steps=cfg["mi.steps"],
                                     lr=cfg["mi.lr"], hidden=cfg["mi.hidden"])
            rows.append((f"gaussian rho={rho:g} D={dim}", r.vclub, r.analytic_mi, r.gap))
    shape = tuple(cfg.int_list("mi.joint_shape"))
    holds, total = discrete_bound_suite(cfg["mi.joints"], shape, cfg["seed"])
    lines = ["configuration\testimate\toracle\tgap"]
    lines += [f"{name}\t{est:.6f}\t{ora:.6f}\t{gap:+.6f}" for name, est, ora, gap in rows]
    lines.append(f"discrete CLUB>=MI {shape[0]}x{shape[1]}\t{holds}\t{total}\t{holds - total:+d}")
    _emit(cfg, lines)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    cfg.require("checkpoint", "corpus")
    model, _ = load_model(cfg["checkpoint"])
    corpus = load_corpus(cfg["corpus"])
    if cfg["trials"]:
        trials = read_trials(cfg["trials"])
    else:
        trials = make_trials(corpus, cfg["num_trials"], cfg["seed"])
        if cfg["out"]:
            write_trials(trials, cfg["out"] + ".trials")
    scores = run_trials(corpus, model, trials, cfg["branch"])
    eer, eer_thr = compute_eer(scores)
    dcf, dcf_thr = compute_mindcf(scores, cfg["mindcf.c_miss"], cfg["mindcf.c_fa"], cfg["mindcf.p_target"],
                                  cfg["mindcf.normalize"])
    probe_corpus = load_corpus(cfg["probe_corpus"]) if cfg["probe_corpus"] else corpus
    probes = probe_report(model, probe_corpus, cfg["seed"])
    lines = ["metric\tvalue",
             f"trials\t{len(trials)}",
             f"eer\t{eer!r}", f"eer_threshold\t{eer_thr!r}",
             f"mindcf\t{dcf!r}", f"mindcf_threshold\t{dcf_thr!r}",
             f"probe_speaker_xs\t{probes.speaker_on_xs!r}", f"probe_device_xs\t{probes.device_on_xs!r}",
             f"probe_speaker_xd\t{probes.speaker_on_xd!r}", f"probe_device_xd\t{probes.device_on_xd!r}"]
    _emit(cfg, lines)
    if cfg["export"]:
        export_embeddings(probe_corpus, model, cfg["export"])
    return EXIT_OK


def cmd_export_emb(cfg: RunConfig, args) -> int:
    cfg.require("checkpoint", "corpus", "out")
    model, _ = load_model(cfg["checkpoint"])
    corpus = load_corpus(cfg["corpus"])
    export_embeddings(corpus, model, cfg["out"])
    Path(cfg["out"] + ".config").write_text(cfg.to_text())
    print(f"{len(corpus)} rows\t{cfg['out']}")
    return EXIT_OK


def _emit(cfg: RunConfig, lines: list[str]) -> None:
    """Print an aligned table; with ``out`` set, also write the tab-separated rows plus the config."""
    cells = [line.split("\t") for line in lines]
    widths = [max(len(row[i]) for row in cells if i < len(row)) for i in range(max(map(len, cells)))]
    for row in cells:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    if cfg["out"]:
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        echo = "".join("# " + line + "\n" for line in cfg.to_text().splitlines())
        out.write_text(echo + "".join(line + "\n" for line in lines))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "estimate-mi": cmd_estimate_mi,
            "eval": cmd_eval, "export-emb": cmd_export_emb}


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("MIDISENT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        log.info("effective configuration:\n%s", cfg.to_text())
        return COMMANDS[args.command](cfg, args)
    except ValidationError as exc:
        print(f"midisent: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"midisent: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"midisent: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
