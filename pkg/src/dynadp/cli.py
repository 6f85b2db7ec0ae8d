"""Command-line interface: ``dynadp {train,attack,account,experiment,verify}``.

Seed precedence: value in the config file < ``DYNADP_SEED`` environment
variable < ``--seed`` flag.  Exit status is 0 on success, otherwise the
``exit_code`` of the raised ``DynaDPError`` subclass (2 invalid parameter,
3 config, 4 parse, 5 not recoverable, 6 diverged, 7 missing dump entry).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .errors import ConfigError, DynaDPError, InvalidParameterError

log = logging.getLogger("dynadp")
SEED_ENV = "DYNADP_SEED"


def resolve_seed(config_seed, flag_seed, environ=None):
    environ = os.environ if environ is None else environ
    if flag_seed is not None:
        return flag_seed
    if environ.get(SEED_ENV):
        try:
            seed = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError(SEED_ENV, "must be an integer") from None
        if seed < 0:
            raise ConfigError(SEED_ENV, "must be non-negative")
        return seed
    return config_seed


def _load_experiment(path, seed_flag, expect=None):
    from dataclasses import replace

    from .harness import ExperimentConfig
    cfg = ExperimentConfig.from_file(path)
    if expect is not None and cfg.protocol not in expect:
        raise ConfigError("protocol", f"this command expects one of {expect}")
    return replace(cfg, seed=resolve_seed(cfg.seed, seed_flag))


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _shape(text):
    try:
        return tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a shape like 28x28, got {text!r}")


# ------------------------------------------------------------ commands

def cmd_train(args):
    from .harness import load_dataset
    from .model import save_checkpoint
    from .trainer import TrainConfig, train_dp

    cfg = _load_experiment(args.config, args.seed, expect=("train",))
    base_dir = os.path.dirname(os.path.abspath(args.config))
    train, test = load_dataset(cfg.dataset, base_dir)
    alg = cfg.algorithms[0]
    tr = cfg.train
    tcfg = TrainConfig(tr["layer_sizes"], tr["batch_size"], tr.get("lr", 0.1), tr["max_iters"],
                       tr.get("eval_every", 100), seed=cfg.seed,
                       activation=tr.get("activation", "relu"),
                       dump_iterations=args.dump_iterations, dump_targets=args.dump_targets)
    rep = train_dp(train, tcfg, alg.privacy_spec(), eval_ds=test)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(rep.model, os.path.join(args.out, "model.json"))
    rep.write_csv(os.path.join(args.out, "iterations.csv"))
    if rep.ledger is not None:
        rep.ledger.write_csv(os.path.join(args.out, "ledger.csv"))
    rep.write_json(os.path.join(args.out, "report.json"), model_path="model.json")
    if rep.dump is not None and rep.dump.entries:
        rep.dump.save(os.path.join(args.out, "gradients.npz"))
    print(f"{alg.name}: {rep.termination_reason} after {rep.iterations} iterations, "
          f"accuracy {rep.final_accuracy:.4f}")
    for k, v in rep.epsilon.items():
        print(f"  eps[{k}] = {v:.6g}")
    return 0


def cmd_attack(args):
    from .attack import AttackConfig, evaluate_resilience
    from .trainer import GradientDump

    acfg = AttackConfig()
    seed = resolve_seed(0, args.seed)
    if args.config:
        try:
            with open(args.config) as f:
                d = json.load(f)
        except OSError as e:
            raise ConfigError("", f"cannot read {args.config}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError("", f"invalid JSON: {e}") from None
        seed = resolve_seed(d.pop("seed", 0), args.seed)
        try:
            acfg = AttackConfig.from_dict(d)
        except (TypeError, InvalidParameterError) as e:
            raise ConfigError("attack", str(e)) from None
    if args.max_iters is not None:
        acfg = AttackConfig.from_dict({**acfg.to_dict(), "max_iters": args.max_iters})
    dump = GradientDump.load(args.dump)
    entry = dump[args.iteration]
    targets = args.targets if args.targets is not None else range(len(entry.per_example))
    rep = evaluate_resilience(dump, targets, acfg, args.iteration, seed, args.image_shape)
    os.makedirs(args.out, exist_ok=True)
    rep.write_json(os.path.join(args.out, "attack.json"))
    rep.save_reconstructions(os.path.join(args.out, "reconstructions.npz"))
    asr = "n/a" if rep.asr is None else f"{rep.asr:.3f}"
    print(f"attack at iteration {args.iteration}: {len(rep.rows)} targets, ASR {asr}")
    return 0


def cmd_account(args):
    from .harness import ExperimentConfig, format_table, run_experiment

    if args.config:
        cfg = _load_experiment(args.config, args.seed, expect=("accounting",))
    else:
        missing = [n for n in ("q", "T") if getattr(args, n) is None]
        if args.sigma is None and args.sigma_schedule is None:
            missing.append("sigma")
        if missing:
            raise ConfigError(missing[0], "required unless --config is given")
        acc = {"q": args.q, "T": args.T, "delta": args.delta}
        if args.sigma_schedule:
            try:
                acc["sigma_schedule"] = json.loads(args.sigma_schedule)
            except json.JSONDecodeError as e:
                raise ConfigError("sigma_schedule", f"invalid JSON: {e}") from None
        else:
            acc["sigma"] = args.sigma
        cfg = ExperimentConfig.from_dict({"protocol": "accounting", "accounting": acc,
                                          "seed": resolve_seed(0, args.seed)})
    rep = run_experiment(cfg, out_dir=args.out)
    print(format_table(rep.accounting))
    return 0


def cmd_experiment(args):
    from .harness import run_experiment

    cfg = _load_experiment(args.config, args.seed)
    base_dir = os.path.dirname(os.path.abspath(args.config))
    rep = run_experiment(cfg, out_dir=args.out, base_dir=base_dir)
    if rep.accounting is not None:
        from .harness import format_table
        print(format_table(rep.accounting))
    for row in rep.to_dict()["aggregate"]:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_verify(args):
    from .docsbench import DEFAULT_FIXTURES, load_fixtures, verify_fixture

    fixtures = load_fixtures(args.fixtures or DEFAULT_FIXTURES)
    failed = 0
    for fx in fixtures:
        if args.only and fx.name not in args.only:
            continue
        res = verify_fixture(fx, include_slow=args.slow)
        print(res.line())
        failed += res.status == "fail"
    return 1 if failed else 0


# ------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="dynadp", description="Dynamic differentially private "
                                "training, privacy accounting and gradient-leakage attacks.")
    p.add_argument("--version", action="version", version=f"dynadp {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required):
        sp.add_argument("--config", required=config_required, help="JSON config file")
        sp.add_argument("--seed", type=int, help=f"master seed (overrides {SEED_ENV})")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("train", help="train one model from an experiment config")
    common(sp, True)
    sp.add_argument("--dump-iterations", type=_int_list, default=(),
                    help="comma-separated iterations whose gradients to dump")
    sp.add_argument("--dump-targets", type=int, default=0,
                    help="number of batch examples per dumped iteration")
    sp.set_defaults(func=cmd_train, out="runs/train")

    sp = sub.add_parser("attack", help="reconstruct inputs from a gradient dump")
    common(sp, False)
    sp.add_argument("--dump", required=True, help="gradients.npz written by 'train'")
    sp.add_argument("--iteration", type=int, default=0)
    sp.add_argument("--targets", type=_int_list, help="target indices (default: all)")
    sp.add_argument("--max-iters", type=int, help="override attack iteration cap")
    sp.add_argument("--image-shape", type=_shape, help="seed layout, e.g. 28x28")
    sp.set_defaults(func=cmd_attack, out="runs/attack")

    sp = sub.add_parser("account", help="compare the five privacy accountants")
    common(sp, False)
    sp.add_argument("--q", type=float, help="sampling rate B/N")
    sp.add_argument("--sigma", type=float, help="constant noise multiplier")
    sp.add_argument("--sigma-schedule", help="schedule as JSON, e.g. "
                    '\'{"kind": "exponential", "base": 6, "gamma": 1e-4}\'')
    sp.add_argument("--T", type=int, help="number of iterations")
    sp.add_argument("--delta", type=float, default=1e-5)
    sp.set_defaults(func=cmd_account)

    sp = sub.add_parser("experiment", help="run a full experiment protocol")
    common(sp, True)
    sp.set_defaults(func=cmd_experiment, out=None)

    sp = sub.add_parser("verify", help="check golden fixtures against the implementation")
    sp.add_argument("--fixtures", help="fixture JSON (default: bundled golden set)")
    sp.add_argument("--only", nargs="*", help="fixture names to run")
    sp.add_argument("--slow", action="store_true", help="include slow/data-dependent fixtures")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DynaDPError as e:
        print(f"dynadp: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"dynadp: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
