"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.
The output directory defaults to the config's ``out_dir`` and can be
overridden with ``$CFGANON_OUT_DIR`` or ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .backbone import DenoiserModel
from .config import RunConfig, load_config
from .guidance import GuidanceError, GuidanceMode, GuidanceSpec, anonymize
from .training import (
    TrainingDivergedError,
    load_checkpoint,
    make_checkpoint,
    save_checkpoint,
    train_loop,
    write_loss_log,
)
from .world import dump_arrays, dump_utterances, generate_world, load_dump, speaker_utterances

log = logging.getLogger("cfganon")

OUT_ENV = "CFGANON_OUT_DIR"
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    if getattr(args, "out", None):
        path = Path(args.out)
    elif os.environ.get(OUT_ENV):
        path = Path(os.environ[OUT_ENV])
    elif cfg is not None:
        path = Path(cfg.out_dir)
    else:
        path = Path("runs/default")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> RunConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    try:
        return load_config(args.config, args.seed)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


def _load_run(checkpoint: str):
    if not Path(checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    ckpt = load_checkpoint(checkpoint)
    cfg = RunConfig.from_record(ckpt.config)
    return ckpt, cfg, ckpt.build_model(), generate_world(cfg.world)


# commands ------------------------------------------------------------------


def cmd_gen_world(args) -> int:
    cfg = _config(args)
    world = generate_world(cfg.world)
    out = _out_dir(args, cfg)
    utts = [u for k in range(cfg.world.n_speakers) for u in speaker_utterances(world, k, args.per_speaker)]
    dump_utterances(out / "utterances", utts)
    (out / "world.json").write_text(json.dumps(cfg.to_record(), indent=2, sort_keys=True) + "\n")
    print(json.dumps({"utterances": len(utts), "out": str(out)}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.steps is not None:
        cfg.train.steps = args.steps
    out = _out_dir(args, cfg)
    world = generate_world(cfg.world)
    start = 0
    optimizer = None
    if args.resume:
        ckpt, resumed, model, _ = _load_run(args.resume)
        if resumed.to_record()["world"] != cfg.to_record()["world"]:
            raise UsageError("resume checkpoint was trained on a different world")
        optimizer = ckpt.build_optimizer(model, cfg.train.lr)
        start = ckpt.step
    else:
        model = DenoiserModel(cfg.backbone, np.random.default_rng(cfg.init_seed))
    record = cfg.to_record()

    def checkpoint_fn(step, m, opt):
        save_checkpoint(out / f"checkpoint-{step:07d}.danon", make_checkpoint(record, m, opt, cfg.train.seed, step))

    result = train_loop(cfg.train, world, model, optimizer, start, checkpoint_fn)
    save_checkpoint(out / "checkpoint.danon", make_checkpoint(record, model, result.optimizer, cfg.train.seed, cfg.train.steps))
    write_loss_log(out / "loss.csv", result.losses)
    final = result.losses[-1][1] if result.losses else float("nan")
    print(f"final loss {final:.6g}")
    return 0


def _guidance_spec(args, n_infer: int) -> GuidanceSpec:
    mode = GuidanceMode(args.mode) if args.mode else GuidanceMode.PROSODY_CFG
    if mode != GuidanceMode.PROSODY_CFG and args.w_pro is not None:
        raise UsageError(f"--w-pro only applies to prosody-cfg, not {mode.value}")
    if mode != GuidanceMode.SPEAKER_CFG and args.w_spk is not None:
        raise UsageError(f"--w-spk only applies to speaker-cfg, not {mode.value}")
    if mode != GuidanceMode.PLAIN and args.with_prosody:
        raise UsageError("--with-prosody only applies to plain sampling")
    if mode != GuidanceMode.PLAIN and args.pseudo_speaker == "null":
        raise UsageError(f"{mode.value} needs a pseudo-speaker; 'null' is only valid with --mode plain")
    w_pro = 1.0 if args.w_pro is None else args.w_pro
    if mode == GuidanceMode.PROSODY_CFG and not 0.0 <= w_pro <= 1.0:
        print(f"warning: w_pro={w_pro} lies outside [0, 1]; the combination extrapolates", file=sys.stderr)
    spec = GuidanceSpec(
        mode=mode,
        w_pro=w_pro,
        w_spk=3.0 if args.w_spk is None else args.w_spk,
        n_infer_steps=n_infer,
        use_prosody=bool(args.with_prosody),
        use_pseudo_speaker=args.pseudo_speaker != "null",
        prosody_shift=args.shift,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            spec.validate()
        except GuidanceError as exc:
            raise UsageError(str(exc)) from exc
    return spec


def _sources_and_randomness(cfg: RunConfig, world, n_utt: int, seed: int):
    from .evaluation import draw_randomness, evaluation_sources, pool_for_world

    sources = evaluation_sources(world, n_utt, seed)
    pool = pool_for_world(world)
    psi, noise = draw_randomness(world, n_utt, seed, pool, stream=0)
    return sources, pool, psi, noise


def cmd_anonymize(args) -> int:
    ckpt, cfg, model, world = _load_run(args.checkpoint)
    n_infer = args.steps or cfg.eval.n_infer_steps
    spec = _guidance_spec(args, n_infer)
    seed = cfg.eval_seed if args.seed is None else args.seed
    n_src = max(args.source) + 1 if args.source else args.n_utt
    sources, pool, psi, noise = _sources_and_randomness(cfg, world, n_src, seed)
    picks = args.source if args.source else list(range(args.n_utt))
    if args.pseudo_speaker not in (None, "null"):
        label = int(args.pseudo_speaker)
        if label not in pool.labels:
            raise UsageError(f"pseudo-speaker {label} not in pool {pool.labels}")
        psi = np.repeat(pool.embeddings[pool.labels.index(label)][None], len(sources), axis=0)
    outputs = anonymize(model, cfg.train.schedule(), spec, [sources[i] for i in picks], psi[picks], noise[picks])
    out = _out_dir(args, cfg)
    records = [
        {"utterance_id": f"anon{i:05d}", "source_index": i, "speaker_id": int(sources[i].speaker_id), "seed": int(seed)}
        for i in picks
    ]
    dump_arrays(out, list(outputs), records)
    from .evaluation import spec_dict

    report = {"spec": spec_dict(spec), "n_utt": len(picks), "seed": int(seed)}
    (out / "report.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import Attacker, compute_eer, content_utility, enrollment_set, prosody_utility, speaker_attack

    ckpt, cfg, model, world = _load_run(args.checkpoint)
    records, arrays = load_dump(args.dump)
    if not records:
        raise UsageError(f"empty dump: {args.dump}")
    seed = records[0]["seed"]
    n_src = max(r["source_index"] for r in records) + 1
    sources, *_ = _sources_and_randomness(cfg, world, n_src, seed)
    originals = [sources[r["source_index"]] for r in records]
    enroll = enrollment_set(world)
    attacker = Attacker(cfg.eval.attacker_prosody_weight).fit(world, [u.x0 for u in enroll])
    lazy: dict[int, list] = {}
    for u in enroll:
        lazy.setdefault(u.speaker_id, []).append(u.x0)
    scores = speaker_attack(world, lazy, arrays, [u.speaker_id for u in originals], attacker, seed)
    corr, skipped = prosody_utility(originals, arrays, world)
    report = {
        "eer": compute_eer(scores) if len({s for _, s in scores}) == 2 else None,
        "prosody_corr": corr,
        "prosody_skipped": skipped,
        "content_err": content_utility(originals, arrays, world),
        "n_utt": len(records),
        "seed": seed,
    }
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import sweep_tradeoff, write_metrics_csv, write_report_json, write_tradeoff_csv

    ckpt, cfg, model, world = _load_run(args.checkpoint)
    weights = tuple(args.weights) if args.weights else cfg.eval.weights
    seed = cfg.eval_seed if args.seed is None else args.seed
    reports = sweep_tradeoff(
        model,
        world,
        cfg.train.schedule(),
        weights=weights,
        n_utt=args.n_utt or cfg.eval.n_utt,
        seed=seed,
        n_infer_steps=args.steps or cfg.eval.n_infer_steps,
        threads=args.threads or cfg.eval.threads,
        attacker_prosody_weight=cfg.eval.attacker_prosody_weight,
    )
    out = _out_dir(args, cfg)
    write_metrics_csv(out / "metrics.csv", reports)
    write_tradeoff_csv(out / "tradeoff.csv", reports)
    write_report_json(out / "report.json", reports)
    for r in reports:
        print(f"{r.spec['label']:28s} eer={r.eer:6.2f} eer_semi={r.eer_semi:6.2f} rho={r.prosody_corr:.3f} content_err={r.content_err:.3g}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else EXIT_RUNTIME


# parser --------------------------------------------------------------------


def _weights(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad weight list: {text!r}") from None


def _sources(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad source list: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cfganon", description="Prosody-controllable diffusion anonymization on a synthetic codec world.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="INI-style config file (all keys optional)")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV})")

    p = sub.add_parser("gen-world", help="generate and dump the synthetic world")
    common(p)
    p.add_argument("--per-speaker", type=int, default=4)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("train", help="train the denoiser")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("anonymize", help="anonymize evaluation utterances")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=[m.value for m in GuidanceMode])
    p.add_argument("--w-pro", type=float)
    p.add_argument("--w-spk", type=float)
    p.add_argument("--with-prosody", action="store_true", help="plain mode: pass the source prosody condition")
    p.add_argument("--pseudo-speaker", help="pool speaker label, or 'null' (default: random draw per utterance)")
    p.add_argument("--shift", type=float, help="mean shift added to the prosody condition")
    p.add_argument("--source", type=_sources, help="comma-separated evaluation source indices")
    p.add_argument("--n-utt", type=int, default=1)
    p.add_argument("--steps", type=int, help="DDIM steps")
    p.set_defaults(func=cmd_anonymize)

    p = sub.add_parser("sweep", help="run the guidance-weight trade-off sweep")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--weights", type=_weights)
    p.add_argument("--n-utt", type=int)
    p.add_argument("--steps", type=int, help="DDIM steps")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="score an anonymize output directory")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dump", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run the built-in oracle and invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cfganon: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, FloatingPointError, ArithmeticError) as exc:
        print(f"cfganon: numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"cfganon: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
