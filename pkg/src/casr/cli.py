"""Command-line entry point: data generation, training, evaluation, and
streaming latency measurement as reproducible batch commands.

Every reporting command writes exactly one JSON document to stdout; all
logging goes to stderr. Exit codes: 0 success, 2 bad configuration, 3 I/O
failure, 4 divergence during training, 5 checkpoint or config mismatch.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from casr.config import (ConfigError, build_model_config, build_task_spec,
                         build_train_config, load_run_config)
from casr.decoder import StreamingSession
from casr.frontend import (ManifestRecord, load_record_features,
                           read_manifest, synth_longform, synth_utterance,
                           write_feature_file, write_manifest)
from casr.metrics import (corpus_eval, edit_distance_align,
                          emission_latency, nearest_rank, report_dict)
from casr.model import Model
from casr.trainer import (DivergenceError, Trainer, load_checkpoint,
                          restore_state, save_checkpoint,
                          trainer_from_checkpoint)

log = logging.getLogger("casr")

_SPLIT_STREAMS = {"train": 0, "eval": 1, "longform": 2}


class MismatchError(RuntimeError):
    """Checkpoint does not match the requested configuration or data."""


def _emit(doc):
    json.dump(doc, sys.stdout)
    sys.stdout.write("\n")


def _load_dataset(manifest):
    try:
        records = read_manifest(manifest)
        return [(load_record_features(manifest, rec), rec.tokens)
                for rec in records]
    except ValueError as exc:
        raise OSError("unreadable dataset %s: %s" % (manifest, exc))


def _load_model(path):
    try:
        state = load_checkpoint(path)
        model = restore_state(state)[0]
    except (ValueError, KeyError, TypeError) as exc:
        raise MismatchError("cannot restore checkpoint %s: %s" % (path, exc))
    return model, state


def cmd_gen_data(args):
    cfg = load_run_config(args.config)
    spec = build_task_spec(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(
        [spec.seed, 100 + _SPLIT_STREAMS[args.split]]))
    lf = cfg["longform"]
    lo, hi = cfg["task"]["min_tokens"], cfg["task"]["max_tokens"]
    if not 0 <= lo <= hi:
        raise ConfigError("need 0 <= min_tokens <= max_tokens")
    records = []
    for i in range(args.num_utterances):
        if args.split == "longform":
            feats, tokens, ends = synth_longform(
                spec, lf["n_utterances"], lf["tokens_each"],
                lf["silence_frames"], rng)
        else:
            length = int(rng.integers(lo, hi + 1))
            feats, tokens, ends = synth_utterance(spec, length, rng)
        name = "%s_%05d.feat" % (args.split, i)
        write_feature_file(out_dir / name, feats)
        records.append(ManifestRecord("%s_%05d" % (args.split, i), name,
                                      tokens, ends))
    manifest = out_dir / ("%s.jsonl" % args.split)
    write_manifest(manifest, records)
    _emit({"split": args.split, "utterances": len(records),
           "manifest": str(manifest)})
    return 0


def cmd_train(args):
    cfg = load_run_config(args.config)
    train_config = build_train_config(cfg)
    dataset = _load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = trainer_from_checkpoint(args.resume, dataset)
        remaining = max(0, train_config.steps - trainer.step)
    else:
        model = Model(build_model_config(cfg), seed=train_config.seed)
        trainer = Trainer(model, dataset, train_config)
        remaining = train_config.steps
    every = cfg["train"]["checkpoint_every"]
    log_path = out_dir / "train_log.jsonl"
    ckpt_path = out_dir / "final.ckpt"
    last_loss = None
    with open(log_path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"config": cfg}, sort_keys=True) + "\n")
        for _ in range(remaining):
            rec = trainer.step_once()
            last_loss = rec["loss"]
            f.write(json.dumps(rec, sort_keys=True) + "\n")
            if every and trainer.step % every == 0:
                save_checkpoint(out_dir / ("step_%06d.ckpt" % trainer.step),
                                trainer.model, trainer.config,
                                trainer.moments, trainer.rng, trainer.step)
    save_checkpoint(ckpt_path, trainer.model, trainer.config,
                    trainer.moments, trainer.rng, trainer.step)
    _emit({"steps": trainer.step, "final_loss": last_loss,
           "checkpoint": str(ckpt_path), "log": str(log_path)})
    return 0


def cmd_eval(args):
    model, _ = _load_model(args.checkpoint)
    try:
        report = corpus_eval(args.data, model, args.mode, beam=args.beam)
    except RuntimeError as exc:
        raise MismatchError(str(exc))
    _emit(report_dict(report))
    return 0


def cmd_latency(args):
    model, _ = _load_model(args.checkpoint)
    records = read_manifest(args.data)
    if not records:
        raise MismatchError("manifest %s holds no records" % (args.data,))
    subs = ins = dels = ref_len = 0
    delays = []
    ep_values = []
    reduction = model.config.total_reduction
    for rec in records:
        feats = load_record_features(args.data, rec)
        session = StreamingSession(model)
        try:
            for row in feats.frames:
                session.push(row)
        except Exception as exc:
            raise MismatchError("streaming failed on %s: %s"
                                % (rec.id, exc))
        result = session.finalize()
        bd = edit_distance_align(rec.tokens, result.tokens)
        subs += bd.substitutions
        ins += bd.insertions
        dels += bd.deletions
        ref_len += bd.ref_len
        lat = emission_latency(result, rec.end_frames, bd.alignment,
                               feats.frame_period_ms, reduction)
        delays.extend(lat.delays_ms)
        if result.tokens and rec.end_frames:
            ep = (session.hypothesis_change_log()
                  - rec.end_frames[-1]) * feats.frame_period_ms
            ep_values.append(ep)
    wer = (subs + ins + dels) / max(1, ref_len)
    _emit({
        "wer": wer,
        "substitutions": subs,
        "insertions": ins,
        "deletions": dels,
        "ref_len": ref_len,
        "latency": {
            "p50_ms": nearest_rank(delays, 0.5) if delays else None,
            "p90_ms": nearest_rank(delays, 0.9) if delays else None,
            "ep_proxy_ms": nearest_rank(ep_values, 0.5) if ep_values
            else None,
        },
        "mode": "causal",
        "beam": 0,
        "utterances": len(records),
    })
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="casr",
        description="cascaded-encoders transducer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="synthesize a dataset split")
    gen.add_argument("--config", default=None)
    gen.add_argument("--out-dir", required=True)
    gen.add_argument("--split", choices=sorted(_SPLIT_STREAMS),
                     default="train")
    gen.add_argument("--num-utterances", type=int, default=100)
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="train a model on a manifest")
    train.add_argument("--config", default=None)
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--resume", default=None)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="decode a manifest and report WER")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--mode", choices=("causal", "noncausal"),
                    default="causal")
    ev.add_argument("--beam", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    lat = sub.add_parser("latency",
                         help="stream a manifest and report latency")
    lat.add_argument("--checkpoint", required=True)
    lat.add_argument("--data", required=True)
    lat.set_defaults(func=cmd_latency)
    return parser


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("CASR_THREADS", "1")
    try:
        if int(threads) < 1:
            raise ValueError
    except ValueError:
        log.error("CASR_THREADS must be a positive integer, got %r", threads)
        return 2
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return 4
    except MismatchError as exc:
        log.error("%s", exc)
        return 5
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
