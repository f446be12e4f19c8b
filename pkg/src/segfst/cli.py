"""Command-line surface: synth / train / decode / eval / gradcheck / bench.

Data directories are resolved against the SEGFST_DATA environment variable
when the given path does not exist on its own.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path as FsPath

from . import __version__
from .bench import run_benchmark, trend_report
from .data import (
    SynthConfig,
    load_collapse_map,
    load_dataset,
    read_transcripts,
    synth_dataset,
    write_transcripts,
)
from .gradcheck import DEFAULT_TOLERANCE, run_component
from .losses import edit_distance
from .model import (
    Model,
    ModelConfig,
    decode_utterance,
    init_model,
    load_model,
    save_model,
    warm_start_encoder,
)
from .report import (
    format_bench_table,
    render_bench_report,
    render_training_report,
)
from .training import FULL_PROFILE, TrainConfig, evaluate, run_stage

STAGE_NAMES = {"enc": "enc-pretrain", "dec": "dec-frozen",
               "finetune": "finetune", "e2e": "end2end",
               "multitask": "multitask"}


def resolve_data_dir(path: str) -> FsPath:
    p = FsPath(path)
    if p.exists() or p.is_absolute():
        return p
    root = os.environ.get("SEGFST_DATA")
    if root and (FsPath(root) / p).exists():
        return FsPath(root) / p
    return p


def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-train", type=int, default=200)
    p.add_argument("--num-dev", type=int, default=50)
    p.add_argument("--alphabet-size", type=int, default=5)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--min-segments", type=int, default=2)
    p.add_argument("--max-segments", type=int, default=4)
    p.add_argument("--min-duration", type=int, default=3)
    p.add_argument("--max-duration", type=int, default=6)
    p.add_argument("--noise-std", type=float, default=0.2)
    p.add_argument("--mean-separation", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)


def cmd_synth(args) -> int:
    config = SynthConfig(
        num_train=args.num_train, num_dev=args.num_dev,
        alphabet_size=args.alphabet_size, feature_dim=args.feature_dim,
        min_segments=args.min_segments, max_segments=args.max_segments,
        min_duration=args.min_duration, max_duration=args.max_duration,
        noise_std=args.noise_std, mean_separation=args.mean_separation,
        seed=args.seed)
    meta = synth_dataset(config, args.out)
    print(f"wrote {args.num_train}+{args.num_dev} utterances to {args.out} "
          f"(Bayes frame error {meta['bayes_frame_error']:.4f})")
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=sorted(STAGE_NAMES), default="e2e")
    p.add_argument("--loss",
                   choices=["hinge", "log", "mll", "ce", "ctc"],
                   default="mll",
                   help="segmental loss, or the encoder loss for --stage enc")
    p.add_argument("--enc-loss", choices=["ce", "ctc"], default="ctc",
                   help="second task for --stage multitask")
    p.add_argument("--weightfn", choices=["fc", "srnn"], default="srnn")
    p.add_argument("--pyramid", action="store_true")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", help="checkpoint for stages dec and finetune")
    p.add_argument("--max-duration", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=24)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--subsample-mode", choices=["even", "concat"],
                   default="even")
    p.add_argument("--cost-scale", type=float, default=1.0)
    p.add_argument("--ctc-strict-repeats", action="store_true")
    p.add_argument("--optimizer", choices=["sgd", "rmsprop"], default="sgd")
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--rms-step", type=float, default=1e-4)
    p.add_argument("--epochs-fixed", type=int, default=5)
    p.add_argument("--epochs-decay", type=int, default=5)
    p.add_argument("--decay", type=float, default=0.75)
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--profile", choices=["desk", "full"], default="desk",
                   help="full restores the 20+20 epoch schedule")


def _build_train_model(args, data) -> Model:
    stage = STAGE_NAMES[args.stage]
    num_labels = len(data.alphabet)
    input_dim = data.utterances[0].features.shape[1]
    common = dict(num_labels=num_labels, input_dim=input_dim,
                  max_duration=args.max_duration, hidden_dim=args.hidden_dim,
                  num_layers=args.layers, pyramid=args.pyramid,
                  subsample_mode=args.subsample_mode, dropout=args.dropout,
                  cost_scale=args.cost_scale,
                  ctc_strict_repeats=args.ctc_strict_repeats)
    if stage == "enc-pretrain":
        if args.loss not in ("ce", "ctc"):
            raise SystemExit("--stage enc needs --loss ce or --loss ctc")
        kind = "frame" if args.loss == "ce" else "ctc"
        return init_model(ModelConfig(kind=kind, **common), seed=args.seed)
    if args.loss not in ("hinge", "log", "mll"):
        raise SystemExit(f"--stage {args.stage} needs a segmental loss")
    if stage == "finetune":
        if not args.init:
            raise SystemExit("--stage finetune needs --init")
        return load_model(args.init)
    head = args.enc_loss if stage == "multitask" else "none"
    if stage == "dec-frozen":
        if not args.init:
            raise SystemExit("--stage dec needs --init")
        # keep the pretrained head so its tensors carry over
        _, meta = _peek_checkpoint(args.init)
        head = meta["model_config"].get("head", "none")
    model = init_model(ModelConfig(kind="segmental", weightfn=args.weightfn,
                                   head=head, **common), seed=args.seed)
    if stage == "dec-frozen":
        warm_start_encoder(model, args.init)
    return model


def _peek_checkpoint(path):
    from .data import load_checkpoint
    return load_checkpoint(path)


def cmd_train(args) -> int:
    data_dir = resolve_data_dir(args.data)
    train_set = load_dataset(data_dir, "train")
    dev_set = load_dataset(data_dir, "dev")
    collapse = None
    collapse_path = data_dir / "collapse.txt"
    if collapse_path.exists():
        collapse = load_collapse_map(collapse_path, train_set.alphabet)

    model = _build_train_model(args, train_set)
    stage = STAGE_NAMES[args.stage]
    schedule = dict(epochs_fixed=args.epochs_fixed,
                    epochs_decay=args.epochs_decay,
                    step_size=args.step_size, decay=args.decay,
                    clip=args.clip)
    if args.profile == "full":
        schedule.update(FULL_PROFILE)
    config = TrainConfig(
        stage=stage,
        seg_loss=args.loss if args.loss in ("hinge", "log", "mll") else "mll",
        enc_loss=args.loss if stage == "enc-pretrain" else args.enc_loss,
        lam=args.lam, optimizer=args.optimizer, rms_step=args.rms_step,
        seed=args.seed, threads=args.threads, **schedule)

    out_dir = FsPath(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    state: dict = {}
    rows = run_stage(model, config, train_set, dev_set,
                     metrics_path=out_dir / "metrics.jsonl",
                     collapse=collapse, state_out=state)
    render_training_report(rows, out_dir)
    dev_per, _ = evaluate(model, dev_set, collapse=collapse,
                          threads=args.threads)
    opt = state.get("optimizer")
    opt_tensors = {}
    opt_meta = {}
    if opt is not None:
        opt_tensors = {f"opt.{name}": arr
                       for name, arr in opt.second_moment.items()}
        opt_meta = {"kind": opt.kind, "step_size": opt.step_size,
                    "clip": opt.clip, "rms_decay": opt.rms_decay}
    save_model(out_dir / "model.segc", model,
               extra_meta={"stage": stage, "dev_per": dev_per,
                           "train_config": vars(args).copy(),
                           "optimizer": opt_meta,
                           "rng_state": state.get("rng_state")},
               extra_tensors=opt_tensors)
    print(f"stage {stage}: best dev PER {100 * dev_per:.2f}% "
          f"-> {out_dir / 'model.segc'}")
    return 0


def _add_decode(sub):
    p = sub.add_parser("decode", help="decode a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="dev")
    p.add_argument("--out", required=True)


def cmd_decode(args) -> int:
    model = load_model(args.model)
    data = load_dataset(resolve_data_dir(args.data), args.split)
    hyps = {}
    for utt in data.utterances:
        labels = decode_utterance(model, utt.features)
        hyps[utt.utt_id] = [data.alphabet.labels[lab] for lab in labels]
    write_transcripts(args.out, hyps)
    print(f"decoded {len(hyps)} utterances -> {args.out}")
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="phone error rate of hyp vs ref")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--map", dest="collapse",
                   help="evaluation collapse map (src dst per line)")


def cmd_eval(args) -> int:
    hyp = read_transcripts(args.hyp)
    ref = read_transcripts(args.ref)
    mapping = {}
    if args.collapse:
        with open(args.collapse) as f:
            for line in f:
                parts = line.split()
                if parts:
                    mapping[parts[0]] = parts[1]

    def mapped(tokens):
        return [mapping.get(tok, tok) for tok in tokens]

    total_edit = total_ref = 0
    for utt_id, ref_tokens in ref.items():
        hyp_tokens = hyp.get(utt_id, [])
        total_edit += edit_distance(mapped(hyp_tokens), mapped(ref_tokens))
        total_ref += len(ref_tokens)
    per = total_edit / max(total_ref, 1)
    print(f"PER {100 * per:.2f}% ({total_edit} edits / {total_ref} labels, "
          f"{len(ref)} utterances)")
    return 0


def _add_gradcheck(sub):
    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--component",
                   choices=["dp", "losses", "weights", "encoder", "e2e",
                            "all"],
                   default="all")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)


def cmd_gradcheck(args) -> int:
    results = run_component(args.component, trials=args.trials,
                            seed=args.seed, tolerance=args.tolerance)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.component}: max rel err {r.max_rel_err:.3e} "
              f"over {r.trials} configurations (tolerance {r.tolerance:g})")
        failed = failed or not r.passed
    return 1 if failed else 0


def _add_bench(sub):
    p = sub.add_parser("bench", help="per-loss gradient wall-time table")
    p.add_argument("--out", help="directory for bench.tsv and bench.png")
    p.add_argument("--frames", type=int, default=96)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)


def cmd_bench(args) -> int:
    rows, meta = run_benchmark(num_frames=args.frames, repeats=args.repeats,
                               seed=args.seed)
    print(format_bench_table(rows, meta))
    bad = [name for name, ok in trend_report(rows) if not ok]
    if bad:
        for name in bad:
            print(f"trend violated: {name}")
    else:
        print("trends hold: hinge < log < marginal log loss; "
              "pyramid < regular; fc < srnn")
    if args.out:
        render_bench_report(rows, meta, args.out)
        print(f"wrote {FsPath(args.out) / 'bench.tsv'} and bench.png")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segfst",
        description="segmental sequence models and CTC over FST search "
                    "spaces")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_train(sub)
    _add_decode(sub)
    _add_eval(sub)
    _add_gradcheck(sub)
    _add_bench(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s")
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "decode": cmd_decode,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
        "bench": cmd_bench,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
