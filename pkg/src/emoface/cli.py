"""Command line interface for the full pipeline.

Every stage is a subcommand: corpus generation, the three training stages,
sampling, evaluation, the two ablations, and plot emission. All commands take
``--seed``; commands that train the diffusion model also accept ``--config``
pointing at a JSON file of training settings (CLI flags win over the file).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import binding, harness, losses, metrics, seqio
from .denoiser import DenoiserConfig


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _load_train_config(args) -> harness.TrainConfig:
    base: dict = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    config = harness.TrainConfig.from_dict(base) if base else harness.TrainConfig()
    for attr, key in (
        ("seed", "seed"),
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("lr", "lr"),
        ("steps", "num_steps"),
        ("drop", "drop_probability"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(config, key, value)
    if getattr(args, "weights", None) is not None:
        config.weights = losses.LossWeights(*_parse_floats(args.weights))
    if getattr(args, "width", None) is not None or getattr(args, "blocks", None) is not None:
        d = config.denoiser.to_dict()
        if args.width is not None:
            d["width"] = args.width
            d["ffn_width"] = 2 * args.width
        if args.blocks is not None:
            d["blocks"] = args.blocks
        config.denoiser = DenoiserConfig.from_dict(d)
    return config


def _get_probe(args, manifest, out_dir: Path) -> metrics.EmotionProbe:
    if getattr(args, "probe", None):
        return metrics.load_probe(args.probe)
    probe, _ = metrics.train_probe(manifest, seed=args.seed)
    metrics.save_probe(probe, out_dir / "probe.ckpt")
    return probe


def _cmd_generate_data(args) -> int:
    manifest = seqio.generate_corpus(
        args.out,
        seed=args.seed,
        num_classes=args.classes,
        n_samples=args.samples,
        frames_per_clip=args.frames,
    )
    print(
        f"wrote {manifest.n_samples} samples over {manifest.num_classes} classes "
        f"to {Path(args.out) / 'manifest.json'}"
    )
    return 0


def _cmd_train_binding(args) -> int:
    manifest = seqio.load_manifest(args.corpus)
    bank, log = binding.train_binding(
        manifest, tau=args.tau, epochs=args.epochs, seed=args.seed
    )
    binding.save_bank(bank, args.out)
    table = binding.evaluate_retrieval(bank, manifest, split="test")
    print(f"saved binding bank to {args.out}")
    print(f"contrastive loss: first {log['contrastive'][0]:.4f} last {log['contrastive'][-1]:.4f}")
    print(table.format())
    return 0


def _cmd_train_sync_expert(args) -> int:
    manifest = seqio.load_manifest(args.corpus)
    expert, log = losses.train_sync_expert(manifest, seed=args.seed, steps=args.steps)
    losses.save_expert(expert, args.out)
    acc = losses.held_out_sync_accuracy(expert, manifest, split="test")
    print(f"saved sync expert to {args.out}; held-out matched-vs-shifted accuracy {acc:.3f}")
    return 0


def _cmd_train_diffusion(args) -> int:
    manifest = seqio.load_manifest(args.corpus)
    bank = binding.load_bank(args.bank)
    expert = losses.load_expert(args.expert)
    config = _load_train_config(args)
    _, _, log = harness.train_diffusion(manifest, bank, expert, config, out_path=args.out)
    first, last = log["loss"][0], log["loss"][-1]
    print(f"saved denoiser to {args.out}")
    print(f"total loss: step {first['step']} {first['total']:.4f} -> step {last['step']} {last['total']:.4f}")
    return 0


def _cmd_sample(args) -> int:
    bank = binding.load_bank(args.bank)
    model, schedule, config = harness.load_denoiser(args.model)
    if args.steps is not None and args.steps != config.num_steps:
        from .diffusion import make_schedule

        schedule = make_schedule(args.steps)
    content = seqio.read_track(args.content, "content")
    if args.label is not None:
        prompt = harness.StylePrompt("label", args.label)
        emotion = args.label
    elif args.text is not None:
        prompt = harness.StylePrompt("text", np.array(_parse_ints(args.text), dtype=np.int64))
        emotion = None
    elif args.audio is not None:
        prompt = harness.StylePrompt("audio", seqio.read_track(args.audio, "audio"))
        emotion = None
    else:
        motion = seqio.read_sequence(args.motion)
        prompt = harness.StylePrompt("motion", motion)
        emotion = motion.emotion_class
    seq = harness.generate(
        model,
        schedule,
        bank,
        content,
        prompt,
        subject_id=args.subject,
        weight=args.weight,
        seed=args.seed,
        emotion_class=emotion,
    )
    seqio.write_sequence(seq, args.out)
    print(f"wrote {seq.num_frames}x{seq.dim} clip to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = seqio.load_manifest(args.corpus)
    bank = binding.load_bank(args.bank)
    model, schedule, _ = harness.load_denoiser(args.model)
    probe = _get_probe(args, manifest, out_dir)
    rows, summary = harness.evaluate_generation(
        manifest,
        model,
        schedule,
        bank,
        probe,
        split=args.split,
        weight=args.weight,
        seed=args.seed,
        n_clips=args.clips,
    )
    harness.write_rows_csv(out_dir / "metrics.csv", rows)
    harness.write_summary_json(out_dir / "summary.json", summary)
    print(f"wrote {out_dir / 'metrics.csv'} and {out_dir / 'summary.json'}")
    for label, values in sorted(summary["per_modality"].items()):
        parts = " ".join(f"{k}={v:.4f}" for k, v in sorted(values.items()))
        print(f"  {label}: {parts}")
    return 0


def _cmd_ablate_weights(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = seqio.load_manifest(args.corpus)
    bank = binding.load_bank(args.bank)
    model, schedule, _ = harness.load_denoiser(args.model)
    probe = _get_probe(args, manifest, out_dir)
    rows, summary = harness.run_ablation_weights(
        manifest,
        model,
        schedule,
        bank,
        probe,
        weights=_parse_floats(args.weights),
        seeds=_parse_ints(args.seeds),
        n_clips=args.clips,
        split=args.split,
    )
    harness.write_rows_csv(out_dir / "weight_sweep.csv", rows)
    harness.write_summary_json(out_dir / "summary.json", summary)
    harness.plot_metric_curves(out_dir / "weight_sweep.csv", out_dir / "weight_sweep.png")
    print(f"wrote sweep to {out_dir}; au_std spearman rho {summary['au_std_spearman']:.3f}")
    return 0


def _cmd_ablate_deterministic(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = seqio.load_manifest(args.corpus)
    bank = binding.load_bank(args.bank)
    expert = losses.load_expert(args.expert)
    model, schedule, _ = harness.load_denoiser(args.model)
    probe = _get_probe(args, manifest, out_dir)
    config = _load_train_config(args)
    rows, summary = harness.run_ablation_deterministic(
        manifest,
        bank,
        expert,
        model,
        schedule,
        probe,
        config,
        weight=args.weight,
        n_clips=args.clips,
        seed=args.seed,
    )
    harness.write_rows_csv(out_dir / "deterministic.csv", rows)
    harness.write_summary_json(out_dir / "summary.json", summary)
    print(f"wrote deterministic comparison to {out_dir}")
    for label, values in sorted(summary["per_variant"].items()):
        parts = " ".join(f"{k}={v:.4f}" for k, v in sorted(values.items()))
        print(f"  {label}: {parts}")
    return 0


def _cmd_plot(args) -> int:
    harness.plot_metric_curves(args.csv, args.out, x_column=args.x)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emoface",
        description="Emotion-controllable expression sequence synthesis pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output path"):
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("generate-data", help="synthesize the oracle corpus")
    common(p, "corpus output directory")
    p.add_argument("--classes", type=int, default=seqio.DEFAULT_CLASSES)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--frames", type=int, default=seqio.DEFAULT_FRAMES)
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("train-binding", help="train the multimodal embedding bank")
    common(p, "bank checkpoint path")
    p.add_argument("--corpus", required=True, help="corpus manifest.json")
    p.add_argument("--tau", type=float, default=binding.DEFAULT_TAU)
    p.add_argument("--epochs", type=int, default=40)
    p.set_defaults(func=_cmd_train_binding)

    p = sub.add_parser("train-sync-expert", help="train the lip-sync scorer")
    common(p, "expert checkpoint path")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.set_defaults(func=_cmd_train_sync_expert)

    p = sub.add_parser("train-diffusion", help="train the denoising generator")
    common(p, "denoiser checkpoint path")
    p.add_argument("--corpus", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--expert", required=True)
    p.add_argument("--config", help="JSON file of training settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int, help="diffusion chain length")
    p.add_argument("--drop", type=float, help="conditioning dropout probability")
    p.add_argument("--weights", help="comma-separated loss weights, e.g. 1,0.01,0.01")
    p.add_argument("--width", type=int, help="denoiser channel width")
    p.add_argument("--blocks", type=int, help="denoiser block count")
    p.set_defaults(func=_cmd_train_diffusion)

    p = sub.add_parser("sample", help="generate one clip for a content track")
    common(p, "output clip path (.emdf)")
    p.add_argument("--bank", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--content", required=True, help="content track (.emdf)")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--label", type=int, help="emotion class index")
    group.add_argument("--text", help="token ids, comma separated")
    group.add_argument("--audio", help="emotional audio track (.emdf)")
    group.add_argument("--motion", help="emotional motion clip (.emdf)")
    p.add_argument("--weight", type=float, default=2.0, help="guidance weight")
    p.add_argument("--steps", type=int, help="override chain length")
    p.add_argument("--subject", default="subj00", help="identity template id")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("evaluate", help="generate and score clips for every prompt modality")
    common(p, "report output directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--probe", help="reuse a trained probe checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--weight", type=float, default=2.0)
    p.add_argument("--clips", type=int, default=8, help="clips per modality")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate-weights", help="sweep the guidance weight")
    common(p, "report output directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--probe")
    p.add_argument("--weights", default="0.5,1.0,1.5,2.0,3.0")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--clips", type=int, default=4, help="clips per (weight, seed) cell")
    p.add_argument("--split", default="test")
    p.set_defaults(func=_cmd_ablate_weights)

    p = sub.add_parser(
        "ablate-deterministic", help="compare one-shot regressors against the sampler"
    )
    common(p, "report output directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--expert", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--probe")
    p.add_argument("--config", help="JSON file of training settings for the regressors")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight", type=float, default=2.0, help="guidance weight of the sampler")
    p.add_argument("--clips", type=int, default=8)
    p.set_defaults(func=_cmd_ablate_deterministic)

    p = sub.add_parser("plot", help="plot per-metric means from an emitted CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--x", default="weight", help="column to sweep on the x axis")
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
