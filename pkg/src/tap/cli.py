"""Command-line entry points: vocab building, data synthesis, embedding
precompute, training, evaluation and serving."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _cmd_vocab_build(args):
    from .teacher import SyntheticTeacher
    from .vocab import build_concept_weights, merge_and_dedup, save_vocabulary, save_weights

    name_lists = [
        [ln.strip() for ln in Path(f).read_text().splitlines() if ln.strip()]
        for f in args.names
    ]
    vocab = merge_and_dedup(name_lists)
    teacher = SyntheticTeacher(d_text=args.d_text, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_vocabulary(vocab, out / "vocabulary.txt")
    for variant in ("source", "target"):
        save_weights(build_concept_weights(vocab, teacher, variant), out / f"weights-{variant}.bin")
    print(f"wrote {len(vocab)} concepts and source/target weights to {out}")


def _cmd_data_synth(args):
    from .datastore import ShapesConfig, generate_shapes_dataset, save_dataset

    cfg = ShapesConfig(n_images=args.n, k=args.k, seed=args.seed, image_size=args.image_size)
    dataset = generate_shapes_dataset(cfg)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset.records)} images / {dataset.num_regions} regions to {args.out}")


def _cmd_embed_precompute(args):
    from .datastore import load_dataset, precompute_embeddings
    from .teacher import SyntheticTeacher

    dataset = load_dataset(args.data)
    teacher = SyntheticTeacher(d_text=args.d_text, seed=args.seed, sigma=args.sigma)
    n = precompute_embeddings(dataset, teacher, args.out)
    print(f"stored {n} embeddings to {args.out}")


def _cmd_train_pretrain(args):
    from .config import load_configs
    from .trainer import pretrain

    model_cfg, train_cfg = load_configs(args.cfg)
    path = pretrain(model_cfg, train_cfg, resume_from=args.resume)
    print(f"pretrain checkpoint: {path}")


def _cmd_train_finetune(args):
    from .config import load_configs
    from .trainer import finetune

    model_cfg, train_cfg = load_configs(args.cfg)
    path = finetune(model_cfg, train_cfg, pretrained=args.init)
    print(f"fine-tune checkpoint: {path}")


def _cmd_eval(args):
    from .datastore import load_dataset
    from .evaluator import full_report
    from .teacher import SyntheticTeacher
    from .trainer import load_finetuned
    from .vocab import dataset_vocab_weights

    model, captioner, tokenizer, ckpt = load_finetuned(args.ckpt)
    dataset = load_dataset(args.data)
    tcfg = ckpt.train_config
    teacher = SyntheticTeacher(
        d_text=ckpt.model_config.d_text,
        seed=tcfg.teacher_seed if tcfg else 0,
        sigma=tcfg.teacher_sigma if tcfg else 0.05,
    )
    weights = dataset_vocab_weights(dataset.concepts, teacher)
    report = full_report(
        model, dataset, weights.columns, dataset.concepts,
        captioner=captioner, tokenizer=tokenizer, topk=args.topk,
    )
    if args.report:
        report.to_json(args.report)
    print(json.dumps({
        "miou": round(report.miou, 4),
        "top1": round(report.top1, 4),
        "top5": round(report.top5, 4),
        "bleu4": round(report.bleu4, 4),
        "instances": report.num_instances,
    }, indent=1))


def _cmd_serve(args):
    import uvicorn

    from .server import create_app, engine_from_checkpoint

    engine = engine_from_checkpoint(args.ckpt)
    app = create_app(engine)
    if args.static:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=args.static, html=True), name="ui")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    vocab = sub.add_parser("vocab", help="concept vocabulary tools").add_subparsers(
        dest="sub", required=True
    )
    p = vocab.add_parser("build", help="merge name lists and emit weights")
    p.add_argument("--names", nargs="+", required=True, help="class-name text files")
    p.add_argument("--out", required=True)
    p.add_argument("--d-text", type=int, default=64, dest="d_text")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_vocab_build)

    data = sub.add_parser("data", help="dataset generation").add_subparsers(
        dest="sub", required=True
    )
    p = data.add_parser("synth", help="generate the shapes-world dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=128, dest="image_size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_data_synth)

    embed = sub.add_parser("embed", help="teacher embedding store").add_subparsers(
        dest="sub", required=True
    )
    p = embed.add_parser("precompute", help="embed every region into the store")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d-text", type=int, default=64, dest="d_text")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.05)
    p.set_defaults(func=_cmd_embed_precompute)

    train = sub.add_parser("train", help="training loops").add_subparsers(
        dest="sub", required=True
    )
    p = train.add_parser("pretrain", help="joint mask + concept pre-training")
    p.add_argument("--cfg", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=_cmd_train_pretrain)
    p = train.add_parser("finetune", help="caption fine-tuning over a frozen image path")
    p.add_argument("--cfg", required=True)
    p.add_argument("--init", required=True)
    p.set_defaults(func=_cmd_train_finetune)

    p = sub.add_parser("eval", help="run the evaluation report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--topk", type=int, default=5)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--static", default=None, help="serve a built web UI from this directory")
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
