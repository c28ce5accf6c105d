"""Operator entry points for every pipeline stage.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ContractViolation, LayoutParseError, NumericFailure

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _die_usage(msg):
    print(f"error: {msg}", file=sys.stderr)
    raise SystemExit(USAGE_ERROR)


def _write_curve(path, curve, header="step,loss"):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in curve:
            step, values = row[0], row[1:]
            fh.write(",".join([str(step)] + [f"{v:.8f}" for v in values]) + "\n")


def cmd_dataset_gen(args):
    from .dataset import generate_corpus
    out = Path(args.out)
    if args.size:
        try:
            w, h = (int(v) for v in args.size.lower().split("x"))
        except ValueError:
            _die_usage(f"--size must look like 64x96, got {args.size!r}")
    else:
        w, h = 64, 96
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        print(f"error: output dir not writable: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    manifest, summary = generate_corpus(out, args.n, args.seed, size=(w, h))
    print(f"wrote {summary['accepted']} samples to {manifest}")
    print(f"cross-validation flagged {summary['flagged']} candidate seeds: "
          f"{summary['flagged_seeds'][:10]}{'...' if summary['flagged'] > 10 else ''}")
    return 0


def cmd_train(args):
    from .pipeline import desk_config, micro_config, train_pipeline
    corpus = Path(args.corpus)
    if not corpus.exists():
        _die_usage(f"corpus manifest {corpus} does not exist")
    if args.resume and not Path(args.resume).exists():
        _die_usage(f"resume checkpoint {args.resume} does not exist")
    cfg = None
    if not args.resume:
        cfg = micro_config(args.seed) if args.preset == "micro" else desk_config(args.seed)
        if args.ae_steps is not None:
            cfg.ae.steps = args.ae_steps
        if args.batch_size is not None:
            cfg.train.batch_size = args.batch_size
    try:
        model, ae_curve, curve = train_pipeline(
            corpus, args.out, args.steps, cfg=cfg, resume=args.resume, log=print)
    except NumericFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    if ae_curve:
        _write_curve(str(args.out) + ".ae_loss.csv", list(enumerate(ae_curve)))
    _write_curve(str(args.out) + ".loss.csv", curve, header="step,loss,mse")
    print(f"checkpoint written to {args.out} "
          f"(diffusion steps: {model.params.step_count})")
    return 0


def cmd_sample(args):
    from .diffusion import load_state
    from .layout import layout_from_json
    from .pipeline import generate
    for name in ("checkpoint", "layout"):
        p = getattr(args, name)
        if not Path(p).exists():
            _die_usage(f"--{name} file {p} does not exist")
    texts = {}
    if args.texts:
        if not Path(args.texts).exists():
            _die_usage(f"--texts file {args.texts} does not exist")
        texts = json.loads(Path(args.texts).read_text())
    refs = {}
    if args.refs:
        refs_dir = Path(args.refs)
        if not refs_dir.is_dir():
            _die_usage(f"--refs dir {args.refs} does not exist")
        from .dataset import load_png
        for p in sorted(refs_dir.glob("*.png")):
            refs[p.stem] = load_png(p)
    drop = None
    if args.drop:
        if not Path(args.drop).exists():
            _die_usage(f"--drop file {args.drop} does not exist")
        drop = json.loads(Path(args.drop).read_text())
    try:
        spec = layout_from_json(Path(args.layout).read_text())
    except LayoutParseError as e:
        _die_usage(f"layout: {e}")
    model, _, _ = load_state(args.checkpoint)
    try:
        image, effective = generate(model, spec, texts, refs, drop=drop,
                                    seed=args.seed, steps=args.steps,
                                    guidance_scale=args.cfg, use_ca=args.ca)
    except ContractViolation as e:
        _die_usage(str(e))
    except NumericFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    from .dataset import save_png
    save_png(args.out, image)
    print(f"wrote {args.out} (drop: {effective})")
    return 0


def cmd_evaluate(args):
    from .dataset import load_png
    from .layout import layout_from_json
    from .pipeline import evaluate_sets
    gen_dir, lay_dir = Path(args.generated_dir), Path(args.layout_dir)
    if not gen_dir.is_dir():
        _die_usage(f"--generated-dir {gen_dir} is not a directory")
    if not lay_dir.is_dir():
        _die_usage(f"--layout-dir {lay_dir} is not a directory")
    gen_paths = sorted(gen_dir.glob("*.png"))
    if not gen_paths:
        _die_usage(f"no PNGs in {gen_dir}")
    images, specs = [], []
    for p in gen_paths:
        lp = lay_dir / (p.stem + ".json")
        if not lp.exists():
            _die_usage(f"no layout JSON for {p.name} (expected {lp})")
        images.append(load_png(p))
        try:
            specs.append(layout_from_json(lp.read_text()))
        except LayoutParseError as e:
            _die_usage(f"{lp}: {e}")
    real = None
    if args.real_dir:
        rd = Path(args.real_dir)
        if not rd.is_dir():
            _die_usage(f"--real-dir {rd} is not a directory")
        real = [load_png(p) for p in sorted(rd.glob("*.png"))]
    report = evaluate_sets(images, specs, real)
    Path(args.report).write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


def cmd_serve(args):
    import uvicorn
    from .service import create_app
    if args.checkpoint and not Path(args.checkpoint).exists():
        _die_usage(f"--checkpoint file {args.checkpoint} does not exist")
    ui_dir = args.ui
    if ui_dir is None and Path("frontend/index.html").exists():
        ui_dir = "frontend"
    if ui_dir is not None and not Path(ui_dir, "index.html").exists():
        _die_usage(f"--ui dir {ui_dir} has no index.html")
    app = create_app(args.checkpoint, workers=args.workers, ui_dir=ui_dir)
    if ui_dir:
        print(f"editor UI at http://{args.host}:{args.port}/ui/")
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="layoutdoll",
        description="layout-conditioned doll generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-gen", help="generate a doll corpus + manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", default=None, help="WxH, default 64x96")
    p.set_defaults(fn=cmd_dataset_gen)

    p = sub.add_parser("train", help="train autoencoder + diffusion")
    p.add_argument("--corpus", required=True, help="manifest.jsonl path")
    p.add_argument("--steps", type=int, required=True, help="total diffusion steps")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ae-steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--preset", choices=("desk", "micro"), default="desk")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate one image from conditions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layout", required=True, help="layout JSON file")
    p.add_argument("--texts", default=None, help="JSON file: component -> sentence")
    p.add_argument("--refs", default=None, help="dir of <component>.png crops")
    p.add_argument("--drop", default=None, help="JSON file: component -> TEXT|IMAGE|NONE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cfg", type=float, default=3.0, help="guidance scale")
    p.add_argument("--ca", type=lambda v: v.lower() in ("1", "true", "yes"),
                   default=True, help="cross-attention modulation on/off")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", default="out.png")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("evaluate", help="score generated images against layouts")
    p.add_argument("--generated-dir", required=True)
    p.add_argument("--layout-dir", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--real-dir", default=None,
                   help="reference image dir for the distribution metrics")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("serve", help="run the HTTP generation service")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--ui", default=None, help="frontend dir to serve at /ui "
                   "(autodetects ./frontend)")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except NumericFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
