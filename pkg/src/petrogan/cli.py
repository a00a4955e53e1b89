"""Command-line entry points for the workbench.

Batch pipelines (dataset, train, fid, perturb-bench, sefa, project,
generate, survey) run in-process; ``serve`` hosts the HTTP explorer that the
web UI talks to.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import fid as fid_mod
from . import latent, survey, trainer
from .images import load_image, save_image


def _cmd_dataset_build(args) -> int:
    report = ds.ingest(args.src, args.labels)
    for path, reason in report.skipped:
        print(f"skipped {path}: {reason}", file=sys.stderr)
    out = Path(args.out)
    sliced = ds.slice_sources(report.ingested, args.size, args.strategy,
                              out / "tiles")
    for path, reason in sliced.skipped:
        print(f"skipped {path}: {reason}", file=sys.stderr)
    manifest = sliced.manifest
    if args.balance:
        target = args.target or min(c for c in manifest.counts().values() if c)
        manifest = ds.balance(manifest, target, seed=args.seed)
    manifest.save(out / "manifest.json")
    print(f"wrote {len(manifest.records)} tiles; counts: {manifest.counts()}")
    return 0


def _cmd_dataset_downscale(args) -> int:
    manifest = ds.DatasetManifest.load(args.manifest)
    out = Path(args.out)
    smaller = ds.downscale(manifest, args.size, out / "tiles")
    smaller.save(out / "manifest.json")
    print(f"wrote {len(smaller.records)} tiles at {args.size}x{args.size}")
    return 0


def _cmd_train(args) -> int:
    manifest = ds.DatasetManifest.load(args.manifest)
    config = trainer.TrainConfig(
        resolution=args.res, kimg_budget=args.kimg,
        eval_cadence_kimg=args.snap, batch_size=args.batch,
        base_channels=args.base_channels, seed=args.seed,
        fid_samples=args.fid_samples,
        ada_enabled=not args.no_ada)
    init = trainer.Checkpoint.load(args.resume) if args.resume else None
    result = trainer.train(config, manifest, init=init, out_dir=args.out,
                           log_fn=print)
    if result.fid_log:
        k, v = min(result.fid_log, key=lambda e: e[1])
        print(f"best fid {v:.3f} at {k:g} kimg; checkpoints in {args.out}")
    return 0


def _cmd_fid(args) -> int:
    extractor = (fid_mod.FeatureExtractor.load(args.extractor)
                 if args.extractor else fid_mod.FeatureExtractor.desk())
    if args.ckpt:
        ckpt = trainer.Checkpoint.load(args.ckpt)
        g = ckpt.build_generator()
        fake = lambda n: trainer.sample_images(g, n, seed=args.seed)
    elif args.fake:
        fake = args.fake
    else:
        print("one of --fake/--ckpt is required", file=sys.stderr)
        return 2
    report = fid_mod.fid(args.real, fake, extractor=extractor,
                         n_samples=args.samples, cache_dir=args.cache)
    print(f"fid {report.value:.6f} (mean {report.mean_term:.6f} + "
          f"trace {report.trace_term:.6f}) extractor {report.extractor_id_a} "
          f"n={report.n_a}/{report.n_b}")
    return 0


def _cmd_perturb_bench(args) -> int:
    ladders = []
    if args.median:
        ladders.append([ds.PerturbationSpec("median_filter", int(k))
                        for k in args.median.split(",")])
    if args.saltpepper:
        ladders.append([ds.PerturbationSpec("salt_pepper", float(r), seed=args.seed)
                        for r in args.saltpepper.split(",")])
    if not ladders:
        print("nothing to do: pass --median and/or --saltpepper", file=sys.stderr)
        return 2
    extractor = fid_mod.FeatureExtractor.desk()
    lines = ["kind,parameter,fid,monotonic_so_far"]
    for ladder in ladders:
        report = fid_mod.perturbation_benchmark(args.images, ladder, extractor)
        for i, rung in enumerate(report.rungs):
            ok = i not in report.non_monotonic
            lines.append(f"{report.kind},{rung.parameter:g},{rung.fid:.6f},{ok}")
            print(f"{report.kind} {rung.parameter:g}: fid {rung.fid:.4f}"
                  + ("" if ok else "  (below previous rung)"))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return 0


def _cmd_sefa(args) -> int:
    ckpt = trainer.Checkpoint.load(args.ckpt)
    basis = latent.sefa(ckpt.build_generator(), k=args.k)
    basis.save(args.out)
    print(f"wrote {args.k} directions to {args.out}; "
          f"magnitudes {np.round(basis.eigenvalues, 4).tolist()}")
    return 0


def _cmd_project(args) -> int:
    ckpt = trainer.Checkpoint.load(args.ckpt)
    g = ckpt.build_generator()
    image = load_image(args.image)
    from .images import center_crop_resize
    image = center_crop_resize(image, g.cfg.resolution)
    result = latent.project(image, g, ckpt.w_avg,
                            latent.ProjectionConfig(steps=args.steps))
    w_path, recon_path = args.out.split(",")
    w = result.w if isinstance(result.w, np.ndarray) else result.w[0]
    Path(w_path).write_text(json.dumps({
        "w": [float(x) for x in w],
        "loss_trace": [float(v) for v in result.loss_trace]}, indent=1))
    save_image(result.reconstruction, recon_path)
    final = result.loss_trace[-1] if result.loss_trace else float("nan")
    print(f"projected in {args.steps} steps, final loss {final:.6f}")
    return 0


def _cmd_generate(args) -> int:
    ckpt = trainer.Checkpoint.load(args.ckpt)
    g = ckpt.build_generator()
    image, _ = latent.render(g, ckpt.w_avg, seed=args.seed, psi=args.psi)
    save_image(image, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_survey_build(args) -> int:
    ckpt = trainer.Checkpoint.load(args.ckpt)
    g = ckpt.build_generator()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    survey.build_survey(args.pool, g, ckpt.w_avg, n=args.n, psi=args.psi,
                        seed=args.seed, out_dir=out)
    print(f"wrote form.json, key.json and {2 * args.n} images to {out}")
    return 0


def _cmd_survey_score(args) -> int:
    key = survey.SurveyKey.from_dict(json.loads(Path(args.key).read_text()))
    responses = survey.responses_from_csv(Path(args.responses).read_text())
    report = survey.score(responses, key)
    base = Path(args.out)
    base.with_suffix(".json").write_text(json.dumps(report.to_dict(), indent=1))
    base.with_suffix(".csv").write_text(report.to_csv())
    print(report.to_csv())
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .api import ModelRegistry, create_app
    registry = ModelRegistry()
    for path in args.ckpt:
        registry.add_file(path)
    app = create_app(registry, real_pool=args.real_pool, data_dir=args.data_dir,
                     static_dir=args.static)
    port = int(os.environ.get("PETROGAN_PORT", args.port))
    uvicorn.run(app, host=args.host, port=port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="petrogan",
                                description="style-based GAN workbench")
    sub = p.add_subparsers(dest="command", required=True)

    pd = sub.add_parser("dataset", help="build or downscale tile datasets")
    dsub = pd.add_subparsers(dest="dataset_command", required=True)
    b = dsub.add_parser("build", help="ingest, slice and balance source images")
    b.add_argument("--src", required=True)
    b.add_argument("--labels", required=True)
    b.add_argument("--size", type=int, default=512)
    b.add_argument("--strategy", choices=("five_point", "grid"), default="five_point")
    b.add_argument("--balance", action="store_true")
    b.add_argument("--target", type=int, default=None)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=_cmd_dataset_build)
    dn = dsub.add_parser("downscale", help="area-average tiles to a smaller size")
    dn.add_argument("--manifest", required=True)
    dn.add_argument("--size", type=int, required=True)
    dn.add_argument("--out", required=True)
    dn.set_defaults(fn=_cmd_dataset_downscale)

    t = sub.add_parser("train", help="run the adversarial training loop")
    t.add_argument("--manifest", required=True)
    t.add_argument("--res", type=int, default=32)
    t.add_argument("--kimg", type=float, default=200.0)
    t.add_argument("--snap", type=float, default=40.0,
                   help="eval cadence in kimg")
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--base-channels", type=int, default=128)
    t.add_argument("--fid-samples", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-ada", action="store_true")
    t.add_argument("--resume", default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=_cmd_train)

    f = sub.add_parser("fid", help="distance between a real set and a model or set")
    f.add_argument("--real", required=True)
    f.add_argument("--fake", default=None)
    f.add_argument("--ckpt", default=None)
    f.add_argument("--samples", type=int, default=10000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--cache", default=None)
    f.add_argument("--extractor", default=None,
                   help="external extractor weight file")
    f.set_defaults(fn=_cmd_fid)

    pb = sub.add_parser("perturb-bench", help="distance ladder under corruption")
    pb.add_argument("--images", required=True)
    pb.add_argument("--median", default=None, help="comma list of odd kernels")
    pb.add_argument("--saltpepper", default=None, help="comma list of ratios")
    pb.add_argument("--seed", type=int, default=0)
    pb.add_argument("--out", default=None)
    pb.set_defaults(fn=_cmd_perturb_bench)

    s = sub.add_parser("sefa", help="factor style-affine weights into directions")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_sefa)

    pr = sub.add_parser("project", help="search style space for an image")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--steps", type=int, default=1000)
    pr.add_argument("--out", default="w.json,recon.png",
                    help="comma pair: w JSON path, reconstruction PNG path")
    pr.set_defaults(fn=_cmd_project)

    gn = sub.add_parser("generate", help="render a seeded image from a checkpoint")
    gn.add_argument("--ckpt", required=True)
    gn.add_argument("--seed", type=int, default=0)
    gn.add_argument("--psi", type=float, default=0.7)
    gn.add_argument("--out", required=True)
    gn.set_defaults(fn=_cmd_generate)

    sv = sub.add_parser("survey", help="build or score two-image quizzes")
    ssub = sv.add_subparsers(dest="survey_command", required=True)
    sb = ssub.add_parser("build")
    sb.add_argument("--pool", required=True)
    sb.add_argument("--ckpt", required=True)
    sb.add_argument("--n", type=int, default=10)
    sb.add_argument("--psi", type=float, default=0.7)
    sb.add_argument("--seed", type=int, default=0)
    sb.add_argument("--out", required=True)
    sb.set_defaults(fn=_cmd_survey_build)
    sc = ssub.add_parser("score")
    sc.add_argument("--key", required=True)
    sc.add_argument("--responses", required=True)
    sc.add_argument("--out", default="report")
    sc.set_defaults(fn=_cmd_survey_score)

    sr = sub.add_parser("serve", help="host the HTTP explorer")
    sr.add_argument("--ckpt", action="append", required=True)
    sr.add_argument("--real-pool", default=None)
    sr.add_argument("--data-dir", default=None)
    sr.add_argument("--static", default=None, help="directory of UI assets")
    sr.add_argument("--host", default="127.0.0.1")
    sr.add_argument("--port", type=int, default=8080)
    sr.set_defaults(fn=_cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
