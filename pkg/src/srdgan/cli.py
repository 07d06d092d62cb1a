"""``srdgan`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration/spec error, 3 data validation error,
4 numeric failure. Failures print one line ``srdgan: error[<category>]: ...``
on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .errors import (ArgumentError, DimensionError, FormatError, NotFound, NumericError, SpecError,
                     SRDGANError, StateError, ValidationError)

log = logging.getLogger("srdgan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_LAYOUT = ("checkpoints", "logs", "images", "reports")


class ConfigError(SRDGANError):
    category = "config"


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such config file: {path}")
    try:
        cfg = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path} must hold a mapping")
    return cfg


def _section(cfg: dict, *names: str) -> dict:
    out = {}
    for n in names:
        sub = cfg.get(n) or {}
        if not isinstance(sub, dict):
            raise ConfigError(f"config section {n!r} must be a mapping")
        out.update(sub)
    return out


def _override(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def prepare_out(out: Path) -> Path:
    for sub in OUT_LAYOUT:
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def write_resolved(out: Path, command: str, resolved: dict):
    doc = {"command": command, **resolved}
    text = yaml.safe_dump(json.loads(json.dumps(doc, default=str)), sort_keys=True)
    log.info("resolved config for %s:\n%s", command, text)
    (out / f"config.{command}.resolved.yaml").write_text(text)


# ---------------------------------------------------------------- subcommands


def cmd_synth_corpus(args) -> int:
    from .data import CorpusConfig, save_manifest, synth_burst_corpus

    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    params = _override(_section(cfg, "corpus"), n_scenes=args.n_scenes, n_unpaired=args.n_unpaired,
                       image_size=args.image_size, burst_size=args.burst_size)
    try:
        corpus = CorpusConfig(**params)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad corpus config: {e}") from e
    out = prepare_out(Path(args.out))
    write_resolved(out, "synth-corpus", {"seed": seed, "corpus": vars(corpus)})
    manifest = synth_burst_corpus(corpus, seed, out / "images" / "corpus")
    path = save_manifest(manifest, out / "corpus_manifest.json")
    print(f"wrote {len(manifest.entries)} entries to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import training
    from .data import load_manifest

    cfg = load_config(args.config)
    stage = args.stage.upper()
    plan_d = _section(cfg, "train", f"train_{args.stage}")
    if "seed" in cfg and "seed" not in plan_d:
        plan_d["seed"] = cfg["seed"]
    lr_sched = dict(plan_d.get("lr_schedule") or {})
    if args.lr is not None:
        lr_sched["initial"] = args.lr
    if stage == "JOINT" and "initial" not in lr_sched:
        lr_sched["initial"] = None
    plan_d["lr_schedule"] = lr_sched
    plan_d = _override(plan_d, stage=stage, iterations=args.iterations, batch_size=args.batch_size,
                       patch_size=args.patch_size, seed=args.seed, checkpoint_every=args.checkpoint_every)
    if args.no_deterministic:
        plan_d["deterministic"] = False
    try:
        if args.paper_scale:
            plan = training.TrainPlan.paper_scale(**plan_d)
        else:
            plan = training.TrainPlan.from_dict(plan_d)
    except TypeError as e:
        raise ConfigError(f"bad training config: {e}") from e
    init = {k: v for k, v in {"g_h2l": args.init_h2l, "g_l2h": args.init_l2h,
                               "d_h2l": args.init_d_h2l, "d_l2h": args.init_d_l2h}.items() if v}
    manifest = load_manifest(args.manifest)
    manifest.check()
    out = prepare_out(Path(args.out))
    write_resolved(out, f"train-{args.stage}", {"plan": plan.to_dict(), "manifest": str(args.manifest),
                                                 "init": init, "resume": args.resume})
    state = training.run(plan, manifest, out, init=init, resume_from=args.resume)
    print(json.dumps(state.history[-1]))
    print(f"checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


def cmd_make_gmsr(args) -> int:
    from .data import list_pngs, load_manifest, save_manifest, synthesize_gmsr
    from .imaging import NoiseSpec
    from .networks import H2L_GEN, load_checkpoint

    cfg = _section(load_config(args.config), "gmsr")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    std = args.noise_std if args.noise_std is not None else cfg.get("noise_std", 0.05)
    h2l = load_checkpoint(args.h2l, kind=H2L_GEN)
    if args.hr_dir:
        sources = list_pngs(args.hr_dir)
        names = [p.stem for p in sources]
    elif args.manifest:
        m = load_manifest(args.manifest)
        sources = sorted({str(m.resolve(e.hr_clean_path)) for e in m.entries if e.hr_clean_path})
        names = [f"gmsr_{i:05d}" for i in range(len(sources))]
    else:
        raise ConfigError("make-gmsr needs --hr-dir or --manifest")
    if not sources:
        raise ValidationError("no clean HR images found")
    out = prepare_out(Path(args.out))
    write_resolved(out, "make-gmsr", {"h2l": args.h2l, "seed": seed, "noise_std": std,
                                      "sources": [str(s) for s in sources]})
    manifest = synthesize_gmsr(h2l, sources, NoiseSpec(0.0, std), seed, out / "images" / "gmsr", names)
    path = save_manifest(manifest, out / "gmsr_manifest.json")
    print(f"wrote {len(manifest.entries)} pairs to {path}")
    return EXIT_OK


def cmd_sr(args) -> int:
    from .evaluation import sr_infer

    out = prepare_out(Path(args.out))
    write_resolved(out, "sr", {"checkpoint": args.checkpoint, "input": args.input,
                               "tile_size": args.tile_size, "tile_pad": args.tile_pad})
    result = sr_infer(args.checkpoint, args.input, args.tile_size, args.tile_pad, out / "images")
    n = len(result) if isinstance(result, list) else 1
    print(f"wrote {n} image(s) to {out / 'images'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_dir

    result = evaluate_dir(args.sr_dir, args.gt_dir, args.crop_border, not args.rgb, args.luma)
    print(result.table())
    print(f"PSNR/SSIM {result.row()}")
    if args.out:
        out = prepare_out(Path(args.out))
        write_resolved(out, "eval", {"sr_dir": args.sr_dir, "gt_dir": args.gt_dir,
                                     "crop_border": args.crop_border, "y_channel": not args.rgb,
                                     "luma": args.luma})
        (out / "reports" / "metrics.json").write_text(result.to_json())
        (out / "reports" / "metrics.txt").write_text(result.table() + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srdgan", description="Dual-GAN super-resolution pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-corpus", help="write the synthetic burst-noise corpus and its manifest")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="YAML config file (section 'corpus')")
    s.add_argument("--seed", type=int, help="random seed")
    s.add_argument("--n-scenes", type=int, help="number of paired clean/noisy scenes")
    s.add_argument("--n-unpaired", type=int, help="number of unpaired noisy scenes")
    s.add_argument("--image-size", type=int, help="side length of every scene in pixels")
    s.add_argument("--burst-size", type=int, help="noisy frames per scene (>= 2)")
    s.set_defaults(func=cmd_synth_corpus)

    t = sub.add_parser("train", help="train one stage: h2l, l2h or joint")
    t.add_argument("stage", choices=("h2l", "l2h", "joint"), help="which stage to train")
    t.add_argument("--manifest", required=True, help="pair manifest (JSON)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config", help="YAML config file (sections 'train' and 'train_<stage>')")
    t.add_argument("--iterations", type=int, help="total iterations for the stage")
    t.add_argument("--batch-size", type=int, help="patches per batch")
    t.add_argument("--patch-size", type=int, help="HR patch side length")
    t.add_argument("--lr", type=float, help="initial learning rate")
    t.add_argument("--seed", type=int, help="random seed")
    t.add_argument("--checkpoint-every", type=int, help="write a training state every N iterations")
    t.add_argument("--resume", help="training-state file to resume from")
    t.add_argument("--init-h2l", help="H2L generator checkpoint to start from")
    t.add_argument("--init-l2h", help="L2H generator checkpoint to start from")
    t.add_argument("--init-d-h2l", help="H2L discriminator checkpoint to start from")
    t.add_argument("--init-d-l2h", help="L2H discriminator checkpoint to start from")
    t.add_argument("--paper-scale", action="store_true", help="use the full-size networks and batch settings")
    t.add_argument("--no-deterministic", action="store_true", help="allow multi-threaded, non-bit-exact kernels")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("make-gmsr", help="generate realistic LR partners with a trained H2L generator")
    g.add_argument("--h2l", required=True, help="H2L generator checkpoint")
    g.add_argument("--hr-dir", help="directory of clean HR PNGs")
    g.add_argument("--manifest", help="manifest whose clean HR images are used instead of --hr-dir")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--config", help="YAML config file (section 'gmsr')")
    g.add_argument("--seed", type=int, help="random seed for the noise planes")
    g.add_argument("--noise-std", type=float, help="standard deviation of the input noise plane")
    g.set_defaults(func=cmd_make_gmsr)

    r = sub.add_parser("sr", help="super-resolve an image or a directory of images")
    r.add_argument("--checkpoint", required=True, help="L2H generator checkpoint")
    r.add_argument("--input", required=True, help="PNG file or directory of PNGs")
    r.add_argument("--out", required=True, help="output directory (results in images/)")
    r.add_argument("--tile-size", type=int, help="LR tile side; omit for whole-image inference")
    r.add_argument("--tile-pad", type=int, help="context pixels per tile side (default: receptive radius)")
    r.set_defaults(func=cmd_sr)

    e = sub.add_parser("eval", help="Y-channel PSNR/SSIM of SR results against ground truth")
    e.add_argument("--sr-dir", required=True, help="directory of super-resolved PNGs")
    e.add_argument("--gt-dir", required=True, help="directory of ground-truth PNGs with the same names")
    e.add_argument("--crop-border", type=int, default=4, help="border pixels excluded from the metrics")
    e.add_argument("--rgb", action="store_true", help="compute metrics on RGB instead of the Y channel")
    e.add_argument("--luma", choices=("full", "studio"), default="full",
                   help="Y range: full 0..1 or studio 16..235 (the usual published-table convention)")
    e.add_argument("--out", help="optional output directory for reports/")
    e.set_defaults(func=cmd_eval)
    return p


def exit_code_for(err: BaseException) -> int:
    if isinstance(err, NumericError):
        return EXIT_NUMERIC
    if isinstance(err, (ConfigError, SpecError, ArgumentError, StateError)):
        return EXIT_CONFIG
    if isinstance(err, (ValidationError, NotFound, FormatError, DimensionError)):
        return EXIT_DATA
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except SRDGANError as err:
        code = exit_code_for(err)
        msg = str(err).replace("\n", " ")
        print(f"srdgan: error[{err.category}]: {msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
