"""Command-line entry point: `mcld <command> ...`.

Every command resolves a config, runs, and writes `run_manifest.json` into
its --out directory. Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, MissingPrerequisiteError, NumericError
from .persistence import ABLATIONS, ArchiveError, load_config, read_ppm, threads_from_env, write_ppm

log = logging.getLogger("mcld")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, default=_json_default), encoding="utf-8")


def _resolve_config(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.preset:
        overrides["preset"] = args.preset
    for key in ("ablation", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _sha256(path: Path) -> str:
    from .synthdata import file_sha256
    return file_sha256(path)


def write_manifest(out: Path, command: str, cfg, seeds: dict, inputs: dict, outputs: list[Path],
                   started: float, extra: dict | None = None) -> dict:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg.to_dict() if cfg is not None else None,
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {p.name: str(p) for p in outputs},
        "hashes": {p.name: _sha256(p) for p in outputs if p.is_file()},
        "wall_time_s": round(time.time() - started, 3),
        "threads": torch.get_num_threads(),
    }
    manifest.update(extra or {})
    _write_json(out / MANIFEST_NAME, manifest)
    return manifest


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_sample(prefix: str):
    from .synthdata import load_sample
    p = Path(prefix)
    if not p.with_name(p.name + ".ppm").exists():
        raise DataError(f"sample {prefix!r} not found (expected {prefix}.ppm and {prefix}.mcld)")
    return load_sample(p)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisiteError(f"missing prerequisite: {what} checkpoint {path} "
                                       f"(run `mcld train --stage {what}` first or pass its path)")
    return path


def _load_models(ckpt: str):
    from .pipeline import load_checkpoint
    if not Path(ckpt).exists():
        raise DataError(f"checkpoint {ckpt} not found")
    return load_checkpoint(ckpt)[0]


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> dict:
    from .stages import dataset_config
    from .synthdata import make_dataset

    t0 = time.time()
    cfg = _resolve_config(args)
    out = _out_dir(args)
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    manifest = make_dataset(dataset_config(cfg, args.base_seed), args.n, out)
    outputs = [out / "manifest.json"]
    for e in manifest["entries"]:
        outputs += [out / f for f in e["source_files"] + e["target_files"]]
    return write_manifest(out, "gen-data", cfg, {"base_seed": args.base_seed}, {}, outputs, t0,
                          {"count": args.n})


def cmd_train(args) -> dict:
    from .pipeline import load_autoencoder, load_face_encoder, save_checkpoint, save_module
    from .stages import train_autoenc_stage, train_diffusion_stage, train_face_stage
    from .synthdata import load_dataset

    t0 = time.time()
    cfg = _resolve_config(args)
    out = _out_dir(args)
    if not (Path(args.data) / "manifest.json").exists():
        raise DataError(f"no dataset at {args.data} (run `mcld gen-data` first)")
    pairs = load_dataset(args.data)
    if not pairs:
        raise DataError(f"dataset {args.data} is empty")
    metrics_path = out / f"{args.stage}_metrics.jsonl"
    inputs = {"data": args.data}
    extra: dict = {"stage": args.stage}

    if args.stage == "autoenc":
        ckpt = out / "autoenc.mcld"
        ae, curve = train_autoenc_stage(cfg, pairs)
        save_module(ckpt, ae, "autoenc", {"kind": "autoenc", "config": cfg.to_dict(),
                                          "ae": {"f": ae.f, "latent_channels": ae.latent_channels,
                                                 "width": ae.encoder[0].out_channels}})
        rows = [{"step": i, "loss": v} for i, v in enumerate(curve)]
    elif args.stage == "face":
        ckpt = out / "face.mcld"
        face, curve = train_face_stage(cfg, pairs)
        save_module(ckpt, face, "face_enc", {"kind": "face", "config": cfg.to_dict(),
                                             "face": {"d": cfg.d, "size": cfg.face_size}})
        rows = [{"step": i, "loss": v} for i, v in enumerate(curve)]
    else:
        ae_path = _require(Path(args.autoenc) if args.autoenc else out / "autoenc.mcld", "autoenc")
        face_path = _require(Path(args.face) if args.face else out / "face.mcld", "face")
        inputs.update(autoenc=ae_path, face=face_path)
        ae, _ = load_autoencoder(ae_path)
        face, _ = load_face_encoder(face_path)
        ckpt = out / f"diffusion-{cfg.ablation}.mcld"
        models, rows = train_diffusion_stage(cfg, ae, face, pairs,
                                             log_fn=lambda r: log.info("step %d loss %.5f", r["step"],
                                                                       r["loss_overall"]))
        save_checkpoint(ckpt, models, {"log_tail": rows[-20:]})
        extra["ablation"] = cfg.ablation
    with metrics_path.open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, default=_json_default) + "\n")
    return write_manifest(out, "train", cfg, {"seed": cfg.seed}, inputs, [ckpt, metrics_path], t0, extra)


def _sample_args(args, models):
    steps = args.steps or models.cfg.ddim_steps
    scale = models.cfg.cfg_scale if args.cfg_scale is None else args.cfg_scale
    return steps, scale


def cmd_sample(args) -> dict:
    from .diffusion import edit_sample

    t0 = time.time()
    out = _out_dir(args)
    models = _load_models(args.ckpt)
    source, pose = _load_sample(args.source), _load_sample(args.pose)
    _check_canvas(models, source, pose)
    steps, scale = _sample_args(args, models)
    img = edit_sample(models, source, {}, pose, seed=args.seed, steps=steps, cfg_scale=scale, eta=args.eta)
    path = out / "sample.ppm"
    write_ppm(path, img)
    return write_manifest(out, "sample", models.cfg, {"seed": args.seed},
                          {"ckpt": args.ckpt, "source": args.source, "pose": args.pose}, [path], t0,
                          {"steps": steps, "cfg_scale": scale, "eta": args.eta})


def _check_canvas(models, *samples) -> None:
    for s in samples:
        if tuple(s.image.shape[:2]) != tuple(models.cfg.canvas):
            raise DataError(f"sample canvas {s.image.shape[:2]} does not match checkpoint canvas {models.cfg.canvas}")


def _locality(plain: np.ndarray, edited: np.ndarray, mask: np.ndarray) -> dict:
    change = np.abs(edited.astype(np.float64) - plain).mean(axis=-1)
    inside = float(change[mask].mean()) if mask.any() else math.nan
    outside = float(change[~mask].mean()) if (~mask).any() else math.nan
    ratio = inside / outside if outside > 0 else math.inf
    return {"inside": inside, "outside": outside, "ratio": ratio}


def cmd_edit(args) -> dict:
    from .diffusion import part_ids, edit_sample
    from .uvmap import part_mask

    t0 = time.time()
    out = _out_dir(args)
    models = _load_models(args.ckpt)
    source, pose = _load_sample(args.source), _load_sample(args.pose)
    edits: dict = {}
    donor = None
    if args.swap_parts or args.swap_face:
        if not args.donor:
            raise UsageError("--swap-parts/--swap-face need --donor")
        donor = _load_sample(args.donor)
    _check_canvas(models, *(s for s in (source, pose, donor) if s is not None))
    if args.swap_parts:
        edits["atlas_swap"] = (donor, [p.strip() for p in args.swap_parts.split(",") if p.strip()])
    if args.swap_face:
        edits["face_swap"] = donor
    steps, scale = _sample_args(args, models)
    img = edit_sample(models, source, edits, pose, seed=args.seed, steps=steps, cfg_scale=scale, eta=args.eta)
    path = out / "edit.ppm"
    write_ppm(path, img)
    extra = {"edits": {"swap_parts": args.swap_parts, "swap_face": bool(args.swap_face)},
             "steps": steps, "cfg_scale": scale}
    if "atlas_swap" in edits:
        # locality: change against the unedited sample, inside vs outside the swapped parts at the target pose
        plain = edit_sample(models, source, {}, pose, seed=args.seed, steps=steps, cfg_scale=scale, eta=args.eta)
        mask = part_mask(pose.dpmap, part_ids(edits["atlas_swap"][1])).astype(bool)
        extra["locality"] = _locality(plain, img, mask)
    return write_manifest(out, "edit", models.cfg, {"seed": args.seed},
                          {"ckpt": args.ckpt, "source": args.source, "donor": args.donor, "pose": args.pose},
                          [path], t0, extra)


def blend_mask(spec: str, pose, latent_hw: tuple[int, int], canvas) -> np.ndarray:
    """Latent-resolution mask from 'all', 'none', a comma list of part names
    (taken from the target pose) or a PPM image (> 0.5 means source)."""
    from .diffusion import part_ids
    from .uvmap import part_mask

    h, w = latent_hw
    if spec == "all":
        return np.ones((h, w), np.float32)
    if spec == "none":
        return np.zeros((h, w), np.float32)
    if spec.lower().endswith(".ppm"):
        img = read_ppm(spec).mean(axis=-1)
        if img.shape != tuple(canvas):
            raise DataError(f"mask {spec} is {img.shape}, expected {tuple(canvas)}")
        full = img > 0.5
    else:
        full = part_mask(pose.dpmap, part_ids([p.strip() for p in spec.split(",") if p.strip()])).astype(bool)
    fy, fx = full.shape[0] // h, full.shape[1] // w
    return full.reshape(h, fy, w, fx).any(axis=(1, 3)).astype(np.float32)


def cmd_edit_blend(args) -> dict:
    from .diffusion import blended_edit_sample
    from .pipeline import build_conditions, source_tensors, target_pose

    t0 = time.time()
    out = _out_dir(args)
    models = _load_models(args.ckpt)
    source, donor, pose = _load_sample(args.source), _load_sample(args.donor), _load_sample(args.pose)
    _check_canvas(models, source, donor, pose)
    steps, scale = _sample_args(args, models)
    m = blend_mask(args.mask, pose, models.latent_hw, models.cfg.canvas)
    with torch.no_grad():
        c_s = build_conditions(models, source_tensors(models, [source]))
        c_r = build_conditions(models, source_tensors(models, [donor]))
        raster, _ = target_pose(models, [pose])
    img = blended_edit_sample(models, c_s, c_r, torch.as_tensor(m)[None, None], raster, steps=steps,
                              seed=args.seed, cfg_scale=scale, eta=args.eta)[0]
    path = out / "edit_blend.ppm"
    write_ppm(path, img)
    return write_manifest(out, "edit-blend", models.cfg, {"seed": args.seed},
                          {"ckpt": args.ckpt, "source": args.source, "donor": args.donor, "pose": args.pose},
                          [path], t0, {"mask": args.mask, "mask_fraction": float(m.mean()),
                                       "steps": steps, "cfg_scale": scale})


def cmd_eval(args) -> dict:
    from .metrics import evaluate
    from .synthdata import load_dataset

    t0 = time.time()
    out = _out_dir(args)
    models = _load_models(args.ckpt)
    pairs = load_dataset(args.data)
    n = len(pairs) if args.n is None else args.n
    if n > len(pairs):
        raise DataError(f"--n {n} exceeds the {len(pairs)} pairs in {args.data}")
    steps, scale = _sample_args(args, models)
    report = evaluate(models, pairs, n, seed=args.seed, steps=steps, cfg_scale=scale)
    jpath, cpath = out / "eval.json", out / "eval.csv"
    jpath.write_text(report.to_json(), encoding="utf-8")
    cpath.write_text(report.to_csv(), encoding="utf-8")
    return write_manifest(out, "eval", models.cfg, {"seed": args.seed}, {"ckpt": args.ckpt, "data": args.data},
                          [jpath, cpath], t0, {"aggregate": report.aggregate})


def cmd_diagnose(args) -> dict:
    from .autoenc import deterioration_report
    from .persistence import read_archive
    from .pipeline import load_autoencoder, load_checkpoint
    from .synthdata import load_dataset

    t0 = time.time()
    out = _out_dir(args)
    if not Path(args.ckpt).exists():
        raise DataError(f"checkpoint {args.ckpt} not found")
    _, meta = read_archive(args.ckpt)
    ae = load_checkpoint(args.ckpt)[0].ae if meta.get("kind") == "mcld-checkpoint" else load_autoencoder(args.ckpt)[0]
    try:
        eps = [float(e) for e in args.eps.split(",") if e.strip()]
    except ValueError as exc:
        raise UsageError(f"--eps must be comma-separated numbers: {exc}") from None
    pairs = load_dataset(args.data)
    samples = [s for p in pairs for s in p][: args.n]
    if not samples:
        raise DataError(f"dataset {args.data} is empty")
    report = deterioration_report(ae, samples, eps, draws=args.draws, seed=args.seed)
    path = out / "diagnose.json"
    _write_json(path, {"eps": eps, "n_images": len(samples), "draws": args.draws, "rows": report})
    for r in report:
        print(f"eps={r['eps']:<5g} region={r['region']:<6} mse={r['mse']:.6f} psnr={r['psnr']:.2f}")
    return write_manifest(out, "diagnose", None, {"seed": args.seed}, {"ckpt": args.ckpt, "data": args.data},
                          [path], t0)


def cmd_selfcheck(args) -> dict:
    from .selfcheck import run_all

    t0 = time.time()
    results = run_all(n_grad=args.n_grad)
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, info in results:
        print(f"{'PASS' if ok else 'FAIL'} {name} {json.dumps(info, default=_json_default)}")
    manifest = {"results": [{"check": n, "ok": ok, **i} for n, ok, i in results], "failed": failed}
    if args.out:
        out = _out_dir(args)
        manifest = write_manifest(out, "selfcheck", None, {"seed": 0}, {}, [], t0, manifest)
    if failed:
        raise NumericError(f"selfcheck failed: {', '.join(failed)}")
    return manifest


def cmd_describe(args) -> dict:
    from .pipeline import describe

    t0 = time.time()
    info = describe(_load_models(args.ckpt))
    print(json.dumps(info, indent=1))
    if args.out:
        out = _out_dir(args)
        return write_manifest(out, "describe", None, {}, {"ckpt": args.ckpt}, [], t0, {"describe": info})
    return info


# ---------------------------------------------------------------- parser


def _add_config_flags(p, with_ablation: bool = False) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", help="config preset (default, tiny, micro)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    if with_ablation:
        p.add_argument("--ablation", choices=ABLATIONS, help="conditioning preset (default: full)")


def _add_sampling_flags(p) -> None:
    p.add_argument("--cfg-scale", type=float, default=None, help="guidance scale (default from config: 3.5)")
    p.add_argument("--steps", type=int, default=None, help="DDIM steps (default from config)")
    p.add_argument("--eta", type=float, default=0.0, help="DDIM eta (0 = deterministic)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcld", description="Multi-focal conditioned latent diffusion at toy scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic source/target pair dataset")
    _add_config_flags(p)
    p.add_argument("--n", type=int, required=True, help="number of pairs")
    p.add_argument("--base-seed", type=int, default=0, help="pair i uses seed base_seed + i")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one stage: autoenc, face or diffusion")
    _add_config_flags(p, with_ablation=True)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--stage", required=True, choices=("autoenc", "face", "diffusion"))
    p.add_argument("--autoenc", help="autoencoder checkpoint (default: OUT/autoenc.mcld)")
    p.add_argument("--face", help="face encoder checkpoint (default: OUT/face.mcld)")
    p.add_argument("--seed", type=int, default=None, help="training seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate the source person at a target pose")
    p.add_argument("--ckpt", required=True, help="diffusion checkpoint")
    p.add_argument("--source", required=True, help="source sample prefix (e.g. data/000000_src)")
    p.add_argument("--pose", required=True, help="sample prefix whose pose map is the target pose")
    _add_sampling_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("edit", help="appearance editing by swapping atlas regions or the face embedding")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--donor", help="sample prefix supplying the swapped appearance")
    p.add_argument("--swap-parts", help="comma-separated part names, e.g. torso,thigh_l")
    p.add_argument("--swap-face", action="store_true", help="use the donor's face embedding")
    p.add_argument("--pose", required=True)
    _add_sampling_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("edit-blend", help="mask-blended two-condition baseline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--donor", required=True, help="reference sample used where the mask is 0")
    p.add_argument("--pose", required=True)
    p.add_argument("--mask", required=True, help="'all', 'none', part names, or a PPM (bright = source)")
    _add_sampling_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edit_blend)

    p = sub.add_parser("eval", help="score generated targets (SSIM, PSNR, FS/dist vs ref and tgt, texture error)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=None, help="number of pairs (default: all)")
    _add_sampling_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="autoencoder latent-perturbation deterioration report")
    p.add_argument("--ckpt", required=True, help="autoencoder or diffusion checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--eps", default="0,0.1,0.2", help="comma-separated noise scales")
    p.add_argument("--n", type=int, default=200, help="number of images")
    p.add_argument("--draws", type=int, default=10, help="noise draws per eps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("selfcheck", help="run the oracle and gradient-check suite")
    p.add_argument("--n-grad", type=int, default=200, help="parameters per gradient check")
    p.add_argument("--out", help="write a manifest here")
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("describe", help="print parameter counts and routing of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_describe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(threads_from_env())
    torch.use_deterministic_algorithms(True)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"mcld: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"mcld: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ArchiveError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mcld: error: {msg}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
