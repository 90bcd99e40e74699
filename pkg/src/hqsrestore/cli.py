"""Command-line entry points: degrade, train, restore, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gradcheck, model_store
from .data_prox import TaskSpec
from .errors import ConfigurationError, InputError, ModelFormatError, NumericalError
from .hqs import HqsConfig, PluginPrior, gaussian_denoiser, restore, restore_with_plugins
from .image_io import (
    load_channels, load_image, load_kernel, load_mask, save_channels, save_image, save_kernel, save_mask,
)
from .imaging import psnr
from .synthesis import ClassSpec, degrade, make_training_set, random_mask, random_psf
from .training import PSNR_CAP, TrainConfig, train_progressive

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".pgm", ".pnm", ".png")
RUNTIME_NOTE = "runtime covers restoration compute only (no model load or image I/O)"

log = logging.getLogger("hqsrestore")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _images_in(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


# degrade ---------------------------------------------------------------------

def cmd_degrade(args):
    src = Path(args.input)
    if not src.is_dir():
        raise UsageError(f"input directory {src} does not exist")
    if args.psf and args.psf_size:
        raise UsageError("--psf and --psf-size are mutually exclusive")
    if args.mask_fraction is not None and not 0 <= args.mask_fraction <= 1:
        raise UsageError("--mask-fraction must be in [0, 1]")
    fixed_psf = load_kernel(args.psf) if args.psf else None
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    entries, errors = [], []
    for i, path in enumerate(_images_in(src)):
        try:
            clean = load_image(path)
        except (OSError, InputError, ValueError) as exc:
            errors.append({"file": path.name, "error": str(exc)})
            continue
        seed = args.seed * 1_000_003 + i
        rng = np.random.default_rng(seed)
        entry = {"name": path.stem, "source": str(path), "sigma": args.sigma, "seed": seed}
        if fixed_psf is not None or args.psf_size:
            psf = fixed_psf if fixed_psf is not None else random_psf(args.psf_size, rng)
            task = TaskSpec.deconv(psf, args.sigma)
            save_kernel(out / f"{path.stem}.psf.txt", psf)
            entry.update(task="deconv", psf=f"{path.stem}.psf.txt")
        elif args.mask_fraction is not None:
            mask = random_mask(clean.shape, args.mask_fraction, rng)
            task = TaskSpec.inpaint(mask, args.sigma)
            save_mask(out / f"{path.stem}.mask.pgm", mask)
            entry.update(task="inpaint", mask=f"{path.stem}.mask.pgm",
                         masked_fraction=float(1.0 - mask.mean()))
        else:
            task = TaskSpec.denoise(args.sigma)
            entry.update(task="denoise")
        entry["class_id"] = task.class_id
        b = degrade(clean, task, rng)
        name = f"{path.stem}.{args.format}"
        save_image(out / name, b)
        entry["file"] = name
        entries.append(entry)
    manifest = {"seed": args.seed, "sigma": args.sigma, "psf": args.psf, "psf_size": args.psf_size,
                "mask_fraction": args.mask_fraction, "entries": entries, "errors": errors}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"degraded {len(entries)} images into {out}")
    for e in errors:
        print(f"error: {e['file']}: {e['error']}", file=sys.stderr)
    return EXIT_DATA if errors else EXIT_OK


# train -----------------------------------------------------------------------

def _train_config(manifest, args):
    conf = dict(manifest.get("config", {}))
    for key, attr in (("T_final", "T"), ("n_stages", "K"), ("n_filters", "N"), ("filter_size", "f"),
                      ("greedy_iters", "greedy_iters"), ("refine_iters", "refine_iters")):
        value = getattr(args, attr)
        if value is not None:
            conf[key] = value
    conf.setdefault("seed", manifest.get("seed", 0))
    try:
        return TrainConfig(**conf)
    except TypeError as exc:
        raise UsageError(f"bad training config: {exc}") from None


def cmd_train(args):
    mpath = Path(args.manifest)
    if not mpath.is_file():
        raise UsageError(f"manifest {mpath} not found")
    manifest = json.loads(mpath.read_text())
    cfg = _train_config(manifest, args)
    try:
        classes = [ClassSpec(c["kind"], float(c["sigma"]), int(c["count"]), int(c.get("psf_size", 25)))
                   for c in manifest["classes"]]
        paths = [mpath.parent / p for p in manifest["images"]]
        patch = int(manifest.get("patch_size", 100))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed manifest: {exc}") from None
    images = [load_image(p) for p in paths]
    data = make_training_set(images, classes, patch, manifest.get("seed", cfg.seed))
    out = Path(args.output)
    ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else out.parent
    log_fh = open(args.log, "w") if args.log else None

    def logger(rec):
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

    def checkpoint(tag, model):
        model_store.save(model.with_metadata(phase=tag), ckpt_dir / f"{out.stem}.{tag}.bin")

    try:
        model = train_progressive(data, cfg, logger=logger, on_checkpoint=checkpoint)
    finally:
        if log_fh:
            log_fh.close()
    model = model.with_metadata(manifest=str(mpath), seed=manifest.get("seed", cfg.seed))
    model_store.save(model, out)
    print(f"wrote {out}; lambdas: " + ", ".join(f"{k}={v:.4g}" for k, v in model.lambdas.items()))
    warn = any(p.get("message") in ("line search failed", "non-finite objective") for p in model.metadata["phases"])
    return EXIT_NUMERIC if warn else EXIT_OK


# restore ---------------------------------------------------------------------

def _task_from_flags(args, shape=None):
    sigma = args.sigma
    if args.task == "denoise":
        if args.psf or args.mask:
            raise UsageError("--psf/--mask are not valid with --task denoise")
        return TaskSpec.denoise(sigma, args.class_id)
    if args.task == "deconv":
        if not args.psf:
            raise UsageError("--task deconv requires --psf")
        return TaskSpec.deconv(load_kernel(args.psf), sigma, args.class_id)
    if not args.mask:
        raise UsageError("--task inpaint requires --mask")
    return TaskSpec.inpaint(load_mask(args.mask), sigma, args.class_id)


def _plugins(args):
    if not args.plugin:
        return []
    tau = args.tau if args.tau is not None else max(args.sigma, 1e-3)
    return [PluginPrior(gaussian_denoiser(args.plugin_width), tau)]


def cmd_restore(args):
    for p in (args.model, args.input):
        if not Path(p).is_file():
            raise UsageError(f"{p} not found")
    if args.task == "deconv" and not args.psf:
        raise UsageError("--task deconv requires --psf")
    if args.task == "inpaint" and not args.mask:
        raise UsageError("--task inpaint requires --mask")
    if args.task == "denoise" and (args.psf or args.mask):
        raise UsageError("--psf/--mask are not valid with --task denoise")
    if args.T < 1:
        raise UsageError("--T must be at least 1")
    if args.tau is not None and not args.plugin:
        raise UsageError("--tau only applies together with --plugin")
    model = model_store.load(args.model)
    task = _task_from_flags(args)
    cfg = HqsConfig(T=args.T, lambda_override=args.lambda_override)
    if cfg.lambda_override is None:
        model.lam(task.class_id)
    channels = load_channels(args.input, model.peak)
    reference = load_channels(args.reference, model.peak) if args.reference else None
    plugins = _plugins(args)
    outputs, reports = [], []
    for c, b in enumerate(channels):
        ref = reference[c] if reference else None
        t0 = time.perf_counter()
        x, trace = restore_with_plugins(b, task, model, cfg, plugins, reference=ref)
        ms = 1000 * (time.perf_counter() - t0)
        outputs.append(x)
        for r in trace.records:
            d = r.as_dict()
            d["channel"] = c
            reports.append(d)
        line = f"channel {c}: T={cfg.T} lambda={trace.lam:.4g} init={trace.init_method} {ms:.1f} ms"
        if ref is not None:
            line += f" psnr in {psnr(b, ref, model.peak):.2f} dB -> out {trace.records[-1].psnr:.2f} dB"
        print(line)
    save_channels(args.output, outputs, model.peak)
    report_path = Path(args.report) if args.report else Path(args.output).with_suffix(".jsonl")
    report_path.write_text("".join(json.dumps(r) + "\n" for r in reports))
    return EXIT_OK


# eval ------------------------------------------------------------------------

def _eval_one(model, b, gt, task, T, lam_override, crop):
    cfg = HqsConfig(T=T, lambda_override=lam_override)
    t0 = time.perf_counter()
    x, _ = restore(b, task, model, cfg)
    ms = 1000 * (time.perf_counter() - t0)
    cap = lambda v: min(v, PSNR_CAP)
    return {
        "task_class": task.class_id,
        "input_psnr": cap(psnr(b, gt, model.peak, crop)) if b.shape == gt.shape else None,
        "output_psnr": cap(psnr(x, gt, model.peak, crop)),
        "runtime_ms": ms,
        "T": T,
        "K": model.prior.n_stages,
    }


def _load_degraded(directory, references):
    """Pair degraded files (via the degrade manifest) with references by name."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    pairs, unpaired = [], []
    seen = set()
    for e in manifest["entries"]:
        name = e["name"]
        seen.add(name)
        if name not in references:
            unpaired.append(name)
            continue
        b = load_image(directory / e["file"])
        if e["task"] == "deconv":
            task = TaskSpec.deconv(load_kernel(directory / e["psf"]), e["sigma"])
        elif e["task"] == "inpaint":
            task = TaskSpec.inpaint(load_mask(directory / e["mask"]), e["sigma"])
        else:
            task = TaskSpec.denoise(e["sigma"])
        pairs.append((name, b, task))
    unpaired += [n for n in references if n not in seen]
    return pairs, sorted(unpaired)


def cmd_eval(args):
    if not Path(args.model).is_file():
        raise UsageError(f"{args.model} not found")
    if not Path(args.reference).is_dir():
        raise UsageError(f"reference directory {args.reference} not found")
    if args.degraded and args.sweep_sigma:
        raise UsageError("--sweep-sigma synthesizes its own inputs; drop --degraded")
    if args.T < 1 or (args.sweep_T and min(_ints(args.sweep_T)) < 1):
        raise UsageError("T values must be at least 1")
    model = model_store.load(args.model)
    refs = {p.stem: load_image(p, model.peak) for p in _images_in(args.reference)}
    Ts = _ints(args.sweep_T) if args.sweep_T else [args.T]
    sigmas = _floats(args.sweep_sigma) if args.sweep_sigma else [args.sigma]
    settings, unpaired = [], []
    if args.degraded:
        pairs, unpaired = _load_degraded(args.degraded, refs)
        settings.append(("degraded", pairs))
    else:
        for s in sigmas:
            pairs = []
            for i, name in enumerate(sorted(refs)):
                rng = np.random.default_rng(args.seed * 1_000_003 + i)
                task = TaskSpec.denoise(s)
                pairs.append((name, degrade(refs[name], task, rng), task))
            settings.append((f"sigma={s:g}", pairs))
    for _, pairs in settings:
        for _, _, task in pairs:
            if args.lambda_override is None:
                model.lam(task.class_id)
    jobs = [(label, T, name, b, task) for label, pairs in settings for T in Ts for name, b, task in pairs]

    def run(job):
        label, T, name, b, task = job
        row = _eval_one(model, b, refs[name], task, T, args.lambda_override, args.crop)
        row.update(name=name, setting=label)
        return row

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        rows = list(pool.map(run, jobs))
    rows.sort(key=lambda r: (r["setting"], r["T"], r["name"]))
    aggregates = []
    for label, _ in settings:
        for T in Ts:
            sel = [r for r in rows if r["setting"] == label and r["T"] == T]
            if not sel:
                continue
            ins = [r["input_psnr"] for r in sel if r["input_psnr"] is not None]
            aggregates.append({
                "setting": label, "T": T, "count": len(sel),
                "mean_input_psnr": float(np.mean(ins)) if ins else None,
                "mean_output_psnr": float(np.mean([r["output_psnr"] for r in sel])),
                "mean_runtime_ms": float(np.mean([r["runtime_ms"] for r in sel])),
            })
    report = {
        "rows": rows, "aggregates": aggregates, "unpaired": unpaired, "seed": args.seed,
        "config": {k: v for k, v in vars(args).items() if k != "func"}, "note": RUNTIME_NOTE,
    }
    print(f"{'setting':<14}{'T':>3}{'K':>3}{'n':>4}{'input':>9}{'output':>9}{'ms':>9}")
    for a in aggregates:
        inp = f"{a['mean_input_psnr']:.2f}" if a["mean_input_psnr"] is not None else "-"
        print(f"{a['setting']:<14}{a['T']:>3}{model.prior.n_stages:>3}{a['count']:>4}"
              f"{inp:>9}{a['mean_output_psnr']:>9.2f}{a['mean_runtime_ms']:>9.1f}")
    if unpaired:
        print("unpaired (excluded): " + ", ".join(unpaired))
    if args.report:
        with open(args.report, "w") as fh:
            for r in rows:
                fh.write(json.dumps({"type": "row", **r}) + "\n")
            for a in aggregates:
                fh.write(json.dumps({"type": "aggregate", **a}) + "\n")
            fh.write(json.dumps({"type": "meta", "unpaired": unpaired, "seed": args.seed,
                                 "config": report["config"], "note": RUNTIME_NOTE}) + "\n")
    return EXIT_DATA if unpaired else EXIT_OK


# gradcheck -------------------------------------------------------------------

def cmd_gradcheck(args):
    blocks = tuple(args.blocks.split(",")) if args.blocks else gradcheck.ALL_BLOCKS
    unknown = [b for b in blocks if b not in gradcheck.ALL_BLOCKS]
    if unknown:
        raise UsageError(f"unknown blocks {unknown}; choose from {list(gradcheck.ALL_BLOCKS)}")
    arch = tuple(_ints(args.arch))
    if len(arch) != 4:
        raise UsageError("--arch takes K,N,f,M")
    report = gradcheck.run(args.seed, blocks, arch, corrupt=args.corrupt)
    for line in report.lines():
        print(line)
    print(f"seed={args.seed} arch={arch} tolerance={gradcheck.TOLERANCE:g}: "
          + ("PASS" if report.passed else "FAIL"))
    return EXIT_OK if report.passed else EXIT_NUMERIC


# -----------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="hqsrestore", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("degrade", help="synthesize degraded observations from clean images")
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--sigma", type=float, default=15.0)
    d.add_argument("--psf", help="blur with this kernel (text grid or PGM)")
    d.add_argument("--psf-size", type=int, help="blur with a random motion kernel of this odd size")
    d.add_argument("--mask-fraction", type=float, help="fraction of pixels to drop")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--format", choices=("pgm", "png"), default="png")
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", help="progressive training from a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--output", required=True)
    t.add_argument("--checkpoint-dir")
    t.add_argument("--log", help="line-delimited JSON optimizer log")
    for flag in ("--T", "--K", "--N", "--f", "--greedy-iters", "--refine-iters"):
        t.add_argument(flag, type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", help="restore one image")
    r.add_argument("--model", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--output", required=True)
    r.add_argument("--task", choices=("denoise", "deconv", "inpaint"), default="denoise")
    r.add_argument("--sigma", type=float, default=15.0)
    r.add_argument("--class-id")
    r.add_argument("--psf")
    r.add_argument("--mask")
    r.add_argument("--lambda-override", type=float)
    r.add_argument("--T", type=int, default=3)
    r.add_argument("--reference")
    r.add_argument("--report")
    r.add_argument("--plugin", choices=("gaussian",))
    r.add_argument("--plugin-width", type=float, default=0.1)
    r.add_argument("--tau", type=float, help="plug-in prior weight (default: --sigma)")
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("eval", help="PSNR evaluation and T/sigma sweeps")
    e.add_argument("--model", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--degraded")
    e.add_argument("--sigma", type=float, default=15.0)
    e.add_argument("--T", type=int, default=3)
    e.add_argument("--sweep-T")
    e.add_argument("--sweep-sigma")
    e.add_argument("--lambda-override", type=float)
    e.add_argument("--crop", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--jobs", type=int, default=None)
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--blocks")
    g.add_argument("--arch", default="2,2,3,5", help="K,N,f,M of the random models")
    g.add_argument("--corrupt", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ModelFormatError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
