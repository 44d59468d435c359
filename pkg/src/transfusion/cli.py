"""Command line entry points: gen-data, train, sample, eval and compare.

Exit codes: 0 success, 2 bad usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint
from .baseline import (BaselineConfig, TokenStream, baseline_force_image, baseline_model_config,
                       fit_tokenizer, load_tokenizer, tokenize_pairs, tokenizer_arrays)
from .codec import raw_latent, raw_pixels, to_uint8
from .data import (ToyDatasetSpec, classify_image, dataset_hash, gen_toy_dataset, load_toy_dataset,
                   parse_caption)
from .diffusion import SamplerControls, make_cosine_schedule, make_inference_timesteps
from .evaluate import EvalReport, eval_diffusion_loss, eval_perplexity, eval_text_to_image
from .inference import force_image
from .model import ModelConfig, TransfusionModel, count_flops, init_params
from .training import ExampleStream, NumericError, TrainConfig, baseline_step, run_training

log = logging.getLogger("transfusion")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
CHECKPOINT_DIR = "checkpoint"


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise DataError(f"missing file {path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}") from e


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)


def _load_split(data_dir, split: str):
    try:
        rows = load_toy_dataset(data_dir, split)
    except (FileNotFoundError, KeyError, ValueError, OSError) as e:
        raise DataError(f"cannot read dataset {data_dir}: {e}") from e
    if not rows:
        raise DataError(f"dataset {data_dir} has no {split} examples")
    return rows


# ----------------------------------------------------------------------------
# Loaded runs


@dataclasses.dataclass
class LoadedRun:
    arch: str
    model: TransfusionModel
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    meta: dict
    tokenizer: object = None

    @property
    def grid(self) -> tuple[int, int]:
        size = self.meta.get("image_size", 16)
        k = self.tokenizer.window if self.arch == "baseline" else self.model_cfg.patch_window
        return size // k, size // k


def load_run(path) -> LoadedRun:
    path = Path(path)
    if (path / CHECKPOINT_DIR).is_dir():
        path = path / CHECKPOINT_DIR
    try:
        arrays, meta = checkpoint.load_arrays(path)
    except (FileNotFoundError, ValueError, KeyError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    cfg = meta["config"]
    mcfg = ModelConfig.from_dict(cfg["model"])
    model = TransfusionModel(mcfg)
    model.load_state_dict(checkpoint.load_state_dict(arrays))
    model.eval()
    tok = None
    if cfg["arch"] == "baseline":
        tok = load_tokenizer(arrays, mcfg.patch_channels, BaselineConfig.from_dict(cfg["baseline"]))
    return LoadedRun(cfg["arch"], model, mcfg, TrainConfig.from_dict(cfg["train"]), meta, tok)


# ----------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    spec = ToyDatasetSpec.from_json(args.spec) if args.spec else ToyDatasetSpec()
    try:
        out = gen_toy_dataset(spec, args.out)
    except OSError as e:
        raise DataError(f"cannot write dataset to {args.out}: {e}") from e
    print(json.dumps({"out": str(out), "dataset_hash": dataset_hash(out)}))
    return 0


def build_configs(args) -> tuple[ModelConfig, TrainConfig, BaselineConfig]:
    raw = _read_json(args.config) if args.config else {}
    unknown = set(raw) - {"model", "train", "baseline"}
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    model = dict(raw.get("model", {}))
    train = dict(raw.get("train", {}))
    if args.codec:
        model["codec_kind"] = args.codec
    if args.patch:
        model["patch_window"] = args.patch
    if args.mask:
        train["mask_kind"] = args.mask
    if args.noise_limit is not None:
        train["noise_limit"] = args.noise_limit
    if args.steps is not None:
        train["max_steps"] = args.steps
    if args.seed is not None:
        train["seed"] = args.seed
    try:
        return (ModelConfig.from_dict(model), TrainConfig.from_dict(train),
                BaselineConfig.from_dict(raw.get("baseline", {})))
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad config: {e}") from e


def train_run(mcfg: ModelConfig, tcfg: TrainConfig, bcfg: BaselineConfig, arch: str, data_dir,
              out_dir) -> Path:
    """Train one architecture on the train split of ``data_dir`` and write ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = _load_split(data_dir, "train")
    size = rows[0].pixels.shape[0]
    if mcfg.patch_channels != rows[0].pixels.shape[-1]:
        raise UsageError("patch_channels does not match the dataset")
    pairs = [(r.caption, raw_latent(r.pixels)) for r in rows]
    metrics = out / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    start = time.time()
    arrays = {}
    if arch == "transfusion":
        if size % mcfg.patch_window:
            raise UsageError(f"patch window {mcfg.patch_window} does not divide image size {size}")
        model = init_params(mcfg, tcfg.seed)
        sched = make_cosine_schedule(tcfg.T, tcfg.cosine_offset)
        stream = ExampleStream(pairs, tcfg, sched, mcfg.patch_window)
        history = run_training(model, stream, tcfg, metrics_path=metrics)
    else:
        tok = fit_tokenizer(np.stack([p[1].data for p in pairs]), bcfg, tcfg.seed)
        mcfg = baseline_model_config(mcfg, bcfg)
        model = init_params(mcfg, tcfg.seed)
        stream = TokenStream(tokenize_pairs(pairs, tok), tcfg)
        history = run_training(model, stream, tcfg, step_fn=_baseline_step_fn, metrics_path=metrics)
        arrays = tokenizer_arrays(tok)
    config = {"arch": arch, "model": mcfg.to_dict(), "train": tcfg.to_dict(), "baseline": bcfg.to_dict()}
    extra = {"dataset_hash": dataset_hash(data_dir), "seed": tcfg.seed, "image_size": size,
             "train_seconds": time.time() - start,
             "flops": history[-1]["flops"] if history else 0.0,
             "tokens_seen": _tokens_seen(history)}
    checkpoint.save_model(out / CHECKPOINT_DIR, model, config, tcfg.max_steps, extra=extra,
                          extra_arrays=arrays)
    _write_json(out / "run.json", {"config": config, **extra})
    return out


def _tokens_seen(history) -> int:
    return int(sum(r["seq_tokens"] for r in history))


def _baseline_step_fn(model, opt, batch, cfg, step):
    loss = float(baseline_step(model, opt, batch, cfg, step).detach())
    return {"lm": loss, "total": loss}


def cmd_train(args) -> int:
    mcfg, tcfg, bcfg = build_configs(args)
    out = train_run(mcfg, tcfg, bcfg, args.arch, args.data, args.out)
    print(json.dumps({"out": str(out), "checkpoint": str(out / CHECKPOINT_DIR)}))
    return 0


def sample_controls(args) -> SamplerControls:
    try:
        return SamplerControls(cfg_weight=args.cfg, num_steps=args.steps, seed=args.seed,
                               temperature=args.temperature)
    except ValueError as e:
        raise UsageError(str(e)) from e


def generate_image(run: LoadedRun, caption: str, controls: SamplerControls) -> np.ndarray:
    if run.arch == "baseline":
        latent = baseline_force_image(run.model, run.tokenizer, caption, run.grid, controls)
    else:
        sched = make_cosine_schedule(run.train_cfg.T, run.train_cfg.cosine_offset)
        latent = force_image(run.model, caption, controls, sched, run.grid, run.train_cfg.mask_kind)
    return np.clip(raw_pixels(latent), 0.0, 1.0)


def cmd_sample(args) -> int:
    run = load_run(args.ckpt)
    controls = sample_controls(args)
    if run.arch == "transfusion" and controls.num_steps > run.train_cfg.T:
        raise UsageError(f"--steps must be at most {run.train_cfg.T}")
    pixels = generate_image(run, args.caption, controls)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels), "RGB").save(out)
    ladder = (make_inference_timesteps(run.train_cfg.T, controls.num_steps)
              if run.arch == "transfusion" else [])
    cls = classify_image(pixels)
    _write_json(out.with_suffix(".json"), {
        "caption": args.caption, "seed": controls.seed, "controls": dataclasses.asdict(controls),
        "timesteps": ladder, "arch": run.arch,
        "classified_as": {"color": cls.color, "shape": cls.shape}})
    print(json.dumps({"out": str(out), "color": cls.color, "shape": cls.shape}))
    return 0


def evaluate_run(run: LoadedRun, data_dir, controls: SamplerControls, num_prompts: int | None = None,
                 with_diffusion_loss: bool = True) -> EvalReport:
    val = _load_split(data_dir, "val")
    start = time.time()
    prompts = [e.caption for e in val][:num_prompts]
    ppl = eval_perplexity(run.model, [e.caption for e in val])
    dloss = None
    if run.arch == "transfusion":
        sched = make_cosine_schedule(run.train_cfg.T, run.train_cfg.cosine_offset)
        if with_diffusion_loss:
            dloss = eval_diffusion_loss(run.model, val, sched)
        acc = eval_text_to_image(run.model, prompts, controls, sched, run.grid, run.train_cfg.mask_kind)
    else:
        hits = 0
        for i, caption in enumerate(prompts):
            pixels = generate_image(run, caption, dataclasses.replace(controls, seed=controls.seed + i))
            hits += classify_image(pixels).matches(*parse_caption(caption))
        acc = hits / len(prompts)
    tokens = run.meta.get("tokens_seen", 0)
    return EvalReport(ppl, acc, dloss, count_flops(run.model, tokens), time.time() - start, {
        "arch": run.arch, "config": run.meta["config"], "seed": run.meta.get("seed"),
        "dataset_hash": dataset_hash(data_dir), "train_dataset_hash": run.meta.get("dataset_hash"),
        "num_prompts": len(prompts), "controls": dataclasses.asdict(controls)})


def cmd_eval(args) -> int:
    run = load_run(args.ckpt)
    report = evaluate_run(run, args.data, sample_controls(args), args.prompts)
    _write_json(args.report, report.to_dict())
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "extra"}))
    return 0


def cmd_compare(args) -> int:
    controls = sample_controls(args)
    reports = [evaluate_run(load_run(p), args.data, controls, args.prompts) for p in args.ckpts]
    fields = ("perplexity", "image_accuracy", "diffusion_val_loss", "flops_estimate", "runtime_s")
    names = [f"{r.extra['arch']}:{Path(p).name}" for r, p in zip(reports, args.ckpts)]
    width = max(len(n) for n in names + ["metric"]) + 2
    lines = ["metric".ljust(20) + "".join(n.ljust(width) for n in names)]
    for f in fields:
        vals = [getattr(r, f) for r in reports]
        lines.append(f.ljust(20) + "".join(("-" if v is None else f"{v:.6g}").ljust(width) for v in vals))
    a, b = reports
    deltas = {f: (None if getattr(a, f) is None or getattr(b, f) is None else getattr(b, f) - getattr(a, f))
              for f in fields}
    print("\n".join(lines))
    if args.out:
        _write_json(args.out, {"runs": dict(zip(names, [r.to_dict() for r in reports])),
                               "deltas_second_minus_first": deltas})
    return 0


# ----------------------------------------------------------------------------


def _add_sampling(p, steps_default=50):
    p.add_argument("--cfg", type=float, default=3.0, help="guidance weight")
    p.add_argument("--steps", type=int, default=steps_default, help="denoising steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.0,
                   help="text temperature (baseline: image-token temperature)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="transfusion", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the toy shapes dataset")
    p.add_argument("spec", nargs="?", help="dataset spec JSON (defaults when omitted)")
    p.add_argument("out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a joint or baseline model")
    p.add_argument("config", help="JSON with optional model/train/baseline sections")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--arch", choices=("transfusion", "baseline"), default="transfusion")
    p.add_argument("--codec", choices=("linear", "unet"))
    p.add_argument("--mask", choices=("transfusion", "causal"))
    p.add_argument("--patch", type=int, help="patch window k")
    p.add_argument("--noise-limit", type=int, dest="noise_limit")
    p.add_argument("--steps", type=int, help="override train.max_steps")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate one image for a caption")
    p.add_argument("ckpt")
    p.add_argument("--caption", required=True)
    _add_sampling(p)
    p.add_argument("out", help="output PNG; a JSON sidecar is written next to it")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="perplexity, diffusion loss and text-to-image accuracy")
    p.add_argument("ckpt")
    p.add_argument("data")
    p.add_argument("report")
    p.add_argument("--prompts", type=int, help="limit the number of held-out prompts")
    _add_sampling(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="evaluate two checkpoints side by side")
    p.add_argument("ckpts", nargs=2)
    p.add_argument("data")
    p.add_argument("--out", help="write the comparison JSON here")
    p.add_argument("--prompts", type=int)
    _add_sampling(p)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
