"""Command-line surface: dataset generation, staged training, inference, eval, rendering."""
from __future__ import annotations

import argparse
import base64
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__, codec, evaluation, synthdata, training
from .codec import Vocab
from .geometry import BBox, GeometryError, Polygon
from .model import ContourModel, ModelConfig, load_checkpoint, save_checkpoint
from .synthdata import GenParams, read_pgm
from .training import StageConfig, TrainingError, stage_config

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_LINEAGE = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


class LineageError(Exception):
    pass


DEFAULT_CONFIG = {
    "master_seed": 0,
    "data": {
        "n_train": 2000,
        "n_val": 200,
        "n_test": 200,
        "gen": asdict(GenParams()),
    },
    "model": {
        "enc_layers": 2,
        "enc_dim": 128,
        "enc_heads": 4,
        "lm_layers": 4,
        "lm_dim": 128,
        "lm_heads": 4,
        "max_seq_len": 192,
        "use_pos_embed": True,
    },
    "pretrain": dict(training.STAGE_DEFAULTS["pretrain"], warmup_ratio=0.03),
    "sft": dict(training.STAGE_DEFAULTS["sft"], warmup_ratio=0.03),
    "dpo": dict(training.STAGE_DEFAULTS["dpo"], warmup_ratio=0.03, beta=0.5),
    "mining": {"iou_thresh": 0.8, "complex_min_vertices": 15, "large_area_frac": 0.25},
    "eval": {"max_new": 72, "supersample": 4},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be a table")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | None, seed_override: int | None = None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg = _merge(cfg, user)
    if seed_override is not None:
        cfg["master_seed"] = seed_override
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


class OutputLock:
    """Rejects concurrent commands on the same output directory."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".vectorcontour.lock"
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output dir is locked by another command: {self.path}")
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)


def write_run_manifest(out_dir: Path, command: str, cfg: dict, inputs: dict,
                       outputs: dict, lineage: list | None = None) -> Path:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "master_seed": cfg.get("master_seed"),
        "inputs": inputs,
        "outputs": outputs,
        "lineage": lineage or [],
        "wall_clock": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = Path(out_dir) / f"run-manifest-{command}.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
    return path


def build_model(cfg: dict, vocab: Vocab) -> ContourModel:
    torch.manual_seed(cfg["master_seed"])
    mc = ModelConfig(vocab_size=len(vocab), img_id=vocab.img_id, bos_id=vocab.bos_id,
                     eos_id=vocab.eos_id, pad_id=vocab.pad_id,
                     coord_start_id=vocab.x_id(0), **cfg["model"])
    return ContourModel(mc)


def _stage_cfg(cfg: dict, stage: str) -> StageConfig:
    return stage_config(stage, seed=cfg["master_seed"], **cfg[stage])


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed)
    out_dir = Path(args.out)
    with OutputLock(out_dir):
        gp = GenParams.from_dict(cfg["data"]["gen"])
        manifest = synthdata.build_dataset(cfg["data"]["n_train"], cfg["data"]["n_val"],
                                           cfg["data"]["n_test"], gp, out_dir,
                                           master_seed=cfg["master_seed"])
        write_run_manifest(out_dir, "gen-data", cfg, {}, {"dataset": str(out_dir)})
    for split in synthdata.SPLITS:
        print(f"{split}: {len(manifest['splits'][split])} samples")
    return 0


def _require_stage(ckpt_extra: dict, wanted: str, what: str) -> None:
    got = ckpt_extra.get("stage")
    if got != wanted:
        raise LineageError(f"stage-order: {what} requires a {wanted} checkpoint, got {got!r}")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    out_dir = Path(args.out)
    vocab = Vocab()
    data_dir = Path(args.data)
    lineage = []

    with OutputLock(out_dir):
        if args.stage == "pretrain":
            if args.init:
                raise LineageError("stage-order: pretrain starts from scratch, drop --init")
            model = build_model(cfg, vocab)
        else:
            if not args.init:
                raise LineageError(f"stage-order: {args.stage} requires --init with the "
                                   "previous stage's checkpoint")
            model, extra = load_checkpoint(args.init)
            wanted = "pretrain" if args.stage == "sft" else "sft"
            _require_stage(extra, wanted, args.stage)
            lineage = extra.get("lineage", []) + [str(args.init)]

        scfg = _stage_cfg(cfg, args.stage)
        log = training.TrainLog()
        if args.stage == "pretrain":
            samples = synthdata.load_split(data_dir, "train")
            training.run_pretrain(scfg, model, vocab, samples, log)
        elif args.stage == "sft":
            samples = synthdata.load_split(data_dir, "train")
            training.run_sft(scfg, model, vocab, samples, log)
        else:
            samples = synthdata.load_split(data_dir, "train")
            if args.pairs:
                pairs = training.load_pairs(args.pairs)
            elif args.mine_pairs:
                pairs = training.mine_preferences(
                    model, vocab, samples,
                    rng=np.random.default_rng(cfg["master_seed"]),
                    **cfg["mining"])
                training.save_pairs(out_dir / "pairs.json", pairs)
            else:
                raise LineageError("stage-order: dpo needs --pairs FILE or --mine-pairs")
            training.run_dpo(scfg, model, vocab, pairs, samples, log)

        ckpt_path = out_dir / f"{args.stage}.ckpt"
        save_checkpoint(ckpt_path, model, extra={
            "stage": args.stage, "lineage": lineage, "data_dir": str(data_dir),
            "master_seed": cfg["master_seed"],
        })
        log.save(out_dir / f"{args.stage}-trainlog.jsonl")
        write_run_manifest(out_dir, f"train-{args.stage}", cfg,
                           {"data": str(data_dir), "init": args.init},
                           {"checkpoint": str(ckpt_path)}, lineage)
    losses = log.losses()
    print(f"{args.stage}: {len(losses)} steps, final loss {losses[-1]:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_mine_pairs(args) -> int:
    cfg = load_config(args.config, args.seed)
    model, extra = load_checkpoint(args.ckpt)
    _require_stage(extra, "sft", "mine-pairs")
    vocab = Vocab()
    samples = synthdata.load_split(Path(args.data), "train")
    pairs = training.mine_preferences(model, vocab, samples,
                                      rng=np.random.default_rng(cfg["master_seed"]),
                                      **cfg["mining"])
    training.save_pairs(args.out, pairs)
    print(f"mined {len(pairs)} preference pairs -> {args.out}")
    return 0


def _load_image(path: str) -> np.ndarray:
    if path.endswith(".pgm"):
        return read_pgm(Path(path))
    from PIL import Image
    return np.asarray(Image.open(path).convert("L"))


def cmd_infer(args) -> int:
    cfg = load_config(args.config, args.seed)
    model, _extra = load_checkpoint(args.ckpt)
    vocab = Vocab()
    image = _load_image(args.image)
    try:
        bbox = BBox(*(int(v) for v in args.bbox.split(",")))
    except (ValueError, GeometryError) as e:
        raise ConfigError(f"bad --bbox {args.bbox!r}: {e}") from e
    gt_stub = Polygon(((bbox.x_min, bbox.y_min), (bbox.x_max - 1, bbox.y_min),
                       (bbox.x_max - 1, bbox.y_max - 1), (bbox.x_min, bbox.y_max - 1)))
    sample = synthdata.crop_sample(image, gt_stub, bbox, scale=synthdata.TEST_SCALE)
    prompt_ids = torch.tensor([codec.sft_prompt(vocab)], dtype=torch.long)
    out = model.generate(training.images_tensor([sample], model.cfg.torch_dtype),
                         prompt_ids, cfg["eval"]["max_new"])[0]
    if args.tokens:
        print(codec.render_text(vocab, out))
    try:
        pred_crop = codec.decode_tokens(vocab, out)
    except codec.DecodeError as e:
        print(json.dumps({"error": e.code, "tokens": codec.render_text(vocab, out)}))
        return EXIT_NUMERIC
    pred = synthdata.crop_to_source(pred_crop.vertices, sample.transform,
                                    (image.shape[1], image.shape[0]))
    print(json.dumps(pred.to_json()))
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    model, _extra = load_checkpoint(args.ckpt)
    vocab = Vocab()
    samples = synthdata.load_split(Path(args.data), args.split)
    out_dir = Path(args.out)
    with OutputLock(out_dir):
        result, dumps = evaluation.evaluate_model(model, vocab, samples,
                                                  max_new=cfg["eval"]["max_new"],
                                                  supersample=cfg["eval"]["supersample"])
        with open(out_dir / "eval.json", "w") as f:
            json.dump(result.to_json(), f, indent=1)
        with open(out_dir / "samples.jsonl", "w") as f:
            for d in dumps:
                f.write(json.dumps(d) + "\n")
        write_run_manifest(out_dir, "eval", cfg,
                           {"ckpt": args.ckpt, "data": args.data, "split": args.split},
                           {"eval": str(out_dir / "eval.json")})
    print("  mAP  AP50  AP75    AR")
    print(f"{100 * result.map:5.1f} {100 * result.ap50:5.1f} "
          f"{100 * result.ap75:5.1f} {100 * result.ar:5.1f}")
    print(f"mean IoU {result.mean_iou:.3f}  decode failures "
          f"{result.counts['decode_failures']}/{result.counts['n_gt']}")
    return 0


def _svg_overlay(image: np.ndarray, gt, pred) -> str:
    from PIL import Image
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    b64 = base64.b64encode(buf.getvalue()).decode("ascii")
    h, w = image.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             f'viewBox="0 0 {w} {h}">',
             f'<image href="data:image/png;base64,{b64}" width="{w}" height="{h}"/>']
    for verts, color in ((gt, "#00c000"), (pred, "#e02020")):
        if verts is None:
            continue
        pts = " ".join(f"{x},{y}" for x, y in verts)
        parts.append(f'<polygon points="{pts}" fill="none" stroke="{color}" stroke-width="0.6"/>')
        for x, y in verts:
            parts.append(f'<circle cx="{x}" cy="{y}" r="0.8" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def _png_overlay(image: np.ndarray, gt, pred, legend: str, scale: int = 4):
    from PIL import Image, ImageDraw
    img = Image.fromarray(image).convert("RGB").resize(
        (image.shape[1] * scale, image.shape[0] * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for verts, color in ((gt, (0, 190, 0)), (pred, (225, 40, 40))):
        if verts is None:
            continue
        ring = [(x * scale + scale // 2, y * scale + scale // 2) for x, y in verts]
        draw.line(ring + [ring[0]], fill=color, width=2)
        for x, y in ring:
            draw.rectangle([x - 2, y - 2, x + 2, y + 2], fill=color)
    draw.text((4, 4), legend, fill=(255, 255, 0))
    return img


def cmd_render(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(args.dump) as f:
        for line in f:
            rec = json.loads(line)
            if args.failures_only and rec.get("iou", 0.0) >= 0.5:
                continue
            image = read_pgm(Path(rec["image"])) if rec.get("image") else \
                np.full((128, 128), 64, dtype=np.uint8)
            gt = rec["gt"]["vertices"] if rec.get("gt") else None
            pred = rec["pred"]["vertices"] if rec.get("pred") else None
            legend = (f"gt n={len(gt) if gt else 0} pred n={len(pred) if pred else 0} "
                      f"iou={rec.get('iou', 0.0):.2f}")
            sid = rec["source_id"]
            if args.format in ("png", "both"):
                _png_overlay(image, gt, pred, legend).save(out_dir / f"{sid}.png")
            if args.format in ("svg", "both"):
                (out_dir / f"{sid}.svg").write_text(_svg_overlay(image, gt, pred))
            n += 1
    print(f"rendered {n} overlays -> {out_dir}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vectorcontour",
                                     description="Vector contour extraction pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed override")

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("--stage", required=True, choices=training.STAGES)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint from the previous stage")
    p.add_argument("--pairs", help="preference pairs file (dpo)")
    p.add_argument("--mine-pairs", action="store_true",
                   help="mine preference pairs before dpo")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mine-pairs", parents=[common], help="mine DPO preference pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine_pairs)

    p = sub.add_parser("infer", parents=[common], help="extract a contour from one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--bbox", required=True, help="x_min,y_min,x_max,y_max")
    p.add_argument("--tokens", action="store_true", help="print the raw bracket string")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=synthdata.SPLITS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", parents=[common], help="render gt/prediction overlays")
    p.add_argument("--dump", required=True, help="samples.jsonl from eval")
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="both", choices=("png", "svg", "both"))
    p.add_argument("--failures-only", action="store_true")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LineageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_LINEAGE
    except (TrainingError, GeometryError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
