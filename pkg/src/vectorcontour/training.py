"""Three-stage pipeline: pretraining, SFT, DPO, plus preference-pair mining."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import codec
from .codec import PreferencePair, TokenSequence, Vocab
from .geometry import (
    GeometryError,
    corrupt_delete,
    corrupt_insert,
    polygon_iou,
    shoelace_signed_area,
)
from .model import ContourModel, nll_loss
from .synthdata import CROP_SIZE, CropSample

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "sft", "dpo")

STAGE_DEFAULTS = {
    "pretrain": dict(lr=2e-4, batch_size=32, epochs=24, lr_decay="constant"),
    "sft": dict(lr=4e-5, batch_size=32, epochs=4, lr_decay="constant"),
    "dpo": dict(lr=5e-7, batch_size=8, epochs=2, lr_decay="cosine"),
}


class TrainingError(RuntimeError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass
class StageConfig:
    stage: str
    lr: float
    batch_size: int
    epochs: int
    warmup_ratio: float = 0.03
    lr_decay: str = "constant"
    beta: float = 0.5
    weight_decay: float = 0.01
    grad_clip: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr_decay not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")


def stage_config(stage: str, **overrides) -> StageConfig:
    kw = dict(STAGE_DEFAULTS[stage])
    kw.update(overrides)
    return StageConfig(stage=stage, **kw)


class TrainLog:
    """Append-only per-step records, serialized as JSON lines."""

    def __init__(self):
        self.records: list[dict] = []

    def add(self, **record) -> None:
        loss = record.get("loss")
        if loss is not None and not math.isfinite(loss):
            record["diagnostic"] = "non-finite loss"
        self.records.append(record)

    def save(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r) + "\n")

    @classmethod
    def load(cls, path) -> "TrainLog":
        log = cls()
        with open(path) as f:
            for line in f:
                log.records.append(json.loads(line))
        return log

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if "loss" in r]


def lr_schedule(total_steps: int, warmup_ratio: float, decay: str = "constant"):
    """Linear warmup for ceil(ratio*total) steps, then constant or cosine to 0.

    The token-prediction stages hold the peak rate: at their step counts a
    decaying schedule starves the later epochs. The preference stage decays
    (cosine), which limits drift away from its frozen reference.
    """
    warmup = max(1, math.ceil(warmup_ratio * total_steps))

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        if decay == "cosine":
            progress = (step - warmup + 1) / max(1, total_steps - warmup)
            return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))
        return 1.0

    return factor


def param_checksums(model: ContourModel) -> dict[str, str]:
    """SHA-256 per parameter group; detects any weight change."""
    out = {}
    for name, params in model.parameter_groups().items():
        h = hashlib.sha256()
        for p in params:
            h.update(p.detach().cpu().numpy().tobytes())
        out[name] = h.hexdigest()
    return out


def _collate(seqs: list[TokenSequence], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    t = max(len(s.ids) for s in seqs)
    ids = torch.full((len(seqs), t), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), t), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s.ids)] = torch.tensor(s.ids, dtype=torch.long)
        mask[i, :len(s.ids)] = torch.tensor(s.loss_mask, dtype=torch.bool)
    return ids, mask


def images_tensor(samples: list[CropSample], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([s.image for s in samples]).astype(np.float32) / 255.0
    return torch.from_numpy(arr).unsqueeze(1).to(dtype)


def _set_trainable(model: ContourModel, trainable_groups: set[str]) -> list[torch.nn.Parameter]:
    params = []
    for name, group in model.parameter_groups().items():
        flag = name in trainable_groups
        for p in group:
            p.requires_grad_(flag)
            if flag:
                params.append(p)
    return params


def _run_nll_stage(cfg: StageConfig, model: ContourModel, vocab: Vocab,
                   samples: list[CropSample], trainable: set[str],
                   format_fn, log: TrainLog | None = None) -> TrainLog:
    if log is None:
        log = TrainLog()
    params = _set_trainable(model, trainable)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    factor = lr_schedule(total_steps, cfg.warmup_ratio, cfg.lr_decay)
    rng = np.random.default_rng(cfg.seed)
    dtype = model.cfg.torch_dtype
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            t0 = time.monotonic()
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            seqs = [format_fn(vocab, s, rng) for s in batch]
            ids, mask = _collate(seqs, vocab.pad_id)
            images = images_tensor(batch, dtype)
            logits = model.text_logits(images, ids)
            loss = nll_loss(logits, ids[:, 1:], mask[:, 1:])
            if not torch.isfinite(loss):
                log.add(step=step, stage=cfg.stage, loss=float(loss.detach()), event="abort")
                raise TrainingError("nan-loss", f"non-finite loss at step {step}")
            lr = cfg.lr * factor(step)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            loss.backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            log.add(step=step, stage=cfg.stage, loss=float(loss.detach()), lr=lr,
                    grad_norm=float(grad_norm),
                    wall_ms=1000.0 * (time.monotonic() - t0))
            step += 1
    return log


def run_pretrain(cfg: StageConfig, model: ContourModel, vocab: Vocab,
                 samples: list[CropSample], log: TrainLog | None = None) -> TrainLog:
    """Frozen vision encoder; trains positional table, projector and LM."""
    return _run_nll_stage(cfg, model, vocab, samples,
                          trainable={"pos_embed", "projector", "lm"},
                          format_fn=codec.format_pretrain, log=log)


def run_sft(cfg: StageConfig, model: ContourModel, vocab: Vocab,
            samples: list[CropSample], log: TrainLog | None = None) -> TrainLog:
    """All parameter groups trainable; loss on the answer span only."""
    return _run_nll_stage(cfg, model, vocab, samples,
                          trainable={"encoder", "pos_embed", "projector", "lm"},
                          format_fn=lambda v, s, _rng: codec.format_sft(v, s), log=log)


def mine_preferences(model: ContourModel, vocab: Vocab, samples: list[CropSample],
                     iou_thresh: float = 0.8, complex_min_vertices: int = 15,
                     large_area_frac: float = 0.25, rng: np.random.Generator | None = None,
                     batch_size: int = 64, max_new: int = 72,
                     supersample: int = 4) -> list[PreferencePair]:
    """Rejected answers from low-IoU model predictions and corrupted complex/large labels."""
    if rng is None:
        rng = np.random.default_rng(0)
    model.eval()
    pairs: list[PreferencePair] = []
    counters = {"pred_pairs": 0, "corrupt_pairs": 0, "decode_failures": 0, "skipped": 0}
    prompt = codec.sft_prompt(vocab)
    dtype = model.cfg.torch_dtype
    large_area = large_area_frac * CROP_SIZE * CROP_SIZE

    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        prompt_ids = torch.tensor([prompt] * len(batch), dtype=torch.long)
        outs = model.generate(images_tensor(batch, dtype), prompt_ids, max_new)
        for sample, out in zip(batch, outs):
            try:
                pred = codec.decode_tokens(vocab, out)
                iou = polygon_iou(pred, sample.gt, supersample)
            except (codec.DecodeError, GeometryError):
                counters["decode_failures"] += 1
                continue
            if iou < iou_thresh:
                try:
                    pairs.append(codec.format_dpo(vocab, sample, pred))
                    counters["pred_pairs"] += 1
                except GeometryError:
                    counters["skipped"] += 1

    for sample in samples:
        n = len(sample.gt)
        area = abs(shoelace_signed_area(sample.gt))
        if n <= complex_min_vertices and area <= large_area:
            continue
        k = int(rng.integers(1, 4))
        try:
            if rng.random() < 0.5 and n - k >= 3:
                rejected = corrupt_delete(sample.gt, k, rng)
            else:
                rejected = corrupt_insert(sample.gt, k, 4, rng,
                                          width=CROP_SIZE, height=CROP_SIZE)
            if polygon_iou(rejected, sample.gt, supersample) >= 0.999:
                counters["skipped"] += 1
                continue
            pairs.append(codec.format_dpo(vocab, sample, rejected))
            counters["corrupt_pairs"] += 1
        except GeometryError:
            counters["skipped"] += 1

    logger.info("mined %d preference pairs (%s)", len(pairs), counters)
    return pairs


def dpo_loss(policy_chosen_lp: torch.Tensor, policy_rejected_lp: torch.Tensor,
             ref_chosen_lp: torch.Tensor, ref_rejected_lp: torch.Tensor,
             beta: float) -> torch.Tensor:
    """-log sigmoid(beta * ((pi_c - ref_c) - (pi_r - ref_r))), batch mean."""
    for t in (policy_chosen_lp, policy_rejected_lp, ref_chosen_lp, ref_rejected_lp):
        t = torch.as_tensor(t)
        if not torch.isfinite(t).all():
            raise TrainingError("non-finite-logprob")
    margin = (torch.as_tensor(policy_chosen_lp) - torch.as_tensor(ref_chosen_lp)) \
        - (torch.as_tensor(policy_rejected_lp) - torch.as_tensor(ref_rejected_lp))
    return -F.logsigmoid(beta * margin).mean()


def _pair_batch(pairs: list[PreferencePair], sample_by_id: dict[str, CropSample],
                vocab: Vocab, dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor,
                                              torch.Tensor, torch.Tensor]:
    samples = [sample_by_id[p.sample_ref] for p in pairs]
    images = images_tensor(samples, dtype)
    chosen = [TokenSequence(p.prompt.ids + p.chosen.ids,
                            p.prompt.loss_mask + p.chosen.loss_mask) for p in pairs]
    rejected = [TokenSequence(p.prompt.ids + p.rejected.ids,
                              p.prompt.loss_mask + p.rejected.loss_mask) for p in pairs]
    c_ids, c_mask = _collate(chosen, vocab.pad_id)
    r_ids, r_mask = _collate(rejected, vocab.pad_id)
    return images, c_ids, c_mask.long(), r_ids, r_mask.long()


def pair_logprobs(model: ContourModel, vocab: Vocab, pairs: list[PreferencePair],
                  sample_by_id: dict[str, CropSample],
                  grad: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """(chosen, rejected) answer log-probs for a batch of preference pairs."""
    images, c_ids, c_mask, r_ids, r_mask = _pair_batch(pairs, sample_by_id, vocab,
                                                       model.cfg.torch_dtype)
    ctx = torch.enable_grad() if grad else torch.no_grad()
    with ctx:
        c_lp = model.sequence_logprob(images, c_ids, c_mask)
        r_lp = model.sequence_logprob(images, r_ids, r_mask)
    return c_lp, r_lp


def reward_margins(policy: ContourModel, reference: ContourModel, vocab: Vocab,
                   pairs: list[PreferencePair], sample_by_id: dict[str, CropSample],
                   beta: float, batch_size: int = 16) -> np.ndarray:
    """beta * ((pi_c - ref_c) - (pi_r - ref_r)) per pair."""
    margins = []
    policy.eval()
    reference.eval()
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        pc, pr = pair_logprobs(policy, vocab, chunk, sample_by_id)
        rc, rr = pair_logprobs(reference, vocab, chunk, sample_by_id)
        margins.extend((beta * ((pc - rc) - (pr - rr))).tolist())
    return np.asarray(margins)


def run_dpo(cfg: StageConfig, model: ContourModel, vocab: Vocab,
            pairs: list[PreferencePair], samples: list[CropSample],
            log: TrainLog | None = None,
            reference: ContourModel | None = None) -> TrainLog:
    """Policy initialized from and trained against a frozen copy of the SFT model."""
    if log is None:
        log = TrainLog()
    if not pairs:
        raise TrainingError("no-pairs", "cannot run DPO without preference pairs")
    sample_by_id = {s.source_id: s for s in samples}
    if reference is None:
        reference = copy.deepcopy(model)
    reference.eval()
    for p in reference.parameters():
        p.requires_grad_(False)
    params = _set_trainable(model, {"encoder", "pos_embed", "projector", "lm"})
    model.train()
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    factor = lr_schedule(total_steps, cfg.warmup_ratio, cfg.lr_decay)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), cfg.batch_size):
            t0 = time.monotonic()
            chunk = [pairs[i] for i in order[start:start + cfg.batch_size]]
            pc, pr = pair_logprobs(model, vocab, chunk, sample_by_id, grad=True)
            rc, rr = pair_logprobs(reference, vocab, chunk, sample_by_id)
            loss = dpo_loss(pc, pr, rc, rr, cfg.beta)
            if not torch.isfinite(loss):
                log.add(step=step, stage=cfg.stage, loss=float(loss.detach()), event="abort")
                raise TrainingError("nan-loss", f"non-finite DPO loss at step {step}")
            lr = cfg.lr * factor(step)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            loss.backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            margin = float((cfg.beta * ((pc - rc) - (pr - rr))).detach().mean())
            log.add(step=step, stage=cfg.stage, loss=float(loss.detach()), lr=lr,
                    grad_norm=float(grad_norm), reward_margin=margin,
                    wall_ms=1000.0 * (time.monotonic() - t0))
            step += 1
    return log


def save_pairs(path, pairs: list[PreferencePair]) -> None:
    with open(path, "w") as f:
        json.dump([{
            "sample_ref": p.sample_ref,
            "prompt": p.prompt.ids,
            "chosen": p.chosen.ids,
            "rejected": p.rejected.ids,
        } for p in pairs], f)


def load_pairs(path) -> list[PreferencePair]:
    with open(path) as f:
        raw = json.load(f)
    pairs = []
    for r in raw:
        pairs.append(PreferencePair(
            prompt=TokenSequence(r["prompt"], [False] * len(r["prompt"])),
            chosen=TokenSequence(r["chosen"], [True] * len(r["chosen"])),
            rejected=TokenSequence(r["rejected"], [True] * len(r["rejected"])),
            sample_ref=r["sample_ref"],
        ))
    return pairs
