"""Evaluation: GT-box-prompted segmentation quality, zero-shot classification,
caption BLEU@4, and statistical audits of the sampling protocol."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from .datastore import ShapesDataset
from .network import PromptableModel
from .network.decoder import route
from .sampler import box_prompt, sample_interactive, sample_noninteractive, sample_stage1, sample_stage2


@dataclass
class EvalReport:
    miou: float = 0.0
    top1: float = 0.0
    top5: float = 0.0
    bleu4: float = 0.0
    num_instances: int = 0
    per_concept: dict = field(default_factory=dict)
    routing_counts: dict = field(default_factory=dict)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)


def miou(pairs) -> float:
    """Mean IoU over (predicted, ground-truth) mask pairs."""
    vals = [mask_iou(p, g) for p, g in pairs]
    if not vals:
        raise ValueError("no instances to evaluate")
    return float(np.mean(vals))


def region_outputs(model: PromptableModel, dataset: ShapesDataset, batch_images: int = 8):
    """GT-box prompt every region; yield routed masks and semantic tokens."""
    model.eval()
    size = dataset.image_size
    with torch.no_grad():
        records = dataset.records
        for start in range(0, len(records), batch_images):
            chunk = records[start : start + batch_images]
            images = torch.from_numpy(
                np.stack([r.image for r in chunk])
            ).permute(0, 3, 1, 2).float() / 255.0
            grid = model.encode_image(images)
            prompts, indices, regions = [], [], []
            for b, rec in enumerate(chunk):
                for region in rec.regions:
                    prompts.append(box_prompt(region.mask))
                    indices.append(b)
                    regions.append(region)
            bundle = model.decode(grid, prompts, indices)
            logits = model.masks_at(bundle.mask_logits, size)
            for i, region in enumerate(regions):
                slot = route("box", bundle.iou_pred[i])
                yield {
                    "region": region,
                    "slot": slot,
                    "mask": (logits[i, slot] >= 0).numpy(),
                    "semantic_token": bundle.semantic_tokens[i, slot],
                    "iou_pred": bundle.iou_pred[i].tolist(),
                }


def eval_segmentation(model: PromptableModel, dataset: ShapesDataset) -> float:
    return miou((out["mask"], out["region"].mask) for out in region_outputs(model, dataset))


def eval_classification(model: PromptableModel, dataset: ShapesDataset,
                        vocab_weights, class_names: list[str], topk: int = 5):
    top1 = top5 = total = 0
    per_concept: dict[str, dict] = {}
    for out in region_outputs(model, dataset):
        idx, _ = model.classify_zero_shot(out["semantic_token"], vocab_weights, topk=topk)
        ranked = [class_names[int(i)] for i in idx]
        gt = out["region"].concept
        entry = per_concept.setdefault(gt, {"count": 0, "top1": 0})
        entry["count"] += 1
        total += 1
        if ranked and ranked[0] == gt:
            top1 += 1
            entry["top1"] += 1
        if gt in ranked:
            top5 += 1
    return top1 / total, top5 / total, per_concept


def eval_caption(model: PromptableModel, captioner, tokenizer,
                 dataset: ShapesDataset) -> float:
    candidates, references = [], []
    for out in region_outputs(model, dataset):
        seq = captioner.generate(out["semantic_token"])
        candidates.append(tokenizer.decode(seq.tokens))
        references.append(out["region"].caption)
    return bleu4(candidates, references)


def full_report(model: PromptableModel, dataset: ShapesDataset, vocab_weights,
                class_names: list[str], captioner=None, tokenizer=None,
                topk: int = 5) -> EvalReport:
    """One GT-box sweep computing every metric (captions only if a captioner is given)."""
    report = EvalReport()
    ious, candidates, references = [], [], []
    top1 = top5 = total = 0
    routing = Counter()
    for out in region_outputs(model, dataset):
        region = out["region"]
        ious.append(mask_iou(out["mask"], region.mask))
        idx, _ = model.classify_zero_shot(out["semantic_token"], vocab_weights, topk=topk)
        ranked = [class_names[int(i)] for i in idx]
        entry = report.per_concept.setdefault(region.concept, {"count": 0, "top1": 0})
        entry["count"] += 1
        total += 1
        routing[f"box_slot{out['slot']}"] += 1
        if ranked and ranked[0] == region.concept:
            top1 += 1
            entry["top1"] += 1
        if region.concept in ranked:
            top5 += 1
        if captioner is not None:
            seq = captioner.generate(out["semantic_token"])
            candidates.append(tokenizer.decode(seq.tokens))
            references.append(region.caption)
    report.miou = float(np.mean(ious))
    report.top1 = top1 / total
    report.top5 = top5 / total
    report.num_instances = total
    report.routing_counts = dict(routing)
    if candidates:
        report.bleu4 = bleu4(candidates, references)
    return report


# -- corpus BLEU@4 -------------------------------------------------------------


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates: list[str], references: list[str], max_n: int = 4) -> float:
    """Corpus BLEU with clipped n-gram precision and the standard brevity
    penalty; no smoothing, so any empty n-gram order zeroes the score."""
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        c_tok, r_tok = cand.split(), ref.split()
        cand_len += len(c_tok)
        ref_len += len(r_tok)
        for n in range(1, max_n + 1):
            c_ngrams = _ngrams(c_tok, n)
            r_ngrams = _ngrams(r_tok, n)
            totals[n - 1] += sum(c_ngrams.values())
            matches[n - 1] += sum(min(c, r_ngrams.get(g, 0)) for g, c in c_ngrams.items())
    if cand_len == 0 or any(t == 0 for t in totals) or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


# -- sampling protocol audits ---------------------------------------------------


@dataclass
class SamplerAudit:
    box_fraction: float
    noninteractive_fraction: float
    interactive_counts: dict
    noninteractive_counts: dict
    interactive_chi2_p: float
    noninteractive_chi2_p: float
    trials: int


def _chi2_uniform_p(counts: Counter, support: range) -> float:
    observed = np.array([counts.get(k, 0) for k in support], dtype=np.float64)
    expected = observed.sum() / len(observed)
    stat = ((observed - expected) ** 2 / expected).sum()
    return float(stats.chi2.sf(stat, df=len(observed) - 1))


def audit_sampler(rng: np.random.Generator, trials: int = 10000,
                  count_trials: int = 80000) -> SamplerAudit:
    """Empirical branch frequencies and point-count histograms on toy masks."""
    gt = np.zeros((32, 32), dtype=bool)
    gt[8:24, 8:24] = True
    pred = np.zeros_like(gt)
    pred[12:28, 12:28] = True

    boxes = sum(sample_stage1(gt, rng).kind == "box" for _ in range(trials))
    nonint = sum(sample_stage2(pred, gt, rng)[1] == "noninteractive" for _ in range(trials))
    inter_counts = Counter(len(sample_interactive(pred, gt, rng)) for _ in range(count_trials))
    nonin_counts = Counter(len(sample_noninteractive(gt, rng)) for _ in range(count_trials))
    return SamplerAudit(
        box_fraction=boxes / trials,
        noninteractive_fraction=nonint / trials,
        interactive_counts={int(k): int(v) for k, v in sorted(inter_counts.items())},
        noninteractive_counts={int(k): int(v) for k, v in sorted(nonin_counts.items())},
        interactive_chi2_p=_chi2_uniform_p(inter_counts, range(1, 9)),
        noninteractive_chi2_p=_chi2_uniform_p(nonin_counts, range(1, 10)),
        trials=trials,
    )
