"""Training loops: joint segmentation + concept-prediction pre-training with
two-stage prompt sampling, and caption fine-tuning over a frozen image path.

Reproducibility contract: model init is seeded, every step draws from a
fresh generator keyed by (seed, step) so data order never depends on loop
state, and checkpoints carry parameters, optimizer moments and the torch RNG
stream. Resuming therefore replays the exact bytes of an uninterrupted run.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import torch

from . import losses
from .captioner import EOS, PAD, BpeTokenizer, CaptionDecoder
from .config import ModelConfig, TrainConfig, config_hash
from .datastore import EmbeddingStore, ShapesDataset, load_dataset
from .network import (
    PromptableModel,
    load_checkpoint,
    load_model_blobs,
    model_blobs,
    save_checkpoint,
)
from .network.decoder import route
from .sampler import box_prompt, sample_stage1, sample_stage2
from .teacher import SyntheticTeacher
from .vocab import ConceptVocabulary, build_concept_weights


class FrozenParameterError(RuntimeError):
    """An image-path parameter became trainable during fine-tuning."""


class ResumeMismatchError(RuntimeError):
    """Checkpoint config hash does not match the requested run."""


def lr_at(step: int, cfg: TrainConfig, total: int | None = None) -> float:
    """Cosine schedule from base_lr down to final_lr over `total` steps."""
    total = cfg.steps if total is None else total
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return cfg.base_lr
    base, final = cfg.base_lr, cfg.final_lr
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * step / total))


def step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    """Stateless per-step generator; nothing to save for resume."""
    return np.random.default_rng([seed, stream, step])


def build_optimizer(params_named, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with decoupled weight decay, excluding norms and biases (ndim <= 1)."""
    decay, no_decay = [], []
    for name, p in sorted(params_named):
        if not p.requires_grad:
            continue
        (no_decay if p.ndim <= 1 else decay).append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.base_lr,
        betas=(cfg.beta1, cfg.beta2),
    )


def set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


# -- optimizer state <-> blobs ------------------------------------------------


def optimizer_blobs(optimizer, named_params) -> dict[str, np.ndarray]:
    name_of = {id(p): n for n, p in named_params}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = name_of[id(p)]
            out[f"optim.{name}.exp_avg"] = state["exp_avg"].numpy().astype(np.float32)
            out[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy().astype(np.float32)
            out[f"optim.{name}.step"] = np.asarray([float(state["step"])], dtype=np.float32)
    return out


def load_optimizer_blobs(optimizer, named_params, blobs: dict[str, np.ndarray]) -> None:
    """Restore moments. A zero-lr, zero-grad step first lets torch build its
    state containers in whatever layout this version uses."""
    params = [p for _, p in named_params if p.requires_grad]
    if not any(f"optim.{n}.exp_avg" in blobs for n, _ in named_params):
        return
    saved_lrs = [g["lr"] for g in optimizer.param_groups]
    set_lr(optimizer, 0.0)
    for p in params:
        p.grad = torch.zeros_like(p)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    for i, g in enumerate(optimizer.param_groups):
        g["lr"] = saved_lrs[i]
    for name, p in named_params:
        key = f"optim.{name}.exp_avg"
        if key not in blobs:
            continue
        state = optimizer.state[p]
        state["exp_avg"].copy_(torch.from_numpy(blobs[key].copy()))
        state["exp_avg_sq"].copy_(torch.from_numpy(blobs[f"optim.{name}.exp_avg_sq"].copy()))
        step_val = float(blobs[f"optim.{name}.step"][0])
        if torch.is_tensor(state["step"]):
            state["step"].fill_(step_val)
        else:
            state["step"] = step_val


def rng_blobs() -> dict[str, np.ndarray]:
    return {"rng.torch": torch.get_rng_state().numpy().astype(np.uint8)}


def load_rng_blobs(blobs: dict[str, np.ndarray]) -> None:
    if "rng.torch" in blobs:
        torch.set_rng_state(torch.from_numpy(blobs["rng.torch"].copy()))


# -- pre-training -------------------------------------------------------------


class PretrainRunner:
    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 dataset: ShapesDataset, store: EmbeddingStore):
        model_cfg.validate()
        train_cfg.validate()
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.dataset = dataset
        torch.manual_seed(train_cfg.seed)
        self.model = PromptableModel(model_cfg)
        self.teacher = SyntheticTeacher(
            d_text=model_cfg.d_text, seed=train_cfg.teacher_seed, sigma=train_cfg.teacher_sigma
        )
        vocab = ConceptVocabulary(tuple(dataset.concepts))
        if len(vocab) != model_cfg.num_concepts:
            raise ValueError(
                f"dataset has {len(vocab)} concepts, config expects {model_cfg.num_concepts}"
            )
        self.vocab = vocab
        w_src = build_concept_weights(vocab, self.teacher, "source")
        self.w_tgt = build_concept_weights(vocab, self.teacher, "target")
        self.model.decoder.semantic_head.set_source_weights(w_src.columns)
        self.embeddings = store.load_all()
        self._targets = {
            rid: self.teacher.target_distribution(vec.astype(np.float64), self.w_tgt.columns)
            for rid, vec in self.embeddings.items()
        }
        self.named_params = sorted(self.model.named_parameters())
        self.optimizer = build_optimizer(self.named_params, train_cfg)
        self.step = 0
        self.hash = config_hash(model_cfg, train_cfg)

    # one optimizer update over both sampling stages
    def pretrain_step(self) -> losses.LossBreakdown:
        cfg = self.train_cfg
        rng = step_rng(cfg.seed, 1, self.step)
        n = len(self.dataset.records)
        img_idx = rng.choice(n, size=min(cfg.images_per_step, n), replace=False)
        records = [self.dataset.records[int(i)] for i in img_idx]
        regions = [
            (b, region) for b, rec in enumerate(records) for region in rec.regions
        ]
        if len(regions) > cfg.prompt_cap:
            keep = rng.choice(len(regions), size=cfg.prompt_cap, replace=False)
            regions = [regions[int(i)] for i in sorted(keep)]
        for _, region in regions:
            if region.region_id not in self._targets:
                raise KeyError(f"no stored teacher embedding for {region.region_id!r}")

        images = torch.from_numpy(
            np.stack([rec.image for rec in records])
        ).permute(0, 3, 1, 2).float() / 255.0
        gt = torch.from_numpy(np.stack([r.mask for _, r in regions]))
        targets = torch.from_numpy(
            np.stack([self._targets[r.region_id] for _, r in regions])
        ).float()
        indices = [b for b, _ in regions]

        self.model.train()
        grid = self.model.encode_image(images)
        prompts1 = [sample_stage1(r.mask, rng) for _, r in regions]
        bundle1 = self.model.decode(grid, prompts1, indices)
        loss1, parts1 = self._stage_losses(bundle1, prompts1, gt, targets)

        # stage 2 prompts come from stage-1 errors (or a fresh sketch draw)
        with torch.no_grad():
            logits_img = self.model.masks_at(bundle1.mask_logits, self.model_cfg.image_size)
            slots1 = [route(p.kind, bundle1.iou_pred[i]) for i, p in enumerate(prompts1)]
            pred1 = (
                logits_img[torch.arange(len(regions)), torch.tensor(slots1)] >= 0
            ).numpy()
        prompts2, keep2 = [], []
        for i, (_, region) in enumerate(regions):
            drawn, branch = sample_stage2(pred1[i], region.mask, rng)
            if drawn.is_empty:
                continue
            prompts2.append(prompts1[i].extended(drawn) if branch == "interactive" else drawn)
            keep2.append(i)
        loss2 = torch.zeros(())
        parts2 = losses.LossBreakdown()
        if prompts2:
            idx2 = [indices[i] for i in keep2]
            bundle2 = self.model.decode(grid, prompts2, idx2)
            sel = torch.tensor(keep2)
            loss2, parts2 = self._stage_losses(bundle2, prompts2, gt[sel], targets[sel])

        total = loss1 + loss2
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        set_lr(self.optimizer, lr_at(self.step, self.train_cfg))
        self.optimizer.step()
        self.step += 1
        return losses.LossBreakdown(
            focal=parts1.focal + parts2.focal,
            dice=parts1.dice + parts2.dice,
            mask_total=parts1.mask_total + parts2.mask_total,
            iou_mse=parts1.iou_mse + parts2.iou_mse,
            concept_kl=parts1.concept_kl + parts2.concept_kl,
        )

    def _stage_losses(self, bundle, prompts, gt, targets):
        cfg = self.train_cfg
        size = self.model_cfg.image_size
        logits = self.model.masks_at(bundle.mask_logits, size)  # (P, 4, S, S)
        p_count = logits.shape[0]
        gt_f = gt.float()
        if cfg.min_loss_over_slots:
            with torch.no_grad():
                per_slot = torch.stack(
                    [
                        torch.stack(
                            [
                                losses.MASK_FOCAL_WEIGHT
                                * losses.focal_loss(logits[i, s], gt_f[i], cfg.focal_gamma, cfg.focal_alpha)
                                + losses.MASK_DICE_WEIGHT * losses.dice_loss(logits[i, s], gt_f[i])
                                for s in range(4)
                            ]
                        )
                        for i in range(p_count)
                    ]
                )  # (P, 4)
            slots = per_slot.argmin(dim=1).tolist()
        else:
            slots = [route(p.kind, bundle.iou_pred[i].detach()) for i, p in enumerate(prompts)]
        slot_idx = torch.tensor(slots)
        sel_logits = logits[torch.arange(p_count), slot_idx]
        focal = losses.focal_loss(sel_logits, gt_f, cfg.focal_gamma, cfg.focal_alpha)
        dice = losses.dice_loss(sel_logits, gt_f)
        mask_total = losses.MASK_FOCAL_WEIGHT * focal + losses.MASK_DICE_WEIGHT * dice
        with torch.no_grad():
            iou_gt = losses.actual_iou(logits, gt_f[:, None].expand_as(logits)).float()
        iou = losses.iou_mse(bundle.iou_pred, iou_gt)
        if cfg.supervise_all_semantic:
            sem = bundle.semantic_tokens.reshape(-1, bundle.semantic_tokens.shape[-1])
            kl_targets = targets.repeat_interleave(4, dim=0)
        else:
            sem = bundle.semantic_tokens[torch.arange(p_count), slot_idx]
            kl_targets = targets
        concept_logits = self.model.predict_concepts(sem)
        kl = losses.concept_kl(concept_logits, kl_targets, reverse=cfg.reverse_kl)
        stage_total = losses.combine_pretrain_losses(
            mask_total, iou, kl, cfg.w_mask, cfg.w_iou, cfg.w_concept
        )
        parts = losses.LossBreakdown(
            focal=float(focal.detach()), dice=float(dice.detach()),
            mask_total=float(mask_total.detach()), iou_mse=float(iou.detach()),
            concept_kl=float(kl.detach()),
        )
        return stage_total, parts

    # -- checkpointing --------------------------------------------------------

    def state_blobs(self) -> dict[str, np.ndarray]:
        blobs = model_blobs(self.model)
        blobs.update(optimizer_blobs(self.optimizer, self.named_params))
        blobs.update(rng_blobs())
        return blobs

    def save(self, path: str | Path, metrics: dict | None = None) -> None:
        save_checkpoint(
            path,
            self.model_cfg,
            self.state_blobs(),
            train_cfg=self.train_cfg,
            config_hash=self.hash,
            extra={
                "phase": "pretrain",
                "step": self.step,
                "metrics": metrics or {},
                "concepts": list(self.vocab.concepts),
            },
        )

    def resume(self, path: str | Path) -> None:
        ckpt = load_checkpoint(path)
        if ckpt.config_hash != self.hash:
            raise ResumeMismatchError(
                f"checkpoint hash {ckpt.config_hash[:12]} != run hash {self.hash[:12]}"
            )
        load_model_blobs(self.model, ckpt.blobs)
        load_optimizer_blobs(self.optimizer, self.named_params, ckpt.blobs)
        load_rng_blobs(ckpt.blobs)
        self.step = int(ckpt.extra["step"])


def pretrain(model_cfg: ModelConfig, train_cfg: TrainConfig,
             dataset: ShapesDataset | None = None, store: EmbeddingStore | None = None,
             resume_from: str | Path | None = None) -> Path:
    """Full pre-training loop; writes checkpoint + metrics log, returns ckpt path."""
    if dataset is None:
        dataset = load_dataset(train_cfg.data_dir)
    if store is None:
        store = EmbeddingStore(train_cfg.embed_dir)
    out_dir = Path(train_cfg.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = PretrainRunner(model_cfg, train_cfg, dataset, store)
    if resume_from is not None:
        runner.resume(resume_from)
    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    started = time.time()
    with open(metrics_path, mode) as log:
        while runner.step < train_cfg.steps:
            logged_step = runner.step
            breakdown = runner.pretrain_step()
            if train_cfg.log_every and (
                logged_step % train_cfg.log_every == 0 or runner.step == train_cfg.steps
            ):
                entry = {
                    "step": logged_step,
                    "lr": lr_at(logged_step, train_cfg),
                    "elapsed_s": round(time.time() - started, 3),
                    **{k: round(v, 6) for k, v in breakdown.as_dict().items()},
                }
                log.write(json.dumps(entry) + "\n")
                log.flush()
            if train_cfg.checkpoint_every and runner.step % train_cfg.checkpoint_every == 0:
                runner.save(out_dir / f"ckpt-{runner.step:06d}.tapckpt")
    final = out_dir / "pretrain.tapckpt"
    runner.save(final)
    return final


# -- caption fine-tuning -------------------------------------------------------


IMAGE_PATH_PREFIXES = ("image_encoder.", "prompt_encoder.", "decoder.")


def frozen_image_parameters(model: PromptableModel):
    for name, p in model.named_parameters():
        if name.startswith(IMAGE_PATH_PREFIXES):
            yield name, p


def collect_semantic_tokens(model: PromptableModel, dataset: ShapesDataset,
                            batch_images: int = 8):
    """Routed (GT-box) semantic tokens for every region, via the frozen path."""
    model.eval()
    tokens, region_ids, captions, concepts = [], [], [], []
    records = dataset.records
    with torch.no_grad():
        for start in range(0, len(records), batch_images):
            chunk = records[start : start + batch_images]
            images = torch.from_numpy(
                np.stack([r.image for r in chunk])
            ).permute(0, 3, 1, 2).float() / 255.0
            grid = model.encode_image(images)
            prompts, indices = [], []
            for b, rec in enumerate(chunk):
                for region in rec.regions:
                    prompts.append(box_prompt(region.mask))
                    indices.append(b)
                    region_ids.append(region.region_id)
                    captions.append(region.caption)
                    concepts.append(region.concept)
            bundle = model.decode(grid, prompts, indices)
            tokens.append(bundle.semantic_tokens[:, 0].clone())  # boxes route to slot 0
    return torch.cat(tokens), region_ids, captions, concepts


class FinetuneRunner:
    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 dataset: ShapesDataset, pretrained: str | Path):
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        torch.manual_seed(train_cfg.seed + 1)
        ckpt = load_checkpoint(pretrained)
        if ckpt.model_config != model_cfg:
            raise ResumeMismatchError("pretrained checkpoint was built with another model config")
        self.model = PromptableModel(model_cfg)
        load_model_blobs(self.model, ckpt.blobs)
        for _, p in frozen_image_parameters(self.model):
            p.requires_grad_(False)
        self.model.eval()

        self.concepts = list(dataset.concepts)
        self.tokenizer = BpeTokenizer.train(
            [region.caption for _, region in dataset.iter_regions()],
            vocab_size=model_cfg.txt_vocab_size,
        )
        if len(self.tokenizer) > model_cfg.txt_vocab_size:
            raise ValueError("tokenizer outgrew the configured text vocabulary")
        self.captioner = CaptionDecoder(model_cfg)
        self.sem_tokens, self.region_ids, captions, _ = collect_semantic_tokens(
            self.model, dataset
        )
        self.token_rows = [
            torch.tensor(self.tokenizer.encode(c), dtype=torch.long) for c in captions
        ]
        self.named_params = sorted(self.captioner.named_parameters())
        self.optimizer = build_optimizer(self.named_params, train_cfg)
        self.step = 0
        self.hash = config_hash(model_cfg, train_cfg)

    def _check_frozen(self):
        for name, p in frozen_image_parameters(self.model):
            if p.requires_grad or (p.grad is not None and bool(p.grad.any())):
                raise FrozenParameterError(f"image parameter {name} is receiving gradient")

    def finetune_step(self) -> losses.LossBreakdown:
        cfg = self.train_cfg
        rng = step_rng(cfg.seed, 2, self.step)
        n = self.sem_tokens.shape[0]
        pick = rng.choice(n, size=min(cfg.batch_captions, n), replace=False)
        loss = self.caption_loss([int(i) for i in pick])
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self._check_frozen()
        set_lr(self.optimizer, lr_at(self.step, cfg))
        self.optimizer.step()
        self.step += 1
        return losses.LossBreakdown(caption_ce=float(loss.detach()))

    def caption_loss(self, indices: list[int]) -> torch.Tensor:
        """Teacher-forced CE over caption positions of the selected regions."""
        self.captioner.train()
        rows = [self.token_rows[i] for i in indices]
        longest = max(len(r) for r in rows)
        batch = torch.full((len(rows), longest), PAD, dtype=torch.long)
        for j, row in enumerate(rows):
            batch[j, : len(row)] = row
        sem = self.sem_tokens[torch.tensor(indices)]
        logits = self.captioner.forward_train(sem, batch)
        # position 1 (BOS) predicts t1, ..., the last caption token predicts EOS;
        # the semantic-token slot (position 0) is never supervised
        pred = logits[:, 1:]
        tgt = torch.cat([batch, torch.full((len(rows), 1), PAD, dtype=torch.long)], dim=1)
        for j, row in enumerate(rows):
            tgt[j, len(row)] = EOS
        valid = (tgt != PAD).reshape(-1)
        flat_logits = pred.reshape(-1, pred.shape[-1])[valid]
        flat_tgt = tgt.reshape(-1)[valid]
        return losses.caption_ce(flat_logits, flat_tgt)

    def state_blobs(self) -> dict[str, np.ndarray]:
        blobs = model_blobs(self.model)
        blobs.update(model_blobs(self.captioner, prefix="captioner."))
        blobs.update(optimizer_blobs(self.optimizer, self.named_params))
        blobs.update(rng_blobs())
        return blobs

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            path,
            self.model_cfg,
            self.state_blobs(),
            train_cfg=self.train_cfg,
            config_hash=self.hash,
            extra={
                "phase": "finetune",
                "step": self.step,
                "concepts": self.concepts,
                "tokenizer": {
                    "symbols": self.tokenizer.symbols,
                    "merges": ["\t".join(m) for m in self.tokenizer.merges],
                },
            },
        )


def finetune(model_cfg: ModelConfig, train_cfg: TrainConfig, pretrained: str | Path,
             dataset: ShapesDataset | None = None) -> Path:
    if dataset is None:
        dataset = load_dataset(train_cfg.data_dir)
    out_dir = Path(train_cfg.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = FinetuneRunner(model_cfg, train_cfg, dataset, pretrained)
    metrics_path = out_dir / "finetune-metrics.jsonl"
    started = time.time()
    with open(metrics_path, "w") as log:
        for _ in range(train_cfg.steps):
            logged_step = runner.step
            breakdown = runner.finetune_step()
            if train_cfg.log_every and logged_step % train_cfg.log_every == 0:
                log.write(
                    json.dumps(
                        {
                            "step": logged_step,
                            "lr": lr_at(logged_step, train_cfg),
                            "caption_ce": round(breakdown.caption_ce, 6),
                            "elapsed_s": round(time.time() - started, 3),
                        }
                    )
                    + "\n"
                )
                log.flush()
    final = out_dir / "finetune.tapckpt"
    runner.save(final)
    return final


def load_finetuned(path: str | Path):
    """Rebuild (model, captioner, tokenizer) from a fine-tune checkpoint."""
    ckpt = load_checkpoint(path)
    cfg = ckpt.model_config
    model = PromptableModel(cfg)
    load_model_blobs(model, ckpt.blobs)
    model.eval()
    captioner = None
    tokenizer = None
    if any(k.startswith("captioner.") for k in ckpt.blobs):
        captioner = CaptionDecoder(cfg)
        load_model_blobs(captioner, ckpt.blobs, prefix="captioner.")
        captioner.eval()
        tok = ckpt.extra.get("tokenizer")
        if tok:
            symbols = [s for s in tok["symbols"]]
            merges = [tuple(m.split("\t")) for m in tok["merges"]]
            tokenizer = BpeTokenizer(symbols[4:], merges)
    return model, captioner, tokenizer, ckpt
