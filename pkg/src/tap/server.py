"""HTTP service exposing the segment-recognize-caption pipeline.

JSON over HTTP; masks travel as row-major RLE. Image embeddings are cached
per content hash (and per session) because interactive refinement re-prompts
the same image many times. The model is frozen and shared read-only across
requests; response fields other than timing_ms/cache_hit are deterministic
for identical requests.
"""

from __future__ import annotations

import base64
import hashlib
import io
import threading
import time
import uuid
from collections import OrderedDict

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel

from .datastore.rle import rle_encode
from .network import PromptableModel
from .network.decoder import route
from .sampler import PromptLabel, PromptPoint, PromptSet

MAX_IMAGE_BYTES = 16 * 1024 * 1024
MAX_IMAGE_SIDE = 4096
_LABELS = {
    "pos": PromptLabel.POSITIVE,
    "neg": PromptLabel.NEGATIVE,
    "box_tl": PromptLabel.BOX_TL,
    "box_br": PromptLabel.BOX_BR,
}


class SegmentRequest(BaseModel):
    image: str | None = None
    session_id: str | None = None
    prompts: list[dict] = []
    want_caption: bool = False
    topk: int = 5


class SessionRequest(BaseModel):
    image: str


class InferenceEngine:
    """Frozen pipeline plus the session/embedding caches."""

    def __init__(self, model: PromptableModel, class_names: list[str], vocab_weights,
                 captioner=None, tokenizer=None, cache_size: int = 8,
                 max_sessions: int = 32, session_ttl: float = 600.0):
        self.model = model.eval()
        self.captioner = captioner.eval() if captioner is not None else None
        self.tokenizer = tokenizer
        self.class_names = class_names
        self.vocab_weights = vocab_weights
        self._grids: OrderedDict[str, torch.Tensor] = OrderedDict()
        self._sessions: OrderedDict[str, dict] = OrderedDict()
        self.cache_size = cache_size
        self.max_sessions = max_sessions
        self.session_ttl = session_ttl
        self._lock = threading.Lock()

    # -- image handling -----------------------------------------------------

    def decode_image(self, b64: str) -> np.ndarray:
        try:
            raw = base64.b64decode(b64, validate=True)
        except Exception:
            raise HTTPException(400, "image is not valid base64")
        if len(raw) > MAX_IMAGE_BYTES:
            raise HTTPException(413, "image payload too large")
        try:
            with Image.open(io.BytesIO(raw)) as im:
                im = im.convert("RGB")
                if max(im.size) > MAX_IMAGE_SIDE:
                    raise HTTPException(413, "image dimensions too large")
                return np.asarray(im)
        except HTTPException:
            raise
        except Exception:
            raise HTTPException(400, "image could not be decoded")

    def _encode_grid(self, image: np.ndarray) -> torch.Tensor:
        size = self.model.cfg.image_size
        if image.shape[0] != size or image.shape[1] != size:
            im = Image.fromarray(image).resize((size, size), Image.BILINEAR)
            image = np.asarray(im)
        x = torch.from_numpy(image.copy()).permute(2, 0, 1).float()[None] / 255.0
        with torch.no_grad():
            return self.model.encode_image(x)

    def grid_for(self, image: np.ndarray) -> tuple[torch.Tensor, bool, str]:
        key = hashlib.sha256(image.tobytes()).hexdigest()
        with self._lock:
            if key in self._grids:
                self._grids.move_to_end(key)
                return self._grids[key], True, key
        grid = self._encode_grid(image)
        with self._lock:
            self._grids[key] = grid
            self._grids.move_to_end(key)
            while len(self._grids) > self.cache_size:
                self._grids.popitem(last=False)
        return grid, False, key

    # -- sessions -------------------------------------------------------------

    def open_session(self, image: np.ndarray) -> str:
        session_id = uuid.uuid4().hex
        grid, _, key = self.grid_for(image)
        with self._lock:
            self._sessions[session_id] = {
                "image": image,
                "hash": key,
                "shape": image.shape[:2],
                "last_used": time.monotonic(),
            }
            while len(self._sessions) > self.max_sessions:
                self._sessions.popitem(last=False)
        return session_id

    def session_image(self, session_id: str) -> np.ndarray:
        with self._lock:
            entry = self._sessions.get(session_id)
            now = time.monotonic()
            if entry is not None and now - entry["last_used"] > self.session_ttl:
                del self._sessions[session_id]
                entry = None
            if entry is None:
                raise HTTPException(404, "unknown or expired session")
            entry["last_used"] = now
            self._sessions.move_to_end(session_id)
            return entry["image"]

    def expire_session(self, session_id: str) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)

    # -- the pipeline ---------------------------------------------------------

    def parse_prompts(self, raw_prompts: list[dict]) -> PromptSet:
        if not raw_prompts:
            raise HTTPException(422, "empty prompt set")
        points = []
        for p in raw_prompts:
            try:
                label = _LABELS[p["label"]]
                x, y = float(p["x"]), float(p["y"])
            except (KeyError, TypeError, ValueError):
                raise HTTPException(400, f"malformed prompt {p!r}")
            try:
                points.append(PromptPoint(x=x, y=y, label=label))
            except ValueError as exc:
                raise HTTPException(400, str(exc))
        corner_labels = [p.label for p in points if p.label in (PromptLabel.BOX_TL, PromptLabel.BOX_BR)]
        kind = "box" if corner_labels else "points"
        if kind == "box":
            # corners must lead the sequence as a TL/BR pair
            corners = [p for p in points if p.label in (PromptLabel.BOX_TL, PromptLabel.BOX_BR)]
            loose = [p for p in points if p.label not in (PromptLabel.BOX_TL, PromptLabel.BOX_BR)]
            if len(corners) != 2 or corners[0].label is not PromptLabel.BOX_TL:
                raise HTTPException(400, "box prompts need exactly one TL/BR corner pair")
            points = corners + loose
        try:
            return PromptSet(points=tuple(points), kind=kind)
        except ValueError as exc:
            raise HTTPException(400, str(exc))

    def segment(self, image: np.ndarray, prompt_set: PromptSet, want_caption: bool,
                topk: int) -> dict:
        t0 = time.perf_counter()
        grid, cache_hit, _ = self.grid_for(image)
        t1 = time.perf_counter()
        h, w = image.shape[:2]
        with torch.no_grad():
            bundle = self.model.decode(grid, [prompt_set], [0])
            logits = torch.nn.functional.interpolate(
                bundle.mask_logits, size=(h, w), mode="bilinear", align_corners=False
            )
            slot = route(prompt_set.kind, bundle.iou_pred[0])
            mask = (logits[0, slot] >= 0).numpy()
            token = bundle.semantic_tokens[0, slot]
            idx, scores = self.model.classify_zero_shot(token, self.vocab_weights, topk=topk)
        t2 = time.perf_counter()
        caption = None
        if want_caption and self.captioner is not None:
            seq = self.captioner.generate(token)
            caption = self.tokenizer.decode(seq.tokens) if self.tokenizer else None
        t3 = time.perf_counter()
        return {
            "mask": rle_encode(mask),
            "slot": slot,
            "iou_pred": [float(v) for v in bundle.iou_pred[0]],
            "concepts": [
                {"name": self.class_names[int(i)], "score": float(s)}
                for i, s in zip(idx, scores)
            ],
            "caption": caption,
            "cache_hit": cache_hit,
            "timing_ms": {
                "encode": round(1000 * (t1 - t0), 3),
                "decode": round(1000 * (t2 - t1), 3),
                "caption": round(1000 * (t3 - t2), 3),
                "total": round(1000 * (t3 - t0), 3),
            },
        }


def create_app(engine: InferenceEngine) -> FastAPI:
    app = FastAPI(title="tap", version="0.1.0")

    @app.post("/v1/session")
    def open_session(req: SessionRequest):
        image = engine.decode_image(req.image)
        return {"session_id": engine.open_session(image)}

    @app.post("/v1/segment")
    def segment(req: SegmentRequest):
        if req.image is None and req.session_id is None:
            raise HTTPException(400, "provide an image or a session_id")
        if req.image is not None:
            image = engine.decode_image(req.image)
        else:
            image = engine.session_image(req.session_id)
        prompt_set = engine.parse_prompts(req.prompts)
        return engine.segment(image, prompt_set, req.want_caption, max(1, req.topk))

    @app.get("/v1/concepts")
    def concepts():
        return {"concepts": list(engine.class_names)}

    return app


def engine_from_checkpoint(ckpt_path: str) -> InferenceEngine:
    """Build a serving engine from a pretrain or fine-tune checkpoint."""
    from .trainer import load_finetuned
    from .teacher import SyntheticTeacher
    from .vocab import dataset_vocab_weights

    model, captioner, tokenizer, ckpt = load_finetuned(ckpt_path)
    concepts = ckpt.extra.get("concepts")
    if not concepts:
        raise ValueError("checkpoint does not carry its concept vocabulary")
    tcfg = ckpt.train_config
    teacher = SyntheticTeacher(
        d_text=ckpt.model_config.d_text,
        seed=tcfg.teacher_seed if tcfg else 0,
        sigma=tcfg.teacher_sigma if tcfg else 0.05,
    )
    weights = dataset_vocab_weights(list(concepts), teacher)
    return InferenceEngine(
        model, list(concepts), weights.columns, captioner=captioner, tokenizer=tokenizer
    )
