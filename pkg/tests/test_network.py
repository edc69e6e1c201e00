import numpy as np
import pytest
import torch

from tap.config import ModelConfig, paper_model_config
from tap.network import (
    CheckpointError,
    PromptableModel,
    SemanticHead,
    audit_shapes,
    cross_block_positions,
    expected_shapes,
    load_checkpoint,
    load_model_blobs,
    model_blobs,
    route,
    save_checkpoint,
    window_merge,
    window_partition,
)
from tap.network.encoder import WindowBlock
from tap.sampler import PromptLabel, PromptPoint, PromptSet

from conftest import tiny_model_config


def make_points(n, seed=0):
    rng = np.random.default_rng(seed)
    pts = tuple(
        PromptPoint(float(x), float(y), PromptLabel.POSITIVE)
        for x, y in rng.random((n, 2))
    )
    return PromptSet(points=pts, kind="points")


def make_box():
    return PromptSet(
        points=(
            PromptPoint(0.2, 0.3, PromptLabel.BOX_TL),
            PromptPoint(0.7, 0.8, PromptLabel.BOX_BR),
        ),
        kind="box",
    )


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return PromptableModel(tiny_model_config()).eval()


@pytest.fixture(scope="module")
def images(model):
    g = torch.Generator().manual_seed(1)
    return torch.rand(2, 3, model.cfg.image_size, model.cfg.image_size, generator=g)


# -- geometry и shape contracts ---------------------------------------------------


def test_grid_arithmetic_desk_and_paper():
    assert ModelConfig().grid_size == 16
    paper = paper_model_config()
    assert paper.grid_size == 64
    assert paper.grid_size % paper.window_size == 0
    paper.validate()


def test_indivisible_geometry_rejected():
    with pytest.raises(ValueError):
        ModelConfig(image_size=100, patch_size=8).validate()
    with pytest.raises(ValueError):
        ModelConfig(image_size=128, patch_size=8, window_size=5).validate()


def test_wrong_input_size_rejected(model):
    with pytest.raises(ValueError):
        model.encode_image(torch.rand(1, 3, 48, 48))


def test_nine_output_tokens(model, images):
    with torch.no_grad():
        bundle = model(images, [make_box(), make_points(3)])
    assert bundle.num_tokens == 9
    assert bundle.mask_tokens.shape[1] == 4
    assert bundle.semantic_tokens.shape[1] == 4
    g = 4 * model.cfg.grid_size
    assert bundle.mask_logits.shape == (2, 4, g, g)
    assert bundle.iou_pred.shape == (2, 4)


def test_shape_audit(model):
    report = audit_shapes(model)
    assert all(entry["ok"] for entry in report.values())


def test_paper_semantic_head_dims():
    cfg = paper_model_config()
    want = expected_shapes(cfg)
    assert want["decoder.semantic_head.mlp.fc1.weight"] == (1024, 256)
    assert want["decoder.semantic_head.mlp.fc2.weight"] == (1024, 1024)
    assert want["decoder.semantic_head.source_weights"] == (1024, 2560)
    head = SemanticHead(cfg.dec_dim, cfg.semantic_hidden, cfg.d_text, cfg.num_concepts)
    assert tuple(head.mlp.fc1.weight.shape) == (1024, 256)
    assert tuple(head.mlp.fc2.weight.shape) == (1024, 1024)
    assert tuple(head.source_weights.shape) == (1024, 2560)


def test_cross_block_positions_evenly_spaced():
    assert cross_block_positions(6, 4) == [1, 2, 3, 5]
    assert cross_block_positions(24, 4) == [5, 11, 17, 23]


# -- batching semantics -------------------------------------------------------------


def test_padding_does_not_change_outputs(model, images):
    short = make_points(1)
    long = make_points(9, seed=4)
    with torch.no_grad():
        grid = model.encode_image(images[:1])
        alone = model.decode(grid, [short], [0])
        padded = model.decode(grid, [short, long], [0, 0])
    torch.testing.assert_close(alone.mask_logits[0], padded.mask_logits[0], atol=1e-6, rtol=0)
    torch.testing.assert_close(alone.iou_pred[0], padded.iou_pred[0], atol=1e-6, rtol=0)
    torch.testing.assert_close(
        alone.semantic_tokens[0], padded.semantic_tokens[0], atol=1e-6, rtol=0
    )


def test_permutation_equivariance(model, images):
    a, b = make_points(2, seed=2), make_box()
    with torch.no_grad():
        grid = model.encode_image(images)
        fwd = model.decode(grid, [a, b], [0, 1])
        rev = model.decode(grid, [b, a], [1, 0])
    torch.testing.assert_close(fwd.mask_logits[0], rev.mask_logits[1], atol=1e-6, rtol=0)
    torch.testing.assert_close(fwd.iou_pred[1], rev.iou_pred[0], atol=1e-6, rtol=0)


# -- routing ---------------------------------------------------------------------------


def test_route_examples():
    assert route("box", (0.1, 0.99, 0.99, 0.99)) == 0
    assert route("points", (0.9, 0.1, 0.2, 0.3)) == 3
    assert route("points", (0.0, 0.5, 0.5, 0.2)) == 1


def test_route_exhaustive_random(rng):
    for _ in range(2000):
        iou = rng.random(4)
        assert route("box", iou) == 0
        got = route("points", iou)
        best = 1 + int(np.argmax(iou[1:4]))  # argmax returns first max: lowest index
        assert got == best
        assert route("sketch", iou) == best
    with pytest.raises(ValueError):
        route("points", (0.1, 0.2))


# -- prompt encoder ----------------------------------------------------------------------


def test_label_embedding_is_additive(model):
    enc = model.prompt_encoder
    pos = enc.point_embedding(0.4, 0.6, int(PromptLabel.POSITIVE))
    neg = enc.point_embedding(0.4, 0.6, int(PromptLabel.NEGATIVE))
    diff = enc.label_embed.weight[1] - enc.label_embed.weight[0]
    torch.testing.assert_close(pos - neg, diff, atol=1e-6, rtol=0)
    assert pos.shape == (model.cfg.dec_dim,)


def test_translation_changes_only_sincos_part(model):
    enc = model.prompt_encoder
    a = enc.point_embedding(0.2, 0.2, 1) - enc.point_embedding(0.8, 0.5, 1)
    b = enc.point_embedding(0.2, 0.2, 0) - enc.point_embedding(0.8, 0.5, 0)
    torch.testing.assert_close(a, b, atol=1e-6, rtol=0)


def test_encode_prompts_rejects_empty(model):
    with pytest.raises(ValueError):
        model.prompt_encoder([])
    with pytest.raises(ValueError):
        model.prompt_encoder([PromptSet(points=(), kind="points")])


# -- windowed attention ---------------------------------------------------------------------


def test_window_permutation_identity():
    torch.manual_seed(3)
    block = WindowBlock(dim=16, heads=2, window=4).eval()
    x = torch.randn(1, 8, 8, 16)
    with torch.no_grad():
        out = block(x)
        wins = window_partition(x, 4)
        perm = torch.randperm(wins.shape[0])
        x_perm = window_merge(wins[perm], 4, 8, 1)
        out_perm = block(x_perm)
    torch.testing.assert_close(
        window_partition(out, 4)[perm], window_partition(out_perm, 4), atol=1e-6, rtol=0
    )


# -- heads ------------------------------------------------------------------------------------


def test_zero_initialized_heads_give_half_probability(images):
    torch.manual_seed(0)
    model = PromptableModel(tiny_model_config()).eval()
    for net in model.decoder.mask_hypernets:
        torch.nn.init.zeros_(net.fc2.weight)
        torch.nn.init.zeros_(net.fc2.bias)
    with torch.no_grad():
        bundle = model(images[:1], [make_points(2)])
    assert torch.all(bundle.mask_logits == 0)
    assert torch.all(torch.sigmoid(bundle.mask_logits) == 0.5)


def test_predict_concepts_shape_and_linearity(model, rng):
    head = model.decoder.semantic_head
    head.set_source_weights(rng.normal(size=(model.cfg.d_text, model.cfg.num_concepts)))
    token = torch.randn(3, model.cfg.dec_dim)
    logits = model.predict_concepts(token)
    assert logits.shape == (3, model.cfg.num_concepts)
    assert torch.allclose(torch.softmax(logits, -1).sum(-1), torch.ones(3), atol=1e-6)
    vis = head.embed(token)
    torch.testing.assert_close(head.project(3.0 * vis), 3.0 * head.project(vis), atol=1e-5, rtol=1e-5)
    assert torch.equal(
        head.project(3.0 * vis).argmax(-1), head.project(vis).argmax(-1)
    )
    with pytest.raises(ValueError):
        head.project(torch.randn(5, model.cfg.d_text + 1))


def test_classify_zero_shot_contracts(model, rng):
    token = torch.randn(model.cfg.dec_dim)
    w = rng.normal(size=(model.cfg.d_text, 6))
    idx, scores = model.classify_zero_shot(token, w, topk=100)  # clamp to K
    assert idx.shape == (6,)
    assert sorted(idx.tolist()) == list(range(6))  # a permutation of all concepts
    assert torch.all(scores[:-1] >= scores[1:])
    w_dup = w.copy()
    w_dup[:, 3] = w_dup[:, 1]
    idx2, _ = model.classify_zero_shot(token, w_dup, topk=6)
    r1, r3 = idx2.tolist().index(1), idx2.tolist().index(3)
    assert abs(r1 - r3) == 1 and r1 < r3  # equal logits: adjacent, index-ordered


# -- checkpoint format -------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, model, images):
    blobs = model_blobs(model)
    blobs["rng.demo"] = np.arange(7, dtype=np.uint8)
    save_checkpoint(tmp_path / "m.tapckpt", model.cfg, blobs, config_hash="h", extra={"step": 3})
    ckpt = load_checkpoint(tmp_path / "m.tapckpt")
    assert ckpt.model_config == model.cfg
    assert ckpt.extra["step"] == 3
    torch.manual_seed(99)
    clone = PromptableModel(model.cfg).eval()
    load_model_blobs(clone, ckpt.blobs)
    with torch.no_grad():
        a = model(images, [make_box(), make_points(2)])
        b = clone(images, [make_box(), make_points(2)])
    torch.testing.assert_close(a.mask_logits, b.mask_logits, atol=0, rtol=0)


def test_checkpoint_detects_corruption(tmp_path, model):
    path = tmp_path / "m.tapckpt"
    save_checkpoint(path, model.cfg, model_blobs(model))
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
