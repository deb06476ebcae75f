import numpy as np
import pytest
import torch

from fovit.geometry import build_canonical_layout
from fovit.vit import Block, ModelConfig, VisionTransformer, load_model, patchify, save_model, unpatchify

from oracles import param_coordinate_gradcheck

SMALL = ModelConfig(image_side=56, patch_side=4, dim=16, heads=2, depth=1, n_classes=5)


@pytest.fixture(scope="module")
def layout():
    return build_canonical_layout()


def small_model(layout, dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    return VisionTransformer(SMALL, layout).to(dtype)


def test_patchify_224():
    img = torch.rand(224, 224, 3)
    p = patchify(img, 16)
    assert p.shape == (196, 768)
    # patch 14r + c starts at pixel (16r, 16c), red channel first
    assert p[14 * 2 + 5, 0] == img[32, 80, 0]
    assert p[14 * 2 + 5, 256] == img[32, 80, 1]


def test_patchify_constant_and_inverse():
    img = torch.full((1, 32, 32, 3), 0.5)
    p = patchify(img, 8)
    assert torch.equal(p[0, 0], p[0, -1])
    x = torch.rand(2, 32, 32, 3)
    assert torch.equal(unpatchify(patchify(x, 8), 8), x)


def test_patchify_rejects_bad_shape():
    with pytest.raises(ValueError):
        patchify(torch.zeros(1, 30, 30, 3), 8)


def test_zero_image_embeds_to_positions(layout):
    model = small_model(layout)
    feats = model.embed_with_positions(torch.zeros(1, 56, 56, 3))
    assert torch.equal(feats[0], model.pos_embed + model.patch_b)


def test_embedding_is_local(layout):
    model = small_model(layout)
    a = torch.rand(1, 56, 56, 3)
    b = a.clone()
    b[0, 8:12, 20:24] += 1.0  # patch (x=5, y=2)
    diff = (model.embed_with_positions(a) - model.embed_with_positions(b)).abs().sum(-1)[0]
    assert diff[2, 5] > 0
    diff[2, 5] = 0
    assert (diff == 0).all()


def test_config_checks(layout):
    with pytest.raises(ValueError):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        VisionTransformer(ModelConfig(image_side=64, patch_side=8), layout)


def test_block_preserves_shape_and_masks():
    torch.manual_seed(1)
    blk = Block(16, 4, 2).double()
    x = torch.randn(2, 6, 16, dtype=torch.float64)
    mask = torch.tensor([[True] * 4 + [False] * 2, [True] * 6])
    y, attn = blk(x, mask, return_attn=True)
    assert y.shape == x.shape
    assert torch.allclose(attn.sum(-1), torch.ones(2, 4, 6, dtype=torch.float64))
    assert (attn[0, :, :, 4:] == 0).all()
    # changing masked content does not change unmasked outputs
    x2 = x.clone()
    x2[0, 4:] = torch.randn(2, 16, dtype=torch.float64) * 100
    y2 = blk(x2, mask)
    assert torch.allclose(y2[0, :4], y[0, :4], atol=1e-12)


def test_padding_matches_shorter_sequence():
    torch.manual_seed(2)
    blk = Block(16, 4, 2).double()
    x = torch.randn(1, 5, 16, dtype=torch.float64)
    padded = torch.cat([x, torch.zeros(1, 3, 16, dtype=torch.float64)], dim=1)
    mask = torch.tensor([[True] * 5 + [False] * 3])
    assert torch.allclose(blk(padded, mask)[:, :5], blk(x), atol=1e-6)


def test_sequence_length_is_capacity_plus_one(layout):
    model = small_model(layout)
    feats = model.embed_with_positions(torch.rand(1, 56, 56, 3))
    for y in range(14):
        for x in range(14):
            tokens, mask = model.foveate(feats, [[x, y]])
            seq, full = model.with_class_token(tokens, mask)
            assert seq.shape[1] == full.shape[1] == layout.capacity + 1
    assert model.cost_per_fixation == 30 and model.cost_unfoveated == 197


def test_penultimate_weights(layout):
    model = small_model(layout)
    feats = model.embed_with_positions(torch.rand(3, 56, 56, 3))
    cls, weights, mask = model.fixation_step(feats, [[0, 0], [7, 7], [13, 5]])
    assert cls.shape == (3, 16)
    assert torch.allclose(weights.sum(-1), torch.ones(3), atol=1e-6)
    assert (weights[~mask] == 0).all()
    assert (weights >= 0).all()


def test_single_active_feature_gets_all_weight():
    torch.manual_seed(3)
    blk = Block(16, 4, 2)
    x = torch.randn(1, 4, 16)
    mask = torch.tensor([[True, True, False, False]])
    _, attn = blk(x, mask, return_attn=True)
    w = attn[:, :, 0, 1:].mean(1)
    w = w / w.sum(-1, keepdim=True)
    assert torch.allclose(w, torch.tensor([[1.0, 0.0, 0.0]]))


def test_aggregation_order_invariant(layout):
    model = small_model(layout, torch.float64)
    outs = torch.randn(2, 4, 16, dtype=torch.float64)
    perm = outs[:, [2, 0, 3, 1]]
    assert torch.allclose(model.aggregate_fixations(outs), model.aggregate_fixations(perm), atol=1e-6)
    assert model.aggregate_fixations(outs[:, :1]).shape == (2, 5)
    with pytest.raises(ValueError):
        model.aggregate_fixations(outs[:, :0])


def test_unfoveated_shape_and_determinism(layout):
    model = small_model(layout)
    x = torch.rand(2, 56, 56, 3)
    a = model.forward_unfoveated(x)
    assert a.shape == (2, 5)
    assert torch.equal(a, model.forward_unfoveated(x))


def foveated_loss(model, images, target, path):
    feats = model.embed_with_positions(images)
    outs = [model.fixation_step(feats, path[:, k])[0] for k in range(path.shape[1])]
    loss = 0
    for k in range(1, len(outs) + 1):
        loss = loss + torch.nn.functional.cross_entropy(model.aggregate_fixations(torch.stack(outs[:k], 1)), target)
    return loss


def test_gradient_reaches_every_parameter(layout):
    model = small_model(layout)
    with torch.no_grad():  # zero-init biases would otherwise hide their gradient paths
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    images = torch.rand(4, 56, 56, 3)
    target = torch.tensor([0, 1, 2, 3])
    path = np.array([[[3, 3], [10, 4]]] * 4)
    loss = foveated_loss(model, images, target, path)
    loss = loss + torch.nn.functional.cross_entropy(model.forward_unfoveated(images), target)
    loss.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_full_model_finite_differences(layout):
    model = small_model(layout, torch.float64, seed=4)
    gen = torch.Generator().manual_seed(0)
    images = torch.rand(2, 56, 56, 3, generator=gen, dtype=torch.float64)
    target = torch.tensor([1, 3])
    path = np.array([[[2, 3], [8, 8]], [[13, 0], [6, 7]]])

    def loss():
        return foveated_loss(model, images, target, path) + torch.nn.functional.cross_entropy(
            model.forward_unfoveated(images), target
        )

    errors = param_coordinate_gradcheck(model, loss, n_coords=100, seed=1)
    assert max(errors) < 1e-4


def test_checkpoint_roundtrip(layout, tmp_path):
    model = small_model(layout)
    save_model(model, tmp_path / "m.ckpt", {"note": "x"})
    again, meta = load_model(tmp_path / "m.ckpt", layout)
    assert meta["note"] == "x" and again.config == model.config
    x = torch.rand(1, 56, 56, 3)
    assert torch.equal(again.forward_unfoveated(x), model.forward_unfoveated(x))
