import numpy as np
import pytest
import torch

from stylesem.errors import InputError
from stylesem.masks import MaskGenerator, apply_and_pool, keep_count, topk_mask
from util import finite_difference_check


def test_keep_count_grid_exact():
    expected = {0.0: 64, 0.1: 58, 0.2: 51, 0.3: 45, 0.4: 38, 0.5: 32, 0.6: 26, 0.7: 19, 0.8: 13, 0.9: 6, 1.0: 0}
    for alpha, k in expected.items():
        assert keep_count(alpha, 64) == k
    with pytest.raises(InputError):
        keep_count(-0.1, 64)
    with pytest.raises(InputError):
        keep_count(1.1, 64)


def test_extreme_ratios():
    scores = torch.randn(64, dtype=torch.float64)
    assert topk_mask(scores, 0.0).sum() == 64
    assert topk_mask(scores, 1.0).sum() == 0
    assert topk_mask(scores, 0.5).sum() == 32


def test_monotone_nesting():
    scores = torch.randn(64, dtype=torch.float64)
    kept = [set(torch.nonzero(topk_mask(scores, a)).reshape(-1).tolist()) for a in np.linspace(0, 1, 11)]
    for smaller_alpha, larger_alpha in zip(kept[:-1], kept[1:]):
        assert larger_alpha <= smaller_alpha  # higher ratio keeps a subset


def test_tie_break_lower_index():
    scores = torch.zeros(6, dtype=torch.float64)
    mask = topk_mask(scores, 0.5)
    assert mask.tolist() == [1, 1, 1, 0, 0, 0]


def test_straight_through_identity_gradient():
    scores = torch.randn(10, dtype=torch.float64, requires_grad=True)
    out = topk_mask(scores, 0.4)
    out.sum().backward()
    assert torch.allclose(scores.grad, torch.ones_like(scores))


def test_per_sample_ratio_tensor():
    scores = torch.randn(3, 8, dtype=torch.float64)
    alphas = torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64)
    mask = topk_mask(scores, alphas)
    assert mask.sum(dim=-1).tolist() == [8, 4, 0]
    with pytest.raises(InputError):
        topk_mask(scores, torch.tensor([0.0, 2.0, 0.5]))


def _mask_gen(d=8, seed=0):
    torch.manual_seed(seed)
    gen = MaskGenerator(d).to(torch.float64)
    for p in gen.parameters():
        with torch.no_grad():
            p.copy_(torch.randn_like(p) * 0.2)
    return gen


def test_generate_masks_shapes_and_cardinality():
    gen = _mask_gen()
    style = torch.randn(2, 4, 16, 8, dtype=torch.float64)
    sem = torch.randn(2, 16, 8, dtype=torch.float64)
    style_masks, sem_mask = gen(style, sem, alpha_s=0.25, alpha_m=0.5)
    assert style_masks.shape == (2, 4, 16)
    assert sem_mask.shape == (2, 16)
    assert (style_masks.sum(-1) == keep_count(0.25, 16)).all()
    assert (sem_mask.sum(-1) == keep_count(0.5, 16)).all()


def test_full_semantic_masking_hides_reference():
    gen = _mask_gen(seed=1)
    style = torch.randn(1, 3, 16, 8, dtype=torch.float64)
    sem_a = torch.randn(1, 16, 8, dtype=torch.float64)
    sem_b = torch.randn(1, 16, 8, dtype=torch.float64)
    masks_a, sem_mask_a = gen(style, sem_a, alpha_s=0.25, alpha_m=1.0)
    masks_b, _ = gen(style, sem_b, alpha_s=0.25, alpha_m=1.0)
    assert sem_mask_a.sum() == 0
    assert torch.equal(masks_a, masks_b)


def test_style_masks_use_semantic_context():
    gen = _mask_gen(seed=2)
    style = torch.randn(1, 3, 16, 8, dtype=torch.float64)
    sem_a = torch.randn(1, 16, 8, dtype=torch.float64)
    sem_b = torch.randn(1, 16, 8, dtype=torch.float64) * 3.0
    masks_a, _ = gen(style, sem_a, alpha_s=0.5, alpha_m=0.0)
    masks_b, _ = gen(style, sem_b, alpha_s=0.5, alpha_m=0.0)
    assert not torch.equal(masks_a, masks_b)


def test_apply_and_pool():
    feats = torch.randn(1, 1, 8, 4, dtype=torch.float64)
    ones = torch.ones(1, 1, 8, dtype=torch.float64)
    pooled, _ = apply_and_pool(feats, ones, feats[:, 0], ones[:, 0])
    assert torch.allclose(pooled, feats[:, 0])
    # mean of identical features stays identical
    two = feats.repeat(1, 2, 1, 1)
    pooled_two, _ = apply_and_pool(two, ones.repeat(1, 2, 1), feats[:, 0], ones[:, 0])
    assert torch.allclose(pooled_two, feats[:, 0])
    # full semantic masking zeroes the matrix
    _, masked = apply_and_pool(feats, ones, feats[:, 0], torch.zeros(1, 8, dtype=torch.float64))
    assert (masked == 0).all()
    with pytest.raises(InputError):
        apply_and_pool(feats[:, :0], ones[:, :0], feats[:, 0], ones[:, 0])


def test_score_head_surrogate_gradients():
    """Soft-mode (bits replaced by scores) finite differences on the score head."""
    gen = _mask_gen(d=4, seed=3)
    style = torch.randn(1, 2, 6, 4, dtype=torch.float64)
    sem = torch.randn(1, 6, 4, dtype=torch.float64)
    downstream = torch.randn(1, 6, 4, dtype=torch.float64)

    def loss_fn():
        style_masks, sem_mask = gen(style, sem, alpha_s=0.25, alpha_m=0.5, mode="soft")
        pooled, masked = apply_and_pool(style, style_masks, sem, sem_mask)
        return (pooled * downstream).sum() + (masked * downstream).sum()

    finite_difference_check(
        loss_fn, [(n, p) for n, p in gen.named_parameters() if "score_head" in n], rel_tol=1e-4
    )


def test_hard_mode_rejects_unknown():
    with pytest.raises(InputError):
        topk_mask(torch.randn(4), 0.5, mode="banana")
