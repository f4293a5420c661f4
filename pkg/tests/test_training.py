import numpy as np
import pytest
import torch

from stylesem import tokenizer, training, world
from stylesem.errors import InputError, NumericError
from stylesem.pipeline import COMBOS, ModelDims, build_model
from util import coverage_corpus, rng


def test_combo_probs_basic():
    assert np.allclose(training.combo_probs([1, 1, 1, 1]), [0.25] * 4)
    assert np.allclose(training.combo_probs([2, 1, 1, 0]), [0.5, 0.25, 0.25, 0.0])
    assert np.allclose(training.combo_probs([0, 0, 0, 0]), [0.25] * 4)
    with pytest.raises(InputError):
        training.combo_probs([1, -1, 0, 0])
    with pytest.raises(InputError):
        training.combo_probs([1, 1, 1])


def test_combo_probs_scale_invariance_and_monotonicity():
    base = np.array([2.0, 1.0, 0.5, 0.25])
    p = training.combo_probs(base)
    assert abs(p.sum() - 1.0) < 1e-12
    for c in (0.5, 3.0):
        assert np.array_equal(training.combo_probs(c * base), p)
    bumped = base.copy()
    bumped[2] += 0.5
    assert training.combo_probs(bumped)[2] > p[2]


def _tiny_world(n_triplets=24, seed=0):
    r = rng(seed)
    triplets = [world.build_triplet(world.random_factors(r), r) for _ in range(n_triplets)]
    corpus = coverage_corpus() + [t.anchor for t in triplets]
    cb = tokenizer.fit_codebook(corpus, 64, seed=0)
    return triplets, cb


def _tiny_model(seed=0, dtype=torch.float32):
    dims = ModelDims(visual_vocab=64, d=16, n_blocks=1, latent_rows=4, num_tokens=64, context_cap=96)
    return build_model(dims, seed=seed, dtype=dtype)


def test_uniform_sampling_frequencies():
    r = rng(1)
    flags = training.AblationFlags(importance_sampling=False)
    counts = np.zeros(4)
    losses = np.array([5.0, 1.0, 1.0, 1.0])
    for _ in range(10000):
        probs = training.combo_probs(losses) if flags.importance_sampling else np.full(4, 0.25)
        counts[r.choice(4, p=probs)] += 1
    assert np.all(np.abs(counts / 10000 - 0.25) <= 0.02)


def test_importance_sampling_frequencies():
    r = rng(2)
    losses = np.array([3.0, 1.0, 0.0, 0.0])
    counts = np.zeros(4)
    for _ in range(10000):
        counts[r.choice(4, p=training.combo_probs(losses))] += 1
    freqs = counts / 10000
    assert np.all(np.abs(freqs - np.array([0.75, 0.25, 0.0, 0.0])) <= 0.02)


def test_stage2_draw_distributions():
    r = rng(3)
    ref_counts = np.zeros(4)
    alphas = []
    for _ in range(10000):
        ref_counts[r.integers(4)] += 1
        alphas.append(r.uniform())
    assert np.all(np.abs(ref_counts[:4] / 10000 - 0.25) <= 0.03)
    hist, _ = np.histogram(alphas, bins=10, range=(0, 1))
    assert np.all(np.abs(hist / 10000 - 0.1) <= 0.015)


def test_stage1_step_descends_on_sampled_combo():
    triplets, cb = _tiny_world(4, seed=4)
    data = training.tokenize_triplets(triplets, cb)
    flags = training.AblationFlags()
    successes, trials = 0, 20
    for trial in range(trials):
        model = _tiny_model(seed=trial, dtype=torch.float64)
        opt = torch.optim.Adam(model.stage_parameters(1), lr=1e-4)
        r = rng(trial)
        with torch.no_grad():
            before = training.stage1_combo_losses(model, data.anchor[:1], data.style[:1], data.semantic[:1])
        rec = training.stage1_step(model, opt, data.anchor[:1], data.style[:1], data.semantic[:1], flags, r, 0)
        with torch.no_grad():
            after = training.stage1_combo_losses(model, data.anchor[:1], data.style[:1], data.semantic[:1])
        z = COMBOS.index(rec.sampled[0])
        if float(after[0, z]) < float(before[0, z]):
            successes += 1
    assert successes / trials >= 0.95


def test_importance_flag_changes_only_sampling():
    """With the combination pinned, on/off importance sampling yield identical updates."""
    triplets, cb = _tiny_world(2, seed=5)
    data = training.tokenize_triplets(triplets, cb)
    states = []
    for importance in (True, False):
        model = _tiny_model(seed=9, dtype=torch.float64)
        opt = torch.optim.Adam(model.stage_parameters(1), lr=1e-3)
        flags = training.AblationFlags(importance_sampling=importance)
        training.stage1_step(
            model, opt, data.anchor[:2], data.style[:2], data.semantic[:2], flags, rng(0), 0,
            forced_combos=np.array([1, 3]),
        )
        states.append({k: v.clone() for k, v in model.state_dict().items()})
    for key in states[0]:
        assert torch.equal(states[0][key], states[1][key]), key


def test_stage2_step_and_mask_ratio():
    r = rng(6)
    sessions = [world.build_session(world.random_style(r), world.random_semantic(r), r) for _ in range(3)]
    corpus = coverage_corpus() + [s.target for s in sessions]
    cb = tokenizer.fit_codebook(corpus, 64, seed=0)
    model = _tiny_model(seed=3)
    data = training.tokenize_sessions(sessions, cb, model)
    opt = torch.optim.Adam(model.stage_parameters(2), lr=1e-5)
    flags = training.AblationFlags()
    rec = training.stage2_step(
        model, opt, data.history, data.refs, data.target, data.txt, 0.2, flags, rng(7), 1
    )
    assert rec.stage == 2 and np.isfinite(rec.loss)
    # alpha_s=0.2 -> exactly 51 kept rows per style mask
    _, style_masks, _ = model.stage2_latent(data.history, data.refs[:, 0], 0.2, 0.5, return_masks=True)
    assert (style_masks.sum(-1) == 51).all()
    with pytest.raises(InputError):
        training.stage2_step(model, opt, data.history, data.refs[:, :0], data.target, data.txt, 0.2, flags, rng(8), 1)


def test_run_stage_deterministic_and_retains_best(tmp_path):
    triplets, cb = _tiny_world(12, seed=7)
    data = training.tokenize_triplets(triplets, cb)
    valid = training.tokenize_triplets(triplets[:4], cb)
    flags = training.AblationFlags()

    def run():
        model = _tiny_model(seed=1)
        result = training.run_stage(
            1, model, data, valid, flags, seed=5, epochs=2, batch_size=4,
            log_path=tmp_path / "metrics.log",
        )
        return model, result

    model_a, result_a = run()
    model_b, result_b = run()
    for key, value in model_a.state_dict().items():
        assert torch.equal(value, model_b.state_dict()[key]), key
    assert result_a.best_valid_loss == result_b.best_valid_loss
    assert result_a.best_valid_loss <= result_a.valid_history[0][1]
    log = (tmp_path / "metrics.log").read_text()
    assert "valid_loss=" in log and "stage=1" in log


def test_metrics_log_fields(tmp_path):
    triplets, cb = _tiny_world(8, seed=8)
    data = training.tokenize_triplets(triplets, cb)
    flags = training.AblationFlags()
    model = _tiny_model(seed=2)
    training.run_stage(
        1, model, data, data, flags, seed=1, epochs=1, batch_size=4,
        log_path=tmp_path / "m.log", log_every=1,
    )
    lines = (tmp_path / "m.log").read_text().splitlines()
    step_lines = [l for l in lines if " z=" in l]
    assert step_lines, "expected per-step records"
    for field in ("step=", "stage=", "loss_aa=", "loss_am=", "loss_sa=", "loss_sm=", "z=", "loss="):
        assert field in step_lines[0]


def test_non_finite_loss_aborts():
    triplets, cb = _tiny_world(2, seed=9)
    data = training.tokenize_triplets(triplets, cb)
    model = _tiny_model(seed=4)
    with torch.no_grad():
        model.generator.head.weight[0, 0] = float("nan")
    opt = torch.optim.Adam(model.stage_parameters(1), lr=1e-4)
    with pytest.raises(NumericError):
        training.stage1_step(model, opt, data.anchor[:1], data.style[:1], data.semantic[:1],
                             training.AblationFlags(), rng(0), 0)


def test_stage2_never_updates_codebook():
    """The tokenizer is frozen: training touches no codebook state at all."""
    r = rng(10)
    sessions = [world.build_session(world.random_style(r), world.random_semantic(r), r) for _ in range(2)]
    corpus = coverage_corpus() + [s.target for s in sessions]
    cb = tokenizer.fit_codebook(corpus, 64, seed=0)
    before = cb.centroids.copy()
    model = _tiny_model(seed=5)
    data = training.tokenize_sessions(sessions, cb, model)
    opt = torch.optim.Adam(model.stage_parameters(2), lr=1e-3)
    for step in range(3):
        training.stage2_step(model, opt, data.history, data.refs, data.target, data.txt, 0.2,
                             training.AblationFlags(), rng(11), step)
    assert np.array_equal(before, cb.centroids)
