import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TINY
from oracles import alignment_loss
from sfda_prompt import data, pipeline
from sfda_prompt.engine import ops
from sfda_prompt.engine.batchnorm import BatchStats, BnLayerState
from sfda_prompt.engine.gradcheck import grad_check
from sfda_prompt.engine.tensor import Tensor
from sfda_prompt.errors import RejectedInputError
from sfda_prompt.evaluation import per_sample_dice
from sfda_prompt.pipeline import (
    FasConfig,
    PlsConfig,
    Prompt,
    PseudoLabelSet,
    SourceConfig,
    apply_prompt,
    fas_losses,
    generate_pseudo_labels,
    predict,
    run_fas,
    run_pls,
    statistic_alignment_loss,
    train_source,
)
from sfda_prompt.segnet import build_model


def stored(means, stds):
    return [BnLayerState(len(m), running_mean=np.array(m, float), running_std=np.array(s, float), dtype=np.float64)
            for m, s in zip(means, stds)]


def batch(means, stds):
    return [BatchStats(Tensor(np.array(m, float)), Tensor(np.array(s, float))) for m, s in zip(means, stds)]


def set_constant_output(model, prob):
    """Zero the head kernel so every pixel gets the same probability."""
    model.head[0].data[...] = 0
    model.head[1].data[...] = math.log(prob / (1 - prob))
    return model


# ------------------------------------------------------- alignment loss

def test_alignment_loss_zero_on_identical_stats():
    m, s = [[0.1, -0.2], [1.0]], [[1.0, 2.0], [0.5]]
    assert statistic_alignment_loss(stored(m, s), batch(m, s), 0.01).data.item() == 0.0


def test_alignment_loss_mean_term():
    loss = statistic_alignment_loss(stored([[0.0]], [[1.0]]), batch([[2.0]], [[1.0]]), 0.01)
    assert abs(loss.data.item() - 2.0) <= 1e-12


def test_alignment_loss_std_term():
    loss = statistic_alignment_loss(stored([[0.0]], [[1.0]]), batch([[0.0]], [[3.0]]), 0.01)
    assert abs(loss.data.item() - 0.02) <= 1e-12


def test_alignment_loss_layer_subset(rng):
    sm, ss = [rng.standard_normal(3) for _ in range(4)], [rng.random(3) + 0.5 for _ in range(4)]
    bm, bs = [rng.standard_normal(3) for _ in range(4)], [rng.random(3) + 0.5 for _ in range(4)]
    got = statistic_alignment_loss(stored(sm, ss), batch(bm, bs), 0.3, layer_count=2).data.item()
    assert abs(got - alignment_loss(sm[:2], ss[:2], bm[:2], bs[:2], 0.3)) <= 1e-12


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 3), st.floats(0.1, 3)),
                min_size=1, max_size=6),
       st.floats(0, 1))
def test_alignment_loss_matches_oracle_and_is_nonnegative(rows, alpha):
    sm, bm, ss, bs = ([[r[i]] for r in rows] for i in range(4))
    got = statistic_alignment_loss(stored(sm, ss), batch(bm, bs), alpha).data.item()
    assert got >= 0
    assert abs(got - alignment_loss(sm, ss, bm, bs, alpha)) <= 1e-12
    if got == 0 and alpha > 0:
        assert sm == bm and ss == bs


def test_alignment_loss_rejects_length_mismatch():
    with pytest.raises(RejectedInputError):
        statistic_alignment_loss(stored([[0.0]], [[1.0]]), [], 0.01)
    with pytest.raises(RejectedInputError):
        statistic_alignment_loss(stored([[0.0]], [[1.0]]), batch([[0.0]], [[1.0]]), 0.01, layer_count=2)


@pytest.mark.parametrize("seed", range(20))
def test_prompt_gradient_through_frozen_model(seed):
    rng = np.random.default_rng(seed)
    model = build_model(TINY, seed=seed, dtype=np.float64).set_trainable(False)
    for bn in model.bns:
        bn.running_mean = rng.standard_normal(bn.channels) * 0.3
        bn.running_std = rng.random(bn.channels) + 0.5
    images = rng.standard_normal((4, 1, 8, 8))

    def loss(p):
        out = model.forward(apply_prompt(images, Prompt(p)), "stat_collect")
        return statistic_alignment_loss(model.bns, out.stats, 0.01)

    # the deep composite has entries ~1e-5; a 1e-5 step keeps rounding below truncation
    assert grad_check(loss, rng.standard_normal((8, 8, 1)) * 0.1, step=1e-5) <= 1e-5


# ----------------------------------------------------------- apply_prompt

def test_zero_prompt_is_bitwise_pass_through(rng):
    x = rng.standard_normal((3, 2, 8, 8)).astype(np.float32)
    out = apply_prompt(x, Prompt.identity((8, 8, 2)))
    assert out.data.tobytes() == x.tobytes()


def test_ones_prompt_mul_is_identity(rng):
    x = rng.standard_normal((2, 1, 8, 8))
    out = apply_prompt(x, Prompt.identity((8, 8, 1), "mul", dtype=np.float64))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("op", ["add", "mul"])
def test_identity_prompt_in_frequency_space(rng, op):
    x = rng.standard_normal((2, 1, 16, 16))
    out = apply_prompt(x, Prompt.identity((16, 16, 1), op, "frequency", dtype=np.float64))
    assert np.abs(out.data - x).max() <= 1e-5


def test_spatial_add_applies_offsets(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    p = rng.standard_normal((4, 5, 3))
    out = apply_prompt(x, Prompt(Tensor(p)))
    np.testing.assert_allclose(out.data, x + p.transpose(2, 0, 1)[None])


def test_prompt_rejects_non_finite_and_mismatch(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    bad = np.zeros((4, 4, 1))
    bad[0, 0, 0] = np.nan
    with pytest.raises(RejectedInputError):
        apply_prompt(x, Prompt(Tensor(bad)))
    with pytest.raises(RejectedInputError):
        apply_prompt(x, Prompt.identity((4, 6, 1)))


@pytest.mark.parametrize("op", ["add", "mul"])
@pytest.mark.parametrize("seed", range(5))
def test_frequency_prompt_gradient(op, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 1, 6, 6))
    r = rng.standard_normal(x.shape)
    base = 1.0 if op == "mul" else 0.0
    p0 = base + rng.standard_normal((6, 6, 1)) * 0.1

    def fn(p):
        return ops.sum_all(ops.mul(apply_prompt(x, Prompt(p, op, "frequency")), r))

    assert grad_check(fn, p0) <= 1e-5


# ------------------------------------------------------------- FAS losses

def test_fas_losses_identical_branches(tiny_model, rng):
    x = rng.standard_normal((2, 1, 8, 8))
    pseudo = (rng.random((2, 2, 8, 8)) > 0.5).astype(np.uint8)
    total, l_seg, l_al = fas_losses(tiny_model, None, x, x, pseudo, 0.1)
    assert l_al.data.item() == 0.0
    assert total.data.item() == l_seg.data.item()


def test_fas_losses_gamma_zero(tiny_model, rng):
    x = rng.standard_normal((2, 1, 8, 8))
    pseudo = (rng.random((2, 2, 8, 8)) > 0.5).astype(np.uint8)
    total, l_seg, l_al = fas_losses(tiny_model, None, x, x[::-1].copy(), pseudo, 0.0)
    assert l_al.data.item() > 0
    assert total.data.item() == l_seg.data.item()


def test_fas_losses_perfect_predictions(tiny_model, rng):
    model = set_constant_output(tiny_model, 1 - 1e-12)
    x = rng.standard_normal((2, 1, 8, 8))
    _, l_seg, _ = fas_losses(model, None, x, x, np.ones((2, 2, 8, 8), np.uint8), 0.1)
    assert l_seg.data.item() <= 2e-6


def test_fas_losses_reject_misaligned(tiny_model):
    with pytest.raises(RejectedInputError):
        fas_losses(tiny_model, None, np.zeros((2, 1, 8, 8)), np.zeros((3, 1, 8, 8)), np.zeros((2, 2, 8, 8)), 0.1)


def test_alignment_gradient_reaches_both_branches(tiny_model, rng):
    x = rng.standard_normal((2, 1, 8, 8))
    xa = x + rng.standard_normal(x.shape)
    p = Prompt(Tensor(np.zeros((8, 8, 1)), requires_grad=True))
    total, _, _ = fas_losses(tiny_model, p, x, xa, np.zeros((2, 2, 8, 8)), 1.0)
    from sfda_prompt.engine.tensor import backward
    backward(total)
    assert np.any(p.offsets.grad != 0)


# ---------------------------------------------------------- pseudo labels

def test_pseudo_labels_confident_output(tiny_model, rng):
    model = set_constant_output(tiny_model, 0.9)
    labels = generate_pseudo_labels(model, None, rng.standard_normal((3, 1, 8, 8)), 0.5)
    assert np.all(labels.masks == 1)


def test_pseudo_labels_tie_goes_to_background(tiny_model, rng):
    model = set_constant_output(tiny_model, 0.5)
    assert model.forward(np.zeros((1, 1, 8, 8))).probs.data.max() == 0.5
    labels = generate_pseudo_labels(model, None, rng.standard_normal((3, 1, 8, 8)), 0.5)
    assert np.all(labels.masks == 0)


def test_pseudo_labels_are_read_only_and_repeatable(tiny_model, rng):
    x = rng.standard_normal((3, 1, 8, 8))
    a = generate_pseudo_labels(tiny_model, None, x)
    b = generate_pseudo_labels(tiny_model, None, x)
    assert a.masks.tobytes() == b.masks.tobytes()
    with pytest.raises(ValueError):
        a.masks[0, 0, 0, 0] = 1


def test_pseudo_label_set_rejects_non_binary():
    with pytest.raises(RejectedInputError):
        PseudoLabelSet(np.full((1, 1, 2, 2), 2))


# ---------------------------------------------------------------- predict

def test_predict_zero_prompt_equals_plain_forward(tiny_model, rng):
    x = rng.standard_normal((2, 1, 8, 8))
    expected = (tiny_model.forward(x, "eval").probs.data > 0.5).astype(np.uint8)
    np.testing.assert_array_equal(predict(tiny_model, Prompt.identity((8, 8, 1), dtype=np.float64), x), expected)
    np.testing.assert_array_equal(predict(tiny_model, None, x[0]), expected[0])


def test_predict_is_deterministic_and_checks_shape(tiny_model, rng):
    x = rng.standard_normal((1, 8, 8))
    assert predict(tiny_model, None, x).tobytes() == predict(tiny_model, None, x).tobytes()
    with pytest.raises(RejectedInputError):
        predict(tiny_model, Prompt.identity((8, 16, 1)), x)


# ------------------------------------------------------- runs on tiny data

def test_run_pls_freezes_model_and_resets_buffers(tiny_model, rng):
    images = rng.standard_normal((6, 1, 8, 8)) + 0.5
    before = tiny_model.to_bytes()
    result = run_pls(tiny_model, images, PlsConfig(epochs=3, batch_size=4, lr0=0.1))
    assert tiny_model.to_bytes() == before
    assert len(result.loss_trace) == 3
    assert result.prompt.shape == (8, 8, 1)
    assert not result.prompt.offsets.requires_grad


def test_run_pls_zero_prompt_matches_no_prompt_statistics(tiny_model, rng):
    images = rng.standard_normal((4, 1, 8, 8))
    cfg = PlsConfig()
    with_zero = pipeline.mean_alignment_loss(tiny_model, images, Prompt.identity((8, 8, 1), dtype=np.float64), cfg)
    without = pipeline.mean_alignment_loss(tiny_model, images, None, cfg)
    assert with_zero == without


def test_run_pls_rejects_empty_dataset(tiny_model):
    with pytest.raises(RejectedInputError):
        run_pls(tiny_model, [], PlsConfig(epochs=1))


def test_run_fas_keeps_prompt_and_source(tiny_model, rng):
    images = rng.standard_normal((6, 1, 8, 8))
    prompt = Prompt(Tensor(rng.standard_normal((8, 8, 1)) * 0.1))
    prompt_bytes, model_bytes = prompt.array().tobytes(), tiny_model.to_bytes()
    pseudo = generate_pseudo_labels(tiny_model, prompt, images)
    result = run_fas(tiny_model, prompt, images, pseudo, FasConfig(epochs=2, batch_size=3))
    assert prompt.array().tobytes() == prompt_bytes
    assert tiny_model.to_bytes() == model_bytes
    assert result.model.to_bytes() != model_bytes


def test_run_fas_rejects_empty_and_mismatched(tiny_model, rng):
    with pytest.raises(RejectedInputError):
        run_fas(tiny_model, None, [], PseudoLabelSet(np.zeros((0, 2, 8, 8))), FasConfig(epochs=1))
    with pytest.raises(RejectedInputError):
        run_fas(tiny_model, None, rng.standard_normal((3, 1, 8, 8)), PseudoLabelSet(np.zeros((2, 2, 8, 8))),
                FasConfig(epochs=1))


def test_train_source_is_deterministic_and_learns(small_source):
    cfg = SourceConfig(epochs=2, base_channels=2, depth=2, batch_size=8)
    a = train_source(small_source, cfg, seed=1)
    b = train_source(small_source, cfg, seed=1)
    assert a.model.to_bytes() == b.model.to_bytes()


def test_train_source_first_epoch_lowers_loss(small_source):
    cfg = SourceConfig(epochs=1, base_channels=2, depth=2, batch_size=8)
    result = train_source(small_source, cfg, seed=1)
    samples = [s for ds in small_source for s in ds]
    after = pipeline.dataset_bce(result.model, data.stack_images(samples), data.stack_masks(samples), 8)
    assert after < result.initial_loss


def test_train_source_rejects_empty():
    with pytest.raises(RejectedInputError):
        train_source([[]], SourceConfig(epochs=1))


def test_trace_csv_blank_cells():
    text = pipeline.trace_to_csv([pipeline.TraceRow("pls", 0, loss_sa=0.5, lr=0.01)])
    assert text.splitlines() == ["stage,epoch,loss_sa,loss_seg,loss_al,lr", "pls,0,0.5,,,0.01"]


@pytest.mark.parametrize("cls,kw", [(PlsConfig, dict(alpha=-1)), (PlsConfig, dict(epochs=0)),
                                    (FasConfig, dict(gamma=-0.1)), (FasConfig, dict(threshold=1.0)),
                                    (PlsConfig, dict(combine_op="sub"))])
def test_stage_config_invariants(cls, kw):
    with pytest.raises(RejectedInputError):
        cls(**kw)


# ------------------------------------------------ fixtures on the desk run

def source_domain_images(desk, n=48):
    return desk.split("source_a", "test")[:n]


def test_zero_shift_prompt_stays_small(desk):
    model, samples = desk.model, source_domain_images(desk)
    result = run_pls(model, samples, PlsConfig(epochs=desk.config.pls.epochs), seed=0)
    assert result.final_loss <= result.initial_loss
    assert np.abs(result.prompt.array()).max() <= 0.05


def test_zero_shift_prompt_barely_changes_predictions(desk):
    model, samples = desk.model, source_domain_images(desk)
    result = run_pls(model, samples, desk.config.pls, seed=0)
    assert result.final_loss <= result.initial_loss
    assert np.abs(result.prompt.array()).mean() <= 0.05
    images = data.stack_images(samples)
    agree = (predict(model, result.prompt, images) == predict(model, None, images)).mean()
    assert agree >= 0.99


def test_zero_shift_pseudo_labels_are_accurate(desk):
    samples = source_domain_images(desk)
    pseudo = generate_pseudo_labels(desk.model, None, samples)
    gt = data.stack_masks(samples).astype(np.uint8)
    assert per_sample_dice(pseudo.masks, gt).mean() >= 0.95


def test_fas_loss_decreases_with_true_labels():
    # a briefly trained source model, so there is still loss left to remove
    sources = [data.gen_domain(data.DOMAIN_PRESETS[name], 24, (16, 16, 1), seed=k)
               for k, name in enumerate(("source_a", "source_b"))]
    source = train_source(sources, SourceConfig(epochs=2, base_channels=4, batch_size=8), seed=0).model
    samples = data.gen_domain(data.DOMAIN_PRESETS["source_a"], 32, (16, 16, 1), seed=40)
    pseudo = PseudoLabelSet(data.stack_masks(samples))
    result = run_fas(source, None, samples, pseudo, FasConfig(gamma=0.0, augment=False, epochs=5), seed=0)
    seg = [row.loss_seg for row in result.rows]
    assert all(b < a for a, b in zip(seg, seg[1:])), seg
