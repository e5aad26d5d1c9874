import math

import numpy as np
import pytest

from gela import difftensor as dt
from gela.errors import LengthError, ShapeError
from gela.gradsuite import SMALL
from gela.model import (
    N_SLOTS,
    STOP_SLOT,
    Instruction,
    ModelConfig,
    NavModel,
    Panorama,
    orientation_features,
    param_shapes,
)

CFG = ModelConfig(d_model=16, n_heads=2, ffn_hidden=24, n_layers_text=1, n_layers_cross=2, max_instruction_len=8, max_history=6)


@pytest.fixture(scope="module")
def model():
    return NavModel(CFG)


def _pano(seed, cfg=CFG):
    return Panorama(np.random.default_rng(seed).normal(size=(36, cfg.view_feature_dim)))


def _instr(words=(10, 11, 12), cfg=CFG):
    return Instruction.from_words(list(words), cfg.max_instruction_len)


def _history(n, seed=0):
    return [(_pano(seed + 10 * i), (0.5 * i, 0.0)) for i in range(n)]


def test_config_rejects_bad_head_split():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(max_instruction_len=0)


def test_init_is_seeded_and_matches_shapes():
    a, b, c = NavModel(CFG), NavModel(CFG), NavModel(ModelConfig(**{**CFG.__dict__, "seed": 1}))
    assert set(a.params) == set(param_shapes(CFG))
    assert all(a.params[k].shape == s for k, s in param_shapes(CFG).items())
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_uniform_init_bounded_by_fan_in():
    m = NavModel(CFG)
    w = m.params["text.l0.ff1.w"].data
    assert np.abs(w).max() <= 1 / math.sqrt(w.shape[0])


# instruction encoder -----------------------------------------------------------------------

def test_instruction_shape_and_determinism(model):
    a = model.encode_instruction(_instr())
    b = model.encode_instruction(_instr())
    assert a.shape == (CFG.text_len, CFG.d_model)
    assert np.array_equal(a.data, b.data)


def test_instruction_is_position_sensitive(model):
    a = model.encode_instruction(_instr((10, 11, 12)))
    b = model.encode_instruction(_instr((11, 10, 12)))
    assert not np.allclose(a.data, b.data)


def test_empty_instruction_gives_one_row(model):
    out = model.encode_instruction(Instruction.from_words([]))
    assert out.shape == (1, CFG.d_model)


def test_over_length_instruction_rejected(model):
    with pytest.raises(LengthError):
        Instruction.from_words(list(range(4, 14)), CFG.max_instruction_len)
    with pytest.raises(LengthError):
        model.encode_instruction(Instruction([1] + [5] * 12))


def test_token_out_of_vocab_rejected(model):
    with pytest.raises(ShapeError):
        model.encode_instruction(Instruction([1, CFG.vocab_size]))


def test_padding_does_not_change_real_rows(model):
    short = Instruction.from_words([10, 11])
    padded = _instr((10, 11))
    np.testing.assert_allclose(model.encode_instruction(short).data, model.encode_instruction(padded).data[:3], atol=1e-12)


# observation encoder -----------------------------------------------------------------------

def test_orientation_features_at_zero():
    np.testing.assert_array_equal(orientation_features(0.0, 0.0)[:2], [0.0, 1.0])


def test_observation_has_stop_row(model):
    assert model.encode_observation(_pano(0)).shape == (N_SLOTS, CFG.d_model)


def test_observation_is_row_local(model):
    p = _pano(0)
    q = Panorama(p.features.copy())
    q.features[7] += 1.0
    diff = np.abs(model.encode_observation(p).data - model.encode_observation(q).data).max(axis=1)
    assert diff[7] > 0
    assert np.all(np.delete(diff, 7) == 0)


def test_wrong_view_count_rejected(model):
    with pytest.raises(ShapeError):
        Panorama(np.zeros((35, CFG.view_feature_dim)))
    with pytest.raises(ShapeError):
        model.encode_observation(Panorama(np.zeros((36, CFG.view_feature_dim + 1))))


# history encoder ---------------------------------------------------------------------------

def test_empty_history_is_the_global_slot(model):
    assert model.encode_history([]).shape == (1, CFG.d_model)


def test_history_is_order_sensitive_and_deterministic(model):
    h = _history(3)
    a = model.encode_history(h).data
    assert np.array_equal(a, model.encode_history(h).data)
    swapped = [h[1], h[0], h[2]]
    assert not np.allclose(a, model.encode_history(swapped).data)
    assert a.shape == (4, CFG.d_model)


def test_history_over_limit_rejected(model):
    with pytest.raises(LengthError):
        model.encode_history(_history(CFG.max_history + 1))


# cross-modal ---------------------------------------------------------------------------------

def test_zero_cross_layers_is_identity():
    cfg = ModelConfig(**{**CFG.__dict__, "n_layers_cross": 0})
    m = NavModel(cfg)
    instr, hist, pano = _instr(), _history(2), _pano(3)
    t, h, o = m.encode_instruction(instr), m.encode_history(hist), m.encode_observation(pano)
    out = m.cross_modal_encode(t, instr.mask, h, o)
    assert np.array_equal(out.Z.data, t.data)
    assert np.array_equal(out.Y.data, h.data)
    assert np.array_equal(out.S.data, o.data)


def test_output_shapes_and_row_stochastic_attention(model):
    out = model.forward(_instr(), _history(2), _pano(1))
    assert out.Z.shape == (CFG.text_len, CFG.d_model)
    assert out.Y.shape == (3, CFG.d_model)
    assert out.S.shape == (N_SLOTS, CFG.d_model)
    np.testing.assert_allclose(out.text_to_visual.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(out.visual_to_text.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(out.text_to_panorama().sum(axis=1), 1.0, atol=1e-9)


def test_padded_tokens_get_exactly_zero_attention(model):
    instr = _instr((10, 11))
    out = model.forward(instr, [], _pano(1))
    pad = np.flatnonzero(np.asarray(instr.mask) == 0)
    assert np.all(out.visual_to_text[:, :, pad] == 0.0)


def test_batched_forward_matches_single(model):
    rng = np.random.default_rng(0)
    instrs = [_instr(rng.integers(4, 200, size=n)) for n in (2, 5, 8)] + [Instruction.from_words([7, 8])]
    hists = [_history(n, seed=n) for n in (0, 3, 1, 2)]
    panos = [_pano(s) for s in range(4)]
    batched = model.forward_batch(instrs, hists, panos)
    for i in range(4):
        single = model.forward(instrs[i], hists[i], panos[i])
        for name in ("Z", "Y", "S"):
            np.testing.assert_allclose(getattr(batched[i], name).data, getattr(single, name).data, atol=1e-10)
        np.testing.assert_allclose(batched[i].text_to_panorama(), single.text_to_panorama(), atol=1e-10)


def test_batched_gradient_matches_sum_of_singles():
    m = NavModel(CFG)
    instrs, hists, panos = [_instr(), _instr((20, 21))], [_history(1), _history(3)], [_pano(0), _pano(1)]
    outs = m.forward_batch(instrs, hists, panos)
    dt.backward(dt.sum(outs[0].S) + dt.sum(outs[1].Z))
    batched = {k: p.grad.copy() for k, p in m.params.items() if p.grad is not None}
    m.zero_grad()
    dt.backward(dt.sum(m.forward(instrs[0], hists[0], panos[0]).S))
    dt.backward(dt.sum(m.forward(instrs[1], hists[1], panos[1]).Z))
    for k, g in batched.items():
        np.testing.assert_allclose(g, m.params[k].grad, atol=1e-10)


# action head ----------------------------------------------------------------------------------

def test_zeroed_head_is_uniform_over_candidates():
    m = NavModel(CFG)
    for k in ("head.sap.2.w", "head.sap.2.b"):
        m.params[k].data[...] = 0.0
    out = m.forward(_instr(), [], _pano(0))
    p = m.predict_action(out.S, out.Z, [3, 7, 20]).data
    np.testing.assert_allclose(p[[3, 7, 20, STOP_SLOT]], 0.25, atol=1e-15)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_single_candidate_gives_binary_distribution(model):
    out = model.forward(_instr(), [], _pano(0))
    p = model.predict_action(out.S, out.Z, [5]).data
    assert np.count_nonzero(p) == 2
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    mask = np.ones(N_SLOTS, dtype=bool)
    mask[[5, STOP_SLOT]] = False
    assert np.all(p[mask] == 0.0)


def test_action_log_prob_gradient_on_tiny_instance():
    m = NavModel(SMALL)
    instr = Instruction.from_words([5, 6, 7], SMALL.max_instruction_len)
    hist = [(_pano(1, SMALL), (0.3, 0.0))]
    pano = _pano(2, SMALL)

    def f(_):
        out = m.forward(instr, hist, pano)
        return m.action_log_probs(out.S, out.Z, [1, 4])[4]

    params = [m.params[k] for k in sorted(m.params) if not k.startswith("head.") or k.startswith("head.sap")]
    report = dt.grad_check(f, params, tol=1e-4, max_coords=2, rng=np.random.default_rng(0))
    assert report.passed, report
