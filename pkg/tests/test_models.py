import numpy as np
import pytest

from kgdecomp import autodiff as ad
from kgdecomp.autodiff import Tensor, grad_check
from kgdecomp.errors import ConfigError, DataError
from kgdecomp.models import (
    KGEModel,
    ModelConfig,
    count_parameters,
    object_query,
    parameter_shapes,
    subject_query,
    triple_scores,
)

FB_ENTITIES, FB_RELATIONS = 14541, 237


def cfg(scorer="distmult", d=6, ent=None, rel=None, d_r=None, **kw):
    return ModelConfig(scorer=scorer, d_e=d, d_r=d_r, entity_decom=ent or {}, relation_decom=rel or {}, **kw)


CONFIGS = [
    cfg("distmult"),
    cfg("complex"),
    cfg("rescal"),
    cfg("distmult", ent={"kind": "fc", "out_dim": 9}, rel={"kind": "fc", "out_dim": 9}),
    cfg("distmult", ent={"kind": "conv", "out_dim": 12, "conv_channels": 2, "conv_ksize": 3},
        rel={"kind": "conv", "out_dim": 12, "conv_channels": 2, "conv_ksize": 4, "conv_bias": False}),
    cfg("complex", ent={"kind": "fc", "out_dim": 8, "use_batchnorm": False}, d_r=8),
    cfg("complex", ent={"kind": "conv", "out_dim": 18, "conv_channels": 3}, d_r=18),
    cfg("rescal", ent={"kind": "fc", "out_dim": 5}, rel={"kind": "fc", "out_dim": 5}, d_r=4),
    cfg("rescal", ent={"kind": "conv", "out_dim": 12, "conv_channels": 2}, d_r=12),
    cfg("distmult", ent={"kind": "fc", "out_dim": 9, "post_l2_normalize": True, "dropout_rate": 0.2}, d_r=9),
]


@pytest.mark.parametrize("scorer,d,expected", [
    ("distmult", 100, 1_501_900),
    ("distmult", 400, 6_007_600),
    ("rescal", 100, 6_214_300),
    ("rescal", 400, 81_977_200),
    ("complex", 100, 3_003_800),
    ("complex", 400, 12_015_200),
])
def test_baseline_counts_on_fb15k237_sizes(scorer, d, expected):
    assert count_parameters(cfg(scorer, d), FB_ENTITIES, FB_RELATIONS) == expected


def test_count_formula_distmult():
    n_e, n_r, d = 37, 5, 11
    assert count_parameters(cfg("distmult", d), n_e, n_r) == (n_e + 2) * d + (2 * n_r + 2) * d


@pytest.mark.parametrize("config", CONFIGS, ids=range(len(CONFIGS)))
def test_count_matches_instantiated_registry(config):
    model = KGEModel(config, 13, 3)
    assert count_parameters(config, 13, 3) == model.num_parameters()
    assert [(n, t.shape) for n, t in model.named_parameters()] == parameter_shapes(config, 13, 3)


@pytest.mark.parametrize("config", CONFIGS, ids=range(len(CONFIGS)))
def test_score_all_agrees_with_pointwise(config):
    model = KGEModel(config, 13, 3)
    s, r, o = np.array([0, 4, 12, 7]), np.array([0, 5, 2, 3]), np.array([3, 4, 1, 12])
    direct = model.score(s, r, o).data
    np.testing.assert_allclose(model.score_all_objects(s, r).data[np.arange(4), o], direct, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(model.score_all_subjects(r, o).data[np.arange(4), s], direct, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("config", CONFIGS, ids=range(len(CONFIGS)))
def test_inference_is_deterministic(config):
    model = KGEModel(config, 13, 3)
    a = model.score_all_objects([1, 2], [0, 1]).data
    b = model.score_all_objects([1, 2], [0, 1]).data
    np.testing.assert_array_equal(a, b)


def test_same_seed_same_init_different_seed_differs():
    a, b = KGEModel(CONFIGS[3], 10, 2), KGEModel(CONFIGS[3], 10, 2)
    c = KGEModel(ModelConfig(**{**CONFIGS[3].to_dict(), "seed": 1}), 10, 2)
    for (_, x), (_, y), (_, z) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        np.testing.assert_array_equal(x.data, y.data)
    assert not np.array_equal(a.entity_table.data, c.entity_table.data)


def test_decompressed_widths():
    m = KGEModel(CONFIGS[4], 13, 3)
    assert m.entity_repr([0, 1]).shape == (2, 12)
    m = KGEModel(CONFIGS[6], 13, 3)
    assert m.entity_repr([0]).shape == (1, 36)
    m = KGEModel(CONFIGS[7], 13, 3)
    assert m.relation_repr([0, 1, 2]).shape == (3, 5, 5)
    assert KGEModel(cfg("rescal"), 5, 1).relation_repr([0]).shape == (1, 6, 6)


def test_conv_identity_kernel_reproduces_input_channel_major():
    config = cfg("distmult", ent={"kind": "conv", "out_dim": 12, "conv_channels": 2, "conv_ksize": 1,
                                  "use_batchnorm": False}, d_r=12)
    m = KGEModel(config, 4, 1)
    m.entity_decom.params["kernels"].data[:] = np.array([[[1.0]], [[2.0]]])
    m.entity_decom.params["bias"].data[:] = 0.0
    rows = m.entity_table.data[:4]
    np.testing.assert_array_equal(m.entity_repr(np.arange(4)).data, np.hstack([rows, 2 * rows]))


def test_complex_conv_keeps_real_and_imaginary_separate():
    config = cfg("complex", d=3, ent={"kind": "conv", "out_dim": 3, "conv_channels": 1, "conv_ksize": 3,
                                       "use_batchnorm": False}, d_r=3)
    m = KGEModel(config, 2, 1)
    m.entity_decom.params["kernels"].data[:] = [[[1.0, 1.0, 1.0]]]
    m.entity_decom.params["bias"].data[:] = 0.0
    m.entity_table.data[0] = [1.0, 1.0, 1.0, 10.0, 10.0, 10.0]
    np.testing.assert_array_equal(m.entity_repr([0]).data[0], [2.0, 3.0, 2.0, 20.0, 30.0, 20.0])


def test_post_l2_normalize_gives_unit_rows():
    m = KGEModel(CONFIGS[9], 13, 3)
    np.testing.assert_allclose(np.linalg.norm(m.all_entities().data, axis=1), 1.0, rtol=1e-12)


# -- scorer algebra ----------------------------------------------------------


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


def test_distmult_symmetric_bit_exact():
    rng = np.random.default_rng(0)
    es, rel, eo = _rand(rng, 50, 8), _rand(rng, 50, 8), _rand(rng, 50, 8)
    np.testing.assert_array_equal(triple_scores("distmult", es, rel, eo).data,
                                  triple_scores("distmult", eo, rel, es).data)


def test_distmult_hand_example():
    out = triple_scores("distmult", Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]]), Tensor([[5.0, 6.0]]))
    assert out.data[0] == 1 * 3 * 5 + 2 * 4 * 6


def test_complex_reduces_to_distmult_on_real_rows():
    rng = np.random.default_rng(1)
    d = 5
    es, rel, eo = (np.hstack([rng.normal(size=(7, d)), np.zeros((7, d))]) for _ in range(3))
    got = triple_scores("complex", Tensor(es), Tensor(rel), Tensor(eo)).data
    ref = np.sum(es[:, :d] * rel[:, :d] * eo[:, :d], axis=1)
    np.testing.assert_allclose(got, ref, rtol=1e-13)


def test_complex_matches_numpy_complex_arithmetic():
    rng = np.random.default_rng(2)
    d = 4
    es, rel, eo = (rng.normal(size=(6, 2 * d)) for _ in range(3))
    c = [x[:, :d] + 1j * x[:, d:] for x in (es, rel, eo)]
    ref = np.real(np.sum(c[0] * c[1] * np.conj(c[2]), axis=1))
    np.testing.assert_allclose(triple_scores("complex", Tensor(es), Tensor(rel), Tensor(eo)).data, ref, rtol=1e-12)


def test_complex_antisymmetric_for_imaginary_relation():
    rng = np.random.default_rng(3)
    d = 4
    es, eo = rng.normal(size=(6, 2 * d)), rng.normal(size=(6, 2 * d))
    rel = np.hstack([np.zeros((6, d)), rng.normal(size=(6, d))])
    a = triple_scores("complex", Tensor(es), Tensor(rel), Tensor(eo)).data
    b = triple_scores("complex", Tensor(eo), Tensor(rel), Tensor(es)).data
    np.testing.assert_allclose(a, -b, rtol=1e-12, atol=1e-14)


def test_rescal_diagonal_equals_distmult():
    rng = np.random.default_rng(4)
    es, eo, diag = rng.normal(size=(5, 6)), rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    mats = np.stack([np.diag(row) for row in diag])
    got = triple_scores("rescal", Tensor(es), Tensor(mats), Tensor(eo)).data
    np.testing.assert_allclose(got, np.sum(es * diag * eo, axis=1), rtol=1e-12)


def test_rescal_bilinear_form():
    rng = np.random.default_rng(5)
    es, eo, W = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4, 4))
    ref = np.array([es[i] @ W[i] @ eo[i] for i in range(3)])
    np.testing.assert_allclose(triple_scores("rescal", Tensor(es), Tensor(W), Tensor(eo)).data, ref, rtol=1e-12)


@pytest.mark.parametrize("scorer", ["distmult", "complex", "rescal"])
def test_query_vectors_agree(scorer):
    rng = np.random.default_rng(6)
    es, eo = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    rel = rng.normal(size=(4, 6, 6) if scorer == "rescal" else (4, 6))
    via_o = np.sum(object_query(scorer, Tensor(es), Tensor(rel)).data * eo, axis=1)
    via_s = np.sum(es * subject_query(scorer, Tensor(rel), Tensor(eo)).data, axis=1)
    np.testing.assert_allclose(via_o, via_s, rtol=1e-12)


@pytest.mark.parametrize("config", [CONFIGS[4], CONFIGS[6], CONFIGS[7], CONFIGS[9]], ids=["conv", "cx", "rescal", "l2"])
def test_model_gradient_through_decompression(config):
    config = ModelConfig(**{**config.to_dict(), "entity_decom": {**config.entity_decom.__dict__, "dropout_rate": 0.0}})
    model = KGEModel(config, 6, 2)
    s, r, o = np.array([0, 1, 2, 5]), np.array([0, 1, 2, 3]), np.array([3, 4, 5, 0])
    # a bias feeding batch norm is cancelled by the mean subtraction: its true
    # gradient is exactly zero, so finite differences there are pure noise
    cancelled = {n for n, _ in model.named_parameters()
                 if n.endswith(".bias") and f"{n[:-5]}.bn.gamma" in dict(model.named_parameters())}
    checked = [t for n, t in model.named_parameters() if n not in cancelled]

    def f(*_):
        return ad.sum(model.score(s, r, o, training=True))

    assert grad_check(f, checked).max_rel_error < 1e-5
    model.zero_grad()
    for t in model.parameters():
        t.requires_grad = True
    f().backward()
    for name, t in model.named_parameters():
        if name in cancelled:
            assert np.abs(t.grad).max() < 1e-12, name


def test_state_dict_round_trip_and_key_check():
    a, b = KGEModel(CONFIGS[3], 10, 2), KGEModel(ModelConfig(**{**CONFIGS[3].to_dict(), "seed": 9}), 10, 2)
    a.score([0, 1], [0, 1], [2, 3], training=True)
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.score_all_objects([0], [1]).data, b.score_all_objects([0], [1]).data)
    state = a.state_dict()
    state.pop("entity_table")
    with pytest.raises(DataError):
        b.load_state_dict(state)


def test_range_checks():
    m = KGEModel(cfg(), 5, 2)
    with pytest.raises(DataError):
        m.score([5], [0], [0])
    with pytest.raises(DataError):
        m.score([0], [4], [0])
    m.score([0], [3], [0])  # reciprocal rows are addressable


@pytest.mark.parametrize("bad", [
    dict(scorer="transe"),
    dict(d_e=0),
    dict(entity_decom={"kind": "conv", "out_dim": 7, "conv_channels": 2}),
    dict(scorer="rescal", relation_decom={"kind": "conv", "out_dim": 12, "conv_channels": 2}),
    dict(relation_decom={"kind": "fc", "out_dim": 9, "post_l2_normalize": True}),
    dict(entity_decom={"kind": "fc", "out_dim": 9}),
    dict(entity_decom={"kind": "mlp", "out_dim": 9}),
    dict(entity_decom={"kind": "fc", "out_dim": 6, "dropout_rate": 1.0}),
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        KGEModel(ModelConfig(**{"d_e": 6, **bad}), 4, 1)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"scorer": "distmult", "dim": 3})
    with pytest.raises(ConfigError):
        ModelConfig(entity_decom={"kind": "fc", "width": 3})
