import numpy as np
import pytest

from dcsreid import tensor as T
from dcsreid.exceptions import CheckpointError, ParameterError
from dcsreid.model import ModelSpec, Network, StageSpec, count_parameters, layer_norm


def counting_oracle(spec: ModelSpec) -> int:
    """Parameter count from first principles, one layer at a time."""
    widths = [spec.in_channels] + [s.width for s in spec.stages]
    n = sum(a * b + b for a, b in zip(widths, widths[1:]))
    if spec.attention_mode == "dcs":
        attn_widths = ([spec.in_channels] if spec.input_attention else []) + \
                      [s.width for s in spec.stages if s.attention]
        n += sum(c * (c + 1) for c in attn_widths)
    pooled = widths[-1] * (spec.tokens if spec.pool == "flatten" else 1)
    return n + (pooled + 1) * spec.embed_dim + (spec.embed_dim + 1) * spec.num_classes


SPECS = [
    ModelSpec(4, 8, 10),
    ModelSpec(4, 8, 10, stages=[StageSpec(16), StageSpec(8, attention=False)]),
    ModelSpec(6, 3, 5, embed_dim=7, pool="mean", stages=[StageSpec(4)]),
    ModelSpec(3, 5, 4, attention_mode="vanilla", stages=[StageSpec(6)]),
    ModelSpec(3, 5, 4, attention_mode="none", input_attention=False),
]


@pytest.mark.parametrize("spec", SPECS)
def test_parameter_count(spec):
    net = Network(spec, np.random.default_rng(0))
    assert count_parameters(spec) == net.num_parameters() == counting_oracle(spec)


@pytest.mark.parametrize("spec", SPECS)
def test_forward_shapes(spec):
    net = Network(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, spec.tokens * spec.in_channels))
    f, logits = net.forward(x, tau=2.0, rng=np.random.default_rng(2))
    assert f.shape == (5, spec.embed_dim) and logits.shape == (5, spec.num_classes)


def test_inference_bitwise_repeatable():
    spec = ModelSpec(4, 8, 10, stages=[StageSpec(8)])
    net = Network(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(6, 32))
    outs = [net.embed(x).tobytes() for _ in range(10)]
    assert len(set(outs)) == 1


def test_training_mode_is_stochastic():
    net = Network(ModelSpec(4, 8, 10), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(6, 32))
    rng = np.random.default_rng(5)
    a = net.forward(x, 5.0, rng)[0].data
    b = net.forward(x, 5.0, rng)[0].data
    assert not np.array_equal(a, b)


def test_hard_masks_binary():
    net = Network(ModelSpec(4, 8, 10, stages=[StageSpec(6)]), np.random.default_rng(0))
    masks = net.hard_masks(np.random.default_rng(1).normal(size=(7, 32)))
    assert set(masks) == {"attn_in", "attn_0"}
    assert masks["attn_in"].shape == (7, 4, 8) and masks["attn_0"].shape == (7, 4, 6)
    for m in masks.values():
        assert set(np.unique(m)) <= {0.0, 1.0}


def test_layer_norm_gradient():
    x = np.random.default_rng(3).normal(size=(2, 3, 5))
    r = np.random.default_rng(4).normal(size=(2, 3, 5))
    analytic = T.grad_of(lambda t: (layer_norm(t) * r).sum(), x)[0]
    numeric = T.fd_gradient_oracle(lambda v: float((layer_norm(T.Tensor(v)).data * r).sum()), x)
    assert T.relative_error(analytic, numeric) < 1e-6


def test_layer_norm_standardises():
    z = layer_norm(T.Tensor(np.random.default_rng(0).normal(3.0, 2.0, (4, 9)))).data
    np.testing.assert_allclose(z.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(-1), 1, atol=1e-5)


def test_state_dict_round_trip():
    spec = ModelSpec(4, 8, 10, stages=[StageSpec(8)])
    a, b = Network(spec, np.random.default_rng(0)), Network(spec, np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(2).normal(size=(3, 32))
    assert a.embed(x).tobytes() == b.embed(x).tobytes()


def test_state_dict_mismatch():
    a = Network(ModelSpec(4, 8, 10), np.random.default_rng(0))
    state = a.state_dict()
    state.pop("embed.b")
    with pytest.raises(CheckpointError):
        a.load_state_dict(state)
    state = a.state_dict()
    state["embed.b"] = np.zeros(3)
    with pytest.raises(CheckpointError):
        a.load_state_dict(state)


def test_spec_round_trip_and_validation():
    spec = ModelSpec(4, 8, 10, stages=[StageSpec(16, False)], pool="mean")
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ParameterError):
        ModelSpec(4, 8, 10, attention_mode="bogus")
    with pytest.raises(ParameterError):
        ModelSpec(4, 8, 10, pool="max")
