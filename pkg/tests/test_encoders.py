import numpy as np
import pytest

from lrvq import tensor as T
from lrvq.config import ModelConfig
from lrvq.encoders import ContextEncoder, Decoder, FutureEncoder
from lrvq.model import VQVAE
from lrvq.tensor import Tensor

from conftest import tiny_config

CFG = ModelConfig(d_model=8, heads=2, depth=2, ff_width=16, dtype="float64")


def test_context_encoder_shapes_single_agent(rng):
    enc = ContextEncoder(CFG, 4, rng)
    out = enc(rng.normal(size=(2, 1, 4, 2)), np.ones((2, 1), bool))
    assert out.shape == (2, 1, 4, 8)


def test_agent_permutation_equivariance(rng):
    enc = ContextEncoder(CFG, 4, rng)
    fut = FutureEncoder(CFG, 5, 8, rng)
    dec = Decoder(CFG, 5, 8, rng)
    past = rng.normal(size=(1, 4, 4, 2))
    future = rng.normal(size=(1, 4, 5, 2))
    mask = np.array([[True, True, True, False]])
    perm = np.array([2, 0, 1, 3])
    h = enc(past, mask)
    hp = enc(past[:, perm], mask[:, perm])
    np.testing.assert_allclose(hp.data, h.data[:, perm], atol=1e-6)
    z = fut(future, h, mask)
    zp = fut(future[:, perm], hp, mask[:, perm])
    np.testing.assert_allclose(zp.data, z.data[:, perm], atol=1e-6)
    y = dec(z, mask)
    yp = dec(Tensor(z.data[:, perm]), mask[:, perm])
    np.testing.assert_allclose(yp.data, y.data[:, perm], atol=1e-6)


def test_padded_agents_do_not_influence_real_ones(rng):
    enc = ContextEncoder(CFG, 4, rng)
    past = rng.normal(size=(1, 3, 4, 2))
    mask = np.array([[True, True, False]])
    a = enc(past, mask).data
    past[0, 2] += 50.0
    b = enc(past, mask).data
    np.testing.assert_allclose(a[0, :2], b[0, :2], atol=1e-12)


def test_without_social_blocks_agents_are_independent(rng):
    cfg = ModelConfig(d_model=8, heads=2, depth=2, ff_width=16, dtype="float64", social=False)
    enc = ContextEncoder(cfg, 4, rng)
    past = rng.normal(size=(1, 2, 4, 2))
    alone = enc(past[:, :1], np.ones((1, 1), bool)).data
    # duplicate agent 0 as a new agent: agent 0's features must not change
    dup = np.concatenate([past[:, :1], past[:, :1], past[:, 1:]], axis=1)
    together = enc(dup, np.ones((1, 3), bool)).data
    np.testing.assert_allclose(together[:, :1], alone, atol=1e-12)


def test_social_blocks_do_mix_agents(rng):
    enc = ContextEncoder(CFG, 4, rng)
    past = rng.normal(size=(1, 2, 4, 2))
    alone = enc(past[:, :1], np.ones((1, 1), bool)).data
    together = enc(past, np.ones((1, 2), bool)).data
    assert not np.allclose(together[:, :1], alone)


def test_temporal_order_matters(rng):
    enc = ContextEncoder(CFG, 4, rng)
    past = rng.normal(size=(1, 1, 4, 2))
    a = enc(past, np.ones((1, 1), bool)).data
    b = enc(past[:, :, ::-1].copy(), np.ones((1, 1), bool)).data
    assert not np.allclose(a, b[:, :, ::-1])


def test_future_encoder_uses_context_only_through_cross_attention(rng):
    fut = FutureEncoder(CFG, 5, 8, rng)
    future = rng.normal(size=(1, 2, 5, 2))
    mask = np.ones((1, 2), bool)
    h1, h2 = Tensor(rng.normal(size=(1, 2, 4, 8))), Tensor(rng.normal(size=(1, 2, 4, 8)))
    assert not np.allclose(fut(future, h1, mask).data, fut(future, h2, mask).data)
    for block in fut.blocks.cross:
        block.attn.out.weight.data[:] = 0.0
        block.attn.out.bias.data[:] = 0.0
    np.testing.assert_array_equal(fut(future, h1, mask).data, fut(future, h2, mask).data)


def test_decoder_is_deterministic(rng):
    dec = Decoder(CFG, 5, 8, rng)
    z = Tensor(rng.normal(size=(2, 3, 5, 8)))
    mask = np.ones((2, 3), bool)
    np.testing.assert_array_equal(dec(z, mask).data, dec(z, mask).data)
    assert dec(z, mask).shape == (2, 3, 5, 2)


def test_reconstruction_gradient_reaches_every_network(rng):
    model = VQVAE(tiny_config(), rng)
    out = model(rng.normal(size=(2, 3, 4, 2)), rng.normal(size=(2, 3, 5, 2)), np.ones((2, 3), bool), 1.0)
    T.backward(out.loss.reconstruction)
    for prefix in ("context_encoder", "future_encoder", "decoder"):
        grads = [p.grad for n, p in model.named_parameters() if n.startswith(prefix) and p.grad is not None]
        assert grads and sum(float(np.abs(g).sum()) for g in grads) > 0, prefix
