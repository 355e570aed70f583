import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from modblend import dmbn, simgen
from modblend import numcore as nc
from modblend.dmbn import BlendWeights, DMBN, ModalitySpec, ModelSpec, TrainConfig
from modblend.seeding import stream


def tiny_spec(seed=0, variance="learned"):
    return ModelSpec((ModalitySpec("image", (3, 4, 4), (2,), (2,), (), variance),
                      ModalitySpec("joint", (2,), (8, 4), (3,))), d_latent=4, seed=seed)


def tiny_interactions(n=2, T=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        times = (np.arange(T) / (T - 1)).astype(np.float32)
        states = {"image": rng.uniform(0, 1, (T, 3, 4, 4)).astype(np.float32),
                  "joint": np.stack([np.sin(times * (i + 1)), np.cos(times)], axis=1).astype(np.float32)}
        out.append(simgen.Interaction("push", 0.0, times, states))
    return out


def vec(*xs):
    return torch.tensor(xs, dtype=torch.get_default_dtype())


# --- specs --------------------------------------------------------------------

def test_desk_spec_layout():
    spec = dmbn.desk_spec()
    assert spec.names == ["image", "joint"]
    assert spec.d_latent == 64
    model = DMBN(spec)
    assert model.decoders["joint"].fc0_w.shape[0] == spec.d_latent + 1
    assert model.encoders["joint"].fc0_w.shape[0] == 1 + 3
    assert model.encoders["image"].conv0_w.shape[1] == 3 + 1


def test_paper_scale_decoder_widths():
    spec = dmbn.paper_spec()
    assert spec.d_latent == 128
    assert dmbn.joint_spec(7, "paper").decoder[-1] == 32


def test_joint_head_splits_mean_and_std():
    model = DMBN(tiny_spec())
    assert model.decoders["joint"].out_w.shape[1] == 2 * 2
    assert model.decoders["image"].out_w.shape[0] == 2 * 3
    fixed = DMBN(tiny_spec(variance="fixed-unit"))
    assert fixed.decoders["image"].out_w.shape[0] == 3


def test_spec_json_round_trip():
    spec = tiny_spec(seed=5)
    assert ModelSpec.from_json(spec.to_json()) == spec


def test_spec_rejects_duplicates_and_bad_variance():
    m = tiny_spec().modalities[1]
    with pytest.raises(ValueError):
        ModelSpec((m, m))
    with pytest.raises(ValueError):
        ModalitySpec("joint", (2,), (4,), (3,), variance="whatever")


def test_init_is_seeded():
    a, b, c = DMBN(tiny_spec(1)), DMBN(tiny_spec(1)), DMBN(tiny_spec(2))
    for (n, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(p, q), n
    assert any(not torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))


# --- encode / decode ----------------------------------------------------------

def test_encode_shapes_and_time_dependence():
    model = DMBN(tiny_spec())
    x = torch.rand(1, 3, 4, 4)
    za = model.encode("image", vec(0.1), x)
    zb = model.encode("image", vec(0.9), x)
    assert za.shape == (1, 4)
    assert not torch.equal(za, zb)
    ja = model.encode("joint", vec(0.1), vec(0.5, -0.5).reshape(1, 2))
    jb = model.encode("joint", vec(0.9), vec(0.5, -0.5).reshape(1, 2))
    assert not torch.equal(ja, jb)


def test_encode_shape_error():
    model = DMBN(tiny_spec())
    with pytest.raises(nc.ShapeError, match="encode"):
        model.encode("joint", vec(0.1), torch.zeros(1, 3))


def test_decode_ranges():
    model = DMBN(tiny_spec())
    r = torch.randn(5, 4)
    mean, std = model.decode("image", r, torch.linspace(0, 1, 5))
    assert mean.shape == (5, 3, 4, 4)
    assert ((mean > 0) & (mean < 1)).all()
    assert (std >= 0.01).all()
    jm, js = model.decode("joint", r, torch.linspace(0, 1, 5))
    assert jm.shape == js.shape == (5, 2)
    assert (js >= 0.01).all()


def test_fixed_unit_std_is_one():
    model = DMBN(tiny_spec(variance="fixed-unit"))
    _, std = model.decode("image", torch.randn(2, 4), vec(0.0, 1.0))
    assert (std == 1).all()


@pytest.mark.parametrize("t", [-0.1, 1.5])
def test_decode_rejects_out_of_range_time(t):
    with pytest.raises(ValueError):
        DMBN(tiny_spec()).decode("joint", torch.randn(1, 4), vec(t))


# --- aggregation and blending -------------------------------------------------

def test_aggregate_rejects_empty():
    with pytest.raises(ValueError):
        dmbn.aggregate(torch.zeros(0, 4))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 8))
def test_aggregate_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    z = torch.as_tensor(rng.normal(size=(n, 16)))
    perm = torch.as_tensor(rng.permutation(n))
    assert (dmbn.aggregate(z) - dmbn.aggregate(z[perm])).abs().max() < 1e-5


def test_blend_hand_case():
    w = BlendWeights([0.3, 0.7], [0.5, 1.0])
    out = dmbn.blend([vec(1, 0), vec(0, 1)], w)
    np.testing.assert_allclose(out.numpy(), [0.15 / 0.85, 0.70 / 0.85], atol=1e-6)
    np.testing.assert_allclose(out.numpy(), [0.176471, 0.823529], atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(p1=st.floats(1e-6, 1 - 1e-6), w=st.tuples(st.floats(0.01, 1), st.floats(0.01, 1)),
       seed=st.integers(0, 1000))
def test_blend_equal_latents_identity(p1, w, seed):
    r = torch.as_tensor(np.random.default_rng(seed).normal(size=8))
    out = dmbn.blend([r, r.clone()], BlendWeights([p1, 1 - p1], list(w)))
    assert (out - r).abs().max() < 1e-6


def test_blend_zero_availability_removes_modality():
    a, b = vec(1, 2, 3), vec(-5, 7, 9)
    out = dmbn.blend([a, b], BlendWeights([0.4, 0.6], [1.0, 0.0]))
    assert (out - a).abs().max() < 1e-6
    out = dmbn.blend([a, None], BlendWeights([0.4, 0.6], [1.0, 0.0]))
    assert (out - a).abs().max() < 1e-6


@settings(max_examples=50, deadline=None)
@given(p1=st.floats(0.05, 0.95), w=st.tuples(st.floats(0.05, 1), st.floats(0.05, 1)), k=st.floats(0.05, 0.99))
def test_blend_rescaling_invariance(p1, w, k):
    a, b = vec(1.0, -2.0), vec(0.5, 4.0)
    base = dmbn.blend([a, b], BlendWeights([p1, 1 - p1], list(w)))
    scaled = dmbn.blend([a, b], BlendWeights([p1, 1 - p1], [k * w[0], k * w[1]]))
    assert (base - scaled).abs().max() < 1e-6


def test_blend_weights_validation():
    with pytest.raises(ValueError):
        BlendWeights([0.5, 0.5], [0.0, 0.0])
    with pytest.raises(ValueError):
        BlendWeights([0.5, 0.6], [1.0, 1.0])
    with pytest.raises(ValueError):
        BlendWeights([1.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        BlendWeights([0.5, 0.5], [1.5, 1.0])


def test_inference_weights_are_uniform():
    w = BlendWeights.inference([1, 0, 1])
    np.testing.assert_allclose(w.p, [1 / 3] * 3)


def test_sample_blend_coefficients_marginal():
    rng = stream(0, "training")
    draws = np.array([dmbn.sample_blend_coefficients(2, rng) for _ in range(10_000)])
    assert abs(draws[:, 0].mean() - 0.5) < 0.02
    assert draws.min() >= dmbn.P_FLOOR
    np.testing.assert_allclose(draws.sum(axis=1), 1.0)


def test_sample_blend_coefficients_single_modality():
    assert dmbn.sample_blend_coefficients(1, stream(0, "training")).tolist() == [1.0]


def test_training_batch_sizes():
    data = dmbn.TrainingData(tiny_interactions(), ["image", "joint"])
    rng = stream(3, "training")
    sizes = {len(dmbn.sample_training_batch(data, 5, rng).obs_index) for _ in range(500)}
    assert sizes == {1, 2, 3, 4, 5}
    batch = dmbn.sample_training_batch(data, 5, rng)
    assert (batch.weights.w == 1).all()


def test_represent_requires_observations_for_weighted_modality():
    model = DMBN(tiny_spec())
    obs = {"joint": (vec(0.5), torch.zeros(1, 2))}
    with pytest.raises(ValueError, match="image"):
        model.represent(obs, BlendWeights.inference([1, 1]))
    r = model.represent(obs, BlendWeights.inference([0, 1]))
    assert r.shape == (4,)


def test_represent_ignores_missing_modality_values():
    model = DMBN(tiny_spec())
    j = (vec(0.5), vec(0.2, 0.3).reshape(1, 2))
    a = model.represent({"joint": j, "image": (vec(0.5), torch.rand(1, 3, 4, 4))}, BlendWeights.inference([0, 1]))
    b = model.represent({"joint": j}, BlendWeights.inference([0, 1]))
    assert torch.equal(a, b)


# --- loss ---------------------------------------------------------------------

def test_nll_floor_value():
    t = torch.zeros(1)
    value = nc.gaussian_nll(t, t, torch.full((1,), 0.01))
    assert float(value) == pytest.approx(0.5 * math.log(2 * math.pi * 1e-4), abs=1e-6)
    assert float(value) == pytest.approx(-3.6862, abs=1e-3)


def test_fixed_unit_loss_difference_is_half_sq_error():
    target = torch.rand(3, 4, 4)
    m1, m2 = torch.rand(3, 4, 4), torch.rand(3, 4, 4)
    ones = torch.ones_like(target)
    diff = nc.gaussian_nll(target, m1, ones) - nc.gaussian_nll(target, m2, ones)
    expect = 0.5 * (((target - m1) ** 2).sum() - ((target - m2) ** 2).sum())
    assert float(diff) == pytest.approx(float(expect), abs=1e-4)


def test_end_to_end_loss_gradcheck_float64():
    with nc.precision("float64"):
        model = DMBN(tiny_spec(3))
        data = dmbn.TrainingData(tiny_interactions(), model.names)
        batch = dmbn.sample_training_batch(data, 5, stream(0, "training"), targets=2)
        obs, target, tt = dmbn.batch_tensors(data, batch)
        params = list(model.parameters())

        def f():
            return dmbn.loss_fn(model(obs, batch.weights, tt), target)

        analytic = nc.backward(f(), params)
        numeric = nc.finite_difference_grad(f, params, h=1e-5)
        err = nc.relative_error(torch.cat([g.reshape(-1) for g in analytic]),
                                torch.cat([g.reshape(-1) for g in numeric]))
        assert err < 1e-5


def test_end_to_end_loss_gradcheck_float32():
    model = DMBN(tiny_spec(3))
    data = dmbn.TrainingData(tiny_interactions(), model.names)
    batch = dmbn.sample_training_batch(data, 5, stream(0, "training"), targets=2)
    obs, target, tt = dmbn.batch_tensors(data, batch)
    params = list(model.parameters())

    def f():
        with nc.precision("float64"):
            return dmbn.loss_fn(model(obs, batch.weights, tt), target).double()

    analytic = nc.backward(dmbn.loss_fn(model(obs, batch.weights, tt), target), params)
    numeric = nc.finite_difference_grad(f, params, h=1e-2)
    err = nc.relative_error(torch.cat([g.reshape(-1) for g in analytic]),
                            torch.cat([g.reshape(-1) for g in numeric]))
    assert err < 1e-3


# --- training -----------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    model = DMBN(tiny_spec(7))
    result = dmbn.train(model, tiny_interactions(), TrainConfig(iterations=1000, lr=1e-3, seed=7, log_every=0))
    return result


def test_smoke_training_reduces_loss(trained):
    assert np.mean(trained.losses[-100:]) < np.mean(trained.losses[:100])


def test_training_is_reproducible(trained):
    again = dmbn.train(DMBN(tiny_spec(7)), tiny_interactions(),
                       TrainConfig(iterations=1000, lr=1e-3, seed=7, log_every=0))
    assert np.array_equal(np.array(again.losses), np.array(trained.losses))


def test_checkpoint_callback_cadence():
    seen = []
    dmbn.train(DMBN(tiny_spec()), tiny_interactions(), TrainConfig(iterations=10, checkpoint_every=4, log_every=0),
               on_checkpoint=lambda it, m, o: seen.append((it, o.step)))
    assert seen == [(4, 4), (8, 8)]


def test_training_aborts_on_nan():
    bad = tiny_interactions()
    bad[0].states["joint"][:] = np.nan
    bad[1].states["joint"][:] = np.nan
    with pytest.raises(nc.NonFiniteError):
        dmbn.train(DMBN(tiny_spec()), bad, TrainConfig(iterations=5, log_every=0))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(obs_max=0)


def test_resume_matches_uninterrupted(tmp_path):
    data = tiny_interactions()
    full = dmbn.train(DMBN(tiny_spec(2)), data, TrainConfig(iterations=20, lr=1e-3, seed=1, log_every=0))
    # first half, save, reload, second half with the optimiser state carried over
    first = dmbn.train(DMBN(tiny_spec(2)), data, TrainConfig(iterations=10, lr=1e-3, seed=1, log_every=0))
    path = tmp_path / "half.ckpt"
    dmbn.save_checkpoint(first.model, path, first.optimizer)
    model, opt = dmbn.load_checkpoint(path)
    assert opt.step == 10
    assert dmbn.checkpoint_bytes(model, model.spec.to_json(), opt) == path.read_bytes()


# --- inference ----------------------------------------------------------------

def test_predict_trajectory_outputs(trained):
    model = trained.model
    it = tiny_interactions()[0]
    pred = dmbn.predict_trajectory(model, {"image": [(it.times[2], it.states["image"][2])]}, [1, 0], it.times)
    assert pred["image"].mean.shape == (6, 3, 4, 4)
    assert pred["joint"].mean.shape == pred["joint"].std.shape == (6, 2)


def test_predict_rejects_all_zero_availability(trained):
    it = tiny_interactions()[0]
    with pytest.raises(ValueError):
        dmbn.predict_trajectory(trained.model, {"joint": [(0.0, it.states["joint"][0])]}, [0, 0], it.times)


@settings(max_examples=20, deadline=None)
@given(qs=st.lists(st.floats(0, 1), min_size=1, max_size=6), extra=st.lists(st.floats(0, 1), max_size=6))
def test_one_shot_queries_are_independent(trained, qs, extra):
    it = tiny_interactions()[1]
    obs = {"joint": [(it.times[1], it.states["joint"][1])]}
    alone = dmbn.predict_trajectory(trained.model, obs, [0, 1], qs)
    mixed = dmbn.predict_trajectory(trained.model, obs, [0, 1], extra + qs)
    for name in ("image", "joint"):
        assert alone[name].mean.tobytes() == mixed[name].mean[len(extra):].tobytes()
        assert alone[name].std.tobytes() == mixed[name].std[len(extra):].tobytes()


def test_predict_is_repeatable(trained):
    it = tiny_interactions()[1]
    obs = {"joint": [(it.times[1], it.states["joint"][1])]}
    a = dmbn.predict_trajectory(trained.model, obs, [0, 1], it.times)
    b = dmbn.predict_trajectory(trained.model, obs, [0, 1], it.times)
    assert a["image"].mean.tobytes() == b["image"].mean.tobytes()


# --- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path, trained):
    path = tmp_path / "m.ckpt"
    dmbn.save_checkpoint(trained.model, path, trained.optimizer)
    model, opt = dmbn.load_checkpoint(path)
    for (n, p), (_, q) in zip(trained.model.named_parameters(), model.named_parameters()):
        assert p.detach().numpy().tobytes() == q.detach().numpy().tobytes(), n
    assert opt.step == trained.optimizer.step
    path2 = tmp_path / "again.ckpt"
    dmbn.save_checkpoint(model, path2, opt)
    assert path2.read_bytes() == path.read_bytes()


def test_checkpoint_bad_magic(tmp_path, trained):
    data = dmbn.checkpoint_bytes(trained.model, trained.model.spec.to_json())
    with pytest.raises(dmbn.CheckpointFormatError, match="DMBN"):
        dmbn.parse_checkpoint(b"XXXX" + data[4:])


@pytest.mark.parametrize("mutate", [lambda d: d[:-3], lambda d: d + b"\0"])
def test_checkpoint_truncated_or_padded(trained, mutate):
    data = dmbn.checkpoint_bytes(trained.model, trained.model.spec.to_json())
    with pytest.raises(dmbn.CheckpointFormatError):
        dmbn.parse_checkpoint(mutate(data))


def test_checkpoint_wrong_model(trained):
    _, params, _ = dmbn.parse_checkpoint(dmbn.checkpoint_bytes(trained.model, trained.model.spec.to_json()))
    other = DMBN(ModelSpec(tiny_spec().modalities[1:], d_latent=4))
    with pytest.raises(dmbn.CheckpointFormatError):
        dmbn._restore(other, params, None)
