import numpy as np
import pytest

from twostream import tensor as T
from twostream.models import (Layer, ModelKind, ParameterStore, build, classify, encode, fuse_bottleneck,
                              forward_autoencoder, load_checkpoint, network_spec, residual_block,
                              save_checkpoint)
from twostream.optim import CAE_WEIGHTS, AdamState, adam_step, dual_loss
from twostream.preprocessing import build_test_clips, prepare_streams
from twostream.synth import SynthSpec, generate
from twostream.training import TrainConfig

AUTOENCODERS = [ModelKind.TWO_STREAM_CAE2D, ModelKind.TWO_STREAM_RAE3D, ModelKind.SINGLE_STREAM_CAE]


def clips(b, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.random((b, 8, 24, 32, 1)).astype(np.float32),
            rng.random((b, 8, 24, 32, 2)).astype(np.float32))


def run(kind, params, gray, flow):
    spec = network_spec(kind)
    two = len(kind.streams) == 2
    return forward_autoencoder(spec, params, T.Tensor(gray), T.Tensor(flow) if two else None)


def encoder_names(kind, stream="gray"):
    spec = network_spec(kind)
    return [f"{stream}/{layer.name}/{p}" for layer in spec.encoders[stream] for p in layer.param_shapes()]


def recon_loss(kind, params, gray, flow, weights=CAE_WEIGHTS):
    out = run(kind, params, gray, flow)
    loss = T.mse(out["gray"], T.Tensor(gray))
    if "flow" in out:
        loss = dual_loss(loss, T.mse(out["flow"], T.Tensor(flow)), weights)
    return loss


# --- construction ----------------------------------------------------------------------


@pytest.mark.parametrize("kind", list(ModelKind))
def test_build_is_deterministic(kind):
    _, a = build(kind, seed=3)
    _, b = build(kind, seed=3)
    _, c = build(kind, seed=4)
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if not k.endswith("bias"))


@pytest.mark.parametrize("kind", list(ModelKind))
def test_fusion_and_split_points(kind):
    spec = network_spec(kind)
    two = len(kind.streams) == 2
    assert (spec.fusion_points, spec.split_points) == ((1, 1) if two else (0, 0))
    assert spec.streams == kind.streams


def test_cae_has_exactly_one_shared_group():
    _, store = build(ModelKind.TWO_STREAM_CAE2D)
    groups = {name.rsplit("/", 1)[0] for name in store if name.startswith("shared/")}
    assert groups == {"shared/fuse"}
    assert {name.split("/")[0] for name in store} == {"gray", "flow", "shared"}


def test_supervised_encoder_matches_single_stream_encoder():
    _, sup = build(ModelKind.SUPERVISED)
    _, single = build(ModelKind.SINGLE_STREAM_CAE)
    names = encoder_names(ModelKind.SUPERVISED)
    assert names == encoder_names(ModelKind.SINGLE_STREAM_CAE)
    assert sum(sup[n].size for n in names) == sum(single[n].size for n in names)
    assert all(sup[n].shape == single[n].shape for n in names)


def test_rae_residual_kernels_and_cae_dilations():
    rae = network_spec(ModelKind.TWO_STREAM_RAE3D)
    residual = [layer for _, layer in rae.layers() if layer.kind == "residual"]
    assert residual and all(layer.kernel == (3, 3, 3) for layer in residual)
    for kind in (ModelKind.TWO_STREAM_CAE2D, ModelKind.SINGLE_STREAM_CAE, ModelKind.SUPERVISED):
        spec = network_spec(kind)
        for stream, layers in spec.encoders.items():
            convs = [layer for layer in layers if layer.kind == "conv"]
            assert [layer.dilation for layer in convs[-2:]] == [(2, 2), (2, 2)]
            assert all(layer.dilation == (1, 1) for layer in convs[:-2])
            assert {layer.kernel for layer in convs} >= {(3, 3), (5, 5)}


@pytest.mark.parametrize("kind", list(ModelKind))
def test_every_layer_has_one_entry_per_parameter(kind):
    spec, store = build(kind)
    assert set(store) == set(spec.param_shapes())
    assert all(store[k].shape == s for k, s in spec.param_shapes().items())


# --- forward ------------------------------------------------------------------------------


@pytest.mark.parametrize("kind", AUTOENCODERS)
def test_reconstruction_shapes_and_range(kind):
    _, store = build(kind)
    gray, flow = clips(2)
    out = run(kind, store, gray, flow)
    assert out["gray"].shape == gray.shape
    if "flow" in kind.streams:
        assert out["flow"].shape == flow.shape
    else:
        assert set(out) == {"gray"}
    for v in out.values():
        assert np.all((v.data > 0) & (v.data < 1))


def test_wrong_stream_count_rejected():
    spec, store = build(ModelKind.TWO_STREAM_CAE2D)
    gray, flow = clips(1)
    with pytest.raises(ValueError, match="stream"):
        forward_autoencoder(spec, store, T.Tensor(gray))
    spec1, store1 = build(ModelKind.SINGLE_STREAM_CAE)
    with pytest.raises(ValueError, match="stream"):
        forward_autoencoder(spec1, store1, T.Tensor(gray), T.Tensor(flow))
    with pytest.raises(ValueError):
        forward_autoencoder(spec, store, T.Tensor(gray), T.Tensor(flow[..., :1]))


@pytest.mark.parametrize("kind", AUTOENCODERS)
def test_batch_independence(kind):
    _, store = build(kind)
    gray, flow = clips(2, seed=1)
    both = run(kind, store, gray, flow)
    one = run(kind, store, gray[1:], flow[1:])
    for stream in both:
        np.testing.assert_allclose(both[stream].data[1:], one[stream].data, atol=1e-6)


@pytest.mark.parametrize("kind", AUTOENCODERS)
def test_zero_final_layer_gives_half(kind):
    spec, store = build(kind)
    zeroed = {k: (np.zeros_like(v) if "/out/" in k else v) for k, v in store.values.items()}
    gray, flow = clips(1)
    for v in run(kind, ParameterStore(zeroed), gray, flow).values():
        np.testing.assert_array_equal(v.data, 0.5)


def test_classifier_range_and_zero_head():
    spec, store = build(ModelKind.SUPERVISED)
    gray, _ = clips(3)
    p = classify(spec, store, T.Tensor(gray)).data
    assert p.shape == (3,) and np.all((p > 0) & (p < 1))
    zeroed = {k: (np.zeros_like(v) if k.startswith("head/fc2") else v) for k, v in store.values.items()}
    np.testing.assert_array_equal(classify(spec, ParameterStore(zeroed), T.Tensor(gray)).data, 0.5)
    with pytest.raises(ValueError):
        classify(network_spec(ModelKind.SINGLE_STREAM_CAE), store, T.Tensor(gray))


def test_residual_block_with_zero_branch_passes_input():
    layer = Layer("r", "residual", (3, 3, 3), (1, 1, 1), (1, 1, 1), 3, 3, "leaky")
    x = np.random.default_rng(0).standard_normal((1, 4, 5, 6, 3)).astype(np.float32)
    params = {f"g/r/{k}": T.Tensor(np.zeros(s, np.float32)) for k, s in layer.param_shapes().items()}
    out = residual_block(T.Tensor(x), params, "g/r", layer).data
    np.testing.assert_array_equal(out, np.where(x > 0, x, np.float32(0.2) * x))


def test_time_distributed_encoder_commutes_with_frame_permutation():
    spec, store = build(ModelKind.TWO_STREAM_CAE2D)
    gray, flow = clips(2, seed=2)
    perm = np.random.default_rng(0).permutation(8)
    codes = encode(spec, store, {"gray": gray, "flow": flow})
    shuffled = encode(spec, store, {"gray": gray[:, perm], "flow": flow[:, perm]})
    for s in codes:
        np.testing.assert_allclose(shuffled[s].data, codes[s].data[:, perm], atol=1e-6)


def test_fusion_shapes_and_stream_swap_symmetry():
    spec, store = build(ModelKind.TWO_STREAM_CAE2D)
    rng = np.random.default_rng(3)
    a = T.Tensor(rng.random((1, 8, 6, 8, 64)).astype(np.float32))
    b = T.Tensor(rng.random((1, 8, 6, 8, 64)).astype(np.float32))
    assert T.concat([a, b], -1).shape == (1, 8, 6, 8, 128)
    fused = fuse_bottleneck(spec, store, a, b)
    assert fused.shape == (1, 8, 6, 8, 64)
    swapped = dict(store.values)
    k = store["shared/fuse/kernel"]
    swapped["shared/fuse/kernel"] = np.concatenate([k[..., 64:, :], k[..., :64, :]], axis=-2)
    np.testing.assert_allclose(fuse_bottleneck(spec, ParameterStore(swapped), b, a).data, fused.data,
                               rtol=1e-5, atol=1e-6)
    with pytest.raises(ValueError):
        fuse_bottleneck(spec, store, a, T.Tensor(np.zeros((1, 8, 3, 8, 64), np.float32)))


# --- gradients ------------------------------------------------------------------------------


@pytest.mark.parametrize("kind", [ModelKind.TWO_STREAM_CAE2D, ModelKind.TWO_STREAM_RAE3D])
@pytest.mark.parametrize("loss_stream,other", [("gray", "flow"), ("flow", "gray")])
def test_single_stream_loss_reaches_other_encoder(kind, loss_stream, other):
    _, store = build(kind)
    gray, flow = clips(1, seed=4)
    params = store.tensors(requires_grad=True)
    out = run(kind, params, gray, flow)
    target = {"gray": gray, "flow": flow}[loss_stream]
    grads = T.backward(T.mse(out[loss_stream], T.Tensor(target)), params)
    for name in encoder_names(kind, other):
        assert np.abs(grads[name]).max() > 0, name
    # the other decoder is untouched by this loss
    assert all(np.all(grads[n] == 0) for n in grads if n.startswith(f"{other}/out/"))


@pytest.mark.parametrize("kind", list(ModelKind))
def test_no_dead_parameters(kind):
    spec, store = build(kind)
    gray, flow = clips(2, seed=5)
    params = store.tensors(requires_grad=True)
    if kind is ModelKind.SUPERVISED:
        loss = T.bce(classify(spec, params, T.Tensor(gray)), np.array([0.0, 1.0]))
    else:
        loss = recon_loss(kind, params, gray, flow)
    grads = T.backward(loss, params)
    dead = [n for n, g in grads.items() if not np.any(g)]
    assert not dead


@pytest.fixture(scope="module")
def synthetic_clips():
    video = generate(SynthSpec(n_frames=96, seed=2))
    streams = prepare_streams(video.sequence)
    return streams.clips(build_test_clips(len(streams)))


_CURVES = {}


def early_curves(kind, batch):
    """Training loss at each of the first 10 Adam steps (before that step's update), 10 seeds."""
    if kind not in _CURVES:
        cfg = TrainConfig.for_kind(kind)
        curves = []
        for seed in range(10):
            _, store = build(kind, seed=seed)
            pick = [seed % len(batch), (seed + 5) % len(batch)]
            gray, flow = batch.gray[pick], batch.flow[pick]
            values = dict(store.values)
            state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
            losses = []
            for _ in range(10):
                params = {k: T.Tensor(v, requires_grad=True) for k, v in values.items()}
                loss = recon_loss(kind, params, gray, flow, cfg.weights)
                losses.append(loss.item())
                values, state = adam_step(values, T.backward(loss, params), state)
            curves.append(np.array(losses))
        _CURVES[kind] = curves
    return _CURVES[kind]


def monotone(curve):
    return bool(np.all(np.diff(curve) < 0))


@pytest.mark.parametrize("kind", [
    ModelKind.TWO_STREAM_CAE2D,
    ModelKind.SINGLE_STREAM_CAE,
    pytest.param(ModelKind.TWO_STREAM_RAE3D, marks=pytest.mark.xfail(
        strict=True, reason="one uptick when the output mean overshoots the frame mean")),
])
def test_loss_decreases_over_first_steps(kind, synthetic_clips):
    assert sum(monotone(c) for c in early_curves(kind, synthetic_clips)) >= 9


def test_rae_early_loss_falls_with_at_most_one_uptick(synthetic_clips):
    for curve in early_curves(ModelKind.TWO_STREAM_RAE3D, synthetic_clips):
        assert curve[-1] < curve[0] / 3
        assert int(np.sum(np.diff(curve) >= 0)) <= 1


def test_classifier_overfits_small_set():
    spec, store = build(ModelKind.SUPERVISED, seed=1)
    gray, _ = clips(32, seed=6)
    labels = np.array([0.0, 1.0] * 16)
    values = dict(store.values)
    state = AdamState(lr=1e-3, beta1=0.9, beta2=0.999)
    accuracy = 0.0
    for _ in range(200):
        params = {k: T.Tensor(v, requires_grad=True) for k, v in values.items()}
        p = classify(spec, params, T.Tensor(gray))
        accuracy = np.mean((p.data > 0.5) == (labels > 0.5))
        if accuracy == 1.0:
            break
        values, state = adam_step(values, T.backward(T.bce(p, labels), params), state)
    assert accuracy == 1.0


# --- checkpoints --------------------------------------------------------------------------


@pytest.mark.parametrize("kind", list(ModelKind))
def test_checkpoint_round_trip_is_exact(kind, tmp_path):
    spec, store = build(kind, seed=11)
    path = save_checkpoint(tmp_path / "a.ckpt", kind, store)
    kind2, loaded = load_checkpoint(path)
    assert kind2 is kind and loaded.seed == 11 and list(loaded) == list(store)
    again = save_checkpoint(tmp_path / "b.ckpt", kind2, loaded)
    assert path.read_bytes() == again.read_bytes()
    gray, flow = clips(1, seed=7)
    if kind is ModelKind.SUPERVISED:
        a = classify(spec, store, T.Tensor(gray)).data
        b = classify(spec, loaded, T.Tensor(gray)).data
        assert a.tobytes() == b.tobytes()
    else:
        a, b = run(kind, store, gray, flow), run(kind, loaded, gray, flow)
        assert all(a[s].data.tobytes() == b[s].data.tobytes() for s in a)


def test_checkpoint_corruption_detected(tmp_path):
    _, store = build(ModelKind.SUPERVISED)
    path = save_checkpoint(tmp_path / "m.ckpt", ModelKind.SUPERVISED, store)
    raw = path.read_bytes()
    path.write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)
    assert raw[:4] == b"VAE1"
