import numpy as np
import pytest

from layerlens import network as net
from layerlens import numerics as nm
from layerlens.errors import (
    BadMagic,
    ChecksumMismatch,
    ShapeError,
    SpecError,
    SpecMismatch,
    TruncatedFile,
    VersionMismatch,
)
from layerlens.seeding import make_rng


@pytest.fixture
def six_net():
    return net.build_six_layer_net((3, 32, 32), 3, [8, 8, 16, 16, 32, 32])


@pytest.fixture
def tiny_net():
    # two conv blocks + pool keeps forward/backward tests fast
    layers = [
        net.Conv(4, 3, 1, 1), net.Relu(),
        net.Conv(4, 3, 1, 1), net.Relu(),
        net.Pool(2, 2),
        net.Flatten(), net.Dense(3),
    ]
    return net.NetworkSpec(layers, (1, 8, 8), 3)


def test_six_layer_shapes_and_taps(six_net):
    assert six_net.tap_count == 6
    # pooling after blocks 2/4/6 halves 32 -> 16 -> 8 -> 4
    assert six_net.tap_shape(6) == (32, 8, 8)
    assert six_net.layer_shapes[-1] == (3,)
    flat_idx = len(six_net.layers) - 2
    assert six_net.layer_shapes[flat_idx] == (32 * 4 * 4,)


def test_single_logit_head():
    spec = net.build_six_layer_net((1, 32, 32), 1, [4] * 6)
    assert spec.class_count == 1
    assert spec.layer_shapes[-1] == (1,)


def test_spatial_collapse_rejected():
    with pytest.raises(SpecError):
        net.build_six_layer_net((1, 4, 4), 2, [4] * 6)


def test_wrong_width_count_rejected():
    with pytest.raises(SpecError):
        net.build_six_layer_net((1, 32, 32), 2, [4] * 5)


def test_forward_depth_zero(tiny_net):
    params = net.init_params(tiny_net, 0)
    scores, taps = net.forward_with_taps(tiny_net, params, np.zeros((2, 1, 8, 8)), depth=0)
    assert scores is None
    assert taps == {}


def test_forward_full_depth(tiny_net):
    params = net.init_params(tiny_net, 0)
    x = make_rng(1).standard_normal((2, 1, 8, 8))
    scores, taps = net.forward_with_taps(tiny_net, params, x)
    assert scores.shape == (2, 3)
    assert sorted(taps) == [1, 2]
    assert taps[1].shape == (2, 4, 8, 8)


def test_tap_compositionality(tiny_net):
    params = net.init_params(tiny_net, 7)
    x = make_rng(2).standard_normal((3, 1, 8, 8))
    _, taps = net.forward_with_taps(tiny_net, params, x)
    # running the truncated prefix in isolation reproduces tap 2 bitwise
    _, taps2 = net.forward_with_taps(tiny_net, params, x, depth=2)
    assert np.array_equal(taps[2], taps2[2])
    prefix = net.run_span(tiny_net, params, x, 0, tiny_net.tap_layers[1])
    assert np.array_equal(prefix, taps[2])


def test_forward_shape_mismatch(tiny_net):
    params = net.init_params(tiny_net, 0)
    with pytest.raises(ShapeError):
        net.forward_with_taps(tiny_net, params, np.zeros((1, 2, 8, 8)))


def test_backward_to_final_tap_matches_finite_differences(tiny_net):
    params = net.init_params(tiny_net, 5)
    # lift conv2's bias so tap-2 activations are strictly positive and
    # distinct: no relu zeros to tie the downstream pool's argmax under
    # the finite-difference probe
    k2, b2 = params.blocks[2]
    params.blocks[2] = (k2, b2 + 10.0)
    rng = make_rng(3)
    x = rng.standard_normal((1, 1, 8, 8))
    tap = 2
    g = net.backward_to_tap(tiny_net, params, x, class_index=1, tap=tap)

    tap_layer = tiny_net.tap_layers[tap - 1]
    acts = net.run_span(tiny_net, params, x, 0, tap_layer)

    def score_from_tap(a):
        out = net.run_span(tiny_net, params, a, tap_layer + 1, len(tiny_net.layers) - 1)
        return float(out[0, 1])

    fd = nm.finite_diff_grad(score_from_tap, acts, 1e-5)
    denom = max(np.abs(fd).max(), 1e-12)
    assert np.abs(g - fd).max() / denom < 1e-5


def test_backward_zero_head_gives_zero_gradient(tiny_net):
    params = net.init_params(tiny_net, 4)
    di = len(tiny_net.layers) - 1
    w, b = params.blocks[di]
    params.blocks[di] = (np.zeros_like(w), np.zeros_like(b))
    g = net.backward_to_tap(tiny_net, params, np.ones((1, 1, 8, 8)), 0, tap=1)
    assert np.array_equal(g, np.zeros_like(g))


def test_backward_to_input_is_score_gradient(tiny_net):
    # tap 0 gradient = d(score)/d(image), checked against finite differences
    params = net.init_params(tiny_net, 6)
    x = make_rng(4).standard_normal((1, 1, 8, 8))
    g = net.backward_to_tap(tiny_net, params, x, class_index=2, tap=0)
    assert g.shape == x.shape

    def score(xv):
        out, _ = net.forward_with_taps(tiny_net, params, xv)
        return float(out[0, 2])

    fd = nm.finite_diff_grad(score, x, 1e-5)
    assert np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-5


def test_backward_invalid_tap(tiny_net):
    params = net.init_params(tiny_net, 0)
    with pytest.raises(SpecError):
        net.backward_to_tap(tiny_net, params, np.zeros((1, 1, 8, 8)), 0, tap=3)


def test_aux_head_forward_backward(tiny_net):
    head = net.init_aux_head(tiny_net, tap=2, seed=11)
    rng = make_rng(12)
    acts = rng.standard_normal((2, 4, 4, 4))
    scores = net.aux_head_forward(head, acts)
    assert scores.shape == (2, 3)
    up = rng.standard_normal((2, 3))

    def loss(a):
        return float((net.aux_head_forward(head, a) * up).sum())

    d_acts, d_w, d_b = net.aux_head_backward(head, acts, up)
    fd = nm.finite_diff_grad(loss, acts, 1e-6)
    assert np.abs(d_acts - fd).max() / np.abs(fd).max() < 1e-6


# ---------------------------------------------------------------------------
# serialization


def test_save_load_round_trip(tmp_path, tiny_net):
    params = net.init_params(tiny_net, 42)
    params.provenance = net.Provenance("E2E", (), 42)
    p1 = tmp_path / "w.llw"
    net.save_weights(tiny_net, params, p1)
    loaded = net.load_weights(p1, tiny_net)
    for b1, b2 in zip(params.blocks, loaded.blocks):
        if b1 is None:
            assert b2 is None
        else:
            for a1, a2 in zip(b1, b2):
                assert np.array_equal(a1, a2)
    assert loaded.provenance == params.provenance
    assert loaded.frozen == params.frozen
    # second save of the loaded params is byte-identical
    p2 = tmp_path / "w2.llw"
    net.save_weights(tiny_net, loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "w.llw.spec").exists()


def test_corrupted_byte_is_checksum_error(tmp_path, tiny_net):
    params = net.init_params(tiny_net, 1)
    path = tmp_path / "w.llw"
    net.save_weights(tiny_net, params, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatch):
        net.load_weights(path, tiny_net)


def test_bad_magic(tmp_path, tiny_net):
    path = tmp_path / "w.llw"
    path.write_bytes(b"NOPE" + bytes(100))
    with pytest.raises(BadMagic):
        net.load_weights(path, tiny_net)


def test_truncated_file(tmp_path, tiny_net):
    params = net.init_params(tiny_net, 1)
    path = tmp_path / "w.llw"
    net.save_weights(tiny_net, params, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 3])
    with pytest.raises((TruncatedFile, ChecksumMismatch)):
        net.load_weights(path, tiny_net)
    path.write_bytes(raw[:10])
    with pytest.raises(TruncatedFile):
        net.load_weights(path, tiny_net)


def test_version_mismatch(tmp_path, tiny_net):
    params = net.init_params(tiny_net, 1)
    path = tmp_path / "w.llw"
    net.save_weights(tiny_net, params, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 99  # version field
    import hashlib

    payload = bytes(raw[:-32])
    path.write_bytes(payload + hashlib.sha256(payload).digest())
    with pytest.raises(VersionMismatch):
        net.load_weights(path, tiny_net)


def test_wrong_spec_names_layer(tmp_path, tiny_net):
    params = net.init_params(tiny_net, 1)
    path = tmp_path / "w.llw"
    net.save_weights(tiny_net, params, path)
    other = net.NetworkSpec(
        [
            net.Conv(8, 3, 1, 1), net.Relu(),
            net.Conv(4, 3, 1, 1), net.Relu(),
            net.Pool(2, 2),
            net.Flatten(), net.Dense(3),
        ],
        (1, 8, 8),
        3,
    )
    with pytest.raises(SpecMismatch) as e:
        net.load_weights(path, other)
    assert "layer 0" in str(e.value)


def test_frozen_flags_round_trip(tmp_path, tiny_net):
    params = net.init_params(tiny_net, 5)
    params.frozen[0] = True
    params.frozen[1] = True
    path = tmp_path / "w.llw"
    net.save_weights(tiny_net, params, path)
    assert net.load_weights(path, tiny_net).frozen == params.frozen
