"""Neural stack: kernel backend parity, tape gradients against finite
differences, loss analytics, optimizer behaviour, checkpoint format."""

import numpy as np
import pytest

from ehrseq.errors import ConfigError, LabelError, NumericsError, ShapeError, StateError
from ehrseq.neural import checkpoint as ckpt
from ehrseq.neural import layers, losses, optim
from ehrseq.neural import tensor as T
from ehrseq.neural.backend import get_backend
from ehrseq.neural.gradcheck import finite_difference_check

try:
    COMPILED = get_backend("compiled")
except Exception:  # pragma: no cover - depends on build environment
    COMPILED = None
PYKERN = get_backend("python")

needs_compiled = pytest.mark.skipif(COMPILED is None, reason="compiled kernels not built")


def packed(rng, lengths, d, dtype):
    cu = np.zeros(len(lengths) + 1, dtype=np.int64)
    cu[1:] = np.cumsum(lengths)
    return rng.standard_normal((int(cu[-1]), d)).astype(dtype), cu


# ---------------------------------------------------------------- kernel parity

@needs_compiled
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
def test_layernorm_backends_agree(dtype, tol):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((9, 16)).astype(dtype)
    gamma = rng.standard_normal(16).astype(dtype)
    beta = rng.standard_normal(16).astype(dtype)
    dy = rng.standard_normal((9, 16)).astype(dtype)
    yp, xhp, isp = PYKERN.layernorm_fwd(x, gamma, beta, 1e-5)
    yc, xhc, isc = COMPILED.layernorm_fwd(x, gamma, beta, 1e-5)
    assert np.allclose(yp, yc, atol=tol) and np.allclose(isp, isc, atol=tol)
    for a, b in zip(PYKERN.layernorm_bwd(dy, xhp, isp, gamma),
                    COMPILED.layernorm_bwd(dy, xhc, isc, gamma)):
        assert np.allclose(a, b, atol=tol)


@needs_compiled
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
def test_gelu_backends_agree(dtype, tol):
    rng = np.random.default_rng(2)
    x = (rng.standard_normal((8, 8)) * 3).astype(dtype)
    dy = rng.standard_normal((8, 8)).astype(dtype)
    assert np.allclose(PYKERN.gelu_fwd(x), COMPILED.gelu_fwd(x), atol=tol)
    assert np.allclose(PYKERN.gelu_bwd(x, dy), COMPILED.gelu_bwd(x, dy), atol=tol)


@needs_compiled
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-4), (np.float64, 1e-12)])
def test_attention_backends_agree(dtype, tol):
    rng = np.random.default_rng(3)
    q, cu = packed(rng, [3, 1, 5], 8, dtype)
    k = rng.standard_normal(q.shape).astype(dtype)
    v = rng.standard_normal(q.shape).astype(dtype)
    dout = rng.standard_normal(q.shape).astype(dtype)
    outp, probp = PYKERN.attention_fwd(q, k, v, cu, 2)
    outc, probc = COMPILED.attention_fwd(q, k, v, cu, 2)
    assert np.allclose(outp, outc, atol=tol)
    assert np.allclose(probp, probc, atol=tol)
    for a, b in zip(PYKERN.attention_bwd(dout, q, k, v, probp, cu, 2),
                    COMPILED.attention_bwd(dout, q, k, v, probc, cu, 2)):
        assert np.allclose(a, b, atol=tol)


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_segment_and_scatter_backends_agree(dtype):
    rng = np.random.default_rng(4)
    x, cu = packed(rng, [2, 4, 1], 6, dtype)
    dy = rng.standard_normal((3, 6)).astype(dtype)
    assert np.allclose(PYKERN.segment_mean_fwd(x, cu), COMPILED.segment_mean_fwd(x, cu))
    assert np.allclose(PYKERN.segment_mean_bwd(dy, cu, 7), COMPILED.segment_mean_bwd(dy, cu, 7))
    assert np.allclose(PYKERN.segment_sum_fwd(x, cu), COMPILED.segment_sum_fwd(x, cu))
    assert np.allclose(PYKERN.segment_sum_bwd(dy, cu, 7), COMPILED.segment_sum_bwd(dy, cu, 7))
    ids = np.array([0, 3, 3, 1, 4], dtype=np.int64)
    g = rng.standard_normal((5, 6)).astype(dtype)
    assert np.allclose(PYKERN.embedding_bwd(ids, g, 5), COMPILED.embedding_bwd(ids, g, 5))


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_adamw_backends_agree(dtype):
    rng = np.random.default_rng(5)
    param = rng.standard_normal(40).astype(dtype)
    grad = rng.standard_normal(40).astype(dtype)
    states = []
    for backend in (PYKERN, COMPILED):
        p, m, v = param.copy(), np.zeros_like(param), np.zeros_like(param)
        for step in range(1, 4):
            backend.adamw_step(p, grad, m, v, step, 1e-3, 0.9, 0.999, 1e-8, 0.01)
        states.append((p, m, v))
    for a, b in zip(*states):
        assert np.allclose(a, b, atol=1e-6 if dtype == np.float32 else 1e-14)


# ------------------------------------------------------------ finite differences

def weighted_mean(x, rng):
    w = rng.standard_normal(x.data.shape)
    return T.mean_all(T.mul_array(x, w))


def check(loss_fn, params, samples=4):
    res = finite_difference_check(loss_fn, params, samples_per_tensor=samples)
    assert res.ok, f"worst {res.worst}, rel err {res.max_rel_err:.3e}"


def test_grad_linear_gelu():
    with T.use_dtype(np.float64):
        rng = np.random.default_rng(10)
        x = T.parameter(rng.standard_normal((3, 4)))
        w = T.parameter(rng.standard_normal((4, 5)))
        b = T.parameter(rng.standard_normal(5))
        wr = np.random.default_rng(11)
        check(lambda: weighted_mean(T.gelu(T.add(T.matmul(x, w), b)), np.random.default_rng(99)),
              {"x": x, "w": w, "b": b})
        del wr


def test_grad_layernorm():
    with T.use_dtype(np.float64):
        rng = np.random.default_rng(12)
        x = T.parameter(rng.standard_normal((4, 6)))
        gamma = T.parameter(rng.standard_normal(6))
        beta = T.parameter(rng.standard_normal(6))
        check(lambda: weighted_mean(T.layernorm(x, gamma, beta), np.random.default_rng(98)),
              {"x": x, "gamma": gamma, "beta": beta})


def test_grad_embedding_repeated_ids():
    with T.use_dtype(np.float64):
        rng = np.random.default_rng(13)
        table = T.parameter(rng.standard_normal((7, 5)))
        ids = np.array([0, 3, 3, 6, 1], dtype=np.int64)
        check(lambda: weighted_mean(T.embedding(table, ids), np.random.default_rng(97)),
              {"table": table}, samples=8)


def test_grad_attention():
    with T.use_dtype(np.float64):
        rng = np.random.default_rng(14)
        cu = np.array([0, 3, 5], dtype=np.int64)
        q = T.parameter(rng.standard_normal((5, 8)))
        k = T.parameter(rng.standard_normal((5, 8)))
        v = T.parameter(rng.standard_normal((5, 8)))
        check(lambda: weighted_mean(T.varlen_attention(q, k, v, cu, 2),
                                    np.random.default_rng(96)),
              {"q": q, "k": k, "v": v}, samples=6)


def test_grad_segment_pools_and_mul():
    with T.use_dtype(np.float64):
        rng = np.random.default_rng(15)
        cu = np.array([0, 2, 5], dtype=np.int64)
        x = T.parameter(rng.standard_normal((5, 3)))
        y = T.parameter(rng.standard_normal((5, 3)))
        check(lambda: weighted_mean(T.segment_mean(T.mul(x, y), cu), np.random.default_rng(95)),
              {"x": x, "y": y})
        check(lambda: weighted_mean(T.segment_sum(x, cu), np.random.default_rng(94)), {"x": x})


def test_grad_losses():
    with T.use_dtype(np.float64):
        rng = np.random.default_rng(16)
        zb = T.parameter(rng.standard_normal(6))
        yb = rng.integers(0, 2, 6)
        check(lambda: losses.binary_cross_entropy(zb, yb), {"z": zb}, samples=6)
        zc = T.parameter(rng.standard_normal((5, 4)))
        yc = rng.integers(0, 4, 5)
        check(lambda: losses.multiclass_cross_entropy(zc, yc), {"z": zc}, samples=8)
        zm = T.parameter(rng.standard_normal((4, 6)))
        ym = rng.integers(0, 2, (4, 6))
        check(lambda: losses.multilabel_cross_entropy(zm, ym), {"z": zm}, samples=8)


def test_grad_full_encoder_with_head():
    with T.use_dtype(np.float64):
        rng = np.random.default_rng(17)
        cfg = layers.EncoderConfig(layers=1, model_dim=8, heads=2, ffn_dim=16,
                                   dropout=0.0, max_len=8)
        enc = layers.TransformerEncoder(rng, cfg)
        emb = layers.Embedding(rng, 10, 8)
        head = layers.Linear(rng, 8, 1)
        ids = np.array([4, 2, 7, 1, 1], dtype=np.int64)
        cu = np.array([0, 3, 5], dtype=np.int64)
        labels = np.array([1.0, 0.0])

        def loss_fn():
            h = enc(emb(ids), cu)
            pooled = T.segment_mean(h, cu)
            logits = T.reshape(head(pooled), (2,))
            return losses.binary_cross_entropy(logits, labels)

        params = {"emb.table": emb.table, "head.w": head.w, "head.b": head.b}
        params.update(enc.params())
        check(loss_fn, params, samples=2)


# -------------------------------------------------------------- loss analytics

def test_binary_loss_analytic_values():
    z = T.parameter(np.array([0.0], dtype=np.float32))
    loss = losses.binary_cross_entropy(z, np.array([1.0]))
    assert abs(loss.item() - np.log(2.0)) < 1e-7
    loss.backward()
    assert abs(float(z.grad[0]) + 0.5) < 1e-7


def test_multiclass_loss_uniform_logits():
    z = T.parameter(np.zeros((3, 6), dtype=np.float32))
    loss = losses.multiclass_cross_entropy(z, np.array([0, 3, 5]))
    assert abs(loss.item() - np.log(6.0)) < 1e-7


def test_multilabel_loss_zero_logits_all_ones():
    z = T.parameter(np.zeros((2, 18), dtype=np.float32))
    loss = losses.multilabel_cross_entropy(z, np.ones((2, 18)))
    assert abs(loss.item() - np.log(2.0)) < 1e-7


def test_loss_label_validation():
    z1 = T.parameter(np.zeros(3, dtype=np.float32))
    with pytest.raises(LabelError):
        losses.binary_cross_entropy(z1, np.array([0.0, 2.0, 1.0]))
    with pytest.raises(ShapeError):
        losses.binary_cross_entropy(z1, np.array([0.0, 1.0]))
    z2 = T.parameter(np.zeros((2, 6), dtype=np.float32))
    with pytest.raises(LabelError):
        losses.multiclass_cross_entropy(z2, np.array([0, 6]))
    with pytest.raises(LabelError):
        losses.multiclass_cross_entropy(z2, np.array([0.5, 1.5]))
    with pytest.raises(LabelError):
        losses.multilabel_cross_entropy(z2, np.full((2, 6), 0.5))


def test_probability_transforms():
    rng = np.random.default_rng(20)
    z = rng.standard_normal((5, 7)) * 10
    p = losses.softmax(z)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    assert (p > 0).all()
    s = losses.sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert ((s >= 0) & (s <= 1)).all() and np.isfinite(s).all()
    assert abs(s[1] - 0.5) < 1e-12


def test_layernorm_zero_variance_finite():
    x = T.parameter(np.full((2, 8), 3.25, dtype=np.float32))
    gamma = T.parameter(np.ones(8, dtype=np.float32))
    beta = T.parameter(np.full(8, 0.5, dtype=np.float32))
    y = T.layernorm(x, gamma, beta)
    assert np.isfinite(y.data).all()
    assert np.allclose(y.data, 0.5, atol=1e-6)
    T.mean_all(y).backward()
    assert np.isfinite(x.grad).all()


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(21)
    x, cu = packed(rng, [5], 8, np.float32)
    _, probs = PYKERN.attention_fwd(x, x, x, cu, 2)
    assert np.allclose(probs.reshape(2, 5, 5).sum(axis=-1), 1.0, atol=1e-6)


# ------------------------------------------------------------------- tape rules

def test_backward_requires_scalar_and_graph():
    with pytest.raises(StateError):
        T.parameter(np.ones(3, dtype=np.float32)).backward()
    with pytest.raises(StateError):
        T.Tensor(np.float32(1.0)).backward()


def test_checked_mode_raises_on_nonfinite():
    bad = T.parameter(np.array([[np.inf]], dtype=np.float32))
    with T.checked_mode():
        with pytest.raises(NumericsError):
            T.gelu(bad)
    T.gelu(bad)  # unchecked mode lets it through


def test_embedding_id_range_checked():
    table = T.parameter(np.zeros((4, 2), dtype=np.float32))
    with pytest.raises(ShapeError):
        T.embedding(table, np.array([0, 4]))
    with pytest.raises(ShapeError):
        T.embedding(table, np.array([-1]))


def test_segment_mean_rejects_empty_segment():
    x = T.parameter(np.zeros((3, 2), dtype=np.float32))
    with pytest.raises(ShapeError):
        T.segment_mean(x, np.array([0, 2, 2, 3], dtype=np.int64))


# --------------------------------------------------------------------- dropout

def test_dropout_counter_determinism():
    x = T.parameter(np.ones((40, 25), dtype=np.float32))
    assert T.dropout(x, 0.3, op_id=1) is x  # eval mode: identity
    prev = (T.state.dropout_seed, T.state.dropout_step)
    try:
        with T.training_mode():
            T.state.dropout_seed, T.state.dropout_step = 7, 3
            a = T.dropout(x, 0.3, op_id=1).data.copy()
            b = T.dropout(x, 0.3, op_id=1).data.copy()
            c = T.dropout(x, 0.3, op_id=2).data.copy()
            T.state.dropout_step = 4
            d = T.dropout(x, 0.3, op_id=1).data.copy()
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)
        kept = a[a > 0]
        assert np.allclose(kept, 1.0 / 0.7, atol=1e-6)
        assert abs(a.mean() - 1.0) < 0.05
    finally:
        T.state.dropout_seed, T.state.dropout_step = prev


# ---------------------------------------------------------------------- layers

def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        layers.EncoderConfig(layers=2, model_dim=10, heads=4, ffn_dim=16,
                             dropout=0.1, max_len=8)
    with pytest.raises(ConfigError):
        layers.EncoderConfig(layers=0, model_dim=8, heads=2, ffn_dim=16,
                             dropout=0.1, max_len=8)


def test_positions_restart_per_segment():
    cu = np.array([0, 3, 5], dtype=np.int64)
    assert layers.positions_for(cu).tolist() == [0, 1, 2, 0, 1]
    assert layers.positions_for(np.array([0], dtype=np.int64)).tolist() == []


def test_encoder_rejects_overlong_segment():
    rng = np.random.default_rng(30)
    cfg = layers.EncoderConfig(layers=1, model_dim=8, heads=2, ffn_dim=16,
                               dropout=0.0, max_len=4)
    enc = layers.TransformerEncoder(rng, cfg)
    x = T.parameter(np.zeros((5, 8), dtype=np.float32))
    with pytest.raises(ShapeError):
        enc(x, np.array([0, 5], dtype=np.int64))


def test_zeroed_output_projections_pass_input_through():
    # With attention and FFN output projections zeroed, residual blocks are
    # identities and the encoder reduces to final_norm(x + positions).
    rng = np.random.default_rng(31)
    cfg = layers.EncoderConfig(layers=2, model_dim=8, heads=2, ffn_dim=16,
                               dropout=0.0, max_len=8)
    enc = layers.TransformerEncoder(rng, cfg)
    for layer in enc.layers:
        layer.attn.out.w.data[...] = 0
        layer.attn.out.b.data[...] = 0
        layer.ffn_out.w.data[...] = 0
        layer.ffn_out.b.data[...] = 0
    x = T.parameter(np.random.default_rng(32).standard_normal((5, 8)).astype(np.float32))
    cu = np.array([0, 3, 5], dtype=np.int64)
    out = enc(x, cu)
    expected = PYKERN.layernorm_fwd(
        x.data + enc.positions.table.data[layers.positions_for(cu)],
        enc.final_norm.gamma.data, enc.final_norm.beta.data, 1e-5)[0]
    assert np.allclose(out.data, expected, atol=1e-6)


def test_segment_isolation_bit_exact():
    # Perturbing one packed sequence must not change another's outputs at all.
    rng = np.random.default_rng(33)
    cfg = layers.EncoderConfig(layers=2, model_dim=16, heads=4, ffn_dim=32,
                               dropout=0.1, max_len=8)
    enc = layers.TransformerEncoder(rng, cfg)
    cu = np.array([0, 4, 7], dtype=np.int64)
    base = rng.standard_normal((7, 16)).astype(np.float32)
    out1 = enc(T.Tensor(base.copy()), cu).data
    perturbed = base.copy()
    perturbed[4:] += 1.5
    out2 = enc(T.Tensor(perturbed), cu).data
    assert np.array_equal(out1[:4], out2[:4])
    assert not np.array_equal(out1[4:], out2[4:])


def test_encoder_deterministic_same_seed():
    def run():
        rng = np.random.default_rng(41)
        cfg = layers.EncoderConfig(layers=1, model_dim=8, heads=2, ffn_dim=16,
                                   dropout=0.1, max_len=8)
        enc = layers.TransformerEncoder(rng, cfg)
        emb = layers.Embedding(rng, 12, 8)
        ids = np.array([3, 1, 4, 1, 5], dtype=np.int64)
        cu = np.array([0, 2, 5], dtype=np.int64)
        prev = (T.state.dropout_seed, T.state.dropout_step)
        try:
            with T.training_mode():
                T.state.dropout_seed, T.state.dropout_step = 11, 2
                h = enc(emb(ids), cu)
                loss = T.mean_all(h)
            return loss.item()
        finally:
            T.state.dropout_seed, T.state.dropout_step = prev

    assert run() == run()


def test_parameter_counting():
    rng = np.random.default_rng(42)
    lin = layers.Linear(rng, 4, 3)
    assert layers.count_parameters(lin.params()) == 4 * 3 + 3


# ------------------------------------------------------------------- optimizer

def test_adamw_zero_grad_zero_decay_no_change():
    p = T.parameter(np.array([1.5, -2.0], dtype=np.float32))
    opt = optim.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.zeros_like(p.data)
    opt.step()
    assert np.array_equal(p.data, np.array([1.5, -2.0], dtype=np.float32))


def test_adamw_first_step_analytic():
    p = T.parameter(np.array([2.0], dtype=np.float32))
    opt = optim.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.array([0.5], dtype=np.float32)
    opt.step()
    # mhat = g, vhat = g^2 at step 1, so the update is lr * g / (|g| + eps)
    assert abs(float(p.data[0]) - 1.9) < 1e-6

    q = T.parameter(np.array([2.0], dtype=np.float32))
    opt2 = optim.AdamW({"q": q}, lr=0.1, weight_decay=0.01)
    q.grad = np.array([0.5], dtype=np.float32)
    opt2.step()
    assert abs(float(q.data[0]) - (2.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 2.0))) < 1e-6


def test_adamw_quadratic_bowl_descends():
    target = np.array([6.0, -7.0, 5.0, 8.0], dtype=np.float32)
    w = T.parameter(np.array([2.0, -3.0, 1.0, 4.0], dtype=np.float32))
    opt = optim.AdamW({"w": w}, lr=0.02, weight_decay=0.0)
    history = []
    for _ in range(100):
        opt.zero_grad()
        diff = T.add(w, T.Tensor(-target))
        loss = T.mean_all(T.mul(diff, diff))
        loss.backward()
        opt.step()
        history.append(loss.item())
    assert history[-1] < history[0] / 2
    for earlier, later in zip(history[5:], history[6:]):
        assert later <= earlier + 1e-9


def test_adamw_checked_mode_rejects_nonfinite_grad():
    p = T.parameter(np.ones(3, dtype=np.float32))
    opt = optim.AdamW({"p": p}, lr=0.1)
    p.grad = np.array([1.0, np.nan, 0.0], dtype=np.float32)
    with T.checked_mode():
        with pytest.raises(NumericsError):
            opt.step()


# ------------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(50)
    params = {"emb.table": T.parameter(rng.standard_normal((6, 4)).astype(np.float32)),
              "head.b": T.parameter(rng.standard_normal(3).astype(np.float32))}
    cfg = {"model_dim": 4, "task": "mortality"}
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    ckpt.save_checkpoint(str(p1), cfg, params)
    loaded_cfg, loaded = ckpt.load_checkpoint(str(p1))
    assert loaded_cfg == cfg
    for name in params:
        assert np.array_equal(loaded[name], params[name].data)
    ckpt.save_checkpoint(str(p2), loaded_cfg, loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_assign_and_validation(tmp_path):
    rng = np.random.default_rng(51)
    src = {"w": T.parameter(rng.standard_normal((3, 3)).astype(np.float32))}
    path = str(tmp_path / "c.ckpt")
    ckpt.save_checkpoint(path, {}, src)
    _, loaded = ckpt.load_checkpoint(path)
    dst = {"w": T.parameter(np.zeros((3, 3), dtype=np.float32))}
    ckpt.assign_parameters(dst, loaded)
    assert np.array_equal(dst["w"].data, src["w"].data)
    with pytest.raises(ConfigError):
        ckpt.assign_parameters({"other": dst["w"]}, loaded)
    with pytest.raises(ConfigError):
        ckpt.assign_parameters({"w": T.parameter(np.zeros((2, 3), dtype=np.float32))}, loaded)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(ConfigError):
        ckpt.load_checkpoint(str(path))


def test_checkpoint_rejects_bad_version(tmp_path):
    path = str(tmp_path / "v.ckpt")
    ckpt.save_checkpoint(path, {}, {"w": T.parameter(np.zeros(2, dtype=np.float32))})
    blob = bytearray(open(path, "rb").read())
    # bump the version digit inside the JSON header
    idx = blob.find(b'"format_version":1')
    blob[idx + len(b'"format_version":'):idx + len(b'"format_version":') + 1] = b"9"
    open(path, "wb").write(bytes(blob))
    with pytest.raises(ConfigError):
        ckpt.load_checkpoint(path)
