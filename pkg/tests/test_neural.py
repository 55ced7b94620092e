import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmdlife import aligner
from cmdlife.errors import NoData, NonFinite, SchemaMismatch, ValidationError
from cmdlife.neural import layers as L
from cmdlife.neural.loss import LossVariant, loss_joint, smooth_l1
from cmdlife.neural.model import (
    ModelConfig,
    attention,
    backward,
    forward,
    init_params,
    tiny_config,
    transformer_encode,
)
from cmdlife.neural.train import (
    Adam,
    Checkpoint,
    TrainConfig,
    cosine_lr,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    train,
)

SMALL = ModelConfig(d_mlp=8, d_seq_hidden=8, n_heads=2, d_ffn=8, d_img=8, cnn_channels=(4, 4), fusion_hidden=8,
                    img_size=32)


def random_batch(cfg, n, rng):
    return {
        "struct": rng.normal(size=(n, cfg.d_struct_in)),
        "seq": rng.normal(size=(n, cfg.seq_len, cfg.d_seq_in)),
        "hist": rng.random((n, cfg.img_size, cfg.img_size, cfg.img_channels)),
        "snap": rng.random((n, cfg.img_size, cfg.img_size, cfg.img_channels)),
    }


# ---------------------------------------------------------------- loop reference


def _vec_mat(x, w, b):
    return [b[j] + sum(x[i] * w[i][j] for i in range(len(x))) for j in range(len(b))]


def _ln(x, g, b):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + 1e-5) * gg + bb for v, gg, bb in zip(x, g, b)]


def _relu(x):
    return [max(v, 0.0) for v in x]


def _block(p, name, x):
    return _relu(_ln(_vec_mat(x, p[name + ".w"], p[name + ".b"]), p[name + ".ln.g"], p[name + ".ln.b"]))


def _conv(img, w, b):
    h, wd, c = len(img), len(img[0]), len(img[0][0])
    ho, wo = (h - 1) // 2 + 1, (wd - 1) // 2 + 1
    out = [[[0.0] * len(b) for _ in range(wo)] for _ in range(ho)]
    for i in range(ho):
        for j in range(wo):
            for co in range(len(b)):
                acc = b[co]
                for ki in range(3):
                    for kj in range(3):
                        r, q = 2 * i + ki - 1, 2 * j + kj - 1
                        if 0 <= r < h and 0 <= q < wd:
                            for ci in range(c):
                                acc += img[r][q][ci] * w[(ki * 3 + kj) * c + ci][co]
                out[i][j][co] = max(acc, 0.0)
    return out


def _cnn(p, key, img, cfg):
    for k in range(len(cfg.cnn_channels)):
        img = _conv(img, p[f"{key}.c{k}.w"], p[f"{key}.c{k}.b"])
    cells = [px for row in img for px in row]
    pooled = [sum(px[c] for px in cells) / len(cells) for c in range(len(cells[0]))]
    return _vec_mat(pooled, p[f"{key}.proj.w"], p[f"{key}.proj.b"])


def _encoder(p, seq, cfg):
    d, nh = cfg.d_seq_hidden, cfg.n_heads
    dh = d // nh
    h = [[v + pos for v, pos in zip(_vec_mat(x, p["seq.in.w"], p["seq.in.b"]), p["seq.pos"][t])]
         for t, x in enumerate(seq)]
    maps = []
    for l in range(cfg.n_layers):
        n = f"seq.l{l}"
        qkv = [_vec_mat(x, p[n + ".qkv.w"], p[n + ".qkv.b"]) for x in h]
        T = len(h)
        heads_out = [[0.0] * d for _ in range(T)]
        layer_maps = []
        for hd in range(nh):
            cols = range(hd * dh, (hd + 1) * dh)
            amap = []
            for t in range(T):
                s = [sum(qkv[t][c] * qkv[u][d + c] for c in cols) / math.sqrt(dh) for u in range(T)]
                m = max(s)
                e = [math.exp(v - m) for v in s]
                a = [v / sum(e) for v in e]
                amap.append(a)
                for c in cols:
                    heads_out[t][c] = sum(a[u] * qkv[u][2 * d + c] for u in range(T))
            layer_maps.append(amap)
        maps.append(layer_maps)
        att = [_vec_mat(o, p[n + ".o.w"], p[n + ".o.b"]) for o in heads_out]
        h1 = [_ln([a + b for a, b in zip(x, y)], p[n + ".ln1.g"], p[n + ".ln1.b"]) for x, y in zip(h, att)]
        ff = [_vec_mat(_relu(_vec_mat(x, p[n + ".ff1.w"], p[n + ".ff1.b"])), p[n + ".ff2.w"], p[n + ".ff2.b"])
              for x in h1]
        h = [_ln([a + b for a, b in zip(x, y)], p[n + ".ln2.g"], p[n + ".ln2.b"]) for x, y in zip(h1, ff)]
    return [sum(x[c] for x in h) / len(h) for c in range(d)], maps


def reference_forward(p, cfg, sample):
    p = {k: v.tolist() for k, v in p.items()}
    s = _block(p, "s1", _block(p, "s0", sample["struct"].tolist()))
    hist = _cnn(p, "hist", sample["hist"].tolist(), cfg)
    snap = _cnn(p, "snap", sample["snap"].tolist(), cfg)
    q, maps = _encoder(p, sample["seq"].tolist(), cfg)
    f = _block(p, "fuse", s + hist + snap + q)
    return _vec_mat(f, p["out.w"], p["out.b"]), maps


def perturbed_params(cfg, seed):
    p = init_params(cfg, seed)
    r = np.random.default_rng(seed + 7)
    for k in p:
        if k.endswith(".b") or k.endswith(".g"):
            p[k] = p[k] + 0.3 * r.normal(size=p[k].shape)
    return p


def test_forward_matches_loop_reference():
    cfg = tiny_config(d_mlp=2, d_seq_hidden=2, n_heads=1, d_ffn=2, d_img=2, cnn_channels=(2,), fusion_hidden=2,
                      n_layers=1)
    rng = np.random.default_rng(3)
    p = perturbed_params(cfg, 3)
    batch = random_batch(cfg, 2, rng)
    fwd = forward(p, cfg, batch)
    for i in range(2):
        out, maps = reference_forward(p, cfg, {k: v[i] for k, v in batch.items()})
        np.testing.assert_allclose(fwd.out[i], out, rtol=0, atol=1e-9)
        np.testing.assert_allclose(fwd.attention[0][i], np.array(maps[0]), rtol=0, atol=1e-9)


def test_forward_matches_loop_reference_two_layers_two_heads():
    cfg = tiny_config()
    rng = np.random.default_rng(4)
    p = perturbed_params(cfg, 4)
    batch = random_batch(cfg, 1, rng)
    fwd = forward(p, cfg, batch)
    out, maps = reference_forward(p, cfg, {k: v[0] for k, v in batch.items()})
    np.testing.assert_allclose(fwd.out[0], out, rtol=0, atol=1e-9)
    for l in range(cfg.n_layers):
        np.testing.assert_allclose(fwd.attention[l][0], np.array(maps[l]), rtol=0, atol=1e-9)


def test_zero_weights_pass_only_the_bias(rng):
    cfg = tiny_config()
    p = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
    p["out.b"] = np.array([1.25, -0.5])
    out = forward(p, cfg, random_batch(cfg, 4, rng)).out
    np.testing.assert_array_equal(out, np.tile([1.25, -0.5], (4, 1)))


def test_eval_mode_is_pure_train_mode_is_not(rng):
    cfg = tiny_config()
    p = init_params(cfg, 1)
    batch = random_batch(cfg, 3, rng)
    a, b = forward(p, cfg, batch), forward(p, cfg, batch)
    np.testing.assert_array_equal(a.out, b.out)
    for x, y in zip(a.attention, b.attention):
        np.testing.assert_array_equal(x, y)
    t1 = forward(p, cfg, batch, train=True, rng=np.random.default_rng(1)).out
    t2 = forward(p, cfg, batch, train=True, rng=np.random.default_rng(2)).out
    assert not np.array_equal(t1, t2)


def test_schema_mismatch(rng):
    cfg = tiny_config()
    p = init_params(cfg)
    batch = random_batch(cfg, 2, rng)
    batch["seq"] = batch["seq"][:, :4]
    with pytest.raises(SchemaMismatch):
        forward(p, cfg, batch)
    with pytest.raises(SchemaMismatch):
        transformer_encode(p, np.zeros((1, 3, 4)), cfg)


def test_default_fusion_width():
    assert ModelConfig().fusion_in == 1280
    with pytest.raises(ValidationError):
        ModelConfig(d_seq_hidden=10, n_heads=4)


# ---------------------------------------------------------------- attention


def test_equal_logits_give_uniform_rows(rng):
    cfg = ModelConfig()
    p = init_params(cfg, 0)
    d = cfg.d_seq_hidden
    for l in range(cfg.n_layers):
        p[f"seq.l{l}.qkv.w"][:, :2 * d] = 0.0
        p[f"seq.l{l}.qkv.b"][:2 * d] = 0.0
    _, maps = transformer_encode(p, rng.normal(size=(2, 60, 4)), cfg)
    for m in maps:
        assert m.shape == (2, cfg.n_heads, 60, 60)
        np.testing.assert_allclose(m, 1.0 / 60.0, rtol=0, atol=1e-15)


def test_two_step_closed_form_softmax():
    p = {"a.qkv.w": np.array([[1.0, 0.0, 2.0, 0.0, 1.0, 0.0],
                              [0.0, 1.0, 0.0, -1.0, 0.0, 1.0]]),
         "a.qkv.b": np.zeros(6), "a.o.w": np.eye(2), "a.o.b": np.zeros(2)}
    h = np.array([[[0.5, 1.0], [2.0, -1.0]]])
    out, amap, _ = attention(p, "a", h, 1)
    q, k = h[0], h[0] @ np.array([[2.0, 0.0], [0.0, -1.0]])
    for t in range(2):
        s0, s1 = (q[t] @ k[0]) / math.sqrt(2), (q[t] @ k[1]) / math.sqrt(2)
        a0 = 1.0 / (1.0 + math.exp(s1 - s0))
        np.testing.assert_allclose(amap[0, 0, t], [a0, 1.0 - a0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(out[0, t], a0 * h[0, 0] + (1 - a0) * h[0, 1], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 30.0))
def test_attention_rows_are_distributions(seed, scale):
    cfg = replace(SMALL, img_size=8)
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed)
    _, maps = transformer_encode(p, scale * rng.normal(size=(2, 60, 4)), cfg)
    for m in maps:
        assert m.min() >= 0.0
        np.testing.assert_allclose(m.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- loss


def test_loss_examples():
    assert loss_joint([1.0, 2.0], [1.0, 2.0]) == (0.0, pytest.approx(np.zeros(2)))
    loss, g = loss_joint([0.5, 0.0], [0.0, 0.0])
    assert loss == 0.125 and g.tolist() == [0.5, 0.0]
    loss, g = loss_joint([2.0, 0.0], [0.0, 0.0])
    assert loss == 1.5 and g.tolist() == [1.0, 0.0]
    assert loss_joint([0.0, 2.0], [0.0, 0.0], "mixed")[0] == 4.0
    assert loss_joint([0.0, 2.0], [0.0, 0.0], "uniform")[0] == 1.5


def test_smooth_l1_continuous_at_one():
    v, _ = smooth_l1(np.array([1.0 - 1e-12, 1.0, 1.0 + 1e-12]))
    np.testing.assert_allclose(v, 0.5, atol=1e-11)


@settings(max_examples=100)
@given(st.lists(st.floats(-5, 5), min_size=8, max_size=8), st.sampled_from(list(LossVariant)))
def test_loss_gradient_matches_differences(vals, variant):
    pred, tgt = np.array(vals[:4]).reshape(2, 2), np.array(vals[4:]).reshape(2, 2)
    _, g = loss_joint(pred, tgt, variant)
    h = 1e-6
    for idx in np.ndindex(pred.shape):
        if abs(abs(pred[idx] - tgt[idx]) - 1.0) < 1e-3:
            continue  # smooth-L1 corner
        up, dn = pred.copy(), pred.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (loss_joint(up, tgt, variant)[0] - loss_joint(dn, tgt, variant)[0]) / (2 * h)
        assert abs(fd - g[idx]) < 1e-5


def test_loss_rejects_non_finite():
    with pytest.raises(NonFinite):
        loss_joint([np.nan, 0.0], [0.0, 0.0])


# ---------------------------------------------------------------- layers and gradients


def test_conv_matches_loops(rng):
    x = rng.normal(size=(1, 7, 6, 2))
    w = rng.normal(size=(18, 3))
    b = rng.normal(size=3)
    y, _ = L.conv3s2(x, w, b)
    ref = np.array(_conv(x[0].tolist(), w.tolist(), b.tolist()))
    np.testing.assert_allclose(np.maximum(y[0], 0.0), ref, atol=1e-12)


def test_layer_backward_by_differences(rng):
    def check(f, x, dy, dx):
        h = 1e-6
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            x[idx] += h
            up = (f(x) * dy).sum()
            x[idx] -= 2 * h
            dn = (f(x) * dy).sum()
            x[idx] += h
            fd[idx] = (up - dn) / (2 * h)
        np.testing.assert_allclose(dx, fd, atol=1e-7)

    x = rng.normal(size=(2, 5, 5, 2))
    w, b = rng.normal(size=(18, 3)), rng.normal(size=3)
    y, cache = L.conv3s2(x, w, b)
    dy = rng.normal(size=y.shape)
    dx, dw, db = L.conv3s2_back(dy, cache, w)
    check(lambda v: L.conv3s2(v, w, b)[0], x, dy, dx)
    check(lambda v: L.conv3s2(x, v, b)[0], w, dy, dw)

    x = rng.normal(size=(3, 6))
    g, bb = rng.normal(size=6), rng.normal(size=6)
    y, cache = L.layernorm(x, g, bb)
    dy = rng.normal(size=y.shape)
    check(lambda v: L.layernorm(v, g, bb)[0], x, dy, L.layernorm_back(dy, cache, g)[0])

    s = rng.normal(size=(2, 4))
    a = L.softmax(s)
    da = rng.normal(size=a.shape)
    check(lambda v: L.softmax(v), s, da, L.softmax_back(da, a))


@pytest.mark.parametrize("seed,variant", [(0, "mixed"), (1, "uniform"), (2, "mixed"), (3, "uniform")])
def test_gradient_check_tiny(seed, variant):
    assert gradient_check(tiny_config(), seed=seed, variant=variant) < 1e-4


def test_gradient_check_nudged_parameters():
    cfg = tiny_config()
    base = perturbed_params(cfg, 5)
    nudged = {k: v + 1e-3 * np.random.default_rng(9).normal(size=v.shape) for k, v in base.items()}
    e0 = gradient_check(cfg, seed=5, params=base, skip_kinks=False)
    e1 = gradient_check(cfg, seed=5, params=nudged, skip_kinks=False)
    assert e0 < 1e-4 and e1 < 1e-4


def test_output_bias_gradient_is_loss_gradient(rng):
    cfg = tiny_config(dropout=0.0)
    p = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
    p["out.b"] = np.array([0.3, -0.2])
    batch = {k: np.zeros_like(v) for k, v in random_batch(cfg, 3, rng).items()}
    fwd = forward(p, cfg, batch)
    _, dout = loss_joint(fwd.out, rng.normal(size=(3, 2)))
    grads = backward(p, cfg, fwd, dout)
    np.testing.assert_array_equal(grads["out.b"], dout.sum(axis=0))


# ---------------------------------------------------------------- training


@pytest.mark.parametrize("epoch", [0, 1, 7, 25, 49, 50])
def test_cosine_schedule(epoch):
    assert abs(cosine_lr(1e-5, epoch, 50) - 1e-5 * (1 + math.cos(math.pi * epoch / 50)) / 2) <= 1e-12


def test_adam_first_step():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -4.0, 1e-3])}
    Adam(p).step(p, g, 0.01)
    np.testing.assert_allclose(p["w"], [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)], atol=1e-12)


def _train(ds, **kw):
    cfg = replace(SMALL, d_struct_in=len(ds.feature_names))
    return train(ds, cfg, TrainConfig(lr=1e-3, epochs=3, batch=8, **kw))


def test_training_is_deterministic(small_dataset, tmp_path):
    a = _train(small_dataset, seed=4, augment_jitter=0.1)
    b = _train(small_dataset, seed=4, augment_jitter=0.1)
    assert a.history == b.history
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert [c.epoch for c in a.checkpoints] == [c.epoch for c in b.checkpoints]
    c = _train(small_dataset, seed=5)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_training_ignores_sample_order(small_dataset):
    shuffled = aligner.Dataset(list(reversed(small_dataset.samples)), small_dataset.stats, small_dataset.meta)
    a, b = _train(small_dataset), _train(shuffled)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_checkpoints_on_disk(small_dataset, tmp_path):
    cfg = replace(SMALL, d_struct_in=len(small_dataset.feature_names))
    res = train(small_dataset, cfg, TrainConfig(lr=1e-3, epochs=6, batch=8, keep_top=1), tmp_path)
    on_disk = sorted(p.name for p in tmp_path.glob("ckpt_*.bin"))
    assert on_disk == sorted(c.path.rsplit("/", 1)[1] for c in res.checkpoints)
    for cat in ("offset", "duration", "overall"):
        assert len(res.top(cat, 1)) == 1
    assert (tmp_path / "history_mixed.json").exists()
    assert res.history[0]["lr"] == 1e-3


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config()
    ck = Checkpoint(init_params(cfg, 2), cfg, TrainConfig(epochs=3), 2, ("offset",), {"offset": 1.5},
                    {"target_mean": [1.0, 2.0], "target_std": [3.0, 4.0]})
    save_checkpoint(ck, tmp_path / "c.bin")
    back = load_checkpoint(tmp_path / "c.bin")
    assert list(back.params) == list(ck.params)
    for k in ck.params:
        assert back.params[k].tobytes() == ck.params[k].tobytes()
    assert (back.model_config, back.train_config, back.epoch, back.tags) == (cfg, ck.train_config, 2, ("offset",))
    save_checkpoint(back, tmp_path / "d.bin")
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"nope" * 10)
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "bad.bin")


def test_empty_training_split(small_dataset):
    empty = aligner.Dataset([], small_dataset.stats)
    with pytest.raises(NoData):
        train(empty, SMALL, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(loss_variant="huber")


@pytest.mark.slow
def test_loss_decreases_on_200_samples(trained_500):
    sub = trained_500["dataset"].samples[:200]
    samples = [replace(s) for s in sub]
    ds = aligner.Dataset(samples, aligner.compute_stats(samples), {})
    res = train(ds, trained_500["model_config"], TrainConfig(epochs=50))
    assert res.final_train_loss < res.initial_train_loss
