"""Small self-contained example checks shared between the module tests and
the acceptance suite's equation-exactness gate.

Each check asserts one documented behaviour. Exact expectations are
asserted bit-exactly; derived expectations are computed in place by an
independent oracle (plain scalar math, naive DFT, analytic filter response,
brute-force enumeration) and compared within 1e-6 relative tolerance.
"""

from __future__ import annotations

import functools
import math

import numpy as np

from dvmer import curriculum as cur
from dvmer import data as dk
from dvmer import features as F
from dvmer import memory as mem
from dvmer import nncore as nc
from dvmer import training as tr
from dvmer.model import DualViewModel, ModelConfig
from dvmer.nncore import Tensor

RTOL = 1e-6

EXAMPLES: list = []


def example(label):
    def wrap(fn):
        EXAMPLES.append((label, fn))
        return fn
    return wrap


def close(a, b, rtol=RTOL, atol=1e-9):
    np.testing.assert_allclose(a, b, rtol=rtol, atol=atol)


# -- features ----------------------------------------------------------------

SR = 44100


@functools.lru_cache(maxsize=None)
def default_cfg() -> F.FeatureConfig:
    return F.FeatureConfig()


@functools.lru_cache(maxsize=None)
def silence_pair():
    cfg = default_cfg()
    seg = F.AudioSegment(np.zeros(cfg.segment_len), SR, 15.0)
    return F.extract_pair(seg, cfg)


@functools.lru_cache(maxsize=None)
def sine_segment(freq: float):
    cfg = default_cfg()
    t = np.arange(cfg.segment_len) / SR
    return F.AudioSegment(0.5 * np.sin(2.0 * np.pi * freq * t), SR, 15.0)


@example("features.select_segment.long_track")
def _():
    track = np.arange(300 * SR, dtype=np.float64)
    seg = F.select_segment(track, SR)
    assert seg.samples.shape[0] == 60 * SR
    assert np.array_equal(seg.samples, track[15 * SR:75 * SR])


@example("features.select_segment.zero_track")
def _():
    seg = F.select_segment(np.zeros(120 * SR), SR)
    assert seg.samples.shape[0] == 60 * SR and not seg.samples.any()


@example("features.select_segment.short_track_padded")
def _():
    track = np.ones(60 * SR)
    seg = F.select_segment(track, SR)
    assert np.array_equal(seg.samples[:45 * SR], np.ones(45 * SR))
    assert not seg.samples[45 * SR:].any()


@example("features.pre_emphasis.constant")
def _():
    y = F.pre_emphasis(np.ones(5))
    close(y, [1.0, 0.03, 0.03, 0.03, 0.03], rtol=0, atol=1e-15)


@example("features.pre_emphasis.zero")
def _():
    assert not F.pre_emphasis(np.zeros(8)).any()


@example("features.pre_emphasis.impulse")
def _():
    x = np.zeros(5)
    x[0] = 1.0
    assert np.array_equal(F.pre_emphasis(x), [1.0, -0.97, 0.0, 0.0, 0.0])


@example("features.mel.silence_floor")
def _():
    pair = silence_pair()
    assert np.all(pair.mel == np.float32(np.log(1e-10)))


@example("features.mel.row_count")
def _():
    assert silence_pair().mel.shape[0] == 128


@example("features.mel.sine_band_localisation")
def _():
    # default config: the argmax band's passband must contain the tone
    cfg = default_cfg()
    mel = F.mel_spectrogram(sine_segment(1000.0), cfg)
    bands = np.argmax(mel.values, axis=0)
    edges = F.mel_to_hz(np.linspace(F.hz_to_mel(cfg.mel_fmin), F.hz_to_mel(cfg.mel_fmax), cfg.mel_bands + 2))
    for b in np.unique(bands):
        assert edges[b] < 1000.0 < edges[b + 2]

    # reduced config: one frame's band energies vs a naive DFT oracle
    small = F.FeatureConfig(frame_len=2048, hop=1024)
    seg = sine_segment(1000.0)
    power = F.windowed_power_spectra(seg, small)
    pipeline_energy = F.mel_energies_from_spectra(power, small)[:, 0]

    emphasised = F.pre_emphasis(seg.samples, small.preemphasis)
    frame = emphasised[:2048] * np.hamming(2048)
    n_fft = small.n_fft
    k = np.arange(n_fft // 2 + 1)
    n_idx = np.arange(2048)
    dft = np.exp(-2j * np.pi * np.outer(k, n_idx) / n_fft) @ frame
    oracle_energy = F.mel_filterbank(small) @ (np.abs(dft) ** 2)
    mask = oracle_energy > 1e-12
    close(pipeline_energy[mask], oracle_energy[mask], rtol=RTOL)


@example("features.coch.dimensions")
def _():
    assert silence_pair().coch.shape == (84, 87)


@example("features.coch.silence_floor")
def _():
    pair = silence_pair()
    assert np.all(pair.coch == np.float32(np.log10(1e-10 ** 0.3)))


@example("features.coch.centre_tone_localisation")
def _():
    cfg = default_cfg()
    centers = F.gammatone_center_frequencies(cfg)
    channel = 40
    coch = F.cochleagram(sine_segment(float(centers[channel])), cfg)
    assert np.all(np.argmax(coch.values, axis=0) == channel)
    # oracle: analytic magnitude response of every channel at the tone
    responses = F.gammatone_magnitude(centers[channel], centers, cfg.gammatone_order)
    assert int(np.argmax(responses)) == channel


# -- numeric core --------------------------------------------------------------


@example("nncore.linear.identity")
def _():
    x = Tensor(np.array([1.5, -2.0, 3.0]))
    w = Tensor(np.eye(3, dtype=np.float32))
    b = Tensor(np.zeros(3, dtype=np.float32))
    assert np.array_equal(nc.linear(x, w, b).data, x.data)


@example("nncore.linear.zero_weight")
def _():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    w = Tensor(np.zeros((2, 2), dtype=np.float32))
    b = Tensor(np.array([0.7, -0.3], dtype=np.float32))
    out = nc.linear(x, w, b)
    assert np.array_equal(out.data, np.broadcast_to(b.data, (2, 2)))


@example("nncore.linear.hand_product")
def _():
    out = nc.linear(
        Tensor(np.array([1.0, 2.0])),
        Tensor(np.array([[1.0, 1.0], [0.0, 1.0]])),
        Tensor(np.array([0.5, 0.0])),
    )
    close(out.data, [3.5, 2.0])


@example("nncore.softmax.symmetric")
def _():
    for tau in (0.3, 1.0, 4.0):
        p = nc.softmax(Tensor(np.zeros(2)), temperature=tau)
        close(p.data, [0.5, 0.5], rtol=0, atol=1e-12)


@example("nncore.softmax.hand_values")
def _():
    p = nc.softmax(Tensor(np.array([2.0, 0.0], dtype=np.float64)), temperature=1.0)
    oracle = np.array([math.exp(2.0), 1.0]) / (math.exp(2.0) + 1.0)
    close(p.data, oracle)


@example("nncore.softmax.temperature_flattens")
def _():
    z = Tensor(np.array([1.0, 0.0], dtype=np.float64))
    prev = 1.0
    for tau in (0.5, 1.0, 2.0, 5.0, 20.0):
        p1 = float(nc.softmax(z, temperature=tau).data[0])
        assert 0.5 < p1 < prev
        prev = p1


@example("nncore.layer_norm.constant_token")
def _():
    x = Tensor(np.full((1, 4), 3.3))
    g = Tensor(np.ones(4, dtype=np.float32))
    b = Tensor(np.zeros(4, dtype=np.float32))
    close(nc.layer_norm(x, g, b).data, np.zeros((1, 4)), rtol=0, atol=1e-5)


@example("nncore.layer_norm.standardised_token")
def _():
    x = np.array([[-1.0, 1.0]], dtype=np.float64)  # mean 0, var 1
    out = nc.layer_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(2), dtype=np.float64),
                        Tensor(np.zeros(2), dtype=np.float64), eps=1e-12)
    close(out.data, x, rtol=1e-5)


@example("nncore.layer_norm.hand_values")
def _():
    out = nc.layer_norm(Tensor(np.array([[1.0, 3.0]], dtype=np.float64), dtype=np.float64),
                        Tensor(np.ones(2), dtype=np.float64),
                        Tensor(np.zeros(2), dtype=np.float64), eps=1e-12)
    close(out.data, [[-1.0, 1.0]], rtol=1e-5)


def _identity_mha(dim: int) -> nc.MultiHeadAttention:
    mha = nc.MultiHeadAttention(dim, 1, np.random.default_rng(0), dtype=np.float64)
    eye = np.eye(dim)
    for w in (mha.wq, mha.wk, mha.wv, mha.wo):
        w.data = eye.copy()
    for b in (mha.bq, mha.bk, mha.bv, mha.bo):
        b.data = np.zeros(dim)
    return mha


@example("nncore.mha.single_key")
def _():
    rng = np.random.default_rng(3)
    mha = nc.MultiHeadAttention(4, 2, rng, dtype=np.float64)
    q = Tensor(rng.normal(size=(1, 3, 4)), dtype=np.float64)
    kv = Tensor(rng.normal(size=(1, 1, 4)), dtype=np.float64)
    out = mha(q, kv, kv).data
    # softmax over one key is 1: every query sees the same projected value
    projected = (kv.data @ mha.wv.data.T + mha.bv.data) @ mha.wo.data.T + mha.bo.data
    for row in range(3):
        close(out[0, row], projected[0, 0])


@example("nncore.mha.identical_keys_average")
def _():
    rng = np.random.default_rng(4)
    mha = nc.MultiHeadAttention(4, 2, rng, dtype=np.float64)
    q = Tensor(rng.normal(size=(1, 2, 4)), dtype=np.float64)
    key = rng.normal(size=(1, 1, 4))
    keys = Tensor(np.repeat(key, 5, axis=1), dtype=np.float64)
    values = Tensor(rng.normal(size=(1, 5, 4)), dtype=np.float64)
    out = mha(q, keys, values).data
    v_proj = values.data @ mha.wv.data.T + mha.bv.data
    expected = (v_proj.mean(axis=1, keepdims=True) @ mha.wo.data.T + mha.bo.data)
    for row in range(2):
        close(out[0, row], expected[0, 0])


@example("nncore.mha.hand_two_tokens")
def _():
    mha = _identity_mha(2)
    q = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    kv = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = mha(Tensor(q, dtype=np.float64), Tensor(kv, dtype=np.float64), Tensor(kv, dtype=np.float64)).data
    # oracle: softmax(q k^T / sqrt(2)) v evaluated with plain numpy
    scores = q[0] @ kv[0].T / math.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn = e / e.sum(axis=1, keepdims=True)
    close(out[0], attn @ kv[0])


@example("nncore.gelu.origin")
def _():
    assert float(nc.gelu(Tensor(np.zeros(1))).data[0]) == 0.0


@example("nncore.gelu.asymptotes")
def _():
    x = np.array([50.0, -10.0], dtype=np.float64)
    out = nc.gelu(Tensor(x, dtype=np.float64)).data
    close(out[0], 50.0)
    assert abs(out[1]) < 1e-8


@example("nncore.gelu.unit_point")
def _():
    out = float(nc.gelu(Tensor(np.array([1.0]), dtype=np.float64)).data[0])
    oracle = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    close(out, oracle)


@example("nncore.gradient_check.linear")
def _():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 4)), dtype=np.float64, requires_grad=True)
    w = Tensor(rng.normal(size=(2, 4)), dtype=np.float64, requires_grad=True)
    b = Tensor(rng.normal(size=(2,)), dtype=np.float64, requires_grad=True)
    proj = rng.normal(size=(3, 2))
    fn = lambda: nc.tsum(nc.mul(nc.linear(x, w, b), Tensor(proj, dtype=np.float64)))
    report = nc.gradient_check(fn, {"x": x, "w": w, "b": b}, step=1e-4, op_name="linear")
    assert report.max_rel_error < 1e-6


@example("nncore.gradient_check.constant_zero")
def _():
    x = Tensor(np.ones(3), dtype=np.float64, requires_grad=True)
    fn = lambda: nc.tsum(nc.mul(x, 0.0))
    report = nc.gradient_check(fn, {"x": x}, op_name="constant")
    assert report.max_rel_error == 0.0


# -- dual-view model ------------------------------------------------------------


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(embed_dim=8, fusion_dim=8, heads=2, layers=1, dropout=0.0,
                positional=False, mel_bands=6, coch_channels=5, frame_count=4)
    base.update(kw)
    return ModelConfig(**base)


@example("model.tokenize.default_shapes")
def _():
    cfg = ModelConfig()
    model = DualViewModel(cfg, np.random.default_rng(0))
    tokens = model.tokenize_views(np.zeros((2, 128, 87), dtype=np.float32), np.zeros((2, 84, 87), dtype=np.float32))
    assert tokens.h_mel.shape == (2, 87, 128)
    assert tokens.h_coch.shape == (2, 87, 128)


@example("model.tokenize.zero_gram_gives_bias")
def _():
    model = DualViewModel(tiny_model_config(), np.random.default_rng(1))
    tokens = model.tokenize_views(np.zeros((1, 6, 4), dtype=np.float32), np.zeros((1, 5, 4), dtype=np.float32))
    for frame in range(4):
        close(tokens.h_mel.data[0, frame], model.mel_proj_b.data, rtol=0, atol=0)
        close(tokens.h_coch.data[0, frame], model.coch_proj_b.data, rtol=0, atol=0)


@example("model.tokenize.one_hot_projection")
def _():
    model = DualViewModel(tiny_model_config(), np.random.default_rng(2))
    w = np.zeros((8, 6), dtype=np.float32)
    w[:6, :6] = np.eye(6)  # identity-padded projection
    model.mel_proj_w.data = w
    model.mel_proj_b.data = np.zeros(8, dtype=np.float32)
    mel = np.zeros((1, 6, 4), dtype=np.float32)
    mel[0, 3, 2] = 1.0  # one-hot band 3 in frame 2
    tokens = model.tokenize_views(mel, np.zeros((1, 5, 4), dtype=np.float32))
    expected = np.zeros(8, dtype=np.float32)
    expected[3] = 1.0
    assert np.array_equal(tokens.h_mel.data[0, 2], expected)


@example("model.cross_view.shape_preserved")
def _():
    model = DualViewModel(tiny_model_config(), np.random.default_rng(3))
    rng = np.random.default_rng(0)
    tokens = model.tokenize_views(rng.normal(size=(2, 6, 4)).astype(np.float32),
                                  rng.normal(size=(2, 5, 4)).astype(np.float32))
    out = model.cross_layers[0](tokens, 0.0, None, False)
    assert out.h_mel.shape == tokens.h_mel.shape
    assert out.h_coch.shape == tokens.h_coch.shape


@example("model.cross_view.zeroed_branches_reduce_to_norms")
def _():
    from dvmer.model import CrossViewLayer
    layer = CrossViewLayer(8, 2, 4, np.random.default_rng(4), np.float64)
    for direction in (layer.mel_from_coch, layer.coch_from_mel):
        direction.attn.wv.data[:] = 0.0
        direction.attn.bv.data[:] = 0.0
        direction.attn.wo.data[:] = 0.0
        direction.attn.bo.data[:] = 0.0
        direction.ffn.w2.data[:] = 0.0
        direction.ffn.b2.data[:] = 0.0
    rng = np.random.default_rng(5)
    from dvmer.model import TokenSet
    h_mel = Tensor(rng.normal(size=(2, 3, 8)), dtype=np.float64)
    h_coch = Tensor(rng.normal(size=(2, 4, 8)), dtype=np.float64)
    out = layer(TokenSet(h_mel, h_coch), 0.0, None, False)

    def ln(x, direction, which):
        g = direction.ln1_g if which == 1 else direction.ln2_g
        b = direction.ln1_b if which == 1 else direction.ln2_b
        return nc.layer_norm(Tensor(x, dtype=np.float64), g, b).data

    close(out.h_mel.data, ln(ln(h_mel.data, layer.mel_from_coch, 1), layer.mel_from_coch, 2), rtol=1e-12)
    close(out.h_coch.data, ln(ln(h_coch.data, layer.coch_from_mel, 1), layer.coch_from_mel, 2), rtol=1e-12)


@example("model.cross_view.mirrored_parameters_swap")
def _():
    from dvmer.model import CrossViewLayer, TokenSet
    layer = CrossViewLayer(8, 2, 4, np.random.default_rng(6), np.float64)
    mirrored = CrossViewLayer(8, 2, 4, np.random.default_rng(7), np.float64)
    mirrored.mel_from_coch, mirrored.coch_from_mel = layer.coch_from_mel, layer.mel_from_coch
    rng = np.random.default_rng(8)
    a = Tensor(rng.normal(size=(1, 3, 8)), dtype=np.float64)
    b = Tensor(rng.normal(size=(1, 4, 8)), dtype=np.float64)
    out = layer(TokenSet(a, b), 0.0, None, False)
    swapped = mirrored(TokenSet(b, a), 0.0, None, False)
    assert np.array_equal(out.h_mel.data, swapped.h_coch.data)
    assert np.array_equal(out.h_coch.data, swapped.h_mel.data)


@example("model.encode.identical_tokens_pool_to_token")
def _():
    from dvmer.model import TokenSet
    model = DualViewModel(tiny_model_config(layers=0), np.random.default_rng(9))
    token = np.random.default_rng(1).normal(size=(1, 1, 8)).astype(np.float32)
    tokens = TokenSet(Tensor(np.repeat(token, 5, axis=1)), Tensor(np.repeat(token, 3, axis=1)))
    out = model.encode(tokens)
    close(out.z_mel.data[0], token[0, 0], rtol=1e-5)
    close(out.z_coch.data[0], token[0, 0], rtol=1e-5)


@example("model.encode.default_depth_and_fusion_dim")
def _():
    cfg = ModelConfig()
    model = DualViewModel(cfg, np.random.default_rng(10))
    assert len(model.cross_layers) == 2
    out = model.forward(np.zeros((1, 128, 87), dtype=np.float32), np.zeros((1, 84, 87), dtype=np.float32))
    assert out.z_fuse.shape == (1, 256)


@example("model.classify.zero_features_uniform")
def _():
    from dvmer.model import BranchOutputs
    model = DualViewModel(tiny_model_config(), np.random.default_rng(11))
    for w, b in ((model.head_mel_w, model.head_mel_b), (model.head_coch_w, model.head_coch_b),
                 (model.head_fuse_w, model.head_fuse_b)):
        b.data[:] = 0.0
    zero = Tensor(np.zeros((2, 8), dtype=np.float32))
    out = model.classify(BranchOutputs(z_mel=zero, z_coch=zero, z_fuse=zero))
    for logits in (out.logits_mel, out.logits_coch, out.logits_fuse):
        close(nc.softmax(logits).data, np.full((2, 2), 0.5), rtol=0, atol=1e-7)


@example("model.classify.constant_confident_head")
def _():
    from dvmer.model import BranchOutputs
    model = DualViewModel(tiny_model_config(), np.random.default_rng(12))
    model.head_fuse_w.data[:] = 0.0
    model.head_fuse_b.data = np.array([5.0, 0.0], dtype=np.float32)
    feats = Tensor(np.random.default_rng(0).normal(size=(4, 8)).astype(np.float32))
    out = model.classify(BranchOutputs(z_mel=feats, z_coch=feats, z_fuse=feats))
    assert np.all(np.argmax(out.logits_fuse.data, axis=1) == 0)
    probs = nc.softmax(out.logits_fuse).data
    assert np.all(probs[:, 0] > 0.99)


@example("model.classify.hand_head")
def _():
    from dvmer.model import BranchOutputs
    model = DualViewModel(tiny_model_config(embed_dim=2, fusion_dim=2, heads=1), np.random.default_rng(13))
    model.head_fuse_w.data = np.array([[1.0, 2.0], [3.0, -1.0]], dtype=np.float32)
    model.head_fuse_b.data = np.array([0.5, -0.5], dtype=np.float32)
    z = Tensor(np.array([[2.0, 1.0]], dtype=np.float32))
    out = model.classify(BranchOutputs(z_mel=z, z_coch=z, z_fuse=z))
    close(out.logits_fuse.data, [[1.0 * 2 + 2.0 * 1 + 0.5, 3.0 * 2 - 1.0 * 1 - 0.5]])


# -- curriculum -------------------------------------------------------------------


@example("curriculum.temperature.endpoints_and_midpoint")
def _():
    assert cur.temperature_at(0, 80) == 1.5
    assert cur.temperature_at(80, 80) == 0.7
    close(cur.temperature_at(40, 80), 1.1)


@example("curriculum.threshold.endpoints_and_midpoint")
def _():
    assert cur.threshold_at(0, 80) == 0.65
    close(cur.threshold_at(80, 80), 0.35)
    close(cur.threshold_at(40, 80), 0.50)


@example("curriculum.js.identical")
def _():
    assert cur.js_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0


@example("curriculum.js.disjoint_bound")
def _():
    close(cur.js_divergence([1.0, 0.0], [0.0, 1.0]), math.log(2.0))


def js_scalar_oracle(p, q):
    """Independent scalar evaluation of the two KL terms."""
    m = [(a + b) / 2.0 for a, b in zip(p, q)]
    kl_p = sum(a * math.log(a / mm) for a, mm in zip(p, m) if a > 0)
    kl_q = sum(b * math.log(b / mm) for b, mm in zip(q, m) if b > 0)
    return 0.5 * kl_p + 0.5 * kl_q


@example("curriculum.js.half_vs_onehot")
def _():
    got = cur.js_divergence([0.5, 0.5], [1.0, 0.0])
    close(got, js_scalar_oracle([0.5, 0.5], [1.0, 0.0]))
    close(got, 0.2157615, rtol=1e-6, atol=1e-7)


@example("curriculum.reliability.bounds")
def _():
    assert cur.reliability([0.4, 0.6], [0.4, 0.6]) == 1.0
    close(cur.reliability([1.0, 0.0], [0.0, 1.0]), 0.5)


@example("curriculum.reliability.composition")
def _():
    js = js_scalar_oracle([0.5, 0.5], [1.0, 0.0])
    close(cur.reliability([0.5, 0.5], [1.0, 0.0]), math.exp(-js))


@example("curriculum.confidence.identical_branches")
def _():
    sc = cur.confidence_and_pseudo_label([0.9, 0.1], [0.9, 0.1])
    assert sc.r == 1.0 and sc.pseudo_label == 0
    close(sc.c, 0.9)


@example("curriculum.confidence.contradiction_tie")
def _():
    sc = cur.confidence_and_pseudo_label([1.0, 0.0], [0.0, 1.0])
    close(sc.p_fuse, [0.5, 0.5])
    close(sc.r, 0.5)
    close(sc.c, 0.25)
    assert sc.pseudo_label == 0  # tie breaks to the lowest class


@example("curriculum.confidence.composed_oracle")
def _():
    p, q = [0.8, 0.2], [0.6, 0.4]
    sc = cur.confidence_and_pseudo_label(p, q)
    r = math.exp(-js_scalar_oracle(p, q))
    close(sc.c, r * 0.7)
    assert sc.pseudo_label == 0


@example("curriculum.pseudo_loss.empty_selection")
def _():
    logits = Tensor(np.zeros((3, 2), dtype=np.float32))
    confs = cur.batch_confidences(np.full((3, 2), 0.5), np.full((3, 2), 0.5), theta=2.0)
    assert float(cur.pseudo_label_loss(confs, logits).data) == 0.0


@example("curriculum.pseudo_loss.saturated_selected")
def _():
    confs = cur.batch_confidences(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), theta=0.5)
    logits = Tensor(np.array([[30.0, 0.0]], dtype=np.float64), dtype=np.float64)
    assert float(cur.pseudo_label_loss(confs, logits).data) < 1e-12


@example("curriculum.pseudo_loss.hand_weighted_pair")
def _():
    p_mel = np.array([[0.9, 0.1], [1.0, 0.0]])
    p_coch = np.array([[0.9, 0.1], [0.0, 1.0]])
    confs = cur.batch_confidences(p_mel, p_coch, theta=0.0)  # selects both
    assert [sc.r for sc in confs] == [1.0, 0.5]
    logits = np.array([[0.4, -0.2], [1.0, 2.0]], dtype=np.float64)
    loss = cur.pseudo_label_loss(confs, Tensor(logits, dtype=np.float64))
    # oracle: per-sample scalar cross-entropy against the pseudo-labels
    def ce(row, label):
        e = [math.exp(v) for v in row]
        return -math.log(e[label] / sum(e))
    oracle = (1.0 * ce(logits[0], confs[0].pseudo_label) + 0.5 * ce(logits[1], confs[1].pseudo_label)) / 2.0
    close(float(loss.data), oracle)


@example("curriculum.diagnostics.full_selection")
def _():
    stats = cur.EpochCurriculumStats()
    stats.record(cur.batch_confidences(np.full((4, 2), 0.5), np.full((4, 2), 0.5), theta=0.0))
    diag = cur.curriculum_diagnostics(stats, tau=1.0, theta=0.0)
    assert diag["mask_ratio"] == 1.0
    assert diag["mean_reliability"] == 1.0


# -- contrastive memory ------------------------------------------------------------


@example("memory.enqueue.wraps_modulo")
def _():
    q = mem.MemoryQueue(capacity=4, dim=2)
    first = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    q.enqueue(first, np.array([0, 1, 0]))
    assert q.write_index == 3
    second = np.array([[2.0, 0.0], [0.0, 3.0], [4.0, 4.0]])
    q.enqueue(second, np.array([1, 0, 1]))
    # second batch lands at positions 3, 0, 1
    close(q.keys[3], [1.0, 0.0])
    close(q.keys[0], [0.0, 1.0])
    close(q.keys[1], [1.0 / math.sqrt(2), 1.0 / math.sqrt(2)])
    assert q.write_index == 2


@example("memory.enqueue.normalises")
def _():
    q = mem.MemoryQueue(capacity=2, dim=2)
    q.enqueue(np.array([[3.0, 4.0]]), np.array([1]))
    close(q.keys[0], [0.6, 0.8])


@example("memory.enqueue.zero_vector_invalid")
def _():
    q = mem.MemoryQueue(capacity=2, dim=2)
    q.enqueue(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([0, 1]))
    assert not q.valid[0] and q.valid[1]


@example("memory.contrastive.single_matching_key")
def _():
    q = mem.MemoryQueue(capacity=1, dim=3)
    q.enqueue(np.array([[0.0, 1.0, 0.0]]), np.array([1]))
    query = Tensor(np.array([[1.0, 0.0, 0.0]], dtype=np.float64), dtype=np.float64)
    loss = mem.contrastive_loss(query, np.array([1]), q)
    assert abs(float(loss.data)) < 1e-12


@example("memory.contrastive.no_positives")
def _():
    q = mem.MemoryQueue(capacity=2, dim=2)
    q.enqueue(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 0]))
    query = Tensor(np.array([[1.0, 0.0]], dtype=np.float64), dtype=np.float64)
    assert float(mem.contrastive_loss(query, np.array([1]), q).data) == 0.0


def contrastive_bruteforce(queries, q_labels, keys, k_labels, tau):
    """Term-by-term scalar evaluation of the supervised InfoNCE sum."""
    total = 0.0
    for qi in range(queries.shape[0]):
        sims = [float(queries[qi] @ keys[kj]) / tau for kj in range(keys.shape[0])]
        denom = sum(math.exp(s) for s in sims)
        for kj in range(keys.shape[0]):
            if k_labels[kj] == q_labels[qi]:
                total -= math.log(math.exp(sims[kj]) / denom)
    return total / queries.shape[0]


@example("memory.contrastive.hand_three_keys")
def _():
    q = mem.MemoryQueue(capacity=3, dim=2, dtype=np.float64)
    keys = np.array([[1.0, 0.0], [0.0, 1.0], [0.8, 0.6]])
    q.enqueue(keys, np.array([0, 1, 0]))
    query = np.array([[0.6, 0.8]])
    loss = mem.contrastive_loss(Tensor(query, dtype=np.float64), np.array([0]), q, tau_cont=0.07)
    oracle = contrastive_bruteforce(query, [0], q.keys, q.labels, 0.07)
    close(float(loss.data), oracle)


@example("memory.diagnostics.balanced_entropy")
def _():
    q = mem.MemoryQueue(capacity=4, dim=2)
    q.enqueue(np.array([[1.0, 0.0]] * 4), np.array([0, 1, 0, 1]))
    diag = mem.queue_diagnostics(q)
    close(diag["label_entropy"], math.log(2.0))


@example("memory.diagnostics.single_class")
def _():
    q = mem.MemoryQueue(capacity=3, dim=2)
    q.enqueue(np.array([[1.0, 0.0]] * 2), np.array([0, 0]))
    diag = mem.queue_diagnostics(q)
    assert diag["label_entropy"] == 0.0
    assert diag["class_coverage"] == (1.0, 0.0)


# -- trainer ------------------------------------------------------------------------


def _branch_outputs(logits: np.ndarray):
    from dvmer.model import BranchOutputs
    t = Tensor(logits, dtype=np.float64)
    zero = Tensor(np.zeros((logits.shape[0], 2)), dtype=np.float64)
    return BranchOutputs(z_mel=zero, z_coch=zero, z_fuse=zero,
                         logits_mel=t, logits_coch=t, logits_fuse=t)


@example("trainer.cls_loss.saturated_heads")
def _():
    logits = np.array([[40.0, 0.0], [0.0, 40.0]])
    loss = tr.classification_loss(_branch_outputs(logits), np.array([0, 1]))
    assert float(loss.data) < 1e-12


@example("trainer.cls_loss.uniform_logits")
def _():
    loss = tr.classification_loss(_branch_outputs(np.zeros((4, 2))), np.array([0, 1, 1, 0]))
    close(float(loss.data), 3.0 * math.log(2.0))


@example("trainer.cls_loss.hand_batch")
def _():
    logits = np.array([[0.3, -0.7], [1.2, 0.4]])
    labels = np.array([1, 0])
    loss = tr.classification_loss(_branch_outputs(logits), labels)

    def ce(row, label):
        e = [math.exp(v) for v in row]
        return -math.log(e[label] / sum(e))
    per_head = (ce(logits[0], 1) + ce(logits[1], 0)) / 2.0
    close(float(loss.data), 3.0 * per_head)


@example("trainer.consistency.identical")
def _():
    p = Tensor(np.array([[0.7, 0.3], [0.2, 0.8]]), dtype=np.float64)
    assert float(tr.consistency_loss(p, p).data) < 1e-15


@example("trainer.consistency.contradiction")
def _():
    p = Tensor(np.array([[1.0, 0.0]]), dtype=np.float64)
    q = Tensor(np.array([[0.0, 1.0]]), dtype=np.float64)
    close(float(tr.consistency_loss(p, q).data), math.log(2.0))


@example("trainer.consistency.mixed_batch")
def _():
    p = Tensor(np.array([[1.0, 0.0], [0.4, 0.6]]), dtype=np.float64)
    q = Tensor(np.array([[0.0, 1.0], [0.4, 0.6]]), dtype=np.float64)
    close(float(tr.consistency_loss(p, q).data), math.log(2.0) / 2.0)


def _scalar(v):
    return Tensor(np.asarray(v, dtype=np.float64), dtype=np.float64)


@example("trainer.total.zeros")
def _():
    comps = {k: _scalar(0.0) for k in ("cls", "pl", "cons", "cont")}
    assert float(tr.total_loss(comps, tr.LossWeights()).data) == 0.0


@example("trainer.total.unit_components")
def _():
    comps = {k: _scalar(1.0) for k in ("cls", "pl", "cons", "cont")}
    close(float(tr.total_loss(comps, tr.LossWeights()).data), 2.1)


@example("trainer.total.linearity")
def _():
    vals = {"cls": 0.4, "pl": 1.3, "cons": 0.2, "cont": 2.0}
    one = float(tr.total_loss({k: _scalar(v) for k, v in vals.items()}, tr.LossWeights()).data)
    two = float(tr.total_loss({k: _scalar(2 * v) for k, v in vals.items()}, tr.LossWeights()).data)
    close(two, 2.0 * one)


@example("trainer.cosine.endpoints")
def _():
    lrs = [tr.cosine_lr(e, 80, 1e-3) for e in range(80)]
    assert lrs[0] == 1e-3
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] < 1e-6


@example("trainer.evaluate.perfect_and_constant")
def _():
    labels = np.array([0, 1, 0, 1])
    perfect = np.array([0.1, 0.9, 0.2, 0.8])
    assert tr.auc_score(labels, perfect) == 1.0
    assert tr.accuracy_score(labels, (perfect > 0.5).astype(int)) == 1.0
    assert tr.f1_score(labels, (perfect > 0.5).astype(int)) == 1.0
    constant = np.full(4, 0.5)
    assert tr.auc_score(labels, constant) == 0.5
    assert tr.accuracy_score(labels, np.zeros(4, dtype=int)) == 0.5


def auc_bruteforce(labels, scores):
    """Quadratic pairwise comparison with ties counting one half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


@example("trainer.evaluate.hand_auc")
def _():
    labels = np.array([1, 0, 1, 0])
    scores = np.array([0.9, 0.9, 0.3, 0.1])
    assert abs(tr.auc_score(labels, scores) - auc_bruteforce(labels, scores)) < 1e-12


# -- datakit -------------------------------------------------------------------------


@example("datakit.binarize.examples")
def _():
    assert dk.binarize_label(0.4) == 1
    assert dk.binarize_label(-0.4) == 0
    assert dk.binarize_label(0.0) == 0


@example("datakit.split.proportions")
def _():
    records = [dk.TrackRecord(f"t{i}", valence=0.5 if i < 60 else -0.5, arousal=0.0) for i in range(100)]
    split = dk.stratified_split(records, "valence", seed=3)
    train_labels = [0.5 if int(t[1:]) < 60 else -0.5 for t in split.train_ids]
    n_pos = sum(1 for v in train_labels if v > 0)
    n_neg = len(train_labels) - n_pos
    assert abs(n_pos - 42) <= 1 and abs(n_neg - 28) <= 1


@example("datakit.split.deterministic")
def _():
    records = [dk.TrackRecord(f"t{i}", valence=(-1) ** i * 0.3, arousal=0.1) for i in range(20)]
    a = dk.stratified_split(records, "valence", seed=11)
    b = dk.stratified_split(records, "valence", seed=11)
    assert a.train_ids == b.train_ids and a.test_ids == b.test_ids


@example("datakit.split.single_class_rejected")
def _():
    records = [dk.TrackRecord(f"t{i}", valence=0.5, arousal=0.5) for i in range(10)]
    try:
        dk.stratified_split(records, "valence", seed=0)
    except Exception as exc:
        from dvmer.errors import ClassTooSmall
        assert isinstance(exc, ClassTooSmall)
    else:
        raise AssertionError("expected ClassTooSmall")


@example("datakit.consistency.examples")
def _():
    assert dk.annotation_consistency([((0.1, 0.2), (0.1, 0.2))]) == {"mean_distance": 0.0, "pass": True}
    out = dk.annotation_consistency([((0.0, 0.0), (0.3, 0.4))])
    close(out["mean_distance"], 0.5)
    assert not out["pass"]
    boundary = dk.annotation_consistency([((0.0, 0.0), (0.1, 0.0)), ((0.0, 0.0), (0.4, 0.0))])
    close(boundary["mean_distance"], 0.25)
    assert boundary["pass"]


@example("datakit.synth.deterministic_and_shaped")
def _():
    a = dk.synth_dataset(n=8, separation=4.0, noise=0.1, seed=21)
    b = dk.synth_dataset(n=8, separation=4.0, noise=0.1, seed=21)
    assert all(np.array_equal(x.pair.mel, y.pair.mel) for x, y in zip(a, b))
    assert all(np.array_equal(x.pair.coch, y.pair.coch) for x, y in zip(a, b))
    assert a[0].pair.mel.shape == (128, 87) and a[0].pair.coch.shape == (84, 87)


@example("datakit.synth.linear_probe_separates")
def _():
    samples = dk.synth_dataset(n=64, separation=8.0, noise=0.0, seed=5)
    X = np.stack([np.concatenate([s.pair.mel.ravel(), s.pair.coch.ravel()]) for s in samples])
    y = np.array([1.0 if s.label == 1 else -1.0 for s in samples])
    w, *_ = np.linalg.lstsq(X, y, rcond=None)
    preds = np.sign(X @ w)
    assert np.array_equal(preds, y)


def run_all(report=print):
    failures = []
    for label, fn in EXAMPLES:
        try:
            fn()
        except Exception as exc:  # pragma: no cover - reporting path
            failures.append((label, exc))
            report(f"FAIL {label}: {exc}")
    return failures
