import itertools

import numpy as np
import pytest

from vipg import checkpoint as ck
from vipg import dataio as dio
from vipg import model as M
from vipg import numerics as nx
from vipg import textprep as tp
from vipg import training as T
from vipg.numerics import Tensor


def tiny_cfg(vocab_size, **kw):
    base = dict(vocab_size=vocab_size, d_model=8, heads=1, enc_layers=1, dec_layers=1, d_ff=16, d_img=6)
    base.update(kw)
    return M.ModelConfig(**base)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = dio.SynthSpec(d_img=6, l=3)
    out = dio.synth_generate(6, 3, spec, root)
    recs = dio.load_manifest(out.manifest)
    procs = [tp.process(r.caption) for r in recs]
    vocab = tp.build_vocab(procs)
    exs = [dio.encode_example(r.id, p, vocab, r.feature_path) for r, p in zip(recs, procs)]
    dio.attach_features(exs, root)
    return exs, vocab


# -- config and parameters ------------------------------------------------------


def test_config_validation_lists_every_problem():
    cfg = M.ModelConfig(vocab_size=100, d_model=10, heads=3, copy_mask_prob=1.0, lambda_kl=-1)
    with pytest.raises(M.ModelError) as err:
        cfg.validate()
    msg = str(err.value)
    assert "divisible" in msg and "copy_mask_prob" in msg and "lambda_kl" in msg


def test_parameter_count_closed_form():
    cfg = M.ModelConfig(vocab_size=50, d_model=8, heads=2, enc_layers=2, dec_layers=3, d_ff=12, d_img=5)
    d, f, v = 8, 12, 50
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    ln = 2 * d
    expected = (v * d + 3 * d + 5 * d
                + 2 * (attn + ffn + 2 * ln)
                + 3 * (2 * attn + ffn + 3 * ln)
                + d * v + v + d + 1)
    assert M.parameter_count(cfg) == expected
    assert sum(p.data.size for p in M.ParaphraseModel(cfg).parameters()) == expected


def test_single_encoder_and_decoder_stack():
    names = M.parameter_shapes(M.ModelConfig(vocab_size=60))
    assert {n.split(".")[0] for n in names if "." in n} == {"enc", "dec"}
    assert not any("caption" in n or "para" in n for n in names)


def test_image_projection_near_identity_when_square():
    cfg = M.ModelConfig(vocab_size=60, d_model=32, d_img=32)
    p = M.ParaphraseModel(cfg, seed=0).params["P_img"].data
    assert np.abs(p - np.eye(32)).max() < 0.2


# -- embeddings -----------------------------------------------------------------


def test_embed_image_zero_features_gives_tag(data):
    _, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab)))
    m.params["v_I"].data = np.arange(8, dtype=np.float32)
    out = m.embed_image(np.zeros((3, 6)))
    np.testing.assert_array_equal(out.data, np.tile(np.arange(8), (3, 1)))


def test_embed_image_identity_projection(data):
    _, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab), d_img=8))
    m.params["P_img"].data = np.eye(8, dtype=np.float32)
    m.params["v_I"].data[:] = 0
    f = np.random.default_rng(0).standard_normal((4, 8)).astype(np.float32)
    np.testing.assert_allclose(m.embed_image(f).data, f, atol=1e-6)


def test_embed_image_width_mismatch(data):
    _, vocab = data
    with pytest.raises(M.ModelError):
        M.ParaphraseModel(tiny_cfg(len(vocab))).embed_image(np.zeros((3, 7)))


def test_positional_encoding_position_zero():
    pe = M.positional_encoding(np.array([0]), 6)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1])
    pe1 = M.positional_encoding(np.array([1]), 4)[0]
    np.testing.assert_allclose(pe1, [np.sin(1), np.cos(1), np.sin(0.01), np.cos(0.01)])


def test_embed_text_segments_and_positions(data):
    _, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab)))
    tok = 20
    e_o, e_r = m.embed_text([tok, tok], [tok])
    d = 8
    v_o, v_r = m.params["v_O"].data, m.params["v_R"].data
    pe = M.positional_encoding(np.arange(3), d)
    # the relation token sits at concatenated position 2
    delta = e_o.data[0] - e_r.data[0]
    np.testing.assert_allclose(delta, (v_o - v_r) + (pe[0] - pe[2]), atol=1e-5)
    e_o, e_r = m.embed_text(np.zeros(0, dtype=int), [tok])
    assert e_o.shape == (0, d)
    np.testing.assert_allclose(e_r.data[0] - v_r - pe[0], m.params["tok_emb"].data[tok] * np.sqrt(d), atol=1e-5)


def test_embed_text_out_of_range(data):
    _, vocab = data
    with pytest.raises(IndexError):
        M.ParaphraseModel(tiny_cfg(len(vocab))).embed_text([len(vocab)], [1])


# -- partial mask ---------------------------------------------------------------


def rule(qs, ks):
    return (qs == "I" and ks in "IO") or (qs == "O" and ks == "O") or (qs == "R" and ks in "OR")


@pytest.mark.parametrize("l_i,l_o,l_r", [c for c in itertools.product(range(4), repeat=3) if c[1] + c[2] >= 1])
def test_partial_mask_rules(l_i, l_o, l_r):
    mask = M.build_partial_mask(l_i, l_o, l_r)
    segs = "I" * l_i + "O" * l_o + "R" * l_r
    expected = np.array([[rule(q, k) for k in segs] for q in segs], dtype=np.int8).reshape(len(segs), len(segs))
    np.testing.assert_array_equal(mask, expected)


def test_partial_mask_count():
    assert M.build_partial_mask(2, 3, 4).sum() == 2 * 5 + 3 * 3 + 4 * 7 == 47
    assert M.build_partial_mask(0, 1, 1).sum() == 3
    assert M.build_partial_mask(0, 0, 1).sum() == 1


def test_partial_mask_needs_text():
    with pytest.raises(M.ModelError):
        M.build_partial_mask(2, 0, 0)


def test_batch_mask_padding():
    mask = M.batch_partial_mask((1, 2, 2), ([1, 1], [2, 1], [2, 1]))
    # second example: object slot 1 (index 2) and relation slot 1 (index 4) are padding
    assert not mask[1, :, 2][[0, 1, 3]].any() and mask[1, 2, 2]
    assert mask[1, 4].sum() == 1 and mask[1, 4, 4]
    np.testing.assert_array_equal(mask[0], M.build_partial_mask(1, 2, 2).astype(bool))


# -- encoder --------------------------------------------------------------------


def _random_inputs(rng, l_i=3, l_o=4, l_r=5, d=8):
    return (Tensor(rng.standard_normal((l_i, d))), Tensor(rng.standard_normal((l_o, d))),
            Tensor(rng.standard_normal((l_r, d))))


def test_zero_layer_encoder_is_identity(data):
    _, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab), enc_layers=0))
    e_i, e_o, e_r = _random_inputs(np.random.default_rng(0))
    out = m.encode(e_i, e_o, e_r)
    for a, b in ((out.I, e_i), (out.O, e_o), (out.R, e_r)):
        np.testing.assert_array_equal(a.data, b.data)


def test_encoder_locality(data):
    _, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab), enc_layers=2, heads=2), seed=1)
    rng = np.random.default_rng(0)
    e_i, e_o, e_r = _random_inputs(rng)
    base = m.encode(e_i, e_o, e_r)
    e_i2, _, e_r2 = _random_inputs(rng)
    # O ignores I and R; R ignores I
    np.testing.assert_allclose(m.encode(e_i2, e_o, e_r2).O.data, base.O.data, atol=1e-6)
    np.testing.assert_allclose(m.encode(e_i2, e_o, e_r).R.data, base.R.data, atol=1e-6)
    perm = m.encode(e_i, e_o, Tensor(e_r.data[::-1].copy()))
    np.testing.assert_allclose(perm.O.data, base.O.data, atol=1e-6)
    no_image = m.encode(None, e_o, e_r)
    np.testing.assert_allclose(no_image.O.data, base.O.data, atol=1e-6)
    np.testing.assert_allclose(no_image.R.data, base.R.data, atol=1e-6)
    assert no_image.I.shape == (0, 8)


def test_batched_encode_matches_single(data):
    exs, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab), heads=2), seed=2)
    b = dio.collate(exs, extra_pad=1)
    enc = m.encode_batch(b)
    for i, ex in enumerate(exs):
        e_o, e_r = m.embed_text(ex.object_ids, ex.relation_ids)
        single = m.encode(m.embed_image(ex.feature), e_o, e_r)
        np.testing.assert_allclose(enc.O.data[i, :b.obj_len[i]], single.O.data, atol=1e-5)
        np.testing.assert_allclose(enc.R.data[i, :b.rel_len[i]], single.R.data, atol=1e-5)


# -- decoder and copy -----------------------------------------------------------


def _forward(m, b, mask=None):
    return m.forward_train(b, np.random.default_rng(0), copy_mask=mask)


def test_distributions_valid(data):
    exs, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab)), seed=0)
    b = dio.collate(exs)
    f = _forward(m, b)
    for P in (f.P_I, f.P_S):
        assert P.shape == (len(exs), b.target_ids.shape[1], len(vocab))
        assert (P.data >= 0).all()
        np.testing.assert_allclose(P.data.sum(-1), 1.0, atol=1e-5)


def test_copy_restricted_to_objects_and_unk(data):
    exs, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab)), seed=0)
    b = dio.collate(exs)
    mask = np.zeros(b.copy_pos.shape, dtype=bool)
    mask[:, 0] = True
    f = _forward(m, b, mask)
    dist = f.dist_S
    copy_part = dist.probs.data - (1 - dist.gate.data) * dist.gen.data
    for i in range(len(exs)):
        allowed = set(b.copy_ids[i, :b.copy_len[i]]) | {vocab.unk_id}
        others = [v for v in range(len(vocab)) if v not in allowed]
        assert np.abs(copy_part[i][:, others]).max() < 1e-6


def test_all_masked_copy_lands_on_unk(data):
    exs, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab)), seed=0)
    b = dio.collate(exs)
    f = _forward(m, b, np.ones(b.copy_pos.shape, dtype=bool))
    dist = f.dist_I
    copy_part = dist.probs.data - (1 - dist.gate.data) * dist.gen.data
    np.testing.assert_allclose(copy_part[..., vocab.unk_id], dist.gate.data[..., 0], atol=1e-6)


def test_no_objects_gives_pure_generation(data):
    _, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab)), seed=0)
    p = tp.process("it is red .")
    ex = dio.encode_example("x", p, vocab)
    ex.feature = np.ones((3, 6), dtype=np.float32)
    f = _forward(m, dio.collate([ex]))
    np.testing.assert_array_equal(f.P_I.data, f.dist_I.gen.data)
    np.testing.assert_array_equal(f.P_S.data, f.dist_S.gen.data)


def test_saturated_gate_copies_single_object(data):
    _, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab)), seed=0)
    m.params["b_g"].data[:] = 40.0
    p = tp.process("a cat sits .")
    ex = dio.encode_example("x", p, vocab)
    ex.feature = np.ones((3, 6), dtype=np.float32)
    b = dio.collate([ex])
    f = _forward(m, b, np.zeros((1, 1), dtype=bool))
    assert (f.P_S.data.argmax(-1) == vocab.stoi["cat"]).all()
    f = _forward(m, b, np.ones((1, 1), dtype=bool))
    assert (f.P_S.data.argmax(-1) == vocab.unk_id).all()


def test_decoder_causality(data):
    exs, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab)), seed=0)
    b = dio.collate(exs[:1])
    base = _forward(m, b).P_S.data
    t = 3
    b.target_ids = b.target_ids.copy()
    b.target_ids[0, t] = (b.target_ids[0, t] + 1) % len(vocab)
    # target t feeds the decoder input at position t + 1
    changed = _forward(m, b).P_S.data
    np.testing.assert_array_equal(changed[0, :t + 1], base[0, :t + 1])
    assert np.abs(changed[0, t + 1:] - base[0, t + 1:]).max() > 0


def test_decoder_sharing_structural(data):
    exs, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab)), seed=0)
    f = _forward(m, dio.collate(exs))

    def leaves(out):
        seen, stack, found = set(), [out], set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.is_leaf and t.requires_grad:
                found.add(id(t))
            stack.extend(t._parents)
        return found

    dec = {id(p) for n, p in m.params.items() if n.startswith("dec.") or n in ("W_o", "b_o", "w_g", "b_g")}
    li, ls = leaves(f.P_I), leaves(f.P_S)
    assert dec <= li and dec <= ls
    assert li == ls  # both branches reach exactly the same parameter objects


def test_forward_train_deterministic_and_needs_images(data):
    exs, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab), dropout=0.1), seed=0)
    b = dio.collate(exs)
    a = m.forward_train(b, np.random.default_rng(5))
    c = m.forward_train(b, np.random.default_rng(5))
    np.testing.assert_array_equal(a.P_I.data, c.P_I.data)
    np.testing.assert_array_equal(a.copy_mask, c.copy_mask)
    with pytest.raises(M.ModelError):
        m.forward_train(dio.collate(exs, with_images=False), None)


def test_copy_mask_rate_and_inference():
    rng = np.random.default_rng(0)
    mask = M.sample_copy_mask((100, 100), 0.2, rng)
    assert 0.18 <= mask.mean() <= 0.22
    assert not M.sample_copy_mask((5, 5), 0.2, rng, training=False).any()
    assert not M.sample_copy_mask((5, 5), 0.0, rng).any()


def test_sentence_scope_copies_relation_words(data):
    exs, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab), copy_scope="sentence"), seed=0)
    b = dio.collate(exs)
    f = _forward(m, b)
    assert f.copy_mask.shape == b.sent_pos.shape
    dist = f.dist_S
    copy_part = dist.probs.data - (1 - dist.gate.data) * dist.gen.data
    # relation words such as "." receive copy mass under whole-sentence copying
    assert copy_part[..., vocab.stoi["."]].max() > 0


def test_encoder_object_masking_flag(data):
    exs, vocab = data
    cfg = tiny_cfg(len(vocab), mask_encoder_objects=True)
    m = M.ParaphraseModel(cfg, seed=0)
    b = dio.collate(exs)
    full = np.ones(b.copy_pos.shape, dtype=bool)
    a = _forward(m, b, full).P_S.data
    m.cfg = tiny_cfg(len(vocab))
    c = _forward(m, b, full).P_S.data
    assert np.abs(a - c).max() > 0


# -- gradients ------------------------------------------------------------------


def test_end_to_end_gradient_check(data):
    exs, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab)), seed=4)
    for p in m.parameters():  # move off the symmetric init so every path carries gradient
        p.data = p.data + np.random.default_rng(1).normal(0, 0.1, p.shape).astype(np.float32)
    b = dio.collate(exs[:2])
    mask = M.sample_copy_mask(b.copy_pos.shape, 0.3, np.random.default_rng(0))
    pad = np.arange(b.target_ids.shape[1])[None] < b.tgt_len[:, None]

    def loss():
        f = m.forward_train(b, None, copy_mask=mask)
        return T.total_loss(T.loss_ce(f.P_I, b.target_ids, pad), T.loss_kl(f.P_I, f.P_S, pad), 1.0)

    report = nx.grad_check_params(loss, m.parameters(), h=1e-3, tol=1e-2, per_tensor=3)
    assert report.passed, report


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, data):
    _, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab)), seed=3)
    ck.save_model(tmp_path / "m.ckpt", m, vocab_sha256=vocab.sha256())
    back, header = ck.load_model(tmp_path / "m.ckpt", vocab.sha256())
    assert header["vocab_sha256"] == vocab.sha256()
    for name, p in m.params.items():
        assert back.params[name].data.tobytes() == p.data.tobytes()
    ck.save_model(tmp_path / "n.ckpt", back, vocab_sha256=vocab.sha256())
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"VIPGCKPT"


def test_checkpoint_rejects_mismatch(tmp_path, data):
    _, vocab = data
    m = M.ParaphraseModel(tiny_cfg(len(vocab)), seed=3)
    ck.save_model(tmp_path / "m.ckpt", m, vocab_sha256="abc")
    with pytest.raises(ck.CheckpointError, match="vocabulary"):
        ck.load_model(tmp_path / "m.ckpt", vocab.sha256())
    header, tensors = ck.read_container(tmp_path / "m.ckpt")
    del tensors["W_o"]
    ck.write_container(tmp_path / "bad.ckpt", header, tensors)
    with pytest.raises(ck.CheckpointError, match="W_o"):
        ck.load_model(tmp_path / "bad.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(blob[:-10])
    with pytest.raises(ck.CheckpointError, match="truncated"):
        ck.load_model(tmp_path / "trunc.ckpt")
