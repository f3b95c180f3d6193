import hashlib

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_i2v.conditioning import (NULL_TOKEN, ConditioningBundle, FrozenImageEncoder,
                                      GlobalEncoder, GlobalEncoderSpec, ImageConditioner,
                                      TextEncoder, Vocabulary, fuse_semantic, global_encode,
                                      semantic_encode, text_encode)
from cascade_i2v.data import SceneSpec, caption_vocabulary, render_clip
from cascade_i2v.errors import DataError, DimensionError, UsageError

# Output Size column of the global-encoder layer table, as (C, H, W)
TABLE_CHAIN = [(64, 32, 48), (64, 32, 32), (256, 16, 16), (512, 8, 8), (512, 4, 4),
               (1024, 2, 2), (1024, 1, 1)]


def conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def test_full_spec_shape_chain_matches_table():
    assert GlobalEncoderSpec.full().shape_chain() == TABLE_CHAIN


def test_full_encoder_forward_intermediates():
    enc = GlobalEncoder(GlobalEncoderSpec.full())
    out, inter = enc(torch.zeros(1, 4, 32, 48), return_intermediates=True)
    assert [tuple(h.shape[1:]) for h in inter] == TABLE_CHAIN
    assert out.shape == (1, 1024)


def test_toy_chain_by_hand():
    # stem 5x5/p1 then 3x3/p2 on 16x16, pool 16, three stride-2 stages, 2x2/s2 output
    hw = conv_out(conv_out(16, 5, 1, 1), 3, 1, 2)
    expected = [(16, hw, hw), (16, 16, 16), (64, 8, 8), (128, 4, 4), (256, 2, 2), (256, 1, 1)]
    spec = GlobalEncoderSpec.toy(256)
    assert spec.shape_chain() == expected
    out, inter = GlobalEncoder(spec)(torch.randn(2, 4, 16, 16), return_intermediates=True)
    assert [tuple(h.shape[1:]) for h in inter] == expected
    assert out.shape == (2, 256)


def test_zero_input_finite_and_deterministic():
    enc = GlobalEncoder(GlobalEncoderSpec.toy())
    z = torch.zeros(1, 4, 16, 16)
    a, b = global_encode(z, enc), global_encode(z, enc)
    assert torch.isfinite(a).all() and torch.equal(a, b)


def test_channel_mismatch_cites_stem():
    with pytest.raises(DimensionError, match=r"C\(4, 64, 5\)"):
        GlobalEncoder(GlobalEncoderSpec.full())(torch.zeros(1, 3, 32, 48))


def test_activation_after_every_conv_but_output():
    enc = GlobalEncoder(GlobalEncoderSpec.micro())
    _, inter = enc(torch.randn(3, 4, 8, 8), return_intermediates=True)
    # SiLU is bounded below by about -0.2785
    for h in inter[:-1]:
        assert h.min() >= -0.2785
    with torch.no_grad():
        enc.output.bias.fill_(-5.0)
    assert enc(torch.randn(1, 4, 8, 8)).min() < -1.0


def test_spec_config_roundtrip():
    spec = GlobalEncoderSpec.full()
    assert GlobalEncoderSpec.from_config(spec.to_config()) == spec


def test_global_encoder_gradient_matches_finite_differences():
    torch.manual_seed(0)
    enc = GlobalEncoder(GlobalEncoderSpec.micro()).double()
    z = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    enc.zero_grad()
    enc(z).sum().backward()
    params = dict(enc.named_parameters())
    g = torch.Generator().manual_seed(1)
    h = 1e-6
    for name, p in params.items():
        idx = torch.randint(p.numel(), (3,), generator=g)
        for i in idx.tolist():
            flat = p.data.view(-1)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = enc(z).sum().item()
                flat[i] = orig - h
                down = enc(z).sum().item()
                flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = p.grad.view(-1)[i].item()
            assert analytic == pytest.approx(numeric, rel=1e-3, abs=1e-7), name


def _image(color="red", shape="square"):
    spec = SceneSpec(shape, color, "right", 1.0, "black", 0, 32.0, 32.0, 10.0)
    return render_clip(spec, 1, 1, 64, 64)[0].data


def test_semantic_shape_and_determinism():
    enc = FrozenImageEncoder(256)
    v = semantic_encode(_image(), enc)
    assert v.shape == (1, 256)
    assert torch.equal(v, semantic_encode(_image(), FrozenImageEncoder(256)))


def test_semantic_encoder_is_frozen():
    enc = FrozenImageEncoder(32)
    assert not any(p.requires_grad for p in enc.parameters())
    enc.train()
    assert not enc.training


def test_semantic_distinguishes_colors():
    enc = FrozenImageEncoder(256)
    a, b = semantic_encode(_image("red"), enc), semantic_encode(_image("blue"), enc)
    assert torch.nn.functional.cosine_similarity(a, b).item() < 1.0


def test_semantic_rejects_multi_frame():
    with pytest.raises(UsageError):
        semantic_encode(torch.zeros(1, 2, 3, 64, 64), FrozenImageEncoder(8))


def test_fuse_identities():
    v = torch.randn(4, 16)
    torch.testing.assert_close(fuse_semantic(v, torch.zeros_like(v)), v)
    assert torch.equal(fuse_semantic(v, -v), torch.zeros_like(v))
    w = torch.randn(4, 16)
    expected = torch.tensor([[a + b for a, b in zip(r, s)] for r, s in zip(v.tolist(), w.tolist())])
    torch.testing.assert_close(fuse_semantic(v, w), expected)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_fuse_commutative_associative(seed):
    g = torch.Generator().manual_seed(seed)
    a, b, c = (torch.randn(8, generator=g) for _ in range(3))
    torch.testing.assert_close(fuse_semantic(a, b), fuse_semantic(b, a))
    torch.testing.assert_close(fuse_semantic(fuse_semantic(a, b), c),
                               fuse_semantic(a, fuse_semantic(b, c)))


def test_fuse_dimension_mismatch():
    with pytest.raises(DimensionError):
        fuse_semantic(torch.zeros(1, 8), torch.zeros(1, 9))


def test_image_conditioner_frozen_part_stays_fixed():
    cond = ImageConditioner(GlobalEncoderSpec.toy())
    img = _image()[None]
    before = hashlib.sha256(semantic_encode(img[:, 0], cond.semantic).numpy().tobytes()).hexdigest()
    opt = torch.optim.SGD([p for p in cond.parameters() if p.requires_grad], lr=0.1)
    for _ in range(3):
        opt.zero_grad()
        cond(img[:, 0], torch.randn(1, 4, 16, 16)).pow(2).sum().backward()
        opt.step()
    after = hashlib.sha256(semantic_encode(img[:, 0], cond.semantic).numpy().tobytes()).hexdigest()
    assert before == after


@pytest.fixture(scope="module")
def text_encoder():
    torch.manual_seed(0)
    return TextEncoder(Vocabulary(caption_vocabulary()), dim=32)


def test_vocabulary_null_first(tmp_path):
    vocab = Vocabulary(["red", "square"])
    assert vocab.tokens[0] == NULL_TOKEN and len(vocab) == 3
    vocab.save(tmp_path / "vocab.txt")
    assert (tmp_path / "vocab.txt").read_text().splitlines()[1] == "red"
    assert Vocabulary.load(tmp_path / "vocab.txt").tokens == vocab.tokens


def test_text_shapes(text_encoder):
    assert text_encode("red square moving right", text_encoder).shape == (1, 4, 32)
    empty = text_encode("", text_encoder)
    assert empty.shape == (1, 1, 32)
    torch.testing.assert_close(empty[0, 0], text_encoder.embed.weight[0] + text_encoder.positions[0])


def test_text_deterministic(text_encoder):
    assert torch.equal(text_encode("blue circle growing", text_encoder),
                       text_encode("blue circle growing", text_encoder))


def test_text_batch_padded_with_null(text_encoder):
    out = text_encoder(["red square rotating", "red square moving right"])
    assert out.shape == (2, 4, 32)
    torch.testing.assert_close(out[0, :3], text_encoder("red square rotating")[0])


def test_text_out_of_vocabulary_lists_token(text_encoder):
    with pytest.raises(DataError, match="zebra"):
        text_encoder("red zebra moving right")


def test_text_too_long(text_encoder):
    with pytest.raises(DataError):
        text_encoder(" ".join(["red"] * 17))


def test_bundle_stage_separation():
    sem, det, txt = torch.zeros(1, 8), torch.zeros(1, 4, 2, 2), torch.zeros(1, 3, 8)
    base = ConditioningBundle(fps=8, semantic=sem, detail=det)
    assert base.stage == "base" and base.text is None
    assert base.context().shape == (1, 1, 8)
    ref = ConditioningBundle(fps=8, text=txt)
    assert ref.stage == "refine" and ref.semantic is None and ref.detail is None
    with pytest.raises(UsageError):
        ConditioningBundle(fps=8, semantic=sem, text=txt).stage
    with pytest.raises(UsageError):
        ConditioningBundle(fps=8).stage
