import pytest
import torch
import torch.nn.functional as F

from modalmem.encoder import Encoder, LoraWeights, WindowAttention, encode, lora_apply
from modalmem.numerics import finite_diff_check

D = torch.float64


def test_lora_zero_delta_is_identity():
    lw = LoraWeights(8, 8, 2).double()
    q, v = torch.randn(8, 8, dtype=D), torch.randn(8, 8, dtype=D)
    q2, v2 = lora_apply(q, v, lw)
    assert torch.equal(q2, q) and torch.equal(v2, v)


def test_lora_matrix_oracle():
    lw = LoraWeights(4, 4, 1).double()
    with torch.no_grad():
        lw.w_a_q.copy_(torch.tensor([[1.0], [0.0], [0.0], [0.0]]))
        lw.w_b_q.copy_(torch.tensor([[2.0, 3.0, 0.0, 0.0]]))
    q2, _ = lora_apply(torch.eye(4, dtype=D), torch.eye(4, dtype=D), lw)
    # top-left 2x2 block is the d=2, r=1 example: [[3, 3], [0, 1]]
    assert q2[:2, :2].tolist() == [[3.0, 3.0], [0.0, 1.0]]
    assert torch.equal(q2[2:], torch.eye(4, dtype=D)[2:])


def test_lora_rank_bound_and_shape_errors():
    with pytest.raises(ValueError):
        LoraWeights(8, 8, 3)
    lw = LoraWeights(8, 8, 2)
    with pytest.raises(ValueError):
        lora_apply(torch.zeros(4, 4), torch.zeros(8, 8), lw)


def test_lora_delta_rank():
    lw = LoraWeights(32, 32, 4).double()
    with torch.no_grad():
        lw.w_b_q.normal_()
        lw.w_b_v.normal_()
    for delta in (lw.delta_q(), lw.delta_v()):
        s = torch.linalg.svdvals(delta)
        assert (s[4:] < 1e-8).all() and s[3] > 1e-8


def test_lora_gradient_matches_finite_differences():
    torch.manual_seed(3)
    block = WindowAttention(8, 4, heads=1, rank=2).double()
    with torch.no_grad():
        block.lora.w_b_q.normal_(0, 0.5)
        block.lora.w_b_v.normal_(0, 0.5)
        block.out.weight.normal_(0, 0.5)
    x = torch.randn(1, 8, 4, 4, dtype=D)
    readout = torch.randn(1, 8, 4, 4, dtype=D)
    lw = block.lora
    rep = finite_diff_check(lambda: (block(x) * readout).sum(),
                            {"w_a_q": lw.w_a_q, "w_b_q": lw.w_b_q, "w_a_v": lw.w_a_v, "w_b_v": lw.w_b_v})
    assert rep.max_relative_error < 1e-4, rep.per_parameter_errors


def test_base_weights_get_no_gradient_when_frozen():
    block = WindowAttention(8, 4, heads=1, rank=2)
    block.w_q.requires_grad_(False)
    block.w_v.requires_grad_(False)
    block(torch.randn(1, 8, 4, 4)).sum().backward()
    assert block.w_q.grad is None and block.w_v.grad is None
    assert block.lora.w_b_q.grad is not None


@pytest.mark.parametrize("size", [32, 64, 96])
def test_resolution_law(size):
    enc = Encoder()
    out = encode(torch.randn(1, size, size), enc)
    assert out.f_e.shape == (64, size // 16, size // 16)
    assert out.f_high1.shape == (32, size // 4, size // 4)
    assert out.f_high2.shape == (32, size // 8, size // 8)


def test_indivisible_input_rejected():
    with pytest.raises(ValueError):
        Encoder()(torch.randn(1, 1, 48, 48))


def test_encode_is_pure():
    enc = Encoder()
    x = torch.randn(1, 1, 64, 64)
    a, b = enc(x), enc(x.clone())
    assert torch.equal(a.f_e, b.f_e) and torch.equal(a.f_high1, b.f_high1)


def test_zero_lora_equals_unadapted_encoder():
    torch.manual_seed(0)
    adapted = Encoder(rank=4)
    torch.manual_seed(0)
    plain = Encoder(rank=None)
    # copy the shared weights across; LoRA deltas stay zero from init
    plain.load_state_dict({k: v for k, v in adapted.state_dict().items() if ".lora." not in k})
    x = torch.randn(2, 1, 32, 32)
    a, b = adapted(x), plain(x)
    assert torch.equal(a.f_e, b.f_e) and torch.equal(a.f_high1, b.f_high1) and torch.equal(a.f_high2, b.f_high2)


def test_trainable_lora_count_closed_form():
    enc = Encoder(widths=(16, 32, 64, 64), rank=4)
    for p in enc.backbone_parameters():
        p.requires_grad_(False)
    trainable = sum(p.numel() for p in enc.parameters() if p.requires_grad)
    assert trainable == sum(4 * (2 * d + 2 * d) for d in (16, 32, 64, 64))


def _ln(x, w, b, eps=1e-6):
    mu = x.mean(1, keepdim=True)
    var = x.var(1, unbiased=False, keepdim=True)
    return (x - mu) / (var + eps).sqrt() * w.view(1, -1, 1, 1) + b.view(1, -1, 1, 1)


def _conv_only_reference(enc, x):
    feats = []
    for st in enc.stages:
        x = F.conv2d(x, st.down.weight, st.down.bias, stride=st.down.stride)
        m = st.mlp
        h = F.conv2d(_ln(x, m.norm.weight, m.norm.bias), m.fc1.weight, m.fc1.bias)
        x = x + F.conv2d(F.gelu(h), m.fc2.weight, m.fc2.bias)
        feats.append(x)
    s1, s2, s3, s4 = feats
    top = F.conv2d(s4, enc.lat4.weight, enc.lat4.bias).repeat_interleave(2, 2).repeat_interleave(2, 3)
    f_e = F.conv2d(top + F.conv2d(s3, enc.lat3.weight, enc.lat3.bias), enc.smooth.weight, enc.smooth.bias,
                   padding=1)
    return f_e, F.conv2d(s1, enc.tap1.weight, enc.tap1.bias), F.conv2d(s2, enc.tap2.weight, enc.tap2.bias)


def test_zero_attention_output_reduces_to_conv_path():
    enc = Encoder().double()
    with torch.no_grad():
        for st in enc.stages:
            st.attn.out.weight.zero_()
            st.attn.out.bias.zero_()
    x = torch.randn(2, 1, 32, 32, dtype=D)
    out = enc(x)
    ref = _conv_only_reference(enc, x)
    for a, b in zip((out.f_e, out.f_high1, out.f_high2), ref):
        assert torch.allclose(a, b, atol=1e-12)
