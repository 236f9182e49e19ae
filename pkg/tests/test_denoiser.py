"""Denoiser building blocks: attention, FiLM, AdaIN, frame locality."""

import numpy as np
import pytest
import torch

from emoface.denoiser import (
    AdainStyle,
    DenoiserConfig,
    ExpressionDenoiser,
    FrameLockedCrossAttention,
    TimestepFilm,
    diagonal_mask,
    masked_attention,
    sinusoidal_embedding,
    subject_template,
)
from oracles import fd_gradient, instance_norm_oracle, relative_error, softmax_attention_oracle

torch.manual_seed(0)


class TestAttention:
    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
        got = masked_attention(*(torch.from_numpy(x) for x in (q, k, v)))
        expected = softmax_attention_oracle(q, k, v)
        assert relative_error(got.numpy(), expected) < 1e-12

    def test_masked_matches_oracle(self):
        rng = np.random.default_rng(6)
        q, k, v = (rng.normal(size=(5, 3)) for _ in range(3))
        mask = np.where(rng.random((5, 5)) < 0.4, -np.inf, 0.0)
        mask[:, 0] = 0.0  # keep every row alive
        got = masked_attention(
            torch.from_numpy(q), torch.from_numpy(k), torch.from_numpy(v), torch.from_numpy(mask)
        )
        expected = softmax_attention_oracle(q, k, v, mask)
        assert relative_error(got.numpy(), expected) < 1e-12

    def test_diagonal_mask_returns_values_unchanged(self):
        # one unmasked key per query means the softmax weight is exactly 1
        t, d = 7, 4
        q, k = torch.randn(t, d, dtype=torch.float64), torch.randn(t, d, dtype=torch.float64)
        v = torch.randn(t, d, dtype=torch.float64)
        out = masked_attention(q, k, v, diagonal_mask(t, torch.float64))
        assert torch.equal(out, v)

    def test_fully_blocked_row_raises(self):
        q = torch.randn(3, 2)
        mask = torch.zeros(3, 3)
        mask[1, :] = float("-inf")
        with pytest.raises(ValueError, match="blocks every key"):
            masked_attention(q, q, q, mask)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            masked_attention(torch.zeros(3, 2), torch.zeros(3, 4), torch.zeros(3, 4))

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(7)
        k = torch.from_numpy(rng.normal(size=(4, 3)))
        v = torch.from_numpy(rng.normal(size=(4, 3)))
        q0 = rng.normal(size=(4, 3))

        def scalar(q_np):
            q = torch.from_numpy(np.asarray(q_np))
            return float(masked_attention(q, k, v).sum())

        q = torch.from_numpy(q0.copy()).requires_grad_(True)
        masked_attention(q, k, v).sum().backward()
        assert relative_error(q.grad.numpy(), fd_gradient(scalar, q0)) < 1e-6


class TestTimestepFilm:
    def test_identity_at_init(self):
        film = TimestepFilm(8, 6).double()
        h = torch.randn(2, 5, 8, dtype=torch.float64)
        temb = torch.randn(2, 6, dtype=torch.float64)
        assert torch.equal(film(h, temb), h)

    def test_scale_and_shift_applied_per_channel(self):
        film = TimestepFilm(3, 4).double()
        with torch.no_grad():
            film.net[-1].weight.zero_()
            film.net[-1].bias.copy_(torch.tensor([0.5, -1.0, 0.0, 2.0, 0.0, -3.0]))
        h = torch.randn(1, 4, 3, dtype=torch.float64)
        out = film(h, torch.zeros(1, 4, dtype=torch.float64))
        expected = h * torch.tensor([1.5, 0.0, 1.0]) + torch.tensor([2.0, 0.0, -3.0])
        assert torch.allclose(out, expected, atol=1e-12)


class TestAdainStyle:
    def test_zero_init_reduces_to_instance_norm(self):
        adain = AdainStyle(4, 6).double()
        h = np.random.default_rng(8).normal(size=(3, 10, 4))
        style = torch.randn(3, 6, dtype=torch.float64)
        with torch.no_grad():
            got = adain(torch.from_numpy(h), style).numpy()
        assert relative_error(got, instance_norm_oracle(h)) < 1e-12

    def test_style_modulates_after_normalization(self):
        adain = AdainStyle(2, 3).double()
        with torch.no_grad():
            adain.net[-1].bias.copy_(torch.tensor([1.0, 0.0, 0.0, 5.0], dtype=torch.float64))
        h = torch.randn(1, 20, 2, dtype=torch.float64)
        with torch.no_grad():
            got = adain(h, torch.zeros(1, 3, dtype=torch.float64))
        normed = torch.from_numpy(instance_norm_oracle(h.numpy()))
        expected = normed * torch.tensor([2.0, 1.0]) + torch.tensor([0.0, 5.0])
        assert torch.allclose(got, expected, atol=1e-12)

    def test_distinct_styles_give_distinct_outputs(self):
        torch.manual_seed(11)
        adain = AdainStyle(4, 6)
        with torch.no_grad():  # break the zero init so the style path is live
            adain.net[-1].weight.normal_(0.0, 0.5)
        h = torch.randn(2, 8, 4)
        a = adain(h, torch.randn(2, 6))
        b = adain(h, torch.randn(2, 6))
        assert not torch.allclose(a, b)

    def test_gradient_through_normalization(self):
        adain = AdainStyle(3, 2).double()
        with torch.no_grad():
            adain.net[-1].weight.normal_(0.0, 0.3)
        style = torch.randn(1, 2, dtype=torch.float64)
        h0 = np.random.default_rng(9).normal(size=(1, 6, 3))
        target = torch.randn(1, 6, 3, dtype=torch.float64)

        def scalar(h_np):
            h = torch.from_numpy(np.asarray(h_np))
            with torch.no_grad():
                return float(((adain(h, style) - target) ** 2).sum())

        h = torch.from_numpy(h0.copy()).requires_grad_(True)
        ((adain(h, style) - target) ** 2).sum().backward()
        assert relative_error(h.grad.numpy(), fd_gradient(scalar, h0)) < 1e-5


class TestFrameLocality:
    def test_cross_attention_frame_count_mismatch(self):
        attn = FrameLockedCrossAttention(8, 2)
        with pytest.raises(ValueError, match="frames"):
            attn(torch.randn(1, 6, 8), torch.randn(1, 5, 8))

    def test_permuting_frames_permutes_output(self):
        # with self-attention off, every remaining op is frame-local, so a
        # frame permutation of inputs must permute outputs and nothing else
        config = DenoiserConfig(
            dim=7, content_dim=5, style_dim=6, width=16, blocks=2, heads=2,
            ffn_width=24, time_dim=8, use_self_attention=False,
        )
        torch.manual_seed(13)
        model = ExpressionDenoiser(config).double()
        for p in model.parameters():
            p.data.normal_(0.0, 0.2)
        z = torch.randn(2, 9, 7, dtype=torch.float64)
        content = torch.randn(2, 9, 5, dtype=torch.float64)
        style = torch.randn(2, 6, dtype=torch.float64)
        template = torch.randn(2, 6, dtype=torch.float64)
        perm = torch.randperm(9, generator=torch.Generator().manual_seed(3))
        with torch.no_grad():
            base = model(z, 17, content, style, template)
            shuffled = model(z[:, perm], 17, content[:, perm], style, template)
        assert torch.allclose(shuffled, base[:, perm], atol=1e-10)

    def test_self_attention_breaks_locality(self):
        config = DenoiserConfig(
            dim=7, content_dim=5, style_dim=6, width=16, blocks=2, heads=2,
            ffn_width=24, time_dim=8, use_self_attention=True,
        )
        torch.manual_seed(13)
        model = ExpressionDenoiser(config).double()
        for p in model.parameters():
            p.data.normal_(0.0, 0.2)
        z = torch.randn(1, 9, 7, dtype=torch.float64)
        content = torch.randn(1, 9, 5, dtype=torch.float64)
        style = torch.randn(1, 6, dtype=torch.float64)
        template = torch.randn(1, 6, dtype=torch.float64)
        perm = torch.randperm(9, generator=torch.Generator().manual_seed(3))
        with torch.no_grad():
            base = model(z, 17, content, style, template)
            shuffled = model(z[:, perm], 17, content[:, perm], style, template)
        assert not torch.allclose(shuffled, base[:, perm], atol=1e-6)


@pytest.fixture()
def model():
    torch.manual_seed(21)
    return ExpressionDenoiser(
        DenoiserConfig(dim=5, content_dim=4, style_dim=6, width=8, blocks=1,
                       heads=2, ffn_width=12, time_dim=8)
    )


class TestDenoiserForward:

    def test_output_shape(self, model):
        out = model(torch.randn(3, 10, 5), 7, torch.randn(3, 10, 4),
                    torch.randn(3, 6), torch.randn(3, 6))
        assert out.shape == (3, 10, 5)

    def test_wrong_feature_dim_raises(self, model):
        with pytest.raises(ValueError, match="z_t must be"):
            model(torch.randn(3, 10, 6), 7, torch.randn(3, 10, 4),
                  torch.randn(3, 6), torch.randn(3, 6))

    def test_int_and_tensor_timesteps_agree(self, model):
        z = torch.randn(2, 10, 5)
        content, style, template = torch.randn(2, 10, 4), torch.randn(2, 6), torch.randn(2, 6)
        with torch.no_grad():
            a = model(z, 9, content, style, template)
            b = model(z, torch.tensor([9, 9]), content, style, template)
        assert torch.equal(a, b)

    def test_per_sample_timesteps(self, model):
        z = torch.randn(2, 10, 5)
        content, style, template = torch.randn(2, 10, 4), torch.randn(2, 6), torch.randn(2, 6)
        with torch.no_grad():
            mixed = model(z, torch.tensor([3, 50]), content, style, template)
            lone = model(z[1:], 50, content[1:], style[1:], template[1:])
        assert torch.allclose(mixed[1], lone[0], atol=1e-6)
        assert not torch.allclose(mixed[0], lone[0], atol=1e-3)

    def test_drop_mask_routes_to_null_embeddings(self, model):
        z = torch.randn(2, 10, 5)
        content, style, template = torch.randn(2, 10, 4), torch.randn(2, 6), torch.randn(2, 6)
        drop = torch.tensor([False, True])
        with torch.no_grad():
            out = model(z, 5, content, style, template, drop_mask=drop)
            kept = model(z, 5, content, style, template)
            nulled = model(
                z, 5,
                model.null_content.expand(2, 10, -1),
                model.null_style.expand(2, -1),
                template,
            )
        assert torch.allclose(out[0], kept[0], atol=1e-6)
        assert torch.allclose(out[1], nulled[1], atol=1e-6)

    def test_style_reaches_output_once_adain_is_live(self):
        torch.manual_seed(29)
        model = ExpressionDenoiser(
            DenoiserConfig(dim=5, content_dim=4, style_dim=6, width=8, blocks=1,
                           heads=2, ffn_width=12, time_dim=8)
        )
        with torch.no_grad():
            for block in model.blocks:
                block.adain.net[-1].weight.normal_(0.0, 0.3)
        z = torch.randn(1, 10, 5)
        content, template = torch.randn(1, 10, 4), torch.randn(1, 6)
        with torch.no_grad():
            a = model(z, 5, content, torch.zeros(1, 6), template)
            b = model(z, 5, content, torch.full((1, 6), 2.0), template)
        assert not torch.allclose(a, b)

    def test_template_reaches_output(self, model):
        z = torch.randn(1, 10, 5)
        content, style = torch.randn(1, 10, 4), torch.randn(1, 6)
        with torch.no_grad():
            a = model(z, 5, content, style, torch.zeros(1, 6))
            b = model(z, 5, content, style, torch.ones(1, 6))
        assert not torch.allclose(a, b)


class TestEmbeddings:
    def test_sinusoidal_shape_and_range(self):
        emb = sinusoidal_embedding(torch.arange(10), 16)
        assert emb.shape == (10, 16)
        assert float(emb.abs().max()) <= 1.0
        assert torch.allclose(emb[0, :8], torch.zeros(8))
        assert torch.allclose(emb[0, 8:], torch.ones(8))

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_embedding(torch.arange(4), 7)

    def test_distinct_positions_distinct_embeddings(self):
        emb = sinusoidal_embedding(torch.arange(64), 32)
        gram = emb @ emb.T
        off_diag = gram - torch.diag(torch.diag(gram))
        assert float(off_diag.max()) < float(gram.diag().min())

    def test_subject_template_deterministic_unit_norm(self):
        a = subject_template("subj00")
        b = subject_template("subj00")
        c = subject_template("subj01")
        assert torch.equal(a, b)
        assert abs(float(a.norm()) - 1.0) < 1e-6
        assert not torch.equal(a, c)
        assert a.shape == (64,)
        assert subject_template("x", style_dim=16).shape == (16,)
