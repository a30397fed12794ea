import numpy as np
import pytest
import torch

from coftad.encoder import (
    EncoderConfig,
    OnlineNetwork,
    TinyBackbone,
    count_parameters,
    ema_update,
    embed,
    init_target,
    load_checkpoint,
    load_pretrained,
    save_checkpoint,
)
from coftad.errors import CheckpointError, CheckpointMismatchError
from coftad.losses import contrastive_loss, cross_instance_pp_loss, negative_pair_loss


def tiny_config(**overrides) -> EncoderConfig:
    base = dict(
        backbone_arch="tiny",
        input_size=16,
        feature_dim=8,
        projector_hidden_dim=16,
        projector_out_dim=4,
        predictor_hidden_dim=16,
        init_seed=0,
    )
    base.update(overrides)
    return EncoderConfig(**base)


class TestLoadPretrained:
    def test_tiny_backbone_parameter_count_by_construction(self):
        cfg = tiny_config()
        online = load_pretrained(cfg)
        w, f = online.backbone.width, cfg.feature_dim
        # conv kernels are 3x3 without bias; each BatchNorm adds weight+bias
        expected = (3 * w * 9 + 2 * w) + (w * 2 * w * 9 + 2 * 2 * w) + (2 * w * f * 9 + 2 * f)
        assert count_parameters(online.backbone) == expected

    def test_checkpoint_loaded_bit_for_bit(self, tmp_path):
        donor = TinyBackbone(feature_dim=8)
        with torch.no_grad():
            donor.block1[0].weight.zero_()
        ckpt = tmp_path / "backbone.pt"
        torch.save(donor.state_dict(), ckpt)
        online = load_pretrained(tiny_config(pretrained_checkpoint=str(ckpt)))
        assert torch.equal(online.backbone.block1[0].weight, torch.zeros_like(online.backbone.block1[0].weight))
        for name, param in online.backbone.state_dict().items():
            assert torch.equal(param, donor.state_dict()[name]), name

    def test_checkpoint_parameter_count_matches_fixture(self, tmp_path):
        cfg = tiny_config()
        donor = load_pretrained(cfg)
        ckpt = tmp_path / "backbone.pt"
        torch.save(donor.backbone.state_dict(), ckpt)
        loaded = load_pretrained(tiny_config(pretrained_checkpoint=str(ckpt)))
        assert count_parameters(loaded.backbone) == count_parameters(donor.backbone)

    def test_no_checkpoint_initializes_from_recorded_seed(self):
        a = load_pretrained(tiny_config(init_seed=7))
        b = load_pretrained(tiny_config(init_seed=7))
        c = load_pretrained(tiny_config(init_seed=8))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))

    def test_missing_file_raises_load_error(self):
        with pytest.raises(CheckpointError):
            load_pretrained(tiny_config(pretrained_checkpoint="/nonexistent/backbone.pt"))

    def test_shape_mismatch_lists_offending_tensors(self, tmp_path):
        donor = TinyBackbone(feature_dim=16)
        ckpt = tmp_path / "wrong.pt"
        torch.save(donor.state_dict(), ckpt)
        with pytest.raises(CheckpointMismatchError) as excinfo:
            load_pretrained(tiny_config(pretrained_checkpoint=str(ckpt)))
        assert excinfo.value.offending
        assert any("block3" in name for name in excinfo.value.offending)

    def test_heads_fresh_despite_checkpoint(self, tmp_path):
        cfg = tiny_config(init_seed=3)
        donor = load_pretrained(cfg)
        ckpt = tmp_path / "backbone.pt"
        torch.save(donor.backbone.state_dict(), ckpt)
        loaded = load_pretrained(tiny_config(init_seed=3, pretrained_checkpoint=str(ckpt)))
        for pa, pb in zip(donor.projector.parameters(), loaded.projector.parameters()):
            assert torch.equal(pa, pb)  # same seed, same fresh init


class TestInitTarget:
    def test_exact_copy_of_backbone_and_projector(self):
        online = load_pretrained(tiny_config())
        target = init_target(online)
        for (name, p_t), p_o in zip(target.backbone.named_parameters(), online.backbone.parameters()):
            assert torch.equal(p_t, p_o), name
        for p_t, p_o in zip(target.projector.parameters(), online.projector.parameters()):
            assert torch.equal(p_t, p_o)

    def test_target_has_no_predictor(self):
        target = init_target(load_pretrained(tiny_config()))
        assert not hasattr(target, "predictor")
        assert all(not p.requires_grad for p in target.parameters())

    def test_target_unchanged_by_online_mutation_until_ema(self):
        online = load_pretrained(tiny_config())
        target = init_target(online)
        before = [p.clone() for p in target.parameters()]
        with torch.no_grad():
            for p in online.parameters():
                p.add_(1.0)
        for p, b in zip(target.parameters(), before):
            assert torch.equal(p, b)
        ema_update(target, online, beta=0.5)
        assert any(not torch.equal(p, b) for p, b in zip(target.parameters(), before))


class TestEmaUpdate:
    def test_beta_one_leaves_target_unchanged(self):
        online = load_pretrained(tiny_config(init_seed=1))
        target = init_target(load_pretrained(tiny_config(init_seed=2)))
        before = [p.clone() for p in target.parameters()]
        ema_update(target, online, beta=1.0)
        for p, b in zip(target.parameters(), before):
            assert torch.equal(p, b)

    def test_beta_zero_copies_online(self):
        online = load_pretrained(tiny_config(init_seed=1))
        target = init_target(load_pretrained(tiny_config(init_seed=2)))
        ema_update(target, online, beta=0.0)
        for (name, p_t), p_o in zip(target.backbone.named_parameters(), online.backbone.parameters()):
            assert torch.equal(p_t, p_o), name

    def test_scalar_arithmetic(self):
        online = load_pretrained(tiny_config())
        target = init_target(online)
        with torch.no_grad():
            next(online.parameters()).fill_(4.0)
            next(target.parameters()).fill_(2.0)
        ema_update(target, online, beta=0.75)
        assert torch.allclose(next(target.parameters()), torch.full_like(next(target.parameters()), 2.5))

    def test_twice_with_beta_equals_once_with_beta_squared(self):
        beta = 0.9
        online = load_pretrained(tiny_config(init_seed=5))
        t1 = init_target(load_pretrained(tiny_config(init_seed=6)))
        t2 = init_target(load_pretrained(tiny_config(init_seed=6)))
        ema_update(t1, online, beta)
        ema_update(t1, online, beta)
        ema_update(t2, online, beta * beta)
        for p1, p2 in zip(t1.parameters(), t2.parameters()):
            assert torch.allclose(p1, p2, atol=1e-6)

    def test_beta_out_of_range_raises(self):
        online = load_pretrained(tiny_config())
        target = init_target(online)
        with pytest.raises(ValueError):
            ema_update(target, online, beta=1.5)
        with pytest.raises(ValueError):
            ema_update(target, online, beta=-0.1)


class TestEmbed:
    def test_backbone_depth_shape(self):
        cfg = tiny_config()
        online = load_pretrained(cfg)
        images = torch.rand(5, 3, cfg.input_size, cfg.input_size)
        out = embed(online, images, depth="backbone")
        assert out.vectors.shape == (5, cfg.feature_dim)
        assert embed(online, images, depth="projected").vectors.shape == (5, cfg.projector_out_dim)
        assert embed(online, images, depth="predicted").vectors.shape == (5, cfg.projector_out_dim)

    def test_duplicate_rows_embed_identically(self):
        cfg = tiny_config()
        online = load_pretrained(cfg)
        one = torch.rand(1, 3, cfg.input_size, cfg.input_size)
        images = one.repeat(4, 1, 1, 1)
        out = embed(online, images, depth="backbone").vectors
        for i in range(1, 4):
            assert torch.equal(out[0], out[i])

    def test_predicted_depth_rejected_on_target(self):
        online = load_pretrained(tiny_config())
        target = init_target(online)
        images = torch.rand(2, 3, 16, 16)
        with pytest.raises(ValueError):
            embed(target, images, depth="predicted")

    def test_embed_is_pure(self):
        online = load_pretrained(tiny_config())
        images = torch.rand(3, 3, 16, 16)
        before = [p.clone() for p in online.parameters()]
        buffers_before = [b.clone() for b in online.buffers()]
        a = embed(online, images, depth="predicted").vectors
        b = embed(online, images, depth="predicted").vectors
        assert torch.equal(a, b)
        for p, p0 in zip(online.parameters(), before):
            assert torch.equal(p, p0)
        for buf, b0 in zip(online.buffers(), buffers_before):
            assert torch.equal(buf, b0)

    def test_hand_rolled_forward_oracle(self):
        """Scalar-loop reimplementation of the tiny backbone on a 2x2 image."""
        cfg = tiny_config(input_size=2)
        online = load_pretrained(cfg)
        rng = np.random.default_rng(0)
        # hand-set every weight so the oracle exercises non-default values
        with torch.no_grad():
            for p in online.backbone.parameters():
                p.copy_(torch.tensor(rng.normal(scale=0.5, size=tuple(p.shape)), dtype=torch.float32))
        image = torch.full((1, 3, 2, 2), 0.25)
        got = embed(online, image, depth="backbone").vectors[0].numpy()

        def conv_s2_p1(x, weight):
            c_out, c_in, _, _ = weight.shape
            h_in = x.shape[1]
            h_out = (h_in + 2 - 3) // 2 + 1
            out = np.zeros((c_out, h_out, h_out))
            for co in range(c_out):
                for oy in range(h_out):
                    for ox in range(h_out):
                        acc = 0.0
                        for ci in range(c_in):
                            for ky in range(3):
                                for kx in range(3):
                                    iy, ix = 2 * oy + ky - 1, 2 * ox + kx - 1
                                    if 0 <= iy < h_in and 0 <= ix < h_in:
                                        acc += x[ci, iy, ix] * weight[co, ci, ky, kx]
                        out[co, oy, ox] = acc
            return out

        def bn_eval(x, bn):
            w = bn.weight.detach().numpy()
            b = bn.bias.detach().numpy()
            mean = bn.running_mean.numpy()
            var = bn.running_var.numpy()
            out = np.empty_like(x)
            for c in range(x.shape[0]):
                out[c] = (x[c] - mean[c]) / np.sqrt(var[c] + bn.eps) * w[c] + b[c]
            return out

        x = image[0].numpy().astype(np.float64)
        for block in (online.backbone.block1, online.backbone.block2, online.backbone.block3):
            x = conv_s2_p1(x, block[0].weight.detach().numpy().astype(np.float64))
            x = bn_eval(x, block[1])
            if len(block) == 3:  # final block carries no ReLU
                x = np.maximum(x, 0.0)
        expected = x.reshape(x.shape[0], -1).mean(axis=1)
        np.testing.assert_allclose(got, expected, atol=1e-6)


class TestTargetGradientFreedom:
    def test_losses_leave_target_parameters_gradient_free(self):
        cfg = tiny_config()
        online = load_pretrained(tiny_config(init_seed=1))
        target = init_target(load_pretrained(tiny_config(init_seed=2)))
        for p in target.parameters():
            p.requires_grad_(True)  # introspection only; training never does this
        online.set_finetune_mode()
        target.eval()
        images = torch.rand(4, 3, cfg.input_size, cfg.input_size)
        on_feats = online.backbone_features(images)
        on_pred = online.predict(online.project(on_feats))
        tg_feats = target.backbone_features(images)
        tg_proj = target.project(tg_feats)
        pairing = np.array([1, 0, 3, 2])
        loss = (
            contrastive_loss(on_pred, tg_proj)
            + cross_instance_pp_loss(on_feats, tg_feats, pairing)
            + negative_pair_loss(tg_feats, on_feats)
        )
        loss.backward()
        for name, p in target.named_parameters():
            assert p.grad is None or p.grad.abs().max().item() == 0.0, name
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in online.parameters())


class TestCheckpointRoundTrip:
    def test_save_load_bitwise(self, tmp_path):
        online = load_pretrained(tiny_config(init_seed=11))
        path = save_checkpoint(tmp_path / "ckpt.pt", online, seed=11)
        assert path.with_suffix(".pt.json").exists()
        loaded, meta = load_checkpoint(path)
        assert meta["seed"] == 11
        assert meta["arch"] == "tiny"
        for pa, pb in zip(online.parameters(), loaded.parameters()):
            assert torch.equal(pa, pb)
