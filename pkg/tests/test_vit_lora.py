"""
学生网络测试
切块嵌入、注意力、LoRA 旁路与合并、参数计数
"""
import math

import pytest
import torch

from checkpoint import checkpoint_store
from errors import ConfigError, ContractError, DimensionError
from tensor_nn import RngState, float64_mode, grad_check, init_linear
from vit_lora import (LoRAConfig, LoRALinear, ViTConfig, attach_lora, build_student, extract_patches, lora_forward,
                      lora_merge, merge_lora_model, mhsa_forward, patchify, trainable_param_count, vit_forward)


def _randomize_lora(model, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, layer in model.lora_layers():
            layer.lora.B.copy_(torch.randn(layer.lora.B.shape, generator=gen, dtype=layer.lora.B.dtype) * 0.1)


@pytest.fixture
def lora_layer():
    base = init_linear(6, 4, RngState(3))
    return LoRALinear.from_linear(base, LoRAConfig(rank=2, alpha=4.0, dropout_rate=0.5), RngState(4))


class TestConfigs:
    def test_patch_must_divide_image(self):
        with pytest.raises(ConfigError):
            ViTConfig(image_size=30, patch_size=8).validate()

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError):
            ViTConfig(dim=10, heads=4).validate()

    def test_default_lora_scale(self):
        assert LoRAConfig().scale == 2.0

    def test_rank_zero_rejected(self):
        with pytest.raises(ConfigError):
            LoRAConfig(rank=0).validate()

    def test_unknown_target_rejected(self):
        with pytest.raises(ConfigError):
            LoRAConfig(targets=("embedding",)).validate()


class TestPatchify:
    """切块与位置嵌入"""

    def test_token_count_desk_geometry(self, rng):
        model = build_student(ViTConfig(), None, rng)
        tokens = patchify(model.patch_embed, torch.rand(1, 32, 32))
        assert tokens.shape == (17, 64)

    def test_token_count_full_geometry(self):
        cfg = ViTConfig(image_size=224, patch_size=16, channels=3)
        assert cfg.num_tokens == 197

    def test_patches_are_row_major(self):
        image = torch.arange(16, dtype=torch.float32).reshape(1, 1, 4, 4)
        patches = extract_patches(image, 2)[0]
        assert patches[0].tolist() == [0, 1, 4, 5]
        assert patches[1].tolist() == [2, 3, 6, 7]
        assert patches[2].tolist() == [8, 9, 12, 13]

    def test_zero_image_zero_projection_gives_positional_rows(self, micro_vit_cfg, rng):
        model = build_student(micro_vit_cfg, None, rng)
        embed = model.patch_embed
        with torch.no_grad():
            embed.proj.weight.zero_()
            embed.proj.bias.zero_()
        tokens = patchify(embed, torch.zeros(1, 4, 4))
        assert torch.allclose(tokens[1:], embed.pos_embed[0, 1:])
        assert torch.allclose(tokens[0], embed.cls_token[0, 0] + embed.pos_embed[0, 0])

    def test_wrong_size_is_dimension_error(self, micro_vit_cfg, rng):
        model = build_student(micro_vit_cfg, None, rng)
        with pytest.raises(DimensionError):
            patchify(model.patch_embed, torch.zeros(1, 6, 6))


class TestLoRAForward:
    """低秩旁路前向"""

    def test_zero_b_matches_base_even_in_training(self, lora_layer):
        x = torch.randn(5, 6, generator=torch.Generator().manual_seed(0))
        base = torch.nn.functional.linear(x, lora_layer.weight, lora_layer.bias)
        assert torch.equal(lora_forward(lora_layer, x, True, RngState(1)), base)

    def test_dense_reconstruction(self, lora_layer):
        with torch.no_grad():
            lora_layer.lora.B.normal_(generator=torch.Generator().manual_seed(2))
        x = torch.randn(7, 6, generator=torch.Generator().manual_seed(0))
        dense = lora_layer.weight + lora_layer.scale * lora_layer.lora.B @ lora_layer.lora.A
        expected = x @ dense.T + lora_layer.bias
        assert torch.allclose(lora_forward(lora_layer, x, False, None), expected, atol=1e-5)

    def test_dropout_only_on_low_rank_path(self, lora_layer):
        with torch.no_grad():
            lora_layer.lora.A.zero_()
        x = torch.randn(3, 6)
        out = lora_forward(lora_layer, x, True, RngState(5))
        assert torch.equal(out, torch.nn.functional.linear(x, lora_layer.weight, lora_layer.bias))

    def test_width_mismatch(self, lora_layer):
        with pytest.raises(DimensionError):
            lora_forward(lora_layer, torch.zeros(2, 5), False, None)

    def test_rank_above_layer_size(self):
        with pytest.raises(ConfigError):
            LoRALinear.from_linear(init_linear(3, 4, RngState(0)), LoRAConfig(rank=4), RngState(1))

    def test_base_is_frozen(self, lora_layer):
        names = {name for name, p in lora_layer.named_parameters() if p.requires_grad}
        assert names == {"lora.A", "lora.B"}


class TestLoRAMerge:
    """合并为普通线性层"""

    def test_zero_b_merge_keeps_weight(self, lora_layer):
        lora_layer.eval()
        assert torch.equal(lora_merge(lora_layer).weight, lora_layer.weight)

    def test_paired_forward(self, lora_layer):
        with torch.no_grad():
            lora_layer.lora.B.normal_(generator=torch.Generator().manual_seed(3))
        lora_layer.eval()
        merged = lora_merge(lora_layer)
        x = torch.randn(100, 6, generator=torch.Generator().manual_seed(4))
        diff = (merged(x) - lora_forward(lora_layer, x, False, None)).abs().max().item()
        assert diff < 1e-5

    def test_merge_is_idempotent(self, lora_layer):
        lora_layer.eval()
        once = lora_merge(lora_layer)
        twice = lora_merge(once)
        assert torch.equal(once.weight, twice.weight) and torch.equal(once.bias, twice.bias)

    def test_training_mode_rejected(self, lora_layer):
        lora_layer.train()
        with pytest.raises(ContractError):
            lora_merge(lora_layer)


class TestAttention:
    """多头自注意力块"""

    def test_rows_sum_to_one(self, micro_vit_cfg, rng):
        model = build_student(micro_vit_cfg, None, rng)
        block = model.blocks[0].attn
        mhsa_forward(torch.randn(5, 8), block, False)
        sums = block.last_attention.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_single_token_attends_to_itself(self, micro_vit_cfg, rng):
        block = build_student(micro_vit_cfg, None, rng).blocks[0].attn
        mhsa_forward(torch.randn(1, 8), block, False)
        assert torch.allclose(block.last_attention, torch.ones(1, 2, 1, 1))

    def test_zero_query_key_gives_uniform_attention(self, micro_vit_cfg, rng):
        block = build_student(micro_vit_cfg, None, rng).blocks[0].attn
        with torch.no_grad():
            block.qkv.weight[:16].zero_()
            block.qkv.bias[:16].zero_()
        mhsa_forward(torch.randn(4, 8), block, False)
        assert torch.allclose(block.last_attention, torch.full((1, 2, 4, 4), 0.25))

    def test_per_head_loop_reference(self, micro_vit_cfg, rng):
        with float64_mode():
            block = build_student(micro_vit_cfg, None, rng).blocks[0].attn
            tokens = torch.randn(3, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
            out = mhsa_forward(tokens, block, False)

            normed = block.norm(tokens)
            qkv = block.qkv(normed)
            heads = []
            for h in range(2):
                q = qkv[:, h * 4:(h + 1) * 4]
                k = qkv[:, 8 + h * 4:8 + (h + 1) * 4]
                v = qkv[:, 16 + h * 4:16 + (h + 1) * 4]
                weights = torch.softmax(q @ k.T / math.sqrt(4), dim=-1)
                heads.append(weights @ v)
            expected = tokens + block.proj(torch.cat(heads, dim=-1))
        assert torch.allclose(out, expected, atol=1e-5)


class TestVitForward:
    """学生整体前向"""

    def test_shapes(self, micro_vit_cfg, micro_lora_cfg, rng):
        model = build_student(micro_vit_cfg, micro_lora_cfg, rng)
        out = vit_forward(model, torch.rand(3, 1, 4, 4), False)
        assert out.logits.shape == (3, 2)
        assert out.embedding.shape == (3, 8)

    def test_batch_independence_and_permutation(self, micro_vit_cfg, rng):
        model = build_student(micro_vit_cfg, None, rng)
        images = torch.rand(4, 1, 4, 4, generator=torch.Generator().manual_seed(0))
        images[3] = images[0]
        out = vit_forward(model, images, False).logits
        assert torch.allclose(out[0], out[3], atol=1e-7)
        permuted = vit_forward(model, images[[2, 0, 1, 3]], False).logits
        assert torch.allclose(permuted, out[[2, 0, 1, 3]], atol=1e-6)

    def test_pixel_sensitivity(self, micro_vit_cfg, rng):
        model = build_student(micro_vit_cfg, None, rng)
        images = torch.rand(1, 1, 4, 4)
        before = vit_forward(model, images, False).logits
        images[0, 0, 1, 2] += 0.5
        assert not torch.equal(before, vit_forward(model, images, False).logits)

    def test_geometry_mismatch(self, micro_vit_cfg, rng):
        with pytest.raises(DimensionError):
            vit_forward(build_student(micro_vit_cfg, None, rng), torch.rand(1, 1, 8, 8), False)

    def test_zero_init_neutrality(self, micro_vit_cfg, micro_lora_cfg):
        plain = build_student(micro_vit_cfg, None, RngState(11))
        adapted = attach_lora(build_student(micro_vit_cfg, None, RngState(11)), micro_lora_cfg, RngState(12))
        images = torch.rand(2, 1, 4, 4, generator=torch.Generator().manual_seed(0))
        assert torch.equal(vit_forward(plain, images, False).logits, vit_forward(adapted, images, False).logits)

    def test_merged_model_agrees(self, micro_vit_cfg, micro_lora_cfg, rng):
        model = build_student(micro_vit_cfg, micro_lora_cfg, rng)
        _randomize_lora(model)
        merged = merge_lora_model(model)
        images = torch.rand(1000, 1, 4, 4, generator=torch.Generator().manual_seed(5))
        expected = vit_forward(model, images, False).logits
        assert (vit_forward(merged, images, False).logits - expected).abs().max().item() < 1e-5
        assert not merged.lora_layers()

    def test_merged_model_agrees_after_training(self, micro_vit_cfg, micro_lora_cfg, rng):
        with float64_mode():
            model = build_student(micro_vit_cfg, micro_lora_cfg, rng)
            frozen_names = [n for n, p in model.named_parameters() if not p.requires_grad]
            base_hash = checkpoint_store.state_hash(model, frozen_names)
            optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=5e-3)
            gen = torch.Generator().manual_seed(7)
            for step in range(200):
                images = torch.rand(16, 1, 4, 4, generator=gen)
                labels = (images.mean(dim=(1, 2, 3)) > 0.5).long()
                logits = vit_forward(model, images, True, RngState(8, step)).logits
                loss = torch.nn.functional.cross_entropy(logits, labels)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            assert checkpoint_store.state_hash(model, frozen_names) == base_hash
            assert all(layer.lora.B.abs().max().item() > 0 for _, layer in model.lora_layers())

            merged = merge_lora_model(model)
            images = torch.rand(1000, 1, 4, 4, generator=torch.Generator().manual_seed(9))
            expected = vit_forward(model, images, False).logits
            assert (vit_forward(merged, images, False).logits - expected).abs().max().item() < 1e-5

    def test_forward_restores_module_mode(self, micro_vit_cfg, micro_lora_cfg, rng):
        model = build_student(micro_vit_cfg, micro_lora_cfg, rng)
        model.train()
        vit_forward(model, torch.rand(1, 1, 4, 4), False)
        assert all(m.training for m in model.modules())
        block = model.blocks[0].attn
        block.eval()
        mhsa_forward(torch.randn(5, 8), block, True, RngState(1))
        assert not any(m.training for m in block.modules())

    def test_lora_gradients_pass_grad_check(self, micro_vit_cfg, micro_lora_cfg, rng):
        with float64_mode():
            model = build_student(micro_vit_cfg, micro_lora_cfg, rng)
            _randomize_lora(model)
            model.eval()
            images = torch.rand(2, 1, 4, 4, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
            params = [(n, p) for n, p in model.named_parameters() if ".lora." in n]
            report = grad_check(lambda: model(images).logits.pow(2).sum(), params)
        assert report.passed, report.worst()


class TestTrainableParamCount:
    """可训练参数计数"""

    def test_single_layer_formula(self):
        layer = LoRALinear.from_linear(init_linear(64, 64, RngState(0)), LoRAConfig(rank=8), RngState(1))
        assert trainable_param_count(layer)[0] == 8 * (64 + 64)

    def test_micro_formula_matches_enumeration(self, micro_vit_cfg, micro_lora_cfg, rng):
        model = build_student(micro_vit_cfg, micro_lora_cfg, rng)
        r, d, hidden = 2, 8, 16
        per_block = r * (d + 3 * d) + r * (d + d) + r * (d + hidden) + r * (hidden + d)
        head = d * 2 + 2
        assert trainable_param_count(model)[0] == per_block + head

    def test_only_lora_and_head_train(self, micro_vit_cfg, micro_lora_cfg, rng):
        model = build_student(micro_vit_cfg, micro_lora_cfg, rng)
        for name, p in model.named_parameters():
            assert p.requires_grad == (".lora." in name or name.startswith("head."))

    def test_desk_config_share(self, rng):
        cfg = ViTConfig()
        model = build_student(cfg, LoRAConfig(), rng)
        trainable, total = trainable_param_count(model)
        lora_scalars = sum(p.numel() for n, p in model.named_parameters() if ".lora." in n)
        d, hidden = cfg.dim, cfg.mlp_hidden
        assert lora_scalars == cfg.depth * 8 * (4 * d + 2 * d + 2 * (d + hidden))
        assert trainable == lora_scalars + d * 2 + 2
        assert lora_scalars / total < 0.15
        assert trainable / total < 0.16

    def test_rank_monotonicity(self, rng):
        small = trainable_param_count(build_student(ViTConfig(), LoRAConfig(rank=1), rng))[0]
        large = trainable_param_count(build_student(ViTConfig(), LoRAConfig(rank=8), rng))[0]
        assert small < large

    def test_plain_student_fully_trainable(self, micro_vit_cfg, rng):
        trainable, total = trainable_param_count(build_student(micro_vit_cfg, None, rng))
        assert trainable == total
