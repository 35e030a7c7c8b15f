import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_config
from titanet_lid.errors import ConfigError, DimensionError
from titanet_lid.model import (
    ModelConfig,
    batch_features,
    build_model,
    count_flops,
    fixed_flops,
    forward,
    freeze_encoder,
    param_count_formula,
    param_shapes,
    replace_head,
    with_dropout,
)
from titanet_lid.nn import SequenceMask, Tensor, grad_check, no_grad
from titanet_lid.nn import functional as F


def hand_count(B, R, C, K, M=80, E=3072, H=512, r=8, kernels=(7, 11, 15)):
    """Independent tally, written layer by layer from the architecture description."""
    total = 0
    total += M * 3 + M * C + 2 * C  # prologue: dw, pw, bn
    for b in range(B):
        k = kernels[b]
        for _ in range(R):
            total += C * k + C * C + 2 * C
        cb = max(1, C // r)
        total += C * cb + cb + cb * C + C  # SE
        total += C * C + 2 * C  # residual projection + bn
    total += C * 1 + C * E + 2 * E  # epilogue
    total += 2 * E * H + H + H * K + K
    return total


configs = st.builds(
    lambda B, R, C, K, E, H, r, M, pk, ek: ModelConfig(
        num_blocks=B, repeats=R, channels=C, num_classes=K, epilogue_channels=E, hidden_dim=H,
        se_reduction=r, n_mels=M, prologue_kernel=pk, epilogue_kernel=ek,
        mega_kernel_sizes=tuple(3 + 2 * (i % 4) for i in range(B)),
    ),
    st.integers(1, 4), st.integers(1, 3), st.integers(1, 24), st.integers(2, 9), st.integers(1, 20),
    st.integers(1, 12), st.integers(1, 10), st.integers(1, 10), st.sampled_from([1, 3, 5]),
    st.sampled_from([1, 3]),
)


class TestParamCount:
    @given(configs)
    def test_formula_equals_runtime(self, cfg):
        m = build_model(cfg, seed=0)
        assert m.count_params() == param_count_formula(cfg)
        assert sum(int(np.prod(s)) for s in param_shapes(cfg).values()) == param_count_formula(cfg)

    @pytest.mark.parametrize("B, R, C", [(3, 5, 512), (3, 5, 1024), (3, 3, 256), (1, 2, 40)])
    def test_formula_equals_hand_tally(self, B, R, C):
        cfg = ModelConfig(num_blocks=B, repeats=R, channels=C, mega_kernel_sizes=(7, 11, 15)[:B])
        assert param_count_formula(cfg) == hand_count(B, R, C, 107)

    def test_monotone_in_repeats(self):
        counts = [param_count_formula(ModelConfig(repeats=R, channels=256)) for R in (3, 5, 7)]
        assert counts[0] < counts[1] < counts[2]

    def test_monotone_in_channels(self):
        counts = [param_count_formula(ModelConfig(repeats=5, channels=C)) for C in (256, 512, 1024, 2048)]
        assert all(a < b for a, b in zip(counts, counts[1:]))

    @pytest.mark.parametrize("C, target", [(512, 12.3e6), (1024, 28.9e6)])
    def test_scale_near_reference(self, C, target):
        n = param_count_formula(ModelConfig(repeats=5, channels=C, num_classes=107))
        assert abs(n - target) / target <= 0.25

    def test_buffers_not_counted(self, tiny_model):
        assert tiny_model.buffers
        assert tiny_model.count_params() == sum(t.data.size for t in tiny_model.params.values())

    def test_names_unique_and_hierarchical(self, tiny_model):
        names = list(tiny_model.params)
        assert len(names) == len(set(names))
        assert all(n.split(".")[0] in {"prologue", "blocks", "epilogue", "decoder"} for n in names)


class TestConfig:
    def test_kernel_count_must_match_blocks(self):
        with pytest.raises(ConfigError, match="kernel sizes"):
            ModelConfig(num_blocks=2)

    def test_even_kernel(self):
        with pytest.raises(ConfigError):
            ModelConfig(mega_kernel_sizes=(7, 10, 15))

    @pytest.mark.parametrize("field, value", [("channels", 0), ("num_classes", 1), ("dropout_p", 1.0)])
    def test_bad_values(self, field, value):
        with pytest.raises(ConfigError):
            ModelConfig(**{field: value})

    def test_bottleneck_floor(self):
        assert ModelConfig(channels=4).se_bottleneck == 1
        assert ModelConfig(channels=64).se_bottleneck == 8

    def test_dict_round_trip(self):
        cfg = tiny_config(dropout_p=0.2)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})

    def test_name(self):
        assert ModelConfig(repeats=2, channels=64).name == "TitaNet-LID-3x2x64"


class TestBuild:
    def test_init_scheme(self, tiny_model):
        p = tiny_model.params
        assert np.all(p["prologue.bn.gamma"].data == 1) and np.all(p["prologue.bn.beta"].data == 0)
        assert np.all(p["decoder.fc1.bias"].data == 0)
        w = p["blocks.1.sub.0.pw.weight"].data
        assert np.abs(w).max() <= np.sqrt(6.0 / w.shape[1])

    def test_seeded(self):
        a, b = build_model(tiny_config(), 4), build_model(tiny_config(), 4)
        for n in a.params:
            np.testing.assert_array_equal(a.params[n].data, b.params[n].data)
        c = build_model(tiny_config(), 5)
        assert not np.array_equal(a.params["decoder.fc2.weight"].data, c.params["decoder.fc2.weight"].data)

    def test_rejects_non_config(self):
        with pytest.raises(ConfigError):
            build_model({"channels": 8})


class TestForward:
    def test_batch_shapes(self, rng):
        m = build_model(tiny_config(num_classes=4), 0)
        feats = [rng.normal(size=(6, 298)), rng.normal(size=(6, 150))]
        assert m.forward(feats).shape == (2, 4)

    def test_mel_mismatch(self, tiny_model, rng):
        with pytest.raises(DimensionError):
            tiny_model.forward(rng.normal(size=(1, 7, 20)))

    def test_bad_mode(self, tiny_model, rng):
        with pytest.raises(ValueError):
            tiny_model.forward(rng.normal(size=(1, 6, 20)), mode="infer")

    def test_eval_deterministic(self, tiny_model, rng):
        x = rng.normal(size=(2, 6, 25))
        np.testing.assert_array_equal(tiny_model(x).data, tiny_model(x).data)

    def test_one_frame_finite(self, tiny_model, rng):
        assert np.all(np.isfinite(tiny_model(rng.normal(size=(1, 6, 1))).data))

    @pytest.mark.parametrize("seed", range(10))
    def test_padding_invariance(self, seed):
        rng = np.random.default_rng(seed)
        m = build_model(tiny_config(), seed)
        for buf in m.buffers.values():  # non-trivial running stats
            buf[:] = rng.uniform(0.5, 1.5, buf.shape)
        t = int(rng.integers(1, 40))
        pad = int(rng.integers(1, 30))
        x = rng.normal(size=(6, t))
        alone = m(x[None]).data[0]
        batch = rng.normal(size=(3, 6, t + pad)) * 100.0
        batch[1, :, :t] = x
        mask = SequenceMask((t + pad, t, int(rng.integers(1, t + pad + 1))), t + pad)
        np.testing.assert_allclose(m(batch, mask).data[1], alone, atol=1e-6)

    def test_fused_encoder_matches_reference(self, tiny_model, rng):
        x = Tensor(rng.normal(size=(3, 6, 17)))
        mask = SequenceMask((17, 9, 4), 17)
        for training in (False, True):
            a = tiny_model.copy()
            b = tiny_model.copy()
            ref = a.decode(a.encode(x, mask, training), mask, training)
            fused = b._head(b._encode_pooled(x, mask, training), training)
            np.testing.assert_allclose(fused.data, ref.data, atol=1e-10)
            for name in a.buffers:
                np.testing.assert_allclose(a.buffers[name], b.buffers[name], atol=1e-12)

    def test_train_mode_updates_running_stats(self, tiny_model, rng):
        before = tiny_model.buffers["epilogue.bn.running_mean"].copy()
        tiny_model(rng.normal(size=(2, 6, 10)), mode="train", seed=0)
        assert not np.array_equal(before, tiny_model.buffers["epilogue.bn.running_mean"])

    def test_module_level_forward(self, tiny_model, rng):
        x = rng.normal(size=(1, 6, 12))
        np.testing.assert_array_equal(forward(tiny_model, x).data, tiny_model(x).data)

    def test_batch_features_pads(self, rng):
        arr, mask = batch_features([rng.normal(size=(6, 5)), rng.normal(size=(6, 3))])
        assert arr.shape == (2, 6, 5) and mask.lengths == (5, 3)
        assert np.all(arr[1, :, 3:] == 0)
        with pytest.raises(DimensionError):
            batch_features([])


def test_se_zero_weights_halves_input(tiny_model, rng):
    for name in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"):
        tiny_model.params[f"blocks.0.se.{name}"].data[:] = 0.0
    x = Tensor(rng.normal(size=(2, 8, 11)))
    out = tiny_model.se_block(0, x, SequenceMask((11, 6), 11))
    np.testing.assert_allclose(out.data, 0.5 * x.data)


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradients(seed):
    rng = np.random.default_rng(seed)
    m = build_model(tiny_config(), seed)
    x = rng.normal(size=(2, 6, 12))
    mask = SequenceMask((12, 9), 12)
    targets = np.array([0, 2])
    weights = np.array([0.2, 0.3, 0.5])
    state = {n: b.copy() for n, b in m.buffers.items()}

    def loss():
        for n, b in state.items():  # running-stat updates must not leak between probes
            m.buffers[n][:] = b
        return F.weighted_cross_entropy(m(x, mask, mode="train", seed=0), targets, weights)

    for name in ("prologue.dw.weight", "blocks.1.sub.0.pw.weight", "blocks.2.se.fc1.weight",
                 "blocks.0.res.bn.gamma", "epilogue.pw.weight", "epilogue.bn.beta", "decoder.fc1.weight"):
        p = m.params[name]
        idx = rng.choice(p.data.size, size=min(6, p.data.size), replace=False)
        assert grad_check(loss, p, eps=1e-6, indices=idx) < 1e-4, name


class TestFlops:
    @given(configs, st.integers(1, 2000))
    def test_linear_in_frames(self, cfg, t):
        assert count_flops(cfg, 2 * t) == 2 * count_flops(cfg, t)
        assert count_flops(cfg, 0) == 0

    def test_fixed_part_independent_of_frames(self):
        cfg = ModelConfig()
        assert fixed_flops(cfg) > 0 and fixed_flops(cfg) == fixed_flops(cfg)


class TestHeadReplacement:
    def test_parameter_arithmetic(self):
        cfg = ModelConfig(repeats=1, channels=16, epilogue_channels=32, num_classes=107)
        m = build_model(cfg, 0)
        m2 = replace_head(m, 102)
        assert m.count_params() - m2.count_params() == (107 - 102) * (512 + 1)
        assert m2.config.num_classes == 102

    def test_encoder_preserved(self, tiny_model):
        m2 = replace_head(tiny_model, 5, seed=1)
        for n, t in tiny_model.params.items():
            if n.startswith("decoder.fc2"):
                continue
            np.testing.assert_array_equal(t.data, m2.params[n].data)
            assert t.data is not m2.params[n].data

    def test_seeded(self, tiny_model):
        a, b = replace_head(tiny_model, 4, seed=9), replace_head(tiny_model, 4, seed=9)
        np.testing.assert_array_equal(a.params["decoder.fc2.weight"].data, b.params["decoder.fc2.weight"].data)

    def test_too_few_classes(self, tiny_model):
        with pytest.raises(ConfigError):
            replace_head(tiny_model, 1)


class TestFreeze:
    def test_frozen_set(self, tiny_model):
        f = freeze_encoder(tiny_model)
        decoder = {"decoder.fc1.weight", "decoder.fc1.bias", "decoder.fc2.weight", "decoder.fc2.bias"}
        assert f.frozen_names == set(tiny_model.params) - decoder
        assert f.encoder_frozen and not tiny_model.encoder_frozen

    def test_frozen_grads_empty_and_buffers_fixed(self, tiny_model, rng):
        f = freeze_encoder(tiny_model)
        before = {n: b.copy() for n, b in f.buffers.items()}
        loss = F.weighted_cross_entropy(f(rng.normal(size=(2, 6, 14)), mode="train", seed=0), np.array([0, 1]))
        loss.backward()
        for n, t in f.params.items():
            if n in f.frozen_names:
                assert t.grad is None, n
            else:
                assert t.grad is not None and np.any(t.grad != 0), n
        for n, b in before.items():
            np.testing.assert_array_equal(b, f.buffers[n])

    def test_with_dropout_shares_params(self, tiny_model):
        d = with_dropout(tiny_model, decoder_dropout_p=0.1)
        assert d.config.decoder_dropout_p == 0.1
        assert d.params["decoder.fc1.weight"] is tiny_model.params["decoder.fc1.weight"]

    def test_no_grad_eval(self, tiny_model, rng):
        with no_grad():
            out = tiny_model(rng.normal(size=(1, 6, 9)))
        assert out._parents is None and not out.requires_grad


def test_embed_then_classify_equals_forward(tiny_model, rng):
    feats = [rng.normal(size=(6, 21)), rng.normal(size=(6, 13))]
    np.testing.assert_allclose(tiny_model.classify(tiny_model.embed(feats)).data, tiny_model(feats).data, atol=1e-12)
    frozen = with_dropout(freeze_encoder(tiny_model), decoder_dropout_p=0.5)
    a = frozen(feats, mode="train", seed=4).data
    b = frozen.classify(frozen.embed(feats), mode="train", seed=4).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert tiny_model.embed(feats).shape == (2, 32)
