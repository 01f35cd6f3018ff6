import numpy as np
import pytest
import torch

from styletrojan.errors import ConfigError
from styletrojan.models import (CLASSIFIER_ARCHS, build_classifier, build_discriminator,
                                build_feature_injector, build_generator, count_params,
                                load_checkpoint, neuron_values, save_checkpoint)

SHAPE = (3, 32, 32)


def params_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


@pytest.mark.parametrize("arch", CLASSIFIER_ARCHS)
class TestClassifiers:
    def test_logit_shape(self, arch):
        model = build_classifier(arch, 10, SHAPE, seed=0)
        assert model(torch.rand(2, *SHAPE)).shape == (2, 10)

    def test_softmax_normalized(self, arch):
        model = build_classifier(arch, 7, SHAPE, seed=0)
        probs = torch.softmax(model(torch.rand(3, *SHAPE)), dim=1)
        assert torch.allclose(probs.sum(dim=1), torch.ones(3), atol=1e-5)

    def test_seeded_init_deterministic(self, arch):
        a = build_classifier(arch, 10, SHAPE, seed=11)
        b = build_classifier(arch, 10, SHAPE, seed=11)
        c = build_classifier(arch, 10, SHAPE, seed=12)
        assert params_equal(a, b)
        assert not params_equal(a, c)

    def test_zero_image_first_conv_is_bias(self, arch):
        # first conv is tapped pre-nonlinearity: conv(0) == bias broadcast
        model = build_classifier(arch, 10, SHAPE, seed=0)
        info = model.layer_index[0]
        assert info.tap == "pre"
        act = model.activations(torch.zeros(1, *SHAPE), info.name)
        bias = model.get_submodule(info.module_path).bias
        assert torch.allclose(act, bias.view(1, -1, 1, 1).expand_as(act), atol=1e-6)

    def test_every_conv_and_dense_is_tapped(self, arch):
        model = build_classifier(arch, 10, SHAPE, seed=0)
        n_conv = sum(1 for m in model.modules() if isinstance(m, torch.nn.Conv2d))
        n_dense = sum(1 for m in model.modules() if isinstance(m, torch.nn.Linear))
        conv_shortcuts = sum(1 for t in model.layer_index if t.kind == "conv")
        dense_taps = sum(1 for t in model.layer_index if t.kind == "dense")
        # resnet shortcut projections are plumbing, not feature layers
        shortcut_convs = sum(
            1 for name, m in model.named_modules()
            if isinstance(m, torch.nn.Conv2d) and "shortcut" in name)
        assert conv_shortcuts == n_conv - shortcut_convs
        assert dense_taps == n_dense

    def test_tap_consistency_substitution_identity(self, arch):
        # feeding a tap's own activation back in leaves the logits unchanged
        model = build_classifier(arch, 10, SHAPE, seed=0)
        x = torch.rand(2, *SHAPE)
        expected = model(x)
        for info in model.layer_index:
            act = model.activations(x, info.name)
            out = model.forward_with_substitution(x, info.name, 0, act[:, 0])
            assert torch.allclose(out, expected, atol=1e-6), info.name

    def test_inference_deterministic(self, arch):
        model = build_classifier(arch, 10, SHAPE, seed=0)
        x = torch.rand(4, *SHAPE)
        assert torch.equal(model(x), model(x))

    def test_under_desk_scale_budget(self, arch):
        model = build_classifier(arch, 10, SHAPE, seed=0)
        assert count_params(model) <= 1_000_000


def test_unknown_arch_rejected():
    with pytest.raises(ConfigError, match="unknown classifier arch"):
        build_classifier("resnet-huge", 10, SHAPE)


class TestGenerator:
    def test_shape_preserved(self):
        gen = build_generator(2, SHAPE, seed=0)
        x = torch.rand(3, *SHAPE)
        assert gen(x).shape == x.shape

    def test_capacity_monotone_in_depth(self):
        counts = [count_params(build_generator(d, SHAPE, seed=0)) for d in (1, 2, 3, 4)]
        assert all(b > a for a, b in zip(counts, counts[1:]))

    def test_untrained_output_differs_from_input(self):
        gen = build_generator(3, SHAPE, seed=0)
        x = torch.rand(1, *SHAPE)
        assert float((gen(x) - x).abs().max()) > 1e-3

    def test_output_in_unit_range(self):
        gen = build_generator(3, SHAPE, seed=0)
        y = gen(torch.rand(2, *SHAPE))
        assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0

    def test_bad_depth_and_shape(self):
        with pytest.raises(ConfigError):
            build_generator(0, SHAPE)
        with pytest.raises(ConfigError):
            build_generator(2, (3, 7, 7))


class TestInjector:
    def test_smaller_than_default_generator(self):
        inj = build_feature_injector(SHAPE, seed=0)
        gen = build_generator(3, SHAPE, seed=0)
        assert count_params(inj) <= count_params(gen)

    def test_shape_preserved(self):
        inj = build_feature_injector(SHAPE, seed=0)
        x = torch.rand(2, *SHAPE)
        assert inj(x).shape == x.shape

    def test_seeded_init(self):
        assert params_equal(build_feature_injector(SHAPE, seed=4),
                            build_feature_injector(SHAPE, seed=4))

    def test_oversized_injector_rejected(self):
        with pytest.raises(ConfigError, match="must not exceed"):
            build_feature_injector(SHAPE, base=64, seed=0)


class TestDiscriminator:
    def test_score_in_open_unit_interval(self):
        disc = build_discriminator(SHAPE, seed=0)
        s = disc(torch.rand(5, *SHAPE))
        assert s.shape == (5,)
        assert float(s.min()) > 0.0 and float(s.max()) < 1.0

    def test_five_conv_stages_in_layer_index(self):
        disc = build_discriminator(SHAPE, seed=0)
        assert len([t for t in disc.layer_index if t.kind == "conv"]) == 5

    def test_seeded_init(self):
        assert params_equal(build_discriminator(SHAPE, seed=2),
                            build_discriminator(SHAPE, seed=2))


def test_neuron_value_convention():
    conv_act = torch.arange(24, dtype=torch.float32).reshape(1, 2, 3, 4)
    values = neuron_values(conv_act, "conv")
    assert values.shape == (1, 2)
    assert float(values[0, 0]) == float(conv_act[0, 0].sum())
    dense_act = torch.rand(2, 6)
    assert torch.equal(neuron_values(dense_act, "dense"), dense_act)


class TestCheckpoints:
    def test_classifier_roundtrip(self, tmp_path):
        model = build_classifier("vgg-small", 10, SHAPE, seed=3)
        path = str(tmp_path / "m.npz")
        save_checkpoint(model, path, "clean", seed=3)
        again, header = load_checkpoint(path)
        x = torch.rand(2, *SHAPE)
        assert torch.equal(model(x), again(x))
        assert header["stage"] == "clean"
        assert header["arch"] == "vgg-small"
        assert header["seed"] == 3

    def test_generator_and_injector_roundtrip(self, tmp_path):
        for model, name in [(build_generator(2, SHAPE, seed=1), "g.npz"),
                            (build_feature_injector(SHAPE, seed=1), "i.npz"),
                            (build_discriminator(SHAPE, seed=1), "d.npz")]:
            path = str(tmp_path / name)
            save_checkpoint(model, path, "poisoned", seed=1)
            again, header = load_checkpoint(path, image_shape=SHAPE)
            x = torch.rand(1, *SHAPE)
            assert torch.allclose(model(x), again(x), atol=0)

    def test_stage_tag_detox_round(self, tmp_path):
        model = build_classifier("nin-small", 10, SHAPE, seed=0)
        path = str(tmp_path / "k.npz")
        save_checkpoint(model, path, "detox-round-2", seed=0)
        _, header = load_checkpoint(path)
        assert header["stage"] == "detox-round-2"


class TestGradients:
    """Directional parameter derivatives vs central finite differences."""

    @staticmethod
    def directional_check(model, loss_fn, rel_tol=1e-3, eps=1e-6, seed=0):
        model = model.double().eval()
        gen = torch.Generator().manual_seed(seed)
        loss = loss_fn(model)
        grads = torch.autograd.grad(loss, [p for p in model.parameters()])
        direction = [torch.randn(p.shape, generator=gen, dtype=torch.float64)
                     for p in model.parameters()]
        norm = torch.sqrt(sum((d * d).sum() for d in direction))
        direction = [d / norm for d in direction]
        analytic = float(sum((g * d).sum() for g, d in zip(grads, direction)))

        def shift(sign):
            with torch.no_grad():
                for p, d in zip(model.parameters(), direction):
                    p.add_(sign * eps * d)

        shift(+1)
        with torch.no_grad():
            up = float(loss_fn(model))
        shift(-2)
        with torch.no_grad():
            down = float(loss_fn(model))
        shift(+1)
        numeric = (up - down) / (2 * eps)
        assert numeric == pytest.approx(analytic, rel=rel_tol, abs=1e-9)

    @pytest.mark.parametrize("arch", CLASSIFIER_ARCHS)
    def test_classifier_families(self, arch):
        model = build_classifier(arch, 5, (3, 16, 16), seed=1)
        x = torch.rand(2, 3, 16, 16, dtype=torch.float64,
                       generator=torch.Generator().manual_seed(0))
        y = torch.tensor([1, 3])
        self.directional_check(model, lambda m: torch.nn.functional.cross_entropy(m(x), y))

    def test_generator_family(self):
        gen = build_generator(2, (3, 16, 16), base=8, seed=1)
        x = torch.rand(2, 3, 16, 16, dtype=torch.float64,
                       generator=torch.Generator().manual_seed(1))
        w = torch.randn(2, 3, 16, 16, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(2))
        self.directional_check(gen, lambda m: (m(x) * w).sum())

    def test_injector_family(self):
        inj = build_feature_injector((3, 16, 16), base=6, seed=1)
        x = torch.rand(2, 3, 16, 16, dtype=torch.float64,
                       generator=torch.Generator().manual_seed(3))
        w = torch.randn(2, 3, 16, 16, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(4))
        self.directional_check(inj, lambda m: (m(x) * w).sum())

    def test_discriminator_family(self):
        disc = build_discriminator((3, 16, 16), base=8, seed=1)
        x = torch.rand(2, 3, 16, 16, dtype=torch.float64,
                       generator=torch.Generator().manual_seed(5))
        self.directional_check(disc, lambda m: m(x).sum())
