import numpy as np
import pytest
import torch

from stochuda import translation as tr
from stochuda.config import TranslationConfig

SMALL = TranslationConfig(width=4, n_downsample=1, n_res=1, mlp_dim=8, disc_width=4, style_dim=8)


@pytest.fixture(scope="module")
def model():
    return tr.build_model(SMALL, seed=0)


def images(n=2, h=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, h, h, generator=g) * 2 - 1


def test_encode_shapes_and_determinism(model):
    x = images()
    c, s = model.encode(x, "source")
    assert c.shape[2:] == (16 // model.downsampling, 16 // model.downsampling)
    assert s.shape == (2, 8)
    c2, s2 = model.encode(x, "source")
    assert torch.equal(c, c2) and torch.equal(s, s2)
    assert torch.isfinite(c).all()
    assert not torch.equal(c[0], c[1])


def test_shape_errors(model):
    with pytest.raises(ValueError):
        model.encode(torch.zeros(1, 1, 16, 16), "source")
    with pytest.raises(ValueError):
        model.encode(torch.zeros(1, 3, 15, 16), "source")
    c, _ = model.encode(images(), "target")
    with pytest.raises(ValueError):
        model.decode(c, torch.zeros(2, 3), "target")


def test_decode_range_and_determinism(model):
    x = images() * 50  # far outside the data range
    c, s = model.encode(x, "target")
    y = model.decode(c, s * 100, "target")
    assert y.shape == x.shape and y.min() >= -1 and y.max() <= 1
    assert torch.equal(y, model.decode(c, s * 100, "target"))


def test_translate_contract(model):
    x = images()
    with pytest.raises(ValueError):
        model.translate(x, "source", "source", torch.zeros(2, 8))
    z = torch.zeros(2, 8)
    assert torch.equal(model.translate(x, "source", "target", z), model.translate(x, "source", "target", z))
    ref = model.decode(model.content(x, "target"), z, "source")
    assert torch.equal(model.translate(x, "target", "source", z), ref)


def test_sample_translations(model):
    x = images()
    one = model.sample_translations(x, "source", "target", 1, generator=torch.Generator().manual_seed(3))
    v = model.sample_styles(2, 1.0, torch.Generator().manual_seed(3))
    assert len(one) == 1 and torch.equal(one[0], model.translate(x, "source", "target", v))
    a = model.sample_translations(x, "target", "source", 3, 10.0, torch.Generator().manual_seed(4))
    b = model.sample_translations(x, "target", "source", 3, 10.0, torch.Generator().manual_seed(4))
    assert all(torch.equal(p, q) for p, q in zip(a, b))
    with pytest.raises(ValueError):
        model.sample_translations(x, "source", "target", 0)
    with pytest.raises(ValueError):
        model.sample_styles(2, 0.0)


@pytest.mark.parametrize("sigma2", [1.0, 10.0])
def test_style_sampler_moments(model, sigma2):
    v = model.sample_styles(10_000, sigma2, torch.Generator().manual_seed(0), torch.float64)
    var = v.var(0)
    assert ((var - sigma2).abs() <= 0.05 * sigma2).all()
    assert (v.mean(0).abs() <= 4 * (sigma2 / 10_000) ** 0.5).all()


class _Identity(torch.nn.Module):
    def forward(self, x, *style):
        return x


def test_identity_model_has_zero_reconstruction_and_content_cycle():
    m = tr.build_model(SMALL, seed=0)
    for d in tr.DOMAINS:
        m.content_enc[d] = _Identity()
        m.gen[d] = _Identity()
    x_s, x_t = images(seed=1), images(seed=2)
    out = tr.translation_loss_bundle(m, x_s, x_t, m.sample_styles(2), m.sample_styles(2))
    assert out["recon_s"].item() == 0.0 and out["recon_t"].item() == 0.0
    assert out["cycle_content_s"].item() < 1e-5


class _Confident(torch.nn.Module):
    """Ignores its input and predicts one fixed label map with overwhelming confidence."""

    def forward(self, x):
        labels = torch.arange(x.shape[-1]).remainder(5).expand(x.shape[0], x.shape[-2], -1)
        return 1e4 * torch.nn.functional.one_hot(labels, 5).permute(0, 3, 1, 2).float()


def test_sem_loss_zero_for_matching_confident_predictions(model):
    x = images()
    assert tr.semantic_consistency_loss(_Confident(), x, -x).item() == 0.0


def test_bundle_finite_nonnegative_and_named(model):
    from stochuda.segmentation import SegNet

    torch.manual_seed(0)
    out = tr.translation_loss_bundle(model, images(seed=3), images(seed=4), model.sample_styles(2),
                                     model.sample_styles(2), SegNet(4))
    assert set(out) == {"recon_s", "recon_t", "cycle_content_s", "cycle_content_t", "cycle_style_s",
                        "cycle_style_t", "adv_s", "adv_t", "sem"}
    assert all(torch.isfinite(v) and v.item() >= 0 for v in out.values())
    assert torch.isfinite(tr.discriminator_loss(model, images(), images(seed=5), model.sample_styles(2),
                                                model.sample_styles(2)))


def test_nan_input_raises_numerical_failure(model):
    x = images()
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(tr.NumericalFailure) as e:
        tr.translation_loss_bundle(model, x, images(), model.sample_styles(2), model.sample_styles(2))
    assert e.value.loss_name in {"recon_s", "cycle_content_s", "cycle_style_t", "adv_t"}


def test_zero_iterations_gives_initial_parameters(tmp_path):
    cfg = TranslationConfig(**{**SMALL.__dict__, "iterations": 0, "use_sem": False})
    m, curve = tr.train_translation(cfg, images(), images(seed=1), seed=7, checkpoint_path=tmp_path / "t.ckpt",
                                    log_path=tmp_path / "log.csv")
    ref = tr.build_model(cfg, 7)
    assert curve == [] and tr.read_loss_log(tmp_path / "log.csv") == []
    back = tr.load(tmp_path / "t.ckpt")
    for k, v in ref.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])


def test_short_training_reload_and_log(tmp_path):
    cfg = TranslationConfig(**{**SMALL.__dict__, "iterations": 3, "batch_size": 2, "use_sem": False,
                               "log_every": 1})
    m, curve = tr.train_translation(cfg, images(4), images(4, seed=1), seed=1,
                                    checkpoint_path=tmp_path / "t.ckpt", log_path=tmp_path / "log.csv")
    assert int(m.step) == 3
    rows = tr.read_loss_log(tmp_path / "log.csv")
    assert rows == [(i, n, float(v)) for i, n, v in curve]
    assert {n for _, n, _ in rows} >= {"recon_s", "disc", "total"}
    back = tr.load(tmp_path / "t.ckpt")
    x, v = images(seed=9), m.sample_styles(2, 1.0, torch.Generator().manual_seed(0))
    assert torch.equal(m.translate(x, "source", "target", v), back.translate(x, "source", "target", v))
    it, vals = tr.curve_series(rows, "recon_s")
    assert list(it) == [0, 1, 2] and np.isfinite(vals).all()


def test_use_sem_requires_network():
    with pytest.raises(ValueError):
        tr.train_translation(TranslationConfig(iterations=1), images(), images())


def test_load_rejects_other_kind(tmp_path):
    from stochuda import checkpoint

    checkpoint.save_checkpoint(tmp_path / "x.ckpt", {"a": torch.zeros(1)}, {"kind": "segmentation"})
    with pytest.raises(checkpoint.CheckpointError):
        tr.load(tmp_path / "x.ckpt")
