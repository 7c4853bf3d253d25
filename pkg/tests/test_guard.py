"""Noise crafting, mask generation, the tri-term objective, and guard
training end to end at small scale."""

import copy
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from ageveil.common import TrainingError, images_to_tensor, module_checksum
from ageveil.guard import (GuardConfig, LossTerms, MaskGenerator, NoiseCache,
                           PGD_EPS, apply_mask, batch_z_score, craft_noise,
                           load_guard, loss_pp, train_guard, z_score)
from ageveil.guard.masking import generate_mask
from ageveil.metrics import ssim
from ageveil.zoo.backbone import LATENT_CHANNELS

# ------------------------------------------------------------ noise crafting

def test_noise_stays_inside_ball(tiny_cohort, tiny_aux):
    images = tiny_cohort["images"][:6]
    z = craft_noise(images, tiny_aux, steps=4)
    assert z.shape == images.shape
    assert np.abs(z).max() <= PGD_EPS + 1e-9
    assert ((images + z) >= -1e-9).all() and ((images + z) <= 1 + 1e-9).all()


def test_zero_steps_mean_zero_noise(tiny_cohort, tiny_aux):
    z = craft_noise(tiny_cohort["images"][:3], tiny_aux, steps=0)
    assert not z.any()


def test_noise_independent_of_batch_composition(tiny_cohort, tiny_aux):
    images = tiny_cohort["images"][:5]
    batch = craft_noise(images, tiny_aux, steps=3)
    solo = craft_noise(images[2], tiny_aux, steps=3)
    assert solo.shape == images[2].shape
    np.testing.assert_array_equal(batch[2], solo)


def test_noise_craftable_under_no_grad(tiny_cohort, tiny_aux):
    images = tiny_cohort["images"][:2]
    plain = craft_noise(images, tiny_aux, steps=2)
    with torch.no_grad():
        scoped = craft_noise(images, tiny_aux, steps=2)
    np.testing.assert_array_equal(plain, scoped)


def test_noise_raises_aux_loss_for_nearly_all_images(tiny_cohort, tiny_aux):
    images = tiny_cohort["images"][:50]
    z = craft_noise(images, tiny_aux)
    x0 = images_to_tensor(images)
    xa = images_to_tensor(images + z)
    with torch.no_grad():
        anchor = tiny_aux(x0).argmax(dim=1)
        before = F.cross_entropy(tiny_aux(x0), anchor, reduction="none")
        after = F.cross_entropy(tiny_aux(xa), anchor, reduction="none")
    assert (after > before).float().mean() >= 0.95


# -------------------------------------------------------------- z-score

def test_z_score_example():
    np.testing.assert_allclose(z_score(np.array([1.0, 2.0, 3.0])),
                               [-1.2247449, 0.0, 1.2247449], atol=1e-6)


def test_z_score_output_is_standardized(tiny_cohort, tiny_aux):
    z = craft_noise(tiny_cohort["images"][0], tiny_aux, steps=2)
    zh = z_score(z)
    assert zh.dtype == np.float32
    assert abs(zh.mean()) < 1e-5
    assert abs(zh.std() - 1.0) < 1e-5


def test_z_score_is_idempotent():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(8, 8, 3))
    np.testing.assert_allclose(z_score(z_score(z)), z_score(z), atol=1e-5)


def test_z_score_rejects_constant_input():
    with pytest.raises(ValueError, match="constant noise"):
        z_score(np.zeros((4, 4, 3)))
    with pytest.raises(ValueError, match="at least 2"):
        z_score(np.array([1.0]))


# -------------------------------------------------------------- noise cache

def test_cache_returns_identical_noise_on_hit(tiny_cohort, tiny_aux):
    cache = NoiseCache(steps=2)
    images = tiny_cohort["images"][:4]
    first = cache.get(images, tiny_aux)
    assert len(cache) == 4
    second = cache.get(images, tiny_aux)
    assert len(cache) == 4
    np.testing.assert_array_equal(first, second)


def test_cache_roundtrips_through_disk(tmp_path, tiny_cohort, tiny_aux):
    cache = NoiseCache(steps=2)
    images = tiny_cohort["images"][:3]
    z = cache.get(images, tiny_aux)
    path = tmp_path / "noise.npz"
    cache.save(path)
    fresh = NoiseCache(steps=2)
    fresh.load(path)
    assert len(fresh) == 3
    np.testing.assert_array_equal(fresh.get(images, tiny_aux), z)


def test_cache_key_separates_pgd_configs(tiny_cohort, tiny_aux):
    image = tiny_cohort["images"][0]
    a = NoiseCache(steps=2).get(image, tiny_aux)
    b = NoiseCache(steps=3).get(image, tiny_aux)
    assert np.abs(a - b).max() > 0


# ----------------------------------------------------------- mask generator

def test_fresh_generator_emits_identity_mask():
    torch.manual_seed(0)
    gen = MaskGenerator()
    zh = torch.randn(2, 3, 64, 64)
    mask = gen(zh)
    assert mask.shape == (2, LATENT_CHANNELS, 16, 16)
    assert torch.equal(mask, torch.ones_like(mask))


def test_mask_range_is_open_zero_two(tiny_guard, tiny_cohort):
    guard = tiny_guard[0]
    mask = generate_mask(guard, tiny_cohort["images"][200:216])
    assert mask.shape == (16, LATENT_CHANNELS, 16, 16)
    assert (mask > 0).all() and (mask < 2).all()


def test_apply_mask_examples():
    f = torch.tensor([1.0, 2.0])
    m = torch.tensor([0.5, 1.5])
    np.testing.assert_allclose(apply_mask(f, m, 1.0).numpy(), [0.5, 3.0])
    np.testing.assert_allclose(apply_mask(f, m, 0.0).numpy(), [1.0, 2.0])
    np.testing.assert_allclose(apply_mask(f, m, 2.0).numpy(), [0.0, 4.0])
    assert torch.equal(apply_mask(f, torch.ones(2), 1.0), f)


def test_apply_mask_validates_inputs():
    f = torch.ones(2, 4)
    with pytest.raises(ValueError, match="latent"):
        apply_mask(f, torch.ones(2, 3), 1.0)
    with pytest.raises(ValueError, match="nonnegative"):
        apply_mask(f, torch.ones(2, 4), -0.5)


@given(st.integers(0, 10 ** 6), st.floats(0.0, 4.0))
@settings(max_examples=40, deadline=None)
def test_identity_mask_is_identity_at_any_strength(seed, s):
    rng = np.random.default_rng(seed)
    f = torch.from_numpy(rng.normal(size=(3, 5)).astype(np.float32))
    out = apply_mask(f, torch.ones_like(f), float(s))
    assert torch.equal(out, f)


# ------------------------------------------------------------- loss terms

class _ToyFeatures:
    def __init__(self, net):
        self.net = net

    def features_t(self, x):
        return self.net(x.reshape(len(x), -1))


class _ToyLogits:
    def __init__(self, net):
        self.net = net

    def logits_t(self, x):
        return self.net(x.reshape(len(x), -1))


def _toy_models(seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    feat = nn.Linear(192, 6).to(dtype)
    logit = nn.Linear(192, 2).to(dtype)
    return _ToyFeatures(feat), _ToyLogits(logit)


def test_identical_images_cost_exactly_lambda():
    student, disease = _toy_models()
    x = torch.rand(4, 3, 8, 8)
    terms = loss_pp(x, x.clone(), student, disease)
    assert isinstance(terms, LossTerms)
    d = terms.detached()
    assert abs(d["privacy"] - 1.0) < 1e-6
    assert d["quality"] == 0.0
    assert abs(d["disease"]) < 1e-9
    assert abs(d["total"] - 0.4) < 1e-6


def test_quality_only_weights_reduce_to_mse():
    student, disease = _toy_models()
    x = torch.rand(3, 3, 8, 8)
    y = torch.rand(3, 3, 8, 8)
    terms = loss_pp(x, y, student, disease, lam=0.0, phi=1.0)
    np.testing.assert_allclose(float(terms.total.detach()),
                               float(((x - y) ** 2).mean()), rtol=1e-6)


def test_opposed_features_zero_the_privacy_term():
    class _Flip:
        def __init__(self):
            self.calls = 0

        def features_t(self, x):
            self.calls += 1
            sign = 1.0 if self.calls % 2 else -1.0
            return sign * x.reshape(len(x), -1)

    _, disease = _toy_models()
    x = torch.rand(2, 3, 8, 8) + 0.1
    terms = loss_pp(x, x.clone(), _Flip(), disease)
    assert float(terms.privacy.detach()) == 0.0


def test_loss_weights_are_validated():
    student, disease = _toy_models()
    x = torch.rand(2, 3, 8, 8)
    with pytest.raises(ValueError, match="invalid weights"):
        loss_pp(x, x, student, disease, lam=0.7, phi=0.4)
    with pytest.raises(ValueError, match="invalid weights"):
        loss_pp(x, x, student, disease, lam=-0.1, phi=0.4)


def test_zero_feature_is_rejected():
    class _Zero:
        def features_t(self, x):
            return x.reshape(len(x), -1) * 0.0

    _, disease = _toy_models()
    x = torch.rand(2, 3, 8, 8)
    with pytest.raises(ValueError, match="zero norm"):
        loss_pp(x, x.clone(), _Zero(), disease)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_all_terms_are_nonnegative(seed):
    student, disease = _toy_models(seed=1)
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.uniform(size=(2, 3, 8, 8)).astype(np.float32))
    y = torch.from_numpy(rng.uniform(size=(2, 3, 8, 8)).astype(np.float32))
    d = loss_pp(x, y, student, disease).detached()
    assert d["privacy"] >= 0 and d["quality"] >= 0 and d["disease"] >= -1e-9
    assert d["total"] >= -1e-9


def _central_diff_max_rel_err(loss_fn, params, h=1e-5):
    grads = torch.autograd.grad(loss_fn(), params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.detach().reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(loss_fn().detach())
            flat[i] = orig - h
            dn = float(loss_fn().detach())
            flat[i] = orig
            numeric = (up - dn) / (2 * h)
            analytic = float(gf[i])
            denom = max(abs(numeric) + abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def test_loss_gradient_matches_central_differences():
    student, disease = _toy_models(seed=2, dtype=torch.float64)
    torch.manual_seed(3)
    x_in = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    x_ob = torch.rand(2, 3, 8, 8, dtype=torch.float64, requires_grad=True)

    def loss_fn():
        return loss_pp(x_in, x_ob, student, disease).total

    assert _central_diff_max_rel_err(loss_fn, [x_ob]) <= 1e-4


# ------------------------------------------------------------- obfuscation

def test_strength_zero_preserves_the_image(tiny_guard, tiny_cohort):
    guard = tiny_guard[0]
    images = tiny_cohort["images"][200:208]
    out = guard.obfuscate(images, s=0.0)
    scores = [ssim(out[i], images[i]) for i in range(len(images))]
    assert min(scores) >= 0.99


def test_obfuscation_is_deterministic(tiny_guard, tiny_cohort):
    guard = tiny_guard[0]
    images = tiny_cohort["images"][200:204]
    np.testing.assert_array_equal(guard.obfuscate(images, s=1.0),
                                  guard.obfuscate(images, s=1.0))


def test_obfuscation_output_contract(tiny_guard, tiny_cohort):
    guard = tiny_guard[0]
    images = tiny_cohort["images"][200:204]
    out = guard.obfuscate(images, s=1.0)
    assert out.shape == images.shape and out.dtype == np.float32
    assert (out >= 0).all() and (out <= 1).all()
    single = guard.obfuscate(images[0], s=1.0)
    assert single.shape == images[0].shape
    # batched conv reductions may differ from the solo path by an ulp
    np.testing.assert_allclose(single, out[0], atol=1e-6)


def test_strength_scales_the_distortion(tiny_guard, tiny_cohort):
    guard = tiny_guard[0]
    images = tiny_cohort["images"][200:208]
    dist = {}
    for s in (0.0, 1.0, 4.0):
        out = guard.obfuscate(images, s=s)
        dist[s] = float(((out - images) ** 2).mean())
    assert dist[0.0] < 1e-4
    assert dist[0.0] < dist[1.0] < dist[4.0]


# ---------------------------------------------------------------- training

def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError, match="lam \\+ phi"):
        GuardConfig(lam=0.8, phi=0.4)
    with pytest.raises(ValueError, match="nonnegative"):
        GuardConfig(lam=-0.2)
    with pytest.raises(ValueError, match="PGD"):
        GuardConfig(pgd_eps=0.0)
    cfg = GuardConfig(epochs=3, seed=9)
    assert GuardConfig.from_dict(cfg.to_dict()) == cfg


def test_history_logs_all_three_terms(tiny_guard):
    history = tiny_guard[1]
    assert len(history) == 6
    for entry in history:
        for key in ("privacy", "quality", "disease", "recon", "val_ssim",
                    "val_mae_gain", "score", "min_privacy", "min_quality",
                    "min_disease", "val_pixel_mse", "val_disease_kl"):
            assert key in entry
        assert entry["min_privacy"] >= 0
        assert entry["min_quality"] >= 0
        assert entry["min_disease"] >= -1e-9


def test_training_leaves_dependencies_frozen(tiny_guard):
    guard, _, pre = tiny_guard
    assert guard.student.checksum() == pre["student"]
    assert guard.disease.checksum() == pre["disease"]
    assert module_checksum(guard.aux_net) == pre["aux"]
    for net in (guard.encoder, guard.decoder, guard.maskgen):
        assert all(not p.requires_grad for p in net.parameters())


def test_quality_preserved_while_age_signal_degrades(tiny_guard):
    history = tiny_guard[1]
    best = max(history, key=lambda h: h["score"])
    assert best["val_ssim"] >= 0.90
    assert best["val_mae_gain"] > 0


def _short_run(tiny_cohort, student, disease, aux, backbone, **overrides):
    c = tiny_cohort
    defaults = dict(epochs=2, seed=13, pgd_steps=2, batch_size=32)
    defaults.update(overrides)
    config = GuardConfig(**defaults)
    return train_guard(c["images"][c["train"]][:64],
                       c["ages"][c["train"]][:64],
                       c["images"][c["val"]][:16], c["ages"][c["val"]][:16],
                       config, student, disease, aux, backbone)


def test_same_seed_reproduces_the_checkpoint(tiny_cohort, tiny_student,
                                             tiny_disease, tiny_aux,
                                             tiny_guard_backbone):
    student = tiny_student[0]
    a, _ = _short_run(tiny_cohort, student, tiny_disease, tiny_aux,
                      tiny_guard_backbone)
    b, _ = _short_run(tiny_cohort, student, tiny_disease, tiny_aux,
                      tiny_guard_backbone)
    assert a.checksum() == b.checksum()


def test_reconstruction_only_objective_changes_nothing(tiny_cohort,
                                                       tiny_student,
                                                       tiny_disease, tiny_aux,
                                                       tiny_guard_backbone):
    student = tiny_student[0]
    guard, history = _short_run(tiny_cohort, student, tiny_disease, tiny_aux,
                                tiny_guard_backbone, lam=0.0, phi=1.0)
    assert history[-1]["val_ssim"] >= 0.98
    assert history[-1]["privacy"] >= 0.95


def test_collapsed_decoder_is_reported(tiny_cohort, tiny_student,
                                       tiny_disease, tiny_aux,
                                       tiny_guard_backbone):
    class _Collapsed(nn.Module):
        def forward(self, f):
            flat = f[:, :48].reshape(len(f), 3, f.shape[2] * 4, f.shape[3] * 4)
            return flat * 0.0 + 0.5

    student = tiny_student[0]
    broken = SimpleNamespace(encoder=tiny_guard_backbone.encoder,
                             decoder=_Collapsed())
    with pytest.raises(TrainingError, match="decoder collapse"):
        _short_run(tiny_cohort, student, tiny_disease, tiny_aux, broken,
                   epochs=1)


# ------------------------------------------------------------- persistence

def test_guard_archive_roundtrip(tmp_path, tiny_guard, tiny_student,
                                 tiny_disease, tiny_cohort):
    guard = tiny_guard[0]
    student = tiny_student[0]
    path = tmp_path / "guard.zip"
    guard.save(path)
    loaded = load_guard(path, student, tiny_disease)
    assert loaded.checksum() == guard.checksum()
    assert loaded.config == guard.config
    images = tiny_cohort["images"][200:204]
    np.testing.assert_array_equal(loaded.obfuscate(images, s=1.0),
                                  guard.obfuscate(images, s=1.0))


def test_guard_archive_rejects_mismatched_models(tmp_path, tiny_guard,
                                                 tiny_student, tiny_disease):
    guard = tiny_guard[0]
    student = tiny_student[0]
    path = tmp_path / "guard.zip"
    guard.save(path)
    other = copy.deepcopy(student)
    with torch.no_grad():
        other.probe.weight.add_(1.0)
    with pytest.raises(ValueError, match="student checksum"):
        load_guard(path, other, tiny_disease)
