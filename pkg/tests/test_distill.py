"""Feature alignment, fusion head, cosine distillation loss, and the
student training loop (collapse diagnostic included)."""

import dataclasses

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from ageveil.common import TrainingError
from ageveil.distill import (
    STUDENT_DIM,
    FusionHead,
    TeacherPool,
    align_features,
    distill_loss,
    distill_loss_batch,
    features_std,
    fit_linear_age_readout,
    fuse,
    load_student,
    readout_ages,
    stack_aligned,
    train_student,
)

finite_vec = st.lists(
    st.floats(min_value=-10, max_value=10, allow_nan=False), min_size=2, max_size=8
)


# ---------------------------------------------------------------- alignment

def test_align_pads_shorter_rows():
    out = align_features([[1, 2], [3, 4, 5, 6]])
    assert out.shape == (2, 4)
    np.testing.assert_array_equal(out, [[1, 2, 0, 0], [3, 4, 5, 6]])


def test_align_single_vector_unchanged():
    out = align_features([[1.5, -2.0, 3.0]])
    np.testing.assert_array_equal(out, [[1.5, -2.0, 3.0]])


def test_align_equal_dims_introduces_no_zeros():
    out = align_features([[1, 2, 3], [4, 5, 6]])
    assert np.count_nonzero(out) == 6


def test_align_empty_errors():
    with pytest.raises(ValueError):
        align_features([])


def test_align_nonfinite_errors():
    with pytest.raises(ValueError):
        align_features([[1.0, np.nan]])


def test_stack_aligned_rows_unit_rms():
    f1 = torch.randn(5, 3)
    f2 = torch.randn(5, 7)
    sheet = stack_aligned([f1, f2])
    assert sheet.shape == (5, 1, 2, 7)
    # each row rescaled to norm sqrt(d_k); padding stays zero
    norms = sheet[:, 0, 0, :].norm(dim=1)
    torch.testing.assert_close(norms, torch.full((5,), np.sqrt(3.0).astype(np.float32)))
    assert torch.all(sheet[:, 0, 0, 3:] == 0)
    norms2 = sheet[:, 0, 1, :].norm(dim=1)
    torch.testing.assert_close(norms2, torch.full((5,), np.sqrt(7.0).astype(np.float32)))


# ------------------------------------------------------------------- fusion

def test_fusion_deterministic():
    torch.manual_seed(0)
    head = FusionHead(out_dim=12)
    sheet = torch.randn(3, 1, 2, 10)
    with torch.no_grad():
        a = head(sheet)
        b = head(sheet)
    torch.testing.assert_close(a, b)
    assert a.shape == (3, 12)


def test_fusion_output_length_matches_config():
    head = FusionHead(out_dim=24)
    out = fuse(np.random.default_rng(0).normal(size=(3, 9)), head)
    assert out.shape == (24,)


def test_fuse_zero_sheet_zero_bias_gives_zero():
    torch.manual_seed(1)
    head = FusionHead(out_dim=8)
    with torch.no_grad():
        for conv in (head.conv1, head.conv2, head.conv3):
            conv.bias.zero_()
    out = fuse(np.zeros((2, 6)), head)
    np.testing.assert_array_equal(out, np.zeros(8))


def test_fuse_rejects_bad_rank():
    head = FusionHead(out_dim=8)
    with pytest.raises(ValueError):
        fuse(np.zeros(6), head)
    with pytest.raises(ValueError):
        head(torch.zeros(2, 3, 4))


# --------------------------------------------------------------------- loss

def test_loss_identical_vectors_zero():
    f = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    assert float(distill_loss(f, f)) == pytest.approx(0.0, abs=1e-12)


def test_loss_opposite_vectors_two():
    f = torch.tensor([0.5, 1.0, -2.0], dtype=torch.float64)
    assert float(distill_loss(f, -f)) == pytest.approx(2.0, abs=1e-12)


def test_loss_orthogonal_vectors_one():
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    b = torch.tensor([0.0, 1.0], dtype=torch.float64)
    assert float(distill_loss(a, b)) == pytest.approx(1.0, abs=1e-12)


def test_loss_zero_norm_errors():
    f = torch.tensor([1.0, 0.0], dtype=torch.float64)
    with pytest.raises(ValueError, match="degenerate feature"):
        distill_loss(f, torch.zeros(2, dtype=torch.float64))
    with pytest.raises(ValueError, match="degenerate feature"):
        distill_loss_batch(torch.zeros(2, 3), torch.ones(2, 3))


def test_loss_negative_term_hand_values():
    e1 = torch.tensor([1.0, 0.0], dtype=torch.float64)
    e2 = torch.tensor([0.0, 1.0], dtype=torch.float64)
    # matched pair aligned, one negative parallel to f_tilde: 0 + 0.5 * 1
    loss = distill_loss(e1, e1, negatives=[(e2, e1)], beta=0.5)
    assert float(loss) == pytest.approx(0.5, abs=1e-12)
    # orthogonal negative contributes nothing
    loss = distill_loss(e1, e1, negatives=[(e2, e2)], beta=0.5)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)
    # anti-parallel negative is clipped by the hinge, not rewarded
    loss = distill_loss(e1, e1, negatives=[(e2, -e1)], beta=0.5)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)


def test_batch_loss_matches_per_sample_form():
    rng = np.random.default_rng(3)
    ft = torch.from_numpy(rng.normal(size=(5, 8)))
    fs = torch.from_numpy(rng.normal(size=(5, 8)))
    per_sample = []
    for i in range(5):
        negatives = [(ft[j], fs[j]) for j in range(5) if j != i]
        per_sample.append(float(distill_loss(ft[i], fs[i], negatives, beta=0.5)))
    batched = float(distill_loss_batch(ft, fs, beta=0.5))
    assert batched == pytest.approx(np.mean(per_sample), abs=1e-12)


@given(finite_vec, finite_vec)
@settings(max_examples=60, deadline=None)
def test_positive_term_in_range_and_loss_nonnegative(u, v):
    n = min(len(u), len(v))
    a = torch.tensor(u[:n], dtype=torch.float64)
    b = torch.tensor(v[:n], dtype=torch.float64)
    if float(a.norm()) < 1e-6 or float(b.norm()) < 1e-6:
        return
    pos = float(distill_loss(a, b))
    assert -1e-9 <= pos <= 2 + 1e-9
    full = float(distill_loss(a, b, negatives=[(b, a)], beta=0.5))
    assert full >= -1e-9


# ---------------------------------------------------------------- gradcheck

def _central_diff_max_rel_err(loss_fn, params, h=1e-5):
    """Worst relative disagreement between autograd and central differences."""
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


def test_gradients_match_central_differences():
    torch.manual_seed(4)
    head = FusionHead(out_dim=16, width=2).double()
    probe = torch.nn.Linear(6, 16).double()
    sheet = torch.randn(3, 1, 2, 10, dtype=torch.float64)
    base = torch.randn(3, 6, dtype=torch.float64)

    def loss_fn():
        return distill_loss_batch(head(sheet), probe(base), beta=0.5)

    params = list(head.parameters()) + list(probe.parameters())
    assert _central_diff_max_rel_err(loss_fn, params) <= 1e-4


# ----------------------------------------------------------------- training

def test_student_matched_cosine_target(tiny_student):
    _, _, diag = tiny_student
    assert diag["val_matched_cos"] >= 0.8


def test_student_features_not_collapsed(tiny_student, tiny_cohort):
    student, _, diag = tiny_student
    assert diag["val_feature_std"] > 0.01
    c = tiny_cohort
    f = student.features(c["images"][c["val"]])
    assert features_std(f) > 0.01
    # directions must vary across subjects, not share one axis
    unit = f / np.linalg.norm(f, axis=1, keepdims=True)
    cos = unit @ unit.T
    off_diag = cos[~np.eye(len(f), dtype=bool)]
    assert off_diag.mean() < 0.95


def test_collapse_diagnostic_fires(tiny_pool, tiny_backbone, tiny_cohort):
    c = tiny_cohort
    with pytest.raises(TrainingError, match="representation collapse"):
        train_student(tiny_pool, tiny_backbone, c["images"][c["train"]],
                      c["images"][c["val"]], epochs=0, beta=0.0, seed=11,
                      probe_init="zero")


def test_same_seed_identical_student(tiny_pool, tiny_backbone, tiny_cohort):
    c = tiny_cohort
    tr, va = c["images"][c["train"]], c["images"][c["val"]]
    s1, _, _ = train_student(tiny_pool, tiny_backbone, tr, va, epochs=8, seed=3)
    s2, _, _ = train_student(tiny_pool, tiny_backbone, tr, va, epochs=8, seed=3)
    assert s1.checksum() == s2.checksum()
    f1, f2 = s1.features(va), s2.features(va)
    np.testing.assert_array_equal(f1, f2)


def test_teachers_frozen_through_distillation(tiny_pool, tiny_backbone, tiny_cohort):
    c = tiny_cohort
    before = tiny_pool.checksums()
    train_student(tiny_pool, tiny_backbone, c["images"][c["train"]],
                  c["images"][c["val"]], epochs=2, seed=1)
    assert tiny_pool.checksums() == before


def test_pool_rejects_unfrozen_teacher(tiny_teacher):
    thawed = dataclasses.replace(tiny_teacher, frozen=False)
    with pytest.raises(ValueError, match="not frozen"):
        TeacherPool(["conv-cls"], [thawed])


def test_pool_validation():
    with pytest.raises(ValueError):
        TeacherPool([], [])
    with pytest.raises(ValueError):
        TeacherPool(["a", "b"], [])


def test_stacked_features_order_and_shape(tiny_pool, tiny_cohort):
    c = tiny_cohort
    images = c["images"][c["val"]][:6]
    sheet = tiny_pool.stacked_features(images)
    assert sheet.shape == (6, 1, 2, tiny_pool.max_dim)
    manual = stack_aligned(
        [torch.from_numpy(t.features(images)) for t in tiny_pool.teachers])
    torch.testing.assert_close(sheet, manual)


def test_student_readout_usefulness(tiny_student, tiny_pool, tiny_cohort):
    student, _, _ = tiny_student
    c = tiny_cohort
    tr, va = c["train"], c["val"]
    coef = fit_linear_age_readout(student.features(c["images"][tr]), c["ages"][tr])
    pred = readout_ages(coef, student.features(c["images"][va]))
    mae = np.abs(pred - c["ages"][va]).mean()
    best = min(t.val_mae for t in tiny_pool.teachers)
    assert mae <= 1.5 * best


def test_student_save_load_roundtrip(tiny_student, tiny_pool, tiny_backbone,
                                     tiny_cohort, tmp_path):
    student, fusion, _ = tiny_student
    path = tmp_path / "student.zip"
    student.save(path, cohort_checksum="abc", fusion=fusion, pool=tiny_pool)
    restored = load_student(path, tiny_backbone)
    assert restored.checksum() == student.checksum()
    c = tiny_cohort
    images = c["images"][c["val"]][:4]
    np.testing.assert_array_equal(restored.features(images),
                                  student.features(images))
    assert restored.pool_names == ["conv-cls", "conv-reg"]


def test_load_student_rejects_wrong_backbone(tiny_student, tiny_pool, tmp_path):
    from ageveil.zoo.foundation import FoundationBackbone, FoundationNet
    student, fusion, _ = tiny_student
    path = tmp_path / "student.zip"
    student.save(path, fusion=fusion, pool=tiny_pool)
    torch.manual_seed(99)
    other = FoundationBackbone(feature_dim=96, net=FoundationNet(feature_dim=96),
                               seed=99, curve=[])
    with pytest.raises(ValueError, match="checksum"):
        load_student(path, other)
