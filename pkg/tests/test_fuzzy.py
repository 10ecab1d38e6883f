import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuzzyseg.formulas import (
    And,
    BoundingBox,
    ClassAtom,
    EqualityAtom,
    Implies,
    Not,
    Or,
    Scribble,
    build_bbox_shallow,
    build_bbox_tight,
    build_full_supervision,
    build_neighborhood,
    build_scribble,
    conjoin,
)
from fuzzyseg.fuzzy import (
    AlphaBetaEstimate,
    calibrated_loss,
    compiled,
    estimate_alpha_beta,
    eval_discrete,
    eval_discrete_batch,
    eval_fuzzy,
    grad_semantic_loss,
    sample_label_maps,
    semantic_loss,
    semantic_loss_and_grad,
)
from fuzzyseg.grids import LogitField, ProbField, softmax_field

from _reference import all_label_maps, ref_exact_prob, ref_fuzzy, ref_satisfies


def clipped_random_field(h, w, c, seed, floor=0.07):
    """Random per-pixel distributions bounded away from 0 and 1."""
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(c), size=(h, w))
    p = np.maximum(p, floor)
    p /= p.sum(axis=2, keepdims=True)
    return ProbField(p)


def atoms_strategy(h, w, c):
    class_atoms = st.builds(
        ClassAtom,
        st.integers(0, h - 1),
        st.integers(0, w - 1),
        st.integers(0, c - 1),
    )
    eq_atoms = (
        st.tuples(
            st.integers(0, h - 1),
            st.integers(0, w - 1),
            st.integers(0, h - 1),
            st.integers(0, w - 1),
        )
        .filter(lambda t: (t[0], t[1]) != (t[2], t[3]))
        .map(lambda t: EqualityAtom(*t))
    )
    return st.one_of(class_atoms, eq_atoms)


def formulas_strategy(h=3, w=3, c=3):
    return st.recursive(
        atoms_strategy(h, w, c),
        lambda kids: st.one_of(
            st.lists(kids, min_size=1, max_size=3).map(And),
            st.lists(kids, min_size=1, max_size=3).map(Or),
            kids.map(Not),
            st.tuples(kids, kids).map(lambda ab: Implies(*ab)),
        ),
        max_leaves=8,
    )


# --- forward values ---------------------------------------------------------

def test_single_atom_log_prob():
    p = ProbField(np.array([[[0.8, 0.2]]]))
    res = eval_fuzzy(ClassAtom(0, 0, 0), p)
    assert abs(res.log_prob - math.log(0.8)) < 1e-12


def test_and_of_independent_atoms():
    p = ProbField(np.array([[[0.8, 0.2], [0.5, 0.5]]]))
    f = And([ClassAtom(0, 0, 0), ClassAtom(0, 1, 0)])
    res = eval_fuzzy(f, p)
    assert abs(res.prob - 0.4) < 1e-12
    assert abs(res.prob - ref_exact_prob(f, p.data)) < 1e-12


def test_eq_atom_is_agreement_probability():
    p = ProbField(np.array([[[0.7, 0.3], [0.4, 0.6]]]))
    f = EqualityAtom(0, 0, 0, 1)
    res = eval_fuzzy(f, p)
    expected = 0.7 * 0.4 + 0.3 * 0.6
    assert abs(res.prob - expected) < 1e-12
    assert abs(res.prob - ref_exact_prob(f, p.data)) < 1e-12


def test_tight_box_value_and_gap_on_uniform_field():
    # all-0.5 two-class 2x2 field: relaxed value is 0.75^4, exact count is 7/16
    p = ProbField(np.full((2, 2, 2), 0.5))
    f = build_bbox_tight(BoundingBox(0, 0, 1, 1, 1))
    res = eval_fuzzy(f, p)
    assert abs(res.log_prob - math.log(0.31640625)) < 1e-12
    assert abs(ref_exact_prob(f, p.data) - 0.4375) < 1e-12


def test_empty_conjunction_is_certain():
    p = ProbField(np.full((1, 2, 2), 0.5))
    res = eval_fuzzy(And([]), p)
    assert res.log_prob == 0.0


def test_out_of_bounds_atom_rejected():
    p = ProbField(np.full((2, 2, 2), 0.5))
    with pytest.raises(ValueError, match="outside"):
        eval_fuzzy(ClassAtom(2, 0, 0), p)
    with pytest.raises(ValueError, match="outside"):
        eval_fuzzy(ClassAtom(0, 0, 5), p)


def test_compiled_form_cached_on_root():
    f = build_neighborhood(2, 2)
    assert compiled(f) is compiled(f)


@settings(max_examples=120, deadline=None)
@given(formulas_strategy(), st.integers(0, 10_000))
def test_fuzzy_matches_reference_recursion(f, seed):
    p = clipped_random_field(3, 3, 3, seed)
    got = eval_fuzzy(f, p)
    want = ref_fuzzy(f, p.data)
    assert math.isclose(got.prob, want, rel_tol=1e-9, abs_tol=1e-12)


@settings(max_examples=120, deadline=None)
@given(formulas_strategy(), st.integers(0, 10_000))
def test_discrete_matches_reference_recursion(f, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, size=(3, 3))
    assert eval_discrete(f, y) == ref_satisfies(f, y)


def test_discrete_batch_matches_scalar():
    f = conjoin([build_bbox_tight(BoundingBox(0, 0, 1, 1, 1)), build_neighborhood(2, 2)])
    ys = np.stack(list(all_label_maps(2, 2, 2)))
    batch = eval_discrete_batch(f, ys)
    for y, b in zip(ys, batch):
        assert bool(b) == ref_satisfies(f, y)


def test_full_supervision_discrete():
    gt = np.array([[0, 1], [2, 0]])
    f = build_full_supervision(gt, num_classes=3)
    assert eval_discrete(f, gt)
    other = gt.copy()
    other[0, 0] = 1
    assert not eval_discrete(f, other)


# --- monotonicity -----------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_negation_free_monotone_in_atom_probability(seed, n_atoms):
    rng = np.random.default_rng(seed)
    # distinct pixels so each atom has its own independent input
    pix = [(i, j) for i in range(2) for j in range(4)]
    rng.shuffle(pix)
    chosen = pix[:n_atoms]
    atoms = [ClassAtom(i, j, 0) for i, j in chosen]
    half = max(1, len(atoms) // 2)
    f = And([Or(atoms[:half]), And(atoms[half:]) if atoms[half:] else Or(atoms[:half])])
    p = clipped_random_field(2, 4, 3, seed).data.copy()
    base = eval_fuzzy(f, ProbField(p)).log_prob
    i, j = chosen[0]
    bumped = p.copy()
    room = 1.0 - bumped[i, j, 0]
    delta = 0.5 * room
    bumped[i, j, 1:] *= (room - delta) / room
    bumped[i, j, 0] += delta
    bumped[i, j] /= bumped[i, j].sum()
    after = eval_fuzzy(f, ProbField(bumped)).log_prob
    assert after >= base - 1e-12


# --- per-label reporting ----------------------------------------------------

def test_per_label_parts_sum_to_total():
    s = build_scribble(Scribble(pixels=((0, 0),), target_class=1))
    b = build_bbox_shallow(BoundingBox(0, 0, 1, 1, 1))
    f = conjoin([s, b])
    p = clipped_random_field(2, 2, 2, seed=5)
    res = eval_fuzzy(f, p)
    assert set(res.per_label_log_prob) == {"scribbles", "bbox_shallow"}
    assert abs(sum(res.per_label_log_prob.values()) - res.log_prob) < 1e-9


def test_labeled_root_reports_itself():
    b = build_bbox_shallow(BoundingBox(0, 0, 1, 1, 1))
    p = clipped_random_field(2, 2, 2, seed=6)
    res = eval_fuzzy(b, p)
    assert res.per_label_log_prob == {"bbox_shallow": res.log_prob}


# --- losses -----------------------------------------------------------------

def test_loss_zero_when_certain():
    loss, _ = semantic_loss(And([]), LogitField(np.zeros((1, 2, 2))))
    assert loss == 0.0


def test_full_supervision_loss_is_cross_entropy():
    rng = np.random.default_rng(11)
    z = rng.normal(scale=2.0, size=(3, 3, 4))
    gt = rng.integers(0, 4, size=(3, 3))
    f = build_full_supervision(gt, num_classes=4)
    loss, _ = semantic_loss(f, LogitField(z))
    p = softmax_field(LogitField(z)).data
    ce = -np.log(p[np.arange(3)[:, None], np.arange(3)[None, :], gt]).sum()
    assert abs(loss - ce) < 1e-9


def test_conjoined_loss_sums_per_constraint():
    s = build_scribble(Scribble(pixels=((0, 0), (1, 1)), target_class=0))
    b = build_bbox_tight(BoundingBox(0, 1, 1, 1, 1))
    z = LogitField(np.random.default_rng(3).normal(size=(2, 2, 2)))
    loss, parts = semantic_loss(conjoin([s, b]), z)
    assert abs(loss - sum(parts.values())) < 1e-9
    assert set(parts) == {"scribbles", "bbox"}


def test_semantic_loss_and_grad_matches_single_calls():
    s = build_scribble(Scribble(pixels=((0, 0),), target_class=0))
    b = build_bbox_tight(BoundingBox(0, 0, 1, 1, 1))
    z = LogitField(np.random.default_rng(4).normal(size=(2, 2, 2)))
    total, parts, grad = semantic_loss_and_grad([s, b], z)
    l1, _ = semantic_loss(s, z)
    l2, _ = semantic_loss(b, z)
    assert abs(total - (l1 + l2)) < 1e-9
    assert abs(parts["scribbles"] - l1) < 1e-12
    g1 = grad_semantic_loss(s, z).data
    g2 = grad_semantic_loss(b, z).data
    assert np.abs(grad.data - (g1 + g2)).max() < 1e-9


def test_constraint_weights_scale_gradient():
    s = build_scribble(Scribble(pixels=((0, 0),), target_class=0))
    z = LogitField(np.random.default_rng(5).normal(size=(1, 2, 2)))
    _, _, g1 = semantic_loss_and_grad([s], z)
    _, _, g2 = semantic_loss_and_grad([s], z, weights={"scribbles": 2.0})
    assert np.abs(g2.data - 2.0 * g1.data).max() < 1e-12


# --- gradients --------------------------------------------------------------

def fd_grad(formula, z, h=1e-5):
    g = np.zeros_like(z)
    flat = z.ravel()
    for k in range(flat.size):
        zp = flat.copy()
        zp[k] += h
        zm = flat.copy()
        zm[k] -= h
        lp, _ = semantic_loss(formula, LogitField(zp.reshape(z.shape)))
        lm, _ = semantic_loss(formula, LogitField(zm.reshape(z.shape)))
        g.ravel()[k] = (lp - lm) / (2 * h)
    return g


def test_single_atom_gradient_closed_form():
    f = ClassAtom(0, 0, 0)
    z = LogitField(np.zeros((1, 1, 2)))
    g = grad_semantic_loss(f, z).data
    assert abs(g[0, 0, 0] - (-0.5)) < 1e-12
    assert abs(g[0, 0, 1] - 0.5) < 1e-12


def test_unreferenced_pixel_has_zero_gradient():
    f = ClassAtom(0, 0, 1)
    z = LogitField(np.random.default_rng(7).normal(size=(2, 2, 3)))
    g = grad_semantic_loss(f, z).data
    assert np.all(g[0, 1] == 0) and np.all(g[1, 0] == 0) and np.all(g[1, 1] == 0)


@settings(max_examples=60, deadline=None)
@given(formulas_strategy(h=2, w=3, c=3), st.integers(0, 10_000))
def test_gradient_matches_finite_differences(f, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=1.5, size=(2, 3, 3))
    g = grad_semantic_loss(f, LogitField(z)).data
    fd = fd_grad(f, z)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
    assert (np.abs(g - fd) / denom).max() < 1e-4


@settings(max_examples=40, deadline=None)
@given(formulas_strategy(h=2, w=2, c=4), st.integers(0, 10_000))
def test_gradient_rows_sum_to_zero(f, seed):
    z = np.random.default_rng(seed).normal(scale=2.0, size=(2, 2, 4))
    g = grad_semantic_loss(f, LogitField(z)).data
    assert np.abs(g.sum(axis=2)).max() < 1e-9


# --- calibration ------------------------------------------------------------

def test_calibrated_loss_perfect_constraint_matches_semantic_loss():
    b = build_bbox_tight(BoundingBox(0, 0, 1, 1, 1))
    z = LogitField(np.random.default_rng(9).normal(size=(2, 2, 2)))
    loss, _ = semantic_loss(b, z)
    assert abs(calibrated_loss(b, z, alpha=1.0, beta=0.0) - loss) < 1e-12


def test_calibrated_loss_alpha_scales_by_constant():
    b = build_bbox_shallow(BoundingBox(0, 0, 0, 1, 1))
    z = LogitField(np.random.default_rng(10).normal(size=(1, 2, 2)))
    loss, _ = semantic_loss(b, z)
    assert abs(calibrated_loss(b, z, alpha=0.5, beta=0.0) - (loss + math.log(2))) < 1e-12


def test_calibrated_loss_arithmetic():
    # pick logits whose relaxed probability is exactly recoverable
    f = ClassAtom(0, 0, 0)
    z = np.zeros((1, 1, 2))
    z[0, 0, 0] = math.log(0.6 / 0.4)
    got = calibrated_loss(f, LogitField(z), alpha=0.9, beta=0.1)
    assert abs(got - (-math.log(0.9 * 0.6 + 0.1 * 0.4))) < 1e-12


def test_calibrated_loss_rejects_bad_alpha_beta():
    f = ClassAtom(0, 0, 0)
    z = LogitField(np.zeros((1, 1, 2)))
    for alpha, beta in ((0.5, 0.5), (0.2, 0.4), (1.2, 0.0), (0.5, -0.1)):
        with pytest.raises(ValueError):
            calibrated_loss(f, z, alpha, beta)


# --- alpha/beta estimation --------------------------------------------------

def test_estimate_alpha_beta_deterministic_field():
    gt = np.array([[0, 1], [1, 0]])
    f = build_full_supervision(gt, num_classes=2)
    onehot = np.zeros((2, 2, 2))
    for i in range(2):
        for j in range(2):
            onehot[i, j, gt[i, j]] = 1.0
    est = estimate_alpha_beta(f, [gt], [ProbField(onehot)], samples_per_image=500)
    assert est.alpha == 1.0
    assert est.n_unsat == 0 and est.beta is None


def test_estimate_alpha_beta_trivial_formula():
    gt = np.zeros((2, 2), dtype=int)
    field = ProbField(np.full((2, 2, 2), 0.5))
    est = estimate_alpha_beta(And([]), [gt], [field], samples_per_image=200)
    assert est.n_unsat == 0 and est.beta is None
    assert est.alpha is not None


def test_estimate_alpha_beta_matches_enumeration():
    rng = np.random.default_rng(21)
    p = rng.dirichlet(np.ones(2), size=(2, 2))
    field = ProbField(p)
    gt = np.array([[1, 0], [0, 1]])
    f = build_bbox_shallow(BoundingBox(0, 0, 1, 1, 1))
    # exact values by enumeration
    p_phi = ref_exact_prob(f, p)
    p_gt = float(np.prod([p[i, j, gt[i, j]] for i in range(2) for j in range(2)]))
    gt_sat = ref_satisfies(f, gt)
    alpha_true = p_gt * gt_sat / p_phi
    beta_true = p_gt * (not gt_sat) / (1 - p_phi)
    est = estimate_alpha_beta(f, [gt], [field], samples_per_image=20_000, seed=3)
    assert isinstance(est, AlphaBetaEstimate)
    assert abs(est.alpha - alpha_true) <= max(3 * est.alpha_se, 1e-3)
    assert abs(est.beta - beta_true) <= max(3 * est.beta_se, 1e-3)


def test_sample_label_maps_marginals():
    p = np.array([[[0.2, 0.8]]])
    ys = sample_label_maps(p, 20_000, np.random.default_rng(0))
    assert ys.shape == (20_000, 1, 1)
    frac = ys.mean()
    assert abs(frac - 0.8) < 0.02
