"""Log-space product-semantics evaluation of formulas, with exact gradients.

Conjunction adds log-probabilities, disjunction goes through the complement
product, implication A -> B evaluates as not(A and not B). An equality atom
relaxes to sum_c p1(c) * p2(c), the exact agreement probability of two
independent pixels.

Trees are compiled once into flat arrays grouped by (depth, op), so that
evaluation is a short sequence of vectorized numpy kernels instead of a
Python recursion; the compiled form is cached on the root node and shared
across every field of the same shape. Gradients are analytic: one reverse
sweep over the same groups, then the softmax Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formulas import Formula
from .grids import (
    LOG_PROB_EPS,
    PROB_EPS,
    GradField,
    LogitField,
    ProbField,
    log1mexp_arr,
    softmax_field,
)

# complement floor: inputs of log1mexp are clamped to this, so complements
# stay finite; min() has exact gradient 0 in the clamped region, which keeps
# the analytic gradient equal to the gradient of what forward computes
LOG1M_EPS = math.log1p(-PROB_EPS)


@dataclass
class EvalResult:
    log_prob: float
    per_label_log_prob: dict

    @property
    def prob(self) -> float:
        return math.exp(self.log_prob)


class _Group:
    __slots__ = ("op", "nodes", "child_ptr", "child_ids", "a_ids", "b_ids", "counts")

    def __init__(self, op, nodes, child_ptr=None, child_ids=None, a_ids=None, b_ids=None):
        self.op = op
        self.nodes = nodes
        self.child_ptr = child_ptr
        self.child_ids = child_ids
        self.a_ids = a_ids
        self.b_ids = b_ids
        self.counts = None if child_ptr is None else np.diff(child_ptr)


class CompiledFormula:
    """Flat post-order form of a formula tree.

    Atoms are deduplicated by coordinates; shared subtrees (same object in
    several places) are evaluated once. Internal nodes are grouped by
    (depth, op) and each group evaluates in one vectorized call.
    """

    def __init__(self, root: Formula):
        self.root = root
        idx_of: dict = {}       # id(node) -> flat index
        atom_of: dict = {}      # atom key -> flat index
        ops: list = []
        levels: list = []
        children: list = []     # per flat index: tuple of child indices

        def register_atom(node) -> int:
            key = (node.op, node.i, node.j, node.c, node.i2, node.j2)
            found = atom_of.get(key)
            if found is None:
                found = len(ops)
                ops.append(node.op)
                levels.append(0)
                children.append(())
                atom_of[key] = found
                self._atom_nodes.append(node)
            return found

        self._atom_nodes: list = []
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in idx_of:
                continue
            if not expanded:
                if node.is_atom:
                    idx_of[id(node)] = register_atom(node)
                    continue
                if node.op == "and" and not node.children:
                    idx = len(ops)
                    ops.append("true")
                    levels.append(0)
                    children.append(())
                    idx_of[id(node)] = idx
                    continue
                stack.append((node, True))
                for ch in reversed(node.children):
                    if id(ch) not in idx_of:
                        stack.append((ch, False))
            else:
                ch_idx = tuple(idx_of[id(ch)] for ch in node.children)
                idx = len(ops)
                ops.append(node.op)
                levels.append(1 + max(levels[k] for k in ch_idx))
                children.append(ch_idx)
                idx_of[id(node)] = idx

        self.n_nodes = len(ops)
        self.root_idx = idx_of[id(root)]

        # atom coordinate arrays
        ca = [(i, n) for i, n in zip(atom_of.values(), self._atom_nodes) if n.op == "class_atom"]
        eq = [(i, n) for i, n in zip(atom_of.values(), self._atom_nodes) if n.op == "eq_atom"]
        self.ca_nodes = np.array([i for i, _ in ca], dtype=np.int64)
        self.ca_i = np.array([n.i for _, n in ca], dtype=np.int64)
        self.ca_j = np.array([n.j for _, n in ca], dtype=np.int64)
        self.ca_c = np.array([n.c for _, n in ca], dtype=np.int64)
        self.eq_nodes = np.array([i for i, _ in eq], dtype=np.int64)
        self.eq_i = np.array([n.i for _, n in eq], dtype=np.int64)
        self.eq_j = np.array([n.j for _, n in eq], dtype=np.int64)
        self.eq_i2 = np.array([n.i2 for _, n in eq], dtype=np.int64)
        self.eq_j2 = np.array([n.j2 for _, n in eq], dtype=np.int64)
        self.true_nodes = np.array(
            [i for i, op in enumerate(ops) if op == "true"], dtype=np.int64
        )

        self.max_i = int(max(self.ca_i.max(initial=-1), self.eq_i.max(initial=-1), self.eq_i2.max(initial=-1)))
        self.max_j = int(max(self.ca_j.max(initial=-1), self.eq_j.max(initial=-1), self.eq_j2.max(initial=-1)))
        self.max_c = int(self.ca_c.max(initial=-1))

        # (level, op) groups in evaluation order
        buckets: dict = {}
        for idx, (op, lv) in enumerate(zip(ops, levels)):
            if lv == 0:
                continue
            buckets.setdefault((lv, op), []).append(idx)
        self.groups: list = []
        for (lv, op), members in sorted(buckets.items()):
            nodes = np.array(members, dtype=np.int64)
            if op in ("and", "or"):
                ptr = np.zeros(len(members) + 1, dtype=np.int64)
                flat: list = []
                for k, m in enumerate(members):
                    flat.extend(children[m])
                    ptr[k + 1] = len(flat)
                self.groups.append(
                    _Group(op, nodes, child_ptr=ptr, child_ids=np.array(flat, dtype=np.int64))
                )
            elif op == "not":
                kids = np.array([children[m][0] for m in members], dtype=np.int64)
                self.groups.append(_Group(op, nodes, child_ids=kids))
            elif op == "implies":
                a = np.array([children[m][0] for m in members], dtype=np.int64)
                b = np.array([children[m][1] for m in members], dtype=np.int64)
                self.groups.append(_Group(op, nodes, a_ids=a, b_ids=b))
            else:
                raise AssertionError(f"unexpected grouped op {op}")

        # labeled-conjunction bookkeeping for per-label reporting
        if root.op == "and" and root.label is None and root.children:
            self.root_parts = [(ch.label, idx_of[id(ch)]) for ch in root.children]
        else:
            self.root_parts = None

    def check_bounds(self, h: int, w: int, c: int) -> None:
        if self.max_i >= h or self.max_j >= w or self.max_c >= c:
            raise ValueError(
                f"formula references pixel/class up to (i={self.max_i}, j={self.max_j}, "
                f"c={self.max_c}), outside a {h}x{w}x{c} field"
            )

    # -- fuzzy forward/backward ------------------------------------------

    def forward(self, p: np.ndarray):
        """Log-probability of every node; returns (values, saved workspaces)."""
        self.check_bounds(*p.shape)
        v = np.empty(self.n_nodes, dtype=np.float64)
        if len(self.ca_nodes):
            v[self.ca_nodes] = np.log(np.maximum(p[self.ca_i, self.ca_j, self.ca_c], PROB_EPS))
        if len(self.eq_nodes):
            dots = np.einsum("nc,nc->n", p[self.eq_i, self.eq_j], p[self.eq_i2, self.eq_j2])
            v[self.eq_nodes] = np.log(np.maximum(dots, PROB_EPS))
        if len(self.true_nodes):
            v[self.true_nodes] = 0.0
        saved: list = []
        for g in self.groups:
            if g.op == "and":
                v[g.nodes] = np.add.reduceat(v[g.child_ids], g.child_ptr[:-1])
                saved.append(None)
            elif g.op == "or":
                lc = np.minimum(v[g.child_ids], LOG1M_EPS)
                m = log1mexp_arr(lc)
                s = np.minimum(np.add.reduceat(m, g.child_ptr[:-1]), LOG1M_EPS)
                v[g.nodes] = log1mexp_arr(s)
                saved.append((lc, m, s))
            elif g.op == "not":
                lc = np.minimum(v[g.child_ids], LOG1M_EPS)
                v[g.nodes] = log1mexp_arr(lc)
                saved.append(lc)
            else:  # implies
                lb = np.minimum(v[g.b_ids], LOG1M_EPS)
                mb = log1mexp_arr(lb)
                u = np.minimum(v[g.a_ids] + mb, LOG1M_EPS)
                v[g.nodes] = log1mexp_arr(u)
                saved.append((lb, mb, u))
        return v, saved

    def backward(self, p: np.ndarray, v: np.ndarray, saved: list, g_root: float) -> np.ndarray:
        """Gradient of g_root * v[root] w.r.t. the probability field."""
        g = np.zeros(self.n_nodes, dtype=np.float64)
        g[self.root_idx] = g_root
        for gi in range(len(self.groups) - 1, -1, -1):
            grp = self.groups[gi]
            gn = g[grp.nodes]
            if not np.any(gn):
                continue
            if grp.op == "and":
                contrib = np.repeat(gn, grp.counts)
                g += np.bincount(grp.child_ids, weights=contrib, minlength=self.n_nodes)
            elif grp.op == "or":
                lc, m, s = saved[gi]
                out = v[grp.nodes]
                node_fac = gn * np.exp(s - out) * (s < LOG1M_EPS)
                child_fac = np.exp(lc - m) * (v[grp.child_ids] < LOG1M_EPS)
                contrib = np.repeat(node_fac, grp.counts) * child_fac
                g += np.bincount(grp.child_ids, weights=contrib, minlength=self.n_nodes)
            elif grp.op == "not":
                lc = saved[gi]
                out = v[grp.nodes]
                contrib = -gn * np.exp(lc - out) * (v[grp.child_ids] < LOG1M_EPS)
                g += np.bincount(grp.child_ids, weights=contrib, minlength=self.n_nodes)
            else:  # implies
                lb, mb, u = saved[gi]
                out = v[grp.nodes]
                d_u = -gn * np.exp(u - out) * (u < LOG1M_EPS)
                g += np.bincount(grp.a_ids, weights=d_u, minlength=self.n_nodes)
                d_b = -d_u * np.exp(lb - mb) * (v[grp.b_ids] < LOG1M_EPS)
                g += np.bincount(grp.b_ids, weights=d_b, minlength=self.n_nodes)

        # atoms -> probability field
        gp = np.zeros_like(p)
        h, w, c = p.shape
        if len(self.ca_nodes):
            pa = p[self.ca_i, self.ca_j, self.ca_c]
            d = g[self.ca_nodes] * (pa > PROB_EPS) / np.maximum(pa, PROB_EPS)
            flat = self.ca_i * (w * c) + self.ca_j * c + self.ca_c
            gp_flat = np.bincount(flat, weights=d, minlength=h * w * c)
            gp += gp_flat.reshape(h, w, c)
        if len(self.eq_nodes):
            p1 = p[self.eq_i, self.eq_j]
            p2 = p[self.eq_i2, self.eq_j2]
            dots = np.einsum("nc,nc->n", p1, p2)
            d = g[self.eq_nodes] * (dots > PROB_EPS) / np.maximum(dots, PROB_EPS)
            flat1 = self.eq_i * w + self.eq_j
            flat2 = self.eq_i2 * w + self.eq_j2
            gp_flat = gp.reshape(h * w, c)
            for cc in range(c):
                gp_flat[:, cc] += np.bincount(flat1, weights=d * p2[:, cc], minlength=h * w)
                gp_flat[:, cc] += np.bincount(flat2, weights=d * p1[:, cc], minlength=h * w)
        return gp

    # -- discrete forward --------------------------------------------------

    def forward_discrete(self, ys: np.ndarray) -> np.ndarray:
        """Satisfaction of the root for a batch of label maps, shape (S, H, W)."""
        s_count = ys.shape[0]
        v = np.empty((self.n_nodes, s_count), dtype=np.uint8)
        if len(self.ca_nodes):
            v[self.ca_nodes] = (ys[:, self.ca_i, self.ca_j] == self.ca_c).T
        if len(self.eq_nodes):
            v[self.eq_nodes] = (ys[:, self.eq_i, self.eq_j] == ys[:, self.eq_i2, self.eq_j2]).T
        if len(self.true_nodes):
            v[self.true_nodes] = 1
        for g in self.groups:
            if g.op == "and":
                v[g.nodes] = np.minimum.reduceat(v[g.child_ids], g.child_ptr[:-1], axis=0)
            elif g.op == "or":
                v[g.nodes] = np.maximum.reduceat(v[g.child_ids], g.child_ptr[:-1], axis=0)
            elif g.op == "not":
                v[g.nodes] = 1 - v[g.child_ids]
            else:
                v[g.nodes] = np.maximum(1 - v[g.a_ids], v[g.b_ids])
        return v[self.root_idx].astype(bool)


def compiled(f: Formula) -> CompiledFormula:
    comp = f._compiled
    if comp is None:
        comp = CompiledFormula(f)
        f._compiled = comp
    return comp


# ---------------------------------------------------------------------------
# Public evaluation API

def eval_fuzzy(formula: Formula, probs: ProbField) -> EvalResult:
    comp = compiled(formula)
    v, _ = comp.forward(probs.data)
    total = float(v[comp.root_idx])
    if formula.label is not None:
        per_label = {formula.label: total}
    elif comp.root_parts is not None:
        per_label: dict = {}
        for label, idx in comp.root_parts:
            per_label[label] = per_label.get(label, 0.0) + float(v[idx])
    else:
        per_label = {None: total}
    return EvalResult(log_prob=total, per_label_log_prob=per_label)


def eval_discrete(formula: Formula, labels: np.ndarray) -> bool:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-d, got shape {labels.shape}")
    return bool(eval_discrete_batch(formula, labels[None])[0])


def eval_discrete_batch(formula: Formula, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 3:
        raise ValueError(f"label batch must be (S, H, W), got shape {labels.shape}")
    comp = compiled(formula)
    if comp.max_i >= labels.shape[1] or comp.max_j >= labels.shape[2]:
        raise ValueError("formula references pixels outside the label maps")
    return comp.forward_discrete(labels)


def semantic_loss(formula: Formula, logits: LogitField):
    """Negative log of the relaxed constraint probability, plus per-label parts."""
    res = eval_fuzzy(formula, softmax_field(logits))
    per_constraint = {k: -lp for k, lp in res.per_label_log_prob.items()}
    return -res.log_prob, per_constraint


def grad_semantic_loss(formula: Formula, logits: LogitField) -> GradField:
    p = softmax_field(logits).data
    comp = compiled(formula)
    v, saved = comp.forward(p)
    gp = comp.backward(p, v, saved, g_root=-1.0)
    return GradField(_softmax_backward(p, gp))


def semantic_loss_and_grad(constraints, logits: LogitField, weights: dict | None = None):
    """Weighted sum of per-family losses and its gradient in one pass.

    constraints: list of labeled formulas, each compiled and evaluated on its
    own (sharing one compiled form across equally shaped images). Returns
    (total_loss, per_constraint_loss, GradField).
    """
    p = softmax_field(logits).data
    total = 0.0
    per_constraint: dict = {}
    gp = np.zeros_like(p)
    for f in constraints:
        w = 1.0 if weights is None else float(weights.get(f.label, 1.0))
        comp = compiled(f)
        v, saved = comp.forward(p)
        loss = -float(v[comp.root_idx])
        per_constraint[f.label] = loss
        total += w * loss
        if w != 0.0:
            gp += comp.backward(p, v, saved, g_root=-w)
    return total, per_constraint, GradField(_softmax_backward(p, gp))


def _softmax_backward(p: np.ndarray, gp: np.ndarray) -> np.ndarray:
    inner = np.einsum("ijc,ijc->ij", gp, p)
    return p * (gp - inner[..., None])


# ---------------------------------------------------------------------------
# Calibration

def calibrated_loss(formula: Formula, logits: LogitField, alpha: float, beta: float) -> float:
    """Loss under an imperfect constraint: -log((alpha - beta) * p + beta)."""
    if not (0.0 <= beta < alpha <= 1.0):
        raise ValueError(f"need 0 <= beta < alpha <= 1, got alpha={alpha}, beta={beta}")
    res = eval_fuzzy(formula, softmax_field(logits))
    mixed = (alpha - beta) * math.exp(res.log_prob) + beta
    return -math.log(max(mixed, PROB_EPS))


@dataclass
class AlphaBetaEstimate:
    """Monte-Carlo estimates of label-given-constraint reliabilities.

    alpha: P(sample equals gt | sample satisfies the formula)
    beta:  P(sample equals gt | sample violates the formula)
    Either is None when its partition received no samples.
    """

    alpha: float | None
    beta: float | None
    alpha_se: float | None
    beta_se: float | None
    n_sat: int
    n_unsat: int


def sample_label_maps(p: np.ndarray, n: int, rng) -> np.ndarray:
    """Draw n label maps from a per-pixel categorical field, shape (n, H, W)."""
    cdf = np.cumsum(p, axis=-1)
    u = rng.random((n,) + p.shape[:2] + (1,))
    y = (u > cdf[None]).sum(axis=-1)
    return np.minimum(y, p.shape[2] - 1).astype(np.int64)


def estimate_alpha_beta(
    formula: Formula,
    gt_maps,
    fields,
    samples_per_image: int = 10_000,
    seed: int = 0,
) -> AlphaBetaEstimate:
    if len(gt_maps) == 0 or len(gt_maps) != len(fields):
        raise ValueError("gt_maps and fields must be non-empty and aligned")
    rng = np.random.default_rng(seed)
    n_sat = n_unsat = sat_agree = unsat_agree = 0
    for gt, field in zip(gt_maps, fields):
        gt = np.asarray(gt, dtype=np.int64)
        p = field.data
        # chunked so huge grids do not materialize a giant sample tensor
        block = max(1, 4_000_000 // max(1, p.shape[0] * p.shape[1] * p.shape[2]))
        done = 0
        while done < samples_per_image:
            n = min(block, samples_per_image - done)
            ys = sample_label_maps(p, n, rng)
            sat = eval_discrete_batch(formula, ys)
            agree = (ys == gt).all(axis=(1, 2))
            n_sat += int(sat.sum())
            n_unsat += int((~sat).sum())
            sat_agree += int((sat & agree).sum())
            unsat_agree += int((~sat & agree).sum())
            done += n
    alpha = sat_agree / n_sat if n_sat else None
    beta = unsat_agree / n_unsat if n_unsat else None
    alpha_se = math.sqrt(alpha * (1 - alpha) / n_sat) if n_sat else None
    beta_se = math.sqrt(beta * (1 - beta) / n_unsat) if n_unsat else None
    return AlphaBetaEstimate(alpha, beta, alpha_se, beta_se, n_sat, n_unsat)
