"""Exact sheaf arithmetic for split bundles on the projective line.

Rational weight decompositions of the section space at a twist level k,
the subsheaves generated by weight-truncated section families, their
saturations (rank and degree via gcds of maximal minors of homogeneous
generator matrices), and the two numerical invariants of a weight
datum: the non-Archimedean energy slope and the extremal weight gap.
All arithmetic is exact over the Gaussian rationals; no floating point
enters this module.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from math import lcm

import sympy as sp

from .bundle import BundleSpec, regularity
from .sections import SectionBasis, basis

X0, X1 = sp.symbols("x0 x1")

STABLE = "stable"
POLYSTABLE = "polystable_not_stable"
SEMISTABLE_ONLY = "semistable_only_na"
UNSTABLE = "unstable"


def _to_gaussian(c):
    """Coerce a coefficient to an exact Gaussian-rational sympy scalar."""
    if isinstance(c, Fraction):
        return sp.Rational(c.numerator, c.denominator)
    if isinstance(c, (int, sp.Integer, sp.Rational)):
        return sp.sympify(c)
    if isinstance(c, complex):
        re, im = Fraction(c.real), Fraction(c.imag)
        if re.denominator > 1 << 20 or im.denominator > 1 << 20:
            raise ValueError("inexact complex coefficient; pass exact rationals")
        return sp.Rational(re.numerator, re.denominator) + sp.I * sp.Rational(
            im.numerator, im.denominator
        )
    e = sp.sympify(c)
    re, im = e.as_real_imag()
    if not (re.is_rational and im.is_rational):
        raise ValueError(f"coefficient {c!r} is not a Gaussian rational")
    return e


def _frac(w) -> Fraction:
    if isinstance(w, Fraction):
        return w
    if isinstance(w, int):
        return Fraction(w)
    if isinstance(w, sp.Rational):
        return Fraction(int(w.p), int(w.q))
    if isinstance(w, str):
        return Fraction(w)
    raise ValueError(f"weight {w!r} is not an exact rational")


@dataclass(frozen=True)
class WeightSpec:
    """Rational weight decomposition of the section space at level k.

    `blocks` is a list of (weight, vectors); weights strictly decrease,
    each vector holds exact Gaussian-rational coefficients in the
    section-basis ordering, and the vectors of all blocks together form
    a basis of the section space.
    """

    k: int
    blocks: tuple  # of (Fraction, tuple of coefficient tuples)

    def __post_init__(self):
        blocks = tuple(
            (_frac(w), tuple(tuple(_to_gaussian(c) for c in v) for v in vecs))
            for w, vecs in self.blocks
        )
        object.__setattr__(self, "blocks", blocks)
        ws = [w for w, _ in blocks]
        if not ws:
            raise ValueError("weight decomposition needs at least one block")
        if any(w1 <= w2 for w1, w2 in zip(ws, ws[1:])):
            raise ValueError("block weights must be strictly decreasing")

    @property
    def weights(self):
        return tuple(w for w, _ in self.blocks)

    @property
    def dimension(self) -> int:
        return sum(len(vecs) for _, vecs in self.blocks)

    @property
    def trace(self) -> Fraction:
        return sum((w * len(vecs) for w, vecs in self.blocks), Fraction(0))

    def all_vectors(self):
        return [v for _, vecs in self.blocks for v in vecs]

    def validate_against(self, sb: SectionBasis) -> None:
        if self.k != sb.k:
            raise ValueError("weight decomposition level differs from basis level")
        if self.dimension != sb.N:
            raise ValueError(
                f"weight decomposition has {self.dimension} vectors; "
                f"the section space has dimension {sb.N}"
            )
        m = sp.Matrix([list(v) for v in self.all_vectors()])
        if m.rank() != sb.N:
            raise ValueError("weight-block vectors are linearly dependent")


@dataclass(frozen=True)
class HomogeneousSectionMatrix:
    """Generators of a subsheaf, one column per section.

    Row i holds binary forms of degree (i-th summand degree) + k; a map
    from m copies of the k-fold negative line bundle into the bundle.
    """

    bundle: BundleSpec
    k: int
    matrix: sp.Matrix  # r x m, entries in QQ(i)[x0, x1]

    def __post_init__(self):
        r = self.bundle.rank
        if self.matrix.rows != r:
            raise ValueError("generator matrix row count differs from rank")
        for i in range(r):
            d = self.bundle.degrees[i] + self.k
            for j in range(self.matrix.cols):
                e = sp.expand(self.matrix[i, j])
                if e == 0:
                    continue
                p = sp.Poly(e, X0, X1)
                degs = {sum(mono) for mono in p.monoms()}
                if degs != {d}:
                    raise ValueError(
                        f"entry ({i}, {j}) is not homogeneous of degree {d}"
                    )

    @property
    def cols(self) -> int:
        return self.matrix.cols


def j_of(weights) -> int:
    """Least positive integer clearing all weight denominators."""
    ws = [_frac(w) for w in weights]
    if not ws:
        raise ValueError("empty weight list")
    return lcm(*(w.denominator for w in ws))


def generated_subsheaf(sb: SectionBasis, vectors) -> HomogeneousSectionMatrix:
    """Homogenize section-coefficient vectors into a generator matrix."""
    a = sb.bundle.degrees
    k = sb.k
    r = sb.bundle.rank
    cols = []
    for v in vectors:
        v = [_to_gaussian(c) for c in v]
        if len(v) != sb.N:
            raise ValueError(
                f"coefficient vector has length {len(v)}; expected {sb.N}"
            )
        col = [sp.Integer(0)] * r
        for c, (i, j) in zip(v, sb.entries):
            if c != 0:
                col[i] = col[i] + c * X0 ** (a[i] + k - j) * X1**j
        cols.append(col)
    m = sp.Matrix(r, len(cols), lambda i, j: cols[j][i]) if cols else sp.zeros(r, 0)
    return HomogeneousSectionMatrix(bundle=sb.bundle, k=k, matrix=m)


def _generic_rank(m: sp.Matrix, max_deg: int) -> int:
    """Rank over the function field, by exact evaluation at enough
    points (1, t) that some maximal minor is nonzero at one of them."""
    if m.cols == 0 or m.rows == 0:
        return 0
    best = 0
    for t in range(max_deg + 1):
        mt = m.subs({X0: 1, X1: sp.Integer(t)})
        best = max(best, mt.rank())
        if best == min(m.rows, m.cols):
            break
    return best


def saturate_rank_degree(m: HomogeneousSectionMatrix):
    """Rank and degree of the saturation of the image subsheaf.

    The degree is -rank*k + deg gcd of the maximal minors of a generic
    rank-many column combination: dividing the common factor out of the
    minor vector leaves a nowhere-vanishing subbundle inclusion, which
    is exactly the saturation on a curve.
    """
    mat = m.matrix
    r = m.bundle.rank
    max_deg = sum(d + m.k for d in m.bundle.degrees)
    rho = _generic_rank(mat, max_deg)
    if rho == 0:
        return 0, 0
    # mix the columns down to rho generic ones; any mix of full rank
    # spans the same generic fiber, hence has the same saturation
    for attempt in range(64):
        mix = sp.Matrix(
            mat.cols, rho, lambda i, j: ((3 * i + 5 * j + 7 * attempt) % 11) + (i == j)
        )
        mixed = mat * mix
        if _generic_rank(mixed, max_deg) == rho:
            break
    else:  # pragma: no cover - 64 mixes of full column rank cannot all fail
        raise RuntimeError("could not find a generic column combination")
    minors = []
    for rows in itertools.combinations(range(r), rho):
        d = sp.expand(mixed[list(rows), :].det())
        if d != 0:
            minors.append(sp.Poly(d, X0, X1, domain="QQ_I"))
    g = minors[0]
    for p in minors[1:]:
        g = g.gcd(p)
    degree = -rho * m.k + g.total_degree()
    return rho, degree


def evaluation_drop_degree(m: HomogeneousSectionMatrix) -> int:
    """Degree of the common factor of all maximal minors.

    Positive exactly when the pointwise evaluation rank of the
    generator family drops somewhere on the line; at such points the
    curvature of the induced metric ray concentrates, which matters
    for the numeric (but not the exact) asymptotics.
    """
    mat = m.matrix
    r = mat.rows
    max_deg = sum(d + m.k for d in m.bundle.degrees)
    rho = _generic_rank(mat, max_deg)
    if rho == 0:
        return 0
    minors = []
    for rows in itertools.combinations(range(r), rho):
        for cols in itertools.combinations(range(mat.cols), rho):
            d = sp.expand(mat[list(rows), list(cols)].det())
            if d != 0:
                minors.append(sp.Poly(d, X0, X1, domain="QQ_I"))
    g = minors[0]
    for p in minors[1:]:
        g = g.gcd(p)
        if g.total_degree() == 0:
            break
    return g.total_degree()


@dataclass(frozen=True)
class FiltrationReport:
    """Saturated subsheaf filtration induced by a weight decomposition."""

    j: int
    levels: tuple  # of (w_bar: int, rank: int, degree: int, slope: Fraction)
    graded_ranks: tuple
    mna: Fraction
    jna: Fraction
    bundle: BundleSpec = field(default=None)


def filtration(spec: BundleSpec, zeta: WeightSpec) -> FiltrationReport:
    """Filtration by weight thresholds, with both invariants.

    Walking the blocks in decreasing weight order, the cumulative
    vector families generate subsheaves whose saturations filter the
    bundle; the energy slope sums rank-weighted slope deficits over the
    integer thresholds between the extreme scaled weights, and the gap
    invariant is the extreme weight difference over levels where the
    rank actually jumps.
    """
    k = zeta.k
    if k < regularity(spec):
        raise ValueError(
            f"level {k} is below the regularity threshold {regularity(spec)}"
        )
    sb = basis(spec, k)
    zeta.validate_against(sb)

    j = j_of(zeta.weights)
    mu = Fraction(spec.slope)
    levels = []
    ranks = []
    cum = []
    for w, vecs in zeta.blocks:
        cum.extend(vecs)
        rho, deg = saturate_rank_degree(generated_subsheaf(sb, cum))
        wbar = int(w * j)
        slope = Fraction(deg, rho) if rho else Fraction(0)
        levels.append((wbar, rho, deg, slope))
        ranks.append(rho)
    if ranks != sorted(ranks):
        raise RuntimeError("saturation ranks failed to be nondecreasing")
    if ranks[-1] != spec.rank or levels[-1][3] != mu:
        raise RuntimeError("top filtration level is not the whole bundle")

    graded = tuple(
        r1 - r0 for r0, r1 in zip([0] + ranks[:-1], ranks)
    )
    jumps = [i for i, g in enumerate(graded) if g > 0]
    jna = zeta.weights[jumps[0]] - zeta.weights[jumps[-1]] if jumps else Fraction(0)

    # sum of rank * (slope deficit), one term per integer threshold;
    # the filtration step is constant between consecutive scaled weights
    mna = Fraction(0)
    for (w0, rho, _, slope), (w1, _, _, _) in zip(levels, levels[1:]):
        count = w0 - w1  # integers q in [-w0, -w1)
        if rho:
            mna += count * rho * (mu - slope)
    mna = Fraction(2, j) * mna

    return FiltrationReport(
        j=j,
        levels=tuple(levels),
        graded_ranks=graded,
        mna=mna,
        jna=Fraction(jna),
        bundle=spec,
    )


def mna(spec: BundleSpec, zeta: WeightSpec) -> Fraction:
    return filtration(spec, zeta).mna


def jna(spec: BundleSpec, zeta: WeightSpec) -> Fraction:
    return filtration(spec, zeta).jna


def slope_gap_constant(spec: BundleSpec) -> Fraction:
    """Universal slope-gap constant 1/(r(r-1)) from integrality of
    degrees and ranks; only meaningful for rank at least 2."""
    r = spec.rank
    if r < 2:
        raise ValueError("slope gaps are vacuous for rank 1")
    return Fraction(1, r * (r - 1))


def stability_classify(spec: BundleSpec) -> str:
    degs = spec.degrees
    if spec.rank == 1:
        return STABLE
    if all(d == degs[0] for d in degs):
        return POLYSTABLE
    return UNSTABLE


def semistable_positivity_audit(spec: BundleSpec, zeta_samples) -> dict:
    """Check nonnegativity of the energy slope over sampled weight data.

    Only meaningful for semistable bundles; for each sample the slope
    must be nonnegative, and any violation is returned as a
    counterexample record (it would indicate an implementation bug).
    """
    cls = stability_classify(spec)
    if cls == UNSTABLE:
        raise ValueError("positivity audit requires a semistable bundle")
    records = []
    violations = []
    for zeta in zeta_samples:
        rep = filtration(spec, zeta)
        rec = {"weights": zeta.weights, "mna": rep.mna, "jna": rep.jna}
        if rep.mna < 0:
            violations.append(rec)
        if cls == STABLE and spec.rank >= 2:
            bound = 2 * slope_gap_constant(spec) * rep.jna
            if rep.mna < bound:
                violations.append({**rec, "bound": bound})
        records.append(rec)
    return {
        "classification": cls,
        "samples": len(records),
        "records": records,
        "violations": violations,
        "passes": not violations,
    }


def block_weightspec(sb: SectionBasis, weights_and_dims, k: int | None = None):
    """Weight decomposition from (weight, dim) pairs over the standard
    basis order: the first dim1 basis elements get weight w1, and so on."""
    k = sb.k if k is None else k
    eye = sp.eye(sb.N)
    blocks = []
    start = 0
    for w, d in weights_and_dims:
        vecs = tuple(tuple(eye[start + t, s] for s in range(sb.N)) for t in range(d))
        blocks.append((_frac(w), vecs))
        start += d
    if start != sb.N:
        raise ValueError(f"block dimensions sum to {start}; expected {sb.N}")
    return WeightSpec(k=k, blocks=tuple(blocks))


# ---------------------------------------------------------------------------
# JSON interchange: rationals as "p/q" strings, Gaussian rationals as
# ["re", "im"] pairs.


def _frac_str(f: Fraction) -> str:
    f = Fraction(f)
    return f"{f.numerator}/{f.denominator}" if f.denominator != 1 else str(f.numerator)


def weightspec_from_json(obj: dict) -> WeightSpec:
    try:
        k = int(obj["k"])
        blocks = []
        for b in obj["blocks"]:
            w = Fraction(b["w"])
            vecs = []
            for v in b["vectors"]:
                vec = []
                for entry in v:
                    re, im = entry
                    fr, fi = Fraction(re), Fraction(im)
                    vec.append(
                        sp.Rational(fr.numerator, fr.denominator)
                        + sp.I * sp.Rational(fi.numerator, fi.denominator)
                    )
                vecs.append(tuple(vec))
            blocks.append((w, tuple(vecs)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed weight decomposition: {exc}") from exc
    return WeightSpec(k=k, blocks=tuple(blocks))


def report_to_json(rep: FiltrationReport) -> dict:
    return {
        "j": rep.j,
        "levels": [
            {
                "w_bar": wb,
                "rank": rho,
                "degree": deg,
                "slope": _frac_str(slope),
            }
            for wb, rho, deg, slope in rep.levels
        ],
        "graded_ranks": list(rep.graded_ranks),
        "mna": _frac_str(rep.mna),
        "jna": _frac_str(rep.jna),
    }
