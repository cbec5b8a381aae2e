"""Mass-action reaction terms and machine verification of their structure.

Networks are restricted to reversible mass-action reactions with equal
forward and backward rates.  That normalization makes every admissible
network dissipate the Boltzmann entropy termwise,

    sum_i Q_i(a) ln(a_i) = - sum_r k_r (pi_f - pi_b) ln(pi_f / pi_b) <= 0,

where pi_f and pi_b are the reactant and product mass-action monomials, and
molecule-count balance of every reaction makes sum_i Q_i vanish identically.
The canonical example is the four-species exchange A1 + A3 <-> A2 + A4 with
unit rates, whose net rates are Q_i(a) = (-1)^(i+1) (a2 a4 - a1 a3).

Negative concentrations (which can appear as roundoff in discrete
trajectories) are clamped to zero before any monomial is evaluated, so the
reaction term never amplifies negativity.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from entropy_rds.core import Field


class NetworkError(ValueError):
    """Raised for structurally invalid reaction networks or network files."""


@dataclass(frozen=True)
class Reaction:
    """One reversible mass-action reaction."""

    reactants: tuple
    products: tuple
    k_forward: float = 1.0
    k_backward: float = 1.0

    def __post_init__(self):
        if len(self.reactants) != len(self.products):
            raise NetworkError("reactant/product stoichiometry lengths differ")
        if any(c < 0 for c in self.reactants) or any(c < 0 for c in self.products):
            raise NetworkError("stoichiometric coefficients must be nonnegative")
        if not (self.k_forward > 0 and self.k_backward > 0):
            raise NetworkError("rates must be positive")

    @property
    def order_forward(self):
        return sum(self.reactants)

    @property
    def order_backward(self):
        return sum(self.products)

    def is_balanced(self):
        """Total molecule count conserved (forces sum_i Q_i = 0)."""
        return self.order_forward == self.order_backward


@dataclass(frozen=True)
class ReactionNetwork:
    """A set of reversible reactions on p species, with declared growth bounds.

    `growth_exponent` (q) and `growth_constant` are the declared constants of
    the gradient bound |grad Q_i(a)| <= growth_constant * |a|^(q-1); they are
    bookkeeping for the hypotheses report, the empirical values come from
    :func:`estimate_growth`.
    """

    p: int
    reactions: tuple = ()
    growth_exponent: float = 2.0
    growth_constant: float = 2.0

    def __post_init__(self):
        if self.p < 1:
            raise NetworkError("need at least one species")
        if self.growth_exponent < 2:
            raise NetworkError("declared growth exponent must be >= 2")
        if not self.growth_constant > 0:
            raise NetworkError("declared growth constant must be positive")
        for r in self.reactions:
            if len(r.reactants) != self.p:
                raise NetworkError("stoichiometry length != species count")
            if not r.is_balanced():
                raise NetworkError(
                    f"reaction {r.reactants}->{r.products} does not conserve "
                    "molecule count"
                )
            if r.k_forward != r.k_backward:
                raise NetworkError(
                    "detailed-balance normalization requires k_forward == k_backward"
                )
            if max(r.order_forward, r.order_backward) > self.growth_exponent:
                raise NetworkError(
                    f"reaction order {max(r.order_forward, r.order_backward)} exceeds "
                    f"declared growth exponent {self.growth_exponent}"
                )


def four_species_network():
    """A1 + A3 <-> A2 + A4 at unit rates: Q_i(a) = (-1)^(i+1)(a2 a4 - a1 a3)."""
    return ReactionNetwork(
        p=4,
        reactions=(Reaction((1, 0, 1, 0), (0, 1, 0, 1), 1.0, 1.0),),
        growth_exponent=2.0,
        growth_constant=2.0,
    )


def empty_network(p=1):
    """Pure-diffusion placeholder: Q identically zero."""
    return ReactionNetwork(p=p, reactions=())


# ---------------------------------------------------------------------------
# Rate evaluation
# ---------------------------------------------------------------------------

def reaction_rate_array(net, a):
    """Pointwise net rates Q_i on a stacked (p, ...) concentration array.

    Negative entries are clamped to zero before the monomials are formed.
    By construction sum_i Q_i = 0 pointwise up to roundoff.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape[0] != net.p:
        raise NetworkError(f"state has {a.shape[0]} species, network has {net.p}")
    ac = np.maximum(a, 0.0)
    out = np.zeros_like(ac)
    for r in net.reactions:
        pi_f = np.ones(ac.shape[1:])
        pi_b = np.ones(ac.shape[1:])
        for i in range(net.p):
            if r.reactants[i]:
                pi_f = pi_f * ac[i] ** r.reactants[i]
            if r.products[i]:
                pi_b = pi_b * ac[i] ** r.products[i]
        v = r.k_forward * pi_f - r.k_backward * pi_b
        for i in range(net.p):
            c = r.products[i] - r.reactants[i]
            if c:
                out[i] += c * v
    return out


def reaction_rate(net, state):
    """Q_i(a(x)) for each species of a SpeciesState, as Fields."""
    rates = reaction_rate_array(net, state.values_array())
    return [Field(state.grid, r) for r in rates]


# ---------------------------------------------------------------------------
# Hypotheses report
# ---------------------------------------------------------------------------

@dataclass
class HypothesesReport:
    """Worst observed violation per structural hypothesis.

    The sign hypothesis is recorded under both conventions.  With the
    mandated clamp, negativity must not be amplified: the violation is the
    negative part of Q_i evaluated at the clamped state (a_i -> 0).  Without
    the clamp, the literal reading "a_i <= 0 implies Q_i <= 0" is measured on
    the raw polynomial; mass-action systems generically violate it off the
    nonnegative cone, which is why the clamp is the enforced convention and
    only it feeds `accepted`.
    """

    h2_worst_clamped: float
    h2_worst_unclamped: float
    h3_worst: float
    h4_worst: float
    samples: int
    tolerance: float = 1e-12

    @property
    def accepted(self):
        return (
            self.h2_worst_clamped <= self.tolerance
            and self.h3_worst <= self.tolerance
            and self.h4_worst <= self.tolerance
        )


def reaction_rate_unclamped(net, a):
    """Raw polynomial rates without the negativity clamp (diagnostics only)."""
    a = np.asarray(a, dtype=np.float64)
    out = np.zeros_like(a)
    for r in net.reactions:
        pi_f = np.ones(a.shape[1:])
        pi_b = np.ones(a.shape[1:])
        for i in range(net.p):
            if r.reactants[i]:
                pi_f = pi_f * a[i] ** r.reactants[i]
            if r.products[i]:
                pi_b = pi_b * a[i] ** r.products[i]
        v = r.k_forward * pi_f - r.k_backward * pi_b
        for i in range(net.p):
            c = r.products[i] - r.reactants[i]
            if c:
                out[i] += c * v
    return out


def check_h2_h3_h4(net, samples=200, seed=0):
    """Check sign preservation, mass conservation and entropy dissipation.

    Mass conservation is checked symbolically from the stoichiometry; the
    sign and entropy hypotheses are sampled at random states.  Any violation
    beyond 1e-12 marks the network rejected.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)

    h3 = max(
        (abs(sum(r.products) - sum(r.reactants)) for r in net.reactions), default=0
    )

    h2_clamped = 0.0
    h2_unclamped = 0.0
    h4 = -np.inf
    for _ in range(samples):
        a = rng.lognormal(0.0, 1.0, size=(net.p, 1))
        # one coordinate forced nonpositive
        i = int(rng.integers(net.p))
        neg = a.copy()
        neg[i] = -rng.uniform(0.0, 1.0)
        q_clamped = reaction_rate_array(net, neg)[i, 0]
        q_raw = reaction_rate_unclamped(net, neg)[i, 0]
        # with the clamp the rate at a_i = 0 must not push a_i further down
        h2_clamped = max(h2_clamped, -q_clamped)
        # literal off-cone reading: a_i <= 0 would demand Q_i <= 0
        h2_unclamped = max(h2_unclamped, q_raw)

        q = reaction_rate_array(net, a)
        h4 = max(h4, float(np.sum(q[:, 0] * np.log(a[:, 0]))))

    return HypothesesReport(
        h2_worst_clamped=h2_clamped,
        h2_worst_unclamped=h2_unclamped,
        h3_worst=float(h3),
        h4_worst=h4 if np.isfinite(h4) else 0.0,
        samples=samples,
    )


# ---------------------------------------------------------------------------
# Growth-exponent estimation
# ---------------------------------------------------------------------------

def _jacobian_max_norm(net, a):
    """Max over i of |grad_a Q_i| by central finite differences."""
    p = net.p
    J = np.zeros((p, p))
    for j in range(p):
        step = 1e-5 * (1.0 + abs(a[j]))
        ap = a.copy()
        am = a.copy()
        ap[j] += step
        am[j] -= step
        qp = reaction_rate_array(net, ap.reshape(p, 1))[:, 0]
        qm = reaction_rate_array(net, am.reshape(p, 1))[:, 0]
        J[:, j] = (qp - qm) / (2 * step)
    return float(np.max(np.linalg.norm(J, axis=1)))


def estimate_growth(net, radii, directions=32, seed=0):
    """Fit |grad Q| ~ C * R^(q-1) over spheres |a| = R in the positive cone.

    Returns (fitted q, fitted C).  The radii should span at least two
    decades.  A degenerate (constant) Q has no slope; q = 1 is reported.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.min() <= 0:
        raise ValueError("radii must be positive")
    if np.log10(radii.max() / radii.min()) < 2 - 1e-9:
        raise ValueError("radii must span at least two decades")
    rng = np.random.default_rng(seed)
    dirs = np.abs(rng.standard_normal((directions, net.p)))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    g = np.array(
        [max(_jacobian_max_norm(net, R * d) for d in dirs) for R in radii]
    )
    pos = g > 0
    if pos.sum() < 2:
        return 1.0, 0.0
    slope, intercept = np.polyfit(np.log(radii[pos]), np.log(g[pos]), 1)
    return float(slope + 1.0), float(np.exp(intercept))


# ---------------------------------------------------------------------------
# Network description files
# ---------------------------------------------------------------------------

def _parse_side(side, lineno):
    terms = []
    for raw in side.split("+"):
        parts = raw.split()
        if not parts:
            raise NetworkError(f"line {lineno}: empty term in reaction side")
        if len(parts) == 1:
            coeff, name = 1, parts[0]
        elif len(parts) == 2:
            try:
                coeff = int(parts[0])
            except ValueError:
                raise NetworkError(
                    f"line {lineno}: bad stoichiometric coefficient {parts[0]!r}"
                ) from None
            name = parts[1]
        else:
            raise NetworkError(f"line {lineno}: malformed term {raw.strip()!r}")
        if coeff < 1:
            raise NetworkError(f"line {lineno}: coefficient must be >= 1")
        terms.append((coeff, name))
    return terms


def parse_network(text):
    """Parse the plain-text network format: one reaction per line,

        k: r1 A1 + r2 A2 ... -> p1 A1 + ...

    Reversibility with equal rates is implied.  Lines that do not conserve
    the total molecule count are rejected.  Species are indexed in order of
    first appearance.
    """
    species = {}
    parsed = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise NetworkError(f"line {lineno}: missing 'rate:' prefix")
        rate_s, _, body = line.partition(":")
        try:
            rate = float(rate_s)
        except ValueError:
            raise NetworkError(f"line {lineno}: bad rate {rate_s.strip()!r}") from None
        if rate <= 0:
            raise NetworkError(f"line {lineno}: rate must be positive")
        if "->" not in body:
            raise NetworkError(f"line {lineno}: missing '->'")
        left, _, right = body.partition("->")
        lhs = _parse_side(left, lineno)
        rhs = _parse_side(right, lineno)
        if sum(c for c, _ in lhs) != sum(c for c, _ in rhs):
            raise NetworkError(
                f"line {lineno}: unbalanced reaction "
                f"({sum(c for c, _ in lhs)} -> {sum(c for c, _ in rhs)} molecules)"
            )
        for _, name in lhs + rhs:
            species.setdefault(name, len(species))
        parsed.append((rate, lhs, rhs, lineno))

    if not parsed:
        raise NetworkError("no reactions found")
    p = len(species)
    reactions = []
    max_order = 2
    for rate, lhs, rhs, lineno in parsed:
        r = [0] * p
        s = [0] * p
        for c, name in lhs:
            r[species[name]] += c
        for c, name in rhs:
            s[species[name]] += c
        reactions.append(Reaction(tuple(r), tuple(s), rate, rate))
        max_order = max(max_order, sum(r), sum(s))
    return ReactionNetwork(
        p=p,
        reactions=tuple(reactions),
        growth_exponent=float(max_order),
        growth_constant=2.0 * sum(r.k_forward for r in reactions) * max_order,
    )


def load_network(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_network(fh.read())
