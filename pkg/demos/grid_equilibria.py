"""Walkthrough: Nash equilibria of the two-player quadratic game coincide
with invariant predictors exactly when the environments share a minimizer.

Each environment's risk is a parabola in the ensemble value v = (w1+w2)/2.
Brute-forcing best responses over a strategy grid shows that the set of
equilibrium ensembles equals the set of values minimizing both risks at
once — and that when the minimizers differ, the invariant set is empty
while the only equilibria hug the strategy box boundary.

Run:  python demos/grid_equilibria.py
"""

from eirm.theory import QuadGameSpec, bounded_linear_ne, scalar_game_grid


def show(title, spec):
    res = scalar_game_grid(spec)
    print(f"\n{title}")
    print(f"  minimizers c = {spec.minimizers}, grid step {spec.step}")
    print(f"  NE pairs: {len(res.ne_pairs)}")
    print(f"  NE ensemble values: {sorted(res.ne_ensembles)}")
    print(f"  invariant values:   {sorted(res.invariant_set)}")
    print(f"  sets equal: {res.equal}")
    if not res.invariant_set:
        print(f"  every NE on the box edge: {res.boundary_only(spec.hi)}")


show("shared minimizer, coarse grid", QuadGameSpec(minimizers=(0.5, 0.5), step=0.2))
show("shared minimizer, fine grid", QuadGameSpec(minimizers=(0.5, 0.5), step=0.05))
show(
    "different curvatures, same minimizer",
    QuadGameSpec(curvatures=(0.7, 2.3), minimizers=(-0.6, -0.6), step=0.1),
)
show("disagreeing environments", QuadGameSpec(minimizers=(0.0, 1.0), step=0.1))

print("\niterated clamped best responses (continuous strategies):")
for c1, c2 in ((0.3, 0.3), (0.9, -0.9)):
    (w1, w2), interior = bounded_linear_ne(QuadGameSpec(minimizers=(c1, c2)))
    kind = "interior (ensemble = shared minimizer)" if interior else "boundary-absorbed"
    print(f"  c = ({c1:+.1f}, {c2:+.1f}) -> fixed point ({w1:+.2f}, {w2:+.2f}), {kind}")
