"""Independent reference computations used by the tests.

These work on frozensets of 1-based rule numbers and never touch the
bitmask helpers of the package.
"""

import itertools
import math


def subsets(n):
    rules = range(1, n + 1)
    for r in range(n + 1):
        for c in itertools.combinations(rules, r):
            yield frozenset(c)


def mask_of(s):
    return sum(1 << (i - 1) for i in s)


def brute_ri(mse, n, i):
    """mse: dict frozenset -> value."""
    vals = [math.log10(mse[s - {i}] / mse[s]) for s in subsets(n) if i in s]
    return sum(vals) / len(vals)


def brute_fi(mse, n, i):
    full = frozenset(range(1, n + 1))
    return math.log10(mse[full - {i}] / mse[full])


def brute_curve(mse, n, i, r):
    vals = [math.log10(mse[s - {i}] / mse[s]) for s in subsets(n) if i in s and len(s) == r + 1]
    return sum(vals) / len(vals)


def permutation_shapley(mse, n, i):
    """Average marginal of rule i when it joins after its predecessors, over all n! orders."""
    total, count = 0.0, 0
    for order in itertools.permutations(range(1, n + 1)):
        before = frozenset(order[: order.index(i)])
        total += math.log10(mse[before] / mse[before | {i}])
        count += 1
    return total / count
