"""Independent reference computations used to freeze expected values in tests.

Everything here works by summing over explicit latent paths, so it shares no
code with the forward recursions in the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def path_probability(pomdp, obs, acts) -> float:
    """P(o_1..o_H | do(a)) as a sum over every latent state sequence."""
    H, S = len(obs), pomdp.S
    total = []
    for states in itertools.product(range(S), repeat=H):
        p = pomdp.initial[states[0]]
        for h in range(H):
            if p == 0:
                break
            p *= pomdp.emissions[h, states[h], obs[h]]
            if h < H - 1:
                p *= pomdp.transitions[h, states[h], acts[h], states[h + 1]]
        total.append(p)
    return math.fsum(total)


def trajectory_law(pomdp, policy) -> dict[tuple, float]:
    """Law of (obs, acts) by brute force over every observation and action sequence."""
    H, O, A = pomdp.H, pomdp.O, pomdp.A
    out = {}
    for obs in itertools.product(range(O), repeat=H):
        for acts in itertools.product(range(A), repeat=H):
            pa = 1.0
            for h in range(H):
                pa *= policy.probs(h, obs[: h + 1], acts[:h])[acts[h]]
                if pa == 0:
                    break
            if pa == 0:
                continue
            p = pa * path_probability(pomdp, obs, acts)
            if p > 0:
                out[(obs, acts)] = p
    return out


def value(pomdp, policy) -> float:
    law = trajectory_law(pomdp, policy)
    return math.fsum(p * sum(pomdp.rewards[h, o[h], a[h]] for h in range(pomdp.H)) for (o, a), p in law.items())


def optimal_value(pomdp) -> float:
    """Max over deterministic history policies via unnormalized forward vectors."""
    H, O, A = pomdp.H, pomdp.O, pomdp.A

    def rec(h, alpha):
        tot = 0.0
        for o in range(O):
            ao = alpha * pomdp.emissions[h][:, o]
            mass = ao.sum()
            if mass == 0:
                continue
            best = -np.inf
            for a in range(A):
                q = mass * pomdp.rewards[h, o, a]
                if h < H - 1:
                    q += rec(h + 1, ao @ pomdp.transitions[h][:, a, :])
                best = max(best, q)
            tot += best
        return tot

    return rec(0, np.asarray(pomdp.initial, dtype=float))


def divergences(p, q) -> tuple[float, float, float, float]:
    """(TV, squared Hellinger without 1/2, KL, chi-square) by plain loops."""
    tv = h2 = kl = chi = 0.0
    for a, b in zip(p, q):
        tv += abs(a - b) / 2
        h2 += (math.sqrt(a) - math.sqrt(b)) ** 2
        if a > 0:
            kl = math.inf if b == 0 else kl + a * math.log(a / b)
        if b > 0:
            chi += (a - b) ** 2 / b
        elif a > 0:
            chi = math.inf
    return tv, h2, kl, chi


def collision_count(samples) -> int:
    c = 0
    for i in range(len(samples)):
        for j in range(i + 1, len(samples)):
            c += samples[i] == samples[j]
    return c


def open_loop_law(pomdp, acts) -> dict[tuple, float]:
    """Law of o_1..o_H under a fixed action sequence, by depth-first search over latent paths."""
    H = pomdp.H
    out: dict[tuple, list] = {}

    def rec(h, s, obs, p):
        for o in range(pomdp.O):
            q = p * pomdp.emissions[h, s, o]
            if q == 0:
                continue
            if h == H - 1:
                out.setdefault(obs + (o,), []).append(q)
                continue
            for s2 in range(pomdp.S):
                r = q * pomdp.transitions[h, s, acts[h], s2]
                if r > 0:
                    rec(h + 1, s2, obs + (o,), r)

    for s in range(pomdp.S):
        if pomdp.initial[s] > 0:
            rec(0, s, (), pomdp.initial[s])
    return {k: math.fsum(v) for k, v in out.items()}
