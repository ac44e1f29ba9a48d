#!/usr/bin/env python3
"""Regenerate loss_oracle.json: hand-sized contrastive-loss instances with
values evaluated directly from the loss definitions in 50-digit mpmath.

Inputs are stored as Python float reprs (strings) so Rust parses the exact
same doubles; every expected value is computed from those exact doubles.

    python3 gen_loss_oracle.py > loss_oracle.json
"""
import json
import random

from mpmath import mp, mpf, exp, log, sqrt, diff

mp.dps = 50


def cos(a, b, normalize):
    d = sum(mpf(x) * mpf(y) for x, y in zip(a, b))
    if not normalize:
        return d
    na = sqrt(sum(mpf(x) ** 2 for x in a))
    nb = sqrt(sum(mpf(x) ** 2 for x in b))
    return d / (na * nb)


def row_loss(anchor, cands, keep, p, tau, normalize):
    # -log( e^{s_p} / (e^{s_p} + sum_{k != p, kept} e^{s_k}) ), terms excluded explicitly
    s = [cos(anchor, c, normalize) / tau for c in cands]
    num = exp(s[p])
    den = num + sum(exp(s[k]) for k in range(len(cands)) if k != p and keep[k])
    return -log(num / den)


def infonce(q, grid, pos, tau, normalize, mask=None):
    n = len(q)
    total = mpf(0)
    for r in range(n):
        keep = mask[r] if mask is not None else [True] * len(grid[r])
        total += row_loss(q[r], grid[r], keep, pos[r], tau, normalize)
    return total / n


def bidirectional(q, c, tau, normalize):
    # 1/2 [ -1/N sum_n log e^{cos(q_n,c_n)/t} / sum_j e^{cos(q_n,c_j)/t}
    #       -1/N sum_n log e^{cos(c_n,q_n)/t} / sum_j e^{cos(c_n,q_j)/t} ]
    n = len(q)
    a = mpf(0)
    b = mpf(0)
    for i in range(n):
        a += -log(exp(cos(q[i], c[i], normalize) / tau)
                  / sum(exp(cos(q[i], c[j], normalize) / tau) for j in range(n)))
        b += -log(exp(cos(c[i], q[i], normalize) / tau)
                  / sum(exp(cos(c[i], q[j], normalize) / tau) for j in range(n)))
    return (a / n + b / n) / 2


def vec(rng, d):
    while True:
        v = [rng.randint(-40, 40) / 32.0 for _ in range(d)]
        if any(x != 0.0 for x in v):
            return v


def s(v):
    return [repr(float(x)) for x in v]


def grid_case(name, kind, q, grid, pos, tau, normalize, mask=None, grads=False):
    tau_m = mpf(tau)
    value = infonce(q, grid, pos, tau_m, normalize, mask)
    case = {
        "name": name,
        "kind": kind,
        "tau": repr(tau),
        "normalize": normalize,
        "queries": [s(v) for v in q],
        "grid": [[s(v) for v in row] for row in grid],
        "positive_columns": pos,
        "mask": mask,
        "expected": mp.nstr(value, 40),
    }
    if grads:
        def f_query(r, i):
            def f(x):
                qq = [list(v) for v in q]
                qq[r][i] = x
                return infonce(qq, grid, pos, tau_m, normalize, mask)
            return diff(f, mpf(q[r][i]))

        def f_cand(r, k, i):
            def f(x):
                gg = [[list(v) for v in row] for row in grid]
                gg[r][k][i] = x
                return infonce(q, gg, pos, tau_m, normalize, mask)
            return diff(f, mpf(grid[r][k][i]))

        case["grad_queries"] = [[mp.nstr(f_query(r, i), 30) for i in range(len(q[r]))]
                                for r in range(len(q))]
        case["grad_candidates"] = [[[mp.nstr(f_cand(r, k, i), 30) for i in range(len(grid[r][k]))]
                                    for k in range(len(grid[r]))] for r in range(len(grid))]
    return case


def pair_case(name, q, c, tau, normalize):
    value = bidirectional(q, c, mpf(tau), normalize)
    return {
        "name": name,
        "kind": "bidirectional",
        "tau": repr(tau),
        "normalize": normalize,
        "queries": [s(v) for v in q],
        "positives": [s(v) for v in c],
        "expected": mp.nstr(value, 40),
    }


def main():
    rng = random.Random(20240611)
    cases = []

    cases.append(grid_case("infonce_unit_example", "infonce",
                           [[1.0, 0.0]], [[[0.6, 0.8], [0.0, 1.0]]], [0], 0.5, True))

    mixed_q = [[1.0, 0.25, -0.5], [-0.75, 0.5, 1.0]]
    mixed_grid = [[[0.875, 0.5, -0.25], [1.0, 0.25, -0.5], [0.875, 0.375, -0.625]],
                  [[-0.5, 0.25, 1.25], [-0.75, 0.625, 0.875], [0.0, 0.75, 0.375]]]
    cases.append(grid_case("mamcl_2x3_mixed", "mamcl", mixed_q, mixed_grid, [0, 0], 0.03, True,
                           mask=[[True, False, True], [True, True, False]], grads=True))
    cases.append(grid_case("infonce_2x3_grads", "infonce", mixed_q, mixed_grid, [0, 2], 0.5, True,
                           grads=True))

    unit = []
    for _ in range(6):
        v = [rng.gauss(0, 1) for _ in range(4)]
        nrm = sum(x * x for x in v) ** 0.5
        unit.append([x / nrm for x in v])
    cases.append(pair_case("bidirectional_n3_unit", unit[:3], unit[3:], 0.03, True))

    taus = [0.03, 0.1, 0.5, 1.0]
    for i in range(8):
        n, k, d = rng.randint(1, 3), rng.randint(0, 3), rng.randint(2, 4)
        q = [vec(rng, d) for _ in range(n)]
        grid = [[vec(rng, d) for _ in range(k + 1)] for _ in range(n)]
        pos = [rng.randint(0, k) for _ in range(n)]
        cases.append(grid_case(f"infonce_random_{i}", "infonce", q, grid, pos,
                               taus[i % 4], i != 5))
    for i in range(8):
        n, k, d = rng.randint(1, 3), rng.randint(1, 3), rng.randint(2, 4)
        q = [vec(rng, d) for _ in range(n)]
        grid = [[vec(rng, d) for _ in range(k + 1)] for _ in range(n)]
        pos = [rng.randint(0, k) for _ in range(n)]
        mask = [[c == pos[r] or rng.random() < 0.5 for c in range(k + 1)] for r in range(n)]
        cases.append(grid_case(f"mamcl_random_{i}", "mamcl", q, grid, pos,
                               taus[(i + 1) % 4], True, mask=mask))
    for i in range(6):
        n, d = rng.randint(1, 3), rng.randint(2, 4)
        q = [vec(rng, d) for _ in range(n)]
        c = [vec(rng, d) for _ in range(n)]
        cases.append(pair_case(f"bidirectional_random_{i}", q, c, taus[(i + 2) % 4], True))

    print(json.dumps({"cases": cases}, indent=1))


if __name__ == "__main__":
    main()
