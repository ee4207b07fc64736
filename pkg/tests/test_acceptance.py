"""Acceptance criteria 1-7.  Each test prints one PASS/FAIL line."""

import random
import time
from importlib import resources

import pytest

import churn
from oracles import gdh_key, tgdh_root
from rbgka import gdh, tgdh
from rbgka.cli import main
from rbgka.crypto import DEMO_PARAMS as P
from rbgka.region import KG, form_subgroups, kr_id, route_message
from rbgka.sim import (EXCEPTIONS, census, check_against_table, compare, measure_gdh,
                       measure_rbgka, measure_tgdh, predict_baseline, predict_costs,
                       predict_memory, sweep_rows)


@pytest.fixture
def report(capsys, request):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number} {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


def test_criterion_1_worked_examples(report):
    t0 = time.perf_counter()
    s = gdh.subgroup_create("A", 76182, P)
    s, _ = gdh.member_join(s, "B", 43310, 76182)
    k_ab = s.subgroup_key
    s, _ = gdh.member_join(s, "C", 30561, 43310)
    k_abc = s.subgroup_key
    s, _ = gdh.member_join(s, "D", 4242, 30561)
    s, _ = gdh.member_leave(s, "B", 12513)
    k_leave = s.subgroup_key
    s, _ = gdh.controller_leave(s, 54170)
    k_ctrl = s.subgroup_key

    t = tgdh.tree_create("M1", 79342, P)
    t, _ = tgdh.tree_join(t, "M2", 85271, 79342)
    kg2 = t.outer_key
    t, _ = tgdh.tree_join(t, "M3", 69816, 17258)
    kg3 = t.outer_key
    t, _ = tgdh.tree_join(t, "M4", 18155, 61896)
    a, _ = tgdh.tree_leave(t, "M3", 55181)
    b, _ = tgdh.tree_controller_leave(t, 98989)
    elapsed = time.perf_counter() - t0

    # engine value, published numeral, independent oracle
    checks = {
        "KR(A,B)": (k_ab, 16972, gdh_key(5, P.p, [76182, 43310])),
        "KR(+C)": (k_abc, 25404, gdh_key(5, P.p, [76182, 43310, 30561])),
        "KR(B leaves)": (k_leave, 5903, gdh_key(5, P.p, [76182, 43310, 30561, 12513])),
        "KR(D leaves)": (k_ctrl, 27086, gdh_key(5, P.p, [76182, 43310, 54170])),
        "KG(M1,M2)": (kg2, 12430, tgdh_root(5, P.p, (79342, 85271))),
        "KG(+M3)": (kg3, 23793, tgdh_root(5, P.p, ((79342, 17258), 69816))),
        "KG(M3 leaves)": (a.outer_key, 13151, tgdh_root(5, P.p, ((79342, 17258), 55181))),
        "KG(M4 leaves)": (b.outer_key, 23257, tgdh_root(5, P.p, ((79342, 17258), 98989))),
    }
    bad = {k: v for k, v in checks.items() if not v[0] == v[1] == v[2]}
    ok = not bad and elapsed < 1.0
    report(1, ok, f"{len(checks) - len(bad)}/{len(checks)} values equal the pinned numerals "
                  f"and the oracle in {elapsed:.3f}s; the B-leave broadcast fragment '139' is unverifiable "
                  f"(oracle gives A:11296, C:26470)")
    assert ok, bad


def test_criterion_2_cost_formulas(report):
    t0 = time.perf_counter()
    problems = []
    for x in (4, 8, 16, 32, 64, 100):
        for ev in ("member_join", "member_leave"):
            m, h = measure_rbgka(ev, x)
            d = compare(m, predict_costs(ev, x, 2, max(h, 1)))
            if not d.exact:
                problems.append(f"RBGKA {ev} X={x}: {d}")
    used = set()
    for n in range(4, 65):
        for ev in ("join", "leave"):
            m = measure_gdh(ev, n)
            problems += check_against_table("GDH", ev, m, predict_baseline("GDH", ev, n), N=n)
            m, h = measure_tgdh(ev, n)
            p = predict_baseline("TGDH", ev, n, h)
            problems += check_against_table("TGDH", ev, m, p, N=n, H=h)
            used |= {("TGDH", ev, k) for k, v in m.as_row().items() if v != p.as_row()[k]}
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 30
    notes = "; ".join(f"{k[0]} {k[1]} {k[2]} = {EXCEPTIONS[k].formula}" for k in sorted(used))
    report(2, ok, f"member rows exact for X in 4..100, baselines N=4..64 exact except "
                  f"checked exceptions [{notes}], {elapsed:.1f}s")
    assert ok, problems


def test_criterion_3_memory(report):
    problems = []
    for x in range(4, 101):
        y = 1 + x % 4
        topo = form_subgroups([f"n{i:04d}" for i in range(x * y)], x)
        for c in census(topo):
            role = "member" if c.role == "member" else "controller"
            want = predict_memory(role, c.X, c.Y, c.L)
            if (c.keys, c.public) != want:
                problems.append(f"X={x} {c.member}: {(c.keys, c.public)} vs {want}")
    ratio = next(r for r in sweep_rows([1024], 100) if r["protocol"] == "RBGKA")
    exact = predict_memory("member", 100)[1] / (1024 + 1)
    ok = not problems and exact == 101 / 1025 and abs(exact - 0.0985) <= 0.0005
    report(3, ok, f"census equals table for X in 4..100; RBGKA/GDH public-value ratio "
                  f"at N=1024 = {exact:.5f} (CSV {ratio['memory_ratio_vs_gdh']})")
    assert ok, problems[:5]


@pytest.fixture(scope="module")
def churn_runs():
    t0 = time.perf_counter()
    stats = {"events": 0, "exclusion": 0, "exclusion_ok": 0, "failures": []}
    for seed in range(500):
        try:
            churn.run_sequence(seed, stats=stats)
        except AssertionError as exc:
            stats["failures"].append((seed, str(exc)))
    stats["elapsed"] = time.perf_counter() - t0
    return stats


def test_criterion_4_agreement(report, churn_runs):
    s = churn_runs
    ok = not s["failures"] and s["elapsed"] < 120
    report(4, ok, f"500 sequences, {s['events']} events: agreement, freshness and "
                  f"least-rekey held after every event ({len(s['failures'])} failures), "
                  f"{s['elapsed']:.1f}s")
    assert ok, s["failures"][:3]


def test_criterion_5_exclusion(report, churn_runs):
    s = churn_runs
    ok = s["exclusion"] > 0 and s["exclusion_ok"] == s["exclusion"] and not s["failures"]
    report(5, ok, f"{s['exclusion_ok']}/{s['exclusion']} join/leave cases locked out "
                  f"(leaver replay and stale-key decryption, joiner vs pre-join traffic)")
    assert ok


def test_criterion_6_routing(report):
    rng = random.Random(6)
    pairs = intra = inter = 0
    problems = []
    while pairs < 1000:
        topo = churn.random_topology(rng)
        members = topo.members
        for _ in range(20):
            src, dst = rng.choice(members), rng.choice(members)
            s, d = topo.subgroup_of(src), topo.subgroup_of(dst)
            if src == dst or (s.sid == d.sid and s.state.subgroup_key is None):
                continue
            msg = rng.randbytes(rng.randint(0, 64))
            hops, got = route_message(topo, src, dst, msg, rng)
            legs = [h.key_id for h in hops if h.action == "seal"]
            if s.sid == d.sid:
                want = [kr_id(s.sid)]
                intra += 1
            else:
                want = ([kr_id(s.sid)] if src != s.gateway else []) + [KG] + \
                       ([kr_id(d.sid)] if dst != d.gateway else [])
                inter += 1
            if got != msg or legs != want:
                problems.append((src, dst, legs, want))
            pairs += 1
            if pairs == 1000:
                break
    ok = not problems
    report(6, ok, f"{pairs} pairs delivered exactly ({intra} intra as (KR), {inter} inter as "
                  f"(KR, KG, KR), KR legs omitted where the endpoint is the gateway)")
    assert ok, problems[:3]


def test_criterion_7_determinism(report, tmp_path):
    data = resources.files("rbgka.data")
    rng = random.Random(7)
    lines, members = [], []
    for i in range(40):
        if members and rng.random() < 0.3:
            a, b = rng.choice(members), rng.choice(members)
            lines.append(f'{{"kind": "send", "member": "{a}", "to": "{b}", "payload": "m{i}"}}')
        else:
            members.append(f"u{i}")
            lines.append(f'{{"kind": "join", "member": "u{i}"}}')
    rand = tmp_path / "random.jsonl"
    rand.write_text("\n".join(lines) + "\n")
    scenarios = [str(data.joinpath(n)) for n in
                 ("worked_gdh.jsonl", "worked_tgdh_leave.jsonl", "worked_tgdh_controller_leave.jsonl")]
    scenarios.append(str(rand))
    mismatches = 0
    for i, sc in enumerate(scenarios):
        for fmt in ("text", "csv"):
            outs = []
            for run in ("a", "b"):
                d = tmp_path / f"{i}{fmt}{run}"
                assert main(["run", "--scenario", sc, "--seed", "42", "--out", str(d),
                             "--max-subgroup", "8", "--format", fmt]) == 0
                outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
            mismatches += outs[0] != outs[1]
    ok = mismatches == 0
    report(7, ok, f"{len(scenarios)} scenarios x 2 formats: byte-identical outputs "
                  f"across equal-seed runs ({mismatches} mismatches)")
    assert ok
