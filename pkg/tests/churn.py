"""Random valid event sequences over a region topology, plus the checks that
criteria on key agreement and exclusion need after each event."""

from __future__ import annotations

import random

from rbgka.crypto import AuthenticationError, GroupParams, derive_symmetric_key, seal, unseal
from rbgka.region import (KG, Event, RegionTopology, check_invariants, form_subgroups,
                          handle_event, kr_id)

# large modulus so that independent rekeys never collide by chance
BIG = GroupParams(5, 2**127 - 1)
MAX_SUBGROUPS = 8
MAX_MEMBERS = 16


def random_topology(rng: random.Random, params: GroupParams = BIG,
                    max_subgroups: int = MAX_SUBGROUPS, max_members: int = MAX_MEMBERS):
    s = rng.randint(1, max_subgroups)
    n = rng.randint(s, s * max_members)
    size = max(2, -(-n // s))
    names = [f"u{i:03d}" for i in range(n)]
    topo = form_subgroups(names, size, params, rng=rng)
    topo.max_size = max_members
    return topo


def random_event(topo: RegionTopology, rng: random.Random, counter: list[int]) -> Event | None:
    choices = []
    members = topo.members
    can_found = len(topo.subgroups) < MAX_SUBGROUPS
    if len(members) < MAX_SUBGROUPS * MAX_MEMBERS:
        open_ = [s for s, sg in topo.subgroups.items() if len(sg.members) < topo.max_size]
        if open_:
            choices.append(("join", rng.choice(open_)))
        if can_found:
            choices.append(("join", "new"))
    for sg in topo.subgroups.values():
        ctrl = sg.state.controller
        for m in sg.members:
            if m != sg.gateway and m != ctrl:
                choices.append(("leave", m))
        if ctrl != sg.gateway:
            choices.append(("controller_leave", ctrl))
        if len(topo.subgroups) > 1 or len(sg.members) > 1:
            choices.append(("gateway_leave", sg.gateway))
    oc = topo.outer_controller
    if oc is not None and len(topo.subgroup_of(oc).members) > 1:
        choices.append(("outer_controller_leave", oc))
    if not choices:
        return None
    kind, arg = rng.choice(choices)
    if kind == "join":
        counter[0] += 1
        prof = tuple(rng.choice((0, 1, 5)) for _ in range(3))
        return Event("join", f"j{counter[0]:04d}", subgroup=arg, profile=prof)
    return Event(kind, arg)


def mandated(topo: RegionTopology, ev: Event) -> set[str]:
    """Keys the event must rekey, decided from roles before the event."""
    if ev.kind == "join":
        target = None
        if ev.subgroup not in (None, "new"):
            sg = topo.subgroups[int(ev.subgroup)]
            target = sg.sid if len(sg.members) < topo.max_size else None
        want = {kr_id(target)} if target is not None else {kr_id(topo.next_sid), KG}
    elif ev.kind in ("leave", "controller_leave"):
        want = {kr_id(topo.subgroup_of(ev.member).sid)}
    elif ev.kind == "gateway_leave":
        want = {kr_id(topo.subgroup_of(ev.member).sid), KG}
    else:
        want = {KG}
    return want


def _defined(k, before, after):
    return before.get(k) is not None or after.get(k) is not None


def _cannot_open(old_key: int | None, new_key: int | None) -> bool:
    """Post-event traffic under ``new_key`` is unreadable with ``old_key``."""
    if new_key is None:
        return True
    ct = seal(derive_symmetric_key(new_key), b"post-event traffic")
    if old_key is None:
        return True
    try:
        unseal(derive_symmetric_key(old_key), ct)
    except AuthenticationError:
        return True
    return False


def step(topo: RegionTopology, ev: Event, rng: random.Random, stats: dict) -> RegionTopology:
    """Apply ``ev`` and assert agreement, freshness, least-rekey and exclusion."""
    want = mandated(topo, ev)
    before_topo = topo
    new, plan, _ = handle_event(topo, ev, rng)
    check_invariants(new)
    before, after = plan.before, plan.after
    want = {k for k in want if _defined(k, before, after)}
    assert plan.rekeyed == want, (ev, plan.rekeyed, want)
    for k in plan.rekeyed:
        assert before.get(k) != after.get(k), f"{k} unchanged by {ev}"
    for k in set(before) & set(after) - plan.rekeyed:
        assert before[k] == after[k], f"{k} changed by {ev} outside its mandate"
    for sg in new.subgroups.values():
        assert len({sg.state.key_of(m) for m in sg.members}) == 1
    if new.tree is not None:
        assert len({new.tree.key_of(g) for g in new.gateways}) == 1
    stats["events"] += 1

    if ev.kind in ("leave", "controller_leave", "gateway_leave"):
        _check_leaver(before_topo, new, ev, stats)
    elif ev.kind == "outer_controller_leave":
        old_kg = before_topo.tree.views[ev.member].outer_key
        stats["exclusion"] += 1
        stats["exclusion_ok"] += _cannot_open(old_kg, new.keys()[KG])
    elif ev.kind == "join":
        _check_joiner(before_topo, new, ev, stats)
    return new


def _check_leaver(old: RegionTopology, new: RegionTopology, ev: Event, stats) -> None:
    sg = old.subgroup_of(ev.member)
    cached = sg.state.views[ev.member]
    ok = True
    if sg.sid in new.subgroups:
        new_state = new.subgroups[sg.sid].state
        kr = new_state.subgroup_key
        # replay: the leaver's share applied to every value it can observe
        last = new_state.views[new_state.controller].last_broadcast
        if kr is not None and last is not None:
            for v in last.values.values():
                ok &= pow(v, cached.share, old.params.p) != kr
            ok &= ev.member not in last.values
        ok &= _cannot_open(cached.key, kr)
    if ev.kind == "gateway_leave":
        old_kg = old.tree.views[ev.member].outer_key
        ok &= _cannot_open(old_kg, new.keys()[KG])
    stats["exclusion"] += 1
    stats["exclusion_ok"] += ok


def _check_joiner(old: RegionTopology, new: RegionTopology, ev: Event, stats) -> None:
    sg = new.subgroup_of(ev.member)
    ok = True
    old_keys = old.keys()
    pre = [old_keys.get(kr_id(sg.sid))]
    if sg.gateway == ev.member:
        pre.append(old_keys[KG])
    mine = [sg.state.key_of(ev.member)]
    if sg.gateway == ev.member and new.tree is not None:
        mine.append(new.tree.key_of(ev.member))
    for old_key in pre:
        if old_key is None:
            continue
        ct = seal(derive_symmetric_key(old_key), b"pre-join traffic")
        for k in mine:
            if k is None:
                continue
            try:
                unseal(derive_symmetric_key(k), ct)
                ok = False
            except AuthenticationError:
                pass
    stats["exclusion"] += 1
    stats["exclusion_ok"] += ok


def run_sequence(seed: int, max_events: int = 60, stats: dict | None = None) -> dict:
    rng = random.Random(seed)
    stats = stats if stats is not None else {"events": 0, "exclusion": 0, "exclusion_ok": 0}
    topo = random_topology(rng)
    counter = [0]
    for _ in range(rng.randint(1, max_events)):
        ev = random_event(topo, rng, counter)
        if ev is None:
            break
        topo = step(topo, ev, rng, stats)
    return stats
