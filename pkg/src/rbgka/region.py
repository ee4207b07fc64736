"""Two-level region topology: GDH subgroups linked by a TGDH tree of gateways.

Each subgroup agrees on its own key KR; the gateway of every subgroup holds a
leaf of the outer tree whose root yields KG.  ``handle_event`` applies one
membership event to both layers and reports which keys were rekeyed.
Key ids are ``"KR:<subgroup id>"`` and ``"KG"``.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from . import gdh, tgdh
from .crypto import DEMO_PARAMS, GroupParams, derive_symmetric_key, key_digest, seal, unseal
from .network import SimNetwork

MEMBER = "member"
SUBGROUP_CONTROLLER = "subgroup-controller"
GATEWAY = "gateway"
OUTER_CONTROLLER = "outer-controller"

EVENT_KINDS = ("join", "leave", "controller_leave", "gateway_leave",
               "outer_controller_leave", "send")
KG = "KG"


class RegionError(Exception):
    pass


class UnknownMemberError(RegionError):
    pass


class RoleMismatchError(RegionError):
    pass


class StaleKeyError(RegionError):
    """Envelope sealed under an older epoch than the opener holds."""


class InvariantViolation(RegionError):
    def __init__(self, invariant: str, detail: str):
        super().__init__(f"{invariant}: {detail}")
        self.invariant = invariant


def kr_id(sid: int) -> str:
    return f"KR:{sid}"


@dataclass(frozen=True)
class NodeProfile:
    member: str
    processing: float = 0.0
    memory: float = 0.0
    battery: float = 0.0

    def __post_init__(self):
        if min(self.processing, self.memory, self.battery) < 0:
            raise ValueError(f"negative score in profile of {self.member}")

    @property
    def score(self) -> float:
        return self.processing + self.memory + self.battery


@dataclass
class Subgroup:
    sid: int
    state: gdh.SubgroupState
    gateway: str

    @property
    def members(self) -> list[str]:
        return self.state.members

    def clone(self) -> Subgroup:
        return Subgroup(self.sid, self.state.clone(), self.gateway)


@dataclass
class RegionTopology:
    params: GroupParams
    subgroups: dict[int, Subgroup]
    tree: tgdh.KeyTree | None
    profiles: dict[str, NodeProfile] = field(default_factory=dict)
    max_size: int = 100
    next_sid: int = 0

    def clone(self) -> RegionTopology:
        return RegionTopology(self.params, {s: sg.clone() for s, sg in self.subgroups.items()},
                              self.tree.clone() if self.tree is not None else None,
                              dict(self.profiles), self.max_size, self.next_sid)

    def subgroup_of(self, member: str) -> Subgroup:
        for sg in self.subgroups.values():
            if member in sg.state:
                return sg
        raise UnknownMemberError(f"{member} is not a member")

    @property
    def members(self) -> list[str]:
        return [m for sg in self.subgroups.values() for m in sg.members]

    @property
    def gateways(self) -> list[str]:
        return [sg.gateway for sg in self.subgroups.values()]

    @property
    def outer_controller(self) -> str | None:
        return self.tree.controller if self.tree is not None else None

    def roles_of(self, member: str) -> frozenset[str]:
        sg = self.subgroup_of(member)
        roles = {MEMBER}
        if sg.state.controller == member:
            roles.add(SUBGROUP_CONTROLLER)
        if sg.gateway == member:
            roles.add(GATEWAY)
        if self.outer_controller == member:
            roles.add(OUTER_CONTROLLER)
        return frozenset(roles)

    @property
    def roles(self) -> dict[str, str]:
        """Most senior role of every member."""
        order = (OUTER_CONTROLLER, GATEWAY, SUBGROUP_CONTROLLER, MEMBER)
        out = {}
        for m in self.members:
            held = self.roles_of(m)
            out[m] = next(r for r in order if r in held)
        return out

    def keys(self) -> dict[str, int | None]:
        """Current value of every key id (controller's view)."""
        out: dict[str, int | None] = {kr_id(s): sg.state.subgroup_key
                                      for s, sg in self.subgroups.items()}
        out[KG] = self.tree.outer_key if self.tree is not None else None
        return out

    def key_epoch(self, key_id: str) -> int:
        if key_id == KG:
            return self.tree.epoch if self.tree is not None else 0
        return self.subgroups[int(key_id.split(":")[1])].state.epoch

    def held_key(self, member: str, key_id: str) -> tuple[int | None, int]:
        """``(key, epoch)`` as stored by ``member`` itself."""
        if key_id == KG:
            if self.tree is None or member not in self.tree:
                raise RegionError(f"{member} holds no outer key")
            view = self.tree.views[member]
            return view.outer_key, view.epoch
        sg = self.subgroups[int(key_id.split(":")[1])]
        if member not in sg.state:
            raise RegionError(f"{member} holds no {key_id}")
        view = sg.state.views[member]
        return view.key, view.epoch


@dataclass(frozen=True)
class Event:
    kind: str
    member: str
    subgroup: int | str | None = None
    to: str | None = None
    payload: str | None = None
    share: int | None = None
    refresh: int | None = None
    tree_share: int | None = None
    tree_refresh: int | None = None
    profile: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")


@dataclass(frozen=True)
class RekeyPlan:
    """Key ids rekeyed by one event (only ids defined before or after it)."""

    kind: str
    member: str
    rekeyed: frozenset[str]
    before: dict[str, int | None]
    after: dict[str, int | None]


def select_gateway(members: list[str], profiles: dict[str, NodeProfile]) -> str:
    """Highest total score; ties go to the smallest member id."""
    if not members:
        raise RegionError("cannot select a gateway from an empty subgroup")

    def score(m):
        p = profiles.get(m)
        return p.score if p is not None else 0.0

    return min(members, key=lambda m: (-score(m), m))


def _draw(rng: random.Random, params: GroupParams) -> int:
    return rng.randrange(2, params.p - 1)


def _pick(value: int | None, rng: random.Random, params: GroupParams) -> int:
    return value if value is not None else _draw(rng, params)


def _build_subgroup(members: list[str], params: GroupParams, rng: random.Random,
                    net: SimNetwork) -> gdh.SubgroupState:
    state = gdh.subgroup_create(members[0], _draw(rng, params), params)
    for m in members[1:]:
        state, _ = gdh.member_join(state, m, _draw(rng, params), _draw(rng, params), net)
    return state


def form_subgroups(members: list[str], max_size: int = 100,
                   params: GroupParams | None = None,
                   profiles: dict[str, NodeProfile] | None = None,
                   rng: random.Random | None = None) -> RegionTopology:
    """Split ``members`` into ``ceil(N / max_size)`` near-equal subgroups in
    order, agree on every KR, pick gateways and build the outer tree."""
    if not members:
        raise RegionError("empty member list")
    if max_size < 2:
        raise ValueError("max subgroup size must be >= 2")
    if len(set(members)) != len(members):
        raise RegionError("duplicate member ids")
    params = params or DEMO_PARAMS
    profiles = dict(profiles or {})
    rng = rng or random.Random(0)
    net = SimNetwork(params)

    n = len(members)
    s = math.ceil(n / max_size)
    base, extra = divmod(n, s)
    topo = RegionTopology(params, {}, None, profiles, max_size)
    start = 0
    for sid in range(s):
        size = base + (sid < extra)
        chunk = members[start:start + size]
        start += size
        state = _build_subgroup(chunk, params, rng, net)
        gw = select_gateway(chunk, profiles)
        topo.subgroups[sid] = Subgroup(sid, state, gw)
        if topo.tree is None:
            topo.tree = tgdh.tree_create(gw, _draw(rng, params), params)
        else:
            topo.tree, _ = tgdh.tree_join(topo.tree, gw, _draw(rng, params),
                                          _draw(rng, params), net)
    topo.next_sid = s
    return topo


def _join(topo: RegionTopology, ev: Event, rng, net) -> set[str]:
    params = topo.params
    if any(ev.member in sg.state for sg in topo.subgroups.values()):
        raise RegionError(f"{ev.member} is already a member")
    if ev.profile is not None:
        topo.profiles[ev.member] = NodeProfile(ev.member, *ev.profile)

    target = None
    if ev.subgroup is None:
        open_ = [sg for sg in topo.subgroups.values() if len(sg.members) < topo.max_size]
        if open_:
            target = min(open_, key=lambda sg: (len(sg.members), sg.sid))
    elif ev.subgroup != "new":
        try:
            target = topo.subgroups[int(ev.subgroup)]
        except (KeyError, ValueError):
            raise RegionError(f"no subgroup {ev.subgroup!r}") from None
        if len(target.members) >= topo.max_size:
            target = None  # overflow: the joiner founds a new subgroup

    if target is not None:
        target.state, _ = gdh.member_join(target.state, ev.member, _pick(ev.share, rng, params),
                                          _pick(ev.refresh, rng, params), net)
        return {kr_id(target.sid)}

    sid = topo.next_sid
    topo.next_sid += 1
    state = gdh.subgroup_create(ev.member, _pick(ev.share, rng, params), params)
    topo.subgroups[sid] = Subgroup(sid, state, ev.member)
    secret = _pick(ev.tree_share, rng, params)
    if topo.tree is None:
        topo.tree = tgdh.tree_create(ev.member, secret, params)
    else:
        topo.tree, _ = tgdh.tree_join(topo.tree, ev.member, secret,
                                      _pick(ev.tree_refresh, rng, params), net)
    return {kr_id(sid), KG}


def _leave(topo: RegionTopology, ev: Event, rng, net) -> set[str]:
    sg = topo.subgroup_of(ev.member)
    roles = topo.roles_of(ev.member)
    if roles != {MEMBER}:
        raise RoleMismatchError(f"leave names {ev.member}, which holds roles {sorted(roles)}")
    sg.state, _ = gdh.member_leave(sg.state, ev.member, _pick(ev.refresh, rng, topo.params), net)
    return {kr_id(sg.sid)}


def _controller_leave(topo: RegionTopology, ev: Event, rng, net) -> set[str]:
    sg = topo.subgroup_of(ev.member)
    if sg.state.controller != ev.member:
        raise RoleMismatchError(f"{ev.member} is not a subgroup controller")
    if sg.gateway == ev.member:
        raise RoleMismatchError(f"{ev.member} is also a gateway; use gateway_leave")
    sg.state, _ = gdh.controller_leave(sg.state, _pick(ev.refresh, rng, topo.params), net)
    return {kr_id(sg.sid)}


def _tree_remove(topo: RegionTopology, gateway: str, refresh: int, net) -> None:
    if len(topo.tree) == 1:
        topo.tree = None
    elif topo.tree.controller == gateway:
        topo.tree, _ = tgdh.tree_controller_leave(topo.tree, refresh, net)
    else:
        topo.tree, _ = tgdh.tree_leave(topo.tree, gateway, refresh, net)


def _tree_add(topo: RegionTopology, gateway: str, secret: int, refresh: int, net) -> None:
    if topo.tree is None:
        topo.tree = tgdh.tree_create(gateway, secret, topo.params)
    else:
        topo.tree, _ = tgdh.tree_join(topo.tree, gateway, secret, refresh, net)


def _gateway_leave(topo: RegionTopology, ev: Event, rng, net) -> set[str]:
    params = topo.params
    sg = topo.subgroup_of(ev.member)
    if sg.gateway != ev.member:
        raise RoleMismatchError(f"{ev.member} is not a gateway")
    if len(sg.members) == 1:
        del topo.subgroups[sg.sid]
    elif sg.state.controller == ev.member:
        sg.state, _ = gdh.controller_leave(sg.state, _pick(ev.refresh, rng, params), net)
    else:
        sg.state, _ = gdh.member_leave(sg.state, ev.member, _pick(ev.refresh, rng, params), net)
    _tree_remove(topo, ev.member, _pick(ev.tree_refresh, rng, params), net)
    if sg.sid in topo.subgroups:
        sg.gateway = select_gateway(sg.members, topo.profiles)
        _tree_add(topo, sg.gateway, _pick(ev.tree_share, rng, params), _draw(rng, params), net)
    topo.profiles.pop(ev.member, None)
    return {kr_id(sg.sid), KG}


def _outer_controller_leave(topo: RegionTopology, ev: Event, rng, net) -> set[str]:
    """The outer controller withdraws from the outer group but stays in its
    subgroup; another member of that subgroup takes over as gateway."""
    params = topo.params
    sg = topo.subgroup_of(ev.member)
    if topo.outer_controller != ev.member:
        raise RoleMismatchError(f"{ev.member} is not the outer controller")
    others = [m for m in sg.members if m != ev.member]
    if not others:
        raise RoleMismatchError(
            f"{ev.member} is alone in its subgroup; no member can take over as gateway")
    _tree_remove(topo, ev.member, _pick(ev.tree_refresh, rng, params), net)
    sg.gateway = select_gateway(others, topo.profiles)
    _tree_add(topo, sg.gateway, _pick(ev.tree_share, rng, params), _draw(rng, params), net)
    return {KG}


_HANDLERS = {
    "join": _join,
    "leave": _leave,
    "controller_leave": _controller_leave,
    "gateway_leave": _gateway_leave,
    "outer_controller_leave": _outer_controller_leave,
}


def handle_event(topo: RegionTopology, ev: Event, rng: random.Random | None = None,
                 net: SimNetwork | None = None
                 ) -> tuple[RegionTopology, RekeyPlan, SimNetwork]:
    """Apply a membership event; the input topology is left untouched."""
    if ev.kind not in _HANDLERS:
        raise RegionError(f"{ev.kind} is not a membership event")
    rng = rng or random.Random(0)
    net = net or SimNetwork(topo.params)
    before = topo.keys()
    topo = topo.clone()
    dispatched = _HANDLERS[ev.kind](topo, ev, rng, net)
    after = topo.keys()
    # ids that never held a key (single-member subgroups, one-leaf trees) are dropped
    rekeyed = frozenset(k for k in dispatched
                        if before.get(k) is not None or after.get(k) is not None)
    return topo, RekeyPlan(ev.kind, ev.member, rekeyed, before, after), net


def check_invariants(topo: RegionTopology) -> None:
    seen: dict[str, int] = {}
    for sid, sg in topo.subgroups.items():
        if not sg.members:
            raise InvariantViolation("partition", f"subgroup {sid} is empty")
        for m in sg.members:
            if m in seen:
                raise InvariantViolation("partition", f"{m} is in subgroups {seen[m]} and {sid}")
            seen[m] = sid
        if sg.gateway not in sg.state:
            raise InvariantViolation("gateway", f"gateway {sg.gateway} not in subgroup {sid}")
        if len(sg.members) > topo.max_size:
            raise InvariantViolation("subgroup size",
                                     f"subgroup {sid} has {len(sg.members)} > {topo.max_size}")
        keys = {sg.state.key_of(m) for m in sg.members}
        if len(keys) != 1:
            raise InvariantViolation("KR agreement", f"subgroup {sid} holds {len(keys)} keys")
    leaves = set(topo.tree.views) if topo.tree is not None else set()
    if leaves != set(topo.gateways):
        raise InvariantViolation("gateways", "tree leaves differ from subgroup gateways")
    if topo.tree is not None:
        if set(topo.tree.leaves) != leaves:
            raise InvariantViolation("gateways", "tree shape and views disagree")
        kgs = {topo.tree.key_of(m) for m in leaves}
        if len(kgs) != 1:
            raise InvariantViolation("KG agreement", f"gateways hold {len(kgs)} outer keys")


@dataclass(frozen=True)
class Envelope:
    source: str
    destination: str
    key_id: str
    epoch: int
    ciphertext: bytes


@dataclass(frozen=True)
class Hop:
    actor: str
    action: str  # "seal" or "open"
    key_id: str
    recipients: tuple[str, ...] = ()


def seal_for(topo: RegionTopology, actor: str, key_id: str, destination: str,
             plaintext: bytes, source: str, nonce: bytes | None = None) -> Envelope:
    key, epoch = topo.held_key(actor, key_id)
    if key is None:
        raise RegionError(f"{key_id} is not established")
    return Envelope(source, destination, key_id, epoch,
                    seal(derive_symmetric_key(key), plaintext, nonce))


def open_envelope(topo: RegionTopology, actor: str, env: Envelope) -> bytes:
    key, epoch = topo.held_key(actor, env.key_id)
    if env.epoch != epoch:
        raise StaleKeyError(
            f"{env.key_id} envelope from epoch {env.epoch}, {actor} holds epoch {epoch}")
    if key is None:
        raise RegionError(f"{env.key_id} is not established")
    return unseal(derive_symmetric_key(key), env.ciphertext)


def route_message(topo: RegionTopology, source: str, destination: str, plaintext: bytes,
                  rng: random.Random | None = None) -> tuple[list[Hop], bytes]:
    """Deliver ``plaintext`` hop by hop; returns the hop trace and what the
    destination recovered.

    Inside a subgroup the source seals under KR.  Across subgroups the chain is
    KR to the source gateway, KG between gateways, then the destination KR.
    A KR leg is skipped when its endpoint is the gateway itself.
    """
    rng = rng or random.Random(0)
    src = topo.subgroup_of(source)
    try:
        dst = topo.subgroup_of(destination)
    except UnknownMemberError:
        raise UnknownMemberError(f"destination {destination} is not a member") from None

    def nonce():
        return rng.randbytes(12)

    hops: list[Hop] = []

    def leg(sender, receiver, key_id, data, recipients):
        env = seal_for(topo, sender, key_id, destination, data, source, nonce())
        hops.append(Hop(sender, "seal", key_id, tuple(recipients)))
        out = open_envelope(topo, receiver, env)
        hops.append(Hop(receiver, "open", key_id))
        return out

    data = plaintext
    if src.sid == dst.sid:
        if source != destination:
            recips = [m for m in src.members if m != source]
            data = leg(source, destination, kr_id(src.sid), data, recips)
        return hops, data

    if source != src.gateway:
        data = leg(source, src.gateway, kr_id(src.sid), data,
                   [m for m in src.members if m != source])
    data = leg(src.gateway, dst.gateway, KG, data,
               [g for g in topo.gateways if g != src.gateway])
    if destination != dst.gateway:
        data = leg(dst.gateway, destination, kr_id(dst.sid), data,
                   [m for m in dst.members if m != dst.gateway])
    return hops, data


def key_digests(topo: RegionTopology) -> dict[str, str | None]:
    return {k: key_digest(v) for k, v in sorted(topo.keys().items())}
