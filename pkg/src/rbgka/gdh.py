"""GDH.2 contributory key agreement inside one subgroup.

Members are kept in join order; the last one is the subgroup controller and
the one before it is the successor if the controller leaves.  Every member
keeps the upflow it received when it joined (one value per earlier member
plus the cardinal value, i.e. the group key before its own contribution).
A controller rekeys by raising that upflow to a fresh share, which is how
it can drop departed members and replace its contribution at any time.

Transitions never mutate their input state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

from .crypto import GroupParams, blind, int_from_bytes, int_to_bytes, mod_exp
from .network import SimNetwork


class GDHError(Exception):
    pass


class DuplicateMemberError(GDHError):
    pass


class UnknownMemberError(GDHError):
    pass


class StaleEpochError(GDHError):
    pass


@dataclass(frozen=True)
class RekeyBroadcast:
    """Intermediate key set with one tagged value per member."""

    epoch: int
    sender: str
    values: dict[str, int]

    def to_bytes(self) -> bytes:
        out = [_pack_str(self.sender), struct.pack(">QI", self.epoch, len(self.values))]
        for tag in sorted(self.values):
            out.append(_pack_str(tag))
            out.append(_pack_bytes(int_to_bytes(self.values[tag])))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> RekeyBroadcast:
        sender, pos = _unpack_str(data, 0)
        epoch, count = struct.unpack_from(">QI", data, pos)
        pos += 12
        values = {}
        for _ in range(count):
            tag, pos = _unpack_str(data, pos)
            raw, pos = _unpack_bytes(data, pos)
            values[tag] = int_from_bytes(raw)
        if pos != len(data):
            raise ValueError("trailing bytes after broadcast")
        return cls(epoch, sender, values)


def _pack_bytes(b: bytes) -> bytes:
    return struct.pack(">H", len(b)) + b


def _pack_str(s: str) -> bytes:
    return _pack_bytes(s.encode())


def _unpack_bytes(data: bytes, pos: int) -> tuple[bytes, int]:
    (n,) = struct.unpack_from(">H", data, pos)
    pos += 2
    if pos + n > len(data):
        raise ValueError("truncated field")
    return data[pos:pos + n], pos + n


def _unpack_str(data: bytes, pos: int) -> tuple[str, int]:
    raw, pos = _unpack_bytes(data, pos)
    return raw.decode(), pos


@dataclass
class MemberView:
    """Everything one member stores about its subgroup."""

    member: str
    share: int
    public: int
    upflow: dict[str, int]  # received at join, one value per earlier member
    upflow_cardinal: int  # group key before this member's contribution
    intermediate: dict[str, int] = field(default_factory=dict)
    key: int | None = None
    epoch: int = 0
    last_broadcast: RekeyBroadcast | None = None

    def stored_keys(self) -> int:
        return 1 + (self.key is not None)

    def stored_public(self) -> int:
        return len(self.intermediate) + 1

    def stored_reserve(self) -> int:
        return len(self.upflow) + 1

    def clone(self) -> MemberView:
        return replace(self, upflow=dict(self.upflow), intermediate=dict(self.intermediate))


@dataclass
class SubgroupState:
    params: GroupParams
    members: list[str]  # join order; doubles as the succession list
    views: dict[str, MemberView]
    epoch: int = 0

    @property
    def controller(self) -> str:
        return self.members[-1]

    @property
    def subgroup_key(self) -> int | None:
        return self.views[self.controller].key

    @property
    def intermediate(self) -> dict[str, int]:
        return dict(self.views[self.controller].intermediate)

    def key_of(self, member: str) -> int | None:
        return self.views[member].key

    def __contains__(self, member: str) -> bool:
        return member in self.views

    def __len__(self) -> int:
        return len(self.members)

    def clone(self) -> SubgroupState:
        return SubgroupState(self.params, list(self.members),
                             {m: v.clone() for m, v in self.views.items()}, self.epoch)


def subgroup_create(founder: str, share: int, params: GroupParams) -> SubgroupState:
    """Single-member subgroup; no key until a second member joins."""
    share = params.share(share)
    view = MemberView(founder, share, blind(share, params), {}, params.g,
                      intermediate={founder: params.g})
    return SubgroupState(params, [founder], {founder: view})


def compute_subgroup_key(view: MemberView, broadcast: RekeyBroadcast,
                         params: GroupParams, net: SimNetwork | None = None) -> int:
    """Key from the value tagged for ``view.member`` raised to its own share."""
    if broadcast.epoch != view.epoch + 1:
        raise StaleEpochError(
            f"{view.member} expects epoch {view.epoch + 1}, got {broadcast.epoch}")
    try:
        value = broadcast.values[view.member]
    except KeyError:
        raise UnknownMemberError(f"broadcast carries no value for {view.member}") from None
    if net is None:
        return mod_exp(value, view.share, params)
    return net.exp(view.member, value, view.share)


def _accept(view: MemberView, broadcast: RekeyBroadcast, params, net) -> None:
    view.key = compute_subgroup_key(view, broadcast, params, net)
    view.intermediate = dict(broadcast.values)
    view.epoch = broadcast.epoch
    view.last_broadcast = broadcast
    if net is not None:
        net.key_ready(view.member)


def member_join(state: SubgroupState, new_member: str, share: int, refresh: int,
                net: SimNetwork | None = None) -> tuple[SubgroupState, SimNetwork]:
    """Add ``new_member``; it becomes the controller.

    The outgoing controller replaces its share with ``refresh`` and unicasts
    the upflow (one value per current member plus the cardinal value); the
    joiner adds its contribution and broadcasts the new intermediate set.
    """
    if new_member in state:
        raise DuplicateMemberError(f"{new_member} already in subgroup")
    params = state.params
    net = net or SimNetwork(params)
    state = state.clone()
    epoch = state.epoch + 1
    old = state.controller
    c = state.views[old]
    c.share = params.share(refresh)

    upflow = {m: net.exp(old, c.upflow[m], c.share) for m in state.members if m != old}
    upflow[old] = c.upflow_cardinal
    cardinal = net.exp(old, c.upflow_cardinal, c.share)
    msg = net.unicast(old, new_member, "gdh-upflow", {**upflow, "*": cardinal})

    share = params.share(share)
    j = MemberView(new_member, share, 0, upflow, cardinal, epoch=epoch)
    net.receive(new_member, msg)
    values = {m: net.exp(new_member, upflow[m], share) for m in state.members}
    values[new_member] = cardinal
    bc = RekeyBroadcast(epoch, new_member, values)
    out = net.broadcast(new_member, list(state.members), "gdh-broadcast", values)
    j.key = net.exp(new_member, cardinal, share)
    j.intermediate = dict(values)
    j.last_broadcast = bc
    net.key_ready(new_member)
    j.public = net.exp(new_member, params.g, share)

    for m in state.members:
        net.receive(m, out)
        _accept(state.views[m], bc, params, net)
    c.public = net.exp(old, params.g, c.share)

    state.members.append(new_member)
    state.views[new_member] = j
    state.epoch = epoch
    return state, net


def _rekey_without(state: SubgroupState, leaver: str, controller: str, refresh: int,
                   net: SimNetwork) -> SubgroupState:
    params = state.params
    state.members.remove(leaver)
    del state.views[leaver]
    epoch = state.epoch + 1
    state.epoch = epoch
    c = state.views[controller]
    if len(state.members) == 1:
        c.key = None
        c.intermediate = {controller: c.upflow_cardinal}
        c.epoch = epoch
        c.last_broadcast = None
        return state

    c.share = params.share(refresh)
    values = {m: net.exp(controller, c.upflow[m], c.share)
              for m in state.members if m != controller}
    values[controller] = c.upflow_cardinal
    bc = RekeyBroadcast(epoch, controller, values)
    others = [m for m in state.members if m != controller]
    out = net.broadcast(controller, others, "gdh-broadcast", values)
    c.key = net.exp(controller, c.upflow_cardinal, c.share)
    c.intermediate = dict(values)
    c.epoch = epoch
    c.last_broadcast = bc
    net.key_ready(controller)
    c.public = net.exp(controller, params.g, c.share)
    for m in others:
        net.receive(m, out)
        _accept(state.views[m], bc, params, net)
    return state


def member_leave(state: SubgroupState, leaver: str, refresh: int,
                 net: SimNetwork | None = None) -> tuple[SubgroupState, SimNetwork]:
    """Remove a non-controller member; the controller refreshes and rebroadcasts."""
    if leaver not in state:
        raise UnknownMemberError(f"{leaver} not in subgroup")
    if leaver == state.controller:
        raise GDHError(f"{leaver} is the controller; use controller_leave")
    net = net or SimNetwork(state.params)
    state = state.clone()
    return _rekey_without(state, leaver, state.controller, refresh, net), net


def controller_leave(state: SubgroupState, refresh: int,
                     net: SimNetwork | None = None) -> tuple[SubgroupState, SimNetwork]:
    """Remove the controller; the previous controller takes over and rekeys."""
    if len(state) < 2:
        raise GDHError("controller_leave needs at least two members")
    net = net or SimNetwork(state.params)
    state = state.clone()
    leaver = state.controller
    successor = state.members[-2]
    return _rekey_without(state, leaver, successor, refresh, net), net
