"""Simulated network used by the protocol engines for cost accounting.

Every modular exponentiation and every message of one membership event goes
through a :class:`SimNetwork`.  Per-node logical clocks count exponentiations;
a message carries its sender's clock and the receiver advances to it, so the
largest clock at which any member finishes its key is the longest dependency
chain of exponentiations in the event.  Rounds are tracked the same way.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .crypto import GroupParams, mod_exp

UNICAST = "unicast"
BROADCAST = "broadcast"


@dataclass(frozen=True)
class Message:
    kind: str  # UNICAST or BROADCAST
    sender: str
    recipients: tuple[str, ...]
    label: str
    payload: Mapping[str, int]
    round: int
    clock: int

    @property
    def units(self) -> int:
        return len(self.payload)


@dataclass(frozen=True)
class CostLedger:
    """Measured cost of one event (key-units, not bytes)."""

    rounds: int = 0
    unicast_units: int = 0
    broadcast_units: int = 0
    serial_exps: int = 0

    def as_row(self) -> dict[str, int]:
        return {
            "rounds": self.rounds,
            "unicast_units": self.unicast_units,
            "broadcast_units": self.broadcast_units,
            "serial_exps": self.serial_exps,
        }


@dataclass
class SimNetwork:
    """FIFO message log plus the counters behind :class:`CostLedger`."""

    params: GroupParams
    messages: list[Message] = field(default_factory=list)
    total_exps: int = 0
    _clock: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    _depth: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    _ready: dict[str, int] = field(default_factory=dict)

    def exp(self, node: str, base: int, e: int) -> int:
        self._clock[node] += 1
        self.total_exps += 1
        return mod_exp(base, e, self.params)

    def send(self, kind: str, sender: str, recipients: Iterable[str], label: str,
             payload: Mapping[str, int]) -> Message:
        msg = Message(kind, sender, tuple(recipients), label, dict(payload),
                      self._depth[sender] + 1, self._clock[sender])
        self.messages.append(msg)
        return msg

    def unicast(self, sender, recipient, label, payload) -> Message:
        return self.send(UNICAST, sender, [recipient], label, payload)

    def broadcast(self, sender, recipients, label, payload) -> Message:
        return self.send(BROADCAST, sender, recipients, label, payload)

    def receive(self, node: str, msg: Message) -> Message:
        if node not in msg.recipients:
            raise ValueError(f"{node} is not a recipient of {msg.label}")
        self._clock[node] = max(self._clock[node], msg.clock)
        self._depth[node] = max(self._depth[node], msg.round)
        return msg

    def key_ready(self, node: str) -> None:
        """Mark that ``node`` now holds the event's new key."""
        self._ready[node] = max(self._ready.get(node, 0), self._clock[node])

    def received_by(self, node: str) -> list[Message]:
        return [m for m in self.messages if node in m.recipients]

    def buckets(self) -> dict[int, list[Message]]:
        out: dict[int, list[Message]] = defaultdict(list)
        for m in self.messages:
            out[m.round].append(m)
        return dict(out)

    def ledger(self) -> CostLedger:
        return CostLedger(
            rounds=max((m.round for m in self.messages), default=0),
            unicast_units=sum(m.units for m in self.messages if m.kind == UNICAST),
            broadcast_units=sum(m.units for m in self.messages if m.kind == BROADCAST),
            serial_exps=max(self._ready.values(), default=0),
        )
