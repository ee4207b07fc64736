"""TGDH binary key tree over the gateway members.

Node ``<l, v>`` has children ``<l+1, 2v>`` and ``<l+1, 2v+1>``.  An internal
node's secret is ``BK(sibling) ** K(own child) mod p`` from either side and
its blinded key is ``g ** K``.  The root secret is the outer group key.

A joiner is inserted as the right child of a new root whose left child is
the previous tree, and becomes the outer controller.  Every internal node
therefore has a leaf as its right child and the controller always sits at
depth one; coordinates are recomputed top-down after each change.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterator

from .crypto import GroupParams, blind, int_from_bytes, int_to_bytes, mod_exp
from .network import SimNetwork

Coord = tuple[int, int]
ROOT: Coord = (0, 0)


class TGDHError(Exception):
    pass


class DuplicateGatewayError(TGDHError):
    pass


class UnknownGatewayError(TGDHError):
    pass


class MissingBlindedKeyError(TGDHError):
    pass


class StaleTreeError(TGDHError):
    pass


@dataclass
class TreeNode:
    owner: str | None = None
    left: TreeNode | None = None
    right: TreeNode | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def clone(self) -> TreeNode:
        if self.is_leaf:
            return TreeNode(owner=self.owner)
        return TreeNode(self.owner, self.left.clone(), self.right.clone())


def parent(c: Coord) -> Coord:
    return (c[0] - 1, c[1] // 2)


def sibling(c: Coord) -> Coord:
    return (c[0], c[1] ^ 1)


def walk(node: TreeNode, coord: Coord = ROOT) -> Iterator[tuple[Coord, TreeNode]]:
    """Preorder traversal yielding ``(coord, node)``."""
    yield coord, node
    if not node.is_leaf:
        l, v = coord
        yield from walk(node.left, (l + 1, 2 * v))
        yield from walk(node.right, (l + 1, 2 * v + 1))


def leaf_coords(node: TreeNode | None) -> dict[str, Coord]:
    if node is None:
        return {}
    return {n.owner: c for c, n in walk(node) if n.is_leaf}


def node_at(root: TreeNode, coord: Coord) -> TreeNode:
    node = root
    l, v = coord
    for depth in range(l - 1, -1, -1):
        node = node.right if (v >> depth) & 1 else node.left
    return node


def rightmost_leaf(node: TreeNode) -> str:
    while not node.is_leaf:
        node = node.right
    return node.owner


def key_path(c: Coord) -> list[Coord]:
    """Coordinates from ``c`` up to and including the root."""
    path = [c]
    while path[-1] != ROOT:
        path.append(parent(path[-1]))
    return path


def height(node: TreeNode | None) -> int:
    if node is None or node.is_leaf:
        return 0
    return 1 + max(height(node.left), height(node.right))


@dataclass(frozen=True)
class TreeBroadcast:
    """Preorder list of ``(coord, blinded key, leaf owner)`` records."""

    epoch: int
    sender: str
    records: tuple[tuple[Coord, int, str | None], ...]

    @property
    def blinded(self) -> dict[Coord, int]:
        return {c: bk for c, bk, _ in self.records}

    @property
    def leaves(self) -> dict[str, Coord]:
        return {o: c for c, _, o in self.records if o is not None}

    def to_bytes(self) -> bytes:
        s = self.sender.encode()
        out = [struct.pack(">H", len(s)), s, struct.pack(">QI", self.epoch, len(self.records))]
        for (l, v), bk, owner in self.records:
            vb, bkb = int_to_bytes(v), int_to_bytes(bk)
            ob = b"" if owner is None else owner.encode()
            out.append(struct.pack(">I", l))
            out.append(struct.pack(">H", len(vb)) + vb)
            out.append(struct.pack(">H", len(bkb)) + bkb)
            out.append(struct.pack(">bH", owner is not None, len(ob)) + ob)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> TreeBroadcast:
        def field_(pos):
            (n,) = struct.unpack_from(">H", data, pos)
            if pos + 2 + n > len(data):
                raise ValueError("truncated field")
            return data[pos + 2:pos + 2 + n], pos + 2 + n

        sender, pos = field_(0)
        epoch, count = struct.unpack_from(">QI", data, pos)
        pos += 12
        records = []
        for _ in range(count):
            (l,) = struct.unpack_from(">I", data, pos)
            vb, pos = field_(pos + 4)
            bkb, pos = field_(pos)
            (has_owner,) = struct.unpack_from(">b", data, pos)
            ob, pos = field_(pos + 1)
            v = int_from_bytes(vb) if vb else 0
            records.append(((l, v), int_from_bytes(bkb), ob.decode() if has_owner else None))
        if pos != len(data):
            raise ValueError("trailing bytes after tree broadcast")
        return cls(epoch, sender.decode(), tuple(records))


@dataclass
class TreeView:
    """What one gateway stores: its key-path secrets and the public tree."""

    member: str
    secret: int
    path: list[int] = field(default_factory=list)  # leaf secret ... root secret
    blinded: dict[Coord, int] = field(default_factory=dict)
    epoch: int = 0

    @property
    def outer_key(self) -> int | None:
        return self.path[-1] if len(self.path) > 1 else None

    def stored_keys(self) -> int:
        return len(self.path)

    def stored_public(self) -> int:
        return len(self.blinded)

    def clone(self) -> TreeView:
        return replace(self, path=list(self.path), blinded=dict(self.blinded))


@dataclass
class KeyTree:
    params: GroupParams
    root: TreeNode | None
    views: dict[str, TreeView]
    controller: str | None
    epoch: int = 0

    @property
    def leaves(self) -> dict[str, Coord]:
        return leaf_coords(self.root)

    @property
    def outer_key(self) -> int | None:
        if self.controller is None:
            return None
        return self.views[self.controller].outer_key

    @property
    def height(self) -> int:
        return height(self.root)

    def key_of(self, member: str) -> int | None:
        return self.views[member].outer_key

    def __contains__(self, member: str) -> bool:
        return member in self.views

    def __len__(self) -> int:
        return len(self.views)

    def clone(self) -> KeyTree:
        return KeyTree(self.params, self.root.clone() if self.root is not None else None,
                       {m: v.clone() for m, v in self.views.items()},
                       self.controller, self.epoch)

    def blinded_keys(self) -> dict[Coord, int]:
        """Public blinded key of every node, recomputed from member secrets.

        Observer-only helper for tests and diagnostics; it reads each leaf
        owner's key-path secrets, which no single member could do.
        """
        out: dict[Coord, int] = {}
        for member, c in self.leaves.items():
            for coord, k in zip(key_path(c), self.views[member].path):
                out[coord] = blind(k, self.params)
        return out


def tree_compute_parent(sibling_blinded: int | None, own_secret: int,
                        params: GroupParams, net: SimNetwork | None = None,
                        node: str = "") -> int:
    """Parent secret from one child's secret and the other's blinded key."""
    if sibling_blinded is None:
        raise MissingBlindedKeyError("sibling blinded key missing")
    if net is None:
        return mod_exp(sibling_blinded, own_secret, params)
    return net.exp(node, sibling_blinded, own_secret)


def compute_outer_key(view: TreeView, broadcast: TreeBroadcast, params: GroupParams,
                      net: SimNetwork | None = None) -> list[int]:
    """Fold the key-path from ``view``'s leaf to the root; returns all path secrets."""
    if broadcast.epoch != view.epoch + 1:
        raise StaleTreeError(
            f"{view.member} expects tree epoch {view.epoch + 1}, got {broadcast.epoch}")
    leaf = broadcast.leaves.get(view.member)
    if leaf is None:
        raise UnknownGatewayError(f"{view.member} has no leaf in the broadcast tree")
    blinded = broadcast.blinded
    secrets = [view.secret]
    for c in key_path(leaf)[:-1]:
        bk = blinded.get(sibling(c))
        if bk is None:
            raise MissingBlindedKeyError(f"co-path value {sibling(c)} missing")
        secrets.append(tree_compute_parent(bk, secrets[-1], params, net, view.member))
    return secrets


def _tree_records(root: TreeNode, blinded: dict[Coord, int]) -> tuple:
    return tuple((c, blinded[c], n.owner if n.is_leaf else None)
                 for c, n in walk(root) if c != ROOT)


def _labels(blinded: dict[Coord, int]) -> dict[str, int]:
    return {f"{l},{v}": bk for (l, v), bk in sorted(blinded.items())}


def _refresh_path(tree: KeyTree, member: str, net: SimNetwork) -> tuple[dict, list[int]]:
    """Recompute ``member``'s key-path below the root from its leaf secret.

    Returns the new blinded keys of the non-root path nodes and the secrets
    leaf-upwards, stopping short of the root so that a broadcast can go out
    before the root secret is computed.
    """
    view = tree.views[member]
    path = key_path(tree.leaves[member])
    secrets = [view.secret]
    fresh: dict[Coord, int] = {}
    if len(path) > 1:
        fresh[path[0]] = net.exp(member, tree.params.g, view.secret)
    for c in path[:-2]:
        k = tree_compute_parent(view.blinded.get(sibling(c)), secrets[-1],
                                tree.params, net, member)
        secrets.append(k)
        fresh[parent(c)] = net.exp(member, tree.params.g, k)
    return fresh, secrets


def _root_secret(tree: KeyTree, member: str, secrets: list[int], net: SimNetwork) -> None:
    view = tree.views[member]
    top = key_path(tree.leaves[member])[-2]
    k = tree_compute_parent(view.blinded.get(sibling(top)), secrets[-1], tree.params, net, member)
    view.path = secrets + [k]


def _finish(tree: KeyTree, bc: TreeBroadcast, msgs, skip: set[str], net: SimNetwork) -> None:
    """Every gateway not in ``skip`` receives ``msgs`` and folds its key-path."""
    for m, view in tree.views.items():
        if m in skip:
            continue
        for msg in msgs:
            if m in msg.recipients:
                net.receive(m, msg)
        view.path = compute_outer_key(view, bc, tree.params, net)
        view.blinded = dict(bc.blinded)
        view.epoch = bc.epoch
        net.key_ready(m)


def tree_create(founder: str, secret: int, params: GroupParams) -> KeyTree:
    secret = params.share(secret)
    view = TreeView(founder, secret, [secret])
    return KeyTree(params, TreeNode(owner=founder), {founder: view}, founder)


def tree_join(tree: KeyTree, new_gateway: str, secret: int, refresh: int,
              net: SimNetwork | None = None) -> tuple[KeyTree, SimNetwork]:
    """Insert ``new_gateway`` beside the whole tree; it becomes the controller.

    The old controller refreshes its leaf secret and publishes its new
    path blinded keys; the joiner computes the new root, broadcasts the tree
    and every other gateway folds its key-path.
    """
    if new_gateway in tree:
        raise DuplicateGatewayError(f"{new_gateway} already in the tree")
    params = tree.params
    net = net or SimNetwork(params)
    tree = tree.clone()
    epoch = tree.epoch + 1
    old = tree.controller
    others = list(tree.views)
    oview = tree.views[old]

    oview.secret = params.share(refresh)
    if len(tree) == 1:
        fresh, old_root_bk = {}, net.exp(old, params.g, oview.secret)
        oview.path = [oview.secret]
    else:
        fresh, secrets = _refresh_path(tree, old, net)
        _root_secret(tree, old, secrets, net)
        old_root_bk = net.exp(old, params.g, oview.path[-1])
    # the old tree moves under <1,0>: <l,v> -> <l+1,v>
    shifted = {(l + 1, v): bk for (l, v), bk in fresh.items()}
    shifted[(1, 0)] = old_root_bk
    first = net.broadcast(old, [m for m in others if m != old] + [new_gateway],
                          "tgdh-refresh", _labels(shifted))

    tree.root = TreeNode(left=tree.root, right=TreeNode(owner=new_gateway))
    secret = params.share(secret)
    j = TreeView(new_gateway, secret)
    own_bk = net.exp(new_gateway, params.g, secret)
    net.receive(new_gateway, first)
    blinded = {(l + 1, v): bk for (l, v), bk in oview.blinded.items()}
    blinded.update(shifted)
    blinded[(1, 1)] = own_bk
    bc = TreeBroadcast(epoch, new_gateway, _tree_records(tree.root, blinded))
    second = net.broadcast(new_gateway, others, "tgdh-tree", _labels(bc.blinded))
    j.path = [secret, tree_compute_parent(old_root_bk, secret, params, net, new_gateway)]
    j.blinded = dict(bc.blinded)
    j.epoch = epoch
    net.key_ready(new_gateway)

    _finish(tree, bc, [first, second], {new_gateway}, net)
    tree.views[new_gateway] = j
    tree.controller = new_gateway
    tree.epoch = epoch
    return tree, net


def _in_subtree(c: Coord, top: Coord) -> bool:
    return c[0] >= top[0] and c[1] >> (c[0] - top[0]) == top[1]


def _remove_leaf(tree: KeyTree, member: str) -> tuple[Coord, Coord]:
    """Drop ``member``'s leaf and promote its sibling subtree into the parent's
    place.  Returns ``(removed leaf coord, promoted coord)``."""
    removed = tree.leaves[member]
    par = parent(removed)
    keep = node_at(tree.root, sibling(removed))
    if par == ROOT:
        tree.root = keep
    else:
        grand = node_at(tree.root, parent(par))
        if par[1] & 1:
            grand.right = keep
        else:
            grand.left = keep
    del tree.views[member]
    return removed, par


def _remap(blinded: dict[Coord, int], removed: Coord, promoted: Coord) -> dict[Coord, int]:
    """Carry a blinded-key table across a leaf removal.

    Nodes of the promoted subtree move up one level; the removed leaf, its
    parent and every ancestor are dropped because their keys are stale.
    """
    stale = set(key_path(promoted))
    old_top = sibling(removed)
    out = {}
    for c, bk in blinded.items():
        if c == removed or c in stale:
            continue
        if _in_subtree(c, old_top):
            d = c[0] - old_top[0]
            r = c[1] - (old_top[1] << d)
            c = (promoted[0] + d, (promoted[1] << d) + r)
        out[c] = bk
    return out


def _degenerate(tree: KeyTree, survivor: str, epoch: int) -> None:
    view = tree.views[survivor]
    view.path = [view.secret]
    view.blinded = {}
    view.epoch = epoch
    tree.controller = survivor
    tree.epoch = epoch


def tree_leave(tree: KeyTree, gateway: str, refresh: int,
               net: SimNetwork | None = None) -> tuple[KeyTree, SimNetwork]:
    """Remove a non-controller gateway; the controller refreshes and rebroadcasts.

    If the removal leaves stale nodes off the controller's key-path, the
    rightmost leaf of the promoted subtree (the sponsor) recomputes them and
    broadcasts their blinded keys first.
    """
    if gateway not in tree:
        raise UnknownGatewayError(f"{gateway} is not a leaf")
    if gateway == tree.controller:
        raise TGDHError(f"{gateway} is the controller; use tree_controller_leave")
    params = tree.params
    net = net or SimNetwork(params)
    tree = tree.clone()
    epoch = tree.epoch + 1
    ctrl = tree.controller
    removed, promoted = _remove_leaf(tree, gateway)
    if tree.root.is_leaf:
        _degenerate(tree, ctrl, epoch)
        return tree, net

    for view in tree.views.values():
        view.blinded = _remap(view.blinded, removed, promoted)
    ctrl_path = set(key_path(tree.leaves[ctrl]))
    msgs = []
    if parent(promoted) not in ctrl_path:
        sponsor = rightmost_leaf(node_at(tree.root, promoted))
        sview = tree.views[sponsor]
        spath = key_path(tree.leaves[sponsor])
        at = spath.index(promoted)
        secrets = sview.path[:at + 1]  # unchanged below the promoted node
        fresh = {}
        for c in spath[at:]:
            if parent(c) in ctrl_path:
                break
            k = tree_compute_parent(sview.blinded[sibling(c)], secrets[-1], params, net, sponsor)
            secrets.append(k)
            fresh[parent(c)] = net.exp(sponsor, params.g, k)
        msgs.append(net.broadcast(sponsor, [m for m in tree.views if m != sponsor],
                                  "tgdh-sponsor", _labels(fresh)))
        net.receive(ctrl, msgs[-1])
        tree.views[ctrl].blinded.update(fresh)

    view = tree.views[ctrl]
    view.secret = params.share(refresh)
    fresh, secrets = _refresh_path(tree, ctrl, net)
    blinded = {**view.blinded, **fresh}
    bc = TreeBroadcast(epoch, ctrl, _tree_records(tree.root, blinded))
    msgs.append(net.broadcast(ctrl, [m for m in tree.views if m != ctrl],
                              "tgdh-tree", _labels(bc.blinded)))
    view.blinded = dict(bc.blinded)
    _root_secret(tree, ctrl, secrets, net)
    view.epoch = epoch
    net.key_ready(ctrl)

    _finish(tree, bc, msgs, {ctrl}, net)
    tree.epoch = epoch
    return tree, net


def tree_controller_leave(tree: KeyTree, refresh: int,
                          net: SimNetwork | None = None) -> tuple[KeyTree, SimNetwork]:
    """Remove the controller.  The most recent remaining joiner, i.e. the
    rightmost leaf of the controller's sibling subtree, takes over and rekeys."""
    if len(tree) < 2:
        raise TGDHError("controller leave needs at least two gateways")
    params = tree.params
    net = net or SimNetwork(params)
    tree = tree.clone()
    epoch = tree.epoch + 1
    removed, promoted = _remove_leaf(tree, tree.controller)
    successor = rightmost_leaf(node_at(tree.root, promoted))
    tree.controller = successor
    if tree.root.is_leaf:
        _degenerate(tree, successor, epoch)
        return tree, net

    for view in tree.views.values():
        view.blinded = _remap(view.blinded, removed, promoted)
    view = tree.views[successor]
    view.secret = params.share(refresh)
    fresh, secrets = _refresh_path(tree, successor, net)
    blinded = {**view.blinded, **fresh}
    bc = TreeBroadcast(epoch, successor, _tree_records(tree.root, blinded))
    msg = net.broadcast(successor, [m for m in tree.views if m != successor],
                        "tgdh-tree", _labels(bc.blinded))
    view.blinded = dict(bc.blinded)
    _root_secret(tree, successor, secrets, net)
    view.epoch = epoch
    net.key_ready(successor)
    _finish(tree, bc, [msg], {successor}, net)
    tree.epoch = epoch
    return tree, net
