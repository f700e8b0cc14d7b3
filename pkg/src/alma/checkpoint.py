"""Binary checkpoints: full learner state plus the metrics ledger.

Little-endian layout: magic "ALMA", format version, config hash, arrival
index, then the learner body (named float64 tensors with length-prefixed
names, gate trees as preorder node records, optimizer slots) and the ledger
rows. Loading refuses mismatched magic, version or config hash, and a
save -> load -> save round trip is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, StateError
from .gmoe import DenseLayer, GateNode, MoELayer, MoeModel
from .learners import Component, LearnerHandle, _state_slots
from .metrics import ArrivalRecord, MetricsLedger
from .numkit import AdaDeltaState, ParamSet, SgdMomentumState

MAGIC = b"ALMA"
FORMAT_VERSION = 1


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, data: bytes):
        self.parts.append(data)

    def u8(self, v: int):
        self.raw(struct.pack("<B", v))

    def u32(self, v: int):
        self.raw(struct.pack("<I", v))

    def u64(self, v: int):
        self.raw(struct.pack("<Q", v))

    def i64(self, v: int):
        self.raw(struct.pack("<q", v))

    def f64(self, v: float):
        self.raw(struct.pack("<d", v))

    def string(self, s: str):
        data = s.encode("utf-8")
        self.u32(len(data))
        self.raw(data)

    def tensor(self, name: str, value: np.ndarray):
        self.string(name)
        self.u32(value.ndim)
        for d in value.shape:
            self.u32(d)
        self.raw(np.ascontiguousarray(value, dtype="<f8").tobytes())

    def param_set(self, params: ParamSet):
        self.u32(len(params))
        for name, value in params.items():
            self.tensor(name, value)

    def gate_tree(self, root: GateNode):
        nodes: list[GateNode] = []

        def collect(node: GateNode):
            nodes.append(node)
            if not node.is_leaf():
                collect(node.left)
                collect(node.right)

        collect(root)
        self.u32(len(nodes))
        for node in nodes:
            if node.is_leaf():
                self.u8(0)
                self.u32(node.expert)
            else:
                self.u8(1)
                self.string(node.gate)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def raw(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise FormatError(f"{self.path}: truncated at offset {self.pos}")
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.raw(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.raw(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.raw(8))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.raw(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.raw(8))[0]

    def string(self) -> str:
        return self.raw(self.u32()).decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.string()
        rank = self.u32()
        shape = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        value = np.frombuffer(self.raw(count * 8), dtype="<f8").reshape(shape).copy()
        return name, value

    def param_set(self) -> ParamSet:
        params = ParamSet()
        for _ in range(self.u32()):
            name, value = self.tensor()
            params.add(name, value)
        return params

    def gate_tree(self) -> GateNode:
        count = self.u32()
        records = []
        for _ in range(count):
            if self.u8() == 0:
                records.append(("leaf", self.u32()))
            else:
                records.append(("gate", self.string()))
        pos = 0

        def build() -> GateNode:
            nonlocal pos
            kind, value = records[pos]
            pos += 1
            if kind == "leaf":
                return GateNode(expert=value)
            node = GateNode(gate=value)
            node.left = build()
            node.right = build()
            return node

        root = build()
        if pos != count:
            raise FormatError(f"{self.path}: malformed gate tree")
        return root


@dataclass
class Checkpoint:
    version: int
    config_hash: bytes
    arrival_t: int
    kind: str
    optimizer: str
    event_count: int
    next_component_index: int
    components: list[Component]
    moe: MoeModel | None
    moe_opt_states: list
    gating: str
    ledger: MetricsLedger


def _write_slots(w: _Writer, state) -> None:
    slot_sets = _state_slots(state)
    w.u32(len(slot_sets))
    for slots in slot_sets:
        w.param_set(slots)


def _read_state(r: _Reader, optimizer: str, params: ParamSet):
    expected = 2 if optimizer == "adadelta" else 1
    stored = r.u32()
    if stored != expected:
        raise FormatError(f"{r.path}: optimizer slot count {stored} does not match {optimizer}")
    slot_sets = [r.param_set() for _ in range(stored)]
    if optimizer == "adadelta":
        return AdaDeltaState(avg_sq_grad=slot_sets[0], avg_sq_delta=slot_sets[1])
    return SgdMomentumState(velocity=slot_sets[0])


def save_checkpoint(path, config_hash: bytes, arrival_t: int, handle: LearnerHandle,
                    ledger: MetricsLedger) -> None:
    w = _Writer()
    w.raw(MAGIC)
    w.u32(FORMAT_VERSION)
    if len(config_hash) != 32:
        raise FormatError("config hash must be a 32-byte sha256 digest")
    w.raw(config_hash)
    w.u32(arrival_t)
    w.string(handle.kind)
    w.string(handle.optimizer)
    w.u32(handle.event_count)
    w.u32(handle.next_component_index)

    if handle.kind == "gMoE":
        w.string(handle.gating)
        w.u32(len(handle.moe.layers))
        for layer, state in zip(handle.moe.layers, handle.moe_opt_states):
            if isinstance(layer, MoELayer):
                w.u8(1)
                w.u32(layer.d_in)
                w.u32(layer.d_out)
                w.string(layer.mode)
                w.u32(layer.next_expert_id)
                w.u32(layer.next_gate_id)
                w.gate_tree(layer.root)
            else:
                w.u8(0)
                w.u32(layer.d_in)
                w.u32(layer.d_out)
                w.u8(1 if layer.relu else 0)
            w.param_set(layer.params)
            _write_slots(w, state)
    else:
        w.u32(len(handle.components))
        for comp in handle.components:
            w.i64(comp.seed)
            w.u8(1 if comp.frozen else 0)
            w.param_set(comp.params)
            _write_slots(w, comp.opt_state)

    w.u64(ledger.t0_param_count)
    w.u32(len(ledger.records))
    for rec in ledger.records:
        w.u32(rec.t)
        w.f64(rec.test_error_rate)
        w.u64(rec.param_count)
        w.f64(rec.flops_this_arrival)
        w.u8(1 if rec.trained else 0)

    Path(path).write_bytes(w.getvalue())


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.raw(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config_hash = r.raw(32)
    arrival_t = r.u32()
    kind = r.string()
    optimizer = r.string()
    event_count = r.u32()
    next_component_index = r.u32()

    components: list[Component] = []
    moe = None
    moe_opt_states: list = []
    gating = "soft"
    if kind == "gMoE":
        gating = r.string()
        layers: list = []
        num_layers = r.u32()
        for _ in range(num_layers):
            layer_type = r.u8()
            d_in, d_out = r.u32(), r.u32()
            if layer_type == 1:
                mode = r.string()
                next_expert_id = r.u32()
                next_gate_id = r.u32()
                root = r.gate_tree()
                params = r.param_set()
                layer = MoELayer(d_in, d_out, params, root, mode=mode,
                                 next_expert_id=next_expert_id, next_gate_id=next_gate_id)
            else:
                relu = bool(r.u8())
                params = r.param_set()
                layer = DenseLayer.from_params(d_in, d_out, relu, params)
            layers.append(layer)
            moe_opt_states.append(_read_state(r, optimizer, layer.params))
        num_classes = layers[-1].d_out
        moe = MoeModel(layers, num_classes, gating)
    else:
        for _ in range(r.u32()):
            seed = r.i64()
            frozen = bool(r.u8())
            params = r.param_set()
            state = _read_state(r, optimizer, params)
            components.append(Component(params=params, seed=seed, frozen=frozen, opt_state=state))

    ledger = MetricsLedger(t0_param_count=r.u64())
    for _ in range(r.u32()):
        t = r.u32()
        err = r.f64()
        pc = r.u64()
        flops = r.f64()
        trained = bool(r.u8())
        ledger.append(ArrivalRecord(t, err, pc, flops, trained))
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")

    return Checkpoint(version, config_hash, arrival_t, kind, optimizer, event_count,
                      next_component_index, components, moe, moe_opt_states, gating, ledger)


def restore_handle(ckpt: Checkpoint, handle: LearnerHandle) -> LearnerHandle:
    """Overwrite a freshly built handle with checkpointed learner state."""
    if handle.kind != ckpt.kind:
        raise StateError(f"checkpoint holds a {ckpt.kind} learner, config asks for {handle.kind}")
    if handle.optimizer != ckpt.optimizer:
        raise StateError("checkpoint and config disagree on the optimizer")
    handle.event_count = ckpt.event_count
    handle.next_component_index = ckpt.next_component_index
    if handle.kind == "gMoE":
        handle.moe = ckpt.moe
        handle.moe_opt_states = ckpt.moe_opt_states
        handle.gating = ckpt.gating
    else:
        handle.components = ckpt.components
    return handle


def describe(ckpt: Checkpoint) -> dict:
    """Human-oriented summary used by the CLI inspect command."""
    tensors: list[tuple[str, tuple]] = []
    if ckpt.moe is not None:
        for i, layer in enumerate(ckpt.moe.layers):
            tensors.extend((f"layer{i}.{n}", v.shape) for n, v in layer.params.items())
    for i, comp in enumerate(ckpt.components):
        tensors.extend((f"component{i}.{n}", v.shape) for n, v in comp.params.items())
    return {
        "version": ckpt.version,
        "config_hash": ckpt.config_hash.hex(),
        "arrival_t": ckpt.arrival_t,
        "kind": ckpt.kind,
        "optimizer": ckpt.optimizer,
        "event_count": ckpt.event_count,
        "num_components": len(ckpt.components),
        "param_count": sum(int(np.prod(s)) if s else 1 for _, s in tensors),
        "tensors": [(name, list(shape)) for name, shape in tensors],
        "ledger_arrivals": ckpt.ledger.num_arrivals,
        "t0_param_count": ckpt.ledger.t0_param_count,
    }
