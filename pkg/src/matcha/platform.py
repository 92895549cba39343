"""Target SoC description: devices, memory hierarchy, and the kernel
pattern catalogue with per-pattern device, efficiency, and overhead
parameters."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

from .errors import PlatformError
from .model_ir import OP_TYPES

PLATFORM_SCHEMA = "matcha-platform/1"
WILDCARD_NAME = "wildcard"

DEFAULT_DISPATCH_OVERHEAD = 200
DEFAULT_HELPER_COST_PER_BYTE = Fraction(1, 4)


@dataclass(frozen=True)
class Device:
    """One execution module: the host CPU or an accelerator cluster."""

    name: str
    alpha: Fraction              # cycles per arithmetic operation
    l1_bytes: int                # local scratchpad; 0 means "runs from L2"
    dma_bw_bytes_per_cycle: int  # L2 <-> L1 transfer rate
    is_host: bool = False


@dataclass(frozen=True)
class MemoryHierarchy:
    l2_bytes: int
    l3_bytes: int
    l2_l3_bw_bytes_per_cycle: int


@dataclass(frozen=True)
class Pattern:
    """A chain of operator types a device kernel can execute fused."""

    name: str
    op_chain: tuple
    device: str
    eta: Fraction                # efficiency in (0, 1]
    delta_cycles: int            # fixed per-invocation overhead
    constraints: tuple = ()      # per-node constraint dicts, () = unconstrained
    is_wildcard: bool = False

    @property
    def length(self) -> int:
        return len(self.op_chain)


@dataclass(frozen=True)
class Platform:
    devices: tuple
    memory: MemoryHierarchy
    catalogue: tuple
    dispatch_overhead_cycles: int = DEFAULT_DISPATCH_OVERHEAD
    helper_cost_per_byte: Fraction = DEFAULT_HELPER_COST_PER_BYTE

    def device(self, name: str) -> Device:
        for d in self.devices:
            if d.name == name:
                return d
        raise PlatformError(f"unknown device '{name}'")

    @property
    def host(self) -> Device:
        for d in self.devices:
            if d.is_host:
                return d
        raise PlatformError("platform has no host device")

    @property
    def wildcard(self) -> Pattern:
        for p in self.catalogue:
            if p.is_wildcard:
                return p
        raise PlatformError("platform has no wildcard pattern")

    def pattern(self, name: str) -> Pattern:
        for p in self.catalogue:
            if p.name == name:
                return p
        raise PlatformError(f"unknown pattern '{name}'")


def _as_fraction(value, what):
    if isinstance(value, bool) or not isinstance(value, (int, float, Fraction)):
        raise PlatformError(f"{what} must be a number")
    if isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            raise PlatformError(f"{what} must be finite")
        # decimal intent: 0.8 in a config means exactly 4/5
        return Fraction(str(value))
    return Fraction(value)


def load_platform(text: str, default_wildcard_delta: int = 0) -> Platform:
    """Parse and validate a ``matcha-platform/1`` JSON document.

    A host-device wildcard pattern is synthesized when the catalogue does
    not provide one, so every operator always has at least one kernel.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise PlatformError(f"platform parse error: {e}") from e
    return platform_from_dict(doc, default_wildcard_delta)


def platform_from_dict(doc, default_wildcard_delta: int = 0) -> Platform:
    if not isinstance(doc, dict):
        raise PlatformError("platform document must be a JSON object")
    if doc.get("schema") != PLATFORM_SCHEMA:
        raise PlatformError(f"platform document must declare \"schema\": \"{PLATFORM_SCHEMA}\"")

    devices = []
    names = set()
    for entry in doc.get("devices", []):
        name = entry.get("name")
        if not name:
            raise PlatformError("device without a name")
        if name in names:
            raise PlatformError(f"duplicate device name '{name}'")
        names.add(name)
        alpha = _as_fraction(entry.get("alpha"), f"device '{name}' alpha")
        if alpha <= 0:
            raise PlatformError(f"device '{name}': alpha must be > 0")
        l1 = entry.get("l1_bytes", 0)
        bw = entry.get("dma_bw_bytes_per_cycle", 0)
        if l1 < 0 or (l1 > 0 and bw <= 0):
            raise PlatformError(f"device '{name}': dma bandwidth must be > 0 when L1 > 0")
        devices.append(Device(name, alpha, int(l1), int(bw), bool(entry.get("is_host", False))))
    hosts = [d for d in devices if d.is_host]
    if len(hosts) != 1:
        raise PlatformError("exactly one device must have is_host = true")

    mem = doc.get("memory", {})
    l2 = mem.get("l2_bytes", 0)
    l3 = mem.get("l3_bytes", 0)
    bw = mem.get("l2_l3_bw_bytes_per_cycle", 0)
    if l2 <= 0 or l3 <= 0 or bw <= 0:
        raise PlatformError("memory capacities and bandwidth must be > 0")
    if l3 < l2:
        raise PlatformError("l3_bytes must be >= l2_bytes")
    memory = MemoryHierarchy(int(l2), int(l3), int(bw))

    patterns = []
    pat_names = set()
    for entry in doc.get("patterns", []):
        name = entry.get("name")
        if not name or name in pat_names:
            raise PlatformError(f"bad or duplicate pattern name: {name!r}")
        pat_names.add(name)
        dev = entry.get("device")
        if dev not in names:
            raise PlatformError(f"pattern '{name}' references unknown device '{dev}'")
        chain = tuple(entry.get("ops", ()))
        if not chain:
            raise PlatformError(f"pattern '{name}': empty op chain")
        wildcard = chain == ("*",)
        if not wildcard:
            for t in chain:
                if t not in OP_TYPES:
                    raise PlatformError(f"pattern '{name}': unknown op_type '{t}'")
        elif dev != hosts[0].name:
            raise PlatformError(f"pattern '{name}': the wildcard must run on the host")
        eta = _as_fraction(entry.get("eta", 1), f"pattern '{name}' eta")
        if not (0 < eta <= 1):
            raise PlatformError(f"pattern '{name}': efficiency must be in (0,1]")
        delta = int(entry.get("delta_cycles", 0))
        if delta < 0:
            raise PlatformError(f"pattern '{name}': delta_cycles must be >= 0")
        constraints = _normalize_constraints(entry.get("constraints"), len(chain), name)
        patterns.append(Pattern(name, chain, dev, eta, delta, constraints, wildcard))

    if sum(1 for p in patterns if p.is_wildcard) > 1:
        raise PlatformError("catalogue must contain at most one wildcard pattern")
    if not any(p.is_wildcard for p in patterns):
        host = hosts[0]
        if WILDCARD_NAME in pat_names:
            raise PlatformError(f"pattern name '{WILDCARD_NAME}' is reserved")
        patterns.append(Pattern(
            WILDCARD_NAME, ("*",), host.name, Fraction(1), int(default_wildcard_delta),
            (), True))

    return Platform(
        devices=tuple(devices),
        memory=memory,
        catalogue=tuple(patterns),
        dispatch_overhead_cycles=int(doc.get("dispatch_overhead_cycles",
                                             DEFAULT_DISPATCH_OVERHEAD)),
        helper_cost_per_byte=_as_fraction(
            doc.get("helper_cost_per_byte", float(DEFAULT_HELPER_COST_PER_BYTE)),
            "helper_cost_per_byte"),
    )


def _normalize_constraints(raw, length, pat_name):
    # Accepts a single object applied to every chain node, or a list with
    # one entry (object or null) per node.
    if raw is None:
        return ()
    if isinstance(raw, dict):
        raw = [raw] * length
    if not isinstance(raw, list) or len(raw) != length:
        raise PlatformError(f"pattern '{pat_name}': constraints must match chain length")
    known = {"dtypes", "max_channels", "strides"}
    out = []
    for node in raw:
        if node is None:
            out.append({})
            continue
        if not isinstance(node, dict) or any(k not in known for k in node):
            raise PlatformError(f"pattern '{pat_name}': unknown constraint key")
        out.append(dict(node))
    return tuple(out)


def pattern_supports(pattern: Pattern, ops, tensors) -> bool:
    """True iff the operator chain satisfies the pattern's node types and
    per-node constraint predicates."""
    if pattern.is_wildcard:
        return len(ops) == 1
    if len(ops) != pattern.length:
        return False
    for i, op in enumerate(ops):
        if op.op_type != pattern.op_chain[i]:
            return False
        cons = pattern.constraints[i] if pattern.constraints else {}
        if not cons:
            continue
        out = tensors[op.output]
        if "dtypes" in cons and out.dtype not in cons["dtypes"]:
            return False
        if "max_channels" in cons and out.shape[-1] > cons["max_channels"]:
            return False
        if "strides" in cons and op.op_type == "conv2d":
            allowed = set(cons["strides"])
            if op.attrs["stride_h"] not in allowed or op.attrs["stride_w"] not in allowed:
                return False
    return True


def platform_to_dict(plat: Platform) -> dict:
    return {
        "schema": PLATFORM_SCHEMA,
        "devices": [
            {"name": d.name, "alpha": float(d.alpha), "l1_bytes": d.l1_bytes,
             "dma_bw_bytes_per_cycle": d.dma_bw_bytes_per_cycle, "is_host": d.is_host}
            for d in plat.devices
        ],
        "memory": {
            "l2_bytes": plat.memory.l2_bytes,
            "l3_bytes": plat.memory.l3_bytes,
            "l2_l3_bw_bytes_per_cycle": plat.memory.l2_l3_bw_bytes_per_cycle,
        },
        "dispatch_overhead_cycles": plat.dispatch_overhead_cycles,
        "helper_cost_per_byte": float(plat.helper_cost_per_byte),
        "patterns": [
            {"name": p.name, "device": p.device, "ops": list(p.op_chain),
             "eta": float(p.eta), "delta_cycles": p.delta_cycles,
             "constraints": [dict(c) for c in p.constraints] or None,
             "is_wildcard": p.is_wildcard}
            for p in plat.catalogue
        ],
    }
