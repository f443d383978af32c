"""Versioned binary checkpoints.

Layout: magic, format version (u32), header length (u64), JSON header,
raw array payload, SHA-256 of everything before it.  The header is written
with sorted keys so identical state always serializes to identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .critics import TabularCritic
from .errors import CheckpointCorruptError, CheckpointVersionError
from .trainer import Agent, LagrangeState, PidGains

MAGIC = b"TCRLCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


def _split(obj, arrays):
    if isinstance(obj, np.ndarray):
        arrays.append(np.ascontiguousarray(obj))
        return {"__array__": len(arrays) - 1}
    if isinstance(obj, dict):
        return {str(k): _split(obj[k], arrays) for k in sorted(obj, key=str)}
    if isinstance(obj, (list, tuple)):
        return [_split(v, arrays) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _join(obj, arrays):
    if isinstance(obj, dict):
        if set(obj) == {"__array__"}:
            return arrays[obj["__array__"]]
        return {k: _join(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_join(v, arrays) for v in obj]
    return obj


def encode(state: dict) -> bytes:
    arrays: list[np.ndarray] = []
    meta = _split(state, arrays)
    table, offset, chunks = [], 0, []
    for a in arrays:
        raw = a.tobytes()
        table.append({"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True,
                        separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> dict:
    if len(blob) < _PREFIX.size + _DIGEST:
        raise CheckpointCorruptError("checkpoint truncated")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format v{version}, expected v{VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError("checkpoint checksum mismatch")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + hlen])
    except ValueError as err:
        raise CheckpointCorruptError(f"unreadable header: {err}") from None
    payload = body[start + hlen:]
    arrays = []
    for spec in header["arrays"]:
        raw = payload[spec["offset"]:spec["offset"] + spec["nbytes"]]
        arrays.append(np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"]).copy())
    return _join(header["meta"], arrays)


def save(path, state: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(state))
    tmp.replace(path)
    return path


def load(path) -> dict:
    return decode(Path(path).read_bytes())


# --------------------------------------------------------------------------
# agent <-> state


def _critic_state(c):
    if c is None:
        return None
    if isinstance(c, TabularCritic):
        return {"kind": "table", "table": c.table, "target": c.target, "fits": c.fits}
    return {"kind": "mlp", "net": c.net.get_flat(), "target": c.target.get_flat(),
            "opt": c.opt.state(), "fits": c.fits}


def _restore_critic(c, s):
    if s is None:
        return
    c.fits = int(s["fits"])
    if s["kind"] == "table":
        c.table = s["table"].copy()
        c.target = s["target"].copy()
    else:
        c.net.set_flat(s["net"])
        c.target.set_flat(s["target"])
        c.opt.load(s["opt"])


def _rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def agent_state(agent: Agent, streams: dict, extra: dict | None = None) -> dict:
    lg = agent.lagrange
    return {
        "policy": agent.policy.get_flat(),
        "actor_opt": agent.actor_opt.state(),
        "critics": {k: _critic_state(getattr(agent, k))
                    for k in ("v_reward", "v_cost", "worst", "q_reward", "q_cost")},
        "lagrange": {"multipliers": lg.multipliers, "integral": lg.integral,
                     "prev_error": lg.prev_error,
                     "gains": [lg.gains.kp, lg.gains.ki, lg.gains.kd]},
        "epoch": agent.epoch,
        "hist_range": None if agent.hist_range is None else list(agent.hist_range),
        "rng": {k: _rng_state(g) for k, g in sorted(streams.items())},
        "extra": extra or {},
    }


def restore(agent: Agent, streams: dict, state: dict) -> dict:
    """Load ``state`` into an agent of matching shape; returns ``extra``."""
    agent.policy.set_flat(state["policy"])
    agent.actor_opt.load(state["actor_opt"])
    for k, s in state["critics"].items():
        _restore_critic(getattr(agent, k), s)
    lg = state["lagrange"]
    agent.lagrange = LagrangeState(dict(lg["multipliers"]), dict(lg["integral"]),
                                   dict(lg["prev_error"]), PidGains(*lg["gains"]))
    agent.epoch = int(state["epoch"])
    agent.hist_range = None if state["hist_range"] is None else tuple(state["hist_range"])
    for k, s in state["rng"].items():
        streams[k].bit_generator.state = s
    return state.get("extra", {})
