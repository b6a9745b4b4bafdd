"""Interactive session host: the live pipeline behind an operator console.

SessionEngine steps one simulated scene and its estimation pipeline at a
fixed tick, applies operator commands between ticks, and emits an
immutable JSON-ready snapshot plus event records per tick. It does no
I/O, so unit tests and log replay drive it directly; serve() wraps one
engine in a WebSocket fan-out where every connected console sees the
same ordered snapshot stream and slow consumers lose oldest frames
behind an explicit drop notice instead of stalling the loop.
"""

from __future__ import annotations

import asyncio
import json
from collections import defaultdict
from dataclasses import dataclass, fields, replace

import numpy as np

from .blobs import BlobFilterParams
from .config import ExperimentConfig
from .guidance import INSERTING, POSITIONING, gear_inverse
from .harness import World
from .phantom import NoiseConfig
from .pipeline import FrameResult, NeedleKinematics, Pipeline

SCHEMA_VERSION = 1
ENDPOINT = "/session"

PHASES = (POSITIONING, INSERTING)
COMMAND_KINDS = ("select_lesion", "align_hold", "advance_needle",
                 "set_phase", "set_param", "reset")

_NOISE_KEYS = tuple(f.name for f in fields(NoiseConfig))
_BLOB_KEYS = tuple(f.name for f in fields(BlobFilterParams))


def _num(x) -> float | None:
    """JSON-safe scalar: strict parsers reject NaN/Infinity literals."""
    v = float(x)
    return v if np.isfinite(v) else None


def _vec(x) -> list | None:
    if x is None:
        return None
    return [float(v) for v in np.asarray(x, float).ravel()]


def message_text(msg: dict) -> str:
    """Canonical wire form; stable bytes make replay comparable."""
    return json.dumps(msg, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class OperatorCommand:
    """One console action; exactly the fields its kind needs are set."""

    kind: str
    lesion_id: int | None = None
    hold: bool | None = None
    mm: float | None = None
    phase: str | None = None
    key: str | None = None
    value: object = None
    seed: int | None = None
    seq: int | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "OperatorCommand":
        if not isinstance(data, dict):
            raise ValueError("command must be an object")
        kind = data.get("kind")
        if kind not in COMMAND_KINDS:
            raise ValueError(f"unknown command kind: {kind!r}")
        seq = data.get("seq")
        if seq is not None and not isinstance(seq, int):
            raise ValueError("seq must be an integer")
        if kind == "select_lesion":
            lid = data.get("id")
            if not isinstance(lid, int) or isinstance(lid, bool):
                raise ValueError("select_lesion needs an integer id")
            return cls(kind=kind, lesion_id=lid, seq=seq)
        if kind == "align_hold":
            hold = data.get("hold")
            if not isinstance(hold, bool):
                raise ValueError("align_hold needs a boolean hold")
            return cls(kind=kind, hold=hold, seq=seq)
        if kind == "advance_needle":
            mm = data.get("mm")
            if isinstance(mm, bool) or not isinstance(mm, (int, float)):
                raise ValueError("advance_needle needs a numeric mm")
            mm = float(mm)
            if not np.isfinite(mm) or mm < 0:
                raise ValueError("advance must be finite and >= 0 mm")
            return cls(kind=kind, mm=mm, seq=seq)
        if kind == "set_phase":
            phase = data.get("phase")
            if phase not in PHASES:
                raise ValueError(f"unknown phase: {phase!r}")
            return cls(kind=kind, phase=phase, seq=seq)
        if kind == "set_param":
            key = data.get("key")
            if key not in _NOISE_KEYS + _BLOB_KEYS:
                raise ValueError(f"unknown parameter: {key!r}")
            return cls(kind=kind, key=key, value=data.get("value"), seq=seq)
        seed = data.get("seed")
        if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
            raise ValueError("reset seed must be an integer")
        return cls(kind="reset", seed=seed, seq=seq)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "select_lesion":
            out["id"] = self.lesion_id
        elif self.kind == "align_hold":
            out["hold"] = self.hold
        elif self.kind == "advance_needle":
            out["mm"] = self.mm
        elif self.kind == "set_phase":
            out["phase"] = self.phase
        elif self.kind == "set_param":
            out["key"], out["value"] = self.key, self.value
        elif self.seed is not None:
            out["seed"] = self.seed
        if self.seq is not None:
            out["seq"] = self.seq
        return out


class SessionEngine:
    """Deterministic tick stepper: same seed and command log, same stream.

    Commands are applied between ticks in arrival order, so the caller
    that serializes handle_command/tick gets replayable behaviour for
    free. Snapshots are plain dicts built fresh each tick and never
    mutated afterwards.
    """

    def __init__(self, cfg: ExperimentConfig, seed: int = 0):
        self.cfg = cfg
        self.run = 0
        self.command_log: list[tuple[int, dict]] = []
        self._start(seed)

    def _start(self, seed: int) -> None:
        self.seed = int(seed)
        self.world = World(self.cfg, self.seed)
        self.pipe = Pipeline(self.world.phantom.model, self.cfg)
        self.phase = POSITIONING
        self.align_hold = False
        self.lesion_index = 0
        self.lesion_id = int(self.world.phantom.model.lesion_ids[0])
        self.tick_index = 0
        self._aligned_prev = False
        self._reached_emitted = False
        self._last_snapshot: dict | None = None

    # -- commands ---------------------------------------------------------

    def handle_command(self, command: dict | OperatorCommand) -> dict:
        """Apply one command now; returns the ack or rejection message."""
        raw = command.to_dict() if isinstance(command, OperatorCommand) else command
        try:
            cmd = (command if isinstance(command, OperatorCommand)
                   else OperatorCommand.from_dict(command))
        except ValueError as err:
            return self._reply(False, raw, str(err))
        self.command_log.append((self.tick_index, dict(raw)))
        ok, info = self._apply(cmd)
        return self._reply(ok, raw, info, seq=cmd.seq)

    def _reply(self, ok: bool, raw: dict, info: str, seq=None) -> dict:
        msg = {"type": "ack" if ok else "reject",
               "v": SCHEMA_VERSION,
               "tick": self.tick_index,
               "kind": raw.get("kind") if isinstance(raw, dict) else None,
               "detail": info}
        if seq is None and isinstance(raw, dict):
            seq = raw.get("seq")
        if seq is not None:
            msg["seq"] = seq
        return msg

    def _apply(self, cmd: OperatorCommand) -> tuple[bool, str]:
        if cmd.kind == "select_lesion":
            ids = self.world.phantom.model.lesion_ids
            if cmd.lesion_id not in ids:
                return False, f"unknown lesion id {cmd.lesion_id}; known: {list(ids)}"
            self.lesion_index = ids.index(cmd.lesion_id)
            self.lesion_id = cmd.lesion_id
            # a deliberate retarget must not trip the estimate-velocity gate
            self.pipe.forget_estimate()
            self._aligned_prev = False
            self._reached_emitted = False
            return True, f"targeting lesion {cmd.lesion_id}"
        if cmd.kind == "align_hold":
            self.align_hold = cmd.hold
            return True, "steering engaged" if cmd.hold else "steering released"
        if cmd.kind == "advance_needle":
            if self.phase != INSERTING:
                return False, f"advance rejected: phase is {self.phase}"
            self.world.advance(self.world.scene(), cmd.mm)
            return True, f"advanced {cmd.mm:g} mm"
        if cmd.kind == "set_phase":
            if cmd.phase != self.phase and cmd.phase == INSERTING:
                self.pipe.forget_estimate()
            self.phase = cmd.phase
            return True, f"phase set to {cmd.phase}"
        if cmd.kind == "set_param":
            return self._set_param(cmd.key, cmd.value)
        seed = self.seed if cmd.seed is None else cmd.seed
        self.run += 1
        self._start(seed)
        return True, f"session reset with seed {seed}"

    def _set_param(self, key: str, value) -> tuple[bool, str]:
        if isinstance(value, list):
            value = tuple(value)
        try:
            if key in _NOISE_KEYS:
                noise = replace(self.cfg.noise, **{key: value})
                self.cfg = replace(self.cfg, noise=noise)
                self.world.cfg = self.cfg
                self.pipe.cfg = self.cfg
            else:
                self.world.blob_params = replace(self.world.blob_params,
                                                 **{key: value})
        except (TypeError, ValueError) as err:
            return False, f"bad value for {key}: {err}"
        return True, f"{key} set to {value!r}"

    # -- stepping ---------------------------------------------------------

    def tick(self) -> tuple[dict, list[dict]]:
        """Advance one frame; returns (snapshot, events) for that tick."""
        world = self.world
        scene = world.scene()
        obs = world.observe(scene)
        needle = NeedleKinematics(azimuth_deg=world.azimuth_deg,
                                  elevation_deg=world.elevation_deg,
                                  depth_mm=world.depth_mm, phase=self.phase)
        result = self.pipe.process(obs.left_px, obs.right_px, needle,
                                   lesion_index=self.lesion_index)
        if self.align_hold and result.command is not None:
            world.apply_command(result.command.azimuth_deg,
                                result.command.elevation_deg)

        events = self._events(result)
        snapshot = self._snapshot(result, scene)
        self._last_snapshot = snapshot
        world.step_clock()
        self.tick_index += 1
        return snapshot, events

    def _events(self, result: FrameResult) -> list[dict]:
        events = []
        fb = result.feedback
        if fb is None:
            return events

        def event(name: str, **extra) -> dict:
            return {"type": "event", "v": SCHEMA_VERSION,
                    "tick": self.tick_index, "name": name, **extra}

        events.append(event("proximity", distance_mm=_num(fb.distance_mm),
                            frequency_hz=_num(fb.frequency_hz)))
        if fb.aligned and not self._aligned_prev:
            events.append(event("aligned"))
        self._aligned_prev = fb.aligned
        if fb.reached and not self._reached_emitted:
            events.append(event("reached", distance_mm=_num(fb.distance_mm)))
            self._reached_emitted = True
        return events

    def _snapshot(self, result: FrameResult, scene) -> dict:
        health = result.health
        snap = {
            "type": "snapshot",
            "v": SCHEMA_VERSION,
            "run": self.run,
            "tick": self.tick_index,
            "phase": self.phase,
            "align_hold": self.align_hold,
            "lesion_id": self.lesion_id,
            "depth_mm": _num(self.world.depth_mm),
            "markers": {
                "breast": {str(i): _vec(result.points[j])
                           for i, j in sorted(result.breast.assignment.items())},
                "device": {str(i): _vec(result.points[j])
                           for i, j in sorted(result.device.assignment.items())},
            },
            "lesion_est": None,
            "command": None,
            "feedback": None,
            "device": None,
            "health": {
                "match_residual": _num(health.match_residual),
                "registration_residual": _num(health.registration_residual),
                "frames_since_valid": health.frames_since_valid,
                "n_breast": health.n_breast,
                "n_device": health.n_device,
            },
        }
        if result.lesion_tps is not None:
            est = result.lesion_tps
            snap["lesion_est"] = {"position": _vec(est.position),
                                  "kind": est.kind,
                                  "residual": _num(est.residual)}
        if result.device_pose is not None:
            pose = result.device_pose
            kin = NeedleKinematics(azimuth_deg=self.world.azimuth_deg,
                                   elevation_deg=self.world.elevation_deg)
            theta1, theta2 = gear_inverse(kin.azimuth_deg, kin.elevation_deg,
                                          self.cfg.guidance.ratios,
                                          self.cfg.guidance.limits)
            snap["device"] = {
                "rotation": [ _vec(row) for row in pose.rotation ],
                "translation": _vec(pose.translation),
                "azimuth_deg": _num(kin.azimuth_deg),
                "elevation_deg": _num(kin.elevation_deg),
                "theta1_deg": _num(theta1),
                "theta2_deg": _num(theta2),
                "tip": _vec(result.tip_mm),
            }
        if result.command is not None:
            cmd = result.command
            snap["command"] = {"azimuth_deg": _num(cmd.azimuth_deg),
                               "elevation_deg": _num(cmd.elevation_deg),
                               "clamped": cmd.clamped}
        if result.feedback is not None:
            fb = result.feedback
            snap["feedback"] = {"distance_mm": _num(fb.distance_mm),
                                "frequency_hz": _num(fb.frequency_hz),
                                "aligned": fb.aligned,
                                "reached": fb.reached}
        if self.cfg.debug:
            snap["lesion_true"] = _vec(scene.lesion_true)
        return snap


def replay(cfg: ExperimentConfig, seed: int, log, ticks: int) -> list[str]:
    """Re-run a recorded session: same seed plus the command log, as text.

    log entries are (tick, command_dict) pairs as collected in
    SessionEngine.command_log; each command is applied before the tick
    it was recorded at, mirroring the live ordering.
    """
    by_tick: dict[int, list] = defaultdict(list)
    for at, command in log:
        by_tick[int(at)].append(command)
    engine = SessionEngine(cfg, seed=seed)
    stream = []
    for k in range(ticks):
        for command in by_tick.get(k, []):
            engine.handle_command(command)
        snapshot, _ = engine.tick()
        stream.append(message_text(snapshot))
    return stream


class _Subscriber:
    __slots__ = ("queue", "dropped")

    def __init__(self, maxsize: int):
        self.queue: asyncio.Queue = asyncio.Queue(maxsize=maxsize)
        self.dropped = 0


def _push(sub: _Subscriber, text: str) -> None:
    # drop-oldest keeps the newest state flowing to a slow consumer;
    # the sender surfaces the count as an explicit drop notice
    while True:
        try:
            sub.queue.put_nowait(text)
            return
        except asyncio.QueueFull:
            try:
                sub.queue.get_nowait()
                sub.dropped += 1
            except asyncio.QueueEmpty:
                pass


async def serve(cfg: ExperimentConfig, port: int, host: str = "127.0.0.1",
                seed: int = 0, queue_size: int = 64,
                ready: asyncio.Event | None = None,
                stop: asyncio.Event | None = None) -> None:
    """Host one engine on ws://host:port/session until stop is set.

    Raises OSError straight from the bind when the port is taken, so a
    second session on the same port fails before any tick runs.
    """
    import websockets

    if queue_size < 2:
        raise ValueError("queue_size must be >= 2")
    engine = SessionEngine(cfg, seed=seed)
    subscribers: set[_Subscriber] = set()
    commands: asyncio.Queue = asyncio.Queue()
    if stop is None:
        stop = asyncio.Event()

    async def sender(ws, sub: _Subscriber) -> None:
        while True:
            text = await sub.queue.get()
            if sub.dropped:
                count, sub.dropped = sub.dropped, 0
                await ws.send(message_text(
                    {"type": "drop", "v": SCHEMA_VERSION, "count": count}))
            await ws.send(text)

    async def handler(ws) -> None:
        path = ws.request.path.split("?", 1)[0]
        if path != ENDPOINT:
            await ws.close(code=1008, reason=f"unknown endpoint, use {ENDPOINT}")
            return
        sub = _Subscriber(queue_size)
        _push(sub, message_text({"type": "hello", "v": SCHEMA_VERSION,
                                 "tick_hz": cfg.trial.tick_hz,
                                 "debug": cfg.debug, "run": engine.run,
                                 "tick": engine.tick_index}))
        if engine._last_snapshot is not None:
            _push(sub, message_text(engine._last_snapshot))
        subscribers.add(sub)
        send_task = asyncio.create_task(sender(ws, sub))
        try:
            async for raw in ws:
                try:
                    data = json.loads(raw)
                    if not isinstance(data, dict):
                        raise ValueError("command must be an object")
                except ValueError as err:
                    _push(sub, message_text(
                        {"type": "reject", "v": SCHEMA_VERSION,
                         "tick": engine.tick_index, "kind": None,
                         "detail": f"unparseable command: {err}"}))
                    continue
                await commands.put((data, sub))
        finally:
            subscribers.discard(sub)
            send_task.cancel()

    async def loop() -> None:
        period = 1.0 / cfg.trial.tick_hz
        clock = asyncio.get_running_loop().time
        next_t = clock()
        while not stop.is_set():
            while True:
                try:
                    data, sub = commands.get_nowait()
                except asyncio.QueueEmpty:
                    break
                reply = engine.handle_command(data)
                if sub in subscribers:
                    _push(sub, message_text(reply))
            snapshot, events = engine.tick()
            text = message_text(snapshot)
            for sub in list(subscribers):
                _push(sub, text)
                for ev in events:
                    _push(sub, message_text(ev))
            next_t += period
            delay = next_t - clock()
            if delay <= 0:
                # behind schedule: skip the debt instead of bursting ticks
                next_t = clock()
                await asyncio.sleep(0)
                continue
            try:
                await asyncio.wait_for(stop.wait(), timeout=delay)
            except asyncio.TimeoutError:
                pass

    async with websockets.serve(handler, host, port):
        if ready is not None:
            ready.set()
        await loop()
