"""Interleaving control for rank and stream threads.

Three modes:

* ``free``       -- threads run under the OS scheduler; blocking waits spin.
* ``random``     -- cooperative: exactly one thread runs between checkpoints,
                    the successor is drawn from a seeded RNG.  Used for
                    synchronization stress tests.
* ``det``        -- cooperative round-robin; with a fixed program the full
                    event order is reproducible.

In the cooperative modes, deferred (non-blocking) transfers are modelled as a
"network" actor: applying one pending operation is itself a schedulable step,
so puts become visible at arbitrary points between issue and quiet.  Deadlock
is detected structurally: if every live actor is blocked on a false predicate
and the network has no work, all of them are failed with one fault naming the
participants.
"""

from __future__ import annotations

import random
import threading
import time

from .errors import ConfigurationError, SynchronizationFault

FREE = "free"
RANDOM = "random"
DET = "det"

_MODES = (FREE, RANDOM, DET)

# hard wall-clock backstop for cooperative parking; normal termination is
# structural, this only catches scheduler bugs
_PARK_BACKSTOP_S = 120.0

_NET = object()  # sentinel candidate meaning "apply one pending transfer"


class _Actor:
    __slots__ = ("name", "event", "state", "pred", "what")

    def __init__(self, name):
        self.name = name
        self.event = threading.Event()
        self.state = "staged"  # staged -> ready/running -> blocked -> done
        self.pred = None
        self.what = ""

    def __repr__(self):
        return f"<actor {self.name} {self.state}>"


class Scheduler:
    def __init__(self, mode=FREE, seed=0, timeout_s=5.0):
        if mode not in _MODES:
            raise ConfigurationError(f"unknown scheduler mode {mode!r}")
        self.mode = mode
        self.controlled = mode != FREE
        self.timeout_s = timeout_s
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._actors: dict[str, _Actor] = {}
        self._by_thread: dict[int, _Actor] = {}
        self._order: list[str] = []
        self._rr_pos = 0
        self._fault: BaseException | None = None
        # network hooks, installed by the world
        self._net_size = lambda: 0
        self._net_apply = lambda rng: None

    # ------------------------------------------------------------------
    # world wiring

    def set_network(self, size_fn, apply_fn):
        self._net_size = size_fn
        self._net_apply = apply_fn

    def set_fault(self, exc):
        """Abort every parked/blocked actor with ``exc`` (first fault wins)."""
        with self._lock:
            if self._fault is None:
                self._fault = exc
            for actor in self._actors.values():
                actor.event.set()

    @property
    def fault(self):
        return self._fault

    def clear_fault(self):
        with self._lock:
            self._fault = None

    # ------------------------------------------------------------------
    # actor lifecycle

    def stage(self, names):
        """Pre-announce actors that are about to start on other threads.

        Staged actors keep the deadlock detector honest: a run is never
        declared dead while a participant has not begun executing yet.
        """
        if not self.controlled:
            return
        with self._lock:
            for name in names:
                if name in self._actors:
                    raise ConfigurationError(f"actor {name!r} already staged")
                self._actors[name] = _Actor(name)
                self._order.append(name)

    def register(self, name):
        """Bind the calling thread to ``name`` and enter the rotation.

        Grants are deferred while any staged actor has not bound yet, so the
        schedule never depends on OS thread startup order: the last staged
        registrant triggers one deterministic pick over the full cohort.
        """
        if not self.controlled:
            return
        park = False
        with self._lock:
            actor = self._actors.get(name)
            if actor is None:
                actor = _Actor(name)
                self._actors[name] = actor
                self._order.append(name)
            self._by_thread[threading.get_ident()] = actor
            actor.state = "ready"
            if any(a.state == "running" for a in self._actors.values()):
                park = True
            elif self._staged_count_locked() > 0:
                park = True  # wait for the rest of the cohort
            else:
                nxt = self._pick_locked()
                if nxt is actor or nxt is None:
                    actor.state = "running"
                else:
                    self._grant_locked(nxt)
                    park = True
        if park:
            self._park(actor)

    def current_name(self):
        """Name of the calling thread's actor, or None if not in the rotation."""
        if not self.controlled:
            return None
        actor = self._by_thread.get(threading.get_ident())
        return actor.name if actor is not None else None

    def unregister(self):
        if not self.controlled:
            return
        ident = threading.get_ident()
        with self._lock:
            actor = self._by_thread.pop(ident, None)
            if actor is None:
                return
            actor.state = "done"
            del self._actors[actor.name]
            self._order.remove(actor.name)
            nxt = self._pick_locked()
            if nxt is not None and nxt is not actor:
                self._grant_locked(nxt)
            elif nxt is None and self._actors:
                self._declare_deadlock_locked(raise_here=False)

    # ------------------------------------------------------------------
    # execution points

    def checkpoint(self):
        """Possible handoff point between atomic steps."""
        if not self.controlled:
            return
        if self._fault is not None:
            raise self._fault
        actor = self._by_thread.get(threading.get_ident())
        if actor is None:  # thread outside the rotation (host side)
            return
        with self._lock:
            actor.state = "ready"
            nxt = self._pick_locked()
            if nxt is actor or nxt is None:
                actor.state = "running"
                return
            self._grant_locked(nxt)
        self._park(actor)

    def wait_for(self, pred, what="", timeout=None):
        """Block until ``pred()`` is truthy; raise SynchronizationFault on
        timeout (free mode) or structural deadlock (cooperative modes)."""
        if not self.controlled:
            self._spin_wait(pred, what, timeout)
            return
        actor = self._by_thread.get(threading.get_ident())
        if actor is None:
            self._spin_wait(pred, what, timeout)
            return
        while True:
            if self._fault is not None:
                raise self._fault
            if pred():
                return
            with self._lock:
                if pred():
                    return
                actor.state = "blocked"
                actor.pred = pred
                actor.what = what
                nxt = self._pick_locked()
                if nxt is None:
                    self._declare_deadlock_locked()
                elif nxt is actor:
                    actor.state = "running"
                    actor.pred = None
                    continue
                else:
                    self._grant_locked(nxt)
            self._park(actor)
            actor.pred = None

    # ------------------------------------------------------------------
    # internals

    def _spin_wait(self, pred, what, timeout):
        deadline = time.monotonic() + (self.timeout_s if timeout is None else timeout)
        delay = 0.0
        while True:
            if self._fault is not None:
                raise self._fault
            if pred():
                return
            if time.monotonic() > deadline:
                raise SynchronizationFault(f"timed out waiting for {what or 'condition'}")
            time.sleep(delay)
            delay = min(1e-4, delay + 1e-6)

    def _park(self, actor):
        deadline = time.monotonic() + _PARK_BACKSTOP_S
        while not actor.event.wait(0.05):
            if self._fault is not None:
                raise self._fault
            if time.monotonic() > deadline:
                raise SynchronizationFault(f"scheduler stall while parking {actor.name}")
        actor.event.clear()
        if self._fault is not None:
            raise self._fault

    def _staged_count_locked(self):
        return sum(1 for a in self._actors.values() if a.state == "staged")

    def _candidates_locked(self):
        out = []
        for name in self._order:
            actor = self._actors[name]
            if actor.state == "ready":
                out.append(actor)
            elif actor.state == "blocked" and actor.pred is not None and actor.pred():
                out.append(actor)
        return out

    def _pick_locked(self):
        """Choose the next actor to run; may apply network steps inline.

        While part of a staged cohort has not registered, only the caller may
        keep running; everything else (including network delivery) waits, so
        the schedule stays independent of thread startup timing.
        """
        if self._staged_count_locked() > 0:
            me = self._by_thread.get(threading.get_ident())
            if me is not None and me.state == "ready":
                return me
            return None
        while True:
            cands = self._candidates_locked()
            net_work = self._net_size() > 0
            if self.mode == RANDOM:
                pool = list(cands)
                if net_work:
                    pool.append(_NET)
                if not pool:
                    return None
                choice = self._rng.choice(pool)
            else:  # round-robin: scan registration order, network goes last
                choice = None
                n = len(self._order)
                for i in range(n):
                    name = self._order[(self._rr_pos + 1 + i) % n] if n else None
                    actor = self._actors.get(name)
                    if actor in cands:
                        choice = actor
                        self._rr_pos = self._order.index(name)
                        break
                if choice is None and net_work:
                    choice = _NET
                if choice is None:
                    return None
            if choice is _NET:
                self._net_apply(self._rng if self.mode == RANDOM else None)
                continue
            return choice

    def _grant_locked(self, actor):
        actor.state = "running"
        actor.pred = None
        actor.event.set()

    def _declare_deadlock_locked(self, raise_here=True):
        blocked = [a for a in self._actors.values() if a.state == "blocked"]
        staged = [a for a in self._actors.values() if a.state == "staged"]
        if staged:
            # a participant has not started yet; it will pick the run back up
            return
        detail = ", ".join(f"{a.name} waiting for {a.what or 'unknown'}" for a in blocked)
        fault = SynchronizationFault(f"deadlock among {len(blocked)} tasks: {detail}")
        if self._fault is None:
            self._fault = fault
        for actor in self._actors.values():
            actor.event.set()
        if raise_here:
            raise fault
