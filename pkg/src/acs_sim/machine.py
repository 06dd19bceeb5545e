"""
Abstract call machine executing call/return traces over adversary-writable
stack memory.

The machine works at the granularity of semantic call and return steps. The
register file (``lr``, ``cr``, ``x15``), the shadow stack and the key are
private; everything in ``memory`` is reachable through :class:`AdversaryView`.
Adversary hooks run between steps, i.e. exactly where memory is at rest.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

from .pac import (DEFAULT_LAYOUT, WORD_MASK, MacFunction, PacKey, PointerLayout,
                  aut, is_canonical, mix64_mac, pac_add)
from .program import SETJMP_SITE, SITE_SHIFT, CallGraphProgram, function_of

SIGNAL_PC_OFFSET = 0x8


class Scheme(enum.Enum):
    UNINSTRUMENTED = "uninstrumented"
    SP_MODIFIER = "sp-modifier"
    ACS_NOMASK = "acs-nomask"
    ACS_FULL = "acs-full"
    SHADOW_STACK = "shadow-stack"

    @property
    def is_acs(self) -> bool:
        return self in (Scheme.ACS_NOMASK, Scheme.ACS_FULL)

    @classmethod
    def parse(cls, name: Union[str, "Scheme"]) -> "Scheme":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        for s in cls:
            if s.value == key or s.name.lower().replace("_", "-") == key:
                return s
        raise ValueError(f"unknown scheme {name!r}")


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Call:
    ret_addr: int


@dataclass(frozen=True)
class Return:
    to_addr: int


@dataclass(frozen=True)
class TailCall:
    callee: int


@dataclass(frozen=True)
class TranslationFault:
    addr: int


@dataclass(frozen=True)
class Termination:
    cause: str


@dataclass(frozen=True)
class SetJmp:
    ret_addr: int


@dataclass(frozen=True)
class LongJmp:
    to_addr: int


@dataclass(frozen=True)
class SignalDeliver:
    pc: int


@dataclass(frozen=True)
class SigReturn:
    to_addr: int


Event = Union[Call, Return, TailCall, TranslationFault, Termination, SetJmp,
              LongJmp, SignalDeliver, SigReturn]
TERMINAL_EVENTS = (TranslationFault, Termination)


# ---------------------------------------------------------------------------
# saved-environment records (handles into adversary-visible memory)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JmpBuf:
    """Address of a three-word record: bound return value, saved CR, saved SP."""
    addr: int
    ARET_B = 0
    SAVED_CR = 1
    SAVED_SP = 2
    SIZE = 3


@dataclass(frozen=True)
class SignalFrame:
    """Address of a signal frame on the stack: pc, previous reference, saved CR."""
    addr: int
    PC = 0
    PREV_REF = 1
    SAVED_CR = 2
    SIZE = 3


class MachineHalted(RuntimeError):
    pass


class ProcessTreeKilled(RuntimeError):
    pass


class _Tree:
    # shared by a process and all of its forked descendants
    __slots__ = ("killed",)

    def __init__(self):
        self.killed = False


# ---------------------------------------------------------------------------
# trace actions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoCall:
    site: int


@dataclass(frozen=True)
class DoReturn:
    pass


@dataclass(frozen=True)
class DoTailCall:
    index: int = 0


@dataclass(frozen=True)
class DoSetJmp:
    pass


@dataclass(frozen=True)
class DoLongJmp:
    index: int  # which earlier DoSetJmp in this trace


@dataclass(frozen=True)
class Hook:
    fn: Callable[["AdversaryView"], None]


@dataclass(frozen=True)
class DoFork:
    pid: int


@dataclass(frozen=True)
class DoSignal:
    pc: Optional[int] = None


@dataclass(frozen=True)
class DoSigReturn:
    pass


@dataclass(frozen=True)
class DoExit:
    pass


Action = Union[DoCall, DoReturn, DoTailCall, DoSetJmp, DoLongJmp, Hook, DoFork,
               DoSignal, DoSigReturn, DoExit]


class IllFormedTrace(ValueError):
    pass


# ---------------------------------------------------------------------------
# the machine
# ---------------------------------------------------------------------------

class Machine:
    def __init__(self, program: CallGraphProgram, scheme: Union[Scheme, str] = Scheme.ACS_FULL,
                 layout: PointerLayout = DEFAULT_LAYOUT, rng_seed: int = 0, *,
                 seed_init: int = 0, stack_words: int = 256, data_words: int = 64,
                 max_depth: Optional[int] = None, process_model: str = "strict",
                 mac: Optional[MacFunction] = None, cr_writable: bool = False,
                 reseed_on_fork: bool = False, key: Optional[PacKey] = None):
        if not isinstance(program, CallGraphProgram):
            raise TypeError("program must be a CallGraphProgram")
        if process_model not in ("strict", "lenient"):
            raise ValueError(f"unknown process model {process_model!r}")
        self.program = program
        self.scheme = Scheme.parse(scheme)
        self.layout = layout
        self.mac = mac or mix64_mac
        self._key = key if key is not None else PacKey.from_seed(rng_seed)
        self.rng_seed = rng_seed
        self.seed_init = seed_init & WORD_MASK
        self.stack_words = stack_words
        self.max_depth = stack_words if max_depth is None else max_depth
        self.process_model = process_model
        self.cr_writable = cr_writable
        self.reseed_on_fork = reseed_on_fork
        self.pid = 0

        self.memory: List[int] = [0] * (stack_words + data_words)
        self._data_next = stack_words
        self.lr = 0
        self.cr = self.seed_init
        self.sp = 0
        self.x15 = 0
        self._shadow: List[int] = []
        self._frames: List[int] = []  # stack slot of every live call frame
        self._sig_ref: Optional[int] = None  # kernel-private reference token
        self._sig_depth = 0  # kernel-private count of pending signal frames
        self.trace: List[Event] = []
        self.current_fn = program.entry
        self.halted = program.entry is None
        self._tree = _Tree()

    # -- helpers ----------------------------------------------------------

    @property
    def depth(self) -> int:
        return len(self._frames)

    @property
    def tree_killed(self) -> bool:
        return self._tree.killed

    def _pac(self, ptr, mod):
        return pac_add(self._key, self.layout, ptr, mod, self.mac)

    def _aut(self, word, mod):
        return aut(self._key, self.layout, word, mod, self.mac)

    def _token(self, value, mod):
        return self.mac(self._key, value & WORD_MASK, mod & WORD_MASK, self.layout.pac_bits)

    def _emit(self, ev):
        self.trace.append(ev)
        if isinstance(ev, TERMINAL_EVENTS):
            self.halted = True
            # a clean exit does not take siblings down
            clean = isinstance(ev, Termination) and ev.cause == "exit"
            if self.process_model == "strict" and not clean:
                self._tree.killed = True
        return ev

    def _check_running(self):
        if self.halted:
            raise MachineHalted("machine has halted")
        if self._tree.killed:
            raise ProcessTreeKilled("process tree was terminated")

    def _fault_or(self, addr, ok_event):
        if is_canonical(self.layout, addr):
            return self._emit(ok_event)
        return self._emit(TranslationFault(addr))

    def _enter(self, addr):
        fid = function_of(addr)
        self.current_fn = fid if self.program.has_function(fid) else None

    # -- instrumentation sequences ---------------------------------------

    def _chain(self, ret, prev):
        """Next chain value for return address ``ret`` over ``prev``."""
        new = self._pac(ret, prev)
        if self.scheme is Scheme.ACS_FULL:
            self.x15 = self._token(0, prev) << self.layout.pac_lo
            new ^= self.x15
            self.x15 = 0
        return new

    def _prologue(self, lr):
        slot = self.sp
        mem = self.memory
        s = self.scheme
        if s.is_acs:
            mem[slot] = self.cr
            self.cr = self._chain(lr, self.cr)
        elif s is Scheme.SP_MODIFIER:
            mem[slot] = self._pac(lr, slot)
        elif s is Scheme.SHADOW_STACK:
            mem[slot] = lr
            self._shadow.append(lr)
        else:
            mem[slot] = lr
        self._frames.append(slot)
        self.sp = slot + 1

    def _epilogue(self):
        slot = self._frames.pop()
        self.sp = slot
        w = self.memory[slot]
        s = self.scheme
        if s.is_acs:
            cr = self.cr
            if s is Scheme.ACS_FULL:
                self.x15 = self._token(0, w) << self.layout.pac_lo
                cr ^= self.x15
                self.x15 = 0
            lr = self._aut(cr, w)
            self.cr = w
        elif s is Scheme.SP_MODIFIER:
            lr = self._aut(w, slot)
        elif s is Scheme.SHADOW_STACK:
            lr = self._shadow.pop()
        else:
            lr = w
        self.lr = lr
        return lr

    # -- operations -----------------------------------------------------

    def do_call(self, ret_addr: int) -> Event:
        self._check_running()
        if not is_canonical(self.layout, ret_addr):
            raise ValueError(f"return address {ret_addr:#x} is not canonical")
        if len(self._frames) >= self.max_depth or self.sp >= self.stack_words:
            return self._emit(Termination("stack_overflow"))
        self.lr = ret_addr
        self._prologue(ret_addr)
        return self._emit(Call(ret_addr))

    def call_site(self, index: int) -> Event:
        """Call through site ``index`` of the current function."""
        site = self.program.fn(self.current_fn).call_sites[index]
        ev = self.do_call(site.ret_addr)
        if isinstance(ev, Call):
            self.current_fn = site.callee
        return ev

    def do_return(self) -> Event:
        self._check_running()
        if not self._frames:
            raise ValueError("return with no active frame")
        lr = self._epilogue()
        ev = self._fault_or(lr, Return(lr))
        if isinstance(ev, Return):
            self._enter(lr)
        return ev

    def do_tail_call(self, index: int = 0) -> Event:
        """Epilogue without the return branch, then the callee's prologue
        re-signs whatever landed in LR."""
        self._check_running()
        if not self._frames:
            raise ValueError("tail call with no active frame")
        callee = self.program.fn(self.current_fn).tail_calls[index]
        lr = self._epilogue()
        self._prologue(lr)
        self.current_fn = callee
        return self._emit(TailCall(callee))

    def _alloc(self, n: int) -> int:
        addr = self._data_next
        if addr + n > len(self.memory):
            raise MemoryError("data region exhausted")
        self._data_next = addr + n
        return addr

    def do_setjmp(self, ret_addr: Optional[int] = None) -> JmpBuf:
        self._check_running()
        if ret_addr is None:
            ret_addr = (self.current_fn << 20) | (SETJMP_SITE << SITE_SHIFT)
        buf = JmpBuf(self._alloc(JmpBuf.SIZE))
        mem = self.memory
        if self.scheme.is_acs:
            # bind the return address to CR and SP across the full word
            mem[buf.addr] = self._pac(ret_addr, self.cr) ^ self._pac(self.sp, self.cr)
        else:
            mem[buf.addr] = ret_addr
        mem[buf.addr + JmpBuf.SAVED_CR] = self.cr
        mem[buf.addr + JmpBuf.SAVED_SP] = self.sp
        self._emit(SetJmp(ret_addr))
        return buf

    def do_longjmp(self, buf: JmpBuf) -> Event:
        self._check_running()
        mem = self.memory
        aret_b = mem[buf.addr]
        saved_cr = mem[buf.addr + JmpBuf.SAVED_CR]
        saved_sp = mem[buf.addr + JmpBuf.SAVED_SP]
        if self.scheme.is_acs:
            target = self._aut(aret_b ^ self._pac(saved_sp, saved_cr), saved_cr)
            if not is_canonical(self.layout, target):
                return self._emit(Termination("longjmp_auth_fail"))
        else:
            target = aret_b
        if not 0 <= saved_sp <= self.stack_words:
            return self._emit(TranslationFault(saved_sp))
        self.sp = saved_sp
        self.cr = saved_cr
        keep = 0
        while keep < len(self._frames) and self._frames[keep] < saved_sp:
            keep += 1
        del self._frames[keep:]
        del self._shadow[keep:]
        ev = self._fault_or(target, LongJmp(target))
        if isinstance(ev, LongJmp):
            self._enter(target)
        return ev

    def reseed(self, seed_id: int) -> None:
        """Restart the chain from ``seed_id``, rewriting every live frame."""
        self.seed_init = seed_id & WORD_MASK
        if not self.scheme.is_acs:
            return
        mem = self.memory
        frames = self._frames
        prev = self.seed_init
        for k, slot in enumerate(frames):
            mem[slot] = prev
            nxt = mem[frames[k + 1]] if k + 1 < len(frames) else self.cr
            addr = nxt & self.layout.addr_mask
            prev = self._chain(addr, prev)
        self.cr = prev

    def fork(self, pid: int) -> "Machine":
        """Child process sharing the key; reseeded from ``pid`` if configured."""
        self._check_running()
        child = object.__new__(Machine)
        child.__dict__.update(self.__dict__)
        child.memory = list(self.memory)
        child._shadow = list(self._shadow)
        child._frames = list(self._frames)
        child.trace = list(self.trace)
        child.pid = pid
        if self.reseed_on_fork:
            child.reseed(pid)
        return child

    def signal_deliver(self, pc: Optional[int] = None) -> SignalFrame:
        self._check_running()
        if pc is None:
            pc = (self.current_fn << 20) | SIGNAL_PC_OFFSET
        if self.sp + SignalFrame.SIZE > self.stack_words:
            self._emit(Termination("stack_overflow"))
            raise MachineHalted("no room for a signal frame")
        frame = SignalFrame(self.sp)
        mem = self.memory
        if self._sig_ref is None:
            ref = self._token(pc, self.cr)
            prev = 0
        else:
            prev = self._sig_ref
            ref = self._token(pc, prev)
        mem[frame.addr + SignalFrame.PC] = pc
        mem[frame.addr + SignalFrame.PREV_REF] = prev
        mem[frame.addr + SignalFrame.SAVED_CR] = self.cr
        self._sig_ref = ref
        self._sig_depth += 1
        self.sp += SignalFrame.SIZE
        self._emit(SignalDeliver(pc))
        return frame

    def sigreturn(self, frame: SignalFrame) -> Event:
        self._check_running()
        mem = self.memory
        pc = mem[frame.addr + SignalFrame.PC]
        prev = mem[frame.addr + SignalFrame.PREV_REF]
        saved_cr = mem[frame.addr + SignalFrame.SAVED_CR]
        if self._sig_depth == 0:
            return self._emit(Termination("sigreturn_without_signal"))
        if self.scheme.is_acs:
            # The kernel knows whether a handler was already running when this
            # frame was delivered, so each frame gets exactly one check.
            ref = self._sig_ref
            if self._sig_depth == 1:
                ok = self._token(pc, saved_cr) == ref
                new_ref = None
            else:
                ok = self._token(pc, prev) == ref
                new_ref = prev
            if not ok:
                return self._emit(Termination("sigreturn_auth_fail"))
            self._sig_ref = new_ref
        self._sig_depth -= 1
        self.cr = saved_cr
        self.sp = frame.addr
        ev = self._fault_or(pc, SigReturn(pc))
        if isinstance(ev, SigReturn):
            self._enter(pc)
        return ev

    def terminate(self, cause: str = "exit") -> Event:
        self._check_running()
        return self._emit(Termination(cause))

    def adversary(self) -> "AdversaryView":
        return AdversaryView(self)

    # -- trace driver ---------------------------------------------------

    def validate_trace(self, actions: Sequence[Action]) -> None:
        """Reject traces that do not respect the program's call sites."""
        prog = self.program
        cur = self.current_fn
        stack = []  # (function id, frame uid)
        uid = 0
        jumps = []
        sigs = []
        for n, a in enumerate(actions):
            if isinstance(a, DoCall):
                if cur is None or not 0 <= a.site < len(prog.fn(cur).call_sites):
                    raise IllFormedTrace(f"action {n}: no call site {a.site} in function {cur}")
                uid += 1
                stack.append((cur, uid))
                cur = prog.fn(cur).call_sites[a.site].callee
            elif isinstance(a, DoReturn):
                if not stack:
                    raise IllFormedTrace(f"action {n}: return with no frame")
                cur = stack.pop()[0]
            elif isinstance(a, DoTailCall):
                if cur is None or not 0 <= a.index < len(prog.fn(cur).tail_calls) or not stack:
                    raise IllFormedTrace(f"action {n}: no tail call {a.index} in function {cur}")
                cur = prog.fn(cur).tail_calls[a.index]
            elif isinstance(a, DoSetJmp):
                jumps.append((tuple(stack), cur))
            elif isinstance(a, DoLongJmp):
                if not 0 <= a.index < len(jumps):
                    raise IllFormedTrace(f"action {n}: unknown setjmp {a.index}")
                saved, saved_cur = jumps[a.index]
                if tuple(stack[:len(saved)]) != saved:
                    raise IllFormedTrace(f"action {n}: setjmp frame {a.index} has expired")
                stack = list(saved)
                cur = saved_cur
            elif isinstance(a, DoSignal):
                sigs.append((tuple(stack), cur))
            elif isinstance(a, DoSigReturn):
                if not sigs or tuple(stack) != sigs[-1][0]:
                    raise IllFormedTrace(f"action {n}: sigreturn without a matching signal")
                cur = sigs.pop()[1]
            elif isinstance(a, (Hook, DoFork, DoExit)):
                pass
            else:
                raise IllFormedTrace(f"action {n}: unknown action {a!r}")

    def run_trace(self, actions: Sequence[Action]) -> List[Event]:
        """Validate, then execute ``actions`` in order until a terminal event."""
        self.validate_trace(actions)
        start = len(self.trace)
        bufs = []
        frames = []
        view = AdversaryView(self)
        for a in actions:
            if self.halted:
                break
            if isinstance(a, DoCall):
                self.call_site(a.site)
            elif isinstance(a, DoReturn):
                self.do_return()
            elif isinstance(a, DoTailCall):
                self.do_tail_call(a.index)
            elif isinstance(a, DoSetJmp):
                bufs.append(self.do_setjmp())
            elif isinstance(a, DoLongJmp):
                self.do_longjmp(bufs[a.index])
            elif isinstance(a, Hook):
                a.fn(view)
            elif isinstance(a, DoFork):
                # execution continues in the child
                self.pid = a.pid
                if self.reseed_on_fork:
                    self.reseed(a.pid)
            elif isinstance(a, DoSignal):
                frames.append(self.signal_deliver(a.pc))
            elif isinstance(a, DoSigReturn):
                self.sigreturn(frames.pop())
            elif isinstance(a, DoExit):
                self.terminate("exit")
        return self.trace[start:]


class AdversaryView:
    """Arbitrary read/write over process memory; no registers, no key."""

    __slots__ = ("_m",)

    def __init__(self, machine: Machine):
        self._m = machine

    def __len__(self):
        return len(self._m.memory)

    @property
    def sp(self) -> int:
        # the stack pointer value is observable (it is spilled all over memory)
        return self._m.sp

    @property
    def scheme(self) -> Scheme:
        return self._m.scheme

    @property
    def layout(self) -> PointerLayout:
        return self._m.layout

    def read(self, addr: int) -> int:
        return self._m.memory[addr]

    def write(self, addr: int, word: int) -> None:
        self._m.memory[addr] = word & WORD_MASK

    def read_cr(self) -> int:
        if not self._m.cr_writable:
            raise PermissionError("registers are not accessible")
        return self._m.cr

    def write_cr(self, word: int) -> None:
        if not self._m.cr_writable:
            raise PermissionError("registers are not accessible")
        self._m.cr = word & WORD_MASK


def new_machine(program: CallGraphProgram, scheme: Union[Scheme, str] = Scheme.ACS_FULL,
                layout: PointerLayout = DEFAULT_LAYOUT, rng_seed: int = 0, **kw) -> Machine:
    return Machine(program, scheme, layout, rng_seed, **kw)
