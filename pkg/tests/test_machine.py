import random

import pytest
from hypothesis import given, settings, strategies as st

from acs_sim.machine import (Call, DoCall, DoReturn, Hook, IllFormedTrace, JmpBuf,
                             LongJmp, Machine, MachineHalted, ProcessTreeKilled, Return, Scheme,
                             SigReturn, Termination, TranslationFault, new_machine)
from acs_sim.pac import DEFAULT_LAYOUT, PacKey, mac_token, pac_add
from acs_sim.program import (CallGraphProgram, fork_server_program, off_graph_program, random_program,
                             sibling_calls_program)
from acs_sim.workloads import random_trace, run_everywhere

from conftest import CASES

LO = DEFAULT_LAYOUT.pac_lo


def _first_ret(p):
    return p.fn(p.entry).call_sites[0].ret_addr


def test_nomask_chain_base():
    p = sibling_calls_program()
    m = Machine(p, "acs-nomask", rng_seed=5)
    m.call_site(0)
    ret0 = _first_ret(p)
    assert m.memory[0] == 0
    assert m.cr == pac_add(PacKey.from_seed(5), DEFAULT_LAYOUT, ret0, 0)


def test_full_chain_base_is_masked():
    p = sibling_calls_program()
    m = Machine(p, "acs-full", rng_seed=5)
    key = PacKey.from_seed(5)
    m.call_site(0)
    ret0 = _first_ret(p)
    mask = mac_token(key, 0, 0) << LO
    assert m.cr == pac_add(key, DEFAULT_LAYOUT, ret0, 0) ^ mask
    m.call_site(0)
    # the stored word is the masked predecessor
    assert m.memory[1] == pac_add(key, DEFAULT_LAYOUT, ret0, 0) ^ mask


def test_sp_modifier_equal_sp_equal_words():
    p = sibling_calls_program()
    m = Machine(p, "sp-modifier", rng_seed=1)
    m.call_site(0)
    m.call_site(0)
    wa = m.memory[1]
    m.do_return()
    m.call_site(1)
    wb = m.memory[1]
    key = PacKey.from_seed(1)
    func = p.by_name("func")
    assert wa == pac_add(key, DEFAULT_LAYOUT, func.call_sites[0].ret_addr, 1)
    assert wb == pac_add(key, DEFAULT_LAYOUT, func.call_sites[1].ret_addr, 1)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_benign_returns_match_calls(scheme):
    p = off_graph_program()
    m = Machine(p, scheme, rng_seed=3)
    rets = []
    for k in p.path_to(p.by_name("M").id):
        rets.append(m.call_site(k).ret_addr)
    for r in reversed(rets):
        assert m.do_return() == Return(r)


def test_tamper_faults_under_full():
    p = off_graph_program()
    m = Machine(p, "acs-full", rng_seed=2)
    for k in p.path_to(p.by_name("L").id):
        m.call_site(k)
    v = m.adversary()
    v.write(v.sp - 1, v.read(v.sp - 1) ^ (1 << (LO + 3)))
    ev = m.do_return()
    assert isinstance(ev, TranslationFault)
    with pytest.raises(MachineHalted):
        m.do_return()


def test_shadow_stack_ignores_stack_copy():
    p = off_graph_program()
    m = Machine(p, "shadow-stack")
    m.call_site(0)
    ev = m.trace[-1]
    v = m.adversary()
    v.write(v.sp - 1, 0xDEAD0)
    assert m.do_return() == Return(ev.ret_addr)


def test_cr_not_adversary_accessible():
    m = Machine(sibling_calls_program())
    v = m.adversary()
    with pytest.raises(PermissionError):
        v.read_cr()
    with pytest.raises(PermissionError):
        v.write_cr(0)


def test_stack_overflow_terminates():
    p = CallGraphProgram.from_calls({"f": ["f"]}, entry="f")
    m = Machine(p, stack_words=4)
    evs = [m.call_site(0) for _ in range(5)]
    assert all(isinstance(e, Call) for e in evs[:4])
    assert isinstance(evs[-1], Termination) and evs[-1].cause == "stack_overflow"


def test_mask_never_at_rest():
    rng = random.Random(11)
    for _ in range(300):
        prog = random_program(rng, rng.randint(2, 8), 3)
        m = Machine(prog, "acs-full", rng_seed=rng.getrandbits(32))
        masks = set()

        def look(view, m=m, masks=masks):
            assert m.x15 == 0
            for slot in m._frames:
                masks.add(m._token(0, m.memory[slot]) << LO)
            live = set(m.memory[:m.sp])
            assert not (live & (masks - {0}))

        acts = random_trace(prog, rng, 30, irregular=False)
        hooked = []
        for a in acts:
            hooked += [a, Hook(look)]
        m.run_trace(hooked)


def test_setjmp_longjmp_round_trip():
    p = off_graph_program()
    m = Machine(p, "acs-full", rng_seed=4)
    m.call_site(0)
    buf = m.do_setjmp()
    target = m.trace[-1].ret_addr
    cr, sp = m.cr, m.sp
    m.call_site(0)
    m.call_site(0)
    assert m.do_longjmp(buf) == LongJmp(target)
    assert (m.cr, m.sp, m.depth) == (cr, sp, 1)
    assert isinstance(m.do_return(), Return)


def test_longjmp_replay_of_live_frame_accepted():
    p = off_graph_program()
    m = Machine(p, "acs-full", rng_seed=4)
    m.call_site(0)
    early = m.do_setjmp()
    want = m.trace[-1].ret_addr
    m.call_site(0)
    late = m.do_setjmp()
    v = m.adversary()
    for off in (JmpBuf.ARET_B, JmpBuf.SAVED_CR, JmpBuf.SAVED_SP):
        v.write(late.addr + off, v.read(early.addr + off))
    assert m.do_longjmp(late) == LongJmp(want)


def test_forged_jmpbuf_terminates():
    p = off_graph_program()
    m = Machine(p, "acs-full", rng_seed=4)
    m.call_site(0)
    buf = m.do_setjmp()
    v = m.adversary()
    v.write(buf.addr, v.read(buf.addr) ^ 0x10)
    ev = m.do_longjmp(buf)
    assert isinstance(ev, Termination) and ev.cause == "longjmp_auth_fail"


def test_nested_signals_unwind_in_order():
    p = off_graph_program()
    m = Machine(p, "acs-full", rng_seed=9)
    m.call_site(0)
    f1 = m.signal_deliver(0x100010)
    m.call_site(0)
    f2 = m.signal_deliver(0x100020)
    f3 = m.signal_deliver(0x100030)
    assert m.sigreturn(f3) == SigReturn(0x100030)
    assert m.sigreturn(f2) == SigReturn(0x100020)
    m.do_return()
    assert m.sigreturn(f1) == SigReturn(0x100010)
    assert isinstance(m.do_return(), Return)


def test_forged_sigreturn_pc_terminates():
    m = Machine(off_graph_program(), "acs-full", rng_seed=9)
    m.call_site(0)
    f = m.signal_deliver()
    m.adversary().write(f.addr, 0x100040)
    ev = m.sigreturn(f)
    assert isinstance(ev, Termination) and ev.cause == "sigreturn_auth_fail"


def test_reseed_separates_children():
    p = fork_server_program()
    parent = Machine(p, "acs-full", rng_seed=1, reseed_on_fork=True)
    parent.call_site(0)
    parent.call_site(0)
    a, b = parent.fork(1), parent.fork(2)
    assert a.cr != b.cr
    assert a.memory[0] == 1 and b.memory[0] == 2
    for child in (a, b):
        assert isinstance(child.do_return(), Return)
        assert isinstance(child.do_return(), Return)
        assert child.cr == child.seed_init


def test_reseed_zero_is_noop():
    p = fork_server_program()
    m = Machine(p, "acs-full", rng_seed=1)
    m.call_site(0)
    m.call_site(0)
    cr, mem = m.cr, list(m.memory)
    m.reseed(0)
    assert (m.cr, m.memory) == (cr, mem)


def test_strict_fault_kills_siblings_lenient_does_not():
    p = fork_server_program()
    for model, killed in (("strict", True), ("lenient", False)):
        parent = Machine(p, "acs-full", rng_seed=1, process_model=model)
        parent.call_site(0)
        parent.call_site(0)
        child = parent.fork(1)
        v = child.adversary()
        v.write(v.sp - 1, v.read(v.sp - 1) ^ (1 << LO))
        child.do_return()
        assert parent.tree_killed is killed
        if killed:
            with pytest.raises(ProcessTreeKilled):
                parent.fork(2)
        else:
            parent.fork(2)


def test_clean_exit_keeps_tree():
    p = fork_server_program()
    parent = Machine(p, "acs-full")
    child = parent.fork(1)
    child.terminate("exit")
    assert not parent.tree_killed


def test_ill_formed_traces_rejected():
    m = Machine(sibling_calls_program())
    with pytest.raises(IllFormedTrace):
        m.run_trace([DoCall(5)])
    with pytest.raises(IllFormedTrace):
        m.run_trace([DoReturn()])
    assert m.trace == []


def test_silent_hooks_change_nothing():
    rng = random.Random(5)
    for _ in range(200):
        prog = random_program(rng, rng.randint(2, 8), 3)
        acts = random_trace(prog, rng, 30)
        seed = rng.getrandbits(32)
        plain = Machine(prog, "acs-full", rng_seed=seed).run_trace(acts)
        hooked = []
        for a in acts:
            hooked += [Hook(lambda v: v.read(v.sp - 1) if v.sp else None), a]
        assert Machine(prog, "acs-full", rng_seed=seed).run_trace(hooked) == plain


@settings(max_examples=CASES)
@given(st.integers(0, 2 ** 32 - 1))
def test_non_interference_property(seed):
    rng = random.Random(seed)
    prog = random_program(rng, rng.randint(2, 8), 3)
    acts = random_trace(prog, rng, 30)
    res = run_everywhere(prog, acts, key_seed=rng.getrandbits(32), seed_init=rng.getrandbits(64))
    first = res[Scheme.UNINSTRUMENTED]
    assert all(v == first for v in res.values())


@settings(max_examples=CASES)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([Scheme.ACS_NOMASK, Scheme.ACS_FULL]))
def test_chain_soundness_property(seed, scheme):
    rng = random.Random(seed)
    prog = random_program(rng, rng.randint(2, 8), 3)
    m = Machine(prog, scheme, rng_seed=seed, seed_init=rng.getrandbits(64))
    m.run_trace(random_trace(prog, rng, 30, irregular=False))
    while m.depth:
        assert isinstance(m.do_return(), Return)
    assert m.cr == m.seed_init


def test_new_machine_helper():
    m = new_machine(sibling_calls_program(), "shadow-stack")
    assert m.scheme is Scheme.SHADOW_STACK
    with pytest.raises(ValueError):
        Scheme.parse("nope")
