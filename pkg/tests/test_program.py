import random

import pytest

from acs_sim.program import (CallGraphProgram, CallSite, FunctionDef, MalformedProgram,
                             function_of, off_graph_program, random_program,
                             recursive_loader_program, sibling_calls_program, site_address,
                             tail_call_program)


def test_from_calls_assigns_distinct_sites():
    p = sibling_calls_program()
    func = p.by_name("func")
    assert [p.fn(cs.callee).name for cs in func.call_sites] == ["a", "b"]
    sites = p.return_sites()
    assert len(sites) == sum(len(f.call_sites) for f in p.functions.values())
    assert all(function_of(r) in p.functions for r in sites)


def test_path_to_and_is_path():
    p = recursive_loader_program()
    path = p.path_to(p.by_name("M").id)
    cur = p.entry
    rets = []
    for k in path:
        cs = p.fn(cur).call_sites[k]
        rets.append(cs.ret_addr)
        cur = cs.callee
    assert cur == p.by_name("M").id
    assert p.is_path(rets)
    assert not p.is_path(rets[1:])


def test_edges_follow_callees():
    p = off_graph_program()
    a, c = p.by_name("A"), p.by_name("C")
    ret_a = a.call_sites[0].ret_addr
    assert (p.fn(p.entry).call_sites[0].ret_addr, ret_a) in p.edges()
    assert (ret_a, c.call_sites[0].ret_addr) in p.edges()


def test_tail_calls_recorded():
    p = tail_call_program()
    a = p.by_name("A")
    assert [p.fn(t).name for t in a.tail_calls] == ["B"]
    assert p.by_name("B").is_leaf


@pytest.mark.parametrize("funcs", [
    [FunctionDef(1, "f", (CallSite(9, site_address(1, 0)),))],
    [FunctionDef(1, "f", (CallSite(1, site_address(2, 0)),))],
    [FunctionDef(0, "f")],
    [FunctionDef(1, "f"), FunctionDef(1, "g")],
    [FunctionDef(1, "f", (CallSite(1, site_address(1, 0)), CallSite(1, site_address(1, 0))))],
])
def test_malformed_programs_rejected(funcs):
    with pytest.raises(MalformedProgram):
        CallGraphProgram(funcs)


def test_unreachable_function():
    p = CallGraphProgram.from_calls({"main": [], "lonely": []}, entry="main")
    with pytest.raises(MalformedProgram):
        p.path_to(p.by_name("lonely").id)


def test_random_programs_well_formed():
    rng = random.Random(1)
    for _ in range(200):
        p = random_program(rng, rng.randint(1, 10), 3)
        assert p.fn(p.entry).call_sites
