# Walk through one call chain by hand and watch what lands on the stack.
# Run: python3 notebooks/01_chain_walkthrough.py
from acs_sim import Machine, PointerLayout
from acs_sim.pac import mac_token
from acs_sim.program import off_graph_program

prog = off_graph_program()
lay = PointerLayout(39, 16)

# Same program, same key, two chain flavours.
for scheme in ("acs-nomask", "acs-full"):
    m = Machine(prog, scheme, lay, rng_seed=42)
    print(f"--- {scheme}")
    for k in prog.path_to(prog.by_name("L").id):
        ev = m.call_site(k)
        slot = m.sp - 1
        print(f"call -> ret {ev.ret_addr:#012x}  stored[{slot}] = {m.memory[slot]:#018x}")
    # the stored words are what an adversary with memory access sees
    toks = [m.memory[i] >> lay.pac_lo for i in range(m.sp)]
    print("stored tokens:", [hex(t) for t in toks])
    while m.depth:
        print("return:", m.do_return())

# Under masking the word at rest carries H(ret, prev) ^ H(0, prev).
# Equal stored tokens therefore say nothing about equal MACs.
m = Machine(prog, "acs-full", lay, rng_seed=42)
m.call_site(0)
m.call_site(0)
key = m._key
w = m.memory[1]
print("mask for the next frame:", hex(mac_token(key, 0, w, lay)))
print("scratch register after use:", m.x15)
