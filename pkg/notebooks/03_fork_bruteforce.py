# Brute force across forked siblings: does re-seeding the chain per child
# cost the adversary the expected factor?
# Run: python3 notebooks/03_fork_bruteforce.py
import numpy as np

from acs_sim import analytics, attacks
from acs_sim.attacks import MachineFactory
from acs_sim.machine import Scheme
from acs_sim.pac import PointerLayout
from acs_sim.program import fork_server_program

fac = MachineFactory(fork_server_program(), Scheme.ACS_FULL, PointerLayout(39, 4),
                     process_model="lenient")
plain = attacks.attack_fork_bruteforce(fac, reseeded=False, max_guesses=None, trials=2000, seed=3)
fresh = attacks.attack_fork_bruteforce(fac, reseeded=True, max_guesses=None, trials=500, seed=3)
dc, joint = analytics.fork_guess_means(4)
print(f"shared chain : {plain.mean_guesses:7.2f} guesses (geometric model {dc})")
print(f"re-seeded    : {fresh.mean_guesses:7.2f} guesses (geometric model {joint})")
print(f"ratio        : {fresh.mean_guesses / plain.mean_guesses:7.2f}")

# 2-stage attack: each stage is a 1/16 event per attempt
g = np.random.default_rng(0)
sim = g.geometric(1 / 16, size=(100_000, 2)).sum(axis=1) - 1
print("numpy two-stage geometric mean:", sim.mean().round(2))
