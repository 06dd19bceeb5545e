# The two security games side by side, masked vs unmasked.
# Run: python3 notebooks/04_games.py
from acs_sim import analytics, games
from acs_sim.pac import PointerLayout

lay = PointerLayout(39, 8)
print(" q   collision(unmasked)  birthday+guess   collision(masked)")
for q in (4, 16, 32, 64):
    u = games.game_pac_collision(lay, q, False, 4000, seed=q)
    m = games.game_pac_collision(lay, q, True, 4000, seed=q)
    p = analytics.p_collision(q, 8)
    print(f"{q:3d}  {u.rate:19.4f}  {p + (1 - p) / 256:14.4f}  {m.rate:18.4f}")

for masked in (True, False):
    r = games.game_acs(q=32, trials=4000, seed=1, layout=lay, masked=masked)
    print(f"call-stack game, masked={masked}: win rate {r.rate:.4f} (2^-8 = {2 ** -8:.4f})")
