"""Compare the three countermeasure presets against the unmitigated case.

    python3 demos/countermeasures.py

Case 2 lowers the tap-changer setpoint by 5 % at 300 s. Case 3 halves the
PLL bandwidth. Case 4 adds a grid-forming battery next to the inverter plant.
Each run takes 20 to 35 s.
"""

from mtsdyn.engine import run_scenario
from mtsdyn.reduced_system import TRIP_TIME, build_preset


def window_mean(ts, channel, t0, t1):
    return float(ts[channel][ts.window(t0, t1)].mean())


results = {}
for case in (1, 2, 3, 4):
    results[case] = run_scenario(build_preset(case))
    r = results[case]
    print(f"case {case}: verdict {r.verdict:7s} hopf crossings "
          f"{sum(c.kind == 'hopf' for c in r.crossings)}  final PLL swing {r.limit_cycle.amplitude:.3g}")

ts = results[2].timeseries
before = window_mean(ts, "zone_load_MW", 280, 300)
after = window_mean(ts, "zone_load_MW", 500, 600)
print()
print(f"Voltage reduction: zone load {before:.1f} MW before, {after:.1f} MW after. "
      f"Corridor voltage V_M {window_mean(ts, 'V_M', 280, 300):.3f} -> {window_mean(ts, 'V_M', 500, 600):.3f} pu.")
back = [c for c in results[2].crossings if c.direction < 0]
if back:
    print(f"The eigen scan reports the equilibrium regaining damping at {back[0].time:.0f} s, yet the")
    print("oscillation carries on: the trajectory stays on a limit cycle that surrounds a")
    print("stable equilibrium, so lowering the setpoint alone does not pull it back.")
else:
    print("The oscillation carries on at the new long-term operating point.")

ts = results[4].timeseries
pre = (0.0, TRIP_TIME - 0.1)
post = (TRIP_TIME + 9.0, TRIP_TIME + 10.5)
for name in ("bess", "ibr"):
    q0 = window_mean(ts, f"{name}.Q", *pre)
    q1 = window_mean(ts, f"{name}.Q", *post)
    print(f"{name:5s} reactive output {q0:+.3f} -> {q1:+.3f} pu (system base)")
print("The grid-forming unit takes the larger share of the extra reactive demand after the trip.")
