"""Plan experiment 1 with both sampling planners and write a per-step CSV for plotting."""

import sys
import tempfile
from pathlib import Path

from armplan.bench import export_trajectory, load_experiment, run_trial

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
out.mkdir(parents=True, exist_ok=True)
exp = load_experiment(1)
for planner in ("rrt", "birrt"):
    log = out / f"exp1_{planner}.jsonl"
    rec = run_trial(exp, planner, seed=0, trajectory_path=str(log))
    n = export_trajectory(log, out / f"exp1_{planner}.csv")
    print(f"{planner:6s} success={rec.success} path={rec.path_length_m:.2f} m "
          f"compute={rec.planner_compute_s:.3f} s exec={rec.sim_exec_s:.2f} s rows={n}")
print("written to", out)
