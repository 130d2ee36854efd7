"""Regenerate the bundled experiment scene files exp1.json ... exp7.json.

Dimensions are reconstructions (plates and shelf are not dimensioned in the
source figures); each file's ``notes`` field records the assumptions.
"""

import json
import math
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "armplan" / "data" / "scenes"
PI = math.pi

UR5_HOME = [0.0, -PI / 2, PI / 2, -PI / 2, -PI / 2, 0.0]
KR16_HOME = [0.0, -1.35, 1.75, 0.0, -0.4, 0.0]
UR5_BOUNDS = [[-0.3, 0.95], [-0.8, 0.8], [0.0, 0.95]]
KR16_BOUNDS = [[-0.5, 2.1], [-1.2, 1.2], [0.2, 2.0]]


def floor(cx, half):
    return {"kind": "box", "name": "floor", "pose": {"xyz": [cx, 0, -0.06]},
            "half_extents": [half, half, 0.05]}


def plate(name, xyz, half, rpy=(0, 0, 0), track=None):
    out = {"kind": "plate", "name": name, "pose": {"xyz": list(xyz), "rpy": list(rpy)},
           "half_extents": list(half)}
    if track:
        out["track"] = track
    return out


def shelf():
    t = 0.015
    x0, depth = 1.55, 0.40
    xc = x0 + depth / 2
    kids = [
        # bottom, middle, top shelves
        {"kind": "plate", "pose": {"xyz": [0, 0, z]}, "half_extents": [depth / 2, 0.45 + t, t]}
        for z in (-0.45, 0.0, 0.45)
    ] + [
        # left, centre, right uprights
        {"kind": "plate", "pose": {"xyz": [0, y, 0]}, "half_extents": [depth / 2, t, 0.45 + t]}
        for y in (-0.45, 0.0, 0.45)
    ] + [
        {"kind": "plate", "pose": {"xyz": [depth / 2 - t, 0, 0]}, "half_extents": [t, 0.45, 0.45]},
    ]
    return {"kind": "compound", "name": "shelf", "pose": {"xyz": [xc, 0, 1.05]}, "children": kids}


SHELF_NOTE = ("Replica of the KR 16 shelf task: 2x2 openings of 0.42 m x 0.42 m, 0.40 m deep, "
              "front face at x = 1.55 m, panels 0.03 m thick, centre at z = 1.05 m. Goal sits "
              "0.15 m inside the opening. Dimensions are assumptions.")

# (y, z) of the four openings, numbered row by row from the top left
OPENINGS = {4: (0.225, 1.275), 5: (-0.225, 1.275), 6: (0.225, 0.825), 7: (-0.225, 0.825)}

SCENES = {
    "exp1": {
        "robot": "ur5", "start_config": UR5_HOME, "goals": [[0.45, -0.32, 0.15]],
        "workspace_bounds": UR5_BOUNDS,
        "notes": "Single vertical metal plate (0.36 m wide, 0.26 m tall, 1 cm thick) between "
                 "start and goal; the end effector has to rise over it. Table surface at z=-0.01.",
        "obstacles": [floor(0.3, 1.0), plate("plate", [0.45, -0.12, 0.12], [0.18, 0.005, 0.13])],
    },
    "exp2": {
        "robot": "ur5", "start_config": UR5_HOME,
        "goals": [[0.45, -0.32, 0.15], [0.15, -0.45, 0.15]],
        "workspace_bounds": UR5_BOUNDS,
        "notes": "Exp 1 plus a second plate (normal along x) and a second goal reached after the "
                 "first. Dimensions are assumptions.",
        "obstacles": [floor(0.3, 1.0), plate("plate", [0.45, -0.12, 0.12], [0.18, 0.005, 0.13]),
                      plate("plate2", [0.30, -0.42, 0.12], [0.005, 0.14, 0.13])],
    },
    "exp3": {
        "robot": "ur5", "start_config": UR5_HOME, "goals": [[0.45, -0.30, 0.15]],
        "workspace_bounds": UR5_BOUNDS,
        "notes": "Moving plate (0.2 m/s along +x) covers the goal at t=0 and clears it after "
                 "about 1.2 s, then stays parked. Dimensions and path are assumptions.",
        "obstacles": [floor(0.3, 1.0), plate(
            "moving_plate", [0.45, -0.30, 0.14], [0.15, 0.005, 0.14],
            track={"waypoints": [[0.0, 0.45, -0.30, 0.14], [2.0, 0.85, -0.30, 0.14]],
                   "loop": False})],
    },
}
for exp, (y, z) in OPENINGS.items():
    SCENES[f"exp{exp}"] = {
        "robot": "kr16", "start_config": KR16_HOME, "goals": [[1.70, y, z]],
        "workspace_bounds": KR16_BOUNDS,
        "notes": SHELF_NOTE + f" Opening {exp - 3} of 4.",
        "obstacles": [floor(0.8, 1.6), shelf()],
    }

if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for name, data in SCENES.items():
        (OUT / f"{name}.json").write_text(json.dumps({"name": name, **data}, indent=1) + "\n")
        print("wrote", name)
