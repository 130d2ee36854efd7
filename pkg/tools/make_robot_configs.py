"""Regenerate the bundled robot JSON files.

D-H values follow the vendor data sheets (UR5: Universal Robots published
parameters; KR 16: KUKA KR 16-2 dimensions). Capsules follow the D-H skeleton.
"""

import json
import math
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "armplan" / "data" / "robots"
PI = math.pi


def skeleton_capsules(rows, radii):
    caps = []
    for i, ((off, d, a, alpha), r) in enumerate(zip(rows, radii), start=1):
        ca, sa = math.cos(-alpha), math.sin(-alpha)

        def rx(p):
            return [p[0], ca * p[1] - sa * p[2], sa * p[1] + ca * p[2]]

        start = rx([-a, 0.0, -d])
        knee = rx([-a, 0.0, 0.0])
        if i == 1 and abs(d) > r:
            # keep the column's end cap above the mounting plane
            start = rx([-a, 0.0, -d + math.copysign(r, d)])
        if abs(d) > 1e-9:
            caps.append({"link": i, "p0": start, "p1": knee, "radius": r})
        if abs(a) > 1e-9:
            caps.append({"link": i, "p0": knee, "p1": [0.0, 0.0, 0.0], "radius": r})
    return [{k: (np.round(v, 6).tolist() if isinstance(v, list) else v) for k, v in c.items()}
            for c in caps]


def sensors(tool_len, tool_radius):
    return {
        "max_range": 0.4,
        "bundles": [
            {"name": "wrist", "mount": "wrist", "kind": "cone_rings", "axial": False,
             "rings": [
                 {"axis": [0, 0, 1], "polar_deg": 40, "count": 12, "azimuth_step_deg": 30,
                  "azimuth_offset_deg": 0},
                 {"axis": [0, 0, -1], "polar_deg": 40, "count": 12, "azimuth_step_deg": 30,
                  "azimuth_offset_deg": 0}]},
            {"name": "ee_surface", "mount": "ee_surface", "kind": "cylinder",
             "stations": 8, "azimuth_step_deg": 45, "per_station": 10,
             "radius": tool_radius, "z_min": 0.0, "z_max": tool_len},
            {"name": "ee_tip", "mount": "ee_tip", "kind": "cone_rings", "axial": True,
             "rings": [
                 {"axis": [0, 0, 1], "polar_deg": 20, "count": 12, "azimuth_step_deg": 30,
                  "azimuth_offset_deg": 0},
                 {"axis": [0, 0, 1], "polar_deg": 20, "count": 12, "azimuth_step_deg": 30,
                  "azimuth_offset_deg": 15}]},
        ],
    }


def robot(name, rows, limits, tool_len, tool_radius, radii, home, base_rpy, skip, base_cap):
    ee = np.eye(4)
    ee[2, 3] = tool_len
    caps = [base_cap] + skeleton_capsules(rows, radii)
    caps.append({"link": 6, "p0": [0.0, 0.0, 0.0], "p1": [0.0, 0.0, tool_len],
                 "radius": tool_radius})
    return {
        "name": name,
        "dh_rows": [dict(zip(("theta_offset", "d", "a", "alpha"), r)) for r in rows],
        "joint_limits": limits,
        "ee_transform": ee.reshape(-1).tolist(),
        "base_transform": {"xyz": [0, 0, 0], "rpy": base_rpy},
        "home": home,
        "link_capsules": caps,
        "self_collision_skip": skip,
        "sensor_frames": {
            "wrist": {"link": 4},
            "ee_surface": {"link": 6},
            "ee_tip": {"link": "ee"},
        },
        "sensors": sensors(tool_len, tool_radius),
    }


UR5_ROWS = [(0, 0.089159, 0, PI / 2), (0, 0, -0.425, 0), (0, 0, -0.39225, 0),
            (0, 0.10915, 0, PI / 2), (0, 0.09465, 0, -PI / 2), (0, 0.0823, 0, 0)]
KR16_ROWS = [(0, 0.675, 0.26, -PI / 2), (0, 0, 0.68, 0), (-PI / 2, 0, 0.035, -PI / 2),
             (0, 0.67, 0, PI / 2), (0, 0, 0, -PI / 2), (0, 0.158, 0, 0)]

ur5 = robot(
    "ur5", UR5_ROWS, [[-PI, PI]] * 6, 0.12, 0.035,
    [0.06, 0.055, 0.05, 0.045, 0.045, 0.04],
    [0.0, -PI / 2, PI / 2, -PI / 2, -PI / 2, 0.0], [0, 0, PI],
    [[0, 2]],
    {"link": 0, "p0": [0, 0, 0.08], "p1": [0, 0, 0.09], "radius": 0.075})
kr16 = robot(
    "kr16", KR16_ROWS,
    [[-PI, PI], [-2.70, 0.61], [-2.27, 2.69], [-PI, PI], [-2.27, 2.27], [-PI, PI]],
    0.2, 0.04,
    [0.13, 0.11, 0.09, 0.07, 0.06, 0.05],
    [0.0, -1.35, 1.75, 0.0, -0.4, 0.0], [0, 0, 0],
    # links 3 and 5 have (near) zero length: 2-4 and 4-6 always touch
    [[0, 2], [2, 4], [4, 6]],
    {"link": 0, "p0": [0, 0, 0.21], "p1": [0, 0, 0.3], "radius": 0.2})

if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for cfg in (ur5, kr16):
        (OUT / f"{cfg['name']}.json").write_text(json.dumps(cfg, indent=1) + "\n")
        print("wrote", cfg["name"])
