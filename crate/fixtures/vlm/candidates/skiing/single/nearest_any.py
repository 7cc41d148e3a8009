import json
import math
import sys


def run(frame):
    w, h = frame["image_width"], frame["image_height"]
    objs = frame["objects"]
    res = {
        "position_of_skier_x": None,
        "position_of_skier_y": None,
        "position_of_next_gate_x": None,
        "position_of_next_gate_y": None,
        "distance_to_next_gate": None,
        "position_of_trees_below_skier_x": None,
        "position_of_trees_below_skier_y": None,
    }
    skier = next((o for o in sorted(objs, key=lambda o: -o["area"]) if o["color_label"] == "red"), None)
    if skier is None:
        return res
    sx, sy = skier["centroid"]
    res["position_of_skier_x"] = sx / w
    res["position_of_skier_y"] = sy / h
    poles = [o["centroid"] for o in objs if o["color_label"] == "blue"]
    gates = []
    for i, a in enumerate(poles):
        for b in poles[i + 1:]:
            if abs(a[1] - b[1]) < 3:
                gates.append(((a[0] + b[0]) / 2, (a[1] + b[1]) / 2))
    if gates:
        gx, gy = min(gates, key=lambda g: abs(g[1] - sy))
        res["position_of_next_gate_x"] = gx / w
        res["position_of_next_gate_y"] = gy / h
        res["distance_to_next_gate"] = math.hypot((gx - sx) / w, (gy - sy) / h)
    trees = [o["centroid"] for o in objs if o["color_label"] == "dark-green" and o["centroid"][1] > sy]
    if trees:
        tx, ty = min(trees, key=lambda t: t[1])
        res["position_of_trees_below_skier_x"] = tx / w
        res["position_of_trees_below_skier_y"] = ty / h
    return res


print(json.dumps({"features": run(json.load(sys.stdin))}))
